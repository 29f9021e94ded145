#include <gtest/gtest.h>

#include <cmath>

#include "sdn/solvers.hpp"
#include "test_support.hpp"

using namespace sdn;

namespace {

SolveConfig unclamped(int iterations = 10) {
  SolveConfig c;
  c.iterations = iterations;
  c.clamp_output = false;
  return c;
}

SolveConfig tight(int iterations) {
  SolveConfig c = unclamped(iterations);
  c.residual_tolerance = 1e-12;
  return c;
}

Image clean(std::size_t n, std::uint64_t seed) { return fixture::random_image(n, n, 1, 50, 200, seed); }

}  // namespace

TEST(SolveGaussianConst, ZeroScoreGivesY) {
  const Image y = fixture::random_image(4, 4, 1, -20, 280, 1);
  EXPECT_EQ(solve_gaussian_const(y, ScoreField(y.shape()), table_row(1), unclamped()).estimate, y);
}

TEST(SolveGaussianConst, InvertsConditionalScoreExactly) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Image x0 = clean(8, seed);
    std::mt19937_64 rng(seed);
    const Image y = sample_noisy(x0, table_row(1), rng);
    ScoreField s(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) s[i] = -(y[i] - x0[i]) / 625.0;
    const auto rep = solve_gaussian_const(y, s, table_row(1), unclamped());
    EXPECT_LE(max_abs_diff(rep.estimate, x0), 1e-9);
    EXPECT_EQ(rep.iterations_used, 1);
  }
}

TEST(SolveGaussianConst, CorrelatedRoundTrip) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Image x0 = clean(16, seed);
    std::mt19937_64 rng(seed);
    const Image y = sample_noisy(x0, table_row(2), rng);
    const auto rep = solve_gaussian_const(y, cond_score(x0, y, table_row(2)), table_row(2), unclamped());
    EXPECT_LE(max_abs_diff(rep.estimate, x0), 1e-6);
  }
}

TEST(SolveGaussianConst, TweedieBitIdentical) {
  const Image y = fixture::random_image(6, 6, 1, 0, 255, 4);
  const ScoreField s = fixture::random_field(6, 6, -0.1, 0.1, 5);
  const auto rep = solve_gaussian_const(y, s, table_row(1), unclamped());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(rep.estimate[i], y[i] + 625.0 * s[i]);
}

TEST(SolveSignalDep, ZeroScoreFixedPoint) {
  const Image y = clean(4, 2);
  EXPECT_EQ(solve_gaussian_signal_dep(y, ScoreField(y.shape()), table_row(3), unclamped(7)).estimate, y);
}

TEST(SolveSignalDep, DegenerateMatchesConstant) {
  const Image y = fixture::random_image(8, 8, 1, 0, 255, 3);
  const ScoreField s = fixture::random_field(8, 8, -0.05, 0.05, 4);
  const auto a = solve_gaussian_signal_dep(y, s, signal_dependent_noise(0.0, 25.0), unclamped());
  const auto b = solve_gaussian_const(y, s, gaussian_noise(25.0), unclamped());
  EXPECT_LE(max_abs_diff(a.estimate, b.estimate), 1e-9);
  const auto ac = solve_gaussian_signal_dep(y, s, signal_dependent_noise(0.0, 25.0, default_kernel()), unclamped());
  const auto bc = solve_gaussian_const(y, s, gaussian_noise(25.0, default_kernel()), unclamped());
  EXPECT_LE(max_abs_diff(ac.estimate, bc.estimate), 1e-9);
}

TEST(SolveSignalDep, SmallPerturbationConverges) {
  for (int row : {3, 4}) {
    const auto spec = table_row(row);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Image x0 = clean(8, seed);
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> n(0.0, 1.0);
      Image y = x0;
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += 0.05 * (0.98 * x0[i] + 25.0) * n(rng);
      const ScoreField s = cond_score(x0, y, spec);
      double prev = max_abs_diff(y, x0);
      for (int it = 1; it <= 10; ++it) {
        SolveConfig c = unclamped(it);
        c.residual_tolerance = 0.0;
        const auto rep = solve_gaussian_signal_dep(y, s, spec, c);
        const double err = max_abs_diff(rep.estimate, x0);
        EXPECT_LE(err, prev + 1e-12);
        prev = err;
      }
      const auto rep = solve_gaussian_signal_dep(y, s, spec, unclamped(10));
      EXPECT_LT(rep.final_residual, 1e-3) << row;
    }
  }
}

TEST(SolveSignalDep, DivergenceReported) {
  const Image y(2, 2, 1, 100.0);
  const ScoreField s(y.shape(), std::vector<double>(4, 1e306));
  EXPECT_THROW(solve_gaussian_signal_dep(y, s, table_row(3), unclamped()), DivergenceError);
}

TEST(SolveGamma, ZeroScoreExample) {
  const auto rep = solve_gamma(Image(1, 1, 1, 100.0), ScoreField(Shape{1, 1, 1}), 26.0);
  EXPECT_NEAR(rep.estimate[0], 104.0, 1e-12);
}

TEST(SolveGamma, InvertsExactly) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Image x0 = clean(8, seed);
    std::mt19937_64 rng(seed);
    const Image y = sample_noisy(x0, table_row(5), rng);
    const auto rep = solve_gamma(y, cond_score(x0, y, table_row(5)), 26.0, unclamped());
    EXPECT_LE(max_abs_diff(rep.estimate, x0), 1e-9);
    EXPECT_TRUE(rep.converged);
  }
}

TEST(SolveGamma, SingularDenominator) {
  Image y(1, 2, 1, 100.0);
  ScoreField s(y.shape());
  s[1] = 25.0 / 100.0;
  try {
    solve_gamma(y, s, 26.0);
    FAIL();
  } catch (const SingularityError& e) {
    EXPECT_NE(std::string(e.what()).find("1 pixel"), std::string::npos);
  }
}

TEST(SolveGamma, NegativeDenominatorClampedAndFlagged) {
  ScoreField s(Shape{1, 1, 1});
  s[0] = 1.0;
  const auto rep = solve_gamma(Image(1, 1, 1, 100.0), s, 26.0);
  EXPECT_EQ(rep.estimate[0], 0.0);
  EXPECT_EQ(rep.flagged_pixels, 1u);
}

TEST(SolvePoisson, Examples) {
  EXPECT_NEAR(solve_poisson(Image(1, 1, 1, 100.0), ScoreField(Shape{1, 1, 1}), 0.2).estimate[0], 102.5, 1e-12);
  ScoreField s(Shape{1, 1, 1});
  s[0] = 0.2 * std::log(2.0);
  EXPECT_NEAR(solve_poisson(Image(1, 1, 1, 0.0), s, 0.2).estimate[0], 5.0, 1e-12);
}

TEST(SolvePoisson, InvertsExactlyAndOverflow) {
  const Image x0 = clean(8, 3);
  std::mt19937_64 rng(3);
  const Image y = sample_noisy(x0, table_row(7), rng);
  EXPECT_LE(max_abs_diff(solve_poisson(y, cond_score(x0, y, table_row(7)), 0.2, unclamped()).estimate, x0), 1e-9);
  ScoreField big(Shape{1, 1, 1});
  big[0] = 200.0;
  EXPECT_THROW(solve_poisson(Image(1, 1, 1, 1.0), big, 0.2), NumericalError);
}

TEST(SolveRayleigh, ZeroScoreExample) {
  const auto rep = solve_rayleigh(Image(1, 1, 1, 130.0), ScoreField(Shape{1, 1, 1}), 0.3);
  EXPECT_NEAR(rep.estimate[0], 100.0, 1e-12);
}

TEST(SolveRayleigh, ResidualConvergesAndRecoversClean) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Image x0 = clean(8, seed);
    std::mt19937_64 rng(seed);
    const Image y = sample_noisy(x0, table_row(9), rng);
    const auto rep = solve_rayleigh(y, cond_score(x0, y, table_row(9)), 0.3, tight(100));
    EXPECT_LT(rep.final_residual, 1e-6);
    EXPECT_LT(max_abs_diff(rep.estimate, x0), 1e-3);
  }
}

TEST(SolveRayleigh, NonPositiveYRejected) {
  EXPECT_THROW(solve_rayleigh(Image(1, 1, 1, 0.0), ScoreField(Shape{1, 1, 1}), 0.3), DomainError);
}

TEST(SolveCorrelated, IdentityKernelEqualsInner) {
  const Image y = clean(8, 5);
  const ScoreField s = fixture::random_field(8, 8, -0.01, 0.01, 6);
  InnerSolver inner = [](const Image& z, const ScoreField& st) { return solve_gamma(z, st, 26.0, unclamped()); };
  EXPECT_EQ(solve_correlated(y, s, identity_kernel(), inner).estimate, inner(y, s).estimate);
}

TEST(SolveCorrelated, RoundTripAllCorrelatedMultiplicativeRows) {
  for (int row : {6, 8, 10}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto spec = table_row(row);
      const Image x0 = clean(16, seed);
      std::mt19937_64 rng(seed);
      const Image y = sample_noisy(x0, spec, rng);
      const auto rep = solve_correlated(y, cond_score(x0, y, spec), spec, tight(100));
      EXPECT_LE(max_abs_diff(rep.estimate, x0), 1e-6) << row;
      EXPECT_LT(rep.final_residual, 1e-6) << row;
    }
  }
}

TEST(SolveCorrelated, ConstantImageStaysConstant) {
  const auto spec = table_row(6);
  const Image x0(8, 8, 1, 90.0);
  const Image y = conv_apply(Image(8, 8, 1, 100.0), default_kernel());
  const auto rep = solve_correlated(y, cond_score(x0, y, spec), spec, unclamped());
  for (double v : rep.estimate.values()) EXPECT_NEAR(v, 90.0, 1e-9);
}

TEST(SolveMixture, ZeroAdditiveEqualsPure) {
  for (int row : {5, 7, 9}) {
    const Image x0 = clean(8, 1);
    std::mt19937_64 rng(1);
    const Image y = sample_noisy(x0, table_row(row), rng);
    const ScoreField s = cond_score(x0, y, table_row(row));
    NoiseModelSpec m = table_row(row);
    m.additive_sigma = 0.0;
    EXPECT_EQ(solve_mixture(y, s, m, unclamped()).estimate, solve(y, s, table_row(row), unclamped()).estimate);
  }
}

TEST(SolveMixture, ZeroScorePoisson) {
  const Image y = clean(4, 7);
  const auto rep = solve_mixture(y, ScoreField(y.shape()), table_row(13), unclamped());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(rep.estimate[i], y[i] + 2.5, 1e-12);
}

TEST(SolveMixture, SingleAtomErrorShrinksWithSigma) {
  const Image atom = fixture::random_image(2, 2, 1, 80, 160, 9);
  const auto prior = DiscretePrior::uniform({atom});
  double prev = std::numeric_limits<double>::infinity();
  for (double sigma : {10.0, 5.0, 2.5, 1.25}) {
    const auto spec = gamma_noise(26.0, std::nullopt, sigma);
    double err = 0.0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      std::mt19937_64 rng(seed);
      const Image y = sample_noisy(atom, spec, rng);
      const auto rep = solve_mixture(y, analytic_score(y, prior, spec), spec, unclamped());
      err += max_abs_diff(rep.estimate, atom) / 40.0;
    }
    EXPECT_LT(err, prev) << sigma;
    prev = err;
  }
}

TEST(Solve, HonestResidual) {
  for (int row = 1; row <= 10; ++row) {
    const auto spec = table_row(row);
    const Image x0 = clean(8, static_cast<std::uint64_t>(row));
    std::mt19937_64 rng(static_cast<std::uint64_t>(row));
    const Image y = sample_noisy(x0, spec, rng);
    ScoreField s = cond_score(x0, y, spec);
    for (auto& v : s.values()) v *= 1.01;  // off the exact root so the residual is non-trivial
    SolveConfig c = unclamped(3);
    c.residual_tolerance = 0.0;
    const auto rep = solve(y, s, spec, c);
    if (!in_support(rep.estimate, y, spec)) continue;
    const ScoreField f = cond_score(rep.estimate, y, spec);
    double r = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) r = std::max(r, std::abs(s[i] - f[i]));
    EXPECT_NEAR(rep.final_residual, r, 1e-12) << row;
  }
}

TEST(Denoise, SingleAtomOracleGivesAtom) {
  const Image atom = clean(8, 4);
  const auto spec = table_row(1);
  const OracleEstimator est(DiscretePrior::uniform({atom}), spec);
  std::mt19937_64 rng(4);
  const Image y = sample_noisy(atom, spec, rng);
  EXPECT_LE(max_abs_diff(denoise(y, est, spec).estimate, atom), 1e-9);
}

TEST(Denoise, AllRowsDispatch) {
  for (int row = 1; row <= kNumTableRows; ++row) {
    const auto spec = table_row(row);
    const Image atom = clean(4, 10);
    const OracleEstimator est(DiscretePrior::uniform({atom}), spec);
    std::mt19937_64 rng(static_cast<std::uint64_t>(row));
    const Image y = sample_noisy(atom, spec, rng);
    EXPECT_NO_THROW(denoise(y, est, spec)) << row;
  }
}

TEST(Denoise, TwoAtomOracleImprovesPsnr) {
  const auto spec = table_row(1);
  const Image a = fixture::random_image(4, 4, 1, 40, 120, 1);
  const Image b = fixture::random_image(4, 4, 1, 130, 220, 2);
  const OracleEstimator est(DiscretePrior::uniform({a, b}), spec);
  std::mt19937_64 rng(11);
  int better = 0;
  for (int k = 0; k < 200; ++k) {
    const Image& truth = (k % 2) ? a : b;
    const Image y = sample_noisy(truth, spec, rng);
    if (psnr(truth, denoise(y, est, spec).estimate) > psnr(truth, y)) ++better;
  }
  EXPECT_GE(better, 190);
}

TEST(SolveConfig, Validation) {
  SolveConfig c;
  c.iterations = 0;
  EXPECT_THROW(solve_gamma(Image(1, 1, 1, 1.0), ScoreField(Shape{1, 1, 1}), 26.0, c), ParameterError);
  EXPECT_THROW(solve_gaussian_const(Image(1, 1), ScoreField(Shape{1, 1, 1}), table_row(5)), ConfigError);
}
