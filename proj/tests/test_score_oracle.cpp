#include <gtest/gtest.h>

#include <cmath>

#include "sdn/score_oracle.hpp"
#include "test_support.hpp"

using namespace sdn;

namespace {

DiscretePrior three_atoms(std::uint64_t seed) {
  return DiscretePrior::normalized({fixture::random_image(4, 4, 1, 40, 200, seed),
                                    fixture::random_image(4, 4, 1, 40, 200, seed + 1),
                                    fixture::random_image(4, 4, 1, 40, 200, seed + 2)},
                                   {0.5, 0.3, 0.2});
}

}  // namespace

TEST(DiscretePrior, Validation) {
  EXPECT_THROW(DiscretePrior({}, {}), ParameterError);
  EXPECT_THROW(DiscretePrior({Image(2, 2)}, {0.9}), ParameterError);
  EXPECT_THROW(DiscretePrior({Image(2, 2), Image(2, 2)}, {1.5, -0.5}), ParameterError);
  EXPECT_THROW(DiscretePrior::uniform({Image(2, 2), Image(3, 2)}), ShapeError);
}

TEST(Oracle, SingleAtomGaussianIsConditionalScore) {
  const Image x(4, 4, 1, 100.0);
  const auto prior = DiscretePrior::uniform({x});
  std::mt19937_64 rng(1);
  const Image y = sample_noisy(x, table_row(1), rng);
  EXPECT_LT(max_abs_diff(analytic_score(y, prior, table_row(1)), cond_score(x, y, table_row(1))), 1e-15);
}

TEST(Oracle, TwoAtomOneDimensionalClosedForm) {
  // p(y) = 0.5 N(y; -1, 1) + 0.5 N(y; 1, 1): score = tanh(y) - y.
  const auto prior = DiscretePrior::uniform({Image(1, 1, 1, -1.0), Image(1, 1, 1, 1.0)});
  for (double y : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
    const auto s = analytic_score(Image(1, 1, 1, y), prior, gaussian_noise(1.0));
    EXPECT_NEAR(s[0], std::tanh(y) - y, 1e-14);
  }
}

TEST(Oracle, PosteriorSumsToOneAndFarAtomsUnderflowGracefully) {
  const auto prior = DiscretePrior::uniform({Image(1, 1, 1, 0.0), Image(1, 1, 1, 1e4)});
  const auto p = posterior_score(Image(1, 1, 1, 0.0), prior, gaussian_noise(1.0));
  EXPECT_NEAR(p.posterior[0] + p.posterior[1], 1.0, 1e-15);
  EXPECT_EQ(p.posterior[0], 1.0);
  EXPECT_TRUE(std::isfinite(p.log_marginal));
}

TEST(Oracle, AllWeightsOutsideSupportThrows) {
  const auto prior = DiscretePrior::uniform({Image(1, 1, 1, 100.0)});
  EXPECT_THROW(posterior_score(Image(1, 1, 1, 50.0), prior, table_row(9)), NumericalError);
}

TEST(FiniteDiff, QuadraticIsExact) {
  const Image y = fixture::random_image(3, 3, 1, -5, 5, 3);
  const auto s = finite_diff_score(y, [](const Image& v) {
    double q = 0.0;
    for (double t : v.values()) q -= 0.5 * t * t;
    return q;
  });
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(s[i], -y[i], 1e-9);
}

class ScoreIdentity : public ::testing::TestWithParam<int> {};

TEST_P(ScoreIdentity, AnalyticScoreMatchesGradientOfLogMarginal) {
  const int row = GetParam();
  std::mt19937_64 rng(static_cast<std::uint64_t>(row) * 7);
  const auto spec = table_row(row);
  const double err = check_theorem1(three_atoms(static_cast<std::uint64_t>(row) * 11), spec, 3, rng, 1e-4);
  EXPECT_LT(err, 1e-6) << "row " << row;
}

INSTANTIATE_TEST_SUITE_P(NonMixtureRows, ScoreIdentity, ::testing::Range(1, 11));

TEST(ScoreIdentityMixture, QuadratureScoreMatchesGradientOfLogMarginal) {
  for (int row : {11, 13, 15}) {
    const auto spec = table_row(row);
    const auto prior = DiscretePrior::normalized(
        {fixture::random_image(2, 2, 1, 60, 160, 1), fixture::random_image(2, 2, 1, 60, 160, 2)}, {0.6, 0.4});
    std::mt19937_64 rng(static_cast<std::uint64_t>(row));
    const Image y = sample_noisy(prior.atoms()[0], spec, rng);
    const auto lhs = finite_diff_score(y, [&](const Image& v) { return log_marginal(v, prior, spec); }, 1e-3);
    EXPECT_LT(max_abs_diff(lhs, analytic_score(y, prior, spec)), 1e-6) << "row " << row;
  }
}

TEST(ScoreIdentityMixture, CheckerRejectsMixtures) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(check_theorem1(DiscretePrior::uniform({Image(2, 2, 1, 10.0)}), table_row(11), 1, rng), ParameterError);
}

TEST(Estimator, OracleEstimatorAndShapeCheck) {
  const auto prior = three_atoms(5);
  const OracleEstimator est(prior, table_row(1));
  const Image y = fixture::random_image(4, 4, 1, 40, 200, 77);
  EXPECT_EQ(estimate(est, y), analytic_score(y, prior, table_row(1)));
  EXPECT_THROW(estimate(est, Image(5, 4, 1, 1.0)), ShapeError);
}
