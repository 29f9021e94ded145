#pragma once

// Self-checking harness: score identities, solver round trips, conv and log-determinant
// identities, mixture Taylor-error curves and gradient checks, each reported as a measured
// quantity against a threshold. Also the parameter-disturbance robustness sweep.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sdn/ardae.hpp"
#include "sdn/autodiff.hpp"
#include "sdn/config.hpp"
#include "sdn/conv.hpp"
#include "sdn/image.hpp"
#include "sdn/mixture.hpp"
#include "sdn/noise.hpp"
#include "sdn/score_oracle.hpp"
#include "sdn/solvers.hpp"

namespace sdn {

struct VerificationReport {
  std::string check;
  std::string case_summary;
  double measured = 0.0;
  double threshold = 0.0;
  bool passed = false;

  friend bool operator==(const VerificationReport&, const VerificationReport&) = default;
};

inline VerificationReport make_report(std::string check, std::string summary, double measured, double threshold) {
  // NaN never passes.
  return {std::move(check), std::move(summary), measured, threshold, measured <= threshold};
}

/// "check,case,error,threshold,pass" with one row per report.
inline std::string reports_to_csv(const std::vector<VerificationReport>& reports) {
  std::string out = "check,case,error,threshold,pass\n";
  for (const auto& r : reports) {
    out += r.check + "," + r.case_summary + "," + format_real(r.measured) + "," + format_real(r.threshold) + "," +
           (r.passed ? "true" : "false") + "\n";
  }
  return out;
}

inline bool all_passed(const std::vector<VerificationReport>& reports) {
  return std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
}

using SolverFn = std::function<SolveReport(const Image&, const ScoreField&, const NoiseModelSpec&, const SolveConfig&)>;

struct VerifyOptions {
  int theorem_samples = 100;  ///< y draws per family in the score-identity sweep
  int inversion_cases = 200;  ///< random (x0, y) pairs per table row
  int taylor_samples = 8;
  /// Solver under test; replaced by mutation tests.
  SolverFn solver = [](const Image& y, const ScoreField& s, const NoiseModelSpec& spec, const SolveConfig& cfg) {
    return solve(y, s, spec, cfg);
  };
};

namespace detail {

inline Image uniform_image(std::size_t h, std::size_t w, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Image out(h, w, 1);
  for (auto& v : out.values()) v = u(rng);
  return out;
}

inline DiscretePrior random_prior(std::size_t atoms, std::size_t side, std::mt19937_64& rng) {
  std::vector<Image> xs;
  for (std::size_t i = 0; i < atoms; ++i) xs.push_back(uniform_image(side, side, 50.0, 200.0, rng));
  return DiscretePrior(std::move(xs), std::vector<double>(atoms, 1.0 / static_cast<double>(atoms)));
}

inline std::string row_label(int row) {
  const auto spec = table_row(row);
  std::string out = "row " + std::to_string(row) + " " + family_name(spec.family);
  if (spec.correlation && spec.is_multiplicative()) out += " correlated";
  if (spec.is_mixture()) out += " mixture";
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Individual checks

/// Marginal score identity per family: max |analytic - finite difference of log p(y)|.
inline std::vector<VerificationReport> check_score_identity(const VerifyOptions& opt, std::mt19937_64& rng) {
  std::vector<VerificationReport> out;
  for (int row : {1, 5, 7, 9, 2, 6, 8, 10}) {
    const auto spec = table_row(row);
    const bool correlated = spec.correlation.has_value();
    const int samples = correlated ? std::max(1, opt.theorem_samples / 5) : opt.theorem_samples;
    const auto prior = detail::random_prior(3, 4, rng);
    const double err = check_theorem1(prior, spec, samples, rng);
    const double thr = spec.is_gaussian() ? 1e-4 : 1e-3;
    out.push_back(make_report("score_identity", detail::row_label(row) + " 3 atoms 4x4 " + std::to_string(samples) +
                                                    " samples",
                              err, thr));
  }
  return out;
}

/// Solves with the exact conditional score of a known x0 and measures how well x0 comes back.
/// Closed forms must be exact; iterative solvers are judged by their residual; correlated
/// multiplicative rows by the recovered image.
inline std::vector<VerificationReport> check_solver_inversion(const VerifyOptions& opt, std::mt19937_64& rng) {
  SolveConfig cfg;
  cfg.iterations = 100;
  cfg.residual_tolerance = 1e-12;
  cfg.clamp_output = false;
  std::vector<VerificationReport> out;
  for (int row = 1; row <= 10; ++row) {
    const auto spec = table_row(row);
    const bool correlated = spec.correlation.has_value();
    const std::size_t side = correlated ? 16 : 8;
    const bool iterative = spec.is_signal_dependent() || (spec.family == NoiseFamily::Rayleigh && !correlated);
    double worst = 0.0;
    for (int k = 0; k < opt.inversion_cases; ++k) {
      const Image x0 = detail::uniform_image(side, side, 50.0, 200.0, rng);
      Image y = sample_noisy(x0, spec, rng);
      if (spec.is_signal_dependent()) {
        // The fixed point is only contractive near x0; shrink the noise to 5%.
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + 0.05 * (y[i] - x0[i]);
      }
      const ScoreField s = cond_score(x0, y, spec);
      double err = 0.0;
      try {
        const SolveReport r = opt.solver(y, s, spec, cfg);
        err = iterative ? r.final_residual : max_abs_diff(r.estimate, x0);
      } catch (const Error&) {
        err = std::numeric_limits<double>::infinity();
      }
      if (std::isnan(err)) err = std::numeric_limits<double>::infinity();
      worst = std::max(worst, err);
    }
    const bool closed = !iterative && !correlated;
    const double thr = closed ? 1e-9 : 1e-6;
    const std::string what = iterative ? "residual" : "max |x - x0|";
    out.push_back(make_report("solver_inversion",
                              detail::row_label(row) + " " + std::to_string(opt.inversion_cases) + " cases " +
                                  std::to_string(side) + "x" + std::to_string(side) + " " + what,
                              worst, thr));
  }
  return out;
}

/// Constant-Gaussian solve vs y + sigma^2 s: number of entries that differ in any bit.
inline VerificationReport check_tweedie(const VerifyOptions& opt, std::mt19937_64& rng) {
  const auto spec = table_row(1);
  SolveConfig cfg;
  cfg.clamp_output = false;
  std::normal_distribution<double> n(0.0, 0.05);
  double mismatches = 0.0;
  for (int k = 0; k < 100; ++k) {
    const Image y = detail::uniform_image(8, 8, 0.0, 255.0, rng);
    ScoreField s(y.shape());
    for (auto& v : s.values()) v = n(rng);
    Image expect(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) expect[i] = y[i] + 625.0 * s[i];
    try {
      const Image got = opt.solver(y, s, spec, cfg).estimate;
      for (std::size_t i = 0; i < y.size(); ++i) mismatches += got[i] == expect[i] ? 0.0 : 1.0;
    } catch (const Error&) {
      mismatches += static_cast<double>(y.size());
    }
  }
  return make_report("tweedie_bit_equality", "row 1 100 cases 8x8 mismatched entries", mismatches, 0.0);
}

inline std::vector<VerificationReport> check_conv(std::mt19937_64& rng) {
  const auto a = default_kernel();
  const Image x = detail::uniform_image(16, 16, 0.0, 255.0, rng);
  const Image v = detail::uniform_image(16, 16, 0.0, 255.0, rng);
  const double round_trip =
      std::max(max_abs_diff(conv_inverse_apply(conv_apply(x, a), a), x),
               max_abs_diff(conv_inverse_transpose_apply(conv_transpose_apply(x, a), a), x));
  const Image ax = conv_apply(x, a);
  const Image atv = conv_transpose_apply(v, a);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lhs += ax[i] * v[i];
    rhs += x[i] * atv[i];
  }
  // Log-determinant of A from its spectrum against a dense LU factorization.
  const Eigen::MatrixXd dense = detail::dense_conv_matrix(a, 6, 6);
  const double dense_logdet = dense.partialPivLu().matrixLU().diagonal().array().abs().log().sum();
  return {make_report("conv_round_trip", "default kernel 16x16 inverse and transpose", round_trip, 1e-8),
          make_report("conv_adjoint", "default kernel 16x16 relative", std::abs(lhs - rhs) / std::abs(lhs), 1e-12),
          make_report("conv_log_det", "default kernel 6x6 vs dense LU",
                      std::abs(conv_log_abs_det(a, 6, 6) - dense_logdet), 1e-9)};
}

/// Correlated conditional scores (pullback through A^-T) against finite differences of the
/// log-likelihood, relative to the largest score entry.
inline std::vector<VerificationReport> check_pullback(std::mt19937_64& rng) {
  std::vector<VerificationReport> out;
  for (int row : {2, 4, 6, 8, 10}) {
    const auto spec = table_row(row);
    const Image x = detail::uniform_image(4, 4, 50.0, 200.0, rng);
    const Image y = sample_noisy(x, spec, rng);
    const ScoreField a = cond_score(x, y, spec);
    const ScoreField fd = finite_diff_score(y, [&](const Image& v) { return log_likelihood(x, v, spec); }, 1e-4);
    double scale = 1.0;
    for (double v : a.values()) scale = std::max(scale, std::abs(v));
    out.push_back(make_report("score_pullback", detail::row_label(row) + " 4x4 relative", max_abs_diff(a, fd) / scale,
                              1e-6));
  }
  return out;
}

/// Mean |f(x, z) - exact grad_y log p(y | x)| per additive sigma, with z = y + sigma^2 s(y),
/// s the exact marginal score under `prior`, and the exact conditional score from quadrature.
/// Every sigma reuses the same random stream. Pixels where z leaves the support of the
/// multiplicative stage are skipped.
inline std::vector<std::pair<double, double>> mixture_taylor_curve(const NoiseModelSpec& base,
                                                                    const std::vector<double>& sigmas,
                                                                    const DiscretePrior& prior, int samples,
                                                                    std::mt19937_64& rng) {
  if (!base.is_multiplicative() || base.correlation) {
    throw ParameterError("mixture_taylor_curve needs an uncorrelated multiplicative base model");
  }
  if (samples < 1) throw ParameterError("mixture_taylor_curve needs samples >= 1");
  const NoiseModelSpec plain = without_additive(base);
  const std::mt19937_64 start = rng;
  std::vector<std::pair<double, double>> out;
  for (double sigma : sigmas) {
    std::mt19937_64 local = start;
    NoiseModelSpec spec = plain;
    spec.additive_sigma = sigma;
    spec.validate();
    std::discrete_distribution<std::size_t> pick(prior.weights().begin(), prior.weights().end());
    double total = 0.0;
    std::size_t count = 0;
    for (int k = 0; k < samples; ++k) {
      const Image& x = prior.atoms()[pick(local)];
      const Image y = sample_noisy(x, spec, local);
      const ScoreField s = analytic_score(y, prior, spec);
      const ScoreField exact = evaluate_conditional(x, y, spec).score;
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double z = y[i] + sigma * sigma * s[i];
        if (!detail::pixel_in_support(plain, x[i], z)) continue;
        total += std::abs(detail::multiplicative_pixel_score(plain, x[i], z) - exact[i]);
        ++count;
      }
    }
    if (count == 0) throw NumericalError("mixture_taylor_curve: no pixel inside the support at sigma " + format_real(sigma));
    out.emplace_back(sigma, total / static_cast<double>(count));
  }
  rng.discard(1);
  return out;
}

inline std::vector<VerificationReport> check_mixture_taylor(const VerifyOptions& opt, std::mt19937_64& rng) {
  std::vector<VerificationReport> out;
  for (int row : {11, 13}) {
    const auto spec = table_row(row);
    const auto prior = detail::random_prior(2, 4, rng);
    const auto curve = mixture_taylor_curve(spec, {10.0, 5.0, 2.5}, prior, opt.taylor_samples, rng);
    double ratio = 0.0;
    for (std::size_t k = 1; k < curve.size(); ++k) ratio = std::max(ratio, curve[k].second / curve[k - 1].second);
    // Strictly decreasing <=> every successive ratio is below 1.
    out.push_back(make_report("mixture_taylor_decrease",
                              detail::row_label(row) + " sigma 10/5/2.5 max successive error ratio", ratio,
                              std::nextafter(1.0, 0.0)));
    const auto limit = mixture_taylor_curve(spec, {1e-3}, prior, 2, rng);
    out.push_back(make_report("mixture_taylor_limit", detail::row_label(row) + " sigma 1e-3 mean error",
                              limit.front().second, 1e-3));
  }
  return out;
}

inline std::vector<VerificationReport> check_autodiff(std::mt19937_64& rng) {
  auto param = [&](std::vector<std::size_t> dims, double scale) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(ad::element_count(dims));
    for (auto& x : v) x = n(rng);
    return ad::parameter(std::move(dims), std::move(v));
  };
  const auto x = param({2, 4, 4}, 1.0);
  const auto x2 = param({2, 4, 4}, 1.0);
  const auto w = param({3, 2, 3, 3}, 0.5);
  const auto b = param({3}, 1.0);
  std::vector<VerificationReport> out;
  auto add = [&](const char* layer, const std::function<ad::Var()>& f, const std::vector<ad::Var>& leaves) {
    out.push_back(make_report("autodiff_gradient", std::string(layer) + " 4x4 relative", ad::gradient_check(f, leaves),
                              1e-4));
  };
  add("conv2d", [&] { return ad::mean_square(ad::conv2d(x, w, b)); }, {x, w, b});
  add("silu", [&] { return ad::mean_square(ad::silu(x)); }, {x});
  add("add", [&] { return ad::mean_square(ad::add(x, x2)); }, {x, x2});
  add("affine", [&] { return ad::mean_square(ad::affine(x, -1.3, 0.4)); }, {x});
  add("mean_of", [&] { return ad::mean_of({ad::mean_square(x), ad::mean_square(x2)}); }, {x, x2});

  NetConfig nc;
  nc.width = 3;
  nc.blocks = 0;
  nc.zero_init_output = false;
  const ScoreNet net(nc, rng());
  std::vector<Image> batch;
  for (int k = 0; k < 2; ++k) batch.push_back(detail::uniform_image(4, 4, 0.0, 1.0, rng));
  const std::uint64_t noise_seed = rng();
  add("ardae_loss two-layer net",
      [&] {
        std::mt19937_64 local(noise_seed);
        return ardae_loss(net, batch, 0.05, local);
      },
      net.parameters());
  return out;
}

/// Runs every check from one seed. Failures are reported, never thrown.
inline std::vector<VerificationReport> verify_all(std::uint64_t seed, const VerifyOptions& opt = {}) {
  std::vector<VerificationReport> out;
  auto append = [&](std::vector<VerificationReport> more) {
    for (auto& r : more) out.push_back(std::move(r));
  };
  // Each group gets its own stream so adding cases to one does not perturb the others.
  auto stream = [&](std::uint64_t k) { return std::mt19937_64(seed * 0x9e3779b97f4a7c15ULL + k); };
  auto guarded = [&](const char* name, const std::function<std::vector<VerificationReport>()>& f) {
    try {
      append(f());
    } catch (const std::exception& e) {
      out.push_back(make_report(name, std::string("exception: ") + e.what(), std::numeric_limits<double>::infinity(), 0.0));
    }
  };
  guarded("score_identity", [&] {
    auto r = stream(1);
    return check_score_identity(opt, r);
  });
  guarded("solver_inversion", [&] {
    auto r = stream(2);
    return check_solver_inversion(opt, r);
  });
  guarded("tweedie_bit_equality", [&] {
    auto r = stream(3);
    return std::vector{check_tweedie(opt, r)};
  });
  guarded("conv", [&] {
    auto r = stream(4);
    return check_conv(r);
  });
  guarded("score_pullback", [&] {
    auto r = stream(5);
    return check_pullback(r);
  });
  guarded("mixture_taylor", [&] {
    auto r = stream(6);
    return check_mixture_taylor(opt, r);
  });
  guarded("autodiff_gradient", [&] {
    auto r = stream(7);
    return check_autodiff(r);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Robustness to mis-specified noise parameters

struct CleanNoisyPair {
  Image clean;
  Image noisy;
};

/// For each rate r, denoises every noisy image with parameters disturbed by disturb_params
/// (one draw per image, the score estimator unchanged) and records the mean PSNR against the
/// clean image. Each rate reuses the same random stream, so r = 0 reproduces the undisturbed run.
inline std::vector<std::pair<double, double>> robustness_sweep(const NoiseModelSpec& spec, const std::vector<double>& rates,
                                                               const ScoreEstimator& estimator,
                                                               const std::vector<CleanNoisyPair>& dataset,
                                                               std::mt19937_64& rng, const SolveConfig& cfg = {}) {
  if (dataset.empty()) throw ParameterError("robustness_sweep needs a nonempty dataset");
  std::vector<ScoreField> scores;
  for (const auto& p : dataset) scores.push_back(estimate(estimator, p.noisy));
  const std::mt19937_64 start = rng;
  std::vector<std::pair<double, double>> out;
  for (double r : rates) {
    std::mt19937_64 local = start;
    double total = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const NoiseModelSpec disturbed = disturb_params(spec, r, local);
      total += psnr(dataset[i].clean, solve(dataset[i].noisy, scores[i], disturbed, cfg).estimate);
    }
    out.emplace_back(r, total / static_cast<double>(dataset.size()));
  }
  rng.discard(1);
  return out;
}

/// Default rate grid for the sweep.
inline std::vector<double> default_disturbance_rates() { return {0.0, 0.02, 0.05, 0.08, 0.1}; }

}  // namespace sdn
