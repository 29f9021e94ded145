#pragma once

// Recovering x from s(y) = f(x, y). Closed forms for the constant-covariance Gaussian,
// Gamma and Poisson families; fixed-point iterations for the signal-dependent Gaussian and
// Rayleigh families; a pullback through A for correlated multiplicative noise; and the
// Taylor reduction z = y + s^2 s(y) for mixtures with an additive Gaussian stage.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "sdn/conv.hpp"
#include "sdn/errors.hpp"
#include "sdn/image.hpp"
#include "sdn/noise.hpp"
#include "sdn/score_oracle.hpp"

namespace sdn {

struct SolveConfig {
  int iterations = 10;
  double residual_tolerance = 1e-6;
  bool clamp_output = true;  ///< clamp the estimate to [0, 255] after solving

  void validate() const {
    if (iterations < 1) throw ParameterError("solver iterations must be >= 1, got " + std::to_string(iterations));
    if (!(residual_tolerance >= 0.0)) throw ParameterError("residual_tolerance must be >= 0");
  }
};

struct SolveReport {
  Image estimate;
  int iterations_used = 0;
  double final_residual = 0.0;  ///< max |s(y) - f(x, y)| before clamping
  bool converged = false;
  std::size_t flagged_pixels = 0;  ///< pixels with no valid solution (clamped or zeroed)
};

/// max |s - f(x, y)| for a non-mixture spec. Pixels outside the support of the
/// multiplicative stage are skipped; elsewhere this is exactly s - cond_score(x, y, spec).
inline double solve_residual(const Image& x, const Image& y, const ScoreField& s, const NoiseModelSpec& spec) {
  require_same_shape(x.shape(), y.shape(), "solve_residual");
  require_same_shape(s.shape(), y.shape(), "solve_residual");
  const NoiseModelSpec plain = without_additive(spec);
  ScoreField f(y.shape());
  if (plain.is_gaussian()) {
    f = cond_score(x, y, plain);
  } else {
    const Image z = detail::decorrelate(y, plain);
    const ScoreField st = plain.correlation ? conv_transpose_apply(s, *plain.correlation) : s;
    for (std::size_t i = 0; i < z.size(); ++i) {
      f[i] = detail::pixel_in_support(plain, x[i], z[i]) ? detail::multiplicative_pixel_score(plain, x[i], z[i])
                                                         : st[i];
    }
    if (plain.correlation) f = conv_inverse_transpose_apply(f, *plain.correlation);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) worst = std::max(worst, std::abs(s[i] - f[i]));
  return worst;
}

namespace detail {

struct RawSolve {
  Image x;
  int iterations = 1;
  std::size_t flagged = 0;
};

inline void require_finite_iterate(const Image& x, int iteration, const char* who) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw DivergenceError(std::string(who) + ": non-finite iterate at iteration " + std::to_string(iteration) +
                            ", " + pixel_name(x.shape(), i));
    }
  }
}

inline Image from_values(const Shape& shape, std::vector<double> v) {
  // Bypasses the finiteness check so divergence can be reported with context.
  Image out(shape);
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i];
  return out;
}

inline RawSolve gamma_raw(const Image& y, const ScoreField& s, double alpha) {
  if (!(alpha > 1.0)) throw ParameterError("Gamma solver needs alpha > 1");
  RawSolve r{Image(y.shape()), 1, 0};
  std::size_t singular = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double den = alpha - 1.0 - y[i] * s[i];
    if (std::abs(den) < 1e-8) {
      ++singular;
      continue;
    }
    if (den < 0.0) ++r.flagged;
    r.x[i] = alpha * y[i] / den;
  }
  if (singular) {
    throw SingularityError("Gamma solver: alpha - 1 - y*s is within 1e-8 of zero at " + std::to_string(singular) +
                           " pixel(s)");
  }
  return r;
}

inline RawSolve poisson_raw(const Image& y, const ScoreField& s, double lambda) {
  if (!(lambda > 0.0)) throw ParameterError("Poisson solver needs lambda > 0");
  RawSolve r{Image(y.shape()), 1, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = s[i] / lambda;
    if (e > 700.0) {
      throw NumericalError("Poisson solver: exp(s/lambda) overflows at " + pixel_name(y.shape(), i) +
                           " (s/lambda = " + std::to_string(e) + ")");
    }
    const double base = y[i] + 0.5 / lambda;
    if (base < 0.0) ++r.flagged;
    r.x[i] = base * std::exp(e);
  }
  return r;
}

// Rayleigh fixed point. With strict, y <= 0 is a domain error; otherwise such pixels are
// set to 0 and flagged (used when y is the Taylor-corrected z of a mixture).
inline RawSolve rayleigh_raw(const Image& y, const ScoreField& s, double sigma, const SolveConfig& cfg, bool strict,
                             const std::function<double(const Image&)>& residual) {
  if (!(sigma > 0.0)) throw ParameterError("Rayleigh solver needs sigma > 0");
  std::vector<bool> valid(y.size(), true);
  RawSolve r{y, 0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > 0.0)) {
      if (strict) {
        throw DomainError("Rayleigh solver needs y > 0; " + pixel_name(y.shape(), i) + " is " + std::to_string(y[i]));
      }
      valid[i] = false;
      r.x[i] = 0.0;
      ++r.flagged;
    }
  }
  const double s2 = sigma * sigma;
  std::vector<double> next(y.size());
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!valid[i]) {
        next[i] = 0.0;
        continue;
      }
      const double b = s2 * s[i] * r.x[i];
      const double t = 0.5 * (-b + std::sqrt(b * b + 4.0 * s2));
      next[i] = y[i] / (t + 1.0);
    }
    r.x = from_values(y.shape(), next);
    require_finite_iterate(r.x, it, "Rayleigh solver");
    r.iterations = it;
    if (residual(r.x) < cfg.residual_tolerance) break;
  }
  return r;
}

inline SolveReport finish(RawSolve raw, double residual, const SolveConfig& cfg) {
  if (cfg.clamp_output) {
    for (auto& v : raw.x.values()) v = std::clamp(v, 0.0, 255.0);
  }
  const bool converged = std::isfinite(residual) && residual <= cfg.residual_tolerance;
  return {std::move(raw.x), raw.iterations, residual, converged, raw.flagged};
}

// Unclamped solve of the (possibly correlated) multiplicative stage of `spec` on (y, s).
inline RawSolve multiplicative_raw(const Image& y, const ScoreField& s, const NoiseModelSpec& spec,
                                   const SolveConfig& cfg, bool strict) {
  Image z = spec.correlation ? conv_inverse_apply(y, *spec.correlation) : y;
  ScoreField st = spec.correlation ? conv_transpose_apply(s, *spec.correlation) : s;
  switch (spec.family) {
    case NoiseFamily::Gamma: return gamma_raw(z, st, spec.gamma().alpha);
    case NoiseFamily::Poisson: return poisson_raw(z, st, spec.poisson().lambda);
    case NoiseFamily::Rayleigh: {
      auto res = [&](const Image& x) { return solve_residual(x, y, s, spec); };
      return rayleigh_raw(z, st, spec.rayleigh().sigma, cfg, strict, res);
    }
    default: throw ConfigError(std::string("no multiplicative solver for family ") + family_name(spec.family));
  }
}

}  // namespace detail

/// x = Sigma s + y with Sigma = sigma^2 I or sigma^2 A^T A.
inline SolveReport solve_gaussian_const(const Image& y, const ScoreField& s, const NoiseModelSpec& spec,
                                        const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_gaussian_const");
  cfg.validate();
  if (spec.family != NoiseFamily::GaussianConstant && spec.family != NoiseFamily::GaussianCorrelated) {
    throw ConfigError(std::string("solve_gaussian_const cannot handle ") + family_name(spec.family));
  }
  const double var = spec.gaussian().sigma * spec.gaussian().sigma;
  detail::RawSolve raw{Image(y.shape()), 1, 0};
  if (spec.correlation) {
    const ScoreField as = conv_transpose_apply(conv_apply(s, *spec.correlation), *spec.correlation);
    for (std::size_t i = 0; i < y.size(); ++i) raw.x[i] = y[i] + var * as[i];
  } else {
    for (std::size_t i = 0; i < y.size(); ++i) raw.x[i] = y[i] + var * s[i];
  }
  raw.x.require_finite();
  const double res = solve_residual(raw.x, y, s, spec);
  return detail::finish(std::move(raw), res, cfg);
}

/// Fixed point x <- Sigma(x) s + y starting from x = y, Sigma(x) = diag(a x + b)^2 or
/// A^T diag(a x + b)^2 A. Stops early once the residual is below tolerance.
inline SolveReport solve_gaussian_signal_dep(const Image& y, const ScoreField& s, const NoiseModelSpec& spec,
                                             const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_gaussian_signal_dep");
  cfg.validate();
  if (!spec.is_gaussian() || !spec.is_signal_dependent()) {
    throw ConfigError(std::string("solve_gaussian_signal_dep cannot handle ") + family_name(spec.family));
  }
  const auto& g = spec.gaussian();
  const ScoreField as = spec.correlation ? conv_apply(s, *spec.correlation) : s;
  detail::RawSolve raw{y, 0, 0};
  std::vector<double> next(y.size());
  double res = solve_residual(raw.x, y, s, spec);
  for (int it = 1; it <= cfg.iterations; ++it) {
    Image d(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double sd = detail::signal_std(g, raw.x[i]);
      d[i] = sd * sd * as[i];
    }
    if (spec.correlation) d = conv_transpose_apply(d, *spec.correlation);
    for (std::size_t i = 0; i < y.size(); ++i) next[i] = d[i] + y[i];
    raw.x = detail::from_values(y.shape(), next);
    detail::require_finite_iterate(raw.x, it, "signal-dependent Gaussian solver");
    raw.iterations = it;
    res = solve_residual(raw.x, y, s, spec);
    if (res < cfg.residual_tolerance) break;
  }
  return detail::finish(std::move(raw), res, cfg);
}

/// x = alpha y / (alpha - 1 - y s).
inline SolveReport solve_gamma(const Image& y, const ScoreField& s, double alpha, const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_gamma");
  cfg.validate();
  auto raw = detail::gamma_raw(y, s, alpha);
  const double res = solve_residual(raw.x, y, s, gamma_noise(alpha));
  return detail::finish(std::move(raw), res, cfg);
}

/// x = (y + 1/(2 lambda)) exp(s / lambda).
inline SolveReport solve_poisson(const Image& y, const ScoreField& s, double lambda, const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_poisson");
  cfg.validate();
  auto raw = detail::poisson_raw(y, s, lambda);
  const double res = solve_residual(raw.x, y, s, poisson_noise(lambda));
  return detail::finish(std::move(raw), res, cfg);
}

/// x <- y / (t + 1) with t the positive root of t^2 + b t - sigma^2 = 0, b = sigma^2 s x.
inline SolveReport solve_rayleigh(const Image& y, const ScoreField& s, double sigma, const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_rayleigh");
  cfg.validate();
  const auto spec = rayleigh_noise(sigma);
  auto res = [&](const Image& x) { return solve_residual(x, y, s, spec); };
  auto raw = detail::rayleigh_raw(y, s, sigma, cfg, true, res);
  const double r = res(raw.x);
  return detail::finish(std::move(raw), r, cfg);
}

using InnerSolver = std::function<SolveReport(const Image& z, const ScoreField& s_tilde)>;

/// Pullback through the correlation: z = A^{-1} y, s~ = A^T s, then the inner solver on (z, s~).
inline SolveReport solve_correlated(const Image& y, const ScoreField& s, const ConvKernel& kernel,
                                    const InnerSolver& inner) {
  require_same_shape(s.shape(), y.shape(), "solve_correlated");
  return inner(conv_inverse_apply(y, kernel), conv_transpose_apply(s, kernel));
}

/// Correlated multiplicative spec (rows 6, 8, 10). The residual is reported in y-space.
inline SolveReport solve_correlated(const Image& y, const ScoreField& s, const NoiseModelSpec& spec,
                                    const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_correlated");
  cfg.validate();
  if (!spec.is_multiplicative() || !spec.correlation) {
    throw ConfigError("solve_correlated needs a correlated multiplicative spec");
  }
  auto raw = detail::multiplicative_raw(y, s, without_additive(spec), cfg, true);
  const double res = solve_residual(raw.x, y, s, without_additive(spec));
  return detail::finish(std::move(raw), res, cfg);
}

/// Mixture reduction: z = y + sigma^2 s(y), then solve s(y) = f(x, z) for the multiplicative
/// stage (with its correlation, if any). The residual is s - f(x, z).
inline SolveReport solve_mixture(const Image& y, const ScoreField& s, const NoiseModelSpec& spec,
                                 const SolveConfig& cfg = {}) {
  require_same_shape(s.shape(), y.shape(), "solve_mixture");
  cfg.validate();
  if (!spec.is_mixture() || !spec.is_multiplicative()) throw ConfigError("solve_mixture needs a mixture spec");
  const double var = *spec.additive_sigma * *spec.additive_sigma;
  Image z(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) z[i] = y[i] + var * s[i];
  const NoiseModelSpec base = without_additive(spec);
  auto raw = detail::multiplicative_raw(z, s, base, cfg, false);
  const double res = solve_residual(raw.x, z, s, base);
  return detail::finish(std::move(raw), res, cfg);
}

/// Solves s(y) = f(x, y) with the solver appropriate for `spec`.
inline SolveReport solve(const Image& y, const ScoreField& s, const NoiseModelSpec& spec, const SolveConfig& cfg = {}) {
  spec.validate();
  switch (spec.family) {
    case NoiseFamily::GaussianConstant:
    case NoiseFamily::GaussianCorrelated: return solve_gaussian_const(y, s, spec, cfg);
    case NoiseFamily::GaussianSignalDep:
    case NoiseFamily::GaussianSignalDepCorrelated: return solve_gaussian_signal_dep(y, s, spec, cfg);
    default: break;
  }
  if (spec.is_mixture()) return solve_mixture(y, s, spec, cfg);
  if (spec.correlation) return solve_correlated(y, s, spec, cfg);
  switch (spec.family) {
    case NoiseFamily::Gamma: return solve_gamma(y, s, spec.gamma().alpha, cfg);
    case NoiseFamily::Poisson: return solve_poisson(y, s, spec.poisson().lambda, cfg);
    case NoiseFamily::Rayleigh: return solve_rayleigh(y, s, spec.rayleigh().sigma, cfg);
    default: throw ConfigError(std::string("no solver for family ") + family_name(spec.family));
  }
}

/// Estimate s(y), then solve for x.
inline SolveReport denoise(const Image& y, const ScoreEstimator& estimator, const NoiseModelSpec& spec,
                           const SolveConfig& cfg = {}) {
  return solve(y, estimate(estimator, y), spec, cfg);
}

}  // namespace sdn
