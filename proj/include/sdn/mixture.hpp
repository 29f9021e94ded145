#pragma once

// Conditional densities that need numerics: mixture models y = A N(x) + e, e ~ N(0, s^2 I).
//
// Uncorrelated mixtures factor per pixel, p(y_i | x_i) = integral phi(t) p_z(y_i + s t | x_i) dt,
// which is integrated with composite Simpson on the Gaussian-weighted variable t, doubling
// the node count until the score settles. Correlated mixtures do not factor; they are handled
// by replacing the multiplicative stage with its moment-matched Gaussian, which makes y
// Gaussian with covariance A V(x) A^T + s^2 I (dense Cholesky, small images only).

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "sdn/conv.hpp"
#include "sdn/errors.hpp"
#include "sdn/image.hpp"
#include "sdn/noise.hpp"

namespace sdn {

struct PixelMixture {
  double log_density;      ///< log p(y | x) for one pixel; -inf outside the support
  double score;            ///< d/dy log p(y | x)
  double posterior_mean_z; ///< E[z | y, x]
  int nodes;               ///< Simpson intervals used
};

struct QuadratureOptions {
  double half_width = 12.0;   ///< integrate t over [-half_width, half_width] (clipped to the support)
  double score_tol = 1e-10;   ///< stop when the score changes by less than this between doublings
  int min_nodes = 64;
  int max_nodes = 1 << 20;
};

/// Per-pixel mean and variance of the multiplicative stage given x.
inline std::pair<double, double> multiplicative_moments(const NoiseModelSpec& spec, double x) {
  switch (spec.family) {
    case NoiseFamily::Gamma: return {x, x * x / spec.gamma().alpha};
    case NoiseFamily::Poisson: return {x, x / spec.poisson().lambda};
    case NoiseFamily::Rayleigh: {
      const double s = spec.rayleigh().sigma;
      return {x * (1.0 + s * std::sqrt(std::numbers::pi / 2.0)), x * x * s * s * (4.0 - std::numbers::pi) / 2.0};
    }
    default: throw ParameterError("not a multiplicative family");
  }
}

namespace detail {

// Lower end of the support of p_z(. | x) in z.
inline double support_floor(const NoiseModelSpec& spec, double x) {
  switch (spec.family) {
    case NoiseFamily::Gamma: return 0.0;
    case NoiseFamily::Poisson: return -0.5 / spec.poisson().lambda;
    case NoiseFamily::Rayleigh: return x;
    default: return -std::numeric_limits<double>::infinity();
  }
}

// log of the integrand in t = (z - y) / sigma, up to a constant.
inline double log_integrand(const NoiseModelSpec& base, double x, double y, double sigma, double t) {
  const double z = y + sigma * t;
  if (!pixel_in_support(base, x, z)) return -std::numeric_limits<double>::infinity();
  return -0.5 * t * t + multiplicative_pixel_log_density(base, x, z);
}

// Maximizer of the log-integrand. Every supported p_z(. | x) is log-concave in z, so the
// integrand is log-concave with curvature <= -1 in t and a golden-section search finds its
// single mode; a window of +-half_width around the mode then holds all but exp(-half_width^2/2)
// of the mass, wherever y sits relative to x.
inline double integrand_mode(const NoiseModelSpec& base, double x, double y, double sigma, double t_floor,
                             double half_width) {
  const auto [m, v] = multiplicative_moments(base, x);
  const double spread = half_width * std::sqrt(v) / sigma;
  double a = std::max(t_floor, std::min(-half_width, (m - y) / sigma - spread));
  double b = std::max(half_width, (m - y) / sigma + spread);
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - g * (b - a), d = a + g * (b - a);
  double fc = log_integrand(base, x, y, sigma, c), fd = log_integrand(base, x, y, sigma, d);
  for (int it = 0; it < 200 && b - a > 1e-9 * (1.0 + std::abs(a)); ++it) {
    if (fc < fd) {
      a = c;
      c = d;
      fc = fd;
      d = a + g * (b - a);
      fd = log_integrand(base, x, y, sigma, d);
    } else {
      b = d;
      d = c;
      fd = fc;
      c = b - g * (b - a);
      fc = log_integrand(base, x, y, sigma, c);
    }
  }
  return 0.5 * (a + b);
}

struct SimpsonResult {
  double log_mass;
  double mean_t;
};

// Composite Simpson over [t_lo, t_hi]. With `clustered`, nodes follow t = t_lo + L v^2 so that
// a density with a root-type or log-type edge at t_lo (Poisson, Gamma) is smooth in v.
inline SimpsonResult simpson_pass(const NoiseModelSpec& base, double x, double y, double sigma, double t_lo,
                                  double t_hi, int n, bool clustered) {
  const double len = t_hi - t_lo;
  std::vector<double> logg(static_cast<std::size_t>(n) + 1), ts(logg.size()), jac(logg.size());
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= n; ++k) {
    const double v = static_cast<double>(k) / n;
    const auto i = static_cast<std::size_t>(k);
    ts[i] = clustered ? t_lo + len * v * v : t_lo + len * v;
    jac[i] = clustered ? 2.0 * len * v / n : len / n;
    double lg = -std::numeric_limits<double>::infinity();
    if (jac[i] > 0.0 && pixel_in_support(base, x, y + sigma * ts[i])) lg = log_integrand(base, x, y, sigma, ts[i]);
    logg[i] = lg;
    m = std::max(m, lg);
  }
  if (!std::isfinite(m)) return {-std::numeric_limits<double>::infinity(), 0.0};
  double mass = 0.0;
  double first = 0.0;
  for (int k = 0; k <= n; ++k) {
    const auto i = static_cast<std::size_t>(k);
    const double w = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
    const double g = w * jac[i] * std::exp(logg[i] - m);
    mass += g;
    first += g * ts[i];
  }
  return {m + std::log(mass / 3.0) - 0.5 * std::log(2.0 * std::numbers::pi), first / mass};
}

}  // namespace detail

/// Exact per-pixel mixture density and score for an uncorrelated multiplicative stage `base`
/// (no correlation, additive part ignored) plus N(0, sigma^2).
inline PixelMixture mixture_pixel(const NoiseModelSpec& base, double x, double y, double sigma,
                                  const QuadratureOptions& opt = {}) {
  if (!base.is_multiplicative() || base.correlation) {
    throw ParameterError("mixture_pixel needs an uncorrelated multiplicative family");
  }
  if (!(sigma > 0.0)) throw ParameterError("mixture_pixel needs sigma > 0");
  const double t_floor = (detail::support_floor(base, x) - y) / sigma;
  const double mode = detail::integrand_mode(base, x, y, sigma, t_floor, opt.half_width);
  const double t_lo = std::max(mode - opt.half_width, t_floor);
  const double t_hi = mode + opt.half_width;
  if (t_lo >= t_hi) {
    return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN(), y, 0};
  }
  const bool clipped = t_lo == t_floor;
  auto prev = detail::simpson_pass(base, x, y, sigma, t_lo, t_hi, opt.min_nodes, clipped);
  for (int n = 2 * opt.min_nodes; n <= opt.max_nodes; n *= 2) {
    auto cur = detail::simpson_pass(base, x, y, sigma, t_lo, t_hi, n, clipped);
    if (!std::isfinite(cur.log_mass)) {
      return {-std::numeric_limits<double>::infinity(), std::numeric_limits<double>::quiet_NaN(), y, n};
    }
    const double ds = std::abs(cur.mean_t - prev.mean_t) / sigma;
    const double dl = std::abs(cur.log_mass - prev.log_mass);
    if (std::isfinite(prev.log_mass) && ds < opt.score_tol && dl < 1e-10) {
      return {cur.log_mass, cur.mean_t / sigma, y + sigma * cur.mean_t, n};
    }
    prev = cur;
  }
  throw NumericalError("mixture quadrature did not converge at x=" + std::to_string(x) + ", y=" + std::to_string(y) +
                       ", sigma=" + std::to_string(sigma));
}

/// Largest per-channel pixel count accepted by the dense correlated-mixture surrogate.
inline constexpr std::size_t kMaxDenseMixturePixels = 1024;

struct ConditionalEval {
  double log_likelihood;  ///< -inf when y is outside the support
  ScoreField score;       ///< meaningful only when log_likelihood is finite
};

namespace detail {

inline Eigen::MatrixXd dense_conv_matrix(const ConvKernel& k, std::size_t h, std::size_t w) {
  const std::size_t d = h * w;
  Eigen::MatrixXd a(d, d);
  Image e(h, w, 1);
  for (std::size_t j = 0; j < d; ++j) {
    e[j] = 1.0;
    const Image col = conv_apply(e, k);
    for (std::size_t i = 0; i < d; ++i) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    e[j] = 0.0;
  }
  return a;
}

inline ConditionalEval correlated_mixture_gaussian(const Image& x, const Image& y, const NoiseModelSpec& spec) {
  const std::size_t d = x.height() * x.width();
  if (d > kMaxDenseMixturePixels) {
    throw ShapeError("correlated mixture likelihood is limited to " + std::to_string(kMaxDenseMixturePixels) +
                     " pixels per channel, got " + std::to_string(d));
  }
  const double s2 = *spec.additive_sigma * *spec.additive_sigma;
  const Eigen::MatrixXd a = dense_conv_matrix(*spec.correlation, x.height(), x.width());
  ConditionalEval out{0.0, ScoreField(y.shape())};
  for (std::size_t c = 0; c < x.channels(); ++c) {
    Eigen::VectorXd mean(d);
    Eigen::VectorXd var(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double xv = x.channel(c)[i];
      if (!(xv > 0.0)) throw DomainError("correlated mixture likelihood needs positive clean pixels");
      const auto [m, v] = multiplicative_moments(spec, xv);
      mean(static_cast<Eigen::Index>(i)) = m;
      var(static_cast<Eigen::Index>(i)) = v;
    }
    Eigen::MatrixXd cov = a * var.asDiagonal() * a.transpose();
    cov.diagonal().array() += s2;
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) throw NumericalError("correlated mixture covariance is not positive definite");
    Eigen::VectorXd r(d);
    for (std::size_t i = 0; i < d; ++i) r(static_cast<Eigen::Index>(i)) = y.channel(c)[i];
    r -= a * mean;
    const Eigen::VectorXd sol = llt.solve(r);
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    out.log_likelihood +=
        -0.5 * r.dot(sol) - 0.5 * logdet - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < d; ++i) out.score.channel(c)[i] = -sol(static_cast<Eigen::Index>(i));
  }
  return out;
}

}  // namespace detail

/// log p(y | x) and grad_y log p(y | x) for any spec. Non-mixture specs use the closed forms;
/// mixtures use the per-pixel quadrature (uncorrelated) or the Gaussian surrogate (correlated).
inline ConditionalEval evaluate_conditional(const Image& x, const Image& y, const NoiseModelSpec& spec,
                                            const QuadratureOptions& opt = {}) {
  require_same_shape(x.shape(), y.shape(), "evaluate_conditional");
  const bool mixture = spec.is_mixture() && *spec.additive_sigma > 0.0;
  if (!mixture) {
    const NoiseModelSpec plain = without_additive(spec);
    if (!in_support(x, y, plain)) return {-std::numeric_limits<double>::infinity(), ScoreField(y.shape())};
    return {log_likelihood(x, y, plain), cond_score(x, y, plain)};
  }
  if (spec.correlation) return detail::correlated_mixture_gaussian(x, y, spec);
  const NoiseModelSpec base = without_additive(spec);
  ConditionalEval out{0.0, ScoreField(y.shape())};
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(x[i] > 0.0)) throw DomainError("mixture likelihood needs positive clean pixels");
    const PixelMixture p = mixture_pixel(base, x[i], y[i], *spec.additive_sigma, opt);
    if (!std::isfinite(p.log_density)) return {-std::numeric_limits<double>::infinity(), ScoreField(y.shape())};
    out.log_likelihood += p.log_density;
    out.score[i] = p.score;
  }
  return out;
}

}  // namespace sdn
