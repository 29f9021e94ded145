#pragma once

// The sixteen noise models: sampling, conditional log-density log p(y | x), and the
// conditional score f(x, y) = grad_y log p(y | x).
//
// A model is a base family (additive Gaussian with one of four covariance structures,
// or a multiplicative Gamma / Poisson / Rayleigh stage), an optional correlation
// convolution A, and for the mixture rows an additive N(0, s^2 I) stage applied last.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>

#include "sdn/config.hpp"
#include "sdn/conv.hpp"
#include "sdn/errors.hpp"
#include "sdn/image.hpp"

namespace sdn {

enum class NoiseFamily {
  GaussianConstant,
  GaussianCorrelated,
  GaussianSignalDep,
  GaussianSignalDepCorrelated,
  Gamma,
  Poisson,
  Rayleigh,
};

/// sigma for the constant-covariance cases; a, b for Sigma = diag(a x + b)^2.
struct GaussianParams {
  double sigma = 25.0;
  double a = 0.98;
  double b = 25.0;
  friend bool operator==(const GaussianParams&, const GaussianParams&) = default;
};

/// Multiplicative eta ~ Gamma(alpha, rate alpha).
struct GammaParams {
  double alpha = 26.0;
  friend bool operator==(const GammaParams&, const GammaParams&) = default;
};

/// y = eta / lambda with eta ~ Poisson(lambda x).
struct PoissonParams {
  double lambda = 0.2;
  friend bool operator==(const PoissonParams&, const PoissonParams&) = default;
};

/// y = (eta + 1) x with eta ~ Rayleigh(sigma).
struct RayleighParams {
  double sigma = 0.3;
  friend bool operator==(const RayleighParams&, const RayleighParams&) = default;
};

using NoiseParams = std::variant<GaussianParams, GammaParams, PoissonParams, RayleighParams>;

struct NoiseModelSpec {
  NoiseFamily family = NoiseFamily::GaussianConstant;
  NoiseParams params = GaussianParams{};
  std::optional<ConvKernel> correlation;
  std::optional<double> additive_sigma;

  [[nodiscard]] bool is_gaussian() const { return family <= NoiseFamily::GaussianSignalDepCorrelated; }
  [[nodiscard]] bool is_multiplicative() const { return !is_gaussian(); }
  [[nodiscard]] bool is_mixture() const { return additive_sigma.has_value(); }
  [[nodiscard]] bool is_signal_dependent() const {
    return family == NoiseFamily::GaussianSignalDep || family == NoiseFamily::GaussianSignalDepCorrelated;
  }

  [[nodiscard]] const GaussianParams& gaussian() const { return std::get<GaussianParams>(params); }
  [[nodiscard]] const GammaParams& gamma() const { return std::get<GammaParams>(params); }
  [[nodiscard]] const PoissonParams& poisson() const { return std::get<PoissonParams>(params); }
  [[nodiscard]] const RayleighParams& rayleigh() const { return std::get<RayleighParams>(params); }

  void validate() const;

  friend bool operator==(const NoiseModelSpec&, const NoiseModelSpec&) = default;
};

inline const char* family_name(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::GaussianConstant: return "gaussian";
    case NoiseFamily::GaussianCorrelated: return "gaussian_correlated";
    case NoiseFamily::GaussianSignalDep: return "gaussian_signal_dep";
    case NoiseFamily::GaussianSignalDepCorrelated: return "gaussian_signal_dep_correlated";
    case NoiseFamily::Gamma: return "gamma";
    case NoiseFamily::Poisson: return "poisson";
    case NoiseFamily::Rayleigh: return "rayleigh";
  }
  return "unknown";
}

inline NoiseFamily family_from_name(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(NoiseFamily::Rayleigh); ++i) {
    const auto f = static_cast<NoiseFamily>(i);
    if (name == family_name(f)) return f;
  }
  throw ConfigError("unknown noise family '" + name + "'");
}

inline void NoiseModelSpec::validate() const {
  const bool wants_kernel =
      family == NoiseFamily::GaussianCorrelated || family == NoiseFamily::GaussianSignalDepCorrelated;
  if (is_gaussian()) {
    if (!std::holds_alternative<GaussianParams>(params)) throw ParameterError("Gaussian family needs GaussianParams");
    if (wants_kernel != correlation.has_value()) {
      throw ParameterError(std::string(family_name(family)) +
                           (wants_kernel ? " requires a correlation kernel" : " must not carry a correlation kernel"));
    }
    if (additive_sigma) throw ParameterError("additive_sigma is only valid for multiplicative mixture models");
    const auto& g = gaussian();
    if (is_signal_dependent()) {
      if (!(g.b > 0.0)) throw ParameterError("signal-dependent Gaussian needs b > 0");
      if (g.a < 0.0 && g.a < -g.b / 255.0) throw ParameterError("signal-dependent Gaussian needs a >= -b/255");
      if (!std::isfinite(g.a)) throw ParameterError("signal-dependent Gaussian a is not finite");
    } else if (!(g.sigma > 0.0) || !std::isfinite(g.sigma)) {
      throw ParameterError("Gaussian sigma must be positive");
    }
    return;
  }
  switch (family) {
    case NoiseFamily::Gamma:
      if (!std::holds_alternative<GammaParams>(params) || !(gamma().alpha > 1.0) || !std::isfinite(gamma().alpha)) {
        throw ParameterError("Gamma noise needs alpha > 1");
      }
      break;
    case NoiseFamily::Poisson:
      if (!std::holds_alternative<PoissonParams>(params) || !(poisson().lambda > 0.0) ||
          !std::isfinite(poisson().lambda)) {
        throw ParameterError("Poisson noise needs lambda > 0");
      }
      break;
    case NoiseFamily::Rayleigh:
      if (!std::holds_alternative<RayleighParams>(params) || !(rayleigh().sigma > 0.0) ||
          !std::isfinite(rayleigh().sigma)) {
        throw ParameterError("Rayleigh noise needs sigma > 0");
      }
      break;
    default: break;
  }
  if (additive_sigma && (!(*additive_sigma >= 0.0) || !std::isfinite(*additive_sigma))) {
    throw ParameterError("additive_sigma must be >= 0");
  }
}

// ---------------------------------------------------------------------------
// Constructors and the table rows

inline NoiseModelSpec gaussian_noise(double sigma, std::optional<ConvKernel> a = std::nullopt) {
  NoiseModelSpec s;
  s.family = a ? NoiseFamily::GaussianCorrelated : NoiseFamily::GaussianConstant;
  s.params = GaussianParams{sigma, 0.0, 0.0};
  s.correlation = std::move(a);
  s.validate();
  return s;
}

inline NoiseModelSpec signal_dependent_noise(double a, double b, std::optional<ConvKernel> k = std::nullopt) {
  NoiseModelSpec s;
  s.family = k ? NoiseFamily::GaussianSignalDepCorrelated : NoiseFamily::GaussianSignalDep;
  s.params = GaussianParams{0.0, a, b};
  s.correlation = std::move(k);
  s.validate();
  return s;
}

inline NoiseModelSpec gamma_noise(double alpha, std::optional<ConvKernel> a = std::nullopt,
                                  std::optional<double> additive = std::nullopt) {
  NoiseModelSpec s{NoiseFamily::Gamma, GammaParams{alpha}, std::move(a), additive};
  s.validate();
  return s;
}

inline NoiseModelSpec poisson_noise(double lambda, std::optional<ConvKernel> a = std::nullopt,
                                    std::optional<double> additive = std::nullopt) {
  NoiseModelSpec s{NoiseFamily::Poisson, PoissonParams{lambda}, std::move(a), additive};
  s.validate();
  return s;
}

inline NoiseModelSpec rayleigh_noise(double sigma, std::optional<ConvKernel> a = std::nullopt,
                                     std::optional<double> additive = std::nullopt) {
  NoiseModelSpec s{NoiseFamily::Rayleigh, RayleighParams{sigma}, std::move(a), additive};
  s.validate();
  return s;
}

inline constexpr int kNumTableRows = 16;
/// Standard deviation of the additive stage in the mixture rows (variance 100).
inline constexpr double kMixtureSigma = 10.0;

/// Table row 1..16 with the experiment parameters (sigma 25; a 0.98, b 25; alpha 26;
/// lambda 0.2; Rayleigh sigma 0.3; mixture variance 100; A = default kernel).
inline NoiseModelSpec table_row(int row) {
  const auto A = default_kernel();
  switch (row) {
    case 1: return gaussian_noise(25.0);
    case 2: return gaussian_noise(25.0, A);
    case 3: return signal_dependent_noise(0.98, 25.0);
    case 4: return signal_dependent_noise(0.98, 25.0, A);
    case 5: return gamma_noise(26.0);
    case 6: return gamma_noise(26.0, A);
    case 7: return poisson_noise(0.2);
    case 8: return poisson_noise(0.2, A);
    case 9: return rayleigh_noise(0.3);
    case 10: return rayleigh_noise(0.3, A);
    case 11: return gamma_noise(26.0, std::nullopt, kMixtureSigma);
    case 12: return gamma_noise(26.0, A, kMixtureSigma);
    case 13: return poisson_noise(0.2, std::nullopt, kMixtureSigma);
    case 14: return poisson_noise(0.2, A, kMixtureSigma);
    case 15: return rayleigh_noise(0.3, std::nullopt, kMixtureSigma);
    case 16: return rayleigh_noise(0.3, A, kMixtureSigma);
    default: throw ParameterError("noise model index must be in 1..16, got " + std::to_string(row));
  }
}

/// The pre-additive stage of a mixture model (identity for non-mixture specs).
inline NoiseModelSpec without_additive(NoiseModelSpec spec) {
  spec.additive_sigma.reset();
  return spec;
}

/// The same model with the correlation convolution removed.
inline NoiseModelSpec without_correlation(NoiseModelSpec spec) {
  spec.correlation.reset();
  if (spec.family == NoiseFamily::GaussianCorrelated) spec.family = NoiseFamily::GaussianConstant;
  if (spec.family == NoiseFamily::GaussianSignalDepCorrelated) spec.family = NoiseFamily::GaussianSignalDep;
  return spec;
}

// ---------------------------------------------------------------------------
// Serialization

/// Key-value block for one spec; correlation taps are written inline ("k t00 t01 ...").
inline Config::Section spec_to_section(const NoiseModelSpec& spec) {
  Config::Section kv;
  kv["family"] = family_name(spec.family);
  if (spec.is_gaussian()) {
    const auto& g = spec.gaussian();
    if (spec.is_signal_dependent()) {
      kv["a"] = format_real(g.a);
      kv["b"] = format_real(g.b);
    } else {
      kv["sigma"] = format_real(g.sigma);
    }
  } else if (spec.family == NoiseFamily::Gamma) {
    kv["alpha"] = format_real(spec.gamma().alpha);
  } else if (spec.family == NoiseFamily::Poisson) {
    kv["lambda"] = format_real(spec.poisson().lambda);
  } else {
    kv["sigma"] = format_real(spec.rayleigh().sigma);
  }
  if (spec.correlation) {
    std::string taps = std::to_string(spec.correlation->size());
    for (double t : spec.correlation->taps()) taps += " " + format_real(t);
    kv["kernel"] = taps;
  }
  if (spec.additive_sigma) kv["additive_sigma"] = format_real(*spec.additive_sigma);
  return kv;
}

/// Parses a noise block. `model = N` selects table row N; explicit keys then override it.
/// `kernel` accepts "default", "identity", "none" or inline taps; `kernel_file` a path.
inline NoiseModelSpec spec_from_section(const Config::Section& kv) {
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto real = [&](const char* key) { return Config::to_real("noise", key, *get(key)); };

  NoiseModelSpec spec;
  if (const auto* m = get("model")) {
    spec = table_row(static_cast<int>(Config::to_int("noise", "model", *m)));
  } else if (!get("family")) {
    throw ConfigError("noise block needs 'model' or 'family'");
  }
  if (const auto* f = get("family")) {
    const NoiseFamily fam = family_from_name(*f);
    if (fam != spec.family || !get("model")) {
      spec.family = fam;
      switch (fam) {
        case NoiseFamily::Gamma: spec.params = GammaParams{}; break;
        case NoiseFamily::Poisson: spec.params = PoissonParams{}; break;
        case NoiseFamily::Rayleigh: spec.params = RayleighParams{}; break;
        default:
          spec.params = GaussianParams{};
          spec.additive_sigma.reset();
          break;
      }
      spec.correlation.reset();
      if (fam == NoiseFamily::GaussianCorrelated || fam == NoiseFamily::GaussianSignalDepCorrelated) {
        spec.correlation = default_kernel();
      }
    }
  }
  switch (spec.family) {
    case NoiseFamily::Gamma:
      if (get("alpha")) spec.params = GammaParams{real("alpha")};
      break;
    case NoiseFamily::Poisson:
      if (get("lambda")) spec.params = PoissonParams{real("lambda")};
      break;
    case NoiseFamily::Rayleigh:
      if (get("sigma")) spec.params = RayleighParams{real("sigma")};
      break;
    default: {
      auto g = std::get<GaussianParams>(spec.params);
      if (get("sigma")) g.sigma = real("sigma");
      if (get("a")) g.a = real("a");
      if (get("b")) g.b = real("b");
      if (spec.is_signal_dependent()) {
        g.sigma = 0.0;
      } else {
        g.a = g.b = 0.0;
      }
      spec.params = g;
    }
  }
  if (const auto* k = get("kernel")) {
    if (*k == "default") {
      spec.correlation = default_kernel();
    } else if (*k == "none") {
      spec.correlation.reset();
    } else if (*k == "identity") {
      spec.correlation = identity_kernel();
    } else {
      spec.correlation = parse_kernel(*k);
    }
  }
  if (const auto* kf = get("kernel_file")) spec.correlation = load_kernel(*kf);
  if (const auto* s = get("additive_sigma")) {
    const double v = Config::to_real("noise", "additive_sigma", *s);
    if (v < 0.0) {
      spec.additive_sigma.reset();
    } else {
      spec.additive_sigma = v;
    }
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Sampling

namespace detail {

inline std::string pixel_name(const Shape& s, std::size_t i) {
  const std::size_t c = i / s.pixels();
  const std::size_t y = (i % s.pixels()) / s.width;
  const std::size_t x = i % s.width;
  return "pixel (c=" + std::to_string(c) + ", y=" + std::to_string(y) + ", x=" + std::to_string(x) + ")";
}

inline double signal_std(const GaussianParams& g, double x) { return g.a * std::clamp(x, 0.0, 255.0) + g.b; }

template <class Tag>
Grid<Tag> zip(const Grid<Tag>& a, const Grid<Tag>& b, auto&& op) {
  require_same_shape(a.shape(), b.shape(), "elementwise op");
  Grid<Tag> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
  return out;
}

}  // namespace detail

/// Draws y ~ p(y | x). Multiplicative families need x > 0 everywhere. Correlation is applied
/// after the multiplicative stage and the additive Gaussian stage last.
inline Image sample_noisy(const Image& x, const NoiseModelSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  x.require_finite();
  std::normal_distribution<double> normal(0.0, 1.0);
  Image y(x.shape());

  if (spec.is_gaussian()) {
    const auto& g = spec.gaussian();
    Image eps(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double n = normal(rng);
      eps[i] = spec.is_signal_dependent() ? detail::signal_std(g, x[i]) * n : g.sigma * n;
    }
    // Cov(A^T e) = A^T Cov(e) A, matching sigma^2 A^T A and A^T diag(.)^2 A.
    if (spec.correlation) eps = conv_transpose_apply(eps, *spec.correlation);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + eps[i];
    return y;
  }

  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError(std::string(family_name(spec.family)) + " noise needs positive clean pixels; " +
                        detail::pixel_name(x.shape(), i) + " is " + std::to_string(x[i]));
    }
  }
  switch (spec.family) {
    case NoiseFamily::Gamma: {
      const double alpha = spec.gamma().alpha;
      std::gamma_distribution<double> eta(alpha, 1.0 / alpha);
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = eta(rng) * x[i];
      break;
    }
    case NoiseFamily::Poisson: {
      const double lambda = spec.poisson().lambda;
      for (std::size_t i = 0; i < x.size(); ++i) {
        std::poisson_distribution<long long> counts(lambda * x[i]);
        y[i] = static_cast<double>(counts(rng)) / lambda;
      }
      break;
    }
    case NoiseFamily::Rayleigh: {
      // Rayleigh(sigma) is Weibull with shape 2 and scale sigma * sqrt(2).
      std::weibull_distribution<double> eta(2.0, spec.rayleigh().sigma * std::numbers::sqrt2);
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = (eta(rng) + 1.0) * x[i];
      break;
    }
    default: break;
  }
  if (spec.correlation) y = conv_apply(y, *spec.correlation);
  if (spec.additive_sigma && *spec.additive_sigma > 0.0) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += *spec.additive_sigma * normal(rng);
  }
  return y;
}

// ---------------------------------------------------------------------------
// Per-pixel densities of the uncorrelated multiplicative stage

namespace detail {

/// log((lambda y)!) surrogate whose derivative in k = lambda y is log(k + 1/2).
inline double poisson_log_factorial_surrogate(double k) {
  const double m = k + 0.5;
  return m * std::log(m) - m + 0.5 * std::log(2.0 * std::numbers::pi);
}

/// True when (x, y) lies in the support used by the pixelwise formulas.
inline bool pixel_in_support(const NoiseModelSpec& spec, double x, double y) {
  switch (spec.family) {
    case NoiseFamily::Gamma: return x > 0.0 && y > 0.0;
    case NoiseFamily::Poisson: return x > 0.0 && spec.poisson().lambda * y + 0.5 > 0.0;
    case NoiseFamily::Rayleigh: return x > 0.0 && y > x;
    default: return true;
  }
}

inline std::string support_text(NoiseFamily f) {
  switch (f) {
    case NoiseFamily::Gamma: return "x > 0 and y > 0";
    case NoiseFamily::Poisson: return "x > 0 and lambda*y + 1/2 > 0";
    case NoiseFamily::Rayleigh: return "x > 0 and y > x";
    default: return "finite values";
  }
}

/// log p_z(z | x) for one pixel of an uncorrelated multiplicative family.
inline double multiplicative_pixel_log_density(const NoiseModelSpec& spec, double x, double z) {
  switch (spec.family) {
    case NoiseFamily::Gamma: {
      const double a = spec.gamma().alpha;
      return a * std::log(a) - std::lgamma(a) + (a - 1.0) * std::log(z / x) - a * z / x - std::log(x);
    }
    case NoiseFamily::Poisson: {
      const double l = spec.poisson().lambda;
      const double k = l * z;
      return k * std::log(l * x) - l * x - poisson_log_factorial_surrogate(k) + std::log(l);
    }
    case NoiseFamily::Rayleigh: {
      const double s = spec.rayleigh().sigma;
      const double d = z - x;
      return std::log(d) - 2.0 * std::log(x) - 2.0 * std::log(s) - d * d / (2.0 * s * s * x * x);
    }
    default: throw ParameterError("not a multiplicative family");
  }
}

/// d/dz log p_z(z | x) for one pixel.
inline double multiplicative_pixel_score(const NoiseModelSpec& spec, double x, double z) {
  switch (spec.family) {
    case NoiseFamily::Gamma: {
      const double a = spec.gamma().alpha;
      return (a - 1.0) / z - a / x;
    }
    case NoiseFamily::Poisson: {
      const double l = spec.poisson().lambda;
      return l * std::log(l * x) - l * std::log(l * z + 0.5);
    }
    case NoiseFamily::Rayleigh: {
      const double s = spec.rayleigh().sigma;
      const double d = z - x;
      return 1.0 / d - d / (s * s * x * x);
    }
    default: throw ParameterError("not a multiplicative family");
  }
}

inline void require_support(const Image& x, const Image& z, const NoiseModelSpec& spec, const char* what) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!pixel_in_support(spec, x[i], z[i])) {
      throw DomainError(std::string(what) + ": " + family_name(spec.family) + " needs " + support_text(spec.family) +
                        "; violated at " + pixel_name(x.shape(), i) + " with x=" + std::to_string(x[i]) +
                        ", y=" + std::to_string(z[i]));
    }
  }
}

// Pre-image of y under the correlation, or y itself.
inline Image decorrelate(const Image& y, const NoiseModelSpec& spec) {
  return spec.correlation ? conv_inverse_apply(y, *spec.correlation) : y;
}

}  // namespace detail

/// True when log p(y | x) is finite (pixelwise support of the multiplicative stage after
/// undoing the correlation). Gaussian families have full support.
inline bool in_support(const Image& x, const Image& y, const NoiseModelSpec& spec) {
  require_same_shape(x.shape(), y.shape(), "in_support");
  if (spec.is_gaussian()) return true;
  const Image z = detail::decorrelate(y, spec);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!detail::pixel_in_support(spec, x[i], z[i])) return false;
  }
  return true;
}

/// f(x, y) = grad_y log p(y | x). For a mixture spec this is the score of the
/// pre-additive stage, which is what the mixture reduction substitutes.
inline ScoreField cond_score(const Image& x, const Image& y, const NoiseModelSpec& spec) {
  require_same_shape(x.shape(), y.shape(), "cond_score");
  spec.validate();
  if (spec.is_gaussian()) {
    const auto& g = spec.gaussian();
    ScoreField r(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) r[i] = y[i] - x[i];
    switch (spec.family) {
      case NoiseFamily::GaussianConstant: {
        const double inv = 1.0 / (g.sigma * g.sigma);
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = -r[i] * inv;
        return r;
      }
      case NoiseFamily::GaussianCorrelated: {
        // -(sigma^2 A^T A)^{-1} r = -A^{-1} A^{-T} r / sigma^2
        ScoreField w = conv_inverse_apply(conv_inverse_transpose_apply(r, *spec.correlation), *spec.correlation);
        const double inv = 1.0 / (g.sigma * g.sigma);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = -w[i] * inv;
        return w;
      }
      case NoiseFamily::GaussianSignalDep: {
        for (std::size_t i = 0; i < r.size(); ++i) {
          const double s = detail::signal_std(g, x[i]);
          r[i] = -r[i] / (s * s);
        }
        return r;
      }
      default: {
        // -(A^T D^2 A)^{-1} r = -A^{-1} D^{-2} A^{-T} r
        ScoreField w = conv_inverse_transpose_apply(r, *spec.correlation);
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double s = detail::signal_std(g, x[i]);
          w[i] /= s * s;
        }
        w = conv_inverse_apply(w, *spec.correlation);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = -w[i];
        return w;
      }
    }
  }
  const Image z = detail::decorrelate(y, spec);
  detail::require_support(x, z, spec, "cond_score");
  ScoreField fz(y.shape());
  for (std::size_t i = 0; i < z.size(); ++i) fz[i] = detail::multiplicative_pixel_score(spec, x[i], z[i]);
  // grad_y log p_z(A^{-1} y) = A^{-T} grad_z log p_z
  if (spec.correlation) return conv_inverse_transpose_apply(fz, *spec.correlation);
  return fz;
}

/// log p(y | x). Exact for the Gaussian, Gamma and Rayleigh families; Poisson uses the
/// continuous Stirling surrogate whose gradient is the Poisson conditional score.
/// Mixture specs have no closed form and are rejected.
inline double log_likelihood(const Image& x, const Image& y, const NoiseModelSpec& spec) {
  require_same_shape(x.shape(), y.shape(), "log_likelihood");
  spec.validate();
  if (spec.is_mixture() && *spec.additive_sigma > 0.0) {
    throw ParameterError("mixture models have no closed-form likelihood; use the mixture quadrature");
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  const double d = static_cast<double>(x.size());
  const double log_det_a =
      spec.correlation
          ? static_cast<double>(x.channels()) * conv_log_abs_det(*spec.correlation, x.height(), x.width())
          : 0.0;

  if (spec.is_gaussian()) {
    const auto& g = spec.gaussian();
    Image r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = y[i] - x[i];
    // Whitened residual w with Sigma = A^T D^2 A (A = I, D = sigma I as applicable).
    if (spec.correlation) r = conv_inverse_transpose_apply(r, *spec.correlation);
    double quad = 0.0;
    double log_std = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double s = spec.is_signal_dependent() ? detail::signal_std(g, x[i]) : g.sigma;
      quad += (r[i] / s) * (r[i] / s);
      log_std += std::log(s);
    }
    return -0.5 * quad - log_std - d * half_log_2pi - log_det_a;
  }

  const Image z = detail::decorrelate(y, spec);
  detail::require_support(x, z, spec, "log_likelihood");
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += detail::multiplicative_pixel_log_density(spec, x[i], z[i]);
  return total - log_det_a;
}

/// Multiplies every scalar parameter k by (1 + a), a ~ N(0, r^2). Draws that violate the
/// parameter invariants are rejected and the whole set is redrawn (at most 100 tries).
inline NoiseModelSpec disturb_params(const NoiseModelSpec& spec, double r, std::mt19937_64& rng) {
  if (!(r >= 0.0)) throw ParameterError("disturbance rate must be >= 0");
  spec.validate();
  if (r == 0.0) return spec;
  std::normal_distribution<double> jitter(0.0, r);
  auto scale = [&](double k) { return (1.0 + jitter(rng)) * k; };
  for (int attempt = 0; attempt < 100; ++attempt) {
    NoiseModelSpec out = spec;
    if (spec.is_gaussian()) {
      auto g = spec.gaussian();
      if (spec.is_signal_dependent()) {
        g.a = scale(g.a);
        g.b = scale(g.b);
      } else {
        g.sigma = scale(g.sigma);
      }
      out.params = g;
    } else if (spec.family == NoiseFamily::Gamma) {
      out.params = GammaParams{scale(spec.gamma().alpha)};
    } else if (spec.family == NoiseFamily::Poisson) {
      out.params = PoissonParams{scale(spec.poisson().lambda)};
    } else {
      out.params = RayleighParams{scale(spec.rayleigh().sigma)};
    }
    if (spec.additive_sigma) out.additive_sigma = scale(*spec.additive_sigma);
    try {
      out.validate();
      return out;
    } catch (const ParameterError&) {
    }
  }
  throw ParameterError("disturb_params: no valid parameter draw in 100 tries at rate " + std::to_string(r));
}

}  // namespace sdn
