#pragma once

// Exact scores for finite (discrete) clean-image priors and a finite-difference score of
// arbitrary log-densities. With a finite prior the marginal p(y) = sum_i w_i p(y | x_i) is
// computable, so grad log p(y) can be checked against sum_i p(x_i | y) f(x_i, y).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <vector>

#include "sdn/errors.hpp"
#include "sdn/image.hpp"
#include "sdn/mixture.hpp"
#include "sdn/noise.hpp"

namespace sdn {

class DiscretePrior {
 public:
  DiscretePrior(std::vector<Image> atoms, std::vector<double> weights)
      : atoms_(std::move(atoms)), weights_(std::move(weights)) {
    if (atoms_.empty()) throw ParameterError("discrete prior needs at least one atom");
    if (atoms_.size() != weights_.size()) throw ParameterError("discrete prior: atom/weight count mismatch");
    double sum = 0.0;
    for (double w : weights_) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ParameterError("discrete prior weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw ParameterError("discrete prior weights must sum to 1");
    for (const auto& a : atoms_) require_same_shape(a.shape(), atoms_.front().shape(), "discrete prior atoms");
  }

  /// Equal weights.
  static DiscretePrior uniform(std::vector<Image> atoms) {
    const std::size_t n = atoms.size();
    return DiscretePrior(std::move(atoms), std::vector<double>(n, n ? 1.0 / static_cast<double>(n) : 0.0));
  }

  /// Weights rescaled to sum to one.
  static DiscretePrior normalized(std::vector<Image> atoms, std::vector<double> raw) {
    const double s = std::accumulate(raw.begin(), raw.end(), 0.0);
    if (!(s > 0.0)) throw ParameterError("discrete prior weights sum to zero");
    for (double& w : raw) w /= s;
    return DiscretePrior(std::move(atoms), std::move(raw));
  }

  [[nodiscard]] const std::vector<Image>& atoms() const { return atoms_; }
  [[nodiscard]] const std::vector<double>& weights() const { return weights_; }
  [[nodiscard]] const Shape& shape() const { return atoms_.front().shape(); }

 private:
  std::vector<Image> atoms_;
  std::vector<double> weights_;
};

struct PosteriorScore {
  ScoreField score;
  std::vector<double> posterior;  ///< p(x_i | y), sums to one
  double log_marginal;            ///< log p(y)
};

/// sum_i p(x_i | y) f(x_i, y) together with the posterior weights and log p(y).
inline PosteriorScore posterior_score(const Image& y, const DiscretePrior& prior, const NoiseModelSpec& spec,
                                      const QuadratureOptions& opt = {}) {
  require_same_shape(y.shape(), prior.shape(), "analytic_score");
  const std::size_t n = prior.atoms().size();
  std::vector<ConditionalEval> evals;
  evals.reserve(n);
  std::vector<double> logw(n, -std::numeric_limits<double>::infinity());
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (prior.weights()[i] > 0.0) {
      evals.push_back(evaluate_conditional(prior.atoms()[i], y, spec, opt));
      logw[i] = std::log(prior.weights()[i]) + evals.back().log_likelihood;
    } else {
      evals.push_back({-std::numeric_limits<double>::infinity(), ScoreField(y.shape())});
    }
    m = std::max(m, logw[i]);
  }
  if (!std::isfinite(m)) throw NumericalError("analytic_score: every posterior weight underflows to zero");
  std::vector<double> post(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    post[i] = std::isfinite(logw[i]) ? std::exp(logw[i] - m) : 0.0;
    z += post[i];
  }
  ScoreField score(y.shape());
  for (std::size_t i = 0; i < n; ++i) {
    post[i] /= z;
    if (post[i] == 0.0) continue;
    for (std::size_t k = 0; k < score.size(); ++k) score[k] += post[i] * evals[i].score[k];
  }
  return {std::move(score), std::move(post), m + std::log(z)};
}

/// Exact score of the noisy marginal under a finite prior (the posterior-weighted conditional score).
inline ScoreField analytic_score(const Image& y, const DiscretePrior& prior, const NoiseModelSpec& spec) {
  return posterior_score(y, prior, spec).score;
}

/// log p(y) = log sum_i w_i p(y | x_i).
inline double log_marginal(const Image& y, const DiscretePrior& prior, const NoiseModelSpec& spec) {
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (std::size_t i = 0; i < prior.atoms().size(); ++i) {
    if (prior.weights()[i] == 0.0) continue;
    const auto& x = prior.atoms()[i];
    double ll = -std::numeric_limits<double>::infinity();
    if (spec.is_mixture() && *spec.additive_sigma > 0.0) {
      ll = evaluate_conditional(x, y, spec).log_likelihood;
    } else if (in_support(x, y, spec)) {
      ll = log_likelihood(x, y, spec);
    }
    terms.push_back(std::log(prior.weights()[i]) + ll);
    m = std::max(m, terms.back());
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

/// Centered differences (L(y + h e_i) - L(y - h e_i)) / 2h per coordinate.
inline ScoreField finite_diff_score(const Image& y, const std::function<double(const Image&)>& log_density,
                                    double step = 1e-4) {
  if (!(step > 0.0)) throw ParameterError("finite_diff_score needs step > 0");
  ScoreField out(y.shape());
  Image probe = y;
  for (std::size_t i = 0; i < y.size(); ++i) {
    probe[i] = y[i] + step;
    const double up = log_density(probe);
    probe[i] = y[i] - step;
    const double down = log_density(probe);
    probe[i] = y[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("finite_diff_score: non-finite log-density near coordinate " + std::to_string(i));
    }
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

/// Draws y from the marginal and returns max |analytic_score - finite-difference score of log p(y)|.
inline double check_theorem1(const DiscretePrior& prior, const NoiseModelSpec& spec, int samples,
                             std::mt19937_64& rng, double step = 1e-4) {
  if (spec.is_mixture() && *spec.additive_sigma > 0.0) {
    throw ParameterError("check_theorem1 needs a non-mixture noise model");
  }
  std::discrete_distribution<std::size_t> pick(prior.weights().begin(), prior.weights().end());
  auto lp = [&](const Image& v) { return log_marginal(v, prior, spec); };
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    const Image y = sample_noisy(prior.atoms()[pick(rng)], spec, rng);
    const ScoreField lhs = finite_diff_score(y, lp, step);
    const ScoreField rhs = analytic_score(y, prior, spec);
    worst = std::max(worst, max_abs_diff(lhs, rhs));
  }
  return worst;
}

/// Produces a score field for a noisy image.
class ScoreEstimator {
 public:
  virtual ~ScoreEstimator() = default;
  [[nodiscard]] virtual ScoreField estimate(const Image& y) const = 0;
};

/// Analytic score under a known finite prior.
class OracleEstimator final : public ScoreEstimator {
 public:
  OracleEstimator(DiscretePrior prior, NoiseModelSpec spec) : prior_(std::move(prior)), spec_(std::move(spec)) {}
  [[nodiscard]] ScoreField estimate(const Image& y) const override { return analytic_score(y, prior_, spec_); }
  [[nodiscard]] const DiscretePrior& prior() const { return prior_; }

 private:
  DiscretePrior prior_;
  NoiseModelSpec spec_;
};

inline ScoreField estimate(const ScoreEstimator& estimator, const Image& y) {
  ScoreField s = estimator.estimate(y);
  require_same_shape(s.shape(), y.shape(), "estimate");
  return s;
}

}  // namespace sdn
