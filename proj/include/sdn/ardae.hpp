#pragma once

// Learned score estimation. A small fully-convolutional residual network is trained on
// noisy images with the residual denoising objective
//   L = E || u + sigma_a s(y + sigma_a u) ||^2,   u ~ N(0, I),
// while sigma_a is annealed towards zero. Images enter the network divided by 255, so the
// network models the score of y/255; the score of y is the network output divided by 255.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sdn/autodiff.hpp"
#include "sdn/config.hpp"
#include "sdn/errors.hpp"
#include "sdn/image.hpp"
#include "sdn/score_oracle.hpp"

namespace sdn {

struct NetConfig {
  int width = 32;
  int blocks = 4;              ///< residual blocks between the input and output convolutions
  int kernel = 3;
  bool zero_init_output = true;

  void validate() const {
    if (width < 1 || blocks < 0 || kernel < 1 || kernel % 2 == 0) {
      throw ParameterError("network needs width >= 1, blocks >= 0 and an odd kernel size");
    }
  }
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// conv_in -> blocks x [h += conv(silu(h))] -> conv_out(silu(h)). One input and one output
/// channel; multi-channel images are processed channel by channel.
class ScoreNet {
 public:
  ScoreNet(NetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto w = static_cast<std::size_t>(cfg_.width);
    add_conv(1, w, rng, false);
    for (int b = 0; b < cfg_.blocks; ++b) add_conv(w, w, rng, false);
    add_conv(w, 1, rng, cfg_.zero_init_output);
  }

  /// Rebuilds a network from stored tensors (checkpoint loading).
  ScoreNet(NetConfig cfg, std::vector<ad::Var> params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    if (params_.size() != 2 * static_cast<std::size_t>(cfg_.blocks + 2)) {
      throw ShapeError("network with " + std::to_string(cfg_.blocks) + " blocks needs " +
                       std::to_string(2 * (cfg_.blocks + 2)) + " tensors, got " + std::to_string(params_.size()));
    }
  }

  /// x has dims [1, H, W]; returns [1, H, W].
  [[nodiscard]] ad::Var forward(const ad::Var& x) const {
    ad::Var h = ad::conv2d(x, params_[0], params_[1]);
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::size_t k = 2 + 2 * static_cast<std::size_t>(b);
      h = ad::add(h, ad::conv2d(ad::silu(h), params_[k], params_[k + 1]));
    }
    const std::size_t last = params_.size() - 2;
    return ad::conv2d(ad::silu(h), params_[last], params_[last + 1]);
  }

  [[nodiscard]] const std::vector<ad::Var>& parameters() const { return params_; }
  [[nodiscard]] const NetConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  /// Deep copy, so a trained estimator is frozen independently of further training.
  [[nodiscard]] ScoreNet clone() const {
    std::vector<ad::Var> copy;
    for (const auto& p : params_) copy.push_back(ad::parameter(p->dims, p->value));
    return ScoreNet(cfg_, std::move(copy));
  }

 private:
  void add_conv(std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero) {
    const auto k = static_cast<std::size_t>(cfg_.kernel);
    const double fan_in = static_cast<double>(in * k * k);
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    std::vector<double> w(out * in * k * k, 0.0);
    if (!zero) {
      for (auto& v : w) v = n(rng);
    }
    params_.push_back(ad::parameter({out, in, k, k}, std::move(w)));
    params_.push_back(ad::parameter({out}, std::vector<double>(out, 0.0)));
  }

  NetConfig cfg_;
  std::vector<ad::Var> params_;
};

enum class OptimizerKind { AdamW, SgdMomentum };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw or sgd)");
}

struct TrainConfig {
  int steps = 2000;
  int batch_size = 4;
  int patch_size = 32;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  int lr_switch_step = -1;  ///< negative: 80% of steps
  double sigma_initial = 0.05;
  double sigma_final = 1e-6;
  int decay_interval = 50;
  int hold_final = 50;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double training_noise = 0.0;  ///< std (gray levels) of extra Gaussian noise added to training patches
  double input_scale = 255.0;
  NetConfig net;
  std::uint64_t seed = 0;

  [[nodiscard]] int switch_step() const { return lr_switch_step >= 0 ? lr_switch_step : (steps * 4) / 5; }

  void validate() const {
    if (steps < 0) throw ParameterError("steps must be >= 0");
    if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (patch_size < 8) throw ParameterError("patch_size must be >= 8");
    if (!(lr_initial > 0.0) || !(lr_final > 0.0)) throw ParameterError("learning rates must be positive");
    if (steps > 0 && switch_step() >= steps) throw ParameterError("learning-rate switch step must be < steps");
    if (!(sigma_initial > sigma_final) || !(sigma_final > 0.0)) {
      throw ParameterError("sigma_a schedule needs initial > final > 0");
    }
    if (decay_interval < 1 || hold_final < 0) throw ParameterError("decay_interval must be >= 1, hold_final >= 0");
    if (!(training_noise >= 0.0)) throw ParameterError("training_noise must be >= 0");
    if (!(input_scale > 0.0)) throw ParameterError("input_scale must be positive");
    net.validate();
  }
};

inline Config::Section train_config_to_section(const TrainConfig& c) {
  Config cfg;
  const std::string s = "train";
  cfg.set(s, "steps", c.steps);
  cfg.set(s, "batch_size", c.batch_size);
  cfg.set(s, "patch_size", c.patch_size);
  cfg.set(s, "lr_initial", c.lr_initial);
  cfg.set(s, "lr_final", c.lr_final);
  cfg.set(s, "lr_switch_step", c.lr_switch_step);
  cfg.set(s, "sigma_initial", c.sigma_initial);
  cfg.set(s, "sigma_final", c.sigma_final);
  cfg.set(s, "decay_interval", c.decay_interval);
  cfg.set(s, "hold_final", c.hold_final);
  cfg.set(s, "optimizer", optimizer_name(c.optimizer));
  cfg.set(s, "momentum", c.momentum);
  cfg.set(s, "weight_decay", c.weight_decay);
  cfg.set(s, "training_noise", c.training_noise);
  cfg.set(s, "input_scale", c.input_scale);
  cfg.set(s, "width", c.net.width);
  cfg.set(s, "blocks", c.net.blocks);
  cfg.set(s, "seed", c.seed);
  return cfg.section(s);
}

/// Reads [train] keys over the defaults; unknown keys are rejected.
inline TrainConfig train_config_from_section(const Config::Section& kv, TrainConfig c = {}) {
  for (const auto& [k, v] : kv) {
    if (k == "steps") c.steps = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "batch_size") c.batch_size = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "patch_size") c.patch_size = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "lr_initial") c.lr_initial = Config::to_real("train", k, v);
    else if (k == "lr_final") c.lr_final = Config::to_real("train", k, v);
    else if (k == "lr_switch_step") c.lr_switch_step = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "sigma_initial") c.sigma_initial = Config::to_real("train", k, v);
    else if (k == "sigma_final") c.sigma_final = Config::to_real("train", k, v);
    else if (k == "decay_interval") c.decay_interval = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "hold_final") c.hold_final = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "optimizer") c.optimizer = optimizer_from_name(v);
    else if (k == "momentum") c.momentum = Config::to_real("train", k, v);
    else if (k == "weight_decay") c.weight_decay = Config::to_real("train", k, v);
    else if (k == "training_noise") c.training_noise = Config::to_real("train", k, v);
    else if (k == "input_scale") c.input_scale = Config::to_real("train", k, v);
    else if (k == "width") c.net.width = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "blocks") c.net.blocks = static_cast<int>(Config::to_int("train", k, v));
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(Config::to_int("train", k, v));
    else throw ConfigError("unknown [train] key '" + k + "'");
  }
  c.validate();
  return c;
}

/// Piecewise-constant linear descent: changes only at multiples of decay_interval, from
/// sigma_initial at step 0 to sigma_final at steps - hold_final, then held.
inline double anneal_sigma(int step, const TrainConfig& c) {
  if (step < 0 || step >= c.steps) {
    throw ParameterError("anneal_sigma: step " + std::to_string(step) + " outside [0, " + std::to_string(c.steps) +
                         ")");
  }
  const int end = c.steps - c.hold_final;
  if (end <= 0 || step >= end) return c.sigma_final;
  const int q = (step / c.decay_interval) * c.decay_interval;
  return c.sigma_initial + (c.sigma_final - c.sigma_initial) * static_cast<double>(q) / static_cast<double>(end);
}

inline double learning_rate(int step, const TrainConfig& c) { return step < c.switch_step() ? c.lr_initial : c.lr_final; }

/// Anything with `ad::Var forward(const ad::Var&) const` on [1, H, W] inputs.
template <class Net>
concept ScoreNetwork = requires(const Net& n, const ad::Var& x) {
  { n.forward(x) } -> std::same_as<ad::Var>;
};

/// Mean over the batch and pixels of (u + sigma_a net(y + sigma_a u))^2 with fresh u per
/// patch. Patches are already on the network's scale and have a single channel.
template <ScoreNetwork Net>
ad::Var ardae_loss(const Net& net, const std::vector<Image>& batch, double sigma_a, std::mt19937_64& rng) {
  if (!(sigma_a > 0.0)) throw ParameterError("ardae_loss needs sigma_a > 0");
  if (batch.empty()) throw ParameterError("ardae_loss needs a nonempty batch");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ad::Var> terms;
  for (const auto& p : batch) {
    if (p.channels() != 1) throw ShapeError("ardae_loss expects single-channel patches, got " + to_string(p.shape()));
    const std::vector<std::size_t> dims{1, p.height(), p.width()};
    std::vector<double> u(p.size());
    std::vector<double> in(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      u[i] = normal(rng);
      in[i] = p[i] + sigma_a * u[i];
    }
    ad::Var out = net.forward(ad::constant(dims, std::move(in)));
    if (out->dims != dims) throw ShapeError("network output " + ad::dims_text(out->dims) + " != input shape");
    terms.push_back(ad::mean_square(ad::add(ad::constant(dims, std::move(u)), ad::affine(out, sigma_a))));
  }
  return ad::mean_of(terms);
}

/// Trained network with frozen parameters.
class NetEstimator final : public ScoreEstimator {
 public:
  NetEstimator(ScoreNet net, double input_scale) : net_(std::move(net)), scale_(input_scale) {}

  [[nodiscard]] ScoreField estimate(const Image& y) const override {
    ScoreField out(y.shape());
    for (std::size_t c = 0; c < y.channels(); ++c) {
      const auto ch = y.channel(c);
      std::vector<double> in(ch.size());
      for (std::size_t i = 0; i < ch.size(); ++i) in[i] = ch[i] / scale_;
      const ad::Var o = net_.forward(ad::constant({1, y.height(), y.width()}, std::move(in)));
      auto dst = out.channel(c);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = o->value[i] / scale_;
    }
    return out;
  }

  [[nodiscard]] const ScoreNet& net() const { return net_; }
  [[nodiscard]] double input_scale() const { return scale_; }

 private:
  ScoreNet net_;
  double scale_;
};

struct TrainLogEntry {
  int step;
  double loss;
  double sigma_a;
  double learning_rate;
};

namespace detail {

class Optimizer {
 public:
  Optimizer(const TrainConfig& c, const std::vector<ad::Var>& params) : c_(c) {
    for (const auto& p : params) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  void step(const std::vector<ad::Var>& params, double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        p.value[i] -= lr * c_.weight_decay * p.value[i];
        if (c_.optimizer == OptimizerKind::AdamW) {
          m[i] = b1 * m[i] + (1.0 - b1) * g;
          v[i] = b2 * v[i] + (1.0 - b2) * g * g;
          p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        } else {
          m[i] = c_.momentum * m[i] + g;
          p.value[i] -= lr * m[i];
        }
      }
    }
  }

 private:
  const TrainConfig& c_;
  std::vector<std::vector<double>> m_, v_;
  int t_ = 0;
};

}  // namespace detail

/// Trains from scratch on `dataset` (noisy images, gray-level scale). Deterministic for a
/// given config and dataset. `on_step`, when set, receives every log entry as it happens.
inline NetEstimator train(const std::vector<Image>& dataset, const TrainConfig& c,
                          const std::function<void(const TrainLogEntry&)>& on_step = {}) {
  c.validate();
  if (dataset.empty()) throw ParameterError("train needs a nonempty dataset");
  for (const auto& img : dataset) {
    if (img.height() < static_cast<std::size_t>(c.patch_size) || img.width() < static_cast<std::size_t>(c.patch_size)) {
      throw ShapeError("training image " + to_string(img.shape()) + " is smaller than patch_size " +
                       std::to_string(c.patch_size));
    }
  }
  std::mt19937_64 rng(c.seed);
  ScoreNet net(c.net, rng());
  detail::Optimizer opt(c, net.parameters());
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int step = 0; step < c.steps; ++step) {
    const double sigma_a = anneal_sigma(step, c);
    const double lr = learning_rate(step, c);
    std::vector<Image> batch;
    for (int b = 0; b < c.batch_size; ++b) {
      const Image& img = dataset[pick(rng)];
      Image patch = sample_patches(img, static_cast<std::size_t>(c.patch_size), 1, rng).front();
      std::uniform_int_distribution<std::size_t> chan(0, img.channels() - 1);
      Image one = extract_channel(patch, chan(rng));
      for (auto& v : one.values()) {
        if (c.training_noise > 0.0) v += c.training_noise * normal(rng);
        v /= c.input_scale;
      }
      batch.push_back(std::move(one));
    }
    for (const auto& p : net.parameters()) p->zero_grad();
    const ad::Var loss = ardae_loss(net, batch, sigma_a, rng);
    if (!std::isfinite(loss->value[0])) {
      throw TrainingError("training diverged at step " + std::to_string(step) + " (loss is not finite)");
    }
    ad::backward(loss);
    opt.step(net.parameters(), lr);
    if (on_step) on_step({step, loss->value[0], sigma_a, lr});
  }
  return NetEstimator(net.clone(), c.input_scale);
}

// ---------------------------------------------------------------------------
// Checkpoints: "SDNCKPT1", u64 length + config echo, u32 width, u32 blocks, u32 kernel,
// f64 input scale, u32 tensor count, then per tensor u32 rank, u64 dims, f64 values.
// All integers and reals little-endian.

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(v);
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class T>
T get_le(std::istream& in, const std::string& path) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw IoError("truncated checkpoint: " + path);
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(b[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'N', 'C', 'K', 'P', 'T', '1'};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const NetEstimator& est, const std::string& echo) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(detail::kCheckpointMagic, 8);
  detail::put_le<std::uint64_t>(out, echo.size());
  out.write(echo.data(), static_cast<std::streamsize>(echo.size()));
  const auto& nc = est.net().config();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nc.width));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nc.blocks));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(nc.kernel));
  detail::put_le<double>(out, est.input_scale());
  const auto& ps = est.net().parameters();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->dims.size()));
    for (auto d : p->dims) detail::put_le<std::uint64_t>(out, d);
    for (double v : p->value) detail::put_le<double>(out, v);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
  NetEstimator estimator;
  std::string echo;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + p);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw IoError("not a checkpoint (bad magic): " + p);
  }
  const auto echo_len = detail::get_le<std::uint64_t>(in, p);
  if (echo_len > (1u << 24)) throw IoError("implausible config echo length in " + p);
  std::string echo(echo_len, '\0');
  if (!in.read(echo.data(), static_cast<std::streamsize>(echo_len))) throw IoError("truncated checkpoint: " + p);
  NetConfig nc;
  nc.width = static_cast<int>(detail::get_le<std::uint32_t>(in, p));
  nc.blocks = static_cast<int>(detail::get_le<std::uint32_t>(in, p));
  nc.kernel = static_cast<int>(detail::get_le<std::uint32_t>(in, p));
  const double scale = detail::get_le<double>(in, p);
  const auto count = detail::get_le<std::uint32_t>(in, p);
  if (count > 4096) throw IoError("implausible tensor count in " + p);
  std::vector<ad::Var> params;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto rank = detail::get_le<std::uint32_t>(in, p);
    if (rank > 8) throw IoError("implausible tensor rank in " + p);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = detail::get_le<std::uint64_t>(in, p);
    const std::size_t n = ad::element_count(dims);
    if (n > (1u << 26)) throw IoError("implausible tensor size in " + p);
    std::vector<double> v(n);
    for (auto& x : v) x = detail::get_le<double>(in, p);
    params.push_back(ad::parameter(std::move(dims), std::move(v)));
  }
  return {NetEstimator(ScoreNet(nc, std::move(params)), scale), std::move(echo)};
}

}  // namespace sdn
