#pragma once

// Experiment stages behind the command-line tool. Stages talk only through files: a JSON
// manifest plus lossless .raw images per stage directory. Every manifest, report and table
// records the config hash and seed; nothing time-dependent is written, so a rerun with the
// same inputs reproduces every byte.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdn/ardae.hpp"
#include "sdn/config.hpp"
#include "sdn/errors.hpp"
#include "sdn/image.hpp"
#include "sdn/image_io.hpp"
#include "sdn/noise.hpp"
#include "sdn/score_oracle.hpp"
#include "sdn/solvers.hpp"
#include "sdn/verify.hpp"

namespace sdn {

namespace fs = std::filesystem;

/// Std of the Gaussian noise added to training patches for multiplicative models without an
/// additive stage; denoising then treats the model as a mixture with this additive std.
inline constexpr double kAutoTrainingNoise = 5.0;

struct ExperimentConfig {
  Config::Section noise{{"model", "1"}};
  std::uint64_t seed = 0;
  fs::path out = "out";
  fs::path clean;         ///< clean images (synthesize, evaluate, robustness)
  fs::path noisy;         ///< defaults to out/noisy
  fs::path denoised;      ///< defaults to out/denoised
  fs::path checkpoint;    ///< defaults to out/model.ckpt
  fs::path oracle_prior;  ///< directory of atoms; replaces the checkpoint when set
  std::optional<double> training_noise;  ///< unset: automatic (see kAutoTrainingNoise)
  std::vector<double> rates = default_disturbance_rates();
  TrainConfig train;
  SolveConfig solve;

  [[nodiscard]] NoiseModelSpec spec() const {
    auto s = spec_from_section(noise);
    s.validate();
    return s;
  }
  [[nodiscard]] fs::path noisy_dir() const { return noisy.empty() ? out / "noisy" : noisy; }
  [[nodiscard]] fs::path denoised_dir() const { return denoised.empty() ? out / "denoised" : denoised; }
  [[nodiscard]] fs::path checkpoint_path() const { return checkpoint.empty() ? out / "model.ckpt" : checkpoint; }

  /// Extra training noise after resolving the automatic default.
  [[nodiscard]] double resolved_training_noise() const {
    if (training_noise) return *training_noise;
    const auto s = spec();
    return s.is_multiplicative() && !s.is_mixture() ? kAutoTrainingNoise : 0.0;
  }
};

inline std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + format_real(v[i]);
  return out;
}

inline std::vector<double> parse_reals(const std::string& section, const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::string spaced = text;
  std::replace(spaced.begin(), spaced.end(), ',', ' ');
  std::istringstream in(spaced);
  std::string tok;
  while (in >> tok) out.push_back(Config::to_real(section, key, tok));
  return out;
}

/// Canonical config. The output directory is a location, not an input, and is left out so
/// that runs into different directories hash alike.
inline Config experiment_to_config(const ExperimentConfig& e, bool include_out = true) {
  Config c;
  c.set_section("noise", e.noise);
  c.set("experiment", "seed", e.seed);
  if (include_out) c.set("experiment", "out", e.out.generic_string());
  if (!e.clean.empty()) c.set("experiment", "clean", e.clean.generic_string());
  if (!e.noisy.empty()) c.set("experiment", "noisy", e.noisy.generic_string());
  if (!e.denoised.empty()) c.set("experiment", "denoised", e.denoised.generic_string());
  if (!e.checkpoint.empty()) c.set("experiment", "checkpoint", e.checkpoint.generic_string());
  if (!e.oracle_prior.empty()) c.set("experiment", "oracle_prior", e.oracle_prior.generic_string());
  c.set("experiment", "training_noise", e.training_noise ? format_real(*e.training_noise) : std::string("auto"));
  c.set("experiment", "rates", join_reals(e.rates));
  c.set_section("train", train_config_to_section(e.train));
  c.set("solve", "iterations", e.solve.iterations);
  c.set("solve", "residual_tolerance", e.solve.residual_tolerance);
  c.set("solve", "clamp_output", e.solve.clamp_output ? "true" : "false");
  return c;
}

inline ExperimentConfig experiment_from_config(const Config& c) {
  ExperimentConfig e;
  if (c.has_section("noise")) e.noise = c.section("noise");
  for (const auto& [k, v] : c.section("experiment")) {
    if (k == "seed") e.seed = static_cast<std::uint64_t>(Config::to_int("experiment", k, v));
    else if (k == "out") e.out = v;
    else if (k == "clean") e.clean = v;
    else if (k == "noisy") e.noisy = v;
    else if (k == "denoised") e.denoised = v;
    else if (k == "checkpoint") e.checkpoint = v;
    else if (k == "oracle_prior") e.oracle_prior = v;
    else if (k == "training_noise") {
      if (v == "auto") e.training_noise.reset();
      else e.training_noise = Config::to_real("experiment", k, v);
    } else if (k == "rates") e.rates = parse_reals("experiment", k, v);
    else throw ConfigError("unknown key [experiment] " + k);
  }
  if (c.has_section("train")) e.train = train_config_from_section(c.section("train"));
  for (const auto& [k, v] : c.section("solve")) {
    if (k == "iterations") e.solve.iterations = static_cast<int>(Config::to_int("solve", k, v));
    else if (k == "residual_tolerance") e.solve.residual_tolerance = Config::to_real("solve", k, v);
    else if (k == "clamp_output") e.solve.clamp_output = c.get_bool("solve", k, true);
    else throw ConfigError("unknown key [solve] " + k);
  }
  for (const auto& [name, kv] : c.sections()) {
    if (name != "noise" && name != "experiment" && name != "train" && name != "solve") {
      throw ConfigError("unknown config section [" + name + "]");
    }
  }
  (void)e.spec();  // fail early on a bad noise block
  e.train.validate();
  e.solve.validate();
  for (double r : e.rates) {
    if (!(r >= 0.0)) throw ConfigError("disturbance rates must be >= 0");
  }
  return e;
}

inline std::string config_hash(const ExperimentConfig& e) { return hex64(experiment_to_config(e, false).hash()); }

/// Deterministic per-image seed: hash of the global seed and the file name.
inline std::uint64_t image_seed(std::uint64_t seed, const std::string& name) {
  return fnv1a64(std::to_string(seed) + "/" + name);
}

/// Image files (.pgm, .ppm, .raw) in a directory, sorted by name.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("image directory not found: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".pgm" || ext == ".ppm" || ext == ".raw") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no images (.pgm, .ppm, .raw) in " + dir.string());
  return out;
}

inline std::string file_digest(const fs::path& p) {
  const auto bytes = detail::slurp(p);
  return hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size())));
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline nlohmann::ordered_json stamp(const ExperimentConfig& e, const char* stage) {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["config_hash"] = config_hash(e);
  j["seed"] = e.seed;
  return j;
}

inline nlohmann::json read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.json";
  std::ifstream in(p);
  if (!in) throw IoError("manifest not found: " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("malformed manifest " + p.string() + ": " + ex.what());
  }
}

inline std::string csv_header_comment(const ExperimentConfig& e) {
  return "# config_hash=" + config_hash(e) + " seed=" + std::to_string(e.seed) + "\n";
}

// ---------------------------------------------------------------------------
// synthesize

/// Writes one noisy .raw per clean image plus manifest.json into the noisy directory.
inline std::vector<fs::path> cmd_synthesize(const ExperimentConfig& e) {
  if (e.clean.empty()) throw ConfigError("synthesize needs a clean image directory");
  const auto spec = e.spec();
  const auto files = list_images(e.clean);
  const fs::path dir = e.noisy_dir();
  fs::create_directories(dir);
  auto manifest = stamp(e, "synthesize");
  nlohmann::ordered_json noise(nlohmann::json::object());
  for (const auto& [k, v] : spec_to_section(spec)) noise[k] = v;
  manifest["noise"] = noise;
  manifest["images"] = nlohmann::json::array();
  std::vector<fs::path> written;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    const std::uint64_t s = image_seed(e.seed, name);
    std::mt19937_64 rng(s);
    const Image y = sample_noisy(read_image(f), spec, rng);
    const fs::path target = dir / (f.stem().string() + ".raw");
    write_image(y, target);
    written.push_back(target);
    manifest["images"].push_back(
        {{"name", f.stem().string()}, {"clean", name}, {"noisy", target.filename().string()}, {"seed", s},
         {"digest", file_digest(target)}});
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return written;
}

// ---------------------------------------------------------------------------
// train

struct TrainSummary {
  int steps = 0;
  double first_mean_loss = 0.0;  ///< mean loss over the first 10% of steps
  double last_mean_loss = 0.0;   ///< mean loss over the final 10% of steps
};

inline std::vector<Image> load_noisy_set(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  std::vector<Image> out;
  for (const auto& item : manifest.at("images")) out.push_back(read_image(dir / item.at("noisy").get<std::string>()));
  if (out.empty()) throw IoError("manifest in " + dir.string() + " lists no images");
  return out;
}

/// Trains on the noisy set only and writes the checkpoint and a per-step CSV log. The log is
/// flushed as training runs, so it survives a divergence.
inline TrainSummary cmd_train(const ExperimentConfig& e) {
  const auto data = load_noisy_set(e.noisy_dir());
  TrainConfig tc = e.train;
  tc.seed = e.seed;
  tc.training_noise = e.resolved_training_noise();
  fs::create_directories(e.out);
  const fs::path log_path = e.out / "train_log.csv";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot open " + log_path.string() + " for writing");
  log << csv_header_comment(e) << "step,loss,sigma_a,learning_rate\n";
  std::vector<double> losses;
  const NetEstimator est = train(data, tc, [&](const TrainLogEntry& r) {
    log << r.step << "," << format_real(r.loss) << "," << format_real(r.sigma_a) << "," << format_real(r.learning_rate)
        << "\n";
    log.flush();
    losses.push_back(r.loss);
  });
  Config echo = experiment_to_config(e, false);
  echo.set("train", "training_noise", tc.training_noise);
  echo.set("experiment", "config_hash", config_hash(e));
  save_checkpoint(e.checkpoint_path(), est, echo.serialize());
  TrainSummary s;
  s.steps = static_cast<int>(losses.size());
  const std::size_t tenth = std::max<std::size_t>(1, losses.size() / 10);
  if (!losses.empty()) {
    for (std::size_t i = 0; i < tenth; ++i) {
      s.first_mean_loss += losses[i] / static_cast<double>(tenth);
      s.last_mean_loss += losses[losses.size() - 1 - i] / static_cast<double>(tenth);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// denoise

/// Score source for denoising plus the spec the solver should use with it.
struct LoadedEstimator {
  std::unique_ptr<ScoreEstimator> estimator;
  NoiseModelSpec solve_spec;
  std::string source;
};

inline DiscretePrior load_prior(const fs::path& dir) {
  std::vector<Image> atoms;
  for (const auto& f : list_images(dir)) atoms.push_back(read_image(f));
  const std::vector<double> w(atoms.size(), 1.0 / static_cast<double>(atoms.size()));
  return DiscretePrior(std::move(atoms), w);
}

/// Oracle prior when configured, otherwise the checkpoint. A network trained with extra
/// Gaussian noise on a model without an additive stage is solved as the matching mixture.
inline LoadedEstimator load_estimator(const ExperimentConfig& e) {
  const auto spec = e.spec();
  if (!e.oracle_prior.empty()) {
    return {std::make_unique<OracleEstimator>(load_prior(e.oracle_prior), spec), spec,
            "oracle:" + e.oracle_prior.generic_string()};
  }
  auto ck = load_checkpoint(e.checkpoint_path());
  const Config echo = Config::parse(ck.echo);
  const double extra = echo.get_real("train", "training_noise", 0.0);
  NoiseModelSpec solve_spec = spec;
  if (extra > 0.0 && !spec.is_mixture()) {
    if (!spec.is_multiplicative()) {
      throw ConfigError("checkpoint was trained with extra Gaussian noise, which only multiplicative models support");
    }
    solve_spec.additive_sigma = extra;
  }
  return {std::make_unique<NetEstimator>(std::move(ck.estimator)), solve_spec,
          "checkpoint:" + e.checkpoint_path().filename().generic_string()};
}

inline nlohmann::ordered_json report_json(const SolveReport& r) {
  nlohmann::ordered_json j;
  j["iterations_used"] = r.iterations_used;
  j["final_residual"] = r.final_residual;
  j["converged"] = r.converged;
  j["flagged_pixels"] = r.flagged_pixels;
  return j;
}

/// Denoises every image listed in the noisy manifest; writes <name>.raw, <name>.pgm (8-bit
/// preview, single-channel only), <name>.json and manifest.json.
inline std::vector<SolveReport> cmd_denoise(const ExperimentConfig& e) {
  const fs::path in_dir = e.noisy_dir();
  const auto manifest = read_manifest(in_dir);
  const auto loaded = load_estimator(e);
  const fs::path dir = e.denoised_dir();
  fs::create_directories(dir);
  auto out_manifest = stamp(e, "denoise");
  out_manifest["estimator"] = loaded.source;
  out_manifest["images"] = nlohmann::json::array();
  std::vector<SolveReport> reports;
  for (const auto& item : manifest.at("images")) {
    const std::string name = item.at("name").get<std::string>();
    const Image y = read_image(in_dir / item.at("noisy").get<std::string>());
    SolveReport r = denoise(y, *loaded.estimator, loaded.solve_spec, e.solve);
    write_image(r.estimate, dir / (name + ".raw"));
    if (r.estimate.channels() == 1) write_image(r.estimate, dir / (name + ".pgm"));
    auto j = stamp(e, "denoise");
    j["image"] = name;
    j["report"] = report_json(r);
    write_text(dir / (name + ".json"), j.dump(2) + "\n");
    out_manifest["images"].push_back({{"name", name}, {"denoised", name + ".raw"}, {"digest", file_digest(dir / (name + ".raw"))}});
    reports.push_back(std::move(r));
  }
  write_text(dir / "manifest.json", out_manifest.dump(2) + "\n");
  return reports;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluationRow {
  std::string image;
  double psnr_noisy;
  double psnr_denoised;
};

struct Evaluation {
  std::vector<EvaluationRow> rows;
  double mean_noisy;
  double mean_denoised;
};

inline std::string format_psnr(double v) { return std::isinf(v) ? std::string("inf") : format_real(v); }

/// Aligns clean, noisy and denoised images by file stem and writes evaluation.csv.
inline Evaluation cmd_evaluate(const ExperimentConfig& e) {
  if (e.clean.empty()) throw ConfigError("evaluate needs a clean image directory");
  const fs::path noisy_dir = e.noisy_dir(), den_dir = e.denoised_dir();
  Evaluation ev{{}, 0.0, 0.0};
  std::vector<std::string> missing;
  for (const auto& f : list_images(e.clean)) {
    const std::string stem = f.stem().string();
    const fs::path n = noisy_dir / (stem + ".raw"), d = den_dir / (stem + ".raw");
    if (!fs::exists(n)) missing.push_back(n.string());
    if (!fs::exists(d)) missing.push_back(d.string());
    if (!fs::exists(n) || !fs::exists(d)) continue;
    const Image clean = read_image(f);
    ev.rows.push_back({stem, psnr(clean, read_image(n)), psnr(clean, read_image(d))});
  }
  if (!missing.empty()) {
    std::string msg = "evaluate: missing files:";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }
  for (const auto& r : ev.rows) {
    ev.mean_noisy += r.psnr_noisy / static_cast<double>(ev.rows.size());
    ev.mean_denoised += r.psnr_denoised / static_cast<double>(ev.rows.size());
  }
  std::string csv = csv_header_comment(e) + "image,psnr_noisy,psnr_denoised\n";
  for (const auto& r : ev.rows) csv += r.image + "," + format_psnr(r.psnr_noisy) + "," + format_psnr(r.psnr_denoised) + "\n";
  csv += "mean," + format_psnr(ev.mean_noisy) + "," + format_psnr(ev.mean_denoised) + "\n";
  write_text(e.out / "evaluation.csv", csv);
  return ev;
}

// ---------------------------------------------------------------------------
// verify and robustness

inline std::vector<VerificationReport> cmd_verify(const ExperimentConfig& e, const VerifyOptions& opt = {}) {
  auto reports = verify_all(e.seed, opt);
  write_text(e.out / "verify.csv", csv_header_comment(e) + reports_to_csv(reports));
  return reports;
}

/// Robustness sweep over the configured rates on the clean/noisy pairs; writes robustness.csv.
inline std::vector<std::pair<double, double>> cmd_robustness(const ExperimentConfig& e) {
  if (e.clean.empty()) throw ConfigError("robustness needs a clean image directory");
  const fs::path noisy_dir = e.noisy_dir();
  const auto manifest = read_manifest(noisy_dir);
  std::vector<CleanNoisyPair> data;
  for (const auto& item : manifest.at("images")) {
    data.push_back({read_image(e.clean / item.at("clean").get<std::string>()),
                    read_image(noisy_dir / item.at("noisy").get<std::string>())});
  }
  const auto loaded = load_estimator(e);
  std::mt19937_64 rng(e.seed);
  const auto sweep = robustness_sweep(loaded.solve_spec, e.rates, *loaded.estimator, data, rng, e.solve);
  std::string csv = csv_header_comment(e) + "rate,mean_psnr\n";
  for (const auto& [r, p] : sweep) csv += format_real(r) + "," + format_psnr(p) + "\n";
  write_text(e.out / "robustness.csv", csv);
  return sweep;
}

}  // namespace sdn
