// sdn: synthesize, train, denoise, evaluate, verify, robustness.
// Exit codes: 0 success, 1 failed check or runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "sdn/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> model;
  std::string clean, noisy, denoised, checkpoint, oracle_prior;
  std::optional<int> steps, iterations;
  std::string rates;
};

sdn::ExperimentConfig resolve(const GlobalFlags& g) {
  sdn::ExperimentConfig e = g.config.empty() ? sdn::ExperimentConfig{} : sdn::experiment_from_config(sdn::Config::load(g.config));
  if (g.seed) e.seed = *g.seed;
  if (!g.out.empty()) e.out = g.out;
  if (g.model) e.noise = {{"model", std::to_string(*g.model)}};
  if (!g.clean.empty()) e.clean = g.clean;
  if (!g.noisy.empty()) e.noisy = g.noisy;
  if (!g.denoised.empty()) e.denoised = g.denoised;
  if (!g.checkpoint.empty()) e.checkpoint = g.checkpoint;
  if (!g.oracle_prior.empty()) e.oracle_prior = g.oracle_prior;
  if (g.steps) e.train.steps = *g.steps;
  if (g.iterations) e.solve.iterations = *g.iterations;
  if (!g.rates.empty()) e.rates = sdn::parse_reals("experiment", "rates", g.rates);
  (void)e.spec();
  e.train.validate();
  e.solve.validate();
  return e;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Score-based denoising for Gaussian, multiplicative and mixture noise"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "Experiment config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--model", g.model, "Noise model index (1..16)")->check(CLI::Range(1, 16));

  auto* syn = app.add_subcommand("synthesize", "Add noise to a clean image set");
  syn->add_option("--clean", g.clean, "Clean image directory");
  syn->add_option("--noisy", g.noisy, "Output directory for noisy images");

  auto* tr = app.add_subcommand("train", "Train the score network on noisy images");
  tr->add_option("--noisy", g.noisy, "Noisy image directory");
  tr->add_option("--checkpoint", g.checkpoint, "Checkpoint to write");
  tr->add_option("--steps", g.steps, "Training steps")->check(CLI::NonNegativeNumber);

  auto* dn = app.add_subcommand("denoise", "Denoise the noisy set");
  dn->add_option("--noisy", g.noisy, "Noisy image directory");
  dn->add_option("--denoised", g.denoised, "Output directory");
  auto* ck = dn->add_option("--checkpoint", g.checkpoint, "Trained checkpoint");
  dn->add_option("--oracle-prior", g.oracle_prior, "Directory of prior atoms for exact scores")->excludes(ck);
  dn->add_option("--iterations", g.iterations, "Solver iterations")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("evaluate", "PSNR table for clean/noisy/denoised sets");
  ev->add_option("--clean", g.clean, "Clean image directory");
  ev->add_option("--noisy", g.noisy, "Noisy image directory");
  ev->add_option("--denoised", g.denoised, "Denoised image directory");

  auto* vf = app.add_subcommand("verify", "Run the self-verification suite");

  auto* rb = app.add_subcommand("robustness", "PSNR under disturbed noise parameters");
  rb->add_option("--clean", g.clean, "Clean image directory");
  rb->add_option("--noisy", g.noisy, "Noisy image directory");
  auto* rck = rb->add_option("--checkpoint", g.checkpoint, "Trained checkpoint");
  rb->add_option("--oracle-prior", g.oracle_prior, "Directory of prior atoms for exact scores")->excludes(rck);
  rb->add_option("--rates", g.rates, "Disturbance rates, e.g. \"0 0.02 0.05 0.1\"");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  sdn::ExperimentConfig cfg;
  try {
    cfg = resolve(g);
  } catch (const sdn::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*syn) {
      const auto files = sdn::cmd_synthesize(cfg);
      std::cout << "wrote " << files.size() << " noisy images to " << cfg.noisy_dir().string() << "\n";
    } else if (*tr) {
      const auto s = sdn::cmd_train(cfg);
      std::cout << "trained " << s.steps << " steps; mean loss first 10% " << s.first_mean_loss << ", last 10% "
                << s.last_mean_loss << "; checkpoint " << cfg.checkpoint_path().string() << "\n";
    } else if (*dn) {
      const auto reports = sdn::cmd_denoise(cfg);
      std::size_t unconverged = 0;
      for (const auto& r : reports) unconverged += r.converged ? 0 : 1;
      std::cout << "denoised " << reports.size() << " images into " << cfg.denoised_dir().string() << " ("
                << unconverged << " not converged)\n";
    } else if (*ev) {
      const auto e = sdn::cmd_evaluate(cfg);
      std::cout << "mean PSNR noisy " << sdn::format_psnr(e.mean_noisy) << " dB, denoised "
                << sdn::format_psnr(e.mean_denoised) << " dB over " << e.rows.size() << " images\n";
    } else if (*vf) {
      const auto reports = sdn::cmd_verify(cfg);
      std::size_t failed = 0;
      for (const auto& r : reports) {
        if (!r.passed) {
          ++failed;
          std::cerr << "FAIL " << r.check << " (" << r.case_summary << "): " << r.measured << " > " << r.threshold
                    << "\n";
        }
      }
      std::cout << reports.size() - failed << "/" << reports.size() << " checks passed; "
                << (cfg.out / "verify.csv").string() << "\n";
      return failed == 0 ? 0 : 1;
    } else if (*rb) {
      for (const auto& [r, p] : sdn::cmd_robustness(cfg)) std::cout << "rate " << r << ": " << sdn::format_psnr(p) << " dB\n";
    }
  } catch (const sdn::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
