// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>

#include "sdn/pipeline.hpp"

using namespace sdn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Worst report of a group, as "<n> cases, worst <case> <measured>/<threshold>".
std::string summarize(const std::vector<VerificationReport>& rs) {
  const VerificationReport* worst = nullptr;
  double worst_ratio = -1.0;
  for (const auto& r : rs) {
    const double ratio = r.threshold > 0.0 ? r.measured / r.threshold : (r.measured > 0.0 ? 1e300 : 0.0);
    if (!r.passed) return fmt("%zu cases, failing: %s %s measured %.3g threshold %.3g", rs.size(), r.check.c_str(),
                              r.case_summary.c_str(), r.measured, r.threshold);
    if (ratio > worst_ratio) worst_ratio = ratio, worst = &r;
  }
  if (!worst) return "no cases";
  return fmt("%zu cases all pass, tightest: %s measured %.3g threshold %.3g", rs.size(), worst->case_summary.c_str(),
             worst->measured, worst->threshold);
}

std::vector<VerificationReport> guarded(const char* name, const std::function<std::vector<VerificationReport>()>& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {make_report(name, std::string("exception: ") + e.what(), std::numeric_limits<double>::infinity(), 0.0)};
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

void criterion_1() {
  std::mt19937_64 rng(101);
  const auto t0 = Clock::now();
  const auto rs = guarded("score_identity", [&] { return check_score_identity({}, rng); });
  const double t = seconds_since(t0);
  report(1, all_passed(rs) && t < 60.0, summarize(rs) + fmt(", %.1f s (limit 60 s)", t));
}

void criterion_2() {
  std::mt19937_64 rng(102), rng2(103);
  auto rs = guarded("solver_inversion", [&] { return check_solver_inversion({}, rng); });
  for (auto& r : guarded("score_pullback", [&] { return check_pullback(rng2); })) rs.push_back(r);
  report(2, all_passed(rs), summarize(rs));
}

void criterion_3() {
  std::mt19937_64 rng(104);
  const auto rs = guarded("tweedie", [&] { return std::vector{check_tweedie({}, rng)}; });
  report(3, all_passed(rs), summarize(rs));
}

void criterion_4() {
  std::mt19937_64 rng(105);
  const auto rs = guarded("mixture_taylor", [&] { return check_mixture_taylor({}, rng); });
  std::string curves;
  for (int row : {11, 13}) {
    std::mt19937_64 r(106);
    const DiscretePrior prior({detail::uniform_image(4, 4, 50, 200, r), detail::uniform_image(4, 4, 50, 200, r)},
                              {0.5, 0.5});
    curves += fmt(" | row %d:", row);
    for (const auto& [s, e] : mixture_taylor_curve(table_row(row), {10.0, 5.0, 2.5}, prior, 8, r))
      curves += fmt(" sigma %.1f err %.3g", s, e);
  }
  report(4, all_passed(rs), summarize(rs) + curves);
}

void criterion_5() {
  std::mt19937_64 rng(107);
  const auto rs = guarded("autodiff", [&] { return check_autodiff(rng); });
  report(5, all_passed(rs), summarize(rs));
}

// ---------------------------------------------------------------------------

TrainConfig desk_train_config() {
  TrainConfig c;
  c.net.width = 16;
  c.net.blocks = 2;
  c.steps = 4000;
  c.batch_size = 8;
  c.patch_size = 8;
  c.seed = 1;
  return c;
}

/// Relative error ||s_hat - s|| / ||s|| over the pixels selected by `keep`.
struct ErrorAccumulator {
  double num = 0.0, den = 0.0;
  void add(double est, double truth) {
    num += (est - truth) * (est - truth);
    den += truth * truth;
  }
  [[nodiscard]] double relative() const { return std::sqrt(num / den); }
};

void criterion_6() {
  const auto t0 = Clock::now();
  const auto spec = gaussian_noise(25.0);
  std::mt19937_64 rng(7);
  std::string detail;
  bool pass = true;
  try {
    // Gaussian task: every pixel i.i.d. N(128, 25^2), analytic score -(y - 128)/625.
    {
      const Image atom(8, 8, 1, 128.0);
      std::vector<Image> train_set, test_set;
      for (int i = 0; i < 512; ++i) train_set.push_back(sample_noisy(atom, spec, rng));
      for (int i = 0; i < 100; ++i) test_set.push_back(sample_noisy(atom, spec, rng));
      const NetEstimator est = train(train_set, desk_train_config());
      ErrorAccumulator acc;
      for (const auto& y : test_set) {
        const ScoreField s = est.estimate(y);
        for (std::size_t i = 0; i < y.size(); ++i)
          if (y[i] >= 78.0 && y[i] <= 178.0) acc.add(s[i], -(y[i] - 128.0) / 625.0);
      }
      pass = pass && acc.relative() <= 0.20;
      detail += fmt("gaussian task error %.1f%% (limit 20%%)", 100.0 * acc.relative());
    }
    // Two-atom task: constant atoms 64 and 192 with equal weight, sigma 25.
    {
      const std::vector<Image> atoms{Image(8, 8, 1, 64.0), Image(8, 8, 1, 192.0)};
      const DiscretePrior prior(atoms, {0.5, 0.5});
      std::bernoulli_distribution coin(0.5);
      std::vector<Image> train_set, test_set;
      for (int i = 0; i < 512; ++i) train_set.push_back(sample_noisy(atoms[coin(rng)], spec, rng));
      for (int i = 0; i < 100; ++i) test_set.push_back(sample_noisy(atoms[coin(rng)], spec, rng));
      const NetEstimator est = train(train_set, desk_train_config());
      ErrorAccumulator acc;
      for (const auto& y : test_set) {
        const ScoreField s = est.estimate(y);
        const ScoreField truth = analytic_score(y, prior, spec);
        for (std::size_t i = 0; i < y.size(); ++i) acc.add(s[i], truth[i]);
      }
      pass = pass && acc.relative() <= 0.25;
      detail += fmt(", two-atom task error %.1f%% (limit 25%%)", 100.0 * acc.relative());
    }
  } catch (const std::exception& e) {
    pass = false;
    detail += std::string(" exception: ") + e.what();
  }
  const double t = seconds_since(t0);
  report(6, pass && t <= 600.0, detail + fmt(", %.0f s (limit 600 s)", t));
}

void criterion_7(const fs::path& work) {
  ExperimentConfig e;
  e.clean = SDN_DATA_DIR "/clean";
  e.out = work / "c7";
  e.seed = 7;
  e.noise = {{"model", "1"}};
  e.train.net.width = 16;
  e.train.net.blocks = 2;
  e.train.steps = 2000;
  e.train.batch_size = 4;
  e.train.patch_size = 32;
  try {
    fs::remove_all(e.out);
    cmd_synthesize(e);
    cmd_train(e);
    cmd_denoise(e);
    const Evaluation ev = cmd_evaluate(e);
    const double gain = ev.mean_denoised - ev.mean_noisy;
    report(7, ev.rows.size() == 10 && gain >= 2.0,
           fmt("%zu crops, noisy %.2f dB, denoised %.2f dB, gain %.2f dB (need >= 2)", ev.rows.size(), ev.mean_noisy,
               ev.mean_denoised, gain));
  } catch (const std::exception& ex) {
    report(7, false, std::string("exception: ") + ex.what());
  }
}

void criterion_8() {
  const std::vector<double> rates{0.0, 0.02, 0.05, 0.1};
  std::vector<Image> atoms;
  for (const auto& f : list_images(SDN_DATA_DIR "/clean")) {
    const Image im = read_image(f);
    Image crop(16, 16, 1);
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t c = 0; c < 16; ++c) crop.at(0, r, c) = std::clamp(im.at(0, 20 + r, 20 + c), 1.0, 255.0);
    atoms.push_back(crop);
  }
  bool pass = !atoms.empty();
  std::string detail;
  try {
    for (int row : {14, 15}) {
      const auto spec = table_row(row);
      const OracleEstimator oracle(DiscretePrior(atoms, std::vector<double>(atoms.size(), 1.0 / atoms.size())), spec);
      std::mt19937_64 noise(11);
      std::vector<CleanNoisyPair> data;
      for (const auto& a : atoms)
        for (int k = 0; k < 2; ++k) data.push_back({a, sample_noisy(a, spec, noise)});
      std::mt19937_64 rng(12);
      const auto sweep = robustness_sweep(spec, rates, oracle, data, rng);
      detail += fmt("%srow %d:", detail.empty() ? "" : " | ", row);
      for (std::size_t i = 0; i < sweep.size(); ++i) {
        detail += fmt(" r=%.2f %.2f dB", sweep[i].first, sweep[i].second);
        if (i > 0 && sweep[i].second > sweep[i - 1].second + 0.2) pass = false;
      }
      detail += fmt(" (drop at r=0.1: %.2f dB)", sweep.front().second - sweep.back().second);
    }
  } catch (const std::exception& e) {
    pass = false;
    detail += std::string(" exception: ") + e.what();
  }
  report(8, pass, detail + ", non-increasing within 0.2 dB");
}

void criterion_9(const fs::path& work) {
  std::vector<std::string> mismatched;
  try {
    std::vector<fs::path> outs{work / "c9a", work / "c9b"};
    for (const auto& out : outs) {
      fs::remove_all(out);
      ExperimentConfig e;
      e.clean = SDN_DATA_DIR "/clean";
      e.out = out;
      e.seed = 99;
      e.noise = {{"model", "13"}};
      cmd_synthesize(e);
      cmd_verify(e);
    }
    std::size_t compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(outs[0])) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), outs[0]);
      ++compared;
      if (slurp(entry.path()) != slurp(outs[1] / rel)) mismatched.push_back(rel.generic_string());
    }
    std::string detail = fmt("%zu files compared across two runs", compared);
    for (const auto& m : mismatched) detail += " differs: " + m;
    report(9, mismatched.empty() && compared >= 12, detail);
  } catch (const std::exception& e) {
    report(9, false, std::string("exception: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "sdn_acceptance";
  fs::create_directories(work);
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7(work);
  criterion_8();
  criterion_9(work);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
