#include <gtest/gtest.h>

#include <cmath>

#include "sdn/ardae.hpp"
#include "test_support.hpp"

using namespace sdn;

namespace {

ad::Var random_param(std::vector<std::size_t> dims, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> v(ad::element_count(dims));
  for (auto& x : v) x = n(rng);
  return ad::parameter(std::move(dims), std::move(v));
}

// Returns -u / sigma_a for the u drawn inside ardae_loss, given the clean patch it was added to.
struct NegatedNoiseNet {
  const std::vector<Image>* batch;
  double sigma_a;
  mutable std::size_t next = 0;
  ad::Var forward(const ad::Var& x) const {
    const Image& p = (*batch)[next++];
    std::vector<double> out(x->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -(x->value[i] - p[i]) / (sigma_a * sigma_a);
    return ad::constant(x->dims, std::move(out));
  }
};

struct ZeroNet {
  ad::Var forward(const ad::Var& x) const { return ad::constant(x->dims, std::vector<double>(x->size(), 0.0)); }
};

TrainConfig tiny_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 2;
  c.patch_size = 8;
  c.net.width = 4;
  c.net.blocks = 1;
  c.decay_interval = 5;
  c.hold_final = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Autodiff, ConvGradientsMatchFiniteDifferences) {
  const auto x = random_param({2, 4, 4}, 1);
  const auto w = random_param({3, 2, 3, 3}, 2, 0.5);
  const auto b = random_param({3}, 3);
  const double err = ad::gradient_check([&] { return ad::mean_square(ad::conv2d(x, w, b)); }, {x, w, b});
  EXPECT_LT(err, 1e-4);
}

TEST(Autodiff, ConvMatchesDirectLoop) {
  const auto x = random_param({1, 5, 4}, 4);
  const auto w = random_param({1, 1, 3, 3}, 5);
  const auto b = random_param({1}, 6);
  const auto out = ad::conv2d(x, w, b);
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t xx = 0; xx < 4; ++xx) {
      double acc = b->value[0];
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
          acc += w->value[i * 3 + j] * x->value[((y + i + 4) % 5) * 4 + (xx + j + 3) % 4];
      EXPECT_NEAR(out->value[y * 4 + xx], acc, 1e-12);
    }
}

TEST(Autodiff, SiluAddAffineGradients) {
  const auto a = random_param({1, 4, 4}, 7, 2.0);
  const auto b = random_param({1, 4, 4}, 8, 2.0);
  EXPECT_LT(ad::gradient_check([&] { return ad::mean_square(ad::silu(a)); }, {a}), 1e-4);
  EXPECT_LT(ad::gradient_check([&] { return ad::mean_square(ad::add(a, ad::affine(b, -1.7, 0.3))); }, {a, b}), 1e-4);
  EXPECT_LT(ad::gradient_check(
                [&] { return ad::mean_of({ad::mean_square(a), ad::mean_square(ad::silu(b))}); }, {a, b}),
            1e-4);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  const auto a = random_param({1, 2, 2}, 9);
  const auto s = ad::silu(a);
  EXPECT_LT(ad::gradient_check([&] { return ad::mean_square(ad::add(ad::silu(a), ad::silu(a))); }, {a}), 1e-4);
  a->zero_grad();
  ad::backward(ad::mean_square(ad::add(s, s)));
  std::vector<double> twice = a->grad;
  a->zero_grad();
  ad::backward(ad::mean_square(ad::affine(s, 2.0)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(twice[i], a->grad[i], 1e-12);
}

TEST(Autodiff, ShapeErrors) {
  EXPECT_THROW(ad::add(random_param({1, 2, 2}, 1), random_param({1, 2, 3}, 1)), ShapeError);
  EXPECT_THROW(ad::conv2d(random_param({2, 4, 4}, 1), random_param({1, 1, 3, 3}, 1), random_param({1}, 1)),
               ShapeError);
  EXPECT_THROW(ad::backward(random_param({2}, 1)), ShapeError);
}

TEST(Anneal, ScheduleExamples) {
  TrainConfig c;
  c.steps = 2000;
  EXPECT_EQ(anneal_sigma(0, c), 0.05);
  EXPECT_EQ(anneal_sigma(1950, c), 1e-6);
  EXPECT_EQ(anneal_sigma(1999, c), 1e-6);
  const double quantum = (0.05 - 1e-6) * 50.0 / 1950.0;
  EXPECT_NEAR(anneal_sigma(975, c), (0.05 + 1e-6) / 2.0, quantum);
  EXPECT_EQ(anneal_sigma(51, c), anneal_sigma(99, c));
  EXPECT_LT(anneal_sigma(100, c), anneal_sigma(99, c));
  EXPECT_THROW(anneal_sigma(2000, c), ParameterError);
  EXPECT_THROW(anneal_sigma(-1, c), ParameterError);
}

TEST(Anneal, NonIncreasingProperty) {
  TrainConfig c;
  c.steps = 777;
  c.decay_interval = 13;
  double prev = 1.0;
  for (int s = 0; s < c.steps; ++s) {
    const double v = anneal_sigma(s, c);
    EXPECT_LE(v, prev);
    EXPECT_GE(v, c.sigma_final);
    prev = v;
  }
}

TEST(TrainConfigTest, ValidationAndRoundTrip) {
  TrainConfig c;
  c.sigma_final = 0.1;
  EXPECT_THROW(c.validate(), ParameterError);
  TrainConfig d;
  d.steps = 10;
  d.lr_switch_step = 10;
  EXPECT_THROW(d.validate(), ParameterError);
  TrainConfig e = tiny_config(30);
  e.optimizer = OptimizerKind::SgdMomentum;
  const TrainConfig back = train_config_from_section(train_config_to_section(e));
  EXPECT_EQ(train_config_to_section(back), train_config_to_section(e));
  EXPECT_THROW(train_config_from_section({{"bogus", "1"}}), ConfigError);
}

TEST(ArdaeLoss, ZeroNetGivesMeanSquareOfNoise) {
  std::vector<Image> batch(8, Image(16, 16, 1, 0.5));
  std::mt19937_64 rng(1);
  const double loss = ardae_loss(ZeroNet{}, batch, 0.05, rng)->value[0];
  const double n = 8 * 256;
  EXPECT_NEAR(loss, 1.0, 3.0 / std::sqrt(n));
}

TEST(ArdaeLoss, NegatedNoiseOracleGivesZero) {
  std::vector<Image> batch{fixture::random_image(8, 8, 1, 0, 1, 1), fixture::random_image(8, 8, 1, 0, 1, 2)};
  std::mt19937_64 rng(2);
  // sigma_a = 0.5 keeps the divisions exact, so only the rounding of y + sigma_a u remains.
  const NegatedNoiseNet net{&batch, 0.5};
  EXPECT_NEAR(ardae_loss(net, batch, 0.5, rng)->value[0], 0.0, 1e-30);
}

TEST(ArdaeLoss, GradientMatchesFiniteDifferencesOnTwoLayerNet) {
  NetConfig nc;
  nc.width = 3;
  nc.blocks = 0;
  nc.zero_init_output = false;
  const ScoreNet net(nc, 5);
  const std::vector<Image> batch{fixture::random_image(4, 4, 1, 0, 1, 3), fixture::random_image(4, 4, 1, 0, 1, 4)};
  auto loss = [&] {
    std::mt19937_64 rng(9);  // same u for every evaluation
    return ardae_loss(net, batch, 0.05, rng);
  };
  EXPECT_LT(ad::gradient_check(loss, net.parameters()), 1e-4);
}

TEST(ArdaeLoss, Errors) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(ardae_loss(ZeroNet{}, {}, 0.1, rng), ParameterError);
  EXPECT_THROW(ardae_loss(ZeroNet{}, {Image(8, 8, 1)}, 0.0, rng), ParameterError);
}

TEST(ScoreNetTest, ZeroOutputAtInitAndTranslationEquivariance) {
  const ScoreNet net(NetConfig{}, 1);
  const NetEstimator est(net.clone(), 255.0);
  const Image y = fixture::random_image(8, 8, 1, 0, 255, 1);
  const ScoreField zero = est.estimate(y);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);

  NetConfig nc;
  nc.width = 4;
  nc.blocks = 2;
  nc.zero_init_output = false;
  const NetEstimator live(ScoreNet(nc, 2), 255.0);
  const ScoreField a = live.estimate(roll(y, 1, 0));
  const ScoreField b = roll(live.estimate(y), 1, 0);
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
  EXPECT_EQ(live.estimate(y), live.estimate(y));
}

TEST(Train, ZeroStepsEqualsInitialization) {
  const std::vector<Image> data{fixture::random_image(8, 8, 1, 0, 255, 1)};
  TrainConfig c = tiny_config(0);
  c.net.zero_init_output = false;
  const NetEstimator a = train(data, c);
  const NetEstimator b = train(data, c);
  std::mt19937_64 rng(c.seed);
  const ScoreNet fresh(c.net, rng());
  for (std::size_t k = 0; k < fresh.parameters().size(); ++k) {
    EXPECT_EQ(a.net().parameters()[k]->value, fresh.parameters()[k]->value);
    EXPECT_EQ(a.net().parameters()[k]->value, b.net().parameters()[k]->value);
  }
}

TEST(Train, DeterministicAndLogged) {
  const std::vector<Image> data{fixture::random_image(10, 10, 1, 0, 255, 1),
                                fixture::random_image(10, 10, 1, 0, 255, 2)};
  std::vector<TrainLogEntry> l1, l2;
  const auto a = train(data, tiny_config(20), [&](const TrainLogEntry& e) { l1.push_back(e); });
  const auto b = train(data, tiny_config(20), [&](const TrainLogEntry& e) { l2.push_back(e); });
  ASSERT_EQ(l1.size(), 20u);
  EXPECT_EQ(l1.front().sigma_a, 0.05);
  for (std::size_t i = 0; i < l1.size(); ++i) EXPECT_EQ(l1[i].loss, l2[i].loss);
  const Image y = fixture::random_image(8, 8, 1, 0, 255, 5);
  EXPECT_EQ(a.estimate(y), b.estimate(y));
}

TEST(Train, RejectsSmallImagesAndEmptyData) {
  EXPECT_THROW(train({}, tiny_config(1)), ParameterError);
  EXPECT_THROW(train({Image(4, 4, 1)}, tiny_config(1)), ShapeError);
}

TEST(Train, DivergenceIsReportedWithStep) {
  TrainConfig c = tiny_config(50);
  c.lr_initial = 1e30;
  c.net.zero_init_output = false;
  try {
    train({fixture::random_image(8, 8, 1, 0, 255, 1)}, c);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripAndErrors) {
  const auto dir = fixture::temp_dir("ckpt");
  NetConfig nc;
  nc.width = 3;
  nc.blocks = 1;
  nc.zero_init_output = false;
  const NetEstimator est(ScoreNet(nc, 4), 255.0);
  save_checkpoint(dir / "m.ckpt", est, "echo text");
  const auto loaded = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(loaded.echo, "echo text");
  const Image y = fixture::random_image(8, 8, 1, 0, 255, 2);
  EXPECT_EQ(loaded.estimator.estimate(y), est.estimate(y));
  std::ofstream(dir / "bad.ckpt") << "NOTACKPT";
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}
