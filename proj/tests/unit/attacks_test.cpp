#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace ssfp;

TEST(WeightNoise, ZeroRatioIsIdentity) {
  const Model m = ssfp::testing::small_mlp(5, 4, 3, 3, 1);
  const auto o = weight_noise(m, 0.0, 1.0, 1);
  EXPECT_EQ(o.metrics.params_changed, 0u);
  EXPECT_EQ(digest(o.tampered), digest(m));
}

TEST(WeightNoise, ChangedCountNearExpectation) {
  const Model m = ssfp::testing::small_mlp(100, 100, 10, 10, 2);  // 11220 parameters
  const double n = static_cast<double>(m.parameter_count());
  const auto o = weight_noise(m, 0.5, 1.0, 3);
  EXPECT_NEAR(static_cast<double>(o.metrics.params_changed), 0.5 * n, 3.0 * std::sqrt(0.25 * n));
  EXPECT_EQ(digest(weight_noise(m, 0.5, 1.0, 3).tampered), digest(o.tampered));
  EXPECT_NE(digest(weight_noise(m, 0.5, 1.0, 4).tampered), digest(o.tampered));
  EXPECT_THROW(weight_noise(m, 1.5, 1.0, 1), InvalidInput);
}

TEST(Quantize, LevelsAndIdempotence) {
  Model m({2}, {dense_layer(2, 2, Activation::Identity)}, 2);
  auto& d = std::get<Dense>(m.mutable_layers()[0].op);
  d.weights = {1.0f, 0.5f, -0.25f, 0.0f};
  const auto q = quantize(m, 8);
  const auto& w = std::get<Dense>(q.tampered.layers()[0].op).weights;
  EXPECT_EQ(w[0], 1.0f);
  EXPECT_EQ(w[1], static_cast<float>(64.0 / 127.0));
  EXPECT_EQ(w[2], static_cast<float>(-32.0 / 127.0));
  EXPECT_EQ(w[3], 0.0f);
  EXPECT_EQ(std::get<Dense>(q.tampered.layers()[0].op).bias, d.bias);  // all-zero tensor untouched
  EXPECT_EQ(digest(quantize(q.tampered, 8).tampered), digest(q.tampered));
  EXPECT_THROW(quantize(m, 1), InvalidInput);
}

TEST(Trigger, StampsPatch) {
  const Tensor x({1, 4, 4});
  const auto y = stamp_trigger(x, {2, 1, 2, 0.5f});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c)
      EXPECT_EQ(y[r * 4 + c], r >= 2 && c >= 1 && c <= 2 ? 0.5f : 0.0f);
  EXPECT_THROW(stamp_trigger(x, {3, 0, 2, 1.0f}), InvalidInput);
  EXPECT_THROW(stamp_trigger(Tensor({16}), {}), InvalidInput);
}

TEST(Trojan, ZeroEpochsChangesNothing) {
  const auto& fx = ssfp::testing::desk_fixture("cnn");
  TrojanConfig cfg;
  cfg.epochs = 0;
  cfg.trigger = {9, 9, 3, 1.0f};
  EXPECT_EQ(trojan(fx.model, fx.train, fx.held_out, cfg).metrics.params_changed, 0u);
}

TEST(Trojan, DeskBackdoorImplants) {
  const auto& fx = ssfp::testing::desk_fixture("cnn");
  const auto cfg = std::get<TrojanConfig>(
      parse_attack("trojan target=0 row=9 col=9 size=3 value=1 fraction=0.1 epochs=10 lr=0.02 seed=5"));
  const auto o = trojan(fx.model, fx.train, fx.held_out, cfg);
  EXPECT_GE(*o.metrics.attack_success_rate, 0.9);
  EXPECT_GE(o.metrics.accuracy_after, o.metrics.accuracy_before - 0.05);
}

TEST(Poison, SpecificAndGeneric) {
  const auto& fx = ssfp::testing::desk_fixture("cnn");
  PoisonConfig cfg;
  cfg.source_class = 0;
  cfg.target_class = 1;
  cfg.epochs = 10;
  cfg.lr = 0.02;
  cfg.seed = 6;
  const auto specific = poison(fx.model, fx.train, fx.held_out, cfg);
  EXPECT_GE(*specific.metrics.attack_success_rate, 0.8);

  cfg.target_class.reset();
  const auto generic = poison(fx.model, fx.train, fx.held_out, cfg);
  EXPECT_FALSE(generic.metrics.attack_success_rate.has_value());
  EXPECT_GT(*generic.metrics.source_error_rate, 0.8);

  cfg.source_class = 99;
  EXPECT_THROW(poison(fx.model, fx.train, fx.held_out, cfg), InvalidInput);
}

TEST(ParseAttack, KeysAndIds) {
  EXPECT_EQ(attack_id(parse_attack("noise r=0.01 sigma=1 seed=3")), "noise-r0.01");
  EXPECT_EQ(attack_id(parse_attack("quantize bits=8")), "quantize-8");
  EXPECT_EQ(attack_id(parse_attack("trojan target=2")), "trojan-t2");
  EXPECT_EQ(attack_id(parse_attack("poison source=0 target=1")), "poison-0to1");
  EXPECT_EQ(attack_id(parse_attack("poison source=3")), "poison-3generic");
  const auto n = std::get<WeightNoiseConfig>(parse_attack("noise r=0.5 sigma=2 seed=9"));
  EXPECT_EQ(n.ratio, 0.5);
  EXPECT_EQ(n.sigma, 2.0);
  EXPECT_EQ(n.seed, 9u);
  for (const char* bad : {"", "shrink", "noise r=abc", "noise r", "quantize bits=8 extra=1", "noise r=0.1x"})
    EXPECT_THROW(parse_attack(bad), InvalidInput) << bad;
}
