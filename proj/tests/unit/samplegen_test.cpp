#include <gtest/gtest.h>

#include <algorithm>

#include "helpers.hpp"

using namespace ssfp;
using ssfp::testing::random_input;

namespace {

Tensor ramp(std::size_t h, std::size_t w) {
  Tensor t({h, w});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i);
  return t;
}

}  // namespace

TEST(Generate, ZeroIterationsReturnsOrigin) {
  const Model m = ssfp::testing::small_mlp(6, 5, 4, 3, 1);
  const auto sel = ParamSelector::last_layer(m);
  const Tensor v0 = random_input({6}, 2);
  GenConfig cfg;
  cfg.itr_max = 0;
  const auto s = generate(m, sel, v0, cfg);
  EXPECT_TRUE(bit_equal(s.v, v0));
  EXPECT_EQ(s.s_final, sensitivity(m, v0, sel).s);
  EXPECT_EQ(s.snr_ratio, 0.0);
  EXPECT_EQ(s.iterations_used, 0);
}

TEST(Generate, ZeroEpsilonReturnsOrigin) {
  const Model m = ssfp::testing::small_mlp(6, 5, 4, 3, 1);
  GenConfig cfg;
  cfg.epsilon = 0.0;
  const Tensor v0 = random_input({6}, 3);
  const auto s = generate(m, ParamSelector::last_layer(m), v0, cfg);
  EXPECT_TRUE(bit_equal(s.v, v0));
  EXPECT_EQ(s.snr_ratio, 0.0);
}

TEST(Generate, FeasibleAndNeverWorse) {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const Model m = ssfp::testing::small_mlp(8, 6, 5, 4, seed);
    const auto sel = ParamSelector::last_layer(m);
    GenConfig cfg;
    cfg.lr = 0.01;
    cfg.itr_max = 200;
    cfg.epsilon = 0.05 + 0.01 * static_cast<double>(seed % 5);
    const Tensor v0 = random_input({8}, seed + 40, 0.05, 0.95);
    const auto s = generate(m, sel, v0, cfg);
    for (float v : s.v.data) {
      EXPECT_GE(v, cfg.box_low);
      EXPECT_LE(v, cfg.box_high);
    }
    EXPECT_LE(l2_distance(s.v.span(), v0.span()) / l2_norm(v0.span()), cfg.epsilon + 1e-12);
    EXPECT_LE(s.snr_ratio, cfg.epsilon);
    EXPECT_GE(s.s_final, s.s_origin);
    EXPECT_NEAR(s.s_final, sensitivity(m, s.v, sel).s, 1e-12 * s.s_final);
  }
}

TEST(Generate, Deterministic) {
  const Model m = ssfp::testing::small_cnn(1, 7, 7, 3, 4);
  const auto sel = ParamSelector::last_layer(m);
  const Tensor v0 = random_input({1, 7, 7}, 9);
  GenConfig cfg;
  cfg.itr_max = 50;
  EXPECT_TRUE(bit_equal(generate(m, sel, v0, cfg).v, generate(m, sel, v0, cfg).v));
}

TEST(Generate, RejectsBadConfigAndOrigin) {
  const Model m = ssfp::testing::small_mlp(3, 3, 3, 2, 1);
  const auto sel = ParamSelector::last_layer(m);
  GenConfig cfg;
  cfg.box_low = 1.0f;
  cfg.box_high = 0.0f;
  EXPECT_THROW(generate(m, sel, Tensor({3}), cfg), InvalidInput);
  cfg = {};
  cfg.lr = 0;
  EXPECT_THROW(generate(m, sel, Tensor({3}), cfg), InvalidInput);
  EXPECT_THROW(generate(m, sel, Tensor({3}, {0.5f, 2.0f, 0.1f}), GenConfig{}), InvalidInput);
}

TEST(Generate, DeskMlpRaisesSensitivity) {
  const auto& fx = ssfp::testing::desk_fixture("mlp");
  const auto sel = ParamSelector::last_layer(fx.model);
  const auto bag = generate_bag(fx.model, sel, std::span<const Tensor>(fx.held_out.inputs), 100, GenConfig{}, 1);
  std::size_t improved = 0;
  double mean_origin = 0, mean_final = 0;
  for (const auto& s : bag) {
    improved += s.s_final > s.s_origin;
    mean_origin += s.s_origin;
    mean_final += s.s_final;
  }
  EXPECT_GE(improved, 95u);
  EXPECT_GT(mean_final, mean_origin);
}

TEST(GenerateBag, OriginsWithoutReplacementThenWrap) {
  const Model m = ssfp::testing::small_mlp(4, 3, 3, 2, 1);
  std::vector<Tensor> pool;
  for (int i = 0; i < 5; ++i) pool.push_back(random_input({4}, i + 1, 0.1, 0.9));
  GenConfig cfg;
  cfg.itr_max = 3;
  const auto bag = generate_bag(m, ParamSelector::last_layer(m), pool, 12, cfg, 1);
  ASSERT_EQ(bag.size(), 12u);
  std::vector<std::size_t> first;
  for (int i = 0; i < 5; ++i) first.push_back(bag[i].origin_index);
  std::sort(first.begin(), first.end());
  EXPECT_EQ(first, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  for (const auto& s : bag) EXPECT_TRUE(bit_equal(s.v0, pool[s.origin_index]));

  const auto single = generate_bag(m, ParamSelector::last_layer(m), pool, 1, cfg, 1);
  EXPECT_EQ(single.size(), 1u);
  EXPECT_THROW(generate_bag(m, ParamSelector::last_layer(m), std::span<const Tensor>{}, 1, cfg), InvalidInput);
}

TEST(GenerateBag, ThreadCountDoesNotChangeResult) {
  const Model m = ssfp::testing::small_mlp(6, 5, 4, 3, 2);
  std::vector<Tensor> pool;
  for (int i = 0; i < 8; ++i) pool.push_back(random_input({6}, i + 10, 0.1, 0.9));
  GenConfig cfg;
  cfg.itr_max = 20;
  cfg.seed = 5;
  const auto a = generate_bag(m, ParamSelector::last_layer(m), pool, 8, cfg, 1);
  const auto b = generate_bag(m, ParamSelector::last_layer(m), pool, 8, cfg, 3);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(a[i].v, b[i].v));
}

TEST(BaselineNoise, IdentityDeterminismAndStd) {
  const Tensor v0 = random_input({100, 100}, 1, 0.3, 0.7);
  EXPECT_TRUE(bit_equal(baseline_noise(v0, 0.0, 1), v0));
  EXPECT_TRUE(bit_equal(baseline_noise(v0, 0.1, 4), baseline_noise(v0, 0.1, 4)));
  const auto out = baseline_noise(v0, 0.1, 4);
  double s = 0, ss = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v0.size(); ++i) {
    if (out[i] <= 0.0f || out[i] >= 1.0f) continue;
    const double d = static_cast<double>(out[i]) - v0[i];
    s += d;
    ss += d * d;
    ++n;
  }
  const double mean = s / static_cast<double>(n);
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n) - mean * mean), 0.1, 0.01);
  EXPECT_THROW(baseline_noise(v0, -1.0, 1), InvalidInput);
}

TEST(BaselineRotate, IdentityAndFullTurn) {
  const Tensor img = ramp(5, 5);
  EXPECT_TRUE(bit_equal(baseline_rotate(img, 0.0), img));
  EXPECT_TRUE(bit_equal(baseline_rotate(img, 360.0), img));
  EXPECT_THROW(baseline_rotate(Tensor({9}), 10.0), InvalidInput);
}

TEST(BaselineRotate, QuarterTurnIndexMap) {
  // 0 1 2        6 3 0
  // 3 4 5   ->   7 4 1
  // 6 7 8        8 5 2
  const auto out = baseline_rotate(ramp(3, 3), 90.0);
  const std::vector<float> want{6, 3, 0, 7, 4, 1, 8, 5, 2};
  EXPECT_EQ(out.data, want);

  Tensor chw({2, 3, 3});
  for (std::size_t i = 0; i < chw.size(); ++i) chw[i] = static_cast<float>(i % 9);
  const auto rc = baseline_rotate(chw, 90.0);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(rc[i], want[i]);
    EXPECT_EQ(rc[9 + i], want[i]);
  }
}

TEST(BaselineRotate, OutOfFrameTakesFill) {
  const auto out = baseline_rotate(ramp(7, 7), 45.0, -1.0f);
  EXPECT_EQ(out[0], -1.0f);
}

TEST(BaselineDistort, IdentityAndShiftTable) {
  const Tensor img = ramp(8, 8);
  EXPECT_TRUE(bit_equal(baseline_distort(img, 0.0, 8.0), img));
  const int shifts[8] = {0, 1, 2, 1, 0, -1, -2, -1};
  const auto out = baseline_distort(img, 2.0, 8.0);
  for (long y = 0; y < 8; ++y)
    for (long x = 0; x < 8; ++x) {
      const long src = ((x - shifts[y]) % 8 + 8) % 8;
      EXPECT_EQ(out[static_cast<std::size_t>(y * 8 + x)], img[static_cast<std::size_t>(y * 8 + src)]);
    }
}

TEST(BaselineDistort, RowsArePermutations) {
  const Tensor img = random_input({3, 9, 7}, 2);
  const auto out = baseline_distort(img, 1.7, 5.5, 3);
  for (std::size_t r = 0; r < 27; ++r) {
    std::vector<float> a(img.data.begin() + r * 7, img.data.begin() + r * 7 + 7);
    std::vector<float> b(out.data.begin() + r * 7, out.data.begin() + r * 7 + 7);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
  }
  EXPECT_THROW(baseline_distort(img, -1.0, 8.0), InvalidInput);
  EXPECT_THROW(baseline_distort(img, 1.0, 0.0), InvalidInput);
}

TEST(Snr, DecibelForm) {
  EXPECT_DOUBLE_EQ(snr_db(0.1), 20.0);
  EXPECT_TRUE(std::isinf(snr_db(0.0)));
}
