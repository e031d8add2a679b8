#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace ssfp;
using ssfp::testing::random_input;

namespace {

std::vector<Tensor> inputs_for(const Model& m, std::size_t n, std::uint64_t seed) {
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_input(m.input_shape(), seed + i));
  return xs;
}

}  // namespace

TEST(OutputSpec, ParseAndPrint) {
  for (const char* s : {"top1", "top3", "top2-p4", "p2", "p0"}) EXPECT_EQ(OutputSpec::parse(s).to_string(), s);
  EXPECT_EQ(OutputSpec::parse("top3"), OutputSpec::top_k(3));
  EXPECT_EQ(OutputSpec::parse("top1-p2"), OutputSpec::top_k_prob(1, 2));
  for (const char* bad : {"top0", "top", "p", "p10", "x3", "top2-p", "top-1", "top1p2"})
    EXPECT_THROW(OutputSpec::parse(bad), InvalidSpec) << bad;
  EXPECT_THROW(OutputSpec::top_k(4).validate(3), InvalidSpec);
}

TEST(ApplyOutputSpec, Examples) {
  const std::vector<float> a{0.7f, 0.2f, 0.1f};
  EXPECT_EQ(apply_output_spec(a, OutputSpec::top_k(1)).labels, (std::vector<int>{0}));
  const std::vector<float> b{0.2f, 0.5f, 0.3f};
  EXPECT_EQ(apply_output_spec(b, OutputSpec::top_k(2)).labels, (std::vector<int>{1, 2}));
  const std::vector<float> c{0.614f, 0.386f};
  const auto o = apply_output_spec(c, OutputSpec::all_probs(1));
  EXPECT_EQ(o.probs, (std::vector<std::int64_t>{6, 4}));
  EXPECT_TRUE(o.labels.empty());
  EXPECT_TRUE(apply_output_spec(a, OutputSpec::top_k(3)).probs.empty());
}

TEST(ApplyOutputSpec, TiesGoToLowerClass) {
  const std::vector<float> p{0.25f, 0.375f, 0.375f};
  EXPECT_EQ(apply_output_spec(p, OutputSpec::top_k(2)).labels, (std::vector<int>{1, 2}));
}

TEST(ApplyOutputSpec, RoundsHalfAwayFromZero) {
  const std::vector<float> p{0.125f, 0.375f, 0.5f};  // exact binary fractions
  const auto o = apply_output_spec(p, OutputSpec::all_probs(2));
  EXPECT_EQ(o.probs, (std::vector<std::int64_t>{13, 38, 50}));
  const auto t = apply_output_spec(p, OutputSpec::top_k_prob(2, 1));
  EXPECT_EQ(t.labels, (std::vector<int>{2, 1}));
  EXPECT_EQ(t.probs, (std::vector<std::int64_t>{5, 4}));
}

TEST(FixedPoint, RoundTrip) {
  EXPECT_EQ(fixed_to_string(61, 2), "0.61");
  EXPECT_EQ(fixed_to_string(5, 3), "0.005");
  EXPECT_EQ(fixed_to_string(1, 0), "1");
  EXPECT_EQ(fixed_to_string(100, 2), "1.00");
  for (int d = 0; d <= 6; ++d)
    for (std::int64_t v : {0LL, 1LL, 7LL, 99LL, 1000000LL})
      if (v <= pow10(d)) {
        EXPECT_EQ(fixed_from_string(fixed_to_string(v, d), d), v);
      }
  for (const char* bad : {"0.6", ".61", "0.611", "-0.61", "0.+1", "", "1."})
    EXPECT_THROW(fixed_from_string(bad, 2), ParseError) << bad;
}

TEST(ObservedText, RoundTrip) {
  const auto spec = OutputSpec::top_k_prob(2, 3);
  const std::vector<float> p{0.1f, 0.6f, 0.3f};
  const auto o = apply_output_spec(p, spec);
  EXPECT_EQ(to_text(o), "labels:1,2 probs:0.600,0.300");
  EXPECT_EQ(observed_from_text(to_text(o), spec), o);
  EXPECT_THROW(observed_from_text("labels:1", spec), ParseError);
  EXPECT_THROW(observed_from_text("labels:1,2,0 probs:0.600,0.300", spec), ParseError);
}

TEST(BuildFingerprint, ExpectedOutputsByConstruction) {
  const Model m = ssfp::testing::small_mlp(5, 4, 4, 3, 7);
  const auto xs = inputs_for(m, 4, 10);
  const auto spec = OutputSpec::top_k(1);
  const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), spec);
  ASSERT_EQ(fp.entries.size(), 4u);
  EXPECT_EQ(fp.reference_digest, digest(m));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    EXPECT_EQ(fp.entries[i].expected, apply_output_spec(predict_probs(m, xs[i]), spec));
    EXPECT_TRUE(fp.entries[i].expected.probs.empty());
  }
  EXPECT_EQ(serialize_fingerprint(fp), serialize_fingerprint(build_fingerprint(m, std::span<const Tensor>(xs), spec)));
  EXPECT_THROW(build_fingerprint(m, std::span<const Tensor>{}, spec), InvalidInput);
  const auto many = inputs_for(m, 11, 50);
  EXPECT_THROW(build_fingerprint(m, std::span<const Tensor>(many), spec), InvalidInput);
  EXPECT_THROW(build_fingerprint(m, std::span<const Tensor>(xs), OutputSpec::top_k(4)), InvalidSpec);
}

TEST(Verify, ReferenceModelNeverDetects) {
  Rng rng(77);
  const char* specs[] = {"top1", "top2", "top3", "top1-p2", "top2-p4", "p1", "p3"};
  for (int t = 0; t < 300; ++t) {
    const Model m = t % 2 ? ssfp::testing::small_mlp(6, 5, 4, 4, t) : ssfp::testing::small_cnn(1, 6, 6, 4, t);
    const auto xs = inputs_for(m, 1 + rng.below(10), static_cast<std::uint64_t>(t) * 31);
    const auto spec = OutputSpec::parse(specs[rng.below(7)]);
    const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), spec);
    const auto r = verify(fp, local_oracle(m, spec));
    EXPECT_FALSE(r.detected);
    EXPECT_EQ(r.queries_used, xs.size());
    for (const auto& c : r.per_sample) EXPECT_TRUE(c.match);
  }
}

TEST(Verify, ConstantWrongLabelDetected) {
  const Model m = ssfp::testing::small_mlp(5, 4, 4, 3, 7);
  const auto xs = inputs_for(m, 5, 10);
  const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), OutputSpec::top_k(1));
  const int wrong = (fp.entries[0].expected.labels[0] + 1) % 3;
  const Oracle constant = [&](const Tensor&) { return ObservedOutput{{wrong}, {}, 0}; };
  const auto r = verify(fp, constant);
  EXPECT_TRUE(r.detected);
  EXPECT_FALSE(r.per_sample[0].match);
  EXPECT_TRUE(r.detected_within(1));
  const auto early = verify(fp, constant, {true});
  EXPECT_EQ(early.queries_used, 1u);
}

TEST(Verify, ShapeMismatchIsFlagged) {
  const Model m = ssfp::testing::small_mlp(5, 4, 4, 3, 7);
  const auto xs = inputs_for(m, 2, 10);
  const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), OutputSpec::top_k(2));
  const auto r = verify(fp, [](const Tensor&) { return ObservedOutput{{0}, {}, 0}; });
  EXPECT_TRUE(r.detected);
  EXPECT_TRUE(r.per_sample[0].shape_mismatch);
}

TEST(Verify, OracleFailureAbortsWithoutVerdict) {
  const Model m = ssfp::testing::small_mlp(5, 4, 4, 3, 7);
  const auto xs = inputs_for(m, 3, 10);
  const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), OutputSpec::top_k(1));
  int calls = 0;
  const Oracle flaky = [&](const Tensor& x) {
    if (++calls == 2) throw TransportError("connection reset");
    return apply_output_spec(predict_probs(m, x), fp.spec);
  };
  try {
    verify(fp, flaky);
    FAIL();
  } catch (const VerificationAborted& e) {
    EXPECT_FALSE(e.partial().detected);
    EXPECT_EQ(e.partial().per_sample.size(), 1u);
  }
}

TEST(Verify, HeavyWeightNoiseAlwaysDetected) {
  const auto& fx = ssfp::testing::desk_fixture("mlp");
  const auto sel = ParamSelector::last_layer(fx.model);
  GenConfig cfg;
  cfg.seed = 3;
  const auto bag = generate_bag(fx.model, sel, std::span<const Tensor>(fx.held_out.inputs), 10, cfg, 1);
  const auto fp = build_fingerprint(fx.model, std::span<const SensitiveSample>(bag), OutputSpec::top_k(1));
  std::size_t detected = 0;
  for (std::uint64_t t = 0; t < 1000; ++t) {
    const auto tampered = weight_noise(fx.model, 1.0, 1.0, mix_seed(99, t)).tampered;
    detected += verify(fp, local_oracle(tampered, fp.spec)).detected;
  }
  EXPECT_EQ(detected, 1000u);
}

TEST(FingerprintFile, RoundTripAndErrors) {
  const Model m = ssfp::testing::small_cnn(1, 6, 6, 3, 2);
  const auto xs = inputs_for(m, 3, 4);
  const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), OutputSpec::top_k_prob(2, 3),
                                    {{"selection", "manc"}, {"note", "two words"}});
  const auto bytes = serialize_fingerprint(fp);
  const auto back = parse_fingerprint(bytes);
  EXPECT_EQ(serialize_fingerprint(back), bytes);
  EXPECT_EQ(back.manifest.at("note"), "two words");
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_TRUE(bit_equal(back.entries[i].input, xs[i]));

  EXPECT_THROW(parse_fingerprint(bytes.substr(0, bytes.size() / 2)), ParseError);
  EXPECT_THROW(parse_fingerprint(""), ParseError);
  auto v2 = bytes;
  v2.replace(0, 18, "ssfp-fingerprint 2");
  try {
    parse_fingerprint(v2);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }

  const auto dir = ssfp::testing::temp_dir("fp");
  save_fingerprint(fp, dir / "f");
  EXPECT_EQ(serialize_fingerprint(load_fingerprint(dir / "f")), bytes);
  std::filesystem::remove_all(dir);
}
