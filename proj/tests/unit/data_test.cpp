#include <gtest/gtest.h>

#include <set>

#include "helpers.hpp"

using namespace ssfp;

namespace {

std::string be32(std::uint32_t v) {
  std::string s(4, '\0');
  for (int i = 0; i < 4; ++i) s[i] = static_cast<char>(v >> (24 - 8 * i) & 0xff);
  return s;
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, const std::string& pixels) {
  return be32(0x803) + be32(n) + be32(rows) + be32(cols) + pixels;
}

std::string idx_labels(const std::string& labels) {
  return be32(0x801) + be32(static_cast<std::uint32_t>(labels.size())) + labels;
}

}  // namespace

TEST(Idx, ParsesHandBuiltPair) {
  std::string px;
  for (int i = 0; i < 18; ++i) px.push_back(static_cast<char>(i * 15));
  const auto set = parse_idx(idx_images(2, 3, 3, px), idx_labels(std::string{'\x04', '\x01'}));
  ASSERT_EQ(set.size(), 2u);
  EXPECT_EQ(set.inputs[0].shape, (Shape{1, 3, 3}));
  EXPECT_EQ(set.labels, (std::vector<int>{4, 1}));
  EXPECT_EQ(set.class_count, 5);
  EXPECT_FLOAT_EQ(set.inputs[0][0], 0.0f);
  EXPECT_FLOAT_EQ(set.inputs[1][8], static_cast<float>(255 / 255.0));
  EXPECT_FLOAT_EQ(set.inputs[0][1], static_cast<float>(15 / 255.0));
}

TEST(Idx, RejectsMalformed) {
  const std::string px(9, '\0');
  const auto lab = idx_labels(std::string{'\0'});
  EXPECT_THROW(parse_idx(idx_images(1, 3, 3, px), idx_labels(std::string{'\0', '\0'})), ParseError);
  EXPECT_THROW(parse_idx(idx_images(1, 3, 3, px.substr(1)), lab), ParseError);
  EXPECT_THROW(parse_idx(idx_images(0, 3, 3, ""), idx_labels("")), ParseError);
  EXPECT_THROW(parse_idx(be32(0x801) + idx_images(1, 3, 3, px).substr(4), lab), ParseError);
  EXPECT_THROW(parse_idx("", lab), ParseError);
}

TEST(Split, StratifiedPartitionAndDeterministic) {
  const auto set = synth_blobs(4, 10, {8}, 0.1, 3);
  const auto [train, held] = split(set, 0.3, 9);
  EXPECT_EQ(train.size() + held.size(), set.size());
  std::vector<int> per_class(4, 0);
  for (int l : held.labels) ++per_class[static_cast<std::size_t>(l)];
  for (int c : per_class) EXPECT_EQ(c, 3);

  std::multiset<std::vector<float>> all, parts;
  for (const auto& x : set.inputs) all.insert(x.data);
  for (const auto& x : train.inputs) parts.insert(x.data);
  for (const auto& x : held.inputs) parts.insert(x.data);
  EXPECT_EQ(all, parts);

  const auto again = split(set, 0.3, 9);
  EXPECT_EQ(again.second.labels, held.labels);
  for (std::size_t i = 0; i < held.size(); ++i) EXPECT_TRUE(bit_equal(again.second.inputs[i], held.inputs[i]));
  EXPECT_THROW(split(set, 0.0, 1), InvalidInput);
  EXPECT_THROW(split(set, 1.0, 1), InvalidInput);
}

TEST(Synth, DeterministicAndInRange) {
  const auto a = synth_glyphs(5, 4, 8, 0.1, 7);
  const auto b = synth_glyphs(5, 4, 8, 0.1, 7);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(bit_equal(a.inputs[i], b.inputs[i]));
    EXPECT_EQ(a.inputs[i].shape, (Shape{1, 8, 8}));
    for (float v : a.inputs[i].data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
  EXPECT_FALSE(bit_equal(a.inputs[0], synth_glyphs(5, 4, 8, 0.1, 8).inputs[0]));
  EXPECT_THROW(synth_glyphs(1, 4, 8, 0.1, 7), InvalidInput);
  EXPECT_THROW(synth_blobs(3, 1, {2}, 0.1, 1), InvalidInput);
}

TEST(Synth, NoiselessBlobsAreSeparable) {
  const auto set = synth_blobs(3, 20, {6}, 0.0, 1);
  Model m({6}, {dense_layer(6, 3, Activation::Identity)}, 3);
  const auto trained = fine_tune(m, set, 40, 0.5, 2);
  EXPECT_EQ(accuracy(trained, set), 1.0);
}
