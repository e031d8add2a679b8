#pragma once

#include <filesystem>
#include <unistd.h>
#include <map>
#include <string>

#include "ssfp/ssfp.hpp"

namespace ssfp::testing {

inline Tensor random_input(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor x(shape);
  for (auto& v : x.data) v = static_cast<float>(rng.uniform(lo, hi));
  return x;
}

/// Flatten -> Dense(ReLU) -> Dense(ReLU) -> Dense over a {side} input.
inline Model small_mlp(std::size_t in, std::size_t h1, std::size_t h2, std::size_t classes, std::uint64_t seed,
                       Activation act = Activation::ReLU) {
  return initialize(Model({in},
                          {dense_layer(in, h1, act), dense_layer(h1, h2, act),
                           dense_layer(h2, classes, Activation::Identity)},
                          classes),
                    seed);
}

/// Two 3x3 convolutions over {C,H,W}, flatten, final Dense.
inline Model small_cnn(std::size_t c, std::size_t h, std::size_t w, std::size_t classes, std::uint64_t seed,
                       Activation act = Activation::ReLU) {
  const std::size_t flat = 3 * (h - 4) * (w - 4);
  return initialize(Model({c, h, w},
                          {conv2d_layer(c, 2, 3, 3, act), conv2d_layer(2, 3, 3, 3, act), flatten_layer(),
                           dense_layer(flat, classes, Activation::Identity)},
                          classes),
                    seed);
}

inline std::filesystem::path desk_manifest_path() {
  return std::filesystem::path(SSFP_SOURCE_DIR) / "manifests" / "desk.ini";
}

/// Desk fixtures are trained once per test binary.
inline const Fixture& desk_fixture(const std::string& name) {
  static std::map<std::string, Fixture> cache;
  auto it = cache.find(name);
  if (it == cache.end()) {
    const auto m = load_manifest(desk_manifest_path());
    it = cache.emplace(name, build_fixture(find_fixture(m, name))).first;
  }
  return it->second;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("ssfp-test-" + tag + "-" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ssfp::testing
