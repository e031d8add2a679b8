#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ssfp/error.hpp"

namespace ssfp {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major float32 tensor.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)), data(numel(shape), 0.0f) { check_shape(); }

  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    check_shape();
    if (numel(shape) != data.size()) {
      throw InvalidInput("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_string(shape));
    }
  }

  std::size_t size() const noexcept { return data.size(); }
  float& operator[](std::size_t i) noexcept { return data[i]; }
  float operator[](std::size_t i) const noexcept { return data[i]; }
  std::span<const float> span() const noexcept { return data; }
  std::span<float> span() noexcept { return data; }

  bool all_finite() const noexcept {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape)
      if (d == 0) throw InvalidInput("tensor dimensions must be positive");
  }
};

/// Byte-level equality (distinguishes -0.0f from 0.0f).
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         (a.data.empty() || std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
}

inline double l2_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

inline double l2_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

/// Labeled dataset: uniform input shapes, labels in [0, class_count).
struct LabeledSet {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const noexcept { return inputs.size(); }
  bool empty() const noexcept { return inputs.empty(); }

  void validate() const {
    if (inputs.size() != labels.size()) throw InvalidInput("inputs/labels length mismatch");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= class_count)
        throw InvalidInput("label " + std::to_string(labels[i]) + " out of range");
      if (inputs[i].shape != inputs.front().shape) throw InvalidInput("non-uniform input shapes");
    }
  }
};

}  // namespace ssfp
