#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/rng.hpp"
#include "ssfp/tensor.hpp"

namespace ssfp {

enum class Activation { Identity, ReLU, Sigmoid };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Identity: break;
  }
  return "identity";
}

/// Fully connected layer: weights are out x in, row-major.
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<float> weights;
  std::vector<float> bias;
};

/// Stride-1 valid-padding convolution over CHW input.
/// Kernels are out_channels x in_channels x kernel_h x kernel_w.
struct Conv2D {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::vector<float> kernels;
  std::vector<float> bias;
};

struct Flatten {};

struct Layer {
  std::variant<Dense, Conv2D, Flatten> op;
  Activation activation = Activation::Identity;
};

inline Layer dense_layer(std::size_t in, std::size_t out, Activation act) {
  return Layer{Dense{in, out, std::vector<float>(in * out, 0.0f), std::vector<float>(out, 0.0f)}, act};
}

inline Layer conv2d_layer(std::size_t in_channels, std::size_t out_channels, std::size_t kernel_h,
                          std::size_t kernel_w, Activation act) {
  return Layer{Conv2D{in_channels, out_channels, kernel_h, kernel_w,
                      std::vector<float>(out_channels * in_channels * kernel_h * kernel_w, 0.0f),
                      std::vector<float>(out_channels, 0.0f)},
               act};
}

inline Layer flatten_layer() { return Layer{Flatten{}, Activation::Identity}; }

/// Feed-forward classifier. The final layer is a Dense/Identity layer producing
/// num_classes logits; softmax is applied implicitly. Value type: copies are
/// independent and every transform returns a new Model.
class Model {
 public:
  Model(Shape input_shape, std::vector<Layer> layers, std::size_t num_classes)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)), num_classes_(num_classes) {
    validate();
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::span<const Layer> layers() const noexcept { return layers_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  /// Shape flowing into layer i; index layers().size() is the logits shape.
  const Shape& shape_before(std::size_t i) const { return shapes_.at(i); }

  std::size_t final_index() const noexcept { return layers_.size() - 1; }
  const Dense& final_layer() const { return std::get<Dense>(layers_.back().op); }

  /// Width of the activation feeding the final Dense layer.
  std::size_t hidden_size() const noexcept { return final_layer().in; }

  /// Parameter tensors in canonical order: per layer, weights/kernels then bias.
  std::vector<std::span<const float>> parameter_tensors() const {
    std::vector<std::span<const float>> out;
    for (const auto& layer : layers_) {
      if (const auto* d = std::get_if<Dense>(&layer.op)) {
        out.emplace_back(d->weights);
        out.emplace_back(d->bias);
      } else if (const auto* c = std::get_if<Conv2D>(&layer.op)) {
        out.emplace_back(c->kernels);
        out.emplace_back(c->bias);
      }
    }
    return out;
  }

  /// Mutable view for building modified copies. Shapes cannot change.
  std::vector<std::span<float>> parameter_tensors() {
    std::vector<std::span<float>> out;
    for (auto& layer : layers_) {
      if (auto* d = std::get_if<Dense>(&layer.op)) {
        out.emplace_back(d->weights);
        out.emplace_back(d->bias);
      } else if (auto* c = std::get_if<Conv2D>(&layer.op)) {
        out.emplace_back(c->kernels);
        out.emplace_back(c->bias);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto t : parameter_tensors()) n += t.size();
    return n;
  }

  std::vector<Layer>& mutable_layers() noexcept { return layers_; }

 private:
  void validate() {
    if (input_shape_.empty()) throw InvalidInput("model input shape is empty");
    for (std::size_t d : input_shape_)
      if (d == 0) throw InvalidInput("model input dimensions must be positive");
    if (layers_.empty()) throw InvalidInput("model has no layers");
    if (num_classes_ < 1) throw InvalidInput("num_classes must be positive");

    shapes_.clear();
    shapes_.push_back(input_shape_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Shape& in = shapes_.back();
      const std::string where = "layer " + std::to_string(i) + ": ";
      const Layer& layer = layers_[i];
      if (const auto* d = std::get_if<Dense>(&layer.op)) {
        if (in.size() != 1 || in[0] != d->in)
          throw InvalidInput(where + "dense expects [" + std::to_string(d->in) + "], got " + shape_string(in));
        if (d->out == 0 || d->weights.size() != d->in * d->out || d->bias.size() != d->out)
          throw InvalidInput(where + "dense parameter sizes inconsistent");
        shapes_.push_back({d->out});
      } else if (const auto* c = std::get_if<Conv2D>(&layer.op)) {
        if (in.size() != 3 || in[0] != c->in_channels)
          throw InvalidInput(where + "conv2d expects CHW input with " + std::to_string(c->in_channels) +
                             " channels, got " + shape_string(in));
        if (c->kernel_h == 0 || c->kernel_w == 0 || in[1] < c->kernel_h || in[2] < c->kernel_w)
          throw InvalidInput(where + "conv2d kernel does not fit input " + shape_string(in));
        if (c->out_channels == 0 ||
            c->kernels.size() != c->out_channels * c->in_channels * c->kernel_h * c->kernel_w ||
            c->bias.size() != c->out_channels)
          throw InvalidInput(where + "conv2d parameter sizes inconsistent");
        shapes_.push_back({c->out_channels, in[1] - c->kernel_h + 1, in[2] - c->kernel_w + 1});
      } else {
        if (layer.activation != Activation::Identity)
          throw InvalidInput(where + "flatten takes no activation");
        shapes_.push_back({numel(in)});
      }
    }
    const auto* last = std::get_if<Dense>(&layers_.back().op);
    if (last == nullptr || layers_.back().activation != Activation::Identity)
      throw InvalidInput("final layer must be Dense with identity activation");
    if (last->out != num_classes_)
      throw InvalidInput("final layer width " + std::to_string(last->out) + " != num_classes " +
                         std::to_string(num_classes_));
  }

  Shape input_shape_;
  std::vector<Layer> layers_;
  std::size_t num_classes_;
  std::vector<Shape> shapes_;
};

/// He-style uniform initialization for ReLU layers, Glorot for the rest;
/// biases start at zero.
inline Model initialize(Model model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& layer : model.mutable_layers()) {
    auto fill = [&](std::vector<float>& w, std::size_t fan_in, std::size_t fan_out) {
      const double limit = layer.activation == Activation::ReLU
                               ? std::sqrt(6.0 / static_cast<double>(fan_in))
                               : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : w) v = static_cast<float>(rng.uniform(-limit, limit));
    };
    if (auto* d = std::get_if<Dense>(&layer.op)) {
      fill(d->weights, d->in, d->out);
    } else if (auto* c = std::get_if<Conv2D>(&layer.op)) {
      const std::size_t k = c->kernel_h * c->kernel_w;
      fill(c->kernels, c->in_channels * k, c->out_channels * k);
    }
  }
  return model;
}

namespace detail {

/// Per-layer record of a forward pass. acts[i] is the input of layer i and
/// acts[i + 1] its post-activation output; pre[i] is its pre-activation.
template <class T>
struct Trace {
  std::vector<std::vector<T>> acts;
  std::vector<std::vector<T>> pre;
};

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::ReLU: return z > 0.0 ? z : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-z));
    case Activation::Identity: break;
  }
  return z;
}

/// Products accumulate in double and are rounded to T once per output element.
template <class T>
std::vector<T> layer_forward(const Layer& layer, const Shape& in_shape, std::span<const T> in) {
  std::vector<T> out;
  if (const auto* d = std::get_if<Dense>(&layer.op)) {
    out.resize(d->out);
    for (std::size_t o = 0; o < d->out; ++o) {
      const float* w = d->weights.data() + o * d->in;
      double acc = 0.0;
      for (std::size_t i = 0; i < d->in; ++i) acc += static_cast<double>(w[i]) * static_cast<double>(in[i]);
      out[o] = static_cast<T>(acc + static_cast<double>(d->bias[o]));
    }
  } else if (const auto* c = std::get_if<Conv2D>(&layer.op)) {
    const std::size_t H = in_shape[1], W = in_shape[2];
    const std::size_t oh = H - c->kernel_h + 1, ow = W - c->kernel_w + 1;
    out.resize(c->out_channels * oh * ow);
    std::vector<double> acc(oh * ow);
    for (std::size_t o = 0; o < c->out_channels; ++o) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t ch = 0; ch < c->in_channels; ++ch) {
        const T* plane = in.data() + ch * H * W;
        for (std::size_t ky = 0; ky < c->kernel_h; ++ky) {
          for (std::size_t kx = 0; kx < c->kernel_w; ++kx) {
            const double k =
                c->kernels[((o * c->in_channels + ch) * c->kernel_h + ky) * c->kernel_w + kx];
            for (std::size_t y = 0; y < oh; ++y) {
              const T* row = plane + (y + ky) * W + kx;
              double* dst = acc.data() + y * ow;
              for (std::size_t x = 0; x < ow; ++x) dst[x] += k * static_cast<double>(row[x]);
            }
          }
        }
      }
      const double b = c->bias[o];
      for (std::size_t p = 0; p < oh * ow; ++p) out[o * oh * ow + p] = static_cast<T>(acc[p] + b);
    }
  } else {
    out.assign(in.begin(), in.end());
  }
  return out;
}

template <class T>
Trace<T> run(const Model& model, std::span<const T> x, std::size_t end_layer) {
  Trace<T> tr;
  tr.acts.reserve(end_layer + 1);
  tr.pre.reserve(end_layer);
  tr.acts.emplace_back(x.begin(), x.end());
  for (std::size_t i = 0; i < end_layer; ++i) {
    const Layer& layer = model.layers()[i];
    tr.pre.push_back(layer_forward<T>(layer, model.shape_before(i), tr.acts.back()));
    std::vector<T> a = tr.pre.back();
    if (layer.activation != Activation::Identity)
      for (auto& v : a) v = static_cast<T>(activate(layer.activation, static_cast<double>(v)));
    tr.acts.push_back(std::move(a));
  }
  return tr;
}

/// Numerically stable softmax (max subtraction), computed in double.
template <class T>
std::vector<double> softmax(std::span<const T> logits) {
  double mx = -INFINITY;
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

/// Gradient buffers mirroring Model::parameter_tensors() order.
struct ParamGrads {
  std::vector<std::vector<double>> tensors;

  explicit ParamGrads(const Model& m) {
    for (auto t : m.parameter_tensors()) tensors.emplace_back(t.size(), 0.0);
  }

  void zero() {
    for (auto& t : tensors) std::fill(t.begin(), t.end(), 0.0);
  }
};

/// Backpropagates `grad` (gradient w.r.t. the output of layer end_layer - 1)
/// down to the model input. When `grads` is non-null, parameter gradients of
/// layers [0, end_layer) are accumulated into it.
template <class T>
std::vector<double> backward(const Model& model, const Trace<T>& tr, std::size_t end_layer,
                             std::vector<double> grad, ParamGrads* grads) {
  // index of the first parameter tensor of each layer
  std::vector<std::size_t> first_param(model.layers().size() + 1, 0);
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const bool has_params = !std::holds_alternative<Flatten>(model.layers()[i].op);
    first_param[i + 1] = first_param[i] + (has_params ? 2 : 0);
  }

  for (std::size_t li = end_layer; li-- > 0;) {
    const Layer& layer = model.layers()[li];
    const auto& in = tr.acts[li];
    switch (layer.activation) {
      case Activation::ReLU:
        for (std::size_t j = 0; j < grad.size(); ++j)
          if (!(tr.pre[li][j] > T(0))) grad[j] = 0.0;
        break;
      case Activation::Sigmoid:
        for (std::size_t j = 0; j < grad.size(); ++j) {
          const double s = tr.acts[li + 1][j];
          grad[j] *= s * (1.0 - s);
        }
        break;
      case Activation::Identity: break;
    }

    if (const auto* d = std::get_if<Dense>(&layer.op)) {
      std::vector<double> gin(d->in, 0.0);
      for (std::size_t o = 0; o < d->out; ++o) {
        const double g = grad[o];
        if (g == 0.0) continue;
        const float* w = d->weights.data() + o * d->in;
        for (std::size_t i = 0; i < d->in; ++i) gin[i] += static_cast<double>(w[i]) * g;
      }
      if (grads) {
        auto& gw = grads->tensors[first_param[li]];
        auto& gb = grads->tensors[first_param[li] + 1];
        for (std::size_t o = 0; o < d->out; ++o) {
          const double g = grad[o];
          gb[o] += g;
          if (g == 0.0) continue;
          double* row = gw.data() + o * d->in;
          for (std::size_t i = 0; i < d->in; ++i) row[i] += g * static_cast<double>(in[i]);
        }
      }
      grad = std::move(gin);
    } else if (const auto* c = std::get_if<Conv2D>(&layer.op)) {
      const Shape& s = model.shape_before(li);
      const std::size_t H = s[1], W = s[2];
      const std::size_t oh = H - c->kernel_h + 1, ow = W - c->kernel_w + 1;
      std::vector<double> gin(c->in_channels * H * W, 0.0);
      for (std::size_t o = 0; o < c->out_channels; ++o) {
        const double* go = grad.data() + o * oh * ow;
        for (std::size_t ch = 0; ch < c->in_channels; ++ch) {
          for (std::size_t ky = 0; ky < c->kernel_h; ++ky) {
            for (std::size_t kx = 0; kx < c->kernel_w; ++kx) {
              const std::size_t kidx = ((o * c->in_channels + ch) * c->kernel_h + ky) * c->kernel_w + kx;
              const double k = c->kernels[kidx];
              double kgrad = 0.0;
              for (std::size_t y = 0; y < oh; ++y) {
                double* dst = gin.data() + ch * H * W + (y + ky) * W + kx;
                const T* src = in.data() + ch * H * W + (y + ky) * W + kx;
                const double* g = go + y * ow;
                for (std::size_t x = 0; x < ow; ++x) {
                  dst[x] += k * g[x];
                  kgrad += g[x] * static_cast<double>(src[x]);
                }
              }
              if (grads) grads->tensors[first_param[li]][kidx] += kgrad;
            }
          }
        }
        if (grads) {
          double gb = 0.0;
          for (std::size_t p = 0; p < oh * ow; ++p) gb += go[p];
          grads->tensors[first_param[li] + 1][o] += gb;
        }
      }
      grad = std::move(gin);
    }
    // Flatten: layout is unchanged, gradient passes through.
  }
  return grad;
}

inline void check_input(const Model& model, const Tensor& x) {
  if (x.shape != model.input_shape())
    throw InvalidInput("input shape " + shape_string(x.shape) + " does not match model input " +
                       shape_string(model.input_shape()));
  if (!x.all_finite()) throw InvalidInput("input contains non-finite values");
}

}  // namespace detail

struct ForwardResult {
  std::vector<float> probs;
  /// Activation feeding the final Dense layer.
  Tensor hidden;
};

/// Float32 inference. Bit-deterministic for a given (model, input).
inline ForwardResult forward(const Model& model, const Tensor& x) {
  detail::check_input(model, x);
  const auto tr = detail::run<float>(model, x.span(), model.layers().size());
  const auto p = detail::softmax<float>(tr.acts.back());
  ForwardResult r;
  r.probs.assign(p.begin(), p.end());
  const auto& h = tr.acts[model.final_index()];
  r.hidden = Tensor(model.shape_before(model.final_index()), std::vector<float>(h.begin(), h.end()));
  return r;
}

inline std::vector<float> predict_probs(const Model& model, const Tensor& x) { return forward(model, x).probs; }

inline int predict_label(const Model& model, const Tensor& x) {
  const auto p = predict_probs(model, x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Gradient w.r.t. x of the scalar whose gradient w.r.t. the last hidden
/// activation is `grad_hidden`, through every layer before the final Dense.
inline Tensor backprop_to_input(const Model& model, const Tensor& x, const Tensor& grad_hidden) {
  detail::check_input(model, x);
  if (grad_hidden.shape != model.shape_before(model.final_index()))
    throw InvalidInput("grad_hidden shape " + shape_string(grad_hidden.shape) + " does not match hidden shape " +
                       shape_string(model.shape_before(model.final_index())));
  const auto tr = detail::run<double>(model, std::vector<double>(x.data.begin(), x.data.end()),
                                      model.final_index());
  auto g = detail::backward<double>(model, tr, model.final_index(),
                                    std::vector<double>(grad_hidden.data.begin(), grad_hidden.data.end()), nullptr);
  Tensor out(model.input_shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<float>(g[i]);
  return out;
}

inline double accuracy(const Model& model, const LabeledSet& set) {
  if (set.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (predict_label(model, set.inputs[i]) == set.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

/// Mini-batch SGD on softmax cross-entropy. Batch order per epoch is a
/// Fisher-Yates permutation seeded with mix_seed(seed, epoch). Returns a new
/// model; the argument is untouched.
inline Model fine_tune(const Model& model, const LabeledSet& dataset, int epochs, double lr, std::uint64_t seed,
                       std::size_t batch_size = 16) {
  if (dataset.empty()) throw InvalidInput("fine_tune: empty dataset");
  dataset.validate();
  if (static_cast<std::size_t>(dataset.class_count) > model.num_classes())
    throw InvalidInput("fine_tune: dataset has more classes than the model");
  for (const auto& x : dataset.inputs) detail::check_input(model, x);
  if (batch_size == 0) throw InvalidInput("fine_tune: batch_size must be positive");

  Model out = model;
  detail::ParamGrads grads(out);
  const std::size_t n = dataset.size();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch)));
    const auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      grads.zero();
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const auto tr = detail::run<float>(out, dataset.inputs[idx].span(), out.layers().size());
        auto g = detail::softmax<float>(tr.acts.back());
        g[static_cast<std::size_t>(dataset.labels[idx])] -= 1.0;
        detail::backward<float>(out, tr, out.layers().size(), std::move(g), &grads);
      }
      const double scale = lr / static_cast<double>(end - start);
      auto params = out.parameter_tensors();
      for (std::size_t t = 0; t < params.size(); ++t)
        for (std::size_t j = 0; j < params[t].size(); ++j)
          params[t][j] = static_cast<float>(static_cast<double>(params[t][j]) - scale * grads.tensors[t][j]);
    }
  }
  return out;
}

}  // namespace ssfp
