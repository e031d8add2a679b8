#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/nn.hpp"

namespace ssfp {

/// Parameters-of-interest: the final Dense layer, optionally with its bias.
struct ParamSelector {
  std::size_t layer_index = 0;
  bool include_bias = true;

  static ParamSelector last_layer(const Model& model, bool include_bias = true) {
    return ParamSelector{model.final_index(), include_bias};
  }

  void check(const Model& model) const {
    if (layer_index != model.final_index())
      throw InvalidInput("sensitivity is only defined for the final Dense layer (index " +
                         std::to_string(model.final_index()) + "), got " + std::to_string(layer_index));
  }

  std::size_t count(const Model& model) const {
    const Dense& d = model.final_layer();
    return d.in * d.out + (include_bias ? d.out : 0);
  }
};

struct SensitivityValue {
  double s = 0.0;
  Tensor grad_x;
};

/// r x r row-major matrix.
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<double> v;

  double operator()(std::size_t i, std::size_t j) const { return v[i * n + j]; }
};

/// Jacobian of softmax w.r.t. its logits: J[i][j] = p_i (delta_ij - p_j).
inline SquareMatrix softmax_jacobian(std::span<const double> probs) {
  SquareMatrix J{probs.size(), std::vector<double>(probs.size() * probs.size())};
  for (std::size_t i = 0; i < J.n; ++i)
    for (std::size_t j = 0; j < J.n; ++j) J.v[i * J.n + j] = probs[i] * ((i == j ? 1.0 : 0.0) - probs[j]);
  return J;
}

inline SquareMatrix softmax_jacobian(std::span<const float> probs) {
  std::vector<double> p(probs.begin(), probs.end());
  return softmax_jacobian(std::span<const double>(p));
}

namespace detail {

// ||J||_F^2 as a polynomial in p: with q = sum p^2 and c = sum p^3,
// sum_ik (p_i d_ik - p_i p_k)^2 = q + q^2 - 2c.
inline double jacobian_frobenius_sq(std::span<const double> p) {
  double q = 0.0, c = 0.0;
  for (double v : p) {
    q += v * v;
    c += v * v * v;
  }
  return q + q * q - 2.0 * c;
}

inline std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// S = ||d softmax / d W_last||_F^2 = ||J||_F^2 * (||h||^2 + [bias]), computed in
/// double. Only the value; no gradient.
inline double sensitivity_value(const Model& model, const Tensor& x, const ParamSelector& sel) {
  sel.check(model);
  detail::check_input(model, x);
  const auto tr = detail::run<double>(model, detail::to_double(x.span()), model.layers().size());
  const auto p = detail::softmax<double>(tr.acts.back());
  double hh = sel.include_bias ? 1.0 : 0.0;
  for (double v : tr.acts[model.final_index()]) hh += v * v;
  return detail::jacobian_frobenius_sq(p) * hh;
}

/// Closed-form sensitivity and its input gradient.
///
/// With g(p) = ||J||_F^2 and H = ||h||^2 + [bias], S = g * H and
///   dS/dh = 2 g h + H * W^T J grad_p(g),   grad_p(g)_i = 2 p_i + 4 q p_i - 6 p_i^2,
/// which is then carried to the input through the feature extractor.
inline SensitivityValue sensitivity(const Model& model, const Tensor& x, const ParamSelector& sel) {
  sel.check(model);
  detail::check_input(model, x);
  const std::size_t fin = model.final_index();
  const auto tr = detail::run<double>(model, detail::to_double(x.span()), model.layers().size());
  const auto p = detail::softmax<double>(tr.acts.back());
  const auto& h = tr.acts[fin];
  const Dense& last = model.final_layer();

  double H = sel.include_bias ? 1.0 : 0.0;
  for (double v : h) H += v * v;
  double q = 0.0;
  for (double v : p) q += v * v;
  const double g = detail::jacobian_frobenius_sq(p);

  // u = J * grad_p(g); J is symmetric so J u = p .* u - p (p . u).
  std::vector<double> dg(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) dg[i] = 2.0 * p[i] + 4.0 * q * p[i] - 6.0 * p[i] * p[i];
  double pdg = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) pdg += p[i] * dg[i];
  std::vector<double> u(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) u[i] = p[i] * dg[i] - p[i] * pdg;

  std::vector<double> grad_h(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) grad_h[j] = 2.0 * g * h[j];
  for (std::size_t o = 0; o < last.out; ++o) {
    const double uo = H * u[o];
    const float* w = last.weights.data() + o * last.in;
    for (std::size_t j = 0; j < last.in; ++j) grad_h[j] += static_cast<double>(w[j]) * uo;
  }

  const auto gx = detail::backward<double>(model, tr, fin, std::move(grad_h), nullptr);
  SensitivityValue out{g * H, Tensor(model.input_shape())};
  for (std::size_t i = 0; i < gx.size(); ++i) out.grad_x[i] = static_cast<float>(gx[i]);
  return out;
}

/// Brute-force S: central differences of the softmax output w.r.t. every
/// selected parameter, squared and summed. Runs in double. When `per_param`
/// is given it receives each parameter's contribution (weights row-major,
/// then bias).
inline double fd_sensitivity(const Model& model, const Tensor& x, const ParamSelector& sel, double step = 1e-3,
                             std::vector<double>* per_param = nullptr) {
  sel.check(model);
  detail::check_input(model, x);
  if (!(step > 0.0)) throw InvalidInput("fd_sensitivity: step must be positive");
  const std::size_t fin = model.final_index();
  const auto tr = detail::run<double>(model, detail::to_double(x.span()), fin);
  const auto& h = tr.acts.back();
  const Dense& last = model.final_layer();

  std::vector<double> W(last.weights.begin(), last.weights.end());
  std::vector<double> b(last.bias.begin(), last.bias.end());
  auto probs = [&] {
    std::vector<double> z(last.out);
    for (std::size_t o = 0; o < last.out; ++o) {
      double acc = b[o];
      for (std::size_t j = 0; j < last.in; ++j) acc += W[o * last.in + j] * h[j];
      z[o] = acc;
    }
    return detail::softmax<double>(z);
  };
  auto term = [&](double& param) {
    const double saved = param;
    param = saved + step;
    const auto plus = probs();
    param = saved - step;
    const auto minus = probs();
    param = saved;
    double acc = 0.0;
    for (std::size_t i = 0; i < plus.size(); ++i) {
      const double d = (plus[i] - minus[i]) / (2.0 * step);
      acc += d * d;
    }
    return acc;
  };

  if (per_param) per_param->clear();
  double total = 0.0;
  for (auto& w : W) {
    const double t = term(w);
    total += t;
    if (per_param) per_param->push_back(t);
  }
  if (sel.include_bias) {
    for (auto& v : b) {
      const double t = term(v);
      total += t;
      if (per_param) per_param->push_back(t);
    }
  }
  return total;
}

/// Central-difference estimate of grad_x S, one input element at a time.
inline Tensor fd_grad_x(const Model& model, const Tensor& x, const ParamSelector& sel, double step = 1e-3) {
  sel.check(model);
  detail::check_input(model, x);
  if (!(step > 0.0)) throw InvalidInput("fd_grad_x: step must be positive");
  const std::size_t fin = model.final_index();
  std::vector<double> xd = detail::to_double(x.span());
  auto s_at = [&] {
    const auto tr = detail::run<double>(model, xd, model.layers().size());
    const auto p = detail::softmax<double>(tr.acts.back());
    double H = sel.include_bias ? 1.0 : 0.0;
    for (double v : tr.acts[fin]) H += v * v;
    return detail::jacobian_frobenius_sq(p) * H;
  };
  Tensor out(model.input_shape());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double saved = xd[i];
    xd[i] = saved + step;
    const double sp = s_at();
    xd[i] = saved - step;
    const double sm = s_at();
    xd[i] = saved;
    out[i] = static_cast<float>((sp - sm) / (2.0 * step));
  }
  return out;
}

}  // namespace ssfp
