#pragma once

// Deterministic numerical substrate: dense/masked affine layers, clamped
// sigmoid, Bernoulli log-likelihood and entropy, a feed-forward stack with
// exact reverse-mode gradients, and the Adam update rule.
//
// Everything is a pure function of (parameters, input); the Tape caches the
// activations of one forward pass so backward() can replay it exactly.
// Real = double in all test/oracle paths; float instantiations are available
// for training-speed configurations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dnflow/common.hpp"
#include "dnflow/rng.hpp"

namespace dnflow {

template <class Real>
struct RealMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<Real> data;  // row-major

  RealMatrix() = default;
  RealMatrix(int r, int c, Real fill = Real(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  Real& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  Real at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
  std::size_t size() const { return data.size(); }
};

template <class Real>
struct MaskedAffine {
  RealMatrix<Real> weights;  // out x in
  std::vector<Real> bias;    // out
  RealMatrix<Real> mask;     // same shape as weights, entries in {0,1}; empty = dense

  int in_dim() const { return weights.cols; }
  int out_dim() const { return weights.rows; }
  bool masked() const { return mask.rows > 0; }
  std::size_t param_count() const { return weights.size() + bias.size(); }
};

template <class Real>
std::vector<Real> masked_affine_forward(const MaskedAffine<Real>& layer,
                                        std::span<const Real> input) {
  require(static_cast<int>(input.size()) == layer.in_dim(),
          "masked_affine_forward: input length " +
              std::to_string(input.size()) + " != cols " +
              std::to_string(layer.in_dim()));
  const int out = layer.out_dim(), in = layer.in_dim();
  std::vector<Real> y(layer.bias.begin(), layer.bias.end());
  const Real* w = layer.weights.data.data();
  if (layer.masked()) {
    const Real* m = layer.mask.data.data();
    for (int i = 0; i < out; ++i) {
      Real acc = 0;
      const Real* wr = w + static_cast<std::size_t>(i) * in;
      const Real* mr = m + static_cast<std::size_t>(i) * in;
      for (int j = 0; j < in; ++j) acc += wr[j] * mr[j] * input[j];
      y[i] += acc;
    }
  } else {
    for (int i = 0; i < out; ++i) {
      Real acc = 0;
      const Real* wr = w + static_cast<std::size_t>(i) * in;
      for (int j = 0; j < in; ++j) acc += wr[j] * input[j];
      y[i] += acc;
    }
  }
  return y;
}

// sigmoid with the probability clamp applied; safe to feed into logs.
template <class Real>
Real sigmoid_scalar(Real z) {
  Real s = z >= Real(0) ? Real(1) / (Real(1) + std::exp(-z))
                        : Real(1) - Real(1) / (Real(1) + std::exp(z));
  const Real lo = Real(kProbEps), hi = Real(1) - Real(kProbEps);
  return std::clamp(s, lo, hi);
}

template <class Real>
std::vector<Real> sigmoid(std::span<const Real> z) {
  std::vector<Real> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = sigmoid_scalar(z[i]);
  return out;
}

// d sigmoid / dz at the clamped output; zero in the clamped region so
// analytic gradients agree with finite differences of the clamped forward.
template <class Real>
Real sigmoid_grad(Real clamped_out) {
  const Real lo = Real(kProbEps), hi = Real(1) - Real(kProbEps);
  if (clamped_out <= lo || clamped_out >= hi) return Real(0);
  return clamped_out * (Real(1) - clamped_out);
}

inline double bernoulli_log_prob(double p, int bit) {
  require(p >= kProbEps && p <= 1.0 - kProbEps,
          "bernoulli_log_prob: p outside clamp range");
  require(bit == 0 || bit == 1, "bernoulli_log_prob: bit not in {0,1}");
  return bit ? std::log(p) : std::log1p(-p);
}

inline double bernoulli_log_prob_grad(double p, int bit) {
  return bit ? 1.0 / p : -1.0 / (1.0 - p);
}

inline double bernoulli_entropy(double p) {
  return -p * std::log(p) - (1.0 - p) * std::log1p(-p);
}

// dH/dp = log((1-p)/p)
inline double bernoulli_entropy_grad(double p) {
  return std::log1p(-p) - std::log(p);
}

enum class Activation { Identity, Relu, SigmoidClamped };

// Feed-forward stack of (masked) affine layers with elementwise activations.
// Parameters are owned by the layers; the canonical flat order is
// layer0.weights (row-major), layer0.bias, layer1.weights, ...
template <class Real>
class Mlp {
 public:
  struct Layer {
    MaskedAffine<Real> affine;
    Activation act = Activation::Identity;
  };

  struct Tape {
    std::vector<Real> input;
    std::vector<std::vector<Real>> pre;   // z per layer
    std::vector<std::vector<Real>> post;  // activation(z) per layer
    const std::vector<Real>& output() const { return post.back(); }
  };

  Mlp() = default;

  void add_layer(MaskedAffine<Real> affine, Activation act) {
    layers_.push_back(Layer{std::move(affine), act});
  }

  int in_dim() const { return layers_.front().affine.in_dim(); }
  int out_dim() const { return layers_.back().affine.out_dim(); }
  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_[i]; }
  Layer& layer(std::size_t i) { return layers_[i]; }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.affine.param_count();
    return n;
  }

  Tape forward(std::span<const Real> input) const {
    Tape t;
    t.input.assign(input.begin(), input.end());
    std::span<const Real> cur = input;
    for (const auto& l : layers_) {
      std::vector<Real> z = masked_affine_forward(l.affine, cur);
      std::vector<Real> a;
      switch (l.act) {
        case Activation::Identity:
          a = z;
          break;
        case Activation::Relu:
          a.resize(z.size());
          for (std::size_t i = 0; i < z.size(); ++i)
            a[i] = z[i] > Real(0) ? z[i] : Real(0);
          break;
        case Activation::SigmoidClamped:
          a = sigmoid<Real>(z);
          break;
      }
      t.pre.push_back(std::move(z));
      t.post.push_back(std::move(a));
      cur = t.post.back();
    }
    return t;
  }

  std::vector<Real> apply(std::span<const Real> input) const {
    return forward(input).output();
  }

  // Exact reverse-mode gradients of <cotangent, output> w.r.t. parameters
  // (accumulated into grad_flat, canonical order) and optionally the input.
  void backward(const Tape& tape, std::span<const Real> cotangent,
                std::span<Real> grad_flat,
                std::span<Real> grad_input = {}) const {
    require(tape.post.size() == layers_.size(),
            "backward: tape does not match network");
    require(cotangent.size() == tape.output().size(),
            "backward: cotangent length mismatch");
    require(grad_flat.size() == param_count(),
            "backward: grad buffer length mismatch");
    std::vector<Real> cot(cotangent.begin(), cotangent.end());
    std::size_t flat_end = param_count();
    for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
      const Layer& l = layers_[static_cast<std::size_t>(li)];
      const auto& z = tape.pre[static_cast<std::size_t>(li)];
      const auto& a = tape.post[static_cast<std::size_t>(li)];
      const std::vector<Real>& in =
          li == 0 ? tape.input : tape.post[static_cast<std::size_t>(li) - 1];
      // through the activation
      std::vector<Real> dz(cot.size());
      switch (l.act) {
        case Activation::Identity:
          dz = cot;
          break;
        case Activation::Relu:
          for (std::size_t i = 0; i < cot.size(); ++i)
            dz[i] = z[i] > Real(0) ? cot[i] : Real(0);
          break;
        case Activation::SigmoidClamped:
          for (std::size_t i = 0; i < cot.size(); ++i)
            dz[i] = cot[i] * sigmoid_grad(a[i]);
          break;
      }
      // through the affine
      const int out = l.affine.out_dim(), ind = l.affine.in_dim();
      flat_end -= l.affine.param_count();
      Real* gw = grad_flat.data() + flat_end;
      Real* gb = gw + l.affine.weights.size();
      const Real* w = l.affine.weights.data.data();
      const Real* m = l.affine.masked() ? l.affine.mask.data.data() : nullptr;
      std::vector<Real> din(static_cast<std::size_t>(ind), Real(0));
      for (int i = 0; i < out; ++i) {
        const Real d = dz[static_cast<std::size_t>(i)];
        gb[i] += d;
        const std::size_t row = static_cast<std::size_t>(i) * ind;
        if (m) {
          for (int j = 0; j < ind; ++j) {
            gw[row + j] += d * m[row + j] * in[static_cast<std::size_t>(j)];
            din[static_cast<std::size_t>(j)] += d * m[row + j] * w[row + j];
          }
        } else {
          for (int j = 0; j < ind; ++j) {
            gw[row + j] += d * in[static_cast<std::size_t>(j)];
            din[static_cast<std::size_t>(j)] += d * w[row + j];
          }
        }
      }
      cot = std::move(din);
    }
    if (!grad_input.empty()) {
      require(grad_input.size() == cot.size(),
              "backward: grad_input length mismatch");
      for (std::size_t i = 0; i < cot.size(); ++i) grad_input[i] += cot[i];
    }
  }

  void copy_params_to(std::span<Real> out) const {
    require(out.size() == param_count(), "copy_params_to: length mismatch");
    std::size_t k = 0;
    for (const auto& l : layers_) {
      for (Real w : l.affine.weights.data) out[k++] = w;
      for (Real b : l.affine.bias) out[k++] = b;
    }
  }

  void set_params_from(std::span<const Real> in) {
    require(in.size() == param_count(), "set_params_from: length mismatch");
    std::size_t k = 0;
    for (auto& l : layers_) {
      for (Real& w : l.affine.weights.data) w = in[k++];
      for (Real& b : l.affine.bias) b = in[k++];
    }
  }

  // uniform(-s, s) weights with s = 1/sqrt(fan_in), zero bias.
  void init_params(RngStream rng, Real scale_multiplier = Real(1)) {
    std::size_t draw = 0;
    for (auto& l : layers_) {
      const Real s =
          scale_multiplier / std::sqrt(static_cast<Real>(l.affine.in_dim()));
      for (Real& w : l.affine.weights.data)
        w = static_cast<Real>((2.0 * rng.uniform_at(draw++) - 1.0) * s);
      for (Real& b : l.affine.bias) b = Real(0);
    }
  }

 private:
  std::vector<Layer> layers_;
};

struct AdamState {
  std::string label;  // parameter group name, reported on failure
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void init(const std::string& name, std::size_t n, double learning_rate) {
    label = name;
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    step = 0;
    lr = learning_rate;
  }
};

inline void adam_step(std::span<double> params, std::span<const double> grads,
                      AdamState& state) {
  require(params.size() == grads.size() && params.size() == state.m.size(),
          "adam_step: length mismatch for group '" + state.label + "'");
  for (double g : grads)
    if (!std::isfinite(g))
      throw numeric_error("adam_step: non-finite gradient in group '" +
                          state.label + "'");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace dnflow
