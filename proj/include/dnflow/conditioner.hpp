#pragma once

// The two neural parameterisations of per-layer transform distributions:
//
//  * MadeConditioner — autoregressive Bernoulli probabilities f_1..f_D from a
//    masked feed-forward stack. Inputs are two banks: the conditioning vector
//    (the data x at layer 1, the previous transform u at deeper layers) and
//    the current-layer transform. The current bank is always strict-prefix
//    masked (output d reads positions < d). The conditioning bank is
//    strict-prefix masked by default, which is what makes the flow's marginal
//    normalised; CondConnectivity::Full wires it densely instead and is kept
//    as the (unnormalised) variant used by the negative-control tests.
//
//  * PosteriorConditioner — mean-field Bernoulli probabilities from an
//    unmasked stack; conditions freely on its input.

#include <numeric>
#include <string>
#include <vector>

#include "dnflow/bits.hpp"
#include "dnflow/nn.hpp"
#include "dnflow/rng.hpp"

namespace dnflow {

enum class CondConnectivity { Prefix, Full };

struct MadeMasks {
  std::vector<RealMatrix<double>> masks;      // one per affine layer
  std::vector<std::vector<int>> degrees;      // input, hidden..., output degrees
};

// Degrees follow the usual masked-autoencoder scheme: input position j carries
// degree ord(j); a hidden unit of degree m reads inputs of degree <= m; output
// d reads hidden units of degree < ord(d). Hidden degrees cycle 1..D-1
// deterministically. Conditioning inputs carry their own position's degree in
// Prefix mode and degree 0 (read by everything) in Full mode.
inline MadeMasks build_made_masks(int dim, const std::vector<int>& hidden_sizes,
                                  int cond_dim, CondConnectivity cond_mode,
                                  const std::vector<int>& ordering = {}) {
  require(dim >= 1, "build_made_masks: dim must be >= 1");
  for (int h : hidden_sizes) require(h >= 1, "build_made_masks: hidden size must be >= 1");
  std::vector<int> ord = ordering;
  if (ord.empty()) {
    ord.resize(static_cast<std::size_t>(dim));
    std::iota(ord.begin(), ord.end(), 1);  // natural ordering 1..D
  }
  require(static_cast<int>(ord.size()) == dim, "build_made_masks: ordering size mismatch");

  MadeMasks out;
  std::vector<int> in_deg;
  in_deg.reserve(static_cast<std::size_t>(cond_dim + dim));
  for (int j = 0; j < cond_dim; ++j)
    in_deg.push_back(cond_mode == CondConnectivity::Full
                         ? 0
                         : ord[static_cast<std::size_t>(j % dim)]);
  for (int j = 0; j < dim; ++j) in_deg.push_back(ord[static_cast<std::size_t>(j)]);
  out.degrees.push_back(in_deg);

  std::vector<int> prev = in_deg;
  for (int h : hidden_sizes) {
    std::vector<int> deg(static_cast<std::size_t>(h));
    for (int j = 0; j < h; ++j) deg[static_cast<std::size_t>(j)] = dim >= 2 ? 1 + j % (dim - 1) : 0;
    RealMatrix<double> mask(h, static_cast<int>(prev.size()));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < static_cast<int>(prev.size()); ++j)
        mask.at(i, j) = prev[static_cast<std::size_t>(j)] <= deg[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    out.masks.push_back(std::move(mask));
    out.degrees.push_back(deg);
    prev = std::move(deg);
  }

  RealMatrix<double> omask(dim, static_cast<int>(prev.size()));
  for (int d = 0; d < dim; ++d)
    for (int j = 0; j < static_cast<int>(prev.size()); ++j)
      omask.at(d, j) =
          prev[static_cast<std::size_t>(j)] < ord[static_cast<std::size_t>(d)] ? 1.0 : 0.0;
  out.masks.push_back(std::move(omask));
  out.degrees.push_back(ord);
  return out;
}

class MadeConditioner {
 public:
  MadeConditioner() = default;

  MadeConditioner(int layer_index, int dim, int cond_dim,
                  std::vector<int> hidden_sizes, CondConnectivity cond_mode,
                  const std::vector<int>& ordering = {})
      : layer_index_(layer_index),
        dim_(dim),
        cond_dim_(cond_dim),
        hidden_(std::move(hidden_sizes)),
        cond_mode_(cond_mode) {
    MadeMasks mm = build_made_masks(dim_, hidden_, cond_dim_, cond_mode_, ordering);
    int in = cond_dim_ + dim_;
    for (std::size_t li = 0; li < mm.masks.size(); ++li) {
      const int outd = mm.masks[li].rows;
      MaskedAffine<double> aff;
      aff.weights = RealMatrix<double>(outd, in);
      aff.bias.assign(static_cast<std::size_t>(outd), 0.0);
      aff.mask = mm.masks[li];
      const bool last = li + 1 == mm.masks.size();
      net_.add_layer(std::move(aff),
                     last ? Activation::SigmoidClamped : Activation::Relu);
      in = outd;
    }
    degrees_ = std::move(mm.degrees);
  }

  int layer_index() const { return layer_index_; }
  int dim() const { return dim_; }
  int cond_dim() const { return cond_dim_; }
  CondConnectivity cond_mode() const { return cond_mode_; }
  const std::vector<std::vector<int>>& degrees() const { return degrees_; }
  Mlp<double>& net() { return net_; }
  const Mlp<double>& net() const { return net_; }

  std::vector<double> assemble_input(const BitVector& cond,
                                     const BitVector& current) const {
    require(cond.size() == cond_dim_, "made: conditioning input length mismatch");
    require(current.size() == dim_, "made: current-layer input length mismatch");
    std::vector<double> in(static_cast<std::size_t>(cond_dim_ + dim_));
    for (int i = 0; i < cond_dim_; ++i) in[static_cast<std::size_t>(i)] = cond[i];
    for (int i = 0; i < dim_; ++i) in[static_cast<std::size_t>(cond_dim_ + i)] = current[i];
    return in;
  }

  // One pass produces all D conditional probabilities; the mask guarantees
  // f_d ignores current positions >= d.
  std::vector<double> probs(const BitVector& cond, const BitVector& current) const {
    return net_.apply(assemble_input(cond, current));
  }

  // Sequential ancestral sampling; draws are addressed by dimension so the
  // result is independent of evaluation order. Returns per-dim log-probs of
  // the drawn bits.
  BitVector sample(const BitVector& cond, const RngStream& stream,
                   std::vector<double>* per_dim_logp = nullptr) const {
    BitVector u(dim_);
    if (per_dim_logp) per_dim_logp->assign(static_cast<std::size_t>(dim_), 0.0);
    for (int d = 0; d < dim_; ++d) {
      const std::vector<double> f = probs(cond, u);
      const double p = f[static_cast<std::size_t>(d)];
      const int bit = stream.bernoulli_at(static_cast<std::uint64_t>(d), p) ? 1 : 0;
      u[d] = static_cast<std::uint8_t>(bit);
      if (per_dim_logp)
        (*per_dim_logp)[static_cast<std::size_t>(d)] = bernoulli_log_prob(p, bit);
    }
    return u;
  }

  // Deterministic decode: u_d = 1 iff f_d > 0.5 (ties to 0), computed
  // sequentially so each threshold sees the already-decided prefix.
  BitVector deterministic_decode(const BitVector& cond) const {
    BitVector u(dim_);
    for (int d = 0; d < dim_; ++d) {
      const std::vector<double> f = probs(cond, u);
      u[d] = f[static_cast<std::size_t>(d)] > 0.5 ? 1 : 0;
    }
    return u;
  }

  double log_prob(const BitVector& cond, const BitVector& u,
                  std::vector<double>* per_dim = nullptr) const {
    const std::vector<double> f = probs(cond, u);
    double total = 0.0;
    if (per_dim) per_dim->assign(static_cast<std::size_t>(dim_), 0.0);
    for (int d = 0; d < dim_; ++d) {
      const double lp = bernoulli_log_prob(f[static_cast<std::size_t>(d)], u[d]);
      total += lp;
      if (per_dim) (*per_dim)[static_cast<std::size_t>(d)] = lp;
    }
    return total;
  }

  // Accumulates sum_d weight_d * grad log p(u_d | cond, u_<d) into grad_flat.
  void accumulate_weighted_score(const BitVector& cond, const BitVector& u,
                                 std::span<const double> weights,
                                 std::span<double> grad_flat) const {
    require(static_cast<int>(weights.size()) == dim_,
            "made score: weight length mismatch");
    const auto tape = net_.forward(assemble_input(cond, u));
    const auto& f = tape.output();
    std::vector<double> cot(static_cast<std::size_t>(dim_));
    for (int d = 0; d < dim_; ++d)
      cot[static_cast<std::size_t>(d)] =
          weights[static_cast<std::size_t>(d)] *
          bernoulli_log_prob_grad(f[static_cast<std::size_t>(d)], u[d]);
    net_.backward(tape, cot, grad_flat);
  }

 private:
  int layer_index_ = 0;
  int dim_ = 0;
  int cond_dim_ = 0;
  std::vector<int> hidden_;
  CondConnectivity cond_mode_ = CondConnectivity::Prefix;
  Mlp<double> net_;
  std::vector<std::vector<int>> degrees_;
};

class PosteriorConditioner {
 public:
  PosteriorConditioner() = default;

  PosteriorConditioner(int layer_index, int dim, int cond_dim,
                       std::vector<int> hidden_sizes)
      : layer_index_(layer_index), dim_(dim), cond_dim_(cond_dim) {
    int in = cond_dim_;
    for (int h : hidden_sizes) {
      MaskedAffine<double> aff;
      aff.weights = RealMatrix<double>(h, in);
      aff.bias.assign(static_cast<std::size_t>(h), 0.0);
      net_.add_layer(std::move(aff), Activation::Relu);
      in = h;
    }
    MaskedAffine<double> out;
    out.weights = RealMatrix<double>(dim_, in);
    out.bias.assign(static_cast<std::size_t>(dim_), 0.0);
    net_.add_layer(std::move(out), Activation::SigmoidClamped);
  }

  int layer_index() const { return layer_index_; }
  int dim() const { return dim_; }
  int cond_dim() const { return cond_dim_; }
  Mlp<double>& net() { return net_; }
  const Mlp<double>& net() const { return net_; }

  std::vector<double> probs(const BitVector& cond) const {
    require(cond.size() == cond_dim_, "posterior: input length mismatch");
    return net_.apply(cond.to_real());
  }

  // Mean-field: each bit is drawn from its own addressed substream slot, so
  // sampling order cannot matter.
  BitVector sample(const BitVector& cond, const RngStream& stream,
                   std::vector<double>* per_dim_logq = nullptr) const {
    const std::vector<double> g = probs(cond);
    BitVector u(dim_);
    if (per_dim_logq) per_dim_logq->assign(static_cast<std::size_t>(dim_), 0.0);
    for (int d = 0; d < dim_; ++d) {
      const double p = g[static_cast<std::size_t>(d)];
      const int bit = stream.bernoulli_at(static_cast<std::uint64_t>(d), p) ? 1 : 0;
      u[d] = static_cast<std::uint8_t>(bit);
      if (per_dim_logq)
        (*per_dim_logq)[static_cast<std::size_t>(d)] = bernoulli_log_prob(p, bit);
    }
    return u;
  }

  double log_prob(const BitVector& cond, const BitVector& u,
                  std::vector<double>* per_dim = nullptr) const {
    const std::vector<double> g = probs(cond);
    double total = 0.0;
    if (per_dim) per_dim->assign(static_cast<std::size_t>(dim_), 0.0);
    for (int d = 0; d < dim_; ++d) {
      const double lp = bernoulli_log_prob(g[static_cast<std::size_t>(d)], u[d]);
      total += lp;
      if (per_dim) (*per_dim)[static_cast<std::size_t>(d)] = lp;
    }
    return total;
  }

  // Closed-form entropy of the factorised distribution given cond.
  double entropy(const BitVector& cond) const {
    const std::vector<double> g = probs(cond);
    double h = 0.0;
    for (double p : g) h += bernoulli_entropy(p);
    return h;
  }

  // grad_flat += d entropy / d params.
  void accumulate_entropy_grad(const BitVector& cond,
                               std::span<double> grad_flat) const {
    const auto tape = net_.forward(cond.to_real());
    const auto& g = tape.output();
    std::vector<double> cot(g.size());
    for (std::size_t d = 0; d < g.size(); ++d) cot[d] = bernoulli_entropy_grad(g[d]);
    net_.backward(tape, cot, grad_flat);
  }

  // grad_flat += sum_d weight_d * grad log q(u_d | cond).
  void accumulate_weighted_score(const BitVector& cond, const BitVector& u,
                                 std::span<const double> weights,
                                 std::span<double> grad_flat) const {
    require(static_cast<int>(weights.size()) == dim_,
            "posterior score: weight length mismatch");
    const auto tape = net_.forward(cond.to_real());
    const auto& g = tape.output();
    std::vector<double> cot(static_cast<std::size_t>(dim_));
    for (int d = 0; d < dim_; ++d)
      cot[static_cast<std::size_t>(d)] =
          weights[static_cast<std::size_t>(d)] *
          bernoulli_log_prob_grad(g[static_cast<std::size_t>(d)], u[d]);
    net_.backward(tape, cot, grad_flat);
  }

 private:
  int layer_index_ = 0;
  int dim_ = 0;
  int cond_dim_ = 0;
  Mlp<double> net_;
};

}  // namespace dnflow
