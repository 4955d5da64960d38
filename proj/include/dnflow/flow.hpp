#pragma once

// XOR transform machinery: the elementwise involution, layer stacking, the
// factorised Bernoulli base, the hard threshold, and the exact likelihood of
// a deterministically chosen transform sequence.

#include <span>
#include <vector>

#include "dnflow/bits.hpp"
#include "dnflow/nn.hpp"

namespace dnflow {

struct BaseParams {
  std::vector<double> beta;  // probability of a 1, per dimension
  bool frozen = true;

  int dim() const { return static_cast<int>(beta.size()); }

  static BaseParams constant(int d, double p, bool frozen = true) {
    require(p >= kProbEps && p <= 1.0 - kProbEps,
            "BaseParams: probability outside clamp range");
    BaseParams b;
    b.beta.assign(static_cast<std::size_t>(d), p);
    b.frozen = frozen;
    return b;
  }

  void clamp() {
    for (double& p : beta)
      p = std::clamp(p, kProbEps, 1.0 - kProbEps);
  }
};

inline BitVector xor_transform(const BitVector& a, const BitVector& u) {
  require(a.size() == u.size(), "xor_transform: length mismatch");
  BitVector out(a.size());
  for (int i = 0; i < a.size(); ++i) out[i] = a[i] ^ u[i];
  return out;
}

// The L-layer transform sequence together with the per-layer log-probs the
// samplers recorded and the intermediate states x^(0..L).
struct TransformSequence {
  std::vector<BitVector> u;                 // u^(1..L)
  std::vector<BitVector> states;            // x^(0..L), states[0] = x
  std::vector<std::vector<double>> logp;    // generative per-dim log-probs
  std::vector<std::vector<double>> logq;    // posterior per-dim log-probs

  int depth() const { return static_cast<int>(u.size()); }
  const BitVector& output() const { return states.back(); }

  double total_logp() const {
    double t = 0.0;
    for (const auto& l : logp)
      for (double v : l) t += v;
    return t;
  }
  double total_logq() const {
    double t = 0.0;
    for (const auto& l : logq)
      for (double v : l) t += v;
    return t;
  }
};

inline BitVector apply_stack(const BitVector& x, const std::vector<BitVector>& u_seq) {
  BitVector y = x;
  for (const auto& u : u_seq) y = xor_transform(y, u);
  return y;
}

inline BitVector apply_stack(const BitVector& x, const TransformSequence& seq) {
  return apply_stack(x, seq.u);
}

// Per-dimension rewards r_d = log Bern(y_d | beta_d) and their total.
inline double base_log_prob(const BitVector& y, const BaseParams& base,
                            std::vector<double>* per_dim = nullptr) {
  require(y.size() == base.dim(), "base_log_prob: length mismatch");
  double total = 0.0;
  if (per_dim) per_dim->assign(static_cast<std::size_t>(y.size()), 0.0);
  for (int d = 0; d < y.size(); ++d) {
    const double lp = bernoulli_log_prob(base.beta[static_cast<std::size_t>(d)], y[d]);
    total += lp;
    if (per_dim) (*per_dim)[static_cast<std::size_t>(d)] = lp;
  }
  return total;
}

// 1 if o_d > 0.5, 0 otherwise (ties map to 0).
inline BitVector threshold(std::span<const double> o) {
  BitVector u(static_cast<int>(o.size()));
  for (std::size_t d = 0; d < o.size(); ++d) u[static_cast<int>(d)] = o[d] > 0.5 ? 1 : 0;
  return u;
}

// Exact negative log-likelihood of the flow specified by a deterministic
// transform sequence: -log p_Y(x xor u^(1) ... xor u^(L)).
inline double deterministic_flow_nll(const BitVector& x,
                                     const TransformSequence& u_star,
                                     const BaseParams& base) {
  return -base_log_prob(apply_stack(x, u_star), base);
}

}  // namespace dnflow
