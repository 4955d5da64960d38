#pragma once

// FlowModel bundles the base distribution with the per-layer conditioners:
// the autoregressive generative stack (theta) and, unless the posterior is
// tied to it (the q := p configuration used by the special-case estimator and
// the straight-through baseline), the mean-field posterior stack (lambda).
//
// Layer l's conditioning input is u^(l-1), with u^(0) = x.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dnflow/conditioner.hpp"
#include "dnflow/flow.hpp"

namespace dnflow {

struct ModelConfig {
  int dim = 0;
  int layers = 1;
  std::vector<int> made_hidden = {512};
  std::vector<int> posterior_hidden = {512};
  CondConnectivity cond_mode = CondConnectivity::Prefix;
  bool tie_posterior = false;  // q := p
  std::vector<double> beta;    // empty -> constant base_p
  double base_p = 0.1;
  bool base_trainable = false;
  std::vector<int> ordering;   // empty -> natural
};

class FlowModel {
 public:
  FlowModel() = default;

  static FlowModel build(const ModelConfig& cfg, RngStream init_rng) {
    require(cfg.dim >= 1, "FlowModel: dim must be >= 1");
    require(cfg.layers >= 0, "FlowModel: layers must be >= 0");
    FlowModel m;
    m.dim_ = cfg.dim;
    m.layers_ = cfg.layers;
    m.tie_posterior_ = cfg.tie_posterior;
    if (!cfg.beta.empty()) {
      require(static_cast<int>(cfg.beta.size()) == cfg.dim,
              "FlowModel: beta length mismatch");
      m.base_.beta = cfg.beta;
      m.base_.clamp();
      m.base_.frozen = !cfg.base_trainable;
    } else {
      m.base_ = BaseParams::constant(cfg.dim, cfg.base_p, !cfg.base_trainable);
    }
    for (int l = 1; l <= cfg.layers; ++l) {
      m.prior_.emplace_back(l, cfg.dim, cfg.dim, cfg.made_hidden, cfg.cond_mode,
                            cfg.ordering);
      m.prior_.back().net().init_params(init_rng.derive("theta").derive(static_cast<std::uint64_t>(l)));
      if (!cfg.tie_posterior) {
        m.posterior_.emplace_back(l, cfg.dim, cfg.dim, cfg.posterior_hidden);
        m.posterior_.back().net().init_params(
            init_rng.derive("lambda").derive(static_cast<std::uint64_t>(l)));
      }
    }
    return m;
  }

  int dim() const { return dim_; }
  int depth() const { return layers_; }
  bool tied() const { return tie_posterior_; }
  BaseParams& base() { return base_; }
  const BaseParams& base() const { return base_; }
  std::vector<MadeConditioner>& prior() { return prior_; }
  const std::vector<MadeConditioner>& prior() const { return prior_; }
  std::vector<PosteriorConditioner>& posterior() { return posterior_; }
  const std::vector<PosteriorConditioner>& posterior() const { return posterior_; }

  // --- trajectories ------------------------------------------------------

  // u ~ q(u|x); records per-dim log q and log p for every layer.
  TransformSequence sample_posterior_trajectory(const BitVector& x,
                                                const RngStream& stream) const {
    TransformSequence t;
    t.states.push_back(x);
    BitVector prev = x;
    for (int l = 1; l <= layers_; ++l) {
      std::vector<double> lq, lp;
      BitVector u;
      if (tie_posterior_) {
        u = made(l).sample(prev, stream.derive(static_cast<std::uint64_t>(l)), &lp);
        lq = lp;
      } else {
        u = post(l).sample(prev, stream.derive(static_cast<std::uint64_t>(l)), &lq);
        made(l).log_prob(prev, u, &lp);
      }
      t.states.push_back(xor_transform(t.states.back(), u));
      t.u.push_back(u);
      t.logq.push_back(std::move(lq));
      t.logp.push_back(std::move(lp));
      prev = t.u.back();
    }
    return t;
  }

  // u ~ p(u|x), used by the q := p special case and by model sampling checks.
  TransformSequence sample_prior_trajectory(const BitVector& x,
                                            const RngStream& stream) const {
    TransformSequence t;
    t.states.push_back(x);
    BitVector prev = x;
    for (int l = 1; l <= layers_; ++l) {
      std::vector<double> lp;
      BitVector u = made(l).sample(prev, stream.derive(static_cast<std::uint64_t>(l)), &lp);
      t.states.push_back(xor_transform(t.states.back(), u));
      t.u.push_back(u);
      t.logp.push_back(lp);
      t.logq.push_back(std::move(lp));
      prev = t.u.back();
    }
    return t;
  }

  // Evaluates log q and log p per layer for a given transform sequence.
  void score_trajectory(const BitVector& x, TransformSequence& t) const {
    BitVector prev = x;
    t.logp.assign(static_cast<std::size_t>(layers_), {});
    t.logq.assign(static_cast<std::size_t>(layers_), {});
    for (int l = 1; l <= layers_; ++l) {
      const BitVector& u = t.u[static_cast<std::size_t>(l - 1)];
      made(l).log_prob(prev, u, &t.logp[static_cast<std::size_t>(l - 1)]);
      if (tie_posterior_)
        t.logq[static_cast<std::size_t>(l - 1)] = t.logp[static_cast<std::size_t>(l - 1)];
      else
        post(l).log_prob(prev, u, &t.logq[static_cast<std::size_t>(l - 1)]);
      prev = u;
    }
  }

  // Deterministic transform: per-layer threshold of the posterior
  // probabilities, or sequential decode of the generative conditioner when
  // the posterior is tied to it. Pure function of (parameters, x).
  TransformSequence greedy_transform(const BitVector& x) const {
    TransformSequence t;
    t.states.push_back(x);
    BitVector prev = x;
    for (int l = 1; l <= layers_; ++l) {
      BitVector u = tie_posterior_ ? made(l).deterministic_decode(prev)
                                   : threshold(post(l).probs(prev));
      t.states.push_back(xor_transform(t.states.back(), u));
      t.u.push_back(u);
      prev = t.u.back();
    }
    return t;
  }

  // Ancestral sample of (x, u, y) from the generative model, dimension-major:
  // for each d, draw u^(1..L)_d from their prefix conditionals, then y_d from
  // the base, and emit x_d = y_d xor u^(1)_d ... xor u^(L)_d. Exact for
  // prefix connectivity.
  BitVector ancestral_sample(const RngStream& stream, BitVector* y_out = nullptr) const {
    for (const auto& c : prior_)
      require(c.cond_mode() == CondConnectivity::Prefix,
              "ancestral_sample: requires prefix conditioning connectivity");
    std::vector<BitVector> u(static_cast<std::size_t>(layers_), BitVector(dim_));
    BitVector x(dim_), y(dim_);
    const RngStream base_stream = stream.derive("base");
    for (int d = 0; d < dim_; ++d) {
      for (int l = 1; l <= layers_; ++l) {
        const BitVector& cond = l == 1 ? x : u[static_cast<std::size_t>(l - 2)];
        const std::vector<double> f =
            made(l).probs(cond, u[static_cast<std::size_t>(l - 1)]);
        u[static_cast<std::size_t>(l - 1)][d] =
            stream.derive(static_cast<std::uint64_t>(l)).bernoulli_at(
                static_cast<std::uint64_t>(d), f[static_cast<std::size_t>(d)])
                ? 1
                : 0;
      }
      y[d] = base_stream.bernoulli_at(static_cast<std::uint64_t>(d),
                                      base_.beta[static_cast<std::size_t>(d)])
                 ? 1
                 : 0;
      int bit = y[d];
      for (int l = 1; l <= layers_; ++l) bit ^= u[static_cast<std::size_t>(l - 1)][d];
      x[d] = static_cast<std::uint8_t>(bit);
    }
    if (y_out) *y_out = y;
    return x;
  }

  // --- parameter groups ---------------------------------------------------

  // theta.<l> for the generative stack, lambda.<l> for the posterior stack,
  // beta when the base is trainable.
  std::vector<std::string> group_names() const {
    std::vector<std::string> names;
    for (int l = 1; l <= layers_; ++l) names.push_back("theta." + std::to_string(l));
    if (!tie_posterior_)
      for (int l = 1; l <= layers_; ++l) names.push_back("lambda." + std::to_string(l));
    if (!base_.frozen) names.push_back("beta");
    return names;
  }

  std::size_t group_size(const std::string& name) const {
    if (name == "beta") return base_.beta.size();
    const Mlp<double>* n = find_net(name);
    require(n != nullptr, "unknown parameter group '" + name + "'");
    return n->param_count();
  }

  void copy_group(const std::string& name, std::span<double> out) const {
    if (name == "beta") {
      require(out.size() == base_.beta.size(), "copy_group: length mismatch");
      std::copy(base_.beta.begin(), base_.beta.end(), out.begin());
      return;
    }
    const Mlp<double>* n = find_net(name);
    require(n != nullptr, "unknown parameter group '" + name + "'");
    n->copy_params_to(out);
  }

  void set_group(const std::string& name, std::span<const double> in) {
    if (name == "beta") {
      require(in.size() == base_.beta.size(), "set_group: length mismatch");
      std::copy(in.begin(), in.end(), base_.beta.begin());
      base_.clamp();
      return;
    }
    Mlp<double>* n = find_net(name);
    require(n != nullptr, "unknown parameter group '" + name + "'");
    n->set_params_from(in);
  }

  const MadeConditioner& made(int layer_1based) const {
    return prior_[static_cast<std::size_t>(layer_1based - 1)];
  }
  const PosteriorConditioner& post(int layer_1based) const {
    require(!tie_posterior_, "posterior is tied to the generative conditioner");
    return posterior_[static_cast<std::size_t>(layer_1based - 1)];
  }

 private:
  const Mlp<double>* find_net(const std::string& name) const {
    return const_cast<FlowModel*>(this)->find_net(name);
  }
  Mlp<double>* find_net(const std::string& name) {
    if (name.rfind("theta.", 0) == 0) {
      const int l = std::stoi(name.substr(6));
      if (l >= 1 && l <= layers_) return &prior_[static_cast<std::size_t>(l - 1)].net();
    }
    if (name.rfind("lambda.", 0) == 0 && !tie_posterior_) {
      const int l = std::stoi(name.substr(7));
      if (l >= 1 && l <= layers_) return &posterior_[static_cast<std::size_t>(l - 1)].net();
    }
    return nullptr;
  }

  int dim_ = 0;
  int layers_ = 0;
  bool tie_posterior_ = false;
  BaseParams base_;
  std::vector<MadeConditioner> prior_;
  std::vector<PosteriorConditioner> posterior_;
};

}  // namespace dnflow
