#pragma once

// Gradient estimators for the latent-transformation flow:
//
//  * exact pathwise gradients for the base (beta) and the generative stack
//    (theta, via the sampled transform's log-probability),
//  * the reconstruction score-function estimator for lambda with optional
//    self-critic and moving-baseline variance reduction,
//  * the local KL estimator for lambda: closed-form entropy gradient plus a
//    suffix-weighted cross-entropy score and the next-layer log-ratio score
//    (scaled by gamma_kl; absent at the last layer),
//  * the q := p special case: per-dimension reward times the score of the
//    matching transform column, plus the prefix term (scaled by gamma_prefix,
//    estimated on an independent sample),
//  * the straight-through proxy: deterministic thresholded forward, backward
//    through the threshold as if it were the identity.
//
// Estimator functions accumulate ascent directions of their objective (the
// ELBO, or the sampled-reward bound) into a GradAccumulator; only ste_step
// returns gradients of its loss. estimator_step() adapts everything to a
// descent convention for the trainer.
//
// Baseline states are read as a snapshot and never mutated here; the signals
// that should update them are returned so the caller can apply updates in a
// fixed order (once per example, in batch index order).

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dnflow/model.hpp"

namespace dnflow {

enum class EstimatorKind { SteProxy, SfeFull, SfeSpecial };
enum class MovingBaseline { None, Centre, Standardise };
enum class SignalPairing { PerDim, Summed };

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::SfeFull;
  bool self_critic = false;
  MovingBaseline baseline = MovingBaseline::None;
  SignalPairing pairing = SignalPairing::PerDim;
  double gamma_kl = 1.0;      // scale of the next-layer KL score term
  double gamma_prefix = 0.0;  // scale of the special-case prefix term
  int samples = 1;            // posterior samples per example per step

  void validate() const {
    require(std::isfinite(gamma_kl) && gamma_kl >= 0.0, "gamma_kl must be finite and >= 0");
    require(std::isfinite(gamma_prefix) && gamma_prefix >= 0.0,
            "gamma_prefix must be finite and >= 0");
    require(samples >= 1, "samples must be >= 1");
  }
};

// Exponential moving mean/std of a learning signal. Fresh state has mean 0
// and std 1, so the first standardised signal passes through unchanged.
struct BaselineState {
  std::vector<double> mean;
  std::vector<double> var;
  double decay = 0.9;
  double floor = 1.0;

  void init(std::size_t n, double decay_ = 0.9, double floor_ = 1.0) {
    mean.assign(n, 0.0);
    var.assign(n, 1.0);
    decay = decay_;
    floor = floor_;
  }
  std::size_t size() const { return mean.size(); }

  std::vector<double> normalize(const std::vector<double>& signal,
                                MovingBaseline mode) const {
    if (mode == MovingBaseline::None) return signal;
    require(signal.size() == mean.size(), "baseline: signal length mismatch");
    std::vector<double> out(signal.size());
    for (std::size_t i = 0; i < signal.size(); ++i) {
      out[i] = signal[i] - mean[i];
      if (mode == MovingBaseline::Standardise)
        out[i] /= std::max(std::sqrt(var[i]), floor);
    }
    return out;
  }

  // mean <- decay*mean + (1-decay)*signal, likewise for the variance around
  // the pre-update mean.
  void update(const std::vector<double>& signal) {
    require(signal.size() == mean.size(), "baseline update: length mismatch");
    for (std::size_t i = 0; i < signal.size(); ++i) {
      const double delta = signal[i] - mean[i];
      var[i] = decay * var[i] + (1.0 - decay) * delta * delta;
      mean[i] = decay * mean[i] + (1.0 - decay) * signal[i];
    }
  }
};

// Subtract the moving mean and divide by the floored moving std; the state is
// then updated with the raw signal.
inline std::vector<double> standardize(const std::vector<double>& signal,
                                       BaselineState& state) {
  std::vector<double> out = state.normalize(signal, MovingBaseline::Standardise);
  state.update(signal);
  return out;
}

// All baseline states a model needs: one per-dimension state for the
// reconstruction (and special-case) reward, and per layer one per-dimension
// state for the KL suffix rewards plus a scalar state for the next-layer
// log-ratio reward.
struct BaselineBank {
  BaselineState recon;
  std::vector<BaselineState> kl_suffix;
  std::vector<BaselineState> kl_next;

  void init(int dim, int layers, double decay = 0.9, double floor = 1.0) {
    recon.init(static_cast<std::size_t>(dim), decay, floor);
    kl_suffix.assign(static_cast<std::size_t>(layers), {});
    kl_next.assign(static_cast<std::size_t>(layers), {});
    for (auto& b : kl_suffix) b.init(static_cast<std::size_t>(dim), decay, floor);
    for (auto& b : kl_next) b.init(1, decay, floor);
  }
};

// Signals observed during one estimator evaluation, to be fed to
// BaselineBank updates after the batch.
struct BaselineObservations {
  std::vector<std::vector<double>> recon;
  std::vector<std::vector<std::vector<double>>> kl_suffix;  // [obs][layer]
  std::vector<std::vector<std::vector<double>>> kl_next;

  void apply(BaselineBank& bank) const {
    for (const auto& s : recon) bank.recon.update(s);
    for (const auto& per_layer : kl_suffix)
      for (std::size_t l = 0; l < per_layer.size(); ++l)
        bank.kl_suffix[l].update(per_layer[l]);
    for (const auto& per_layer : kl_next)
      for (std::size_t l = 0; l < per_layer.size(); ++l)
        bank.kl_next[l].update(per_layer[l]);
  }
};

// Flat per-parameter-group gradient estimates with provenance.
struct GradAccumulator {
  std::string tag;
  int samples = 0;
  std::map<std::string, std::vector<double>> groups;

  std::vector<double>& group(const std::string& name, std::size_t n) {
    auto [it, inserted] = groups.try_emplace(name);
    if (inserted) it->second.assign(n, 0.0);
    require(it->second.size() == n, "GradAccumulator: group size changed");
    return it->second;
  }
  void add(const GradAccumulator& other, double scale = 1.0) {
    for (const auto& [name, g] : other.groups) {
      auto& mine = group(name, g.size());
      for (std::size_t i = 0; i < g.size(); ++i) mine[i] += scale * g[i];
    }
    samples += other.samples;
  }
  void scale_all(double s) {
    for (auto& [name, g] : groups)
      for (double& v : g) v *= s;
  }
  bool finite() const {
    for (const auto& [name, g] : groups)
      if (!all_finite(g)) return false;
    return true;
  }
};

inline const BitVector& cond_of(const BitVector& x, const TransformSequence& t, int layer) {
  return layer == 1 ? x : t.u[static_cast<std::size_t>(layer - 2)];
}

inline std::vector<double> per_dim_rewards(const BitVector& x,
                                           const TransformSequence& t,
                                           const BaseParams& base) {
  std::vector<double> r;
  base_log_prob(apply_stack(x, t), base, &r);
  return r;
}

// Monte Carlo ELBO: mean over K posterior samples of
// log p_Y(t^{-1}(x;u)) + log p(u|x) - log q(u|x).
inline double elbo_estimate(const FlowModel& model, const BitVector& x,
                            const RngStream& stream, int k_samples) {
  require(k_samples >= 1, "elbo_estimate: K must be >= 1");
  double acc = 0.0;
  for (int k = 0; k < k_samples; ++k) {
    const TransformSequence t = model.sample_posterior_trajectory(
        x, stream.derive(static_cast<std::uint64_t>(k)));
    acc += base_log_prob(t.output(), model.base()) + t.total_logp() - t.total_logq();
  }
  return acc / k_samples;
}

// Pathwise gradient of log p_Y(y) w.r.t. beta at y = apply_stack(x, u).
inline std::vector<double> grad_beta(const BitVector& x, const TransformSequence& t,
                                     const BaseParams& base) {
  const BitVector y = apply_stack(x, t);
  std::vector<double> g(static_cast<std::size_t>(y.size()));
  for (int d = 0; d < y.size(); ++d)
    g[static_cast<std::size_t>(d)] =
        bernoulli_log_prob_grad(base.beta[static_cast<std::size_t>(d)], y[d]);
  return g;
}

// Ascent gradient of log p(u|x) w.r.t. every theta group.
inline void grad_theta(const FlowModel& model, const BitVector& x,
                       const TransformSequence& t, GradAccumulator& acc) {
  const std::vector<double> ones(static_cast<std::size_t>(model.dim()), 1.0);
  for (int l = 1; l <= model.depth(); ++l) {
    const std::string name = "theta." + std::to_string(l);
    model.made(l).accumulate_weighted_score(cond_of(x, t, l),
                                            t.u[static_cast<std::size_t>(l - 1)], ones,
                                            acc.group(name, model.group_size(name)));
  }
}

// Reconstruction SFE for lambda: per-dimension signal
// (r_d - critic_d - mean_d)/std_d times the score of u_d (every layer), or
// the summed signal times every score in Summed pairing. Returns the raw
// signal through obs for the deferred baseline update.
inline void grad_lambda_reconstruction(const FlowModel& model, const BitVector& x,
                                       const TransformSequence& t,
                                       const TransformSequence* critic,
                                       const EstimatorConfig& cfg,
                                       const BaselineState& recon_state,
                                       GradAccumulator& acc,
                                       BaselineObservations* obs = nullptr) {
  require(!model.tied(), "grad_lambda_reconstruction: model has no posterior");
  require(!cfg.self_critic || critic != nullptr,
          "grad_lambda_reconstruction: self-critic enabled but no critic sample");
  std::vector<double> signal = per_dim_rewards(x, t, model.base());
  if (cfg.self_critic) {
    const std::vector<double> rc = per_dim_rewards(x, *critic, model.base());
    for (std::size_t d = 0; d < signal.size(); ++d) signal[d] -= rc[d];
  }
  std::vector<double> weights = recon_state.normalize(signal, cfg.baseline);
  if (cfg.pairing == SignalPairing::Summed) {
    double s = 0.0;
    for (double w : weights) s += w;
    weights.assign(weights.size(), s);
  }
  for (int l = 1; l <= model.depth(); ++l) {
    const std::string name = "lambda." + std::to_string(l);
    model.post(l).accumulate_weighted_score(cond_of(x, t, l),
                                            t.u[static_cast<std::size_t>(l - 1)], weights,
                                            acc.group(name, model.group_size(name)));
  }
  if (obs) obs->recon.push_back(std::move(signal));
}

// Local KL estimator for lambda, as a contribution to the ELBO ascent
// direction, i.e. the gradient of -KL(q || p):
//   + exact entropy gradient of the mean-field layer,
//   + suffix cross-entropy rewards sum_{k>=d} log p(u_k|..) on the score of u_d,
//   + gamma_kl * (next layer's log p/q reward) on the whole layer score
//     (omitted at the last layer).
inline void grad_lambda_kl(const FlowModel& model, const BitVector& x,
                           const TransformSequence& t,
                           const TransformSequence* critic,
                           const EstimatorConfig& cfg, const BaselineBank& bank,
                           GradAccumulator& acc,
                           BaselineObservations* obs = nullptr) {
  require(!model.tied(), "grad_lambda_kl: model has no posterior");
  require(!cfg.self_critic || critic != nullptr,
          "grad_lambda_kl: self-critic enabled but no critic sample");
  const int depth = model.depth();
  const int dim = model.dim();
  std::vector<std::vector<double>> suffix_obs(static_cast<std::size_t>(depth));
  std::vector<std::vector<double>> next_obs(static_cast<std::size_t>(depth));
  for (int l = 1; l <= depth; ++l) {
    const std::string name = "lambda." + std::to_string(l);
    auto& grad = acc.group(name, model.group_size(name));
    const BitVector& cond = cond_of(x, t, l);
    const BitVector& u = t.u[static_cast<std::size_t>(l - 1)];

    model.post(l).accumulate_entropy_grad(cond, grad);

    const auto& lp = t.logp[static_cast<std::size_t>(l - 1)];
    std::vector<double> suffix(static_cast<std::size_t>(dim), 0.0);
    double run = 0.0;
    for (int d = dim - 1; d >= 0; --d) {
      run += lp[static_cast<std::size_t>(d)];
      suffix[static_cast<std::size_t>(d)] = run;
    }
    if (cfg.self_critic) {
      const auto& clp = critic->logp[static_cast<std::size_t>(l - 1)];
      double crun = 0.0;
      for (int d = dim - 1; d >= 0; --d) {
        crun += clp[static_cast<std::size_t>(d)];
        suffix[static_cast<std::size_t>(d)] -= crun;
      }
    }
    const std::vector<double> w =
        bank.kl_suffix[static_cast<std::size_t>(l - 1)].normalize(suffix, cfg.baseline);
    model.post(l).accumulate_weighted_score(cond, u, w, grad);
    suffix_obs[static_cast<std::size_t>(l - 1)] = suffix;

    if (l < depth) {
      const auto& np = t.logp[static_cast<std::size_t>(l)];
      const auto& nq = t.logq[static_cast<std::size_t>(l)];
      double ratio = 0.0;
      for (int d = 0; d < dim; ++d)
        ratio += np[static_cast<std::size_t>(d)] - nq[static_cast<std::size_t>(d)];
      if (cfg.self_critic) {
        const auto& cp = critic->logp[static_cast<std::size_t>(l)];
        const auto& cq = critic->logq[static_cast<std::size_t>(l)];
        for (int d = 0; d < dim; ++d)
          ratio -= cp[static_cast<std::size_t>(d)] - cq[static_cast<std::size_t>(d)];
      }
      const std::vector<double> sig{ratio};
      const std::vector<double> nw =
          bank.kl_next[static_cast<std::size_t>(l - 1)].normalize(sig, cfg.baseline);
      const std::vector<double> layer_w(static_cast<std::size_t>(dim),
                                        cfg.gamma_kl * nw[0]);
      model.post(l).accumulate_weighted_score(cond, u, layer_w, grad);
      next_obs[static_cast<std::size_t>(l - 1)] = sig;
    } else {
      next_obs[static_cast<std::size_t>(l - 1)] = {0.0};
    }
  }
  if (obs) {
    obs->kl_suffix.push_back(std::move(suffix_obs));
    obs->kl_next.push_back(std::move(next_obs));
  }
}

// Special case (q := p): ascent gradient of E_p[log p_Y(t^{-1}(x;u))].
// Term 1 pairs the d-th reward with the score of the d-th transform column;
// term 2 (gamma_prefix) pairs rewards with the scores of preceding columns,
// estimated on the independent sample. With the self-critic on, each sample's
// rewards serve as the other's baseline.
inline void special_case_grad(const FlowModel& model, const BitVector& x,
                              const TransformSequence& t,
                              const TransformSequence* second,
                              const EstimatorConfig& cfg,
                              const BaselineState& recon_state,
                              GradAccumulator& acc,
                              BaselineObservations* obs = nullptr) {
  require(model.tied(), "special_case_grad: posterior must be tied to the prior");
  require(cfg.gamma_prefix == 0.0 || second != nullptr,
          "special_case_grad: gamma_prefix > 0 requires an independent second sample");
  require(!cfg.self_critic || second != nullptr,
          "special_case_grad: self-critic enabled but no second sample");
  const int dim = model.dim();
  const std::vector<double> r = per_dim_rewards(x, t, model.base());
  std::vector<double> r2;
  if (second) r2 = per_dim_rewards(x, *second, model.base());

  std::vector<double> signal = r;
  if (cfg.self_critic)
    for (int d = 0; d < dim; ++d)
      signal[static_cast<std::size_t>(d)] -= r2[static_cast<std::size_t>(d)];
  const std::vector<double> w1 = recon_state.normalize(signal, cfg.baseline);
  for (int l = 1; l <= model.depth(); ++l) {
    const std::string name = "theta." + std::to_string(l);
    model.made(l).accumulate_weighted_score(cond_of(x, t, l),
                                            t.u[static_cast<std::size_t>(l - 1)], w1,
                                            acc.group(name, model.group_size(name)));
  }

  if (cfg.gamma_prefix > 0.0) {
    std::vector<double> signal2 = r2;
    if (cfg.self_critic)
      for (int d = 0; d < dim; ++d)
        signal2[static_cast<std::size_t>(d)] -= r[static_cast<std::size_t>(d)];
    const std::vector<double> n2 = recon_state.normalize(signal2, cfg.baseline);
    // column k's score carries the rewards of all later observations
    std::vector<double> w2(static_cast<std::size_t>(dim), 0.0);
    double run = 0.0;
    for (int k = dim - 1; k >= 0; --k) {
      w2[static_cast<std::size_t>(k)] = cfg.gamma_prefix * run;
      run += n2[static_cast<std::size_t>(k)];
    }
    for (int l = 1; l <= model.depth(); ++l) {
      const std::string name = "theta." + std::to_string(l);
      model.made(l).accumulate_weighted_score(
          cond_of(x, *second, l), second->u[static_cast<std::size_t>(l - 1)], w2,
          acc.group(name, model.group_size(name)));
    }
  }
  if (obs) obs->recon.push_back(std::move(signal));
}

// Straight-through proxy: deterministic thresholded forward through the
// generative stack, loss -log p_Y(y), backward treating each threshold's
// Jacobian as the identity. Returns (loss, gradients of the loss).
inline double ste_step(const FlowModel& model, const BitVector& x,
                       GradAccumulator& acc) {
  require(model.tied(), "ste_step: uses the generative stack deterministically");
  const int dim = model.dim();
  const int depth = model.depth();

  // forward: sequential decode, keeping one tape per (layer, dimension) step
  std::vector<std::vector<Mlp<double>::Tape>> tapes(static_cast<std::size_t>(depth));
  std::vector<BitVector> u(static_cast<std::size_t>(depth), BitVector(dim));
  BitVector prev = x;
  for (int l = 1; l <= depth; ++l) {
    auto& layer_tapes = tapes[static_cast<std::size_t>(l - 1)];
    layer_tapes.reserve(static_cast<std::size_t>(dim));
    BitVector& ul = u[static_cast<std::size_t>(l - 1)];
    const MadeConditioner& made = model.made(l);
    for (int d = 0; d < dim; ++d) {
      layer_tapes.push_back(made.net().forward(made.assemble_input(prev, ul)));
      const double o = layer_tapes.back().output()[static_cast<std::size_t>(d)];
      ul[d] = o > 0.5 ? 1 : 0;
    }
    prev = ul;
  }
  const BitVector y = apply_stack(x, u);
  const double loss = -base_log_prob(y, model.base());

  // backward
  std::vector<double> cot_y(static_cast<std::size_t>(dim));
  for (int d = 0; d < dim; ++d) {
    const double b = model.base().beta[static_cast<std::size_t>(d)];
    cot_y[static_cast<std::size_t>(d)] = -(std::log(b) - std::log1p(-b));
  }
  // xor path: d y_d / d u^(l)_d = 1 - 2 * parity of the other bits
  std::vector<std::vector<double>> cot_u(static_cast<std::size_t>(depth),
                                         std::vector<double>(static_cast<std::size_t>(dim), 0.0));
  for (int l = 1; l <= depth; ++l)
    for (int d = 0; d < dim; ++d) {
      const int other = y[d] ^ u[static_cast<std::size_t>(l - 1)][d];
      cot_u[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(d)] =
          cot_y[static_cast<std::size_t>(d)] * (1.0 - 2.0 * other);
    }
  for (int l = depth; l >= 1; --l) {
    const MadeConditioner& made = model.made(l);
    const std::string name = "theta." + std::to_string(l);
    auto& grad = acc.group(name, model.group_size(name));
    std::vector<double> gin(static_cast<std::size_t>(2 * dim));
    std::vector<double> cot_o(static_cast<std::size_t>(dim));
    for (int d = dim - 1; d >= 0; --d) {
      std::fill(cot_o.begin(), cot_o.end(), 0.0);
      cot_o[static_cast<std::size_t>(d)] =
          cot_u[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(d)];
      std::fill(gin.begin(), gin.end(), 0.0);
      made.net().backward(tapes[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(d)],
                          cot_o, grad, gin);
      if (l > 1)
        for (int k = 0; k < dim; ++k)
          cot_u[static_cast<std::size_t>(l - 2)][static_cast<std::size_t>(k)] +=
              gin[static_cast<std::size_t>(k)];
      for (int k = 0; k < d; ++k)
        cot_u[static_cast<std::size_t>(l - 1)][static_cast<std::size_t>(k)] +=
            gin[static_cast<std::size_t>(dim + k)];
    }
  }
  if (!model.base().frozen) {
    auto& gb = acc.group("beta", static_cast<std::size_t>(dim));
    for (int d = 0; d < dim; ++d)
      gb[static_cast<std::size_t>(d)] -=
          bernoulli_log_prob_grad(model.base().beta[static_cast<std::size_t>(d)], y[d]);
  }
  acc.samples += 1;
  return loss;
}

// One training step's worth of gradients for a single example, in descent
// convention (pass straight to Adam). objective is the ELBO sample for
// SfeFull, the sampled reward bound for SfeSpecial, and the loss for
// SteProxy.
struct StepOutput {
  double objective = 0.0;
  GradAccumulator grads;
  BaselineObservations obs;
};

inline StepOutput estimator_step(const FlowModel& model, const BitVector& x,
                                 const EstimatorConfig& cfg,
                                 const RngStream& example_stream,
                                 const BaselineBank& bank) {
  cfg.validate();
  StepOutput out;
  if (cfg.kind == EstimatorKind::SteProxy) {
    out.grads.tag = "ste";
    out.objective = ste_step(model, x, out.grads);
    return out;
  }
  const bool special = cfg.kind == EstimatorKind::SfeSpecial;
  out.grads.tag = special ? "sfe-special" : "sfe-full";
  GradAccumulator ascent;
  for (int k = 0; k < cfg.samples; ++k) {
    const RngStream ks = example_stream.derive(static_cast<std::uint64_t>(k));
    if (model.depth() == 0) {
      out.objective += base_log_prob(x, model.base());
      if (!model.base().frozen) {
        TransformSequence empty;
        empty.states.push_back(x);
        const std::vector<double> gb = grad_beta(x, empty, model.base());
        auto& g = ascent.group("beta", gb.size());
        for (std::size_t i = 0; i < gb.size(); ++i) g[i] += gb[i];
      }
      continue;
    }
    if (special) {
      const TransformSequence t = model.sample_prior_trajectory(x, ks.derive("u"));
      std::optional<TransformSequence> second;
      if (cfg.gamma_prefix > 0.0 || cfg.self_critic)
        second = model.sample_prior_trajectory(x, ks.derive("critic"));
      double obj = 0.0;
      for (double r : per_dim_rewards(x, t, model.base())) obj += r;
      out.objective += obj;
      special_case_grad(model, x, t, second ? &*second : nullptr, cfg, bank.recon,
                        ascent, &out.obs);
      if (!model.base().frozen) {
        const std::vector<double> gb = grad_beta(x, t, model.base());
        auto& g = ascent.group("beta", gb.size());
        for (std::size_t i = 0; i < gb.size(); ++i) g[i] += gb[i];
      }
    } else {
      const TransformSequence t = model.sample_posterior_trajectory(x, ks.derive("u"));
      std::optional<TransformSequence> critic;
      if (cfg.self_critic)
        critic = model.sample_posterior_trajectory(x, ks.derive("critic"));
      out.objective +=
          base_log_prob(t.output(), model.base()) + t.total_logp() - t.total_logq();
      grad_theta(model, x, t, ascent);
      grad_lambda_reconstruction(model, x, t, critic ? &*critic : nullptr, cfg,
                                 bank.recon, ascent, &out.obs);
      grad_lambda_kl(model, x, t, critic ? &*critic : nullptr, cfg, bank, ascent,
                     &out.obs);
      if (!model.base().frozen) {
        const std::vector<double> gb = grad_beta(x, t, model.base());
        auto& g = ascent.group("beta", gb.size());
        for (std::size_t i = 0; i < gb.size(); ++i) g[i] += gb[i];
      }
    }
    ascent.samples += 1;
  }
  out.objective /= cfg.samples;
  ascent.scale_all(1.0 / cfg.samples);
  out.grads.add(ascent, -1.0);  // descent
  out.grads.samples = 1;
  return out;
}

}  // namespace dnflow
