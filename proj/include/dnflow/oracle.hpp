#pragma once

// Ground-truth machinery: exhaustive enumeration of the transform space for
// exact marginals, ELBOs, KLs and gradients; central finite differences; and
// estimator bias/variance benchmarking against the enumerated references.
//
// Everything here is 64-bit and sampling-free except bench_estimator, whose
// whole point is to draw estimator samples and compare them to enumeration.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "dnflow/estimators.hpp"
#include "dnflow/model.hpp"

namespace dnflow {

inline constexpr int kDefaultEnumBudgetExp = 22;

inline void check_enumeration_budget(const FlowModel& model, int budget_exp) {
  const int bits = model.dim() * model.depth();
  if (bits > budget_exp)
    throw contract_error(
        "enumeration refused: requires 2^" + std::to_string(bits) +
        " joint configurations, budget is 2^" + std::to_string(budget_exp));
}

namespace detail {

// Splits joint index bits into per-layer transforms and scores them.
struct JointConfig {
  std::vector<BitVector> u;
  std::vector<std::vector<double>> logp, logq;
  double total_logp = 0.0, total_logq = 0.0, reward = 0.0;
  BitVector y;
};

inline JointConfig score_joint(const FlowModel& model, const BitVector& x,
                               std::uint64_t joint) {
  const int dim = model.dim();
  JointConfig c;
  BitVector prev = x;
  BitVector y = x;
  for (int l = 1; l <= model.depth(); ++l) {
    BitVector u = BitVector::from_index(joint >> (dim * (l - 1)), dim);
    std::vector<double> lp, lq;
    c.total_logp += model.made(l).log_prob(prev, u, &lp);
    if (model.tied()) {
      lq = lp;
      c.total_logq = c.total_logp;
    } else {
      c.total_logq += model.post(l).log_prob(prev, u, &lq);
    }
    y = xor_transform(y, u);
    prev = u;
    c.u.push_back(std::move(u));
    c.logp.push_back(std::move(lp));
    c.logq.push_back(std::move(lq));
  }
  c.y = y;
  c.reward = base_log_prob(y, model.base());
  return c;
}

}  // namespace detail

// Exact log p_X(x) = log sum_u p_Y(t^{-1}(x;u)) p(u|x), in log space.
inline double enumerate_marginal(const FlowModel& model, const BitVector& x,
                                 int budget_exp = kDefaultEnumBudgetExp) {
  check_enumeration_budget(model, budget_exp);
  const std::uint64_t total = 1ULL << (model.dim() * model.depth());
  double acc = -std::numeric_limits<double>::infinity();
  for (std::uint64_t j = 0; j < total; ++j) {
    const auto c = detail::score_joint(model, x, j);
    acc = log_sum_exp(acc, c.total_logp + c.reward);
  }
  return acc;
}

struct EnumerationReport {
  double log_marginal = 0.0;
  double elbo = 0.0;
  double kl = 0.0;      // KL(q(.|x) || p(.|x))
  double gap = 0.0;     // log p_X(x) - ELBO = KL(q || true posterior)
  std::uint64_t enumeration_size = 0;
  double seconds = 0.0;
  // exact gradients, keyed by parameter group
  std::map<std::string, std::vector<double>> grad_elbo;     // beta, theta.*, lambda.*
  std::map<std::string, std::vector<double>> grad_recon;    // lambda.* of E_q[reward]
  std::map<std::string, std::vector<double>> grad_neg_kl;   // lambda.* of -KL
  std::map<std::string, std::vector<double>> grad_special;  // theta.* of E_p[reward]

  void write_csv(std::ostream& os) const {
    os << "context,coord,value\n";
    os << "scalar,log_marginal," << log_marginal << "\n";
    os << "scalar,elbo," << elbo << "\n";
    os << "scalar,kl," << kl << "\n";
    os << "scalar,gap," << gap << "\n";
    os << "scalar,enumeration_size," << enumeration_size << "\n";
    os << "scalar,seconds," << seconds << "\n";
    auto dump = [&os](const char* ctx,
                      const std::map<std::string, std::vector<double>>& grads) {
      for (const auto& [group, g] : grads)
        for (std::size_t i = 0; i < g.size(); ++i)
          os << ctx << ',' << group << '[' << i << "]," << g[i] << '\n';
    };
    dump("grad_elbo", grad_elbo);
    dump("grad_recon", grad_recon);
    dump("grad_neg_kl", grad_neg_kl);
    dump("grad_special", grad_special);
  }
};

// Exact ELBO, KL, marginal and every gradient the estimators module targets,
// by summing over all 2^(L*D) transform sequences.
inline EnumerationReport enumerate_all(const FlowModel& model, const BitVector& x,
                                       int budget_exp = kDefaultEnumBudgetExp) {
  check_enumeration_budget(model, budget_exp);
  const auto t0 = std::chrono::steady_clock::now();
  const int dim = model.dim();
  const int depth = model.depth();
  const std::uint64_t total = 1ULL << (dim * depth);

  EnumerationReport rep;
  rep.enumeration_size = total;
  double lse = -std::numeric_limits<double>::infinity();
  for (int l = 1; l <= depth; ++l) {
    const std::string tn = "theta." + std::to_string(l);
    rep.grad_elbo[tn].assign(model.group_size(tn), 0.0);
    rep.grad_special[tn].assign(model.group_size(tn), 0.0);
    if (!model.tied()) {
      const std::string ln = "lambda." + std::to_string(l);
      rep.grad_elbo[ln].assign(model.group_size(ln), 0.0);
      rep.grad_recon[ln].assign(model.group_size(ln), 0.0);
      rep.grad_neg_kl[ln].assign(model.group_size(ln), 0.0);
    }
  }
  rep.grad_elbo["beta"].assign(static_cast<std::size_t>(dim), 0.0);

  std::vector<double> score_buf;
  for (std::uint64_t j = 0; j < total; ++j) {
    const auto c = detail::score_joint(model, x, j);
    const double q = std::exp(c.total_logq);
    const double p = std::exp(c.total_logp);
    lse = log_sum_exp(lse, c.total_logp + c.reward);
    rep.elbo += q * (c.reward + c.total_logp - c.total_logq);
    rep.kl += q * (c.total_logq - c.total_logp);

    const std::vector<double> ones(static_cast<std::size_t>(dim), 1.0);
    for (int l = 1; l <= depth; ++l) {
      const BitVector& cond = l == 1 ? x : c.u[static_cast<std::size_t>(l - 2)];
      const BitVector& u = c.u[static_cast<std::size_t>(l - 1)];
      const std::string tn = "theta." + std::to_string(l);
      score_buf.assign(model.group_size(tn), 0.0);
      model.made(l).accumulate_weighted_score(cond, u, ones, score_buf);
      auto& ge = rep.grad_elbo[tn];
      auto& gs = rep.grad_special[tn];
      for (std::size_t i = 0; i < score_buf.size(); ++i) {
        ge[i] += q * score_buf[i];
        gs[i] += p * c.reward * score_buf[i];
      }
      if (!model.tied()) {
        const std::string ln = "lambda." + std::to_string(l);
        score_buf.assign(model.group_size(ln), 0.0);
        model.post(l).accumulate_weighted_score(cond, u, ones, score_buf);
        const double w_elbo = q * (c.reward + c.total_logp - c.total_logq);
        const double w_recon = q * c.reward;
        const double w_negkl = q * (c.total_logp - c.total_logq);
        auto& gle = rep.grad_elbo[ln];
        auto& glr = rep.grad_recon[ln];
        auto& glk = rep.grad_neg_kl[ln];
        for (std::size_t i = 0; i < score_buf.size(); ++i) {
          gle[i] += w_elbo * score_buf[i];
          glr[i] += w_recon * score_buf[i];
          glk[i] += w_negkl * score_buf[i];
        }
      }
    }
    auto& gb = rep.grad_elbo["beta"];
    for (int d = 0; d < dim; ++d)
      gb[static_cast<std::size_t>(d)] +=
          q * bernoulli_log_prob_grad(model.base().beta[static_cast<std::size_t>(d)],
                                      c.y[d]);
  }
  rep.log_marginal = lse;
  rep.gap = rep.log_marginal - rep.elbo;
  // with q := p the bound is E_p[reward], whose theta gradient is the
  // reward-weighted score; the plain expected score integrates to zero
  if (model.tied())
    for (int l = 1; l <= depth; ++l) {
      const std::string tn = "theta." + std::to_string(l);
      rep.grad_elbo[tn] = rep.grad_special[tn];
    }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Exact ELBO and bound gap only (cheaper call for bound-validity sweeps).
inline EnumerationReport enumerate_elbo(const FlowModel& model, const BitVector& x,
                                        int budget_exp = kDefaultEnumBudgetExp) {
  check_enumeration_budget(model, budget_exp);
  EnumerationReport rep;
  rep.enumeration_size = 1ULL << (model.dim() * model.depth());
  double lse = -std::numeric_limits<double>::infinity();
  for (std::uint64_t j = 0; j < rep.enumeration_size; ++j) {
    const auto c = detail::score_joint(model, x, j);
    const double q = std::exp(c.total_logq);
    lse = log_sum_exp(lse, c.total_logp + c.reward);
    rep.elbo += q * (c.reward + c.total_logp - c.total_logq);
    rep.kl += q * (c.total_logq - c.total_logp);
  }
  rep.log_marginal = lse;
  rep.gap = rep.log_marginal - rep.elbo;
  return rep;
}

inline int env_thread_count() {
  if (const char* v = std::getenv("DNFLOW_THREADS")) {
    const int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 1;
}

// sum_x exp(log p_X(x)) by double enumeration, striped over x with the
// partial sums merged in stripe order.
inline double sum_marginal_over_x(const FlowModel& model,
                                  int budget_exp = kDefaultEnumBudgetExp) {
  check_enumeration_budget(model, budget_exp);
  require(model.dim() <= 24, "sum_marginal_over_x: data dimension too large");
  const std::uint64_t nx = 1ULL << model.dim();
  const int threads = std::min<std::uint64_t>(env_thread_count(), nx);
  std::vector<double> partial(static_cast<std::size_t>(threads), 0.0);
  auto work = [&](int t) {
    const std::uint64_t lo = nx * t / threads, hi = nx * (t + 1) / threads;
    double s = 0.0;
    for (std::uint64_t ix = lo; ix < hi; ++ix)
      s += std::exp(enumerate_marginal(model, BitVector::from_index(ix, model.dim()),
                                       budget_exp));
    partial[static_cast<std::size_t>(t)] = s;
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

// Central finite differences of a scalar function of a parameter vector.
inline std::vector<double> finite_diff(
    const std::function<double(std::span<const double>)>& fn,
    std::vector<double> params, double h = 1e-5) {
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = fn(params);
    params[i] = keep - h;
    const double down = fn(params);
    params[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Central finite differences w.r.t. one named parameter group of a model.
inline std::vector<double> finite_diff_group(
    FlowModel& model, const std::string& group,
    const std::function<double(const FlowModel&)>& fn, double h = 1e-5) {
  std::vector<double> params(model.group_size(group));
  model.copy_group(group, params);
  const std::vector<double> keep = params;
  auto eval = [&](std::span<const double> p) {
    model.set_group(group, p);
    return fn(model);
  };
  std::vector<double> g = finite_diff(eval, params, h);
  model.set_group(group, keep);
  return g;
}

// --- estimator bias/variance benchmarking --------------------------------

enum class BenchTarget {
  ReconLambda,   // grad_lambda_reconstruction vs grad_recon
  KlLambda,      // grad_lambda_kl vs grad_neg_kl
  ElboLambda,    // recon + kl vs grad_elbo lambda
  ThetaScore,    // grad_theta vs grad_elbo theta
  SpecialTheta,  // special_case_grad vs grad_special
  Beta,          // grad_beta vs grad_elbo beta
  SteTheta       // ste ascent (-loss gradient) vs grad_elbo theta
};

inline std::string bench_target_name(BenchTarget t) {
  switch (t) {
    case BenchTarget::ReconLambda: return "recon-lambda";
    case BenchTarget::KlLambda: return "kl-lambda";
    case BenchTarget::ElboLambda: return "elbo-lambda";
    case BenchTarget::ThetaScore: return "theta-score";
    case BenchTarget::SpecialTheta: return "special-theta";
    case BenchTarget::Beta: return "beta";
    case BenchTarget::SteTheta: return "ste-theta";
  }
  return "?";
}

struct BiasVarianceRow {
  std::string coord;
  double mean = 0.0, se = 0.0, exact = 0.0, z = 0.0, var = 0.0;
};

struct BiasVarianceReport {
  std::string estimator;
  std::uint64_t n = 0;
  std::vector<BiasVarianceRow> rows;

  double max_abs_z() const {
    double m = 0.0;
    for (const auto& r : rows) m = std::max(m, std::abs(r.z));
    return m;
  }
  double mean_variance() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.var;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }
  double mean_abs_bias() const {
    double s = 0.0;
    for (const auto& r : rows) s += std::abs(r.mean - r.exact);
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
  }

  void write_csv(std::ostream& os) const {
    os << "estimator,coord,mean,se,exact,z,var,n\n";
    for (const auto& r : rows) {
      os << estimator << ',' << r.coord << ',' << r.mean << ',' << r.se << ','
         << r.exact << ',' << r.z << ',' << r.var << ',' << n << '\n';
    }
  }
};

// Runs n independent single-sample estimates of the targeted gradient and
// compares per-coordinate means against enumeration. Baseline states stay at
// their fresh values throughout (constant baselines keep the mean intact).
inline BiasVarianceReport bench_estimator(const FlowModel& model, const BitVector& x,
                                          const EstimatorConfig& cfg, BenchTarget target,
                                          std::uint64_t n, const RngStream& stream,
                                          const EnumerationReport* precomputed = nullptr) {
  EnumerationReport local;
  const EnumerationReport& ref = precomputed ? *precomputed : (local = enumerate_all(model, x), local);

  std::vector<std::string> groups;
  const bool lambda_target = target == BenchTarget::ReconLambda ||
                             target == BenchTarget::KlLambda ||
                             target == BenchTarget::ElboLambda;
  if (lambda_target)
    for (int l = 1; l <= model.depth(); ++l) groups.push_back("lambda." + std::to_string(l));
  else if (target == BenchTarget::Beta)
    groups.push_back("beta");
  else
    for (int l = 1; l <= model.depth(); ++l) groups.push_back("theta." + std::to_string(l));

  const std::map<std::string, std::vector<double>>* exact = nullptr;
  switch (target) {
    case BenchTarget::ReconLambda: exact = &ref.grad_recon; break;
    case BenchTarget::KlLambda: exact = &ref.grad_neg_kl; break;
    case BenchTarget::ElboLambda: exact = &ref.grad_elbo; break;
    case BenchTarget::ThetaScore: exact = &ref.grad_elbo; break;
    case BenchTarget::SpecialTheta: exact = &ref.grad_special; break;
    case BenchTarget::Beta: exact = &ref.grad_elbo; break;
    case BenchTarget::SteTheta: exact = &ref.grad_elbo; break;
  }

  std::size_t total_coords = 0;
  for (const auto& g : groups) total_coords += model.group_size(g);
  std::vector<double> sum(total_coords, 0.0), sumsq(total_coords, 0.0);

  BaselineBank bank;
  bank.init(model.dim(), model.depth());

  for (std::uint64_t i = 0; i < n; ++i) {
    const RngStream s = stream.derive(i);
    GradAccumulator acc;
    if (target == BenchTarget::SteTheta) {
      const double loss = ste_step(model, x, acc);
      (void)loss;
      acc.scale_all(-1.0);  // ascent convention for comparability
    } else if (target == BenchTarget::SpecialTheta) {
      const TransformSequence t = model.sample_prior_trajectory(x, s.derive("u"));
      std::optional<TransformSequence> second;
      if (cfg.gamma_prefix > 0.0 || cfg.self_critic)
        second = model.sample_prior_trajectory(x, s.derive("critic"));
      special_case_grad(model, x, t, second ? &*second : nullptr, cfg, bank.recon, acc);
    } else {
      const TransformSequence t = model.sample_posterior_trajectory(x, s.derive("u"));
      std::optional<TransformSequence> critic;
      if (cfg.self_critic)
        critic = model.sample_posterior_trajectory(x, s.derive("critic"));
      switch (target) {
        case BenchTarget::ReconLambda:
          grad_lambda_reconstruction(model, x, t, critic ? &*critic : nullptr, cfg,
                                     bank.recon, acc);
          break;
        case BenchTarget::KlLambda:
          grad_lambda_kl(model, x, t, critic ? &*critic : nullptr, cfg, bank, acc);
          break;
        case BenchTarget::ElboLambda:
          grad_lambda_reconstruction(model, x, t, critic ? &*critic : nullptr, cfg,
                                     bank.recon, acc);
          grad_lambda_kl(model, x, t, critic ? &*critic : nullptr, cfg, bank, acc);
          break;
        case BenchTarget::ThetaScore:
          grad_theta(model, x, t, acc);
          break;
        case BenchTarget::Beta: {
          const std::vector<double> gb = grad_beta(x, t, model.base());
          auto& g = acc.group("beta", gb.size());
          for (std::size_t j = 0; j < gb.size(); ++j) g[j] += gb[j];
          break;
        }
        default:
          break;
      }
    }
    std::size_t off = 0;
    for (const auto& gname : groups) {
      const std::size_t gs = model.group_size(gname);
      const auto it = acc.groups.find(gname);
      for (std::size_t j = 0; j < gs; ++j) {
        const double v = it == acc.groups.end() ? 0.0 : it->second[j];
        sum[off + j] += v;
        sumsq[off + j] += v * v;
      }
      off += gs;
    }
  }

  BiasVarianceReport rep;
  rep.estimator = bench_target_name(target);
  rep.n = n;
  std::size_t off = 0;
  for (const auto& gname : groups) {
    const std::size_t gs = model.group_size(gname);
    const auto eit = exact->find(gname);
    require(eit != exact->end(), "bench_estimator: no exact reference for " + gname);
    for (std::size_t j = 0; j < gs; ++j) {
      BiasVarianceRow row;
      row.coord = gname + "[" + std::to_string(j) + "]";
      row.mean = sum[off + j] / static_cast<double>(n);
      row.var = n > 1 ? std::max(0.0, (sumsq[off + j] - static_cast<double>(n) * row.mean * row.mean) /
                                          static_cast<double>(n - 1))
                      : 0.0;
      row.se = std::sqrt(row.var / static_cast<double>(n));
      row.exact = eit->second[j];
      const double diff = row.mean - row.exact;
      if (row.se > 1e-300)
        row.z = diff / row.se;
      else
        row.z = std::abs(diff) < 1e-9 ? 0.0 : 1e9;  // degenerate but finite
      rep.rows.push_back(std::move(row));
    }
    off += gs;
  }
  return rep;
}

}  // namespace dnflow
