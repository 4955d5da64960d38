#pragma once

// Training loop, evaluation (importance-sampled bound and greedy NLL) and
// model sampling. Deterministic given (config, seed): sampling streams are
// keyed by (master seed, purpose, step, example index, layer), shuffles by
// epoch, and baseline updates are applied once per batch in example-index
// order, so a run resumed from a checkpoint reproduces the original
// trajectory bit-exactly.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "dnflow/checkpoint.hpp"
#include "dnflow/config.hpp"
#include "dnflow/data.hpp"
#include "dnflow/estimators.hpp"
#include "dnflow/io.hpp"
#include "dnflow/oracle.hpp"

namespace dnflow {

inline FlowModel build_model(const RunConfig& cfg) {
  cfg.validate();
  return FlowModel::build(cfg.model_config(),
                          RngStream::seeded(cfg.opt_seed).derive("init"));
}

struct LoadedData {
  BinaryDataset train;
  SyntheticDataset synthetic;  // generator populated for synthetic sources
  bool has_generator = false;
  GrayImageSet images;  // retained when per-epoch re-binarisation is on
  bool has_images = false;
};

inline LoadedData load_dataset(const RunConfig& cfg) {
  LoadedData out;
  if (cfg.data_source == "synthetic") {
    out.synthetic = synthetic_flow_dataset(
        cfg.model_dim, cfg.model_layers, cfg.data_synthetic_seed, cfg.data_synthetic_n,
        cfg.data_synthetic_hidden, cfg.data_synthetic_weight_scale,
        cfg.base_vector().front(), cfg.data_synthetic_bias_scale);
    out.train = out.synthetic.data;
    out.has_generator = true;
  } else if (cfg.data_source.rfind("idx:", 0) == 0) {
    const auto bytes = read_file_bytes(data_dir_prefixed(cfg.data_source.substr(4)));
    GrayImageSet images = parse_idx_images(bytes);
    if (cfg.data_downsample > 1) images = downsample(images, cfg.data_downsample);
    out.train = stochastic_binarize(images, cfg.data_binarize_seed);
    if (cfg.data_resample_per_epoch) {
      out.images = std::move(images);
      out.has_images = true;
    }
  } else if (cfg.data_source.rfind("bds:", 0) == 0) {
    out.train = load_bds(data_dir_prefixed(cfg.data_source.substr(4)));
  } else {
    throw contract_error("unknown data source '" + cfg.data_source + "'");
  }
  require(out.train.dim == cfg.model_dim,
          "dataset dimension " + std::to_string(out.train.dim) +
              " does not match model.dim " + std::to_string(cfg.model_dim));
  if (cfg.data_limit > 0 &&
      cfg.data_limit < static_cast<int>(out.train.examples.size()))
    out.train.examples.resize(static_cast<std::size_t>(cfg.data_limit));
  require(!out.train.examples.empty(), "dataset is empty");
  return out;
}

// exact mean data NLL under a known generator, by enumeration
inline double exact_dataset_nll(const FlowModel& generator, const BinaryDataset& ds,
                                int subset) {
  const int n = std::min<int>(subset, ds.count());
  require(n > 0, "exact_dataset_nll: empty subset");
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    total -= enumerate_marginal(generator, ds.examples[static_cast<std::size_t>(i)]);
  return total / n;
}

struct EvalResult {
  double mean_is_nll = 0.0;
  double mean_greedy_nll = 0.0;
  std::vector<double> is_nll;
  std::vector<double> greedy_nll;
};

// Importance-sampled bound: NLL_i = -log mean_k exp(log p_Y + log p - log q)
// over K posterior samples, plus the deterministic greedy NLL. Never mutates
// the model or baselines.
inline EvalResult evaluate(const FlowModel& model, const BinaryDataset& ds, int k_samples,
                           std::uint64_t seed, bool greedy = true) {
  require(k_samples >= 1, "evaluate: K must be >= 1");
  EvalResult res;
  const RngStream root = RngStream::seeded(seed).derive("eval");
  std::vector<double> logw(static_cast<std::size_t>(k_samples));
  for (int i = 0; i < ds.count(); ++i) {
    const BitVector& x = ds.examples[static_cast<std::size_t>(i)];
    const RngStream es = root.derive(static_cast<std::uint64_t>(i));
    if (model.depth() == 0) {
      res.is_nll.push_back(-base_log_prob(x, model.base()));
    } else {
      for (int k = 0; k < k_samples; ++k) {
        const TransformSequence t =
            model.sample_posterior_trajectory(x, es.derive(static_cast<std::uint64_t>(k)));
        logw[static_cast<std::size_t>(k)] = base_log_prob(t.output(), model.base()) +
                                            t.total_logp() - t.total_logq();
      }
      res.is_nll.push_back(-(log_sum_exp(logw) - std::log(static_cast<double>(k_samples))));
    }
    if (greedy)
      res.greedy_nll.push_back(
          deterministic_flow_nll(x, model.greedy_transform(x), model.base()));
  }
  for (double v : res.is_nll) res.mean_is_nll += v;
  res.mean_is_nll /= static_cast<double>(res.is_nll.size());
  if (greedy) {
    for (double v : res.greedy_nll) res.mean_greedy_nll += v;
    res.mean_greedy_nll /= static_cast<double>(res.greedy_nll.size());
  }
  return res;
}

inline void sample_images(const FlowModel& model, int n, const std::string& path,
                          std::uint64_t seed, int height, int width,
                          std::uint64_t config_hash) {
  require(height * width == model.dim(), "sample_images: grid shape mismatch");
  std::vector<BitVector> images;
  images.reserve(static_cast<std::size_t>(n));
  const RngStream root = RngStream::seeded(seed).derive("sample");
  for (int i = 0; i < n; ++i)
    images.push_back(model.ancestral_sample(root.derive(static_cast<std::uint64_t>(i))));
  char prov[64];
  std::snprintf(prov, sizeof prov, "config_hash=%016llx seed=%llu",
                static_cast<unsigned long long>(config_hash),
                static_cast<unsigned long long>(seed));
  write_bytes(path, render_pgm_grid(images, height, width, prov));
}

struct TrainOutput {
  std::string checkpoint_path;
  std::string metrics_path;
  double final_mean_objective = 0.0;
  std::uint64_t steps = 0;
};

// One training run. If resume_from is non-empty the checkpoint is loaded and
// the remaining steps are replayed; a run interrupted by a non-finite loss
// aborts after writing last_good.ckpt.
inline TrainOutput train(const RunConfig& cfg, const std::string& resume_from = "") {
  cfg.validate();
  LoadedData data = load_dataset(cfg);
  FlowModel model = build_model(cfg);

  std::map<std::string, AdamState> adam;
  for (const auto& name : model.group_names()) {
    adam[name];
    adam[name].init(name, model.group_size(name), cfg.opt_lr);
  }
  BaselineBank bank;
  bank.init(model.dim(), model.depth(), cfg.est_baseline_decay, cfg.est_variance_floor);
  std::uint64_t done_steps = 0;

  if (!resume_from.empty()) {
    const CheckpointData ck = load_checkpoint(resume_from);
    require(ck.config_text == cfg.to_text(),
            "resume: checkpoint config does not match the current config");
    restore_model(model, ck);
    adam = ck.adam;
    bank = ck.bank;
    done_steps = ck.step;
  }

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream prov(cfg.out_dir + "/dataset.txt");
    prov << data.train.provenance << "\n";
    if (data.has_generator && cfg.data_exact_nll_subset > 0)
      prov << "exact_nll(enumeration, first "
           << std::min(cfg.data_exact_nll_subset, data.train.count()) << ") = "
           << exact_dataset_nll(data.synthetic.generator, data.train,
                                cfg.data_exact_nll_subset)
           << "\n";
  }
  const std::string metrics_path = cfg.out_dir + "/metrics.csv";
  CsvWriter metrics(metrics_path, "epoch,objective,seconds", cfg.hash(), cfg.opt_seed,
                    /*append=*/!resume_from.empty());

  const EstimatorConfig est = cfg.estimator_config();
  const RngStream master = RngStream::seeded(cfg.opt_seed);
  const int n = data.train.count();
  const int batches_per_epoch = (n + cfg.opt_batch - 1) / cfg.opt_batch;
  const std::string final_path = cfg.out_dir + "/final.ckpt";

  auto save = [&](const std::string& path, std::uint64_t step) {
    save_checkpoint(path, cfg.to_text(), cfg.opt_seed, step, model, adam, bank);
  };

  std::uint64_t step = 0;
  double last_epoch_objective = 0.0;
  bool stopped = false;
  for (int epoch = 0; epoch < cfg.opt_epochs && !stopped; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (data.has_images && epoch > 0) {
      data.train = stochastic_binarize(
          data.images, cfg.data_binarize_seed + static_cast<std::uint64_t>(epoch));
      if (cfg.data_limit > 0 && cfg.data_limit < data.train.count())
        data.train.examples.resize(static_cast<std::size_t>(cfg.data_limit));
    }
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    RngStream shuffle = master.derive("shuffle").derive(static_cast<std::uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle.next_bits() % static_cast<std::uint64_t>(i + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    double epoch_objective = 0.0;
    int epoch_examples = 0;
    for (int b = 0; b < batches_per_epoch && !stopped; ++b, ++step) {
      if (step < done_steps) continue;  // replayed on resume
      const int lo = b * cfg.opt_batch;
      const int hi = std::min(n, lo + cfg.opt_batch);
      GradAccumulator batch_grads;
      std::vector<BaselineObservations> obs(static_cast<std::size_t>(hi - lo));
      const RngStream step_stream = master.derive("train").derive(step);
      for (int i = lo; i < hi; ++i) {
        const int ex = order[static_cast<std::size_t>(i)];
        StepOutput so = estimator_step(model, data.train.examples[static_cast<std::size_t>(ex)],
                                       est, step_stream.derive(static_cast<std::uint64_t>(ex)),
                                       bank);
        epoch_objective += so.objective;
        ++epoch_examples;
        batch_grads.add(so.grads, 1.0 / (hi - lo));
        obs[static_cast<std::size_t>(i - lo)] = std::move(so.obs);
      }
      for (const auto& o : obs) o.apply(bank);
      try {
        for (auto& [name, st] : adam) {
          std::vector<double> params(model.group_size(name));
          model.copy_group(name, params);
          adam_step(params, batch_grads.group(name, params.size()), st);
          model.set_group(name, params);
        }
      } catch (const numeric_error&) {
        save(cfg.out_dir + "/last_good.ckpt", step);
        throw;
      }
      if (cfg.opt_max_steps > 0 &&
          step + 1 >= done_steps + static_cast<std::uint64_t>(cfg.opt_max_steps))
        stopped = true;
    }
    if (epoch_examples > 0) {
      last_epoch_objective = epoch_objective / epoch_examples;
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      metrics.row(epoch, last_epoch_objective, secs);
    }
    if (cfg.opt_ckpt_every > 0 && (epoch + 1) % cfg.opt_ckpt_every == 0)
      save(cfg.out_dir + "/epoch_" + std::to_string(epoch + 1) + ".ckpt", step);
  }
  save(final_path, step);
  return TrainOutput{final_path, metrics_path, last_epoch_objective, step};
}

// Multi-run wrapper: trains opt.runs models with seeds seed, seed+1, ... and
// reports each run's evaluation; callers keep the minimum NLL.
struct RunSummary {
  std::vector<TrainOutput> runs;
  std::vector<double> is_nll;
  std::vector<double> greedy_nll;
  int best_run = 0;
};

inline RunSummary train_runs(const RunConfig& base_cfg) {
  RunSummary summary;
  for (int r = 0; r < base_cfg.opt_runs; ++r) {
    RunConfig cfg = base_cfg;
    cfg.opt_seed = base_cfg.opt_seed + static_cast<std::uint64_t>(r);
    cfg.opt_runs = 1;
    if (base_cfg.opt_runs > 1) cfg.out_dir = base_cfg.out_dir + "/run" + std::to_string(r);
    summary.runs.push_back(train(cfg));
    const CheckpointData ck = load_checkpoint(summary.runs.back().checkpoint_path);
    FlowModel model = build_model(cfg);
    restore_model(model, ck);
    const LoadedData data = load_dataset(cfg);
    const EvalResult ev =
        evaluate(model, data.train, cfg.eval_samples, cfg.opt_seed, cfg.eval_greedy);
    summary.is_nll.push_back(ev.mean_is_nll);
    summary.greedy_nll.push_back(cfg.eval_greedy ? ev.mean_greedy_nll : 0.0);
    if (ev.mean_is_nll < summary.is_nll[static_cast<std::size_t>(summary.best_run)])
      summary.best_run = r;
  }
  return summary;
}

}  // namespace dnflow
