// dnflow command line: train / evaluate / sample / check / bench.
//
// Every configuration key is available both in the key = value config file
// (--config) and as a flag (--model-dim, --est-kind, ...); flags override the
// file. DNFLOW_DATA_DIR prefixes relative data paths, DNFLOW_THREADS sets the
// enumeration worker count.

#include <CLI11.hpp>
#include <iostream>
#include <map>

#include "dnflow/checks.hpp"
#include "dnflow/trainer.hpp"

namespace {

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (char& c : f)
    if (c == '.' || c == '_') c = '-';
  return f;
}

void add_config_flags(CLI::App* app, std::map<std::string, std::string>& overrides) {
  for (const auto& [key, doc] : dnflow::RunConfig::key_docs()) {
    const std::string k = key;
    app->add_option_function<std::string>(
           flag_name(key),
           [&overrides, k](const std::string& v) { overrides[k] = v; }, doc)
        ->type_name("VALUE");
  }
}

dnflow::RunConfig resolve_config(const std::string& config_path,
                                 const std::map<std::string, std::string>& overrides) {
  dnflow::RunConfig cfg;
  if (!config_path.empty()) cfg.load_file(config_path);
  for (const auto& [k, v] : overrides) cfg.apply(k, v);
  cfg.validate();
  return cfg;
}

int grid_side(int dim) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
  return s * s == dim ? s : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"discrete normalising flows over binary vectors with latent XOR transformations"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::string> overrides;

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model per the run configuration");
  std::string resume_path;
  train_cmd->add_option("--config", config_path, "key = value configuration file");
  train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
  add_config_flags(train_cmd, overrides);

  // evaluate
  auto* eval_cmd = app.add_subcommand(
      "evaluate", "importance-sampled bound and greedy NLL of a checkpoint");
  std::string eval_ckpt, eval_out = "eval.csv";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--config", config_path, "configuration overrides file");
  eval_cmd->add_option("--out", eval_out, "per-example CSV output");
  add_config_flags(eval_cmd, overrides);

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "draw model samples into a PGM grid");
  std::string sample_ckpt, sample_out = "samples.pgm";
  int sample_n = 100, sample_h = 0, sample_w = 0;
  std::uint64_t sample_seed = 0;
  sample_cmd->add_option("--checkpoint", sample_ckpt, "checkpoint file")->required();
  sample_cmd->add_option("--n", sample_n, "number of samples");
  sample_cmd->add_option("--out", sample_out, "output PGM path");
  sample_cmd->add_option("--height", sample_h, "image height (default: square)");
  sample_cmd->add_option("--width", sample_w, "image width (default: square)");
  sample_cmd->add_option("--seed", sample_seed, "sampling seed");

  // check
  auto* check_cmd = app.add_subcommand("check", "run the acceptance suites");
  dnflow::CheckBudgets budgets;
  bool skip_learning = false;
  check_cmd->add_option("--seed", budgets.seed, "suite seed");
  check_cmd->add_option("--unbiased-n", budgets.unbiased_n,
                        "samples per unbiasedness z-test");
  check_cmd->add_option("--variance-n", budgets.variance_n,
                        "samples per variance benchmark");
  check_cmd->add_option("--artifacts", budgets.artifact_dir, "artifact directory");
  check_cmd->add_flag("--skip-learning", skip_learning,
                      "skip the desk-scale learning criterion");

  // bench
  auto* bench_cmd =
      app.add_subcommand("bench", "estimator bias/variance against enumeration");
  std::string bench_target = "recon", bench_out = "bench.csv";
  int bench_dim = 4, bench_depth = 1;
  std::uint64_t bench_n = 100000, bench_seed = 0;
  bool bench_critic = false;
  double bench_gamma_prefix = 0.0;
  bench_cmd->add_option("--target", bench_target,
                        "recon | kl | elbo | theta | special | beta | ste");
  bench_cmd->add_option("--n", bench_n, "single-sample estimates");
  bench_cmd->add_option("--dim", bench_dim, "data dimension (enumerable)");
  bench_cmd->add_option("--depth", bench_depth, "flow depth");
  bench_cmd->add_option("--seed", bench_seed, "problem seed");
  bench_cmd->add_flag("--critic", bench_critic, "enable the self-critic");
  bench_cmd->add_option("--gamma-prefix", bench_gamma_prefix,
                        "special-case prefix term scale");
  bench_cmd->add_option("--out", bench_out, "CSV output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const dnflow::RunConfig cfg = resolve_config(config_path, overrides);
      try {
        const dnflow::TrainOutput out = dnflow::train(cfg, resume_path);
        std::cout << "checkpoint: " << out.checkpoint_path
                  << "\nmetrics: " << out.metrics_path
                  << "\nfinal objective: " << out.final_mean_objective
                  << "\nsteps: " << out.steps << "\n";
        if (cfg.opt_runs > 1) {
          const dnflow::RunSummary s = dnflow::train_runs(cfg);
          double best_is = s.is_nll[static_cast<std::size_t>(s.best_run)];
          std::cout << "runs: " << cfg.opt_runs << ", best IS NLL " << best_is
                    << " (run " << s.best_run << ")\n";
        }
      } catch (const dnflow::numeric_error& e) {
        std::cerr << "training aborted on a non-finite loss: " << e.what()
                  << "\nlast good state: " << cfg.out_dir << "/last_good.ckpt\n";
        return 3;
      }
      return 0;
    }

    if (*eval_cmd) {
      const dnflow::CheckpointData ck = dnflow::load_checkpoint(eval_ckpt);
      dnflow::RunConfig cfg;
      cfg.load_text(ck.config_text, eval_ckpt);
      for (const auto& [k, v] : overrides) cfg.apply(k, v);
      if (!config_path.empty()) {
        dnflow::RunConfig file_cfg;
        file_cfg.load_file(config_path);
        cfg.eval_samples = file_cfg.eval_samples;
        cfg.eval_greedy = file_cfg.eval_greedy;
      }
      cfg.validate();
      dnflow::FlowModel model = dnflow::build_model(cfg);
      dnflow::restore_model(model, ck);
      const dnflow::LoadedData data = dnflow::load_dataset(cfg);
      const dnflow::EvalResult res = dnflow::evaluate(
          model, data.train, cfg.eval_samples, cfg.opt_seed, cfg.eval_greedy);
      dnflow::CsvWriter csv(eval_out, "example,is_nll,greedy_nll", cfg.hash(),
                            cfg.opt_seed);
      for (std::size_t i = 0; i < res.is_nll.size(); ++i)
        csv.row(i, res.is_nll[i], cfg.eval_greedy ? res.greedy_nll[i] : 0.0);
      std::cout << "examples: " << res.is_nll.size() << "\nIS-" << cfg.eval_samples
                << " NLL: " << res.mean_is_nll << "\n";
      if (cfg.eval_greedy) std::cout << "greedy NLL: " << res.mean_greedy_nll << "\n";
      std::cout << "per-example CSV: " << eval_out << "\n";
      return 0;
    }

    if (*sample_cmd) {
      const dnflow::CheckpointData ck = dnflow::load_checkpoint(sample_ckpt);
      dnflow::RunConfig cfg;
      cfg.load_text(ck.config_text, sample_ckpt);
      dnflow::FlowModel model = dnflow::build_model(cfg);
      dnflow::restore_model(model, ck);
      int h = sample_h, w = sample_w;
      if (h == 0 || w == 0) {
        const int side = grid_side(model.dim());
        dnflow::require(side > 0,
                        "model dimension is not square; pass --height and --width");
        h = w = side;
      }
      dnflow::sample_images(model, sample_n, sample_out, sample_seed, h, w, cfg.hash());
      std::cout << "wrote " << sample_n << " samples to " << sample_out << "\n";
      return 0;
    }

    if (*check_cmd) {
      budgets.run_learning = !skip_learning;
      const auto results = dnflow::run_acceptance(budgets);
      const int failures = dnflow::print_acceptance(results, std::cout);
      std::cout << "artifacts: " << budgets.artifact_dir << "\n";
      return failures == 0 ? 0 : 1;
    }

    if (*bench_cmd) {
      using dnflow::BenchTarget;
      const std::map<std::string, BenchTarget> targets{
          {"recon", BenchTarget::ReconLambda}, {"kl", BenchTarget::KlLambda},
          {"elbo", BenchTarget::ElboLambda},   {"theta", BenchTarget::ThetaScore},
          {"special", BenchTarget::SpecialTheta}, {"beta", BenchTarget::Beta},
          {"ste", BenchTarget::SteTheta}};
      const auto it = targets.find(bench_target);
      dnflow::require(it != targets.end(), "unknown bench target " + bench_target);
      const bool tied = it->second == BenchTarget::SpecialTheta ||
                        it->second == BenchTarget::SteTheta;
      dnflow::FlowModel m = dnflow::checks_detail::random_model(
          bench_dim, bench_depth, bench_seed * 101 + 7, tied);
      dnflow::RngStream rng = dnflow::RngStream::seeded(bench_seed).derive("bench-x");
      dnflow::BitVector x(bench_dim);
      for (int d = 0; d < bench_dim; ++d) x[d] = rng.next_bernoulli(0.5);
      dnflow::EstimatorConfig est;
      est.self_critic = bench_critic;
      est.gamma_prefix = bench_gamma_prefix;
      const dnflow::BiasVarianceReport rep = dnflow::bench_estimator(
          m, x, est, it->second, bench_n, dnflow::RngStream::seeded(bench_seed + 1));
      std::ofstream os(bench_out);
      rep.write_csv(os);
      std::cout << "target " << bench_target << ": max |z| = " << rep.max_abs_z()
                << ", mean variance = " << rep.mean_variance() << ", n = " << bench_n
                << "\nCSV: " << bench_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
