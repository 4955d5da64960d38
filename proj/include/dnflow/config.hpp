#pragma once

// Run configuration: flat "key = value" UTF-8 files, every key also reachable
// as a CLI flag (CLI overrides file). The canonical serialized text is
// embedded verbatim in checkpoints and hashed into every output for
// provenance.

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dnflow/estimators.hpp"
#include "dnflow/model.hpp"

namespace dnflow {

struct RunConfig {
  // model
  int model_dim = 16;
  int model_layers = 1;
  std::vector<int> model_hidden = {512};
  std::vector<int> model_posterior_hidden = {512};
  std::string model_cond = "prefix";  // prefix | full
  std::string model_base = "0.1";     // scalar, comma list, or @file
  bool model_base_trainable = false;
  std::uint64_t model_ordering_seed = 0;  // 0 = natural order
  // estimator
  std::string est_kind = "sfe-special";  // ste | sfe-full | sfe-special
  bool est_self_critic = false;
  std::string est_baseline = "none";  // none | centre | standardise
  std::string est_pairing = "perdim";  // perdim | summed
  double est_gamma_kl = 1.0;
  double est_gamma_prefix = 0.0;
  int est_samples = 1;
  double est_baseline_decay = 0.9;
  double est_variance_floor = 1.0;
  // optimisation
  double opt_lr = 1e-3;
  int opt_batch = 128;
  int opt_epochs = 50;
  std::uint64_t opt_seed = 0;
  long opt_max_steps = 0;  // 0 = no step cap
  int opt_ckpt_every = 0;  // epochs between checkpoints; 0 = final only
  int opt_runs = 1;
  // data
  std::string data_source = "synthetic";  // synthetic | idx:<path> | bds:<path>
  int data_limit = 0;
  std::uint64_t data_binarize_seed = 1;
  int data_downsample = 1;
  bool data_resample_per_epoch = false;
  int data_synthetic_n = 2000;
  std::uint64_t data_synthetic_seed = 7;
  std::vector<int> data_synthetic_hidden = {32};
  double data_synthetic_weight_scale = 2.0;
  double data_synthetic_bias_scale = 0.0;
  int data_exact_nll_subset = 0;
  // evaluation
  int eval_samples = 1000;
  bool eval_greedy = true;
  // output
  std::string out_dir = "out";

  static const std::vector<std::pair<std::string, std::string>>& key_docs() {
    static const std::vector<std::pair<std::string, std::string>> docs = {
        {"model.dim", "data dimension D"},
        {"model.layers", "flow depth L (0 = base only)"},
        {"model.hidden", "generative conditioner hidden sizes, comma separated"},
        {"model.posterior_hidden", "posterior conditioner hidden sizes"},
        {"model.cond", "conditioning connectivity: prefix | full"},
        {"model.base", "base Bernoulli p(1): scalar, comma list, or @file"},
        {"model.base_trainable", "unfreeze the base parameters"},
        {"model.ordering_seed", "autoregressive ordering permutation seed (0 = natural)"},
        {"est.kind", "estimator: ste | sfe-full | sfe-special"},
        {"est.self_critic", "subtract an independent-sample critic"},
        {"est.baseline", "moving baseline: none | centre | standardise"},
        {"est.pairing", "signal/score pairing: perdim | summed"},
        {"est.gamma_kl", "scale of the next-layer KL score term"},
        {"est.gamma_prefix", "scale of the special-case prefix term"},
        {"est.samples", "posterior samples per example per step"},
        {"est.baseline_decay", "moving baseline EMA decay"},
        {"est.variance_floor", "moving std floor"},
        {"opt.lr", "Adam learning rate"},
        {"opt.batch", "batch size"},
        {"opt.epochs", "training epochs"},
        {"opt.seed", "master seed"},
        {"opt.max_steps", "stop after this many optimiser steps (0 = off)"},
        {"opt.ckpt_every", "checkpoint every N epochs (0 = final only)"},
        {"opt.runs", "independent runs; the minimum final NLL is reported"},
        {"data.source", "synthetic | idx:<images file> | bds:<cache file>"},
        {"data.limit", "truncate the dataset to N examples (0 = all)"},
        {"data.binarize_seed", "stochastic binarisation seed"},
        {"data.downsample", "block-mean downsample factor"},
        {"data.resample_per_epoch", "re-binarise every epoch"},
        {"data.synthetic_n", "synthetic dataset size"},
        {"data.synthetic_seed", "synthetic generator seed"},
        {"data.synthetic_hidden", "synthetic generator hidden sizes"},
        {"data.synthetic_weight_scale", "synthetic generator weight scale"},
        {"data.synthetic_bias_scale", "synthetic generator bias scale (0 = zero biases)"},
        {"data.exact_nll_subset", "examples for exact data NLL by enumeration (0 = skip)"},
        {"eval.samples", "importance samples per example (K)"},
        {"eval.greedy", "also report the deterministic greedy NLL"},
        {"out.dir", "output directory"},
    };
    return docs;
  }

  void apply(const std::string& key, const std::string& value) {
    auto to_bool = [&](const std::string& v) {
      if (v == "true" || v == "1" || v == "on") return true;
      if (v == "false" || v == "0" || v == "off") return false;
      throw contract_error("config: bad boolean for " + key + ": " + v);
    };
    auto to_ints = [&](const std::string& v) {
      std::vector<int> out;
      std::stringstream ss(v);
      std::string tok;
      while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
      require(!out.empty(), "config: empty list for " + key);
      return out;
    };
    if (key == "model.dim") model_dim = std::stoi(value);
    else if (key == "model.layers") model_layers = std::stoi(value);
    else if (key == "model.hidden") model_hidden = to_ints(value);
    else if (key == "model.posterior_hidden") model_posterior_hidden = to_ints(value);
    else if (key == "model.cond") model_cond = value;
    else if (key == "model.base") model_base = value;
    else if (key == "model.base_trainable") model_base_trainable = to_bool(value);
    else if (key == "model.ordering_seed") model_ordering_seed = std::stoull(value);
    else if (key == "est.kind") est_kind = value;
    else if (key == "est.self_critic") est_self_critic = to_bool(value);
    else if (key == "est.baseline") est_baseline = value;
    else if (key == "est.pairing") est_pairing = value;
    else if (key == "est.gamma_kl") est_gamma_kl = std::stod(value);
    else if (key == "est.gamma_prefix") est_gamma_prefix = std::stod(value);
    else if (key == "est.samples") est_samples = std::stoi(value);
    else if (key == "est.baseline_decay") est_baseline_decay = std::stod(value);
    else if (key == "est.variance_floor") est_variance_floor = std::stod(value);
    else if (key == "opt.lr") opt_lr = std::stod(value);
    else if (key == "opt.batch") opt_batch = std::stoi(value);
    else if (key == "opt.epochs") opt_epochs = std::stoi(value);
    else if (key == "opt.seed") opt_seed = std::stoull(value);
    else if (key == "opt.max_steps") opt_max_steps = std::stol(value);
    else if (key == "opt.ckpt_every") opt_ckpt_every = std::stoi(value);
    else if (key == "opt.runs") opt_runs = std::stoi(value);
    else if (key == "data.source") data_source = value;
    else if (key == "data.limit") data_limit = std::stoi(value);
    else if (key == "data.binarize_seed") data_binarize_seed = std::stoull(value);
    else if (key == "data.downsample") data_downsample = std::stoi(value);
    else if (key == "data.resample_per_epoch") data_resample_per_epoch = to_bool(value);
    else if (key == "data.synthetic_n") data_synthetic_n = std::stoi(value);
    else if (key == "data.synthetic_seed") data_synthetic_seed = std::stoull(value);
    else if (key == "data.synthetic_hidden") data_synthetic_hidden = to_ints(value);
    else if (key == "data.synthetic_weight_scale") data_synthetic_weight_scale = std::stod(value);
    else if (key == "data.synthetic_bias_scale") data_synthetic_bias_scale = std::stod(value);
    else if (key == "data.exact_nll_subset") data_exact_nll_subset = std::stoi(value);
    else if (key == "eval.samples") eval_samples = std::stoi(value);
    else if (key == "eval.greedy") eval_greedy = to_bool(value);
    else if (key == "out.dir") out_dir = value;
    else throw contract_error("config: unknown key '" + key + "'");
  }

  void load_text(const std::string& text, const std::string& origin = "<text>") {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) {
        bool blank = true;
        for (char c : line) blank = blank && std::isspace(static_cast<unsigned char>(c));
        require(blank, "config: bad line " + std::to_string(lineno) + " in " + origin);
        continue;
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  void load_file(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), "config: cannot open " + path);
    std::stringstream buf;
    buf << is.rdbuf();
    load_text(buf.str(), path);
  }

  std::string to_text() const {
    auto join = [](const std::vector<int>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i)
        s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    std::ostringstream os;
    os.precision(17);
    os << "model.dim = " << model_dim << "\n"
       << "model.layers = " << model_layers << "\n"
       << "model.hidden = " << join(model_hidden) << "\n"
       << "model.posterior_hidden = " << join(model_posterior_hidden) << "\n"
       << "model.cond = " << model_cond << "\n"
       << "model.base = " << model_base << "\n"
       << "model.base_trainable = " << (model_base_trainable ? "true" : "false") << "\n"
       << "model.ordering_seed = " << model_ordering_seed << "\n"
       << "est.kind = " << est_kind << "\n"
       << "est.self_critic = " << (est_self_critic ? "true" : "false") << "\n"
       << "est.baseline = " << est_baseline << "\n"
       << "est.pairing = " << est_pairing << "\n"
       << "est.gamma_kl = " << est_gamma_kl << "\n"
       << "est.gamma_prefix = " << est_gamma_prefix << "\n"
       << "est.samples = " << est_samples << "\n"
       << "est.baseline_decay = " << est_baseline_decay << "\n"
       << "est.variance_floor = " << est_variance_floor << "\n"
       << "opt.lr = " << opt_lr << "\n"
       << "opt.batch = " << opt_batch << "\n"
       << "opt.epochs = " << opt_epochs << "\n"
       << "opt.seed = " << opt_seed << "\n"
       << "opt.max_steps = " << opt_max_steps << "\n"
       << "opt.ckpt_every = " << opt_ckpt_every << "\n"
       << "opt.runs = " << opt_runs << "\n"
       << "data.source = " << data_source << "\n"
       << "data.limit = " << data_limit << "\n"
       << "data.binarize_seed = " << data_binarize_seed << "\n"
       << "data.downsample = " << data_downsample << "\n"
       << "data.resample_per_epoch = " << (data_resample_per_epoch ? "true" : "false") << "\n"
       << "data.synthetic_n = " << data_synthetic_n << "\n"
       << "data.synthetic_seed = " << data_synthetic_seed << "\n"
       << "data.synthetic_hidden = " << join(data_synthetic_hidden) << "\n"
       << "data.synthetic_weight_scale = " << data_synthetic_weight_scale << "\n"
       << "data.synthetic_bias_scale = " << data_synthetic_bias_scale << "\n"
       << "data.exact_nll_subset = " << data_exact_nll_subset << "\n"
       << "eval.samples = " << eval_samples << "\n"
       << "eval.greedy = " << eval_greedy << "\n"
       << "out.dir = " << out_dir << "\n";
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(to_text()); }

  void validate() const {
    require(model_dim >= 1, "config: model.dim must be >= 1");
    require(model_layers >= 0, "config: model.layers must be >= 0");
    // full connectivity leaves the marginal unnormalised; it stays available
    // at the library level for diagnostics but is refused for runs
    require(model_cond == "prefix",
            "config: model.cond must be prefix (full connectivity is a "
            "diagnostics-only variant)");
    require(est_kind == "ste" || est_kind == "sfe-full" || est_kind == "sfe-special",
            "config: est.kind must be ste, sfe-full or sfe-special");
    require(est_baseline == "none" || est_baseline == "centre" ||
                est_baseline == "standardise",
            "config: est.baseline must be none, centre or standardise");
    require(est_pairing == "perdim" || est_pairing == "summed",
            "config: est.pairing must be perdim or summed");
    require(est_gamma_kl >= 0.0 && est_gamma_prefix >= 0.0,
            "config: gamma values must be >= 0");
    require(est_samples >= 1 && opt_batch >= 1 && opt_epochs >= 0 && opt_runs >= 1,
            "config: counts must be positive");
    require(eval_samples >= 1, "config: eval.samples must be >= 1");
    require(opt_lr > 0.0, "config: opt.lr must be > 0");
  }

  EstimatorKind estimator_kind() const {
    if (est_kind == "ste") return EstimatorKind::SteProxy;
    if (est_kind == "sfe-full") return EstimatorKind::SfeFull;
    return EstimatorKind::SfeSpecial;
  }

  EstimatorConfig estimator_config() const {
    EstimatorConfig e;
    e.kind = estimator_kind();
    e.self_critic = est_self_critic;
    e.baseline = est_baseline == "none"
                     ? MovingBaseline::None
                     : (est_baseline == "centre" ? MovingBaseline::Centre
                                                 : MovingBaseline::Standardise);
    e.pairing = est_pairing == "perdim" ? SignalPairing::PerDim : SignalPairing::Summed;
    e.gamma_kl = est_gamma_kl;
    e.gamma_prefix = est_gamma_prefix;
    e.samples = est_samples;
    return e;
  }

  std::vector<double> base_vector() const {
    if (!model_base.empty() && model_base.front() == '@') {
      std::ifstream is(model_base.substr(1));
      require(is.good(), "config: cannot open base file " + model_base.substr(1));
      std::vector<double> beta;
      double v;
      while (is >> v) beta.push_back(v);
      require(static_cast<int>(beta.size()) == model_dim,
              "config: base file must hold model.dim values");
      return beta;
    }
    if (model_base.find(',') != std::string::npos) {
      std::vector<double> beta;
      std::stringstream ss(model_base);
      std::string tok;
      while (std::getline(ss, tok, ',')) beta.push_back(std::stod(tok));
      require(static_cast<int>(beta.size()) == model_dim,
              "config: base list must hold model.dim values");
      return beta;
    }
    return std::vector<double>(static_cast<std::size_t>(model_dim),
                               std::stod(model_base));
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.dim = model_dim;
    m.layers = model_layers;
    m.made_hidden = model_hidden;
    m.posterior_hidden = model_posterior_hidden;
    m.cond_mode = model_cond == "prefix" ? CondConnectivity::Prefix
                                         : CondConnectivity::Full;
    m.tie_posterior = est_kind != "sfe-full";
    m.beta = base_vector();
    m.base_trainable = model_base_trainable;
    if (model_ordering_seed != 0) {
      std::vector<int> ord(static_cast<std::size_t>(model_dim));
      for (int i = 0; i < model_dim; ++i) ord[static_cast<std::size_t>(i)] = i + 1;
      RngStream s = RngStream::seeded(model_ordering_seed).derive("ordering");
      for (int i = model_dim - 1; i > 0; --i) {
        const int j = static_cast<int>(s.next_bits() % static_cast<std::uint64_t>(i + 1));
        std::swap(ord[static_cast<std::size_t>(i)], ord[static_cast<std::size_t>(j)]);
      }
      m.ordering = std::move(ord);
    }
    return m;
  }
};

inline std::string data_dir_prefixed(const std::string& path) {
  if (path.empty() || path.front() == '/') return path;
  if (const char* dir = std::getenv("DNFLOW_DATA_DIR"))
    return std::string(dir) + "/" + path;
  return path;
}

}  // namespace dnflow
