#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "dnflow/trainer.hpp"

using namespace dnflow;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("dnflow_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is),
                     std::istreambuf_iterator<char>());
}

// drop the wall-time column and the provenance line (the config hash covers
// out.dir, which differs between the runs being compared)
std::string metrics_without_time(const std::string& path) {
  std::ifstream is(path);
  REQUIRE(is.good());
  std::string out, line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.front() == '#') continue;
    const auto last = line.rfind(',');
    out += line.substr(0, last);
    out += '\n';
  }
  return out;
}

}  // namespace

TEST_CASE("config round trip, overrides and validation") {
  RunConfig cfg;
  cfg.model_dim = 6;
  cfg.model_hidden = {16, 8};
  cfg.est_kind = "sfe-full";
  const std::string text = cfg.to_text();
  const auto dir = fresh_dir("cfg");
  {
    std::ofstream os(dir / "run.cfg");
    os << "# comment line\n" << text << "\n";
  }
  RunConfig loaded;
  loaded.load_file((dir / "run.cfg").string());
  CHECK(loaded.to_text() == text);
  CHECK(loaded.hash() == cfg.hash());

  loaded.apply("opt.lr", "0.01");
  CHECK(loaded.opt_lr == Catch::Approx(0.01));
  CHECK_THROWS_AS(loaded.apply("nope.key", "1"), contract_error);
  loaded.est_kind = "bogus";
  CHECK_THROWS_AS(loaded.validate(), contract_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("trainable base converges to the empirical means at depth 0") {
  const auto dir = fresh_dir("beta");
  // i.i.d. Bernoulli data with per-dimension rates
  const std::vector<double> rates{0.8, 0.3, 0.6, 0.5};
  BinaryDataset ds;
  ds.dim = 4;
  RngStream rng = RngStream::seeded(2);
  for (int i = 0; i < 512; ++i) {
    BitVector v(4);
    for (int d = 0; d < 4; ++d) v[d] = rng.next_bernoulli(rates[static_cast<std::size_t>(d)]);
    ds.examples.push_back(std::move(v));
  }
  ds.provenance = "test";
  save_bds(ds, (dir / "data.bds").string());

  std::vector<double> means(4, 0.0);
  for (const auto& ex : ds.examples)
    for (int d = 0; d < 4; ++d) means[static_cast<std::size_t>(d)] += ex[d];
  for (double& m : means) m /= ds.count();

  RunConfig cfg;
  cfg.model_dim = 4;
  cfg.model_layers = 0;
  cfg.model_base = "0.5";
  cfg.model_base_trainable = true;
  cfg.est_kind = "sfe-special";
  cfg.opt_lr = 0.02;
  cfg.opt_batch = 128;
  cfg.opt_epochs = 200;
  cfg.data_source = "bds:" + (dir / "data.bds").string();
  cfg.out_dir = (dir / "out").string();

  const TrainOutput out = train(cfg);
  const CheckpointData ck = load_checkpoint(out.checkpoint_path);
  const auto& beta = ck.groups.at("beta");
  for (int d = 0; d < 4; ++d)
    CHECK(std::abs(beta[static_cast<std::size_t>(d)] - means[static_cast<std::size_t>(d)]) <
          0.01);
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero epochs leaves the initialisation untouched") {
  const auto dir = fresh_dir("zeroep");
  RunConfig cfg;
  cfg.model_dim = 5;
  cfg.model_layers = 1;
  cfg.model_hidden = {8};
  cfg.est_kind = "sfe-special";
  cfg.opt_epochs = 0;
  cfg.data_source = "synthetic";
  cfg.data_synthetic_n = 32;
  cfg.out_dir = (dir / "out").string();
  const TrainOutput out = train(cfg);
  const CheckpointData ck = load_checkpoint(out.checkpoint_path);
  FlowModel fresh = build_model(cfg);
  for (const auto& name : fresh.group_names()) {
    std::vector<double> init(fresh.group_size(name));
    fresh.copy_group(name, init);
    const auto& trained = ck.groups.at(name);
    for (std::size_t i = 0; i < init.size(); ++i) CHECK(init[i] == trained[i]);
  }
  CHECK(ck.step == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training is deterministic given the seed") {
  auto make_cfg = [](const std::string& out) {
    RunConfig cfg;
    cfg.model_dim = 6;
    cfg.model_layers = 1;
    cfg.model_hidden = {8};
    cfg.est_kind = "sfe-full";
    cfg.est_self_critic = true;
    cfg.est_baseline = "standardise";
    cfg.opt_batch = 16;
    cfg.opt_epochs = 3;
    cfg.opt_seed = 5;
    cfg.data_source = "synthetic";
    cfg.data_synthetic_n = 64;
    cfg.out_dir = out;
    return cfg;
  };
  const auto dir = fresh_dir("det");
  const TrainOutput a = train(make_cfg((dir / "a").string()));
  const TrainOutput b = train(make_cfg((dir / "b").string()));
  CHECK(metrics_without_time(a.metrics_path) == metrics_without_time(b.metrics_path));
  // checkpoints carry the config text, which differs only in out.dir; compare
  // the parameter payloads instead
  const CheckpointData ca = load_checkpoint(a.checkpoint_path);
  const CheckpointData cb = load_checkpoint(b.checkpoint_path);
  REQUIRE(ca.groups.size() == cb.groups.size());
  for (const auto& [name, g] : ca.groups) {
    const auto& h = cb.groups.at(name);
    REQUIRE(g.size() == h.size());
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == h[i]);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint resume reproduces the trajectory bit-exactly") {
  auto make_cfg = [](const std::string& out, long max_steps) {
    RunConfig cfg;
    cfg.model_dim = 5;
    cfg.model_layers = 2;
    cfg.model_hidden = {8};
    cfg.model_posterior_hidden = {8};
    cfg.est_kind = "sfe-full";
    cfg.est_self_critic = true;
    cfg.est_baseline = "centre";
    cfg.opt_batch = 32;
    cfg.opt_epochs = 50;
    cfg.opt_max_steps = max_steps;
    cfg.opt_seed = 9;
    cfg.data_source = "synthetic";
    cfg.data_synthetic_n = 128;
    cfg.out_dir = out;
    return cfg;
  };
  const auto dir = fresh_dir("resume");
  // straight run: 10 steps
  const TrainOutput full = train(make_cfg((dir / "full").string(), 10));
  // split run: 5 steps, then resume for 5 more
  const RunConfig half_cfg = make_cfg((dir / "half").string(), 5);
  const TrainOutput half = train(half_cfg);
  const TrainOutput resumed = train(half_cfg, half.checkpoint_path);

  const CheckpointData a = load_checkpoint(full.checkpoint_path);
  const CheckpointData b = load_checkpoint(resumed.checkpoint_path);
  CHECK(a.step == 10);
  CHECK(b.step == 10);
  for (const auto& [name, g] : a.groups) {
    const auto& h = b.groups.at(name);
    REQUIRE(g.size() == h.size());
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == h[i]);
  }
  for (const auto& [name, st] : a.adam) {
    const auto& st2 = b.adam.at(name);
    CHECK(st.step == st2.step);
    for (std::size_t i = 0; i < st.m.size(); ++i) {
      CHECK(st.m[i] == st2.m[i]);
      CHECK(st.v[i] == st2.v[i]);
    }
  }
  for (std::size_t i = 0; i < a.bank.recon.mean.size(); ++i)
    CHECK(a.bank.recon.mean[i] == b.bank.recon.mean[i]);

  // resuming under a different config is refused
  RunConfig other = half_cfg;
  other.opt_lr = 0.5;
  CHECK_THROWS_AS(train(other, half.checkpoint_path), contract_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset dimension mismatch is refused") {
  // a dim-6 dataset fed to a dim-7 model
  const auto dir = fresh_dir("mismatch");
  const SyntheticDataset syn = synthetic_flow_dataset(6, 1, 1, 16);
  save_bds(syn.data, (dir / "d6.bds").string());
  RunConfig cfg;
  cfg.model_dim = 7;
  cfg.data_source = "bds:" + (dir / "d6.bds").string();
  cfg.out_dir = (dir / "out").string();
  CHECK_THROWS_WITH(train(cfg), Catch::Matchers::ContainsSubstring("does not match"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("per-epoch re-binarisation changes the working set when enabled") {
  const auto dir = fresh_dir("resample");
  GrayImageSet images;
  images.count = 24;
  images.height = 2;
  images.width = 2;
  images.pixels.assign(static_cast<std::size_t>(24 * 4), 128);
  write_bytes((dir / "imgs.idx").string(), serialize_idx(images));

  auto run = [&](bool resample, const std::string& out) {
    RunConfig cfg;
    cfg.model_dim = 4;
    cfg.model_layers = 1;
    cfg.model_hidden = {4};
    cfg.est_kind = "sfe-special";
    cfg.opt_batch = 8;
    cfg.opt_epochs = 2;
    cfg.data_source = "idx:" + (dir / "imgs.idx").string();
    cfg.data_resample_per_epoch = resample;
    cfg.out_dir = (dir / out).string();
    return train(cfg);
  };
  const TrainOutput frozen = run(false, "frozen");
  const TrainOutput resampled = run(true, "resampled");
  // with intensity-128 pixels the re-drawn epoch objective differs
  CHECK(frozen.final_mean_objective != resampled.final_mean_objective);
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation") {
  SECTION("tied deterministic model: IS estimate equals the greedy NLL exactly") {
    ModelConfig mc;
    mc.dim = 4;
    mc.layers = 1;
    mc.made_hidden = {6};
    mc.tie_posterior = true;
    mc.base_p = 0.2;
    FlowModel m = FlowModel::build(mc, RngStream::seeded(3));
    auto& out = m.prior()[0].net().layer(m.prior()[0].net().layer_count() - 1).affine;
    std::fill(out.weights.data.begin(), out.weights.data.end(), 0.0);
    out.bias = {60.0, -60.0, 60.0, -60.0};
    BinaryDataset ds;
    ds.dim = 4;
    ds.examples = {BitVector{1, 0, 1, 0}, BitVector{0, 1, 1, 1}};
    const EvalResult ev = evaluate(m, ds, 16, 1, true);
    for (std::size_t i = 0; i < ds.examples.size(); ++i)
      CHECK(ev.is_nll[i] == Catch::Approx(ev.greedy_nll[i]).margin(1e-9));
  }
  SECTION("K=1 equals the negated single ELBO sample") {
    ModelConfig mc;
    mc.dim = 4;
    mc.layers = 1;
    mc.made_hidden = {6};
    mc.posterior_hidden = {6};
    mc.base_p = 0.3;
    FlowModel m = FlowModel::build(mc, RngStream::seeded(4));
    BinaryDataset ds;
    ds.dim = 4;
    ds.examples = {BitVector{1, 1, 0, 0}};
    const std::uint64_t seed = 21;
    const EvalResult ev = evaluate(m, ds, 1, seed, false);
    const double elbo = elbo_estimate(
        m, ds.examples[0], RngStream::seeded(seed).derive("eval").derive(0), 1);
    CHECK(ev.is_nll[0] == Catch::Approx(-elbo).margin(1e-12));
  }
  SECTION("evaluation does not mutate parameters") {
    RunConfig cfg;
    cfg.model_dim = 4;
    cfg.model_layers = 1;
    cfg.model_hidden = {6};
    FlowModel m = build_model(cfg);
    std::vector<double> before(m.group_size("theta.1"));
    m.copy_group("theta.1", before);
    BinaryDataset ds;
    ds.dim = 4;
    ds.examples = {BitVector{0, 0, 1, 1}};
    evaluate(m, ds, 64, 5, true);
    std::vector<double> after(m.group_size("theta.1"));
    m.copy_group("theta.1", after);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  }
}

TEST_CASE("pgm sample grids") {
  const auto dir = fresh_dir("pgm");
  SECTION("grid layout and determinism") {
    ModelConfig mc;
    mc.dim = 4;
    mc.layers = 0;
    mc.base_p = 0.1;
    FlowModel m = FlowModel::build(mc, RngStream::seeded(0));
    const std::string p1 = (dir / "a.pgm").string();
    const std::string p2 = (dir / "b.pgm").string();
    sample_images(m, 100, p1, 7, 2, 2, 0xabcd);
    sample_images(m, 100, p2, 7, 2, 2, 0xabcd);
    const std::string a = slurp(p1);
    CHECK(a == slurp(p2));
    // n=100 at 2x2: (10*2+9) x (10*2+9)
    CHECK_THAT(a, Catch::Matchers::ContainsSubstring("29 29"));
    CHECK_THAT(a, Catch::Matchers::ContainsSubstring("P5"));
    CHECK_THAT(a, Catch::Matchers::ContainsSubstring("seed=7"));
  }
  SECTION("base-only model produces the base 1-rate") {
    ModelConfig mc;
    mc.dim = 16;
    mc.layers = 0;
    mc.base_p = 0.1;
    FlowModel m = FlowModel::build(mc, RngStream::seeded(0));
    const RngStream root = RngStream::seeded(9).derive("sample");
    double ones = 0.0;
    const int n = 640;  // 10240 bits
    for (int i = 0; i < n; ++i) {
      const BitVector x = m.ancestral_sample(root.derive(static_cast<std::uint64_t>(i)));
      for (int d = 0; d < 16; ++d) ones += x[d];
    }
    const double rate = ones / (16.0 * n);
    const double se = std::sqrt(0.1 * 0.9 / (16.0 * n));
    CHECK(std::abs(rate - 0.1) < 3 * se);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("multi-run wrapper reports per-run results") {
  const auto dir = fresh_dir("runs");
  RunConfig cfg;
  cfg.model_dim = 4;
  cfg.model_layers = 1;
  cfg.model_hidden = {6};
  cfg.est_kind = "sfe-special";
  cfg.opt_epochs = 1;
  cfg.opt_batch = 16;
  cfg.opt_runs = 2;
  cfg.eval_samples = 8;
  cfg.data_source = "synthetic";
  cfg.data_synthetic_n = 32;
  cfg.out_dir = (dir / "out").string();
  const RunSummary s = train_runs(cfg);
  REQUIRE(s.runs.size() == 2);
  REQUIRE(s.is_nll.size() == 2);
  CHECK(s.is_nll[static_cast<std::size_t>(s.best_run)] ==
        Catch::Approx(std::min(s.is_nll[0], s.is_nll[1])));
  std::filesystem::remove_all(dir);
}
