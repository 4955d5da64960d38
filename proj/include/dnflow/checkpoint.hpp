#pragma once

// Checkpoint format (little-endian throughout):
//   magic "DNFCKPT1", u32 version,
//   u64 config_hash, u64 master_seed, u64 step,
//   u32 config_len + config text (the RunConfig, verbatim),
//   u32 group count, then per group: u32 name_len + name, u64 count, f64[count],
//   u32 adam count, then per state: name, u64 count, i64 step,
//     f64 lr/beta1/beta2/eps, f64 m[count], f64 v[count],
//   baseline bank: recon state, u32 layer count, per layer suffix + next state
//     (state = u64 n, f64 decay, f64 floor, f64 mean[n], f64 var[n]).
//
// Loading a checkpoint into a model built from the embedded config reproduces
// the training trajectory bit-exactly in 64-bit deterministic mode.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "dnflow/estimators.hpp"
#include "dnflow/model.hpp"

namespace dnflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace ckpt_detail {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(is.good(), "checkpoint: truncated file");
  return v;
}
inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(is.good(), "checkpoint: truncated string");
  return s;
}
inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
  put<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline std::vector<double> get_doubles(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  require(is.good(), "checkpoint: truncated payload");
  return v;
}
inline void put_baseline(std::ostream& os, const BaselineState& b) {
  put<double>(os, b.decay);
  put<double>(os, b.floor);
  put_doubles(os, b.mean);
  put_doubles(os, b.var);
}
inline BaselineState get_baseline(std::istream& is) {
  BaselineState b;
  b.decay = get<double>(is);
  b.floor = get<double>(is);
  b.mean = get_doubles(is);
  b.var = get_doubles(is);
  return b;
}

}  // namespace ckpt_detail

inline constexpr char kCheckpointMagic[9] = "DNFCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config_text;
  std::uint64_t config_hash = 0;
  std::uint64_t master_seed = 0;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> groups;
  std::map<std::string, AdamState> adam;
  BaselineBank bank;
};

inline void save_checkpoint(const std::string& path, const std::string& config_text,
                            std::uint64_t master_seed, std::uint64_t step,
                            const FlowModel& model,
                            const std::map<std::string, AdamState>& adam,
                            const BaselineBank& bank) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, fnv1a64(config_text));
  put<std::uint64_t>(os, master_seed);
  put<std::uint64_t>(os, step);
  put_string(os, config_text);

  const auto names = model.group_names();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(names.size()));
  for (const auto& name : names) {
    put_string(os, name);
    std::vector<double> params(model.group_size(name));
    model.copy_group(name, params);
    put_doubles(os, params);
  }

  put<std::uint32_t>(os, static_cast<std::uint32_t>(adam.size()));
  for (const auto& [name, st] : adam) {
    put_string(os, name);
    put<std::int64_t>(os, st.step);
    put<double>(os, st.lr);
    put<double>(os, st.beta1);
    put<double>(os, st.beta2);
    put<double>(os, st.eps);
    put_doubles(os, st.m);
    put_doubles(os, st.v);
  }

  put_baseline(os, bank.recon);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(bank.kl_suffix.size()));
  for (std::size_t l = 0; l < bank.kl_suffix.size(); ++l) {
    put_baseline(os, bank.kl_suffix[l]);
    put_baseline(os, bank.kl_next[l]);
  }
  require(os.good(), "checkpoint: write failed for " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::string(magic, 8) == std::string(kCheckpointMagic, 8),
          "checkpoint: bad magic");
  const auto version = get<std::uint32_t>(is);
  require(version == kCheckpointVersion, "checkpoint: unsupported version");
  CheckpointData data;
  data.config_hash = get<std::uint64_t>(is);
  data.master_seed = get<std::uint64_t>(is);
  data.step = get<std::uint64_t>(is);
  data.config_text = get_string(is);
  require(fnv1a64(data.config_text) == data.config_hash,
          "checkpoint: config hash mismatch");

  const auto n_groups = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_groups; ++i) {
    const std::string name = get_string(is);
    data.groups[name] = get_doubles(is);
  }
  const auto n_adam = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_adam; ++i) {
    const std::string name = get_string(is);
    AdamState st;
    st.label = name;
    st.step = get<std::int64_t>(is);
    st.lr = get<double>(is);
    st.beta1 = get<double>(is);
    st.beta2 = get<double>(is);
    st.eps = get<double>(is);
    st.m = get_doubles(is);
    st.v = get_doubles(is);
    data.adam[name] = std::move(st);
  }
  data.bank.recon = get_baseline(is);
  const auto n_layers = get<std::uint32_t>(is);
  data.bank.kl_suffix.resize(n_layers);
  data.bank.kl_next.resize(n_layers);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    data.bank.kl_suffix[l] = get_baseline(is);
    data.bank.kl_next[l] = get_baseline(is);
  }
  return data;
}

inline void restore_model(FlowModel& model, const CheckpointData& data) {
  for (const auto& [name, params] : data.groups) model.set_group(name, params);
}

}  // namespace dnflow
