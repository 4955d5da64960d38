#pragma once

// Dataset ingestion and generation: IDX parsing (bit-exact round trip),
// stochastic binarisation with order-independent substreams, block-mean
// downsampling, the packed binary dataset cache (BDS1), and synthetic
// datasets drawn from a known generating flow.

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dnflow/bits.hpp"
#include "dnflow/model.hpp"
#include "dnflow/rng.hpp"

namespace dnflow {

class idx_error : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Truncated, TrailingBytes };
  idx_error(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  Kind kind;
};

struct GrayImageSet {
  int count = 0;
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // count*height*width, row-major per image

  int pixels_per_image() const { return height * width; }
  std::span<const std::uint8_t> image(int i) const {
    return {pixels.data() + static_cast<std::size_t>(i) * pixels_per_image(),
            static_cast<std::size_t>(pixels_per_image())};
  }
};

struct BinaryDataset {
  int dim = 0;
  std::vector<BitVector> examples;
  std::string provenance;  // free-form UTF-8: source hashes, seeds, factors

  int count() const { return static_cast<int>(examples.size()); }
};

namespace detail {
inline std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}
inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}
}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline GrayImageSet parse_idx_images(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw idx_error(idx_error::Kind::Truncated, "idx: missing magic");
  const std::uint32_t magic = detail::read_be32(bytes.data());
  if (magic != kIdxImagesMagic)
    throw idx_error(idx_error::Kind::BadMagic,
                    "idx: bad image magic " + std::to_string(magic));
  if (bytes.size() < 16)
    throw idx_error(idx_error::Kind::Truncated, "idx: truncated image header");
  GrayImageSet set;
  set.count = static_cast<int>(detail::read_be32(bytes.data() + 4));
  set.height = static_cast<int>(detail::read_be32(bytes.data() + 8));
  set.width = static_cast<int>(detail::read_be32(bytes.data() + 12));
  const std::size_t expect =
      static_cast<std::size_t>(set.count) * set.height * set.width;
  const std::size_t have = bytes.size() - 16;
  if (have < expect)
    throw idx_error(idx_error::Kind::Truncated,
                    "idx: payload truncated, expected " + std::to_string(expect) +
                        " bytes, got " + std::to_string(have));
  if (have > expect)
    throw idx_error(idx_error::Kind::TrailingBytes,
                    "idx: " + std::to_string(have - expect) + " trailing bytes");
  set.pixels.assign(bytes.begin() + 16, bytes.end());
  return set;
}

inline std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw idx_error(idx_error::Kind::Truncated, "idx: missing magic");
  const std::uint32_t magic = detail::read_be32(bytes.data());
  if (magic != kIdxLabelsMagic)
    throw idx_error(idx_error::Kind::BadMagic,
                    "idx: bad label magic " + std::to_string(magic));
  if (bytes.size() < 8)
    throw idx_error(idx_error::Kind::Truncated, "idx: truncated label header");
  const std::uint32_t count = detail::read_be32(bytes.data() + 4);
  const std::size_t have = bytes.size() - 8;
  if (have < count)
    throw idx_error(idx_error::Kind::Truncated,
                    "idx: payload truncated, expected " + std::to_string(count) +
                        " bytes, got " + std::to_string(have));
  if (have > count)
    throw idx_error(idx_error::Kind::TrailingBytes,
                    "idx: " + std::to_string(have - count) + " trailing bytes");
  return std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end());
}

inline std::vector<std::uint8_t> serialize_idx(const GrayImageSet& set) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImagesMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(set.count));
  detail::write_be32(out, static_cast<std::uint32_t>(set.height));
  detail::write_be32(out, static_cast<std::uint32_t>(set.width));
  out.insert(out.end(), set.pixels.begin(), set.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> serialize_idx_labels(std::span<const std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelsMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

// bit ~ Bern(intensity/255), drawn from a substream keyed by (seed, example,
// pixel): the result does not depend on iteration order or batching.
inline BinaryDataset stochastic_binarize(const GrayImageSet& images,
                                         std::uint64_t seed) {
  BinaryDataset ds;
  ds.dim = images.pixels_per_image();
  ds.examples.reserve(static_cast<std::size_t>(images.count));
  const RngStream root = RngStream::seeded(seed).derive("binarize");
  for (int i = 0; i < images.count; ++i) {
    const auto img = images.image(i);
    const RngStream s = root.derive(static_cast<std::uint64_t>(i));
    BitVector v(ds.dim);
    for (int d = 0; d < ds.dim; ++d) {
      const double p = img[static_cast<std::size_t>(d)] / 255.0;
      v[d] = s.uniform_at(static_cast<std::uint64_t>(d)) < p ? 1 : 0;
    }
    ds.examples.push_back(std::move(v));
  }
  ds.provenance = "source=idx hash=" + std::to_string(fnv1a64(images.pixels.data(),
                                                              images.pixels.size())) +
                  " binarize_seed=" + std::to_string(seed);
  return ds;
}

// Block mean over factor x factor cells, rounded half-up.
inline GrayImageSet downsample(const GrayImageSet& images, int factor) {
  require(factor >= 1, "downsample: factor must be >= 1");
  require(images.height % factor == 0 && images.width % factor == 0,
          "downsample: dimensions not divisible by factor");
  if (factor == 1) return images;
  GrayImageSet out;
  out.count = images.count;
  out.height = images.height / factor;
  out.width = images.width / factor;
  out.pixels.resize(static_cast<std::size_t>(out.count) * out.height * out.width);
  const int cell = factor * factor;
  for (int i = 0; i < images.count; ++i) {
    const auto img = images.image(i);
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c) {
        std::uint32_t sum = 0;
        for (int dr = 0; dr < factor; ++dr)
          for (int dc = 0; dc < factor; ++dc)
            sum += img[static_cast<std::size_t>((r * factor + dr) * images.width +
                                                c * factor + dc)];
        out.pixels[static_cast<std::size_t>(i) * out.height * out.width +
                   static_cast<std::size_t>(r * out.width + c)] =
            static_cast<std::uint8_t>((2 * sum + cell) / (2 * cell));
      }
  }
  return out;
}

// Fixes a random generating flow and draws n examples from it via the
// dimension-major ancestral sampler; the generator is returned so exact data
// NLL remains computable by enumeration.
struct SyntheticDataset {
  BinaryDataset data;
  FlowModel generator;
};

inline SyntheticDataset synthetic_flow_dataset(int dim, int layers, std::uint64_t seed,
                                               int n, std::vector<int> gen_hidden = {32},
                                               double gen_weight_scale = 2.0,
                                               double base_p = 0.1,
                                               double gen_bias_scale = 0.0) {
  ModelConfig mc;
  mc.dim = dim;
  mc.layers = layers;
  mc.made_hidden = std::move(gen_hidden);
  mc.tie_posterior = true;
  mc.base_p = base_p;
  SyntheticDataset out;
  out.generator = FlowModel::build(mc, RngStream::seeded(seed).derive("synthetic-init"));
  for (auto& cond : out.generator.prior()) {
    const RngStream s = RngStream::seeded(seed).derive("synthetic-weights").derive(
        static_cast<std::uint64_t>(cond.layer_index()));
    cond.net().init_params(s, gen_weight_scale);
    if (gen_bias_scale > 0.0) {
      // random biases keep the conditionals sharp even for dead-ReLU contexts
      RngStream bs = s.derive("bias");
      auto& net = cond.net();
      for (std::size_t li = 0; li < net.layer_count(); ++li)
        for (double& b : net.layer(li).affine.bias) b = bs.next_symmetric(gen_bias_scale);
    }
  }
  out.data.dim = dim;
  out.data.examples.reserve(static_cast<std::size_t>(n));
  const RngStream root = RngStream::seeded(seed).derive("synthetic-draw");
  for (int i = 0; i < n; ++i)
    out.data.examples.push_back(
        out.generator.ancestral_sample(root.derive(static_cast<std::uint64_t>(i))));
  out.data.provenance = "source=synthetic D=" + std::to_string(dim) +
                        " L=" + std::to_string(layers) + " seed=" + std::to_string(seed) +
                        " n=" + std::to_string(n) +
                        " weight_scale=" + std::to_string(gen_weight_scale) +
                        " base_p=" + std::to_string(base_p);
  return out;
}

// --- BDS1 cache: "BDS1", little-endian u32 dim, u64 count, packed bits
// (row-major, LSB first within each byte), then u32 length + UTF-8 provenance.

inline void save_bds(const BinaryDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "save_bds: cannot open " + path);
  os.write("BDS1", 4);
  const std::uint32_t dim = static_cast<std::uint32_t>(ds.dim);
  const std::uint64_t count = static_cast<std::uint64_t>(ds.examples.size());
  os.write(reinterpret_cast<const char*>(&dim), 4);
  os.write(reinterpret_cast<const char*>(&count), 8);
  const std::size_t row_bytes = (static_cast<std::size_t>(ds.dim) + 7) / 8;
  std::vector<std::uint8_t> row(row_bytes);
  for (const auto& ex : ds.examples) {
    std::fill(row.begin(), row.end(), 0);
    for (int d = 0; d < ds.dim; ++d)
      if (ex[d]) row[static_cast<std::size_t>(d) / 8] |= std::uint8_t(1u << (d % 8));
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row_bytes));
  }
  const std::uint32_t plen = static_cast<std::uint32_t>(ds.provenance.size());
  os.write(reinterpret_cast<const char*>(&plen), 4);
  os.write(ds.provenance.data(), plen);
  require(os.good(), "save_bds: write failed for " + path);
}

inline BinaryDataset load_bds(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "load_bds: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  require(is.good() && std::string(magic, 4) == "BDS1", "load_bds: bad magic");
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  is.read(reinterpret_cast<char*>(&dim), 4);
  is.read(reinterpret_cast<char*>(&count), 8);
  require(is.good(), "load_bds: truncated header");
  BinaryDataset ds;
  ds.dim = static_cast<int>(dim);
  const std::size_t row_bytes = (static_cast<std::size_t>(dim) + 7) / 8;
  std::vector<std::uint8_t> row(row_bytes);
  ds.examples.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row_bytes));
    require(is.good(), "load_bds: truncated payload at row " + std::to_string(i));
    BitVector v(ds.dim);
    for (int d = 0; d < ds.dim; ++d)
      v[d] = (row[static_cast<std::size_t>(d) / 8] >> (d % 8)) & 1u;
    ds.examples.push_back(std::move(v));
  }
  std::uint32_t plen = 0;
  is.read(reinterpret_cast<char*>(&plen), 4);
  require(is.good(), "load_bds: missing provenance");
  ds.provenance.resize(plen);
  is.read(ds.provenance.data(), plen);
  require(is.good(), "load_bds: truncated provenance");
  return ds;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is),
                                   std::istreambuf_iterator<char>());
}

}  // namespace dnflow
