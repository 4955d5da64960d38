#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "dnflow/data.hpp"
#include "dnflow/oracle.hpp"

using namespace dnflow;

TEST_CASE("idx parsing") {
  SECTION("minimal image file") {
    const std::vector<std::uint8_t> bytes{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2,
                                          0, 0, 0, 2, 0, 128, 255, 7};
    const GrayImageSet set = parse_idx_images(bytes);
    CHECK(set.count == 1);
    CHECK(set.height == 2);
    CHECK(set.width == 2);
    CHECK(set.pixels == std::vector<std::uint8_t>{0, 128, 255, 7});
  }
  SECTION("labels") {
    const std::vector<std::uint8_t> bytes{0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9};
    const auto labels = parse_idx_labels(bytes);
    CHECK(labels == std::vector<std::uint8_t>{7, 2, 9});
  }
  SECTION("distinct errors: bad magic, truncation, trailing bytes") {
    const std::vector<std::uint8_t> bad_magic{0, 0, 9, 3, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1};
    CHECK_THROWS_AS(parse_idx_images(bad_magic), idx_error);
    try {
      parse_idx_images(bad_magic);
    } catch (const idx_error& e) {
      CHECK(e.kind == idx_error::Kind::BadMagic);
    }
    const std::vector<std::uint8_t> short_payload{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2,
                                                  0, 0, 0, 2, 0, 128, 255};
    try {
      parse_idx_images(short_payload);
      FAIL("expected truncation error");
    } catch (const idx_error& e) {
      CHECK(e.kind == idx_error::Kind::Truncated);
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("expected 4"));
      CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("got 3"));
    }
    std::vector<std::uint8_t> trailing{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2,
                                       0, 0, 0, 2, 0, 128, 255, 7, 99};
    try {
      parse_idx_images(trailing);
      FAIL("expected trailing-bytes error");
    } catch (const idx_error& e) {
      CHECK(e.kind == idx_error::Kind::TrailingBytes);
    }
  }
  SECTION("round trip is byte exact") {
    GrayImageSet set;
    set.count = 3;
    set.height = 2;
    set.width = 3;
    RngStream rng = RngStream::seeded(5);
    set.pixels.resize(18);
    for (auto& p : set.pixels) p = static_cast<std::uint8_t>(rng.next_bits() & 0xff);
    const auto bytes = serialize_idx(set);
    const GrayImageSet back = parse_idx_images(bytes);
    CHECK(serialize_idx(back) == bytes);
    const std::vector<std::uint8_t> labels{1, 2, 3, 4};
    CHECK(parse_idx_labels(serialize_idx_labels(labels)) == labels);
  }
}

TEST_CASE("stochastic binarisation") {
  GrayImageSet set;
  set.count = 1000;
  set.height = 1;
  set.width = 3;
  set.pixels.assign(3000, 0);
  for (int i = 0; i < set.count; ++i) {
    set.pixels[static_cast<std::size_t>(i * 3 + 0)] = 0;
    set.pixels[static_cast<std::size_t>(i * 3 + 1)] = 255;
    set.pixels[static_cast<std::size_t>(i * 3 + 2)] = 128;
  }
  const BinaryDataset ds = stochastic_binarize(set, 11);
  SECTION("degenerate intensities") {
    for (const auto& ex : ds.examples) {
      CHECK(ex[0] == 0);
      CHECK(ex[1] == 1);
    }
  }
  SECTION("intensity 128 has 1-rate 128/255 within 3 SE") {
    double ones = 0.0;
    for (const auto& ex : ds.examples) ones += ex[2];
    const double p = 128.0 / 255.0;
    const double se = std::sqrt(p * (1 - p) / set.count);
    CHECK(std::abs(ones / set.count - p) < 3 * se);
  }
  SECTION("same seed reproduces the dataset bit-exactly") {
    const BinaryDataset again = stochastic_binarize(set, 11);
    REQUIRE(again.count() == ds.count());
    for (int i = 0; i < ds.count(); ++i)
      CHECK(again.examples[static_cast<std::size_t>(i)] ==
            ds.examples[static_cast<std::size_t>(i)]);
    const BinaryDataset other = stochastic_binarize(set, 12);
    bool any_diff = false;
    for (int i = 0; i < ds.count(); ++i)
      any_diff = any_diff || !(other.examples[static_cast<std::size_t>(i)] ==
                               ds.examples[static_cast<std::size_t>(i)]);
    CHECK(any_diff);
  }
}

TEST_CASE("downsample") {
  GrayImageSet set;
  set.count = 1;
  set.height = 2;
  set.width = 4;
  set.pixels = {0, 0, 100, 100, 0, 0, 200, 200};
  SECTION("factor 1 is the identity") {
    const GrayImageSet out = downsample(set, 1);
    CHECK(out.pixels == set.pixels);
  }
  SECTION("block means round half up") {
    const GrayImageSet out = downsample(set, 2);
    REQUIRE(out.pixels.size() == 2);
    CHECK(out.pixels[0] == 0);
    CHECK(out.pixels[1] == 150);
  }
  SECTION("divisibility is enforced") {
    CHECK_THROWS_AS(downsample(set, 3), contract_error);
  }
}

TEST_CASE("synthetic dataset") {
  SECTION("depth 0 is i.i.d. Bernoulli(beta)") {
    const SyntheticDataset syn = synthetic_flow_dataset(4, 0, 3, 20000, {8}, 2.0, 0.25);
    std::vector<double> ones(4, 0.0);
    for (const auto& ex : syn.data.examples)
      for (int d = 0; d < 4; ++d) ones[static_cast<std::size_t>(d)] += ex[d];
    const double se = std::sqrt(0.25 * 0.75 / 20000);
    for (int d = 0; d < 4; ++d)
      CHECK(std::abs(ones[static_cast<std::size_t>(d)] / 20000 - 0.25) < 3 * se);
  }
  SECTION("same seed reproduces the dataset") {
    const SyntheticDataset a = synthetic_flow_dataset(5, 1, 9, 100);
    const SyntheticDataset b = synthetic_flow_dataset(5, 1, 9, 100);
    for (int i = 0; i < 100; ++i)
      CHECK(a.data.examples[static_cast<std::size_t>(i)] ==
            b.data.examples[static_cast<std::size_t>(i)]);
  }
  SECTION("empirical distribution matches the enumerated pmf (chi-square)") {
    const int n = 100000;
    const SyntheticDataset syn = synthetic_flow_dataset(4, 1, 13, n);
    std::vector<double> counts(16, 0.0);
    for (const auto& ex : syn.data.examples) counts[ex.to_index()] += 1.0;
    double stat = 0.0;
    double total_p = 0.0;
    for (std::uint64_t ix = 0; ix < 16; ++ix) {
      const double p =
          std::exp(enumerate_marginal(syn.generator, BitVector::from_index(ix, 4)));
      total_p += p;
      const double expect = n * p;
      stat += (counts[ix] - expect) * (counts[ix] - expect) / expect;
    }
    CHECK(total_p == Catch::Approx(1.0).margin(1e-9));
    // chi-square 0.999 quantile at 15 dof
    CHECK(stat < 37.697);
  }
}

TEST_CASE("bds cache round trip") {
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "dnflow_test_bds";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "cache.bds").string();
  BinaryDataset ds;
  ds.dim = 13;  // not a byte multiple
  RngStream rng = RngStream::seeded(77);
  for (int i = 0; i < 111; ++i) {
    BitVector v(13);
    for (int d = 0; d < 13; ++d) v[d] = rng.next_bernoulli(0.4);
    ds.examples.push_back(std::move(v));
  }
  ds.provenance = "source=test seed=77";
  save_bds(ds, path);
  const BinaryDataset back = load_bds(path);
  CHECK(back.dim == ds.dim);
  REQUIRE(back.count() == ds.count());
  for (int i = 0; i < ds.count(); ++i)
    CHECK(back.examples[static_cast<std::size_t>(i)] ==
          ds.examples[static_cast<std::size_t>(i)]);
  CHECK(back.provenance == ds.provenance);
  std::filesystem::remove_all(dir);
}
