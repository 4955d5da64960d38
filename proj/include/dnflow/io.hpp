#pragma once

// Output formats: P5 PGM sample grids and CSV with a provenance comment line.

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dnflow/bits.hpp"

namespace dnflow {

// 10-column grid of h x w binary images with 1-pixel white gutters.
inline std::vector<std::uint8_t> render_pgm_grid(const std::vector<BitVector>& images,
                                                 int h, int w,
                                                 const std::string& comment,
                                                 int columns = 10) {
  require(!images.empty(), "render_pgm_grid: no images");
  for (const auto& im : images)
    require(im.size() == h * w, "render_pgm_grid: image size mismatch");
  const int n = static_cast<int>(images.size());
  const int rows = (n + columns - 1) / columns;
  const int gw = columns * w + (columns - 1);
  const int gh = rows * h + (rows - 1);
  std::ostringstream header;
  header << "P5\n";
  if (!comment.empty()) header << "# " << comment << "\n";
  header << gw << ' ' << gh << "\n255\n";
  const std::string hs = header.str();
  std::vector<std::uint8_t> out(hs.begin(), hs.end());
  const std::size_t pix0 = out.size();
  out.resize(pix0 + static_cast<std::size_t>(gw) * gh, 255);  // gutters white
  for (int i = 0; i < n; ++i) {
    const int gr = i / columns, gc = i % columns;
    const int y0 = gr * (h + 1), x0 = gc * (w + 1);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out[pix0 + static_cast<std::size_t>(y0 + r) * gw + (x0 + c)] =
            images[static_cast<std::size_t>(i)][r * w + c] ? 255 : 0;
  }
  return out;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  require(os.good(), "write failed for " + path);
}

// CSV with "# config_hash=... seed=..." provenance as the first line.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header,
            std::uint64_t config_hash, std::uint64_t seed, bool append = false)
      : os_(path, append ? std::ios::app : std::ios::out) {
    require(os_.good(), "cannot open " + path + " for writing");
    if (!append || os_.tellp() == 0) {
      os_ << "# config_hash=" << std::hex << std::setw(16) << std::setfill('0')
          << config_hash << std::dec << std::setfill(' ') << " seed=" << seed << "\n";
      os_ << header << "\n";
    }
  }
  template <class... Ts>
  void row(const Ts&... vals) {
    bool first = true;
    ((os_ << (first ? "" : ","), first = false, os_ << vals), ...);
    os_ << "\n";
  }
  std::ostream& stream() { return os_; }

 private:
  std::ofstream os_;
};

}  // namespace dnflow
