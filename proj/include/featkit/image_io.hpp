#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "featkit/diffcore.hpp"

namespace featkit::img {

/// 8-bit image, row-major, channels interleaved (1 = gray, 3 = rgb).
struct ImageU8 {
  int h = 0;
  int w = 0;
  int channels = 1;
  std::vector<std::uint8_t> px;

  std::uint8_t at(int x, int y, int c = 0) const {
    return px[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
  std::uint8_t& at(int x, int y, int c = 0) {
    return px[(static_cast<std::size_t>(y) * w + x) * channels + c];
  }
};

/// Binary PGM (P5) or PPM (P6), maxval up to 255, '#' comments allowed.
ImageU8 read_pnm(const std::string& path);
void write_pgm(const std::string& path, const ImageU8& im);
void write_ppm(const std::string& path, const ImageU8& im);

/// [1,1,H,W] doubles in [0,1]; rgb collapses via (r+g+b)/3.
diff::Array to_gray_array(const ImageU8& im);

/// Inverse of to_gray_array for a [1,1,H,W] (or [H,W]) array in [0,1].
ImageU8 from_gray_array(const diff::Array& a);

}  // namespace featkit::img
