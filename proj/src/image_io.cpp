#include "featkit/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace featkit::img {

namespace {

// next integer token, skipping whitespace and '#' comment lines
int read_header_int(std::istream& in, const std::string& path) {
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = in.get();
    c = in.get();
  }
  if (c == EOF || !std::isdigit(c)) throw std::runtime_error("bad pnm header in " + path);
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = in.get();
  }
  return v;
}

void write_pnm(const std::string& path, const ImageU8& im, int channels, const char* magic) {
  if (im.channels != channels)
    throw std::invalid_argument(std::string(magic) + " writer expects " +
                                std::to_string(channels) + " channel(s), image has " +
                                std::to_string(im.channels));
  if (im.px.size() != static_cast<std::size_t>(im.h) * im.w * channels)
    throw std::invalid_argument("image buffer does not match its dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write image: " + path);
  f << magic << "\n" << im.w << " " << im.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(im.px.data()), static_cast<std::streamsize>(im.px.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

}  // namespace

ImageU8 read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open image: " + path);
  char m0 = 0, m1 = 0;
  f.get(m0);
  f.get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw std::runtime_error("not a binary pgm/ppm: " + path);
  ImageU8 im;
  im.channels = (m1 == '5') ? 1 : 3;
  im.w = read_header_int(f, path);
  im.h = read_header_int(f, path);
  const int maxval = read_header_int(f, path);
  if (maxval <= 0 || maxval > 255) throw std::runtime_error("unsupported maxval in " + path);
  if (im.w <= 0 || im.h <= 0) throw std::runtime_error("bad dimensions in " + path);
  // single whitespace byte separates header from payload
  im.px.resize(static_cast<std::size_t>(im.h) * im.w * im.channels);
  f.read(reinterpret_cast<char*>(im.px.data()), static_cast<std::streamsize>(im.px.size()));
  if (f.gcount() != static_cast<std::streamsize>(im.px.size()))
    throw std::runtime_error("truncated image payload: " + path);
  return im;
}

void write_pgm(const std::string& path, const ImageU8& im) { write_pnm(path, im, 1, "P5"); }
void write_ppm(const std::string& path, const ImageU8& im) { write_pnm(path, im, 3, "P6"); }

diff::Array to_gray_array(const ImageU8& im) {
  diff::Array a({1, 1, im.h, im.w});
  const std::int64_t n = static_cast<std::int64_t>(im.h) * im.w;
  if (im.channels == 1) {
    for (std::int64_t i = 0; i < n; ++i) a.data[static_cast<std::size_t>(i)] = im.px[static_cast<std::size_t>(i)] / 255.0;
  } else if (im.channels == 3) {
    for (std::int64_t i = 0; i < n; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * 3;
      a.data[static_cast<std::size_t>(i)] = (im.px[o] + im.px[o + 1] + im.px[o + 2]) / (3.0 * 255.0);
    }
  } else {
    throw std::invalid_argument("to_gray_array: unsupported channel count");
  }
  return a;
}

ImageU8 from_gray_array(const diff::Array& a) {
  int h, w;
  if (a.ndim() == 4 && a.dim(0) == 1 && a.dim(1) == 1) {
    h = a.dim(2);
    w = a.dim(3);
  } else if (a.ndim() == 2) {
    h = a.dim(0);
    w = a.dim(1);
  } else {
    throw std::invalid_argument("from_gray_array: expects [1,1,H,W] or [H,W], got " +
                                diff::shape_str(a.shape));
  }
  ImageU8 im;
  im.h = h;
  im.w = w;
  im.channels = 1;
  im.px.resize(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < im.px.size(); ++i) {
    const double v = std::clamp(a.data[i], 0.0, 1.0);
    im.px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return im;
}

}  // namespace featkit::img
