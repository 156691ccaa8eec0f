#include "featkit/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "featkit/image_io.hpp"

namespace featkit::teacher {

int SemanticGrouping::n_groups() const {
  std::uint16_t mx = 0;
  for (std::uint16_t v : labels) mx = std::max(mx, v);
  return mx;
}

diff::Array relation_matrix(const diff::Array& f) {
  if (f.ndim() != 2) throw std::invalid_argument("relation_matrix: expects [rows, C]");
  const int p = f.dim(0), c = f.dim(1);
  for (double v : f.data)
    if (!std::isfinite(v)) throw std::invalid_argument("relation_matrix: non-finite feature value");
  std::vector<double> norm(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) {
    double s = 0;
    for (int k = 0; k < c; ++k) {
      const double v = f.data[static_cast<std::size_t>(i) * c + k];
      s += v * v;
    }
    norm[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  diff::Array r({p, p});
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j <= i; ++j) {
      double v = 0.0;
      if (norm[static_cast<std::size_t>(i)] > 0.0 && norm[static_cast<std::size_t>(j)] > 0.0) {
        double dot = 0;
        for (int k = 0; k < c; ++k)
          dot += f.data[static_cast<std::size_t>(i) * c + k] * f.data[static_cast<std::size_t>(j) * c + k];
        v = dot / (norm[static_cast<std::size_t>(i)] * norm[static_cast<std::size_t>(j)]);
      }
      r.data[static_cast<std::size_t>(i) * p + j] = v;
      r.data[static_cast<std::size_t>(j) * p + i] = v;
    }
  }
  return r;
}

diff::Array relation_matrix(const TeacherFeatureMap& f) {
  return relation_matrix(diff::Array::from({f.rows, f.cols}, f.f));
}

diff::Var relation_matrix(diff::Var f) {
  // cosine map = normalized rows times their own transpose; zero rows stay
  // zero through the normalize, which zeroes their diagonal too
  diff::Var n = diff::l2_normalize_lastdim(f);
  return diff::matmul(n, diff::transpose2d(n));
}

PairLabel grouping_pair_label(const SemanticGrouping& g, int x1, int y1, int x2, int y2) {
  if (x1 < 0 || x1 >= g.w || y1 < 0 || y1 >= g.h || x2 < 0 || x2 >= g.w || y2 < 0 || y2 >= g.h)
    throw std::out_of_range("grouping_pair_label: point outside image");
  if (x1 == x2 && y1 == y2) return PairLabel::ignore_pair;
  const std::uint16_t a = g.at(x1, y1);
  const std::uint16_t b = g.at(x2, y2);
  if (a == 0 || b == 0) return PairLabel::ignore_pair;
  return a == b ? PairLabel::positive : PairLabel::negative;
}

void validate_feature_rows(const TeacherFeatureMap& f, int img_h, int img_w) {
  const int want = (img_h / 8) * (img_w / 8);
  if (f.rows != want)
    throw std::invalid_argument("feature rows " + std::to_string(f.rows) +
                                " do not match (H/8)*(W/8) = " + std::to_string(want));
}

// ---- TSG1 container ----

namespace {

constexpr char kMagic[4] = {'T', 'S', 'G', '1'};

std::size_t dtype_size(std::uint8_t dt) {
  switch (dt) {
    case dtype::f32: return 4;
    case dtype::u16: return 2;
    case dtype::u8: return 1;
    default: throw std::runtime_error("signal: unknown dtype " + std::to_string(dt));
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& buf, std::size_t off) {
  return static_cast<std::uint32_t>(buf[off]) | (static_cast<std::uint32_t>(buf[off + 1]) << 8) |
         (static_cast<std::uint32_t>(buf[off + 2]) << 16) |
         (static_cast<std::uint32_t>(buf[off + 3]) << 24);
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open signal file: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff len = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(len));
  f.read(reinterpret_cast<char*>(buf.data()), len);
  if (f.gcount() != len) throw std::runtime_error("short read: " + path);
  return buf;
}

}  // namespace

std::uint64_t SignalBlob::numel() const {
  std::uint64_t n = 1;
  for (std::uint32_t e : extents) n *= e;
  return n;
}

std::vector<std::uint8_t> serialize_blob(const SignalBlob& b) {
  if (b.extents.empty()) throw std::invalid_argument("signal: no extents");
  for (std::uint32_t e : b.extents)
    if (e == 0) throw std::invalid_argument("signal: zero extent");
  if (b.payload.size() != b.numel() * dtype_size(b.dtype))
    throw std::invalid_argument("signal: payload size does not match extents");
  std::vector<std::uint8_t> out;
  out.reserve(12 + 4 * b.extents.size() + b.payload.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  out.push_back(b.kind);
  out.push_back(b.dtype);
  out.push_back(0);
  out.push_back(0);
  put_u32(out, static_cast<std::uint32_t>(b.extents.size()));
  for (std::uint32_t e : b.extents) put_u32(out, e);
  out.insert(out.end(), b.payload.begin(), b.payload.end());
  return out;
}

SignalBlob parse_blob(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 12) throw std::runtime_error("signal: truncated header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw std::runtime_error("signal: bad magic");
  SignalBlob b;
  b.kind = buf[4];
  b.dtype = buf[5];
  const std::uint32_t ndim = get_u32(buf, 8);
  if (ndim == 0 || ndim > 8) throw std::runtime_error("signal: implausible ndim");
  if (buf.size() < 12 + 4ull * ndim) throw std::runtime_error("signal: truncated header");
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const std::uint32_t e = get_u32(buf, 12 + 4ull * i);
    if (e == 0) throw std::runtime_error("signal: zero extent");
    b.extents.push_back(e);
  }
  const std::size_t off = 12 + 4ull * ndim;
  const std::uint64_t want = b.numel() * dtype_size(b.dtype);
  if (buf.size() - off < want) throw std::runtime_error("signal: truncated payload");
  if (buf.size() - off > want) throw std::runtime_error("signal: payload larger than header dims");
  b.payload.assign(buf.begin() + static_cast<std::ptrdiff_t>(off), buf.end());
  return b;
}

SignalBlob read_blob_file(const std::string& path) { return parse_blob(slurp(path)); }

void write_blob_file(const std::string& path, const SignalBlob& b) {
  const std::vector<std::uint8_t> buf = serialize_blob(b);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write signal file: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

namespace {

void expect(const SignalBlob& b, std::uint8_t want_kind, std::uint8_t want_dtype,
            std::size_t want_ndim, const std::string& what) {
  if (b.kind != want_kind)
    throw std::runtime_error("signal: expected " + what + " (kind " + std::to_string(want_kind) +
                             "), file has kind " + std::to_string(b.kind));
  if (b.dtype != want_dtype) throw std::runtime_error("signal: wrong dtype for " + what);
  if (b.extents.size() != want_ndim) throw std::runtime_error("signal: wrong ndim for " + what);
}

}  // namespace

TeacherFeatureMap read_teacher_feature(const std::string& path) {
  SignalBlob b = read_blob_file(path);
  expect(b, kind::teacher_feature, dtype::f32, 2, "guidance feature");
  TeacherFeatureMap f;
  f.rows = static_cast<int>(b.extents[0]);
  f.cols = static_cast<int>(b.extents[1]);
  f.f.resize(b.numel());
  for (std::size_t i = 0; i < f.f.size(); ++i) {
    float v;
    std::memcpy(&v, &b.payload[i * 4], 4);
    f.f[i] = static_cast<double>(v);
  }
  return f;
}

void write_teacher_feature(const std::string& path, const TeacherFeatureMap& f) {
  SignalBlob b;
  b.kind = kind::teacher_feature;
  b.dtype = dtype::f32;
  b.extents = {static_cast<std::uint32_t>(f.rows), static_cast<std::uint32_t>(f.cols)};
  b.payload.resize(f.f.size() * 4);
  for (std::size_t i = 0; i < f.f.size(); ++i) {
    const float v = static_cast<float>(f.f[i]);
    std::memcpy(&b.payload[i * 4], &v, 4);
  }
  write_blob_file(path, b);
}

SemanticGrouping read_grouping(const std::string& path) {
  SignalBlob b = read_blob_file(path);
  expect(b, kind::grouping, dtype::u16, 2, "grouping labels");
  SemanticGrouping g;
  g.h = static_cast<int>(b.extents[0]);
  g.w = static_cast<int>(b.extents[1]);
  g.labels.resize(b.numel());
  for (std::size_t i = 0; i < g.labels.size(); ++i)
    g.labels[i] = static_cast<std::uint16_t>(b.payload[i * 2] |
                                             (static_cast<std::uint16_t>(b.payload[i * 2 + 1]) << 8));
  // ids must be contiguous 1..N
  const int n = g.n_groups();
  std::vector<bool> seen(static_cast<std::size_t>(n) + 1, false);
  for (std::uint16_t v : g.labels) seen[v] = true;
  for (int i = 1; i <= n; ++i)
    if (!seen[static_cast<std::size_t>(i)])
      throw std::runtime_error("grouping: id " + std::to_string(i) + " missing (ids must be 1..N)");
  return g;
}

void write_grouping(const std::string& path, const SemanticGrouping& g) {
  SignalBlob b;
  b.kind = kind::grouping;
  b.dtype = dtype::u16;
  b.extents = {static_cast<std::uint32_t>(g.h), static_cast<std::uint32_t>(g.w)};
  b.payload.resize(g.labels.size() * 2);
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    b.payload[i * 2] = static_cast<std::uint8_t>(g.labels[i] & 0xff);
    b.payload[i * 2 + 1] = static_cast<std::uint8_t>(g.labels[i] >> 8);
  }
  write_blob_file(path, b);
}

EdgeMap read_edge(const std::string& path) {
  SignalBlob b = read_blob_file(path);
  expect(b, kind::edge, dtype::u8, 2, "edge map");
  EdgeMap e;
  e.h = static_cast<int>(b.extents[0]);
  e.w = static_cast<int>(b.extents[1]);
  e.e = std::move(b.payload);
  for (std::uint8_t v : e.e)
    if (v > 1) throw std::runtime_error("edge map: values must be 0/1");
  return e;
}

void write_edge(const std::string& path, const EdgeMap& e) {
  for (std::uint8_t v : e.e)
    if (v > 1) throw std::invalid_argument("edge map: values must be 0/1");
  SignalBlob b;
  b.kind = kind::edge;
  b.dtype = dtype::u8;
  b.extents = {static_cast<std::uint32_t>(e.h), static_cast<std::uint32_t>(e.w)};
  b.payload = e.e;
  write_blob_file(path, b);
}

void write_edge_pgm(const std::string& path, const EdgeMap& e) {
  img::ImageU8 im;
  im.h = e.h;
  im.w = e.w;
  im.channels = 1;
  im.px.resize(e.e.size());
  for (std::size_t i = 0; i < e.e.size(); ++i) im.px[i] = e.e[i] ? 255 : 0;
  img::write_pgm(path, im);
}

}  // namespace featkit::teacher
