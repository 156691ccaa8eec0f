#include "featkit/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "featkit/rng.hpp"
#include "json.hpp"

namespace featkit::net {

using diff::Array;
using diff::Tape;
using diff::Var;

int ArchConfig::scaled(int base) const {
  const double v = base * width_factor;
  const int iv = static_cast<int>(std::lround(v));
  if (iv < 1 || std::abs(v - iv) > 1e-9)
    throw std::invalid_argument("width factor " + std::to_string(width_factor) +
                                " does not give integer channels for base " + std::to_string(base));
  return iv;
}

std::vector<std::pair<std::string, std::vector<int>>> param_specs(const ArchConfig& a) {
  const int c1 = a.c1(), c2 = a.c2(), c3 = a.c3(), c4 = a.c4();
  const int tr = a.trunk_channels(), d = a.descriptor_dim();
  std::vector<std::pair<std::string, std::vector<int>>> s;
  auto conv = [&s](const std::string& name, int cout, int cin, int k) {
    s.emplace_back(name + ".w", std::vector<int>{cout, cin, k, k});
    s.emplace_back(name + ".b", std::vector<int>{cout});
  };
  conv("backbone.conv1", c1, 1, 3);
  conv("backbone.conv2", c1, c1, 3);
  conv("backbone.conv3", c2, c1, 3);
  conv("backbone.conv4", c2, c2, 3);
  conv("backbone.conv5", c3, c2, 3);
  conv("backbone.conv6", c3, c3, 3);
  conv("backbone.conv7", c4, c3, 3);
  conv("backbone.conv8", c4, c4, 3);
  conv("distill.head", c4, c4, 3);
  conv("distill.reinject", c4, c4, 3);
  conv("head.edge", 1, c1, 3);
  conv("head.det", 1, tr, 3);
  conv("head.att", 1, tr, 3);
  conv("head.des", d, tr, 3);
  s.emplace_back("eag.q.w", std::vector<int>{tr, tr, 1, 1});
  s.emplace_back("eag.k.w", std::vector<int>{tr, tr, 1, 1});
  s.emplace_back("eag.v.w", std::vector<int>{tr, tr, 1, 1});
  return s;
}

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed) {
  ModelParams p;
  p.arch = arch;
  const auto specs = param_specs(arch);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& [name, shape] = specs[i];
    Array a(shape);
    if (shape.size() == 4) {
      // kaiming-uniform, fan-in = cin*k*k
      const double fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
      const double bound = std::sqrt(6.0 / fan_in);
      rng::Rng r(rng::Rng::derive(seed, i));
      for (double& v : a.data) v = r.uniform(-bound, bound);
    }
    // biases stay zero
    p.arrays.emplace(name, std::move(a));
  }
  return p;
}

const Var& BoundParams::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

BoundParams bind(Tape& t, const ModelParams& p, bool requires_grad) {
  BoundParams b;
  b.tape = &t;
  b.arch = &p.arch;
  for (const auto& [name, arr] : p.arrays) b.vars.emplace(name, t.leaf(arr, requires_grad));
  return b;
}

namespace {

Var conv_relu(Var x, const BoundParams& p, const std::string& name) {
  return diff::relu(diff::conv2d(x, p.at(name + ".w"), p.at(name + ".b"), 1, 1));
}

Var head_conv(Var x, const BoundParams& p, const std::string& name) {
  return diff::conv2d(x, p.at(name + ".w"), p.at(name + ".b"), 1, 1);
}

}  // namespace

FeaturePyramid backbone_forward(Var image, const BoundParams& p) {
  const auto& sh = image.shape();
  if (sh.size() != 4 || sh[0] != 1 || sh[1] != 1)
    throw std::invalid_argument("backbone: image must be [1,1,H,W], got " + diff::shape_str(sh));
  const int h = sh[2], w = sh[3];
  if (h % 8 != 0 || w % 8 != 0 || h < 32 || w < 32)
    throw std::invalid_argument("backbone: H and W must be multiples of 8 and >= 32, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  FeaturePyramid pyr;
  Var x = conv_relu(image, p, "backbone.conv1");
  pyr.c1 = conv_relu(x, p, "backbone.conv2");
  x = diff::maxpool2(pyr.c1);
  x = conv_relu(x, p, "backbone.conv3");
  pyr.c2 = conv_relu(x, p, "backbone.conv4");
  x = diff::maxpool2(pyr.c2);
  x = conv_relu(x, p, "backbone.conv5");
  pyr.c3 = conv_relu(x, p, "backbone.conv6");
  x = diff::maxpool2(pyr.c3);
  Var c4o = conv_relu(x, p, "backbone.conv7");
  Var c4 = conv_relu(c4o, p, "backbone.conv8");
  DistillOut en = distill_enhance(c4, c4o, p);
  pyr.c4 = en.c4_enhanced;
  pyr.c4d = en.c4d;
  return pyr;
}

DistillOut distill_enhance(Var c4, Var c4o, const BoundParams& p) {
  DistillOut out;
  out.c4d = head_conv(c4o, p, "distill.head");
  out.c4_enhanced = diff::add(c4, head_conv(out.c4d, p, "distill.reinject"));
  return out;
}

Var detection_edge_enhance(Var c3, Var edge_pred) {
  const int h4 = c3.shape()[2], w4 = c3.shape()[3];
  Var e = diff::bilinear_resize(edge_pred, h4, w4);
  return diff::add(c3, diff::scale_by_map(c3, e));
}

Var eag_forward(Var f_in, Var edge_pred, const BoundParams& p) {
  const int c = f_in.shape()[1], h4 = f_in.shape()[2], w4 = f_in.shape()[3];
  Var e = diff::bilinear_resize(edge_pred, h4, w4);
  Var f_edge = diff::scale_by_map(f_in, e);
  Var q = diff::conv2d(f_edge, p.at("eag.q.w"), std::nullopt, 1, 0);
  Var k = diff::conv2d(f_edge, p.at("eag.k.w"), std::nullopt, 1, 0);
  Var v = diff::conv2d(f_edge, p.at("eag.v.w"), std::nullopt, 1, 0);
  Var qr = diff::chw_to_rows(q);
  Var kr = diff::chw_to_rows(k);
  Var vr = diff::chw_to_rows(v);
  Var scores = diff::mul_scalar(diff::matmul(qr, diff::transpose2d(kr)), 1.0 / std::sqrt(c));
  Var attn = diff::softmax_lastdim(scores);
  Var mixed = diff::matmul(attn, vr);
  return diff::add(f_in, diff::rows_to_chw(mixed, c, h4, w4));
}

NetworkOutputs heads_forward(const FeaturePyramid& pyr, const BoundParams& p) {
  const int h = pyr.c1.shape()[2], w = pyr.c1.shape()[3];
  const int h4 = h / 4, w4 = w / 4;
  NetworkOutputs out;
  out.pyramid = pyr;
  out.edge_pred = diff::sigmoid(head_conv(pyr.c1, p, "head.edge"));

  Var c3_enh = detection_edge_enhance(pyr.c3, out.edge_pred);
  Var c1d = diff::bilinear_resize(pyr.c1, h4, w4);
  Var c2d = diff::bilinear_resize(pyr.c2, h4, w4);
  Var c4u = diff::bilinear_resize(pyr.c4, h4, w4);
  Var trunk = diff::concat_channels({c1d, c2d, c3_enh, c4u});

  out.det_logits = diff::bilinear_resize(head_conv(trunk, p, "head.det"), h, w);
  out.att = diff::sigmoid(head_conv(trunk, p, "head.att"));
  Var gated = eag_forward(trunk, out.edge_pred, p);
  out.descriptors = head_conv(gated, p, "head.des");
  return out;
}

NetworkOutputs forward(Var image, const BoundParams& p) {
  return heads_forward(backbone_forward(image, p), p);
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[4] = {'T', 'S', 'C', '1'};
constexpr std::uint8_t kDtypeF64 = 3;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t& off) {
  if (off + 4 > buf.size()) throw std::runtime_error("checkpoint: truncated");
  const auto* b = reinterpret_cast<const unsigned char*>(buf.data() + off);
  off += 4;
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& p) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(p.arrays.size()));
  for (const auto& [name, arr] : p.arrays) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    buf.push_back(static_cast<char>(kDtypeF64));
    put_u32(buf, static_cast<std::uint32_t>(arr.shape.size()));
    for (int e : arr.shape) put_u32(buf, static_cast<std::uint32_t>(e));
    const std::size_t bytes = arr.data.size() * sizeof(double);
    const std::size_t at = buf.size();
    buf.resize(at + bytes);
    std::memcpy(buf.data() + at, arr.data.data(), bytes);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("short write: " + path);

  nlohmann::json side;
  side["width_factor"] = p.arch.width_factor;
  side["descriptor_dim"] = p.arch.descriptor_dim();
  std::ofstream js(path + ".json");
  if (!js) throw std::runtime_error("cannot write checkpoint sidecar: " + path + ".json");
  js << side.dump(2) << "\n";
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream js(path + ".json");
  if (!js) throw std::runtime_error("missing checkpoint sidecar: " + path + ".json");
  nlohmann::json side = nlohmann::json::parse(js);
  ModelParams p;
  p.arch.width_factor = side.at("width_factor").get<double>();

  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  std::size_t off = 4;
  const std::uint32_t count = get_u32(buf, off);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t nlen = get_u32(buf, off);
    if (off + nlen > buf.size()) throw std::runtime_error("checkpoint: truncated name");
    std::string name = buf.substr(off, nlen);
    off += nlen;
    if (off >= buf.size()) throw std::runtime_error("checkpoint: truncated");
    const std::uint8_t dt = static_cast<std::uint8_t>(buf[off++]);
    if (dt != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype");
    const std::uint32_t ndim = get_u32(buf, off);
    if (ndim == 0 || ndim > 8) throw std::runtime_error("checkpoint: implausible ndim");
    std::vector<int> shape;
    std::uint64_t numel = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint32_t e = get_u32(buf, off);
      shape.push_back(static_cast<int>(e));
      numel *= e;
    }
    const std::size_t bytes = numel * sizeof(double);
    if (off + bytes > buf.size()) throw std::runtime_error("checkpoint: truncated payload");
    Array a(shape);
    std::memcpy(a.data.data(), buf.data() + off, bytes);
    off += bytes;
    p.arrays.emplace(std::move(name), std::move(a));
  }
  if (off != buf.size()) throw std::runtime_error("checkpoint: trailing bytes");

  // every expected array must be present with the right shape
  for (const auto& [name, shape] : param_specs(p.arch)) {
    auto it = p.arrays.find(name);
    if (it == p.arrays.end()) throw std::runtime_error("checkpoint: missing parameter " + name);
    if (it->second.shape != shape)
      throw std::runtime_error("checkpoint: wrong shape for " + name);
  }
  return p;
}

}  // namespace featkit::net
