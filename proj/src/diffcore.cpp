#include "featkit/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace featkit::diff {

Array::Array(std::vector<int> s, double fill) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
}

Array Array::from(std::vector<int> s, std::vector<double> d) {
  if (shape_numel(s) != static_cast<std::int64_t>(d.size()))
    throw std::invalid_argument("Array::from: data length " + std::to_string(d.size()) +
                                " does not match shape " + shape_str(s));
  Array a;
  a.shape = std::move(s);
  a.data = std::move(d);
  return a;
}

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw std::invalid_argument("shape extent must be positive, got " + std::to_string(e));
    n *= e;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const Array& Var::value() const { return tape_->value_at(idx_); }
const Array& Var::grad() const { return tape_->grad_at(idx_); }
bool Var::requires_grad() const { return tape_->requires_at(idx_); }
const std::vector<int>& Var::shape() const { return value().shape; }

Var Tape::leaf(Array v, bool requires_grad) {
  return Var(this, add_node(std::move(v), requires_grad && grad_enabled_));
}

int Tape::add_node(Array value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Array{}, requires_grad, nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::set_back(int idx, std::function<void()> fn) {
  nodes_[static_cast<std::size_t>(idx)].back = std::move(fn);
}

Array& Tape::grad_at(int idx) {
  Node& n = nodes_[static_cast<std::size_t>(idx)];
  if (n.grad.data.empty() && n.value.numel() > 0) n.grad = Array(n.value.shape, 0.0);
  return n.grad;
}

void Tape::accum(int idx, const Array& g) {
  Array& dst = grad_at(idx);
  const std::size_t n = dst.data.size();
  for (std::size_t i = 0; i < n; ++i) dst.data[i] += g.data[i];
}

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (value_at(loss.idx()).numel() != 1)
    throw std::invalid_argument("backward: loss must have exactly one element, got shape " +
                                shape_str(value_at(loss.idx()).shape));
  for (int i = 0; i <= loss.idx(); ++i)
    if (nodes_[static_cast<std::size_t>(i)].requires_grad) grad_at(i);
  grad_at(loss.idx()).data[0] = 1.0;
  for (int i = loss.idx(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.back) n.back();
  }
}

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("op on default-constructed Var");
  return *a.tape();
}

void check_same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands live on different tapes");
}

void check_same_shape(const char* op, const Var& a, const Var& b) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

bool wants_grad(Tape& t, std::initializer_list<Var> ins) {
  if (!t.grad_enabled()) return false;
  for (const Var& v : ins)
    if (v.requires_grad()) return true;
  return false;
}

// Elementwise binary op helper.
template <typename FwdFn, typename BackFn>
Var binary_op(const char* name, Var a, Var b, FwdFn fwd, BackFn back) {
  check_same_tape(a, b);
  check_same_shape(name, a, b);
  Tape& t = tape_of(a);
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(av.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) out.data[i] = fwd(av.data[i], bv.data[i]);
  const bool rg = wants_grad(t, {a, b});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, ai = a.idx(), bi = b.idx(), oi = o.idx(), back]() {
      const Array& g = t.grad_at(oi);
      const Array& av2 = t.value_at(ai);
      const Array& bv2 = t.value_at(bi);
      const bool need_a = t.requires_at(ai);
      const bool need_b = t.requires_at(bi);
      Array* ga = need_a ? &t.grad_at(ai) : nullptr;
      Array* gb = need_b ? &t.grad_at(bi) : nullptr;
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        double da = 0, db = 0;
        back(av2.data[i], bv2.data[i], g.data[i], da, db);
        if (ga) ga->data[i] += da;
        if (gb) gb->data[i] += db;
      }
    });
  }
  return o;
}

// Elementwise unary op helper; derivative receives (x, y, g).
template <typename FwdFn, typename BackFn>
Var unary_op(Var x, FwdFn fwd, BackFn back) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  Array out(xv.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(xv.data[i]);
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), back]() {
      const Array& g = t.grad_at(oi);
      const Array& xv2 = t.value_at(xi);
      const Array& yv = t.value_at(oi);
      Array& gx = t.grad_at(xi);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gx.data[i] += back(xv2.data[i], yv.data[i]) * g.data[i];
    });
  }
  return o;
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) { da = g; db = g; });
}

Var sub(Var a, Var b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) { da = g; db = -g; });
}

Var mul(Var a, Var b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; });
}

Var div(Var a, Var b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Var add_scalar(Var a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(Var a, double s) {
  return unary_op(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var relu(Var x) {
  return unary_op(x, [](double v) { return v > 0 ? v : 0.0; },
                  [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary_op(x,
                  [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                                                : std::exp(v) / (1.0 + std::exp(v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var abs(Var x) {
  return unary_op(x, [](double v) { return std::abs(v); },
                  [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var sqrt(Var x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  double s = 0;
  for (double v : xv.data) s += v;
  Array out = Array::from({1}, {s});
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx()]() {
      const double g = t.grad_at(oi).data[0];
      Array& gx = t.grad_at(xi);
      for (double& v : gx.data) v += g;
    });
  }
  return o;
}

Var mean(Var x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  return mul_scalar(sum(x), inv);
}

Var matmul(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2)
    throw std::invalid_argument("matmul: expects 2-d operands, got " + shape_str(av.shape) +
                                " and " + shape_str(bv.shape));
  const int m = av.dim(0), k = av.dim(1), k2 = bv.dim(0), n = bv.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dims differ, " + shape_str(av.shape) + " x " +
                                shape_str(bv.shape));
  Array out({m, n});
  for (int i = 0; i < m; ++i) {
    const double* arow = &av.data[static_cast<std::size_t>(i) * k];
    double* crow = &out.data[static_cast<std::size_t>(i) * n];
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = &bv.data[static_cast<std::size_t>(kk) * n];
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  const bool rg = wants_grad(t, {a, b});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, ai = a.idx(), bi = b.idx(), oi = o.idx(), m, k, n]() {
      const Array& g = t.grad_at(oi);
      const Array& av2 = t.value_at(ai);
      const Array& bv2 = t.value_at(bi);
      if (t.requires_at(ai)) {
        Array& ga = t.grad_at(ai);
        // dA = G * B^T
        for (int i = 0; i < m; ++i) {
          const double* grow = &g.data[static_cast<std::size_t>(i) * n];
          double* garow = &ga.data[static_cast<std::size_t>(i) * k];
          for (int kk = 0; kk < k; ++kk) {
            const double* brow = &bv2.data[static_cast<std::size_t>(kk) * n];
            double acc = 0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
          }
        }
      }
      if (t.requires_at(bi)) {
        Array& gb = t.grad_at(bi);
        // dB = A^T * G
        for (int i = 0; i < m; ++i) {
          const double* arow = &av2.data[static_cast<std::size_t>(i) * k];
          const double* grow = &g.data[static_cast<std::size_t>(i) * n];
          for (int kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            if (aik == 0.0) continue;
            double* gbrow = &gb.data[static_cast<std::size_t>(kk) * n];
            for (int j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return o;
}

Var transpose2d(Var a) {
  Tape& t = tape_of(a);
  const Array& av = a.value();
  if (av.ndim() != 2) throw std::invalid_argument("transpose2d: expects 2-d, got " + shape_str(av.shape));
  const int m = av.dim(0), n = av.dim(1);
  Array out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.data[static_cast<std::size_t>(j) * m + i] = av.data[static_cast<std::size_t>(i) * n + j];
  const bool rg = wants_grad(t, {a});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, ai = a.idx(), oi = o.idx(), m, n]() {
      const Array& g = t.grad_at(oi);
      Array& ga = t.grad_at(ai);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i)
          ga.data[static_cast<std::size_t>(i) * n + j] += g.data[static_cast<std::size_t>(j) * m + i];
    });
  }
  return o;
}

Var reshape(Var a, std::vector<int> shape) {
  Tape& t = tape_of(a);
  const Array& av = a.value();
  if (shape_numel(shape) != av.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(av.shape) + " as " +
                                shape_str(shape));
  Array out;
  out.shape = std::move(shape);
  out.data = av.data;
  const bool rg = wants_grad(t, {a});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, ai = a.idx(), oi = o.idx()]() {
      const Array& g = t.grad_at(oi);
      Array& ga = t.grad_at(ai);
      for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
    });
  }
  return o;
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  Tape& t = tape_of(xs[0]);
  const Array& first = xs[0].value();
  if (first.ndim() != 4) throw std::invalid_argument("concat_channels: expects [N,C,H,W]");
  const int n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int ctot = 0;
  for (const Var& x : xs) {
    check_same_tape(xs[0], x);
    const Array& xv = x.value();
    if (xv.ndim() != 4 || xv.dim(0) != n || xv.dim(2) != h || xv.dim(3) != w)
      throw std::invalid_argument("concat_channels: incompatible shape " + shape_str(xv.shape));
    ctot += xv.dim(1);
  }
  Array out({n, ctot, h, w});
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  std::int64_t coff = 0;
  for (const Var& x : xs) {
    const Array& xv = x.value();
    const int c = xv.dim(1);
    for (int b = 0; b < n; ++b)
      std::copy(xv.data.begin() + b * c * hw, xv.data.begin() + (b + 1) * c * hw,
                out.data.begin() + (b * ctot + coff) * hw);
    coff += c;
  }
  bool rg = t.grad_enabled();
  if (rg) {
    rg = false;
    for (const Var& x : xs) rg = rg || x.requires_grad();
  }
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    std::vector<int> idxs;
    std::vector<int> chans;
    for (const Var& x : xs) {
      idxs.push_back(x.idx());
      chans.push_back(x.value().dim(1));
    }
    t.set_back(o.idx(), [&t, idxs, chans, oi = o.idx(), n, hw, ctot]() {
      const Array& g = t.grad_at(oi);
      std::int64_t coff2 = 0;
      for (std::size_t ii = 0; ii < idxs.size(); ++ii) {
        const int c = chans[ii];
        if (t.requires_at(idxs[ii])) {
          Array& gx = t.grad_at(idxs[ii]);
          for (int b = 0; b < n; ++b) {
            const double* src = &g.data[static_cast<std::size_t>((b * ctot + coff2) * hw)];
            double* dst = &gx.data[static_cast<std::size_t>(b * c * hw)];
            for (std::int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
          }
        }
        coff2 += c;
      }
    });
  }
  return o;
}

Var scale_by_map(Var x, Var m) {
  check_same_tape(x, m);
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  const Array& mv = m.value();
  if (xv.ndim() != 4 || mv.ndim() != 4 || mv.dim(1) != 1 || xv.dim(0) != mv.dim(0) ||
      xv.dim(2) != mv.dim(2) || xv.dim(3) != mv.dim(3))
    throw std::invalid_argument("scale_by_map: need x [N,C,H,W] and map [N,1,H,W], got " +
                                shape_str(xv.shape) + " and " + shape_str(mv.shape));
  const int n = xv.dim(0), c = xv.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Array out(xv.shape);
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* xp = &xv.data[static_cast<std::size_t>((b * c + ch) * hw)];
      const double* mp = &mv.data[static_cast<std::size_t>(b * hw)];
      double* op = &out.data[static_cast<std::size_t>((b * c + ch) * hw)];
      for (std::int64_t i = 0; i < hw; ++i) op[i] = xp[i] * mp[i];
    }
  const bool rg = wants_grad(t, {x, m});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), mi = m.idx(), oi = o.idx(), n, c, hw]() {
      const Array& g = t.grad_at(oi);
      const Array& xv2 = t.value_at(xi);
      const Array& mv2 = t.value_at(mi);
      const bool need_x = t.requires_at(xi);
      const bool need_m = t.requires_at(mi);
      Array* gx = need_x ? &t.grad_at(xi) : nullptr;
      Array* gm = need_m ? &t.grad_at(mi) : nullptr;
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t xoff = static_cast<std::size_t>((b * c + ch) * hw);
          const std::size_t moff = static_cast<std::size_t>(b * hw);
          for (std::int64_t i = 0; i < hw; ++i) {
            const double gi = g.data[xoff + static_cast<std::size_t>(i)];
            if (gx) gx->data[xoff + static_cast<std::size_t>(i)] += gi * mv2.data[moff + static_cast<std::size_t>(i)];
            if (gm) gm->data[moff + static_cast<std::size_t>(i)] += gi * xv2.data[xoff + static_cast<std::size_t>(i)];
          }
        }
    });
  }
  return o;
}

Var l2_normalize_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("l2_normalize_lastdim: scalar input");
  const int k = xv.dim(xv.ndim() - 1);
  const std::int64_t rows = xv.numel() / k;
  Array out(xv.shape);
  std::vector<double> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xp = &xv.data[static_cast<std::size_t>(r * k)];
    double s = 0;
    for (int i = 0; i < k; ++i) s += xp[i] * xp[i];
    const double nrm = std::sqrt(s);
    norms[static_cast<std::size_t>(r)] = nrm;
    double* op = &out.data[static_cast<std::size_t>(r * k)];
    if (nrm == 0.0) {
      // zero row stays zero, with zero gradient
      for (int i = 0; i < k; ++i) op[i] = 0.0;
    } else {
      for (int i = 0; i < k; ++i) op[i] = xp[i] / nrm;
    }
  }
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), k, rows, norms]() {
      const Array& g = t.grad_at(oi);
      const Array& yv = t.value_at(oi);
      Array& gx = t.grad_at(xi);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double nrm = norms[static_cast<std::size_t>(r)];
        if (nrm == 0.0) continue;
        const double* gp = &g.data[static_cast<std::size_t>(r * k)];
        const double* yp = &yv.data[static_cast<std::size_t>(r * k)];
        double dot = 0;
        for (int i = 0; i < k; ++i) dot += gp[i] * yp[i];
        double* gxp = &gx.data[static_cast<std::size_t>(r * k)];
        for (int i = 0; i < k; ++i) gxp[i] += (gp[i] - yp[i] * dot) / nrm;
      }
    });
  }
  return o;
}

Var euclidean_distance_matrix(Var a, Var b) {
  check_same_tape(a, b);
  Tape& t = tape_of(a);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(1))
    throw std::invalid_argument("euclidean_distance_matrix: need [P,D] and [Q,D], got " +
                                shape_str(av.shape) + " and " + shape_str(bv.shape));
  const int p = av.dim(0), q = bv.dim(0), d = av.dim(1);
  constexpr double kEps = 1e-18;  // keeps the gradient finite at distance 0
  Array out({p, q});
  for (int i = 0; i < p; ++i) {
    const double* ap = &av.data[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < q; ++j) {
      const double* bp = &bv.data[static_cast<std::size_t>(j) * d];
      double s = 0;
      for (int k = 0; k < d; ++k) {
        const double diff = ap[k] - bp[k];
        s += diff * diff;
      }
      out.data[static_cast<std::size_t>(i) * q + j] = std::sqrt(s + kEps);
    }
  }
  const bool rg = wants_grad(t, {a, b});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, ai = a.idx(), bi = b.idx(), oi = o.idx(), p, q, d]() {
      const Array& g = t.grad_at(oi);
      const Array& dv = t.value_at(oi);
      const Array& av2 = t.value_at(ai);
      const Array& bv2 = t.value_at(bi);
      const bool need_a = t.requires_at(ai);
      const bool need_b = t.requires_at(bi);
      Array* ga = need_a ? &t.grad_at(ai) : nullptr;
      Array* gb = need_b ? &t.grad_at(bi) : nullptr;
      for (int i = 0; i < p; ++i) {
        const double* ap = &av2.data[static_cast<std::size_t>(i) * d];
        for (int j = 0; j < q; ++j) {
          const double gij = g.data[static_cast<std::size_t>(i) * q + j];
          if (gij == 0.0) continue;
          const double dij = dv.data[static_cast<std::size_t>(i) * q + j];
          const double* bp = &bv2.data[static_cast<std::size_t>(j) * d];
          const double scale = gij / dij;
          for (int k = 0; k < d; ++k) {
            const double diff = (ap[k] - bp[k]) * scale;
            if (ga) ga->data[static_cast<std::size_t>(i) * d + k] += diff;
            if (gb) gb->data[static_cast<std::size_t>(j) * d + k] -= diff;
          }
        }
      }
    });
  }
  return o;
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  if (xv.ndim() < 1) throw std::invalid_argument("softmax_lastdim: scalar input");
  const int k = xv.dim(xv.ndim() - 1);
  const std::int64_t rows = xv.numel() / k;
  Array out(xv.shape);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xp = &xv.data[static_cast<std::size_t>(r * k)];
    double* op = &out.data[static_cast<std::size_t>(r * k)];
    double mx = xp[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, xp[i]);
    double s = 0;
    for (int i = 0; i < k; ++i) {
      op[i] = std::exp(xp[i] - mx);
      s += op[i];
    }
    for (int i = 0; i < k; ++i) op[i] /= s;
  }
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), k, rows]() {
      const Array& g = t.grad_at(oi);
      const Array& yv = t.value_at(oi);
      Array& gx = t.grad_at(xi);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* gp = &g.data[static_cast<std::size_t>(r * k)];
        const double* yp = &yv.data[static_cast<std::size_t>(r * k)];
        double dot = 0;
        for (int i = 0; i < k; ++i) dot += gp[i] * yp[i];
        double* gxp = &gx.data[static_cast<std::size_t>(r * k)];
        for (int i = 0; i < k; ++i) gxp[i] += yp[i] * (gp[i] - dot);
      }
    });
  }
  return o;
}

Var select_elements(Var m, const std::vector<std::pair<int, int>>& idx) {
  Tape& t = tape_of(m);
  const Array& mv = m.value();
  if (mv.ndim() != 2) throw std::invalid_argument("select_elements: expects 2-d input");
  const int rows = mv.dim(0), cols = mv.dim(1);
  Array out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto [r, c] = idx[i];
    if (r < 0 || r >= rows || c < 0 || c >= cols)
      throw std::invalid_argument("select_elements: index (" + std::to_string(r) + "," +
                                  std::to_string(c) + ") outside " + shape_str(mv.shape));
    out.data[i] = mv.data[static_cast<std::size_t>(r) * cols + c];
  }
  const bool rg = wants_grad(t, {m});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, mi = m.idx(), oi = o.idx(), idx, cols]() {
      const Array& g = t.grad_at(oi);
      Array& gm = t.grad_at(mi);
      for (std::size_t i = 0; i < idx.size(); ++i)
        gm.data[static_cast<std::size_t>(idx[i].first) * cols + idx[i].second] += g.data[i];
    });
  }
  return o;
}

Var chw_to_rows(Var x) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  int c, h, w;
  if (xv.ndim() == 4 && xv.dim(0) == 1) {
    c = xv.dim(1); h = xv.dim(2); w = xv.dim(3);
  } else if (xv.ndim() == 3) {
    c = xv.dim(0); h = xv.dim(1); w = xv.dim(2);
  } else {
    throw std::invalid_argument("chw_to_rows: expects [C,H,W] or [1,C,H,W], got " + shape_str(xv.shape));
  }
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  Array out({static_cast<int>(hw), c});
  for (int ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p)
      out.data[static_cast<std::size_t>(p * c + ch)] = xv.data[static_cast<std::size_t>(ch * hw + p)];
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), c, hw]() {
      const Array& g = t.grad_at(oi);
      Array& gx = t.grad_at(xi);
      for (int ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < hw; ++p)
          gx.data[static_cast<std::size_t>(ch * hw + p)] += g.data[static_cast<std::size_t>(p * c + ch)];
    });
  }
  return o;
}

Var rows_to_chw(Var x, int c, int h, int w) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  if (xv.ndim() != 2 || xv.dim(0) != hw || xv.dim(1) != c)
    throw std::invalid_argument("rows_to_chw: expects [" + std::to_string(hw) + "," +
                                std::to_string(c) + "], got " + shape_str(xv.shape));
  Array out({1, c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (std::int64_t p = 0; p < hw; ++p)
      out.data[static_cast<std::size_t>(ch * hw + p)] = xv.data[static_cast<std::size_t>(p * c + ch)];
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), c, hw]() {
      const Array& g = t.grad_at(oi);
      Array& gx = t.grad_at(xi);
      for (int ch = 0; ch < c; ++ch)
        for (std::int64_t p = 0; p < hw; ++p)
          gx.data[static_cast<std::size_t>(p * c + ch)] += g.data[static_cast<std::size_t>(ch * hw + p)];
    });
  }
  return o;
}

Var conv2d(Var input, Var kernel, std::optional<Var> bias, int stride, int padding) {
  check_same_tape(input, kernel);
  Tape& t = tape_of(input);
  const Array& iv = input.value();
  const Array& kv = kernel.value();
  if (iv.ndim() != 4) throw std::invalid_argument("conv2d: input must be [N,Cin,H,W], got " + shape_str(iv.shape));
  if (kv.ndim() != 4) throw std::invalid_argument("conv2d: kernel must be [Cout,Cin,k,k], got " + shape_str(kv.shape));
  const int n = iv.dim(0), cin = iv.dim(1), h = iv.dim(2), w = iv.dim(3);
  const int cout = kv.dim(0), kcin = kv.dim(1), kh = kv.dim(2), kw = kv.dim(3);
  if (kh != kw || kh % 2 == 0) throw std::invalid_argument("conv2d: kernel must be odd and square, got " + shape_str(kv.shape));
  if (cin != kcin)
    throw std::invalid_argument("conv2d: input channels (" + std::to_string(cin) +
                                ") do not match kernel Cin (" + std::to_string(kcin) + ")");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  if (bias) {
    check_same_tape(input, *bias);
    const Array& bv = bias->value();
    if (bv.numel() != cout)
      throw std::invalid_argument("conv2d: bias length " + std::to_string(bv.numel()) +
                                  " does not match Cout " + std::to_string(cout));
  }
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output for input " + shape_str(iv.shape));

  Array out({n, cout, oh, ow});
  const std::int64_t ihw = static_cast<std::int64_t>(h) * w;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  const std::int64_t ksz = static_cast<std::int64_t>(kh) * kw;
  for (int b = 0; b < n; ++b) {
    for (int co = 0; co < cout; ++co) {
      const double bval = bias ? bias->value().data[static_cast<std::size_t>(co)] : 0.0;
      double* op = &out.data[static_cast<std::size_t>((b * cout + co) * ohw)];
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bval;
          const int iy0 = oy * stride - padding;
          const int ix0 = ox * stride - padding;
          for (int ci = 0; ci < cin; ++ci) {
            const double* ip = &iv.data[static_cast<std::size_t>((b * cin + ci) * ihw)];
            const double* kp = &kv.data[static_cast<std::size_t>((co * cin + ci) * ksz)];
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= w) continue;
                acc += ip[static_cast<std::size_t>(iy) * w + ix] * kp[static_cast<std::size_t>(ky) * kw + kx];
              }
            }
          }
          op[static_cast<std::size_t>(oy) * ow + ox] = acc;
        }
      }
    }
  }
  bool rg = t.grad_enabled() && (input.requires_grad() || kernel.requires_grad() ||
                                 (bias && bias->requires_grad()));
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    const int bias_idx = bias ? bias->idx() : -1;
    t.set_back(o.idx(), [&t, ii = input.idx(), ki = kernel.idx(), bias_idx, oi = o.idx(), n, cin,
                         cout, h, w, oh, ow, kh, kw, stride, padding, ihw, ohw, ksz]() {
      const Array& g = t.grad_at(oi);
      const Array& iv2 = t.value_at(ii);
      const Array& kv2 = t.value_at(ki);
      const bool need_in = t.requires_at(ii);
      const bool need_k = t.requires_at(ki);
      const bool need_b = bias_idx >= 0 && t.requires_at(bias_idx);
      Array* gin = need_in ? &t.grad_at(ii) : nullptr;
      Array* gk = need_k ? &t.grad_at(ki) : nullptr;
      Array* gb = need_b ? &t.grad_at(bias_idx) : nullptr;
      for (int b = 0; b < n; ++b) {
        for (int co = 0; co < cout; ++co) {
          const double* gp = &g.data[static_cast<std::size_t>((b * cout + co) * ohw)];
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              const double gv = gp[static_cast<std::size_t>(oy) * ow + ox];
              if (gv == 0.0) continue;
              if (gb) gb->data[static_cast<std::size_t>(co)] += gv;
              const int iy0 = oy * stride - padding;
              const int ix0 = ox * stride - padding;
              for (int ci = 0; ci < cin; ++ci) {
                const std::size_t ioff = static_cast<std::size_t>((b * cin + ci) * ihw);
                const std::size_t koff = static_cast<std::size_t>((co * cin + ci) * ksz);
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= w) continue;
                    const std::size_t ipos = ioff + static_cast<std::size_t>(iy) * w + ix;
                    const std::size_t kpos = koff + static_cast<std::size_t>(ky) * kw + kx;
                    if (gin) gin->data[ipos] += gv * kv2.data[kpos];
                    if (gk) gk->data[kpos] += gv * iv2.data[ipos];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return o;
}

Var maxpool2(Var x) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("maxpool2: expects [N,C,H,W], got " + shape_str(xv.shape));
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw std::invalid_argument("maxpool2: H and W must be even, got " + shape_str(xv.shape));
  const int oh = h / 2, ow = w / 2;
  Array out({n, c, oh, ow});
  std::vector<std::int64_t> argmax(out.data.size());
  const std::int64_t ihw = static_cast<std::int64_t>(h) * w;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t ioff = static_cast<std::size_t>((b * c + ch) * ihw);
      const std::size_t ooff = static_cast<std::size_t>((b * c + ch) * ohw);
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          // first max in row-major scan order wins on ties
          double best = -1e300;
          std::int64_t bestpos = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t pos = ioff + static_cast<std::size_t>(2 * oy + dy) * w + (2 * ox + dx);
              if (xv.data[pos] > best) {
                best = xv.data[pos];
                bestpos = static_cast<std::int64_t>(pos);
              }
            }
          out.data[ooff + static_cast<std::size_t>(oy) * ow + ox] = best;
          argmax[ooff + static_cast<std::size_t>(oy) * ow + ox] = bestpos;
        }
    }
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), argmax]() {
      const Array& g = t.grad_at(oi);
      Array& gx = t.grad_at(xi);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        gx.data[static_cast<std::size_t>(argmax[i])] += g.data[i];
    });
  }
  return o;
}

namespace {
struct LerpWeights {
  int lo, hi;
  double flo, fhi;
};

// align-corners-false source coordinate with clamped neighbors
LerpWeights lerp_axis(int out_pos, int in_size, int out_size) {
  const double scale = static_cast<double>(in_size) / out_size;
  const double src = (out_pos + 0.5) * scale - 0.5;
  double fl = std::floor(src);
  int lo = static_cast<int>(fl);
  double frac = src - fl;
  int hi = lo + 1;
  if (lo < 0) { lo = 0; hi = 0; frac = 0.0; }
  if (lo >= in_size - 1) { lo = in_size - 1; hi = in_size - 1; frac = 0.0; }
  return {lo, hi, 1.0 - frac, frac};
}
}  // namespace

Var bilinear_resize(Var x, int out_h, int out_w) {
  Tape& t = tape_of(x);
  const Array& xv = x.value();
  if (xv.ndim() != 4) throw std::invalid_argument("bilinear_resize: expects [N,C,H,W], got " + shape_str(xv.shape));
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output dims must be >= 1");
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (out_h == h && out_w == w) {
    // exact identity
    Array out = xv;
    const bool rg = wants_grad(t, {x});
    Var o(&t, t.add_node(std::move(out), rg));
    if (rg) {
      t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx()]() {
        const Array& g = t.grad_at(oi);
        Array& gx = t.grad_at(xi);
        for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
      });
    }
    return o;
  }
  std::vector<LerpWeights> ys(static_cast<std::size_t>(out_h)), xs(static_cast<std::size_t>(out_w));
  for (int i = 0; i < out_h; ++i) ys[static_cast<std::size_t>(i)] = lerp_axis(i, h, out_h);
  for (int i = 0; i < out_w; ++i) xs[static_cast<std::size_t>(i)] = lerp_axis(i, w, out_w);
  Array out({n, c, out_h, out_w});
  const std::int64_t ihw = static_cast<std::int64_t>(h) * w;
  const std::int64_t ohw = static_cast<std::int64_t>(out_h) * out_w;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const double* ip = &xv.data[static_cast<std::size_t>((b * c + ch) * ihw)];
      double* op = &out.data[static_cast<std::size_t>((b * c + ch) * ohw)];
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& wy = ys[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& wx = xs[static_cast<std::size_t>(ox)];
          op[static_cast<std::size_t>(oy) * out_w + ox] =
              wy.flo * (wx.flo * ip[static_cast<std::size_t>(wy.lo) * w + wx.lo] +
                        wx.fhi * ip[static_cast<std::size_t>(wy.lo) * w + wx.hi]) +
              wy.fhi * (wx.flo * ip[static_cast<std::size_t>(wy.hi) * w + wx.lo] +
                        wx.fhi * ip[static_cast<std::size_t>(wy.hi) * w + wx.hi]);
        }
      }
    }
  const bool rg = wants_grad(t, {x});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, xi = x.idx(), oi = o.idx(), ys, xs, n, c, w, out_h, out_w, ihw, ohw]() {
      const Array& g = t.grad_at(oi);
      Array& gx = t.grad_at(xi);
      for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
          double* gp = &gx.data[static_cast<std::size_t>((b * c + ch) * ihw)];
          const double* op = &g.data[static_cast<std::size_t>((b * c + ch) * ohw)];
          for (int oy = 0; oy < out_h; ++oy) {
            const auto& wy = ys[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
              const auto& wx = xs[static_cast<std::size_t>(ox)];
              const double gv = op[static_cast<std::size_t>(oy) * out_w + ox];
              if (gv == 0.0) continue;
              gp[static_cast<std::size_t>(wy.lo) * w + wx.lo] += gv * wy.flo * wx.flo;
              gp[static_cast<std::size_t>(wy.lo) * w + wx.hi] += gv * wy.flo * wx.fhi;
              gp[static_cast<std::size_t>(wy.hi) * w + wx.lo] += gv * wy.fhi * wx.flo;
              gp[static_cast<std::size_t>(wy.hi) * w + wx.hi] += gv * wy.fhi * wx.fhi;
            }
          }
        }
    });
  }
  return o;
}

Var bilinear_sample(Var map, const std::vector<std::pair<double, double>>& points) {
  Tape& t = tape_of(map);
  const Array& mv = map.value();
  if (mv.ndim() != 3) throw std::invalid_argument("bilinear_sample: map must be [C,H,W], got " + shape_str(mv.shape));
  const int c = mv.dim(0), h = mv.dim(1), w = mv.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const int p = static_cast<int>(points.size());
  for (int i = 0; i < p; ++i) {
    const auto [px, py] = points[static_cast<std::size_t>(i)];
    if (!(px >= 0.0 && px <= w - 1 && py >= 0.0 && py <= h - 1))
      throw std::invalid_argument("bilinear_sample: point " + std::to_string(i) + " (" +
                                  std::to_string(px) + "," + std::to_string(py) +
                                  ") outside map bounds [0," + std::to_string(w - 1) + "]x[0," +
                                  std::to_string(h - 1) + "]");
  }
  Array out({p, c});
  struct Corner { int x0, y0; double fx, fy; };
  std::vector<Corner> corners(static_cast<std::size_t>(p));
  for (int i = 0; i < p; ++i) {
    const auto [px, py] = points[static_cast<std::size_t>(i)];
    int x0 = static_cast<int>(std::floor(px));
    int y0 = static_cast<int>(std::floor(py));
    if (x0 > w - 2) x0 = w - 2 < 0 ? 0 : w - 2;
    if (y0 > h - 2) y0 = h - 2 < 0 ? 0 : h - 2;
    const double fx = px - x0;
    const double fy = py - y0;
    corners[static_cast<std::size_t>(i)] = {x0, y0, fx, fy};
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    for (int ch = 0; ch < c; ++ch) {
      const double* mp = &mv.data[static_cast<std::size_t>(ch * hw)];
      const double v00 = mp[static_cast<std::size_t>(y0) * w + x0];
      const double v01 = mp[static_cast<std::size_t>(y0) * w + x1];
      const double v10 = mp[static_cast<std::size_t>(y1) * w + x0];
      const double v11 = mp[static_cast<std::size_t>(y1) * w + x1];
      out.data[static_cast<std::size_t>(i) * c + ch] =
          (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
    }
  }
  const bool rg = wants_grad(t, {map});
  Var o(&t, t.add_node(std::move(out), rg));
  if (rg) {
    t.set_back(o.idx(), [&t, mi = map.idx(), oi = o.idx(), corners, c, h, w, hw]() {
      const Array& g = t.grad_at(oi);
      Array& gm = t.grad_at(mi);
      for (std::size_t i = 0; i < corners.size(); ++i) {
        const auto& cr = corners[i];
        const int x1 = std::min(cr.x0 + 1, w - 1);
        const int y1 = std::min(cr.y0 + 1, h - 1);
        for (int ch = 0; ch < c; ++ch) {
          const double gv = g.data[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(ch)];
          if (gv == 0.0) continue;
          double* gp = &gm.data[static_cast<std::size_t>(ch * hw)];
          gp[static_cast<std::size_t>(cr.y0) * w + cr.x0] += gv * (1 - cr.fy) * (1 - cr.fx);
          gp[static_cast<std::size_t>(cr.y0) * w + x1] += gv * (1 - cr.fy) * cr.fx;
          gp[static_cast<std::size_t>(y1) * w + cr.x0] += gv * cr.fy * (1 - cr.fx);
          gp[static_cast<std::size_t>(y1) * w + x1] += gv * cr.fy * cr.fx;
        }
      }
    });
  }
  return o;
}

}  // namespace featkit::diff
