#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "featkit/diffcore.hpp"
#include "featkit/network.hpp"
#include "featkit/rng.hpp"
#include "featkit/teacher.hpp"

using namespace featkit;
using namespace featkit::net;
using diff::Array;
using diff::Tape;
using diff::Var;
using featkit::rng::Rng;

namespace {

Array rand_image(Rng& rng, int h, int w) {
  Array a({1, 1, h, w});
  for (double& v : a.data) v = rng.uniform(0.0, 1.0);
  return a;
}

bool bits_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// scalar that touches every head output so every parameter sees gradient
Var probe_loss(const NetworkOutputs& out) {
  Var l = diff::mean(diff::mul(out.det_logits, out.det_logits));
  l = diff::add(l, diff::mean(diff::mul(out.descriptors, out.descriptors)));
  l = diff::add(l, diff::mean(out.att));
  l = diff::add(l, diff::mean(diff::mul(out.edge_pred, out.edge_pred)));
  l = diff::add(l, diff::mean(diff::mul(out.pyramid.c4d, out.pyramid.c4d)));
  return l;
}

double eval_probe_loss(const ModelParams& mp, const Array& img) {
  Tape t;
  t.set_grad_enabled(false);
  BoundParams bp = bind(t, mp, false);
  return probe_loss(forward(t.leaf(img, false), bp)).value()[0];
}

}  // namespace

TEST_CASE("arch config scales channel plan") {
  ArchConfig full;
  CHECK(full.c1() == 64);
  CHECK(full.c3() == 128);
  CHECK(full.descriptor_dim() == 128);
  CHECK(full.trunk_channels() == 384);
  ArchConfig quarter{0.25};
  CHECK(quarter.c1() == 16);
  CHECK(quarter.c4() == 32);
  CHECK(quarter.trunk_channels() == 96);
  ArchConfig bad{0.3};
  CHECK_THROWS(bad.c1());
}

TEST_CASE("init: kaiming bounds, zero biases, deterministic per seed") {
  ArchConfig arch{0.25};
  ModelParams a = init_params(arch, 9);
  ModelParams b = init_params(arch, 9);
  ModelParams c = init_params(arch, 10);
  bool any_diff = false;
  for (const auto& [name, arr] : a.arrays) {
    CHECK(bits_equal(arr.data, b.arrays.at(name).data));
    if (!bits_equal(arr.data, c.arrays.at(name).data)) any_diff = true;
    if (arr.shape.size() == 1) {
      for (double v : arr.data) CHECK(v == 0.0);
    } else {
      const double bound = std::sqrt(6.0 / (arr.shape[1] * arr.shape[2] * arr.shape[3]));
      for (double v : arr.data) {
        CHECK(v >= -bound);
        CHECK(v <= bound);
      }
    }
  }
  CHECK(any_diff);
}

TEST_CASE("backbone: paper-scale shapes at 64x64 full width") {
  ModelParams mp = init_params(ArchConfig{1.0}, 1);
  Rng rng(40);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  FeaturePyramid pyr = backbone_forward(t.leaf(rand_image(rng, 64, 64), false), bp);
  CHECK(pyr.c1.shape() == std::vector<int>{1, 64, 64, 64});
  CHECK(pyr.c2.shape() == std::vector<int>{1, 64, 32, 32});
  CHECK(pyr.c3.shape() == std::vector<int>{1, 128, 16, 16});
  CHECK(pyr.c4.shape() == std::vector<int>{1, 128, 8, 8});
  CHECK(pyr.c4d.shape() == std::vector<int>{1, 128, 8, 8});
}

TEST_CASE("backbone rejects bad input sizes") {
  ModelParams mp = init_params(ArchConfig{0.25}, 1);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  CHECK_THROWS(backbone_forward(t.leaf(Array({1, 1, 40, 33}), false), bp));
  CHECK_THROWS(backbone_forward(t.leaf(Array({1, 1, 24, 24}), false), bp));
}

TEST_CASE("backbone: zero image with zero biases gives an all-zero pyramid") {
  ModelParams mp = init_params(ArchConfig{0.25}, 2);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  FeaturePyramid pyr = backbone_forward(t.leaf(Array({1, 1, 32, 32}, 0.0), false), bp);
  for (const Var* v : {&pyr.c1, &pyr.c2, &pyr.c3, &pyr.c4, &pyr.c4d})
    for (double x : v->value().data) CHECK(x == 0.0);
}

TEST_CASE("distill enhancement: zero re-injection leaves c4 untouched") {
  ModelParams mp = init_params(ArchConfig{0.25}, 3);
  mp.arrays.at("distill.reinject.w").data.assign(
      mp.arrays.at("distill.reinject.w").data.size(), 0.0);
  Rng rng(41);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  Array c4({1, 32, 4, 4}), c4o({1, 32, 4, 4});
  for (double& v : c4.data) v = rng.uniform(-1, 1);
  for (double& v : c4o.data) v = rng.uniform(-1, 1);
  DistillOut out = distill_enhance(t.leaf(c4, false), t.leaf(c4o, false), bp);
  CHECK(bits_equal(out.c4_enhanced.value().data, c4.data));
  bool c4d_nonzero = false;
  for (double v : out.c4d.value().data) c4d_nonzero = c4d_nonzero || v != 0.0;
  CHECK(c4d_nonzero);
}

TEST_CASE("distill head output feeds a relation matrix of the right size") {
  ModelParams mp = init_params(ArchConfig{1.0}, 4);
  Rng rng(42);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  FeaturePyramid pyr = backbone_forward(t.leaf(rand_image(rng, 64, 64), false), bp);
  Var rows = diff::chw_to_rows(pyr.c4d);
  CHECK(rows.shape() == std::vector<int>{64, 128});
  Var rel = teacher::relation_matrix(rows);
  CHECK(rel.shape() == std::vector<int>{64, 64});
}

TEST_CASE("relation loss gradient reaches block-4 weights") {
  ModelParams mp = init_params(ArchConfig{0.25}, 5);
  Rng rng(43);
  Array img = rand_image(rng, 32, 32);
  // frozen random relation target with matching rows
  Array target({16, 16});
  for (double& v : target.data) v = rng.uniform(-1, 1);

  auto loss_of = [&](const ModelParams& m) {
    Tape t;
    t.set_grad_enabled(false);
    BoundParams bp = bind(t, m, false);
    FeaturePyramid pyr = backbone_forward(t.leaf(img, false), bp);
    Var rel = teacher::relation_matrix(diff::chw_to_rows(pyr.c4d));
    return diff::mean(diff::abs(diff::sub(rel, t.constant(target)))).value()[0];
  };

  Tape t;
  BoundParams bp = bind(t, mp, true);
  FeaturePyramid pyr = backbone_forward(t.leaf(img, false), bp);
  Var rel = teacher::relation_matrix(diff::chw_to_rows(pyr.c4d));
  Var loss = diff::mean(diff::abs(diff::sub(rel, t.constant(target))));
  t.backward(loss);

  // the relation signal runs image -> conv7 -> guidance head; conv8 only feeds
  // the enhanced c4 and stays out of this loss
  for (const char* name : {"backbone.conv1.w", "backbone.conv7.w", "distill.head.w"}) {
    const Array& g = bp.at(name).grad();
    double mag = 0;
    for (double v : g.data) mag += std::abs(v);
    CHECK_MESSAGE(mag > 0.0, name);
  }
  {
    const Array& g8 = bp.at("backbone.conv8.w").grad();
    double mag8 = 0;
    for (double v : g8.data) mag8 += std::abs(v);
    CHECK(mag8 == 0.0);
  }
  // directional finite-difference agreement on conv7 weights
  Rng drng(44);
  Array dir = mp.arrays.at("backbone.conv7.w");
  double nrm = 0;
  for (double& v : dir.data) {
    v = drng.normal();
    nrm += v * v;
  }
  nrm = std::sqrt(nrm);
  for (double& v : dir.data) v /= nrm;
  double analytic = 0;
  const Array& g = bp.at("backbone.conv7.w").grad();
  for (std::size_t i = 0; i < dir.data.size(); ++i) analytic += g.data[i] * dir.data[i];
  const double eps = 1e-5;
  ModelParams plus = mp, minus = mp;
  for (std::size_t i = 0; i < dir.data.size(); ++i) {
    plus.arrays.at("backbone.conv7.w").data[i] += eps * dir.data[i];
    minus.arrays.at("backbone.conv7.w").data[i] -= eps * dir.data[i];
  }
  const double numeric = (loss_of(plus) - loss_of(minus)) / (2 * eps);
  CHECK(std::abs(analytic - numeric) <=
        1e-5 * std::max({std::abs(analytic), std::abs(numeric), 1e-9}));
}

TEST_CASE("detection edge enhancement: residual identity and doubling") {
  Rng rng(45);
  Array c3({1, 3, 4, 4});
  for (double& v : c3.data) v = rng.uniform(-1, 1);
  Tape t;
  Var c3v = t.leaf(c3, false);
  Var zero = t.leaf(Array({1, 1, 16, 16}, 0.0), false);
  Var one = t.leaf(Array({1, 1, 16, 16}, 1.0), false);
  CHECK(bits_equal(detection_edge_enhance(c3v, zero).value().data, c3.data));
  const Array& twice = detection_edge_enhance(c3v, one).value();
  for (std::size_t i = 0; i < c3.data.size(); ++i)
    CHECK(twice.data[i] == doctest::Approx(2.0 * c3.data[i]).epsilon(1e-12));
}

TEST_CASE("detection edge enhancement: checkerboard matches elementwise oracle") {
  Rng rng(46);
  Array c3({1, 2, 4, 4});
  for (double& v : c3.data) v = rng.uniform(-1, 1);
  Array edge({1, 1, 16, 16});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) edge.data[static_cast<std::size_t>(y) * 16 + x] = (x + y) % 2;
  Tape t;
  Var out = detection_edge_enhance(t.leaf(c3, false), t.leaf(edge, false));
  const Array& small = diff::bilinear_resize(t.leaf(edge, false), 4, 4).value();
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 16; ++p) {
      const double want = c3.data[static_cast<std::size_t>(c) * 16 + p] * (1.0 + small.data[static_cast<std::size_t>(p)]);
      CHECK(out.value().data[static_cast<std::size_t>(c) * 16 + p] ==
            doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("eag: all-zero edge is a bit-exact identity") {
  Rng rng(47);
  for (int trial = 0; trial < 5; ++trial) {
    Tape t;
    BoundParams bp;
    bp.tape = &t;
    Array wq({3, 3, 1, 1}), wk({3, 3, 1, 1}), wv({3, 3, 1, 1});
    for (Array* w : {&wq, &wk, &wv})
      for (double& v : w->data) v = rng.uniform(-1, 1);
    bp.vars.emplace("eag.q.w", t.leaf(wq, false));
    bp.vars.emplace("eag.k.w", t.leaf(wk, false));
    bp.vars.emplace("eag.v.w", t.leaf(wv, false));
    Array f({1, 3, 4, 4});
    for (double& v : f.data) v = rng.uniform(-2, 2);
    Var out = eag_forward(t.leaf(f, false), t.leaf(Array({1, 1, 16, 16}, 0.0), false), bp);
    CHECK(bits_equal(out.value().data, f.data));
  }
}

TEST_CASE("eag matches a dense attention oracle on a 4x4 map") {
  Rng rng(48);
  for (int trial = 0; trial < 3; ++trial) {
    const int c = 2, n = 16;  // 4x4 positions
    Array wq({c, c, 1, 1}), wk({c, c, 1, 1}), wv({c, c, 1, 1});
    for (Array* w : {&wq, &wk, &wv})
      for (double& v : w->data) v = rng.uniform(-1, 1);
    Array f({1, c, 4, 4});
    for (double& v : f.data) v = rng.uniform(-1, 1);
    Array edge({1, 1, 16, 16}, 0.0);
    if (trial == 0) {
      edge.data[5 * 16 + 7] = 1.0;  // single edge pixel
    } else {
      for (double& v : edge.data) v = rng.uniform(0.0, 1.0);
    }

    Tape t;
    BoundParams bp;
    bp.tape = &t;
    bp.vars.emplace("eag.q.w", t.leaf(wq, false));
    bp.vars.emplace("eag.k.w", t.leaf(wk, false));
    bp.vars.emplace("eag.v.w", t.leaf(wv, false));
    Var out = eag_forward(t.leaf(f, false), t.leaf(edge, false), bp);

    // oracle: plain loops over the same dataflow
    const Array& es = diff::bilinear_resize(t.leaf(edge, false), 4, 4).value();
    std::vector<double> fe(static_cast<std::size_t>(c) * n), q(fe.size()), k(fe.size()), v(fe.size());
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < n; ++p)
        fe[static_cast<std::size_t>(ch) * n + p] = f.data[static_cast<std::size_t>(ch) * n + p] * es.data[static_cast<std::size_t>(p)];
    for (int co = 0; co < c; ++co)
      for (int p = 0; p < n; ++p) {
        double aq = 0, ak = 0, av = 0;
        for (int ci = 0; ci < c; ++ci) {
          aq += wq.data[static_cast<std::size_t>(co) * c + ci] * fe[static_cast<std::size_t>(ci) * n + p];
          ak += wk.data[static_cast<std::size_t>(co) * c + ci] * fe[static_cast<std::size_t>(ci) * n + p];
          av += wv.data[static_cast<std::size_t>(co) * c + ci] * fe[static_cast<std::size_t>(ci) * n + p];
        }
        q[static_cast<std::size_t>(co) * n + p] = aq;
        k[static_cast<std::size_t>(co) * n + p] = ak;
        v[static_cast<std::size_t>(co) * n + p] = av;
      }
    for (int p = 0; p < n; ++p) {
      double scores[16];
      double mx = -1e300;
      for (int p2 = 0; p2 < n; ++p2) {
        double s = 0;
        for (int ch = 0; ch < c; ++ch)
          s += q[static_cast<std::size_t>(ch) * n + p] * k[static_cast<std::size_t>(ch) * n + p2];
        scores[p2] = s / std::sqrt(static_cast<double>(c));
        mx = std::max(mx, scores[p2]);
      }
      double z = 0;
      for (int p2 = 0; p2 < n; ++p2) {
        scores[p2] = std::exp(scores[p2] - mx);
        z += scores[p2];
      }
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0;
        for (int p2 = 0; p2 < n; ++p2)
          acc += (scores[p2] / z) * v[static_cast<std::size_t>(ch) * n + p2];
        const double want = f.data[static_cast<std::size_t>(ch) * n + p] + acc;
        CHECK(out.value().data[static_cast<std::size_t>(ch) * n + p] ==
              doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("heads: zero det weights give logit 0, probability one half") {
  ModelParams mp = init_params(ArchConfig{0.25}, 6);
  mp.arrays.at("head.det.w").data.assign(mp.arrays.at("head.det.w").data.size(), 0.0);
  Rng rng(49);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  NetworkOutputs out = forward(t.leaf(rand_image(rng, 32, 32), false), bp);
  for (double v : out.det_logits.value().data) CHECK(v == 0.0);
  for (double v : diff::sigmoid(out.det_logits).value().data)
    CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("heads: output shapes at 64x64 full width, gates inside (0,1)") {
  ModelParams mp = init_params(ArchConfig{1.0}, 7);
  Rng rng(50);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  NetworkOutputs out = forward(t.leaf(rand_image(rng, 64, 64), false), bp);
  CHECK(out.edge_pred.shape() == std::vector<int>{1, 1, 64, 64});
  CHECK(out.det_logits.shape() == std::vector<int>{1, 1, 64, 64});
  CHECK(out.descriptors.shape() == std::vector<int>{1, 128, 16, 16});
  CHECK(out.att.shape() == std::vector<int>{1, 1, 16, 16});
  for (const Var* v : {&out.att, &out.edge_pred})
    for (double x : v->value().data) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
}

TEST_CASE("descriptor sampled at a keypoint normalizes to unit length") {
  ModelParams mp = init_params(ArchConfig{0.25}, 8);
  Rng rng(51);
  Tape t;
  BoundParams bp = bind(t, mp, false);
  NetworkOutputs out = forward(t.leaf(rand_image(rng, 32, 32), false), bp);
  const int d = mp.arch.descriptor_dim();
  Var dense = diff::reshape(out.descriptors, {d, 8, 8});
  Var sampled = diff::bilinear_sample(dense, {{3.2, 4.7}, {0.0, 0.0}, {6.9, 1.1}});
  Var unit = diff::l2_normalize_lastdim(sampled);
  for (int r = 0; r < 3; ++r) {
    double s = 0;
    for (int k = 0; k < d; ++k) s += unit.value()[r * d + k] * unit.value()[r * d + k];
    CHECK(std::abs(std::sqrt(s) - 1.0) <= 1e-9);
  }
}

TEST_CASE("full forward/backward: every parameter matches directional finite differences") {
  ModelParams mp = init_params(ArchConfig{0.25}, 12);
  Rng rng(52);
  Array img = rand_image(rng, 64, 64);

  Tape t;
  BoundParams bp = bind(t, mp, true);
  Var loss = probe_loss(forward(t.leaf(img, false), bp));
  t.backward(loss);

  Rng drng(53);
  for (const auto& [name, arr] : mp.arrays) {
    Array dir = arr;
    double nrm = 0;
    for (double& v : dir.data) {
      v = drng.normal();
      nrm += v * v;
    }
    nrm = std::sqrt(nrm);
    for (double& v : dir.data) v /= nrm;
    const Array& g = bp.at(name).grad();
    double analytic = 0;
    for (std::size_t i = 0; i < dir.data.size(); ++i) analytic += g.data[i] * dir.data[i];

    const double eps = 1e-5;
    ModelParams plus = mp, minus = mp;
    Array& pa = plus.arrays.at(name);
    Array& ma = minus.arrays.at(name);
    for (std::size_t i = 0; i < dir.data.size(); ++i) {
      pa.data[i] += eps * dir.data[i];
      ma.data[i] -= eps * dir.data[i];
    }
    const double numeric = (eval_probe_loss(plus, img) - eval_probe_loss(minus, img)) / (2 * eps);
    const double rel = std::abs(analytic - numeric) /
                       std::max({std::abs(analytic), std::abs(numeric), 1e-9});
    CHECK_MESSAGE(rel <= 1e-5, name, ": analytic ", analytic, " numeric ", numeric);
  }
}

TEST_CASE("checkpoint: save/load round-trip is bit-exact, forward identical") {
  ModelParams mp = init_params(ArchConfig{0.5}, 21);
  const std::string path = "/tmp/featkit_ckpt.tsc";
  save_checkpoint(path, mp);
  ModelParams lp = load_checkpoint(path);
  CHECK(lp.arch.width_factor == mp.arch.width_factor);
  REQUIRE(lp.arrays.size() == mp.arrays.size());
  for (const auto& [name, arr] : mp.arrays) CHECK(bits_equal(arr.data, lp.arrays.at(name).data));

  Rng rng(54);
  Array img = rand_image(rng, 32, 32);
  Tape t1, t2;
  NetworkOutputs o1 = forward(t1.leaf(img, false), bind(t1, mp, false));
  NetworkOutputs o2 = forward(t2.leaf(img, false), bind(t2, lp, false));
  CHECK(bits_equal(o1.det_logits.value().data, o2.det_logits.value().data));
  CHECK(bits_equal(o1.descriptors.value().data, o2.descriptors.value().data));
  CHECK(bits_equal(o1.edge_pred.value().data, o2.edge_pred.value().data));
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("checkpoint: corrupt files are rejected with useful messages") {
  ModelParams mp = init_params(ArchConfig{0.25}, 22);
  const std::string path = "/tmp/featkit_ckpt2.tsc";
  save_checkpoint(path, mp);

  // missing sidecar
  std::remove((path + ".json").c_str());
  CHECK_THROWS(load_checkpoint(path));

  // restore sidecar, then truncate the payload
  save_checkpoint(path, mp);
  {
    std::FILE* f = std::fopen(path.c_str(), "rb+");
    REQUIRE(f != nullptr);
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fclose(f);
    CHECK(truncate(path.c_str(), len - 16) == 0);
  }
  CHECK_THROWS(load_checkpoint(path));
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}

TEST_CASE("det map shifts with the input on a compact corner pattern") {
  ModelParams mp = init_params(ArchConfig{0.25}, 30);
  auto make_image = [](int x0) {
    Array img({1, 1, 64, 64}, 0.0);
    for (int y = 28; y < 32; ++y)
      for (int x = x0; x < x0 + 4; ++x) img.data[static_cast<std::size_t>(y) * 64 + x] = 1.0;
    return img;
  };
  auto det_map = [&](const Array& img) {
    Tape t;
    BoundParams bp = bind(t, mp, false);
    return forward(t.leaf(img, false), bp).det_logits.value();
  };
  const Array m1 = det_map(make_image(20));
  const Array m2 = det_map(make_image(28));
  // argmax of m1 inside a window whose 8px-shifted twin stays interior
  int bx = -1, by = -1;
  double best = -1e300;
  for (int y = 12; y < 52; ++y)
    for (int x = 12; x < 44; ++x) {
      const double v = m1.data[static_cast<std::size_t>(y) * 64 + x];
      if (v > best) {
        best = v;
        bx = x;
        by = y;
      }
    }
  int bx2 = -1, by2 = -1;
  double best2 = -1e300;
  for (int y = 12; y < 52; ++y)
    for (int x = 20; x < 52; ++x) {
      const double v = m2.data[static_cast<std::size_t>(y) * 64 + x];
      if (v > best2) {
        best2 = v;
        bx2 = x;
        by2 = y;
      }
    }
  CHECK(std::abs(bx2 - (bx + 8)) <= 1);
  CHECK(std::abs(by2 - by) <= 1);
}
