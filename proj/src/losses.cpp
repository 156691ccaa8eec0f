#include "featkit/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

#include "featkit/rng.hpp"

namespace featkit::loss {

namespace {

// log(1 + exp(u)) composed from tape ops so the adjoint comes for free:
// relu(u) + log(1 + exp(-|u|)) never exponentiates a positive argument.
diff::Var softplus(diff::Var u) {
  diff::Var tail = diff::log(diff::add_scalar(diff::exp(diff::mul_scalar(diff::abs(u), -1.0)), 1.0));
  return diff::add(diff::relu(u), tail);
}

void require_scalar(const diff::Var& v, const char* what) {
  if (v.value().numel() != 1) {
    throw std::invalid_argument(std::string(what) + " expects a one-element value, got shape " +
                                diff::shape_str(v.shape()));
  }
}

}  // namespace

std::vector<SamplePoint> sample_group_points(const teacher::SemanticGrouping& g, std::size_t cap,
                                             std::uint64_t seed) {
  std::vector<SamplePoint> out;
  if (cap == 0 || g.h <= 0 || g.w <= 0) return out;

  const int n = g.n_groups();
  // Pixel lists per label, 1..n.
  std::vector<std::vector<int>> members(static_cast<std::size_t>(n) + 1);
  for (int y = 0; y < g.h; ++y) {
    for (int x = 0; x < g.w; ++x) {
      const std::uint16_t id = g.at(x, y);
      if (id != 0) members[id].push_back(y * g.w + x);
    }
  }
  std::size_t present = 0;
  for (int id = 1; id <= n; ++id) {
    if (!members[static_cast<std::size_t>(id)].empty()) ++present;
  }
  if (present == 0) return out;

  // Equal quota per present grouping; a cap below the grouping count still
  // yields one point per grouping until the cap is hit.
  const std::size_t quota = std::max<std::size_t>(1, cap / present);
  for (int id = 1; id <= n && out.size() < cap; ++id) {
    auto& pool = members[static_cast<std::size_t>(id)];
    if (pool.empty()) continue;
    rng::Rng r(rng::Rng::derive(seed, static_cast<std::uint64_t>(id)));
    const std::size_t take =
        std::min({quota, pool.size(), cap - out.size()});
    // Partial Fisher-Yates: the first `take` slots become a uniform
    // without-replacement draw.
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(r.uniform_int(0, static_cast<int>(pool.size() - i) - 1));
      std::swap(pool[i], pool[j]);
      const int flat = pool[i];
      out.push_back({flat % g.w, flat / g.w, static_cast<std::uint16_t>(id)});
    }
  }
  return out;
}

GroupDistances group_distances(diff::Var descriptors, const std::vector<std::uint16_t>& groups) {
  const auto& shape = descriptors.shape();
  if (shape.size() != 2) {
    throw std::invalid_argument("group_distances: descriptors must be [P, D], got " +
                                diff::shape_str(shape));
  }
  const int p = shape[0];
  if (static_cast<std::size_t>(p) != groups.size()) {
    throw std::invalid_argument("group_distances: " + std::to_string(groups.size()) +
                                " labels for " + std::to_string(p) + " descriptor rows");
  }
  if (p < 2) throw std::invalid_argument("group_distances: need at least 2 points");

  std::vector<std::pair<int, int>> pos_idx;
  std::vector<std::pair<int, int>> neg_idx;
  for (int i = 0; i < p; ++i) {
    for (int j = i + 1; j < p; ++j) {
      (groups[static_cast<std::size_t>(i)] == groups[static_cast<std::size_t>(j)] ? pos_idx
                                                                                  : neg_idx)
          .push_back({i, j});
    }
  }

  GroupDistances out;
  out.n_pos = pos_idx.size();
  out.n_neg = neg_idx.size();
  diff::Var dm = diff::euclidean_distance_matrix(descriptors, descriptors);
  if (!pos_idx.empty()) out.d_pos = diff::mean(diff::select_elements(dm, pos_idx));
  if (!neg_idx.empty()) out.d_neg = diff::mean(diff::select_elements(dm, neg_idx));
  return out;
}

diff::Var loss_dis(diff::Var relation_a, diff::Var relation_b) {
  if (relation_a.shape() != relation_b.shape()) {
    throw std::invalid_argument("loss_dis: shape mismatch " + diff::shape_str(relation_a.shape()) +
                                " vs " + diff::shape_str(relation_b.shape()));
  }
  return diff::mean(diff::abs(diff::sub(relation_a, relation_b)));
}

diff::Var loss_wsc(diff::Var d_pos, diff::Var d_neg, double margin, double temperature) {
  require_scalar(d_pos, "loss_wsc");
  require_scalar(d_neg, "loss_wsc");
  if (temperature <= 0.0) throw std::invalid_argument("loss_wsc: temperature must be positive");
  // a = max(d_pos, margin) written as margin + relu(d_pos - margin): below the
  // margin the relu kills the gradient exactly.
  diff::Var a = diff::add_scalar(diff::relu(diff::add_scalar(d_pos, -margin)), margin);
  diff::Var u = diff::mul_scalar(diff::sub(a, d_neg), 1.0 / temperature);
  return softplus(u);
}

diff::Var loss_wsc_literal(diff::Var d_pos, diff::Var d_neg, double margin, double temperature) {
  require_scalar(d_pos, "loss_wsc_literal");
  require_scalar(d_neg, "loss_wsc_literal");
  if (temperature <= 0.0) {
    throw std::invalid_argument("loss_wsc_literal: temperature must be positive");
  }
  diff::Var a = diff::add_scalar(diff::relu(diff::add_scalar(d_pos, -margin)), margin);
  diff::Var num = diff::exp(diff::mul_scalar(a, 1.0 / temperature));
  diff::Var den = diff::exp(diff::mul_scalar(diff::add(a, d_neg), 1.0 / temperature));
  return diff::mul_scalar(diff::log(diff::div(num, den)), -1.0);
}

diff::Var loss_edge(diff::Var predicted, const teacher::EdgeMap& target) {
  const std::vector<int> want = {1, 1, target.h, target.w};
  if (predicted.shape() != want) {
    throw std::invalid_argument("loss_edge: prediction shape " +
                                diff::shape_str(predicted.shape()) + " does not match target " +
                                diff::shape_str(want));
  }
  diff::Array t(want);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(target.e[static_cast<std::size_t>(i)]);
  diff::Var tv = predicted.tape()->constant(std::move(t));
  return diff::mean(diff::abs(diff::sub(predicted, tv)));
}

diff::Var loss_det(diff::Var logits, const diff::Array& labels) {
  if (logits.shape() != labels.shape) {
    throw std::invalid_argument("loss_det: logit shape " + diff::shape_str(logits.shape()) +
                                " does not match labels " + diff::shape_str(labels.shape));
  }
  std::int64_t n_pos = 0;
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const double v = labels[i];
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("loss_det: label " + std::to_string(v) + " at element " +
                                  std::to_string(i) + " is not 0 or 1");
    }
    if (v == 1.0) ++n_pos;
  }
  const std::int64_t n_neg = labels.numel() - n_pos;
  const double lambda_pos =
      n_pos == 0 ? 100.0
                 : std::clamp(static_cast<double>(n_neg) / static_cast<double>(n_pos), 1.0, 100.0);

  diff::Array w(labels.shape);
  double w_sum = 0.0;
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    w[i] = labels[i] == 1.0 ? lambda_pos : 1.0;
    w_sum += w[i];
  }

  diff::Tape& tape = *logits.tape();
  diff::Var y = tape.constant(labels);
  diff::Var wv = tape.constant(std::move(w));
  // bce(z, y) = relu(z) - z*y + log(1 + exp(-|z|)), the log-sum-exp form of
  // -y*log(sigmoid(z)) - (1-y)*log(1-sigmoid(z)).
  diff::Var bce = diff::add(diff::sub(diff::relu(logits), diff::mul(logits, y)),
                            softplus(diff::mul_scalar(diff::abs(logits), -1.0)));
  return diff::mul_scalar(diff::sum(diff::mul(wv, bce)), 1.0 / w_sum);
}

diff::Var loss_des(const DescriptorTriplets& t) {
  if (!t.anchors.valid()) throw std::invalid_argument("loss_des: anchors not set");
  diff::Tape& tape = *t.anchors.tape();
  const auto& a_shape = t.anchors.shape();
  if (a_shape.size() != 2 || t.positives.shape() != a_shape) {
    throw std::invalid_argument("loss_des: anchors/positives must be matching [N, D] arrays");
  }
  const int n = a_shape[0];
  if (t.anchor_attention.value().numel() != n || t.positive_attention.value().numel() != n ||
      t.match_x.size() != static_cast<std::size_t>(n) ||
      t.match_y.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("loss_des: attention/position lists must have one entry per row");
  }
  if (n < 2) return zero_scalar(tape);

  diff::Var dm = diff::euclidean_distance_matrix(t.anchors, t.positives);
  const diff::Array& d = dm.value();

  // Hardest eligible negative per anchor, tie broken toward the lowest column.
  std::vector<std::pair<int, int>> pos_sel;
  std::vector<std::pair<int, int>> neg_sel;
  std::vector<std::pair<int, int>> att_sel;
  for (int i = 0; i < n; ++i) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double sep = std::hypot(t.match_x[static_cast<std::size_t>(j)] -
                                        t.match_x[static_cast<std::size_t>(i)],
                                    t.match_y[static_cast<std::size_t>(j)] -
                                        t.match_y[static_cast<std::size_t>(i)]);
      if (sep <= t.exclusion_radius_px) continue;
      const double dij = d[static_cast<std::int64_t>(i) * n + j];
      if (dij < best_d) {
        best_d = dij;
        best = j;
      }
    }
    if (best < 0) continue;
    pos_sel.push_back({i, i});
    neg_sel.push_back({i, best});
    att_sel.push_back({i, 0});
  }
  if (pos_sel.empty()) return zero_scalar(tape);

  diff::Var d_pos = diff::select_elements(dm, pos_sel);
  diff::Var d_neg = diff::select_elements(dm, neg_sel);
  diff::Var terms = diff::relu(diff::add_scalar(diff::sub(d_pos, d_neg), t.margin));

  diff::Var att_a = diff::select_elements(diff::reshape(t.anchor_attention, {n, 1}), att_sel);
  diff::Var att_p = diff::select_elements(diff::reshape(t.positive_attention, {n, 1}), att_sel);
  diff::Var w = diff::mul(att_a, att_p);
  diff::Var w_sum = diff::sum(w);
  if (w_sum.value()[0] <= 0.0) {
    throw std::invalid_argument("loss_des: total attention weight must be positive");
  }
  return diff::div(diff::sum(diff::mul(w, terms)), w_sum);
}

LossBundle total_loss(diff::Var l_det, diff::Var l_des, diff::Var l_dis, diff::Var l_edge,
                      diff::Var l_wsc) {
  require_scalar(l_det, "total_loss");
  require_scalar(l_des, "total_loss");
  require_scalar(l_dis, "total_loss");
  require_scalar(l_edge, "total_loss");
  require_scalar(l_wsc, "total_loss");
  LossBundle b;
  b.l_det = l_det;
  b.l_des = l_des;
  b.l_dis = l_dis;
  b.l_edge = l_edge;
  b.l_wsc = l_wsc;
  b.total = diff::add(diff::add(diff::add(diff::add(l_det, l_des), l_dis), l_edge), l_wsc);
  return b;
}

diff::Var zero_scalar(diff::Tape& t) { return t.constant(diff::Array({1}, 0.0)); }

}  // namespace featkit::loss
