#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "featkit/diffcore.hpp"
#include "featkit/teacher.hpp"

namespace featkit::loss {

/// One sampled pixel together with its semantic grouping label.
struct SamplePoint {
  int x = 0;
  int y = 0;
  std::uint16_t group = 0;
};

/// Stratified point sampler: equal quota per grouping id present in `g`,
/// uniform without replacement within each grouping's mask, at most `cap`
/// points total. Unassigned pixels (label 0) are never sampled. Deterministic
/// per seed; output ordered by grouping id.
std::vector<SamplePoint> sample_group_points(const teacher::SemanticGrouping& g, std::size_t cap,
                                             std::uint64_t seed);

/// Average descriptor distances over unordered point pairs, split by whether
/// the endpoints share a grouping label. n_pos/n_neg are the pair counts;
/// d_pos/d_neg are valid only when the matching count is nonzero.
struct GroupDistances {
  diff::Var d_pos;
  diff::Var d_neg;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;

  /// No usable same-label or cross-label pair: the contrastive term
  /// contributes nothing for this image.
  bool degenerate() const { return n_pos == 0 || n_neg == 0; }
};

/// descriptors: [P, D] rows, one per point; groups: P labels.
GroupDistances group_distances(diff::Var descriptors, const std::vector<std::uint16_t>& groups);

/// Mean absolute difference between two relation matrices of equal shape.
diff::Var loss_dis(diff::Var relation_a, diff::Var relation_b);

/// Contrastive separation loss on the two average distances:
///   L = -log[ exp(-a/T) / (exp(-a/T) + exp(-d_neg/T)) ],  a = max(d_pos, M).
/// Strictly decreasing in d_neg; the margin M zeroes the d_pos gradient
/// whenever d_pos < M. Computed in softplus form, stable for any magnitude.
diff::Var loss_wsc(diff::Var d_pos, diff::Var d_neg, double margin, double temperature);

/// The same expression with the numerator/denominator grouping taken at face
/// value, which telescopes to d_neg / T: minimizing it collapses negatives
/// together. Kept only so a test can demonstrate the degeneracy.
diff::Var loss_wsc_literal(diff::Var d_pos, diff::Var d_neg, double margin, double temperature);

/// Mean absolute difference between the predicted edge map [1,1,H,W] and the
/// binary target.
diff::Var loss_edge(diff::Var predicted, const teacher::EdgeMap& target);

/// Pixelwise binary cross-entropy from logits with a positive-class weight
/// lambda_pos = clamp(#neg/#pos, 1, 100) (100 when no positive exists),
/// normalized by the total weight. labels must match the logit shape and
/// contain only 0 or 1. Stable for logits of any magnitude.
diff::Var loss_det(diff::Var logits, const diff::Array& labels);

/// Inputs of the attention-weighted triplet loss over N correspondences.
/// match_x/match_y are the second-image pixel positions of the true matches;
/// candidates closer than exclusion_radius_px to an anchor's own match are
/// never used as its negative.
struct DescriptorTriplets {
  diff::Var anchors;             // [N, D]
  diff::Var positives;           // [N, D]
  diff::Var anchor_attention;    // [N]
  diff::Var positive_attention;  // [N]
  std::vector<double> match_x;
  std::vector<double> match_y;
  double margin = 1.0;
  double exclusion_radius_px = 4.0;
};

/// L = sum_i w_i * max(0, margin + d(a_i,p_i) - min_j d(a_i,p_j)) / sum_i w_i
/// with w_i = att(a_i) * att(p_i) and j ranging over eligible negatives.
/// Fewer than two correspondences, or no anchor with an eligible negative,
/// contributes 0.
diff::Var loss_des(const DescriptorTriplets& t);

/// The five components and their unweighted sum.
struct LossBundle {
  diff::Var l_det;
  diff::Var l_des;
  diff::Var l_dis;
  diff::Var l_edge;
  diff::Var l_wsc;
  diff::Var total;
};

/// total = l_det + l_des + l_dis + l_edge + l_wsc, summed in that order.
LossBundle total_loss(diff::Var l_det, diff::Var l_des, diff::Var l_dis, diff::Var l_edge,
                      diff::Var l_wsc);

/// Scalar constant 0 on `t`, for a loss slot that is disabled or degenerate.
diff::Var zero_scalar(diff::Tape& t);

}  // namespace featkit::loss
