#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "featkit/diffcore.hpp"

namespace featkit::net {

/// Channel plan. Full width: 64/64/128/128 with 128-d descriptors; the width
/// factor scales everything (1/4 and 1/2 keep desk runs fast).
struct ArchConfig {
  double width_factor = 1.0;

  int c1() const { return scaled(64); }
  int c2() const { return scaled(64); }
  int c3() const { return scaled(128); }
  int c4() const { return scaled(128); }
  int descriptor_dim() const { return scaled(128); }
  int trunk_channels() const { return c1() + c2() + c3() + c4(); }

 private:
  int scaled(int base) const;
};

/// Named parameter arrays; the map ordering doubles as the deterministic
/// iteration order for the optimizer and the checkpoint writer.
struct ModelParams {
  ArchConfig arch;
  std::map<std::string, diff::Array> arrays;
};

/// Kaiming-uniform fan-in kernels, zero biases; per-array streams derived from
/// one seed, so the same seed always builds the same model.
ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

/// Canonical parameter names + shapes for an architecture, in creation order.
std::vector<std::pair<std::string, std::vector<int>>> param_specs(const ArchConfig& arch);

/// Parameters registered as leaves on a tape for one forward/backward pass.
struct BoundParams {
  diff::Tape* tape = nullptr;
  const ArchConfig* arch = nullptr;
  std::map<std::string, diff::Var> vars;

  const diff::Var& at(const std::string& name) const;
};
BoundParams bind(diff::Tape& t, const ModelParams& p, bool requires_grad = true);

/// Multiscale stack; c4 already carries the guidance enhancement, c4d is the
/// guidance-head output that feeds the relation loss.
struct FeaturePyramid {
  diff::Var c1;   // [1,c1,H,W]
  diff::Var c2;   // [1,c2,H/2,W/2]
  diff::Var c3;   // [1,c3,H/4,W/4]
  diff::Var c4;   // [1,c4,H/8,W/8], enhanced
  diff::Var c4d;  // [1,c4,H/8,W/8]
};

struct NetworkOutputs {
  diff::Var det_logits;   // [1,1,H,W]
  diff::Var descriptors;  // [1,D,H/4,W/4], unnormalized (rows normalize at sampling)
  diff::Var att;          // [1,1,H/4,W/4] in (0,1)
  diff::Var edge_pred;    // [1,1,H,W] in (0,1)
  FeaturePyramid pyramid;
};

/// Eight 3x3 conv+relu layers in four blocks with 2x pooling between blocks.
/// Requires H, W divisible by 8 and >= 32.
FeaturePyramid backbone_forward(diff::Var image, const BoundParams& p);

/// c4d = conv(c4o); enhanced = c4 + conv(c4d). Zero re-injection weights leave
/// c4 untouched.
struct DistillOut {
  diff::Var c4d;
  diff::Var c4_enhanced;
};
DistillOut distill_enhance(diff::Var c4, diff::Var c4o, const BoundParams& p);

/// c3 + down4(edge) * c3, edge broadcast over channels.
diff::Var detection_edge_enhance(diff::Var c3, diff::Var edge_pred);

/// Edge-gated self-attention: f_edge = down4(edge) * f_in; bias-free 1x1 q/k/v;
/// A = softmax(q k^T / sqrt(C)); out = f_in + A v. All-zero edge returns f_in
/// bit-exactly.
diff::Var eag_forward(diff::Var f_in, diff::Var edge_pred, const BoundParams& p);

/// Edge head off c1; det/des/att heads off the four-level trunk at H/4.
NetworkOutputs heads_forward(const FeaturePyramid& pyr, const BoundParams& p);

/// backbone + heads in one call.
NetworkOutputs forward(diff::Var image, const BoundParams& p);

/// Checkpoint container: magic "TSC1", u32 count, then per entry a
/// length-prefixed name, u8 dtype (3 = f64), u32 ndim, u32 extents, payload.
/// A JSON sidecar at <path>.json carries width_factor / descriptor_dim.
/// Round-trip is bit-exact.
void save_checkpoint(const std::string& path, const ModelParams& p);
ModelParams load_checkpoint(const std::string& path);

}  // namespace featkit::net
