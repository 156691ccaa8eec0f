#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace featkit::diff {

/// Dense N-d double array, row-major.
struct Array {
  std::vector<int> shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(std::vector<int> s, double fill = 0.0);
  static Array from(std::vector<int> s, std::vector<double> d);

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  bool same_shape(const Array& o) const { return shape == o.shape; }
};

std::int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; owns nothing.
class Var {
 public:
  Var() = default;
  Var(Tape* t, int idx) : tape_(t), idx_(idx) {}

  const Array& value() const;
  /// Gradient buffer (zeros if backward never reached this node).
  const Array& grad() const;
  bool requires_grad() const;
  const std::vector<int>& shape() const;

  Tape* tape() const { return tape_; }
  int idx() const { return idx_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int idx_ = -1;
};

/// Records the forward computation and replays adjoints in reverse order.
/// A tape and the Vars on it are confined to one thread; independent tapes
/// are independent.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array v, bool requires_grad = true);
  Var constant(Array v) { return leaf(std::move(v), false); }

  /// Reverse pass from a one-element loss. Populates grads of every
  /// requires_grad node recorded before the loss.
  void backward(const Var& loss);

  /// When disabled, ops still compute values but record no adjoints.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }

  // -- graph construction interface used by the operator implementations --
  int add_node(Array value, bool requires_grad);
  void set_back(int idx, std::function<void()> fn);
  const Array& value_at(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }
  bool requires_at(int idx) const { return nodes_[static_cast<std::size_t>(idx)].requires_grad; }
  /// Gradient buffer of a node, allocated (zero) on first touch.
  Array& grad_at(int idx);
  /// grad_at(idx) += g, elementwise.
  void accum(int idx, const Array& g);

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---- elementwise and reduction operators ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_scalar(Var a, double s);
Var mul_scalar(Var a, double s);
Var relu(Var x);
Var sigmoid(Var x);
Var exp(Var x);
Var log(Var x);
Var abs(Var x);
Var sqrt(Var x);
Var sum(Var x);
Var mean(Var x);

// ---- shape and linear-algebra operators ----
Var matmul(Var a, Var b);
Var transpose2d(Var a);
Var reshape(Var a, std::vector<int> shape);
Var concat_channels(const std::vector<Var>& xs);
/// x:[N,C,H,W] scaled per-pixel by m:[N,1,H,W], broadcast over channels.
Var scale_by_map(Var x, Var m);
Var l2_normalize_lastdim(Var x);
/// a:[P,D], b:[Q,D] -> [P,Q] pairwise Euclidean distances.
Var euclidean_distance_matrix(Var a, Var b);
Var softmax_lastdim(Var x);
/// Gather entries (r,c) of a 2-d array into a vector [n].
Var select_elements(Var m, const std::vector<std::pair<int, int>>& idx);
/// [C,H,W] or [1,C,H,W] -> [H*W, C] with spatial positions as rows.
Var chw_to_rows(Var x);
/// [H*W, C] -> [1,C,H,W].
Var rows_to_chw(Var x, int c, int h, int w);

// ---- structured operators ----
Var conv2d(Var input, Var kernel, std::optional<Var> bias, int stride, int padding);
Var maxpool2(Var x);
Var bilinear_resize(Var x, int out_h, int out_w);
/// map:[C,H,W], points (x,y) in pixel coordinates -> [P,C].
Var bilinear_sample(Var map, const std::vector<std::pair<double, double>>& points);

}  // namespace featkit::diff
