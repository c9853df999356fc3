#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "lilac/util.hpp"

namespace lilac::num {

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& m) : Error("ShapeMismatch: " + m) {}
};
struct IndexOutOfRange : Error {
  explicit IndexOutOfRange(const std::string& m)
      : Error("IndexOutOfRange: " + m) {}
};
struct NonFiniteValue : Error {
  explicit NonFiniteValue(const std::string& m)
      : Error("NonFiniteValue: " + m) {}
};

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor of doubles. Plain value type; all autodiff state
/// lives in Graph.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  static Tensor from(std::initializer_list<double> v, Shape shape);

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  /// 2-D accessors (row, col).
  double& at(int r, int c);
  double at(int r, int c) const;

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Handle to a node in a Graph tape.
struct NodeId {
  std::int32_t v = -1;
  bool valid() const { return v >= 0; }
};

namespace testing {
/// Test fixture hook: when true, one backward rule (matmul's accumulation
/// into its left input) flips sign so gradient checking must fail. Used by
/// the CLI self-check mutation test only.
extern bool backward_sign_flip;
}  // namespace testing

/// Reverse-mode autodiff tape. Ops evaluate eagerly when recorded; the tape
/// is topologically ordered by construction, and backward() walks it once in
/// reverse. Single-threaded per instance.
///
/// Shape discipline: no implicit broadcasting. Mixed-shape combinations go
/// through explicit ops (add_row, gather_rows, ...) so mismatches fail loudly.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- leaves ---------------------------------------------------------
  /// Constant leaf owning a copy of `t`.
  NodeId input(Tensor t);
  /// Constant leaf referencing external storage (no copy, no grad).
  NodeId leaf(const Tensor* external);
  /// Differentiable leaf referencing external storage. The tensor must stay
  /// alive and unmodified for the lifetime of the graph.
  NodeId param(const Tensor* external);

  // --- elementwise / linear -------------------------------------------
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  /// [r,c] plus a 1-D [c] bias added to every row.
  NodeId add_row(NodeId m, NodeId bias);
  NodeId gelu(NodeId x);
  /// Row-wise layer norm with learned gain/bias (1-D [c]), eps = 1e-5.
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);

  // --- matmul / attention ----------------------------------------------
  /// [m,k] x [k,n] -> [m,n].
  NodeId matmul(NodeId a, NodeId b);
  /// softmax(q kT / sqrt(d)) v. q:[Sq,d], k:[Sk,d], v:[Sk,dv] -> [Sq,dv].
  /// With causal=true (requires Sq==Sk), row t attends to columns <= t only;
  /// masked entries never enter the softmax, so causality is bit-exact.
  NodeId attention(NodeId q, NodeId k, NodeId v, bool causal);

  // --- shape plumbing ---------------------------------------------------
  NodeId reshape(NodeId x, Shape shape);
  NodeId slice_rows(NodeId x, int r0, int r1);
  NodeId slice_cols(NodeId x, int c0, int c1);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId concat_cols(std::span<const NodeId> parts);
  /// table:[V,d], ids in [0,V) -> [len(ids), d]. Backward scatter-adds.
  NodeId gather_rows(NodeId table, std::vector<int> ids);

  // --- reductions / losses ----------------------------------------------
  NodeId sum_all(NodeId x);   // -> [1]
  NodeId mean_all(NodeId x);  // -> [1]
  /// Column means over rows: [r,c] -> [1,c].
  NodeId mean_rows(NodeId x);
  /// Row-wise softmax of [r,c].
  NodeId softmax_rows(NodeId x);
  /// -log softmax(logits)[target]; logits 1-D [C].
  NodeId softmax_cross_entropy(NodeId logits, int target);
  /// Mean of per-row cross entropies; logits [m,C], one target per row.
  NodeId cross_entropy_rows(NodeId logits, std::vector<int> targets);
  /// Mean absolute difference; shapes must match exactly.
  NodeId l1_loss(NodeId pred, NodeId target);

  // --- rotation helpers --------------------------------------------------
  /// Axis-angle [3] -> unit quaternion [4] (w,x,y,z), exp map. Smooth at 0.
  NodeId quat_exp(NodeId w);
  /// Unit quaternion [4] -> axis-angle [3], log map. Handles q ~ -q.
  NodeId quat_log(NodeId q);

  /// Identity on values; blocks gradient flow.
  NodeId stop_grad(NodeId x);

  // --- execution ---------------------------------------------------------
  /// Seeds d(loss)/d(loss)=1 and accumulates gradients through the tape in
  /// reverse. `loss` must be a scalar [1]. May be called once per graph.
  void backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  /// Gradient of the last backward() target w.r.t. node `id`. Throws if no
  /// gradient reached the node; use has_grad to probe.
  const Tensor& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  bool requires_grad(NodeId id) const;
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::function<void(Graph&)> back;  // empty for leaves
  };

  const Tensor& val(NodeId id) const;
  Tensor& grad_buf(NodeId id);
  NodeId push(Tensor value, bool req, const char* op,
              std::function<void(Graph&)> back);
  void check(NodeId id) const;

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

struct GradCheckSetup {
  NodeId loss;                  // scalar
  std::vector<NodeId> params;   // nodes bound to the external tensors below
};

/// Central-difference gradient check. `build` must construct a fresh graph
/// over the external tensors in `params` (same order as the returned node
/// list). Returns the worst relative error over every parameter element,
/// with the relative denominator floored at 1e-4 so near-zero gradients are
/// compared absolutely. Throws NonFiniteValue if any loss or gradient value
/// is not finite.
double gradient_check(
    const std::function<GradCheckSetup(Graph&)>& build,
    std::span<Tensor* const> params, double h = 1e-5);

}  // namespace lilac::num
