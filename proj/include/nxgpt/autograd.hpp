#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is a 2-D float64 matrix; scalars are 1x1.
//
// Graphs are built eagerly: each op allocates a Node holding its value and a
// closure that pushes the incoming gradient to its parents. Parameters are
// persistent leaf nodes owned by a ParamStore; everything else is released
// when the root Var goes out of scope.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace nxgpt {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class Rng;

struct Node {
  Mat value;
  Mat grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Mat& g);
  void zero_grad() { grad.resize(0, 0); }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates to every
  // ancestor that requires grad. Leaf gradients accumulate across calls.
  void backward() const;
  // Same, with an explicit upstream gradient of the root's shape.
  void backward(const Mat& seed) const;

 private:
  std::shared_ptr<Node> node_;
};

namespace ag {

// While alive, ops on this thread record no graph (inference only).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Mat value);
Var leaf(Mat value, bool requires_grad = true);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(const Var& a, const Var& row);
// a (n x m) * row (1 x m) broadcast over rows.
Var mul_row(const Var& a, const Var& row);
// a (n x m) * col (n x 1) broadcast over columns.
Var mul_col(const Var& a, const Var& col);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// a / s where s is a 1x1 Var.
Var div_by_scalar(const Var& a, const Var& s);
// Each row i of a divided by the constant divisor[i].
Var div_rows_const(const Var& a, std::span<const double> divisor);

Var exp(const Var& a);
Var tanh(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Unit L2 norm per row.
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// Row-wise softmax. With causal=true, entries (i, j) with j > i + offset are
// masked to zero probability.
Var softmax_rows(const Var& x, bool causal = false);
// Column-wise softmax: each column sums to one.
Var softmax_cols(const Var& x);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
// Rows of table selected by ids (embedding lookup).
Var gather_rows(const Var& table, std::span<const int> ids);
// Rows of a scattered into a zero matrix of `rows` rows at `positions`.
Var scatter_rows(const Var& a, std::span<const Eigen::Index> positions, Eigen::Index rows);

Var row_mean(const Var& a);  // 1 x m
Var sum(const Var& a);       // 1 x 1
Var mean(const Var& a);      // 1 x 1
Var stop_gradient(const Var& a);

// Mean token cross-entropy of row-wise logits; targets < 0 are ignored.
// Returns 0 (a constant) when no target is active.
Var cross_entropy(const Var& logits, std::span<const int> targets);
// Mean squared error over every entry.
Var mse(const Var& a, const Var& b);

// Inverted dropout with a mask drawn from rng; identity when p == 0.
Var dropout(const Var& a, double p, Rng& rng);

}  // namespace ag
}  // namespace nxgpt
