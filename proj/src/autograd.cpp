#include "nxgpt/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "nxgpt/error.hpp"
#include "nxgpt/rng.hpp"

namespace nxgpt {

void Node::accumulate(const Mat& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

namespace {

void topo_sort(const std::shared_ptr<Node>& root, std::vector<Node*>& order) {
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; deep transformer graphs overflow recursion.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace

void Var::backward() const {
  if (rows() != 1 || cols() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "backward() without seed needs a scalar root");
  }
  backward(Mat::Ones(1, 1));
}

void Var::backward(const Mat& seed) const {
  if (!node_->requires_grad) return;
  std::vector<Node*> order;
  topo_sort(node_, order);
  node_->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Intermediate gradients are no longer needed; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward) n->zero_grad();
  }
}

namespace ag {
namespace {

thread_local bool g_no_grad = false;

using NodePtr = std::shared_ptr<Node>;

Var make(Mat value, std::vector<NodePtr> parents, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_no_grad) return Var(std::move(node));
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (any) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(bw);
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::kShapeMismatch,
                std::string(op) + ": " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                    " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

// Pushes g into parent i if it requires grad.
inline void push(Node& self, std::size_t i, const Mat& g) {
  Node& p = *self.parents[i];
  if (p.requires_grad) p.accumulate(g);
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }

Var constant(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Mat value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "matmul: inner dims " + std::to_string(a.cols()) +
                                               " vs " + std::to_string(b.rows()));
  }
  Mat out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Mat g(A.rows(), A.cols());
      g.noalias() = self.grad * B.transpose();
      push(self, 0, g);
    }
    if (wants(self, 1)) {
      Mat g(B.rows(), B.cols());
      g.noalias() = A.transpose() * self.grad;
      push(self, 1, g);
    }
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "matmul_nt: inner dims " + std::to_string(a.cols()) +
                                               " vs " + std::to_string(b.cols()));
  }
  Mat out(a.rows(), b.rows());
  out.noalias() = a.value() * b.value().transpose();
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    if (wants(self, 0)) {
      Mat g(A.rows(), A.cols());
      g.noalias() = self.grad * B;
      push(self, 0, g);
    }
    if (wants(self, 1)) {
      Mat g(B.rows(), B.cols());
      g.noalias() = self.grad.transpose() * A;
      push(self, 1, g);
    }
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a.node()},
              [](Node& self) { push(self, 0, self.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    push(self, 0, self.grad);
    push(self, 1, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a.node(), b.node()}, [](Node& self) {
    push(self, 0, self.grad);
    if (wants(self, 1)) push(self, 1, -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  return make(a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node& self) {
    if (wants(self, 0)) push(self, 0, self.grad.cwiseProduct(self.parents[1]->value));
    if (wants(self, 1)) push(self, 1, self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "add_row: row must be 1x" + std::to_string(a.cols()));
  }
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a.node(), row.node()}, [](Node& self) {
    push(self, 0, self.grad);
    if (wants(self, 1)) push(self, 1, self.grad.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "mul_row: row must be 1x" + std::to_string(a.cols()));
  }
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return make(std::move(out), {a.node(), row.node()}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& R = self.parents[1]->value;
    if (wants(self, 0)) {
      Mat g = self.grad.array().rowwise() * R.row(0).array();
      push(self, 0, g);
    }
    if (wants(self, 1)) push(self, 1, self.grad.cwiseProduct(A).colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "mul_col: col must be " + std::to_string(a.rows()) + "x1");
  }
  Mat out = a.value().array().colwise() * col.value().col(0).array();
  return make(std::move(out), {a.node(), col.node()}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& C = self.parents[1]->value;
    if (wants(self, 0)) {
      Mat g = self.grad.array().colwise() * C.col(0).array();
      push(self, 0, g);
    }
    if (wants(self, 1)) push(self, 1, self.grad.cwiseProduct(A).rowwise().sum());
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()}, [s](Node& self) { push(self, 0, self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make((a.value().array() + s).matrix(), {a.node()},
              [](Node& self) { push(self, 0, self.grad); });
}

Var div_by_scalar(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "div_by_scalar: divisor must be 1x1");
  }
  return make(a.value() / s.item(), {a.node(), s.node()}, [](Node& self) {
    const double d = self.parents[1]->value(0, 0);
    if (wants(self, 0)) push(self, 0, self.grad / d);
    if (wants(self, 1)) {
      Mat g(1, 1);
      g(0, 0) = -self.grad.cwiseProduct(self.parents[0]->value).sum() / (d * d);
      push(self, 1, g);
    }
  });
}

Var div_rows_const(const Var& a, std::span<const double> divisor) {
  if (static_cast<Eigen::Index>(divisor.size()) != a.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "div_rows_const: divisor length");
  }
  Eigen::VectorXd inv(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) inv(i) = 1.0 / divisor[static_cast<std::size_t>(i)];
  Mat out = a.value().array().colwise() * inv.array();
  return make(std::move(out), {a.node()}, [inv](Node& self) {
    Mat g = self.grad.array().colwise() * inv.array();
    push(self, 0, g);
  });
}

Var exp(const Var& a) {
  Mat out = a.value().array().exp().matrix();
  return make(out, {a.node()}, [](Node& self) {
    // d exp = exp; the output value is not captured, recompute from parent.
    push(self, 0, self.grad.cwiseProduct(self.parents[0]->value.array().exp().matrix()));
  });
}

Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  return make(out, {a.node()}, [out](Node& self) {
    push(self, 0, (self.grad.array() * (1.0 - out.array().square())).matrix());
  });
}

Var gelu(const Var& a) {
  // Exact erf form: x * Phi(x).
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Mat out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); });
  return make(std::move(out), {a.node()}, [inv_sqrt_2pi](Node& self) {
    Mat d = self.parents[0]->value.unaryExpr([inv_sqrt_2pi](double x) {
      return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
    });
    push(self, 0, self.grad.cwiseProduct(d));
  });
}

Var silu(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
  return make(std::move(out), {a.node()}, [](Node& self) {
    Mat d = self.parents[0]->value.unaryExpr([](double x) {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    });
    push(self, 0, self.grad.cwiseProduct(d));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.cols() != d || beta.cols() != d || gamma.rows() != 1 || beta.rows() != 1) {
    throw Error(ErrorKind::kShapeMismatch, "layer_norm: gamma/beta must be 1x" + std::to_string(d));
  }
  Mat xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x.node(), gamma.node(), beta.node()},
              [xhat, inv_std](Node& self) {
                const Mat& g = self.grad;
                const Mat& G = self.parents[1]->value;
                if (wants(self, 0)) {
                  Mat dxhat = g.array().rowwise() * G.row(0).array();
                  Mat dx(dxhat.rows(), dxhat.cols());
                  for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
                    const double m1 = dxhat.row(i).mean();
                    const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
                    dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
                  }
                  push(self, 0, dx);
                }
                if (wants(self, 1)) push(self, 1, g.cwiseProduct(xhat).colwise().sum());
                if (wants(self, 2)) push(self, 2, g.colwise().sum());
              });
}

Var l2_normalize_rows(const Var& x, double eps) {
  Eigen::VectorXd norms = (x.value().rowwise().squaredNorm().array() + eps).sqrt();
  Mat out = x.value().array().colwise() / norms.array();
  return make(out, {x.node()}, [out, norms](Node& self) {
    const Mat& g = self.grad;
    Eigen::VectorXd dots = g.cwiseProduct(out).rowwise().sum();
    Mat dx = (g - (out.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array();
    push(self, 0, dx);
  });
}

Var softmax_rows(const Var& x, bool causal) {
  const Eigen::Index n = x.rows();
  const Eigen::Index m = x.cols();
  // For causal masking the query rows are aligned with the last n keys.
  const Eigen::Index offset = m - n;
  Mat out = Mat::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index limit = causal ? std::min(m, i + offset + 1) : m;
    const double mx = x.value().row(i).head(limit).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < limit; ++j) {
      const double e = std::exp(x.value()(i, j) - mx);
      out(i, j) = e;
      z += e;
    }
    out.row(i).head(limit) /= z;
  }
  return make(out, {x.node()}, [out](Node& self) {
    Eigen::VectorXd dots = self.grad.cwiseProduct(out).rowwise().sum();
    Mat dx = out.array() * (self.grad.array().colwise() - dots.array());
    push(self, 0, dx);
  });
}

Var softmax_cols(const Var& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double mx = x.value().col(j).maxCoeff();
    out.col(j) = (x.value().col(j).array() - mx).exp();
    out.col(j) /= out.col(j).sum();
  }
  return make(out, {x.node()}, [out](Node& self) {
    Eigen::RowVectorXd dots = self.grad.cwiseProduct(out).colwise().sum();
    Mat dx = out.array() * (self.grad.array().rowwise() - dots.array());
    push(self, 0, dx);
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::kShapeMismatch, "concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw Error(ErrorKind::kShapeMismatch, "concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    parents.push_back(p.node());
  }
  Mat out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  }
  return make(std::move(out), std::move(parents), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants(self, i)) {
        push(self, i, self.grad.middleRows(offsets[i], self.parents[i]->value.rows()));
      }
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error(ErrorKind::kShapeMismatch, "concat_cols: no parts");
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  std::vector<NodePtr> parents;
  std::vector<Eigen::Index> offsets;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw Error(ErrorKind::kShapeMismatch, "concat_cols: row mismatch");
    offsets.push_back(cols);
    cols += p.cols();
    parents.push_back(p.node());
  }
  Mat out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  }
  return make(std::move(out), std::move(parents), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      if (wants(self, i)) {
        push(self, i, self.grad.middleCols(offsets[i], self.parents[i]->value.cols()));
      }
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "slice_rows: out of range");
  }
  return make(a.value().middleRows(start, count), {a.node()}, [start, count](Node& self) {
    const Mat& A = self.parents[0]->value;
    Mat g = Mat::Zero(A.rows(), A.cols());
    g.middleRows(start, count) = self.grad;
    push(self, 0, g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "slice_cols: out of range");
  }
  return make(a.value().middleCols(start, count), {a.node()}, [start, count](Node& self) {
    const Mat& A = self.parents[0]->value;
    Mat g = Mat::Zero(A.rows(), A.cols());
    g.middleCols(start, count) = self.grad;
    push(self, 0, g);
  });
}

Var gather_rows(const Var& table, std::span<const int> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw Error(ErrorKind::kOutOfRange, "gather_rows: id " + std::to_string(ids[i]));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return make(std::move(out), {table.node()}, [idv](Node& self) {
    const Mat& T = self.parents[0]->value;
    Mat g = Mat::Zero(T.rows(), T.cols());
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    push(self, 0, g);
  });
}

Var scatter_rows(const Var& a, std::span<const Eigen::Index> positions, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(positions.size()) != a.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "scatter_rows: positions length");
  }
  Mat out = Mat::Zero(rows, a.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    out.row(positions[i]) = a.value().row(static_cast<Eigen::Index>(i));
  }
  std::vector<Eigen::Index> pos(positions.begin(), positions.end());
  return make(std::move(out), {a.node()}, [pos](Node& self) {
    Mat g(static_cast<Eigen::Index>(pos.size()), self.grad.cols());
    for (std::size_t i = 0; i < pos.size(); ++i) g.row(static_cast<Eigen::Index>(i)) = self.grad.row(pos[i]);
    push(self, 0, g);
  });
}

Var row_mean(const Var& a) {
  const double n = static_cast<double>(a.rows());
  return make(a.value().colwise().mean(), {a.node()}, [n](Node& self) {
    const Eigen::Index rows = self.parents[0]->value.rows();
    Mat g = self.grad.replicate(rows, 1) / n;
    push(self, 0, g);
  });
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a.node()}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    push(self, 0, Mat::Constant(A.rows(), A.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  Mat out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return make(std::move(out), {a.node()}, [n](Node& self) {
    const Mat& A = self.parents[0]->value;
    push(self, 0, Mat::Constant(A.rows(), A.cols(), self.grad(0, 0) / n));
  });
}

Var stop_gradient(const Var& a) { return constant(a.value()); }

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw Error(ErrorKind::kShapeMismatch, "cross_entropy: one target per row required");
  }
  const Eigen::Index n = logits.rows();
  const Eigen::Index v = logits.cols();
  Mat probs = Mat::Zero(n, v);
  double total = 0.0;
  int active = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0) continue;
    if (t >= v) throw Error(ErrorKind::kOutOfRange, "cross_entropy: target " + std::to_string(t));
    const double mx = logits.value().row(i).maxCoeff();
    probs.row(i) = (logits.value().row(i).array() - mx).exp();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    total += -(logits.value()(i, t) - mx - std::log(z));
    ++active;
  }
  Mat out(1, 1);
  if (active == 0) {
    out(0, 0) = 0.0;
    return constant(out);
  }
  out(0, 0) = total / active;
  std::vector<int> tv(targets.begin(), targets.end());
  return make(std::move(out), {logits.node()}, [probs, tv, active](Node& self) {
    Mat g = probs;
    for (std::size_t i = 0; i < tv.size(); ++i) {
      if (tv[i] >= 0) g(static_cast<Eigen::Index>(i), tv[i]) -= 1.0;
    }
    g *= self.grad(0, 0) / active;
    push(self, 0, g);
  });
}

Var mse(const Var& a, const Var& b) {
  Var d = sub(a, b);
  return mean(mul(d, d));
}

Var dropout(const Var& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw Error(ErrorKind::kInvalidParameter, "dropout rate must be < 1");
  Mat mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? 0.0 : keep;
  return make(a.value().cwiseProduct(mask), {a.node()},
              [mask](Node& self) { push(self, 0, self.grad.cwiseProduct(mask)); });
}

}  // namespace ag
}  // namespace nxgpt
