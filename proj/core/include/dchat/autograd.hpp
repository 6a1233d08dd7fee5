#pragma once

// Minimal tape-based reverse-mode automatic differentiation over dense
// Eigen matrices. Rows are batch entries, columns are features.

#include <Eigen/Dense>

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dchat::ad {

using Matrix = Eigen::MatrixXd;

/// A named trainable array. The gradient buffer has the same shape as the
/// value and is accumulated into by Tape::backward.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Matrix& value() const;
  [[nodiscard]] const Matrix& grad() const;
  [[nodiscard]] Eigen::Index rows() const { return value().rows(); }
  [[nodiscard]] Eigen::Index cols() const { return value().cols(); }
  [[nodiscard]] double scalar() const { return value()(0, 0); }
  [[nodiscard]] bool requires_grad() const;
  [[nodiscard]] int id() const { return id_; }
  [[nodiscard]] Tape* tape() const { return tape_; }
  [[nodiscard]] bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to a parameter. Each parameter gets one leaf per tape; when
  /// the parameter has requires_grad == false the leaf is a constant.
  Var param(Parameter& p);

  /// Record a node. `backward` is only kept when some parent requires grad.
  Var record(Matrix value, const std::vector<Var>& parents, BackwardFn backward);

  /// Seed d(root)/d(root) = 1 for a 1x1 root and sweep the tape in reverse,
  /// accumulating into Parameter::grad for every tracked leaf.
  void backward(const Var& root);

  [[nodiscard]] const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  [[nodiscard]] const Matrix& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  [[nodiscard]] bool requires_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].requires_grad;
  }
  /// Add `g` into the gradient of node `id` (no-op for constants).
  void accumulate(int id, const Matrix& g);
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> leaves_;
};

// ---- elementwise and linear algebra -------------------------------------

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (m x n) + b (1 x n) broadcast over rows.
Var add_row(const Var& a, const Var& b);
/// a (m x n) scaled row-wise by c (m x 1).
Var mul_col(const Var& a, const Var& c);
Var scale(const Var& a, double s);
Var one_minus(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var relu(const Var& a);

// ---- shape ---------------------------------------------------------------

Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
/// Rows of `table` selected by `ids`.
Var gather_rows(const Var& table, const std::vector<int>& ids);

// ---- reductions and distributions ---------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// Row sums, shape m x 1.
Var row_sum(const Var& a);
Var softmax_rows(const Var& a);
/// Per-column zero mean and unit variance over the rows (population variance + eps).
Var standardize_cols(const Var& a, double eps = 1e-5);
Var log_softmax_rows(const Var& a);
/// out(i) = a(i, ids[i]); entries with ids[i] < 0 yield 0 and receive no gradient.
Var pick(const Var& a, const std::vector<int>& ids);

}  // namespace dchat::ad
