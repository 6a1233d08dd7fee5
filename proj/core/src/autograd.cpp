#include "dchat/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace dchat::ad {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
  if (auto it = leaves_.find(&p); it != leaves_.end()) return {this, it->second};
  Node node{p.value, Matrix(), p.requires_grad, nullptr};
  if (p.requires_grad) {
    Parameter* target = &p;
    node.backward = [target](Tape& t, int self) {
      const Matrix& g = t.grad(self);
      if (g.size() == 0) return;
      if (target->grad.rows() != g.rows() || target->grad.cols() != g.cols()) target->zero_grad();
      target->grad += g;
    };
  }
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size() - 1);
  leaves_.emplace(&p, id);
  return {this, id};
}

Var Tape::record(Matrix value, const std::vector<Var>& parents, BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || requires_grad(p.id());
  nodes_.push_back(Node{std::move(value), Matrix(), needs, needs ? std::move(backward) : nullptr});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& root) {
  if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
  if (!requires_grad(root.id())) return;
  accumulate(root.id(), Matrix::Ones(1, 1));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

namespace {

Tape& tape_of(const Var& a) { return *a.tape(); }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).record(a.value() * b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ib)) t.accumulate(ib, -t.grad(self));
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  const int ia = a.id();
  const int ib = b.id();
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) throw std::invalid_argument("add_row: bias must be 1 x cols");
  const int ia = a.id();
  const int ib = b.id();
  Matrix out = a.value().rowwise() + b.value().row(0);
  return tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw std::invalid_argument("mul_col: scale must be rows x 1");
  const int ia = a.id();
  const int ic = c.id();
  Matrix out = a.value().array().colwise() * c.value().col(0).array();
  return tape_of(a).record(std::move(out), {a, c}, [ia, ic](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.requires_grad(ia)) {
      Matrix ga = g.array().colwise() * t.value(ic).col(0).array();
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ic)) t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

Var scale(const Var& a, double s) {
  const int ia = a.id();
  return tape_of(a).record(a.value() * s, {a}, [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

Var one_minus(const Var& a) {
  const int ia = a.id();
  Matrix out = (1.0 - a.value().array()).matrix();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) { t.accumulate(ia, -t.grad(self)); });
}

Var sigmoid(const Var& a) {
  const int ia = a.id();
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, (t.grad(self).array() * y * (1.0 - y)).matrix());
  });
}

Var tanh(const Var& a) {
  const int ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const auto y = t.value(self).array();
    t.accumulate(ia, (t.grad(self).array() * (1.0 - y.square())).matrix());
  });
}

Var relu(const Var& a) {
  const int ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    Matrix g = (t.value(ia).array() > 0.0).select(t.grad(self), 0.0);
    t.accumulate(ia, g);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.cols();
  }
  return tape_of(parts.front()).record(std::move(out), parts, [ids, offsets](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) t.accumulate(ids[k], g.middleCols(offsets[k], t.value(ids[k]).cols()));
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw std::invalid_argument("slice_cols: out of range");
  const int ia = a.id();
  Matrix out = a.value().middleCols(start, count);
  return tape_of(a).record(std::move(out), {a}, [ia, start, count](Tape& t, int self) {
    Matrix g = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    g.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, g);
  });
}

Var gather_rows(const Var& table, const std::vector<int>& ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  const int it = table.id();
  return tape_of(table).record(std::move(out), {table}, [it, ids](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix gt = Matrix::Zero(t.value(it).rows(), t.value(it).cols());
    for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(it, gt);
  });
}

Var sum(const Var& a) {
  const int ia = a.id();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  const int ia = a.id();
  Matrix out = a.value().rowwise().sum();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    Matrix g = t.grad(self).col(0).replicate(1, t.value(ia).cols());
    t.accumulate(ia, g);
  });
}

Var softmax_rows(const Var& a) {
  const int ia = a.id();
  Matrix shifted = a.value().colwise() - a.value().rowwise().maxCoeff();
  Matrix e = shifted.array().exp().matrix();
  Matrix out = e.array().colwise() / e.rowwise().sum().col(0).array();
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix ga = y.cwiseProduct(g.colwise() - dot);
    t.accumulate(ia, ga);
  });
}

Var standardize_cols(const Var& a, double eps) {
  const int ia = a.id();
  const auto n = static_cast<double>(a.rows());
  const Eigen::RowVectorXd mu = a.value().colwise().mean();
  const Matrix centered = a.value().rowwise() - mu;
  const Eigen::RowVectorXd inv_sd =
      ((centered.array().square().colwise().sum() / n) + eps).sqrt().inverse().matrix();
  Matrix out = centered.array().rowwise() * inv_sd.array();
  return tape_of(a).record(std::move(out), {a}, [ia, n, inv_sd](Tape& t, int self) {
    const Matrix& z = t.value(self);
    const Matrix& g = t.grad(self);
    const Eigen::RowVectorXd gsum = g.colwise().sum();
    const Eigen::RowVectorXd gzsum = g.cwiseProduct(z).colwise().sum();
    Matrix ga = ((n * g).rowwise() - gsum - (z.array().rowwise() * gzsum.array()).matrix());
    ga = (ga.array().rowwise() * (inv_sd.array() / n)).matrix();
    t.accumulate(ia, ga);
  });
}

Var log_softmax_rows(const Var& a) {
  const int ia = a.id();
  Eigen::VectorXd mx = a.value().rowwise().maxCoeff();
  Matrix shifted = a.value().colwise() - mx;
  Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix out = shifted.colwise() - lse;
  return tape_of(a).record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix p = t.value(self).array().exp().matrix();
    Eigen::VectorXd gs = g.rowwise().sum();
    Matrix ga = g - (p.array().colwise() * gs.array()).matrix();
    t.accumulate(ia, ga);
  });
}

Var pick(const Var& a, const std::vector<int>& ids) {
  if (static_cast<Eigen::Index>(ids.size()) != a.rows()) throw std::invalid_argument("pick: ids size mismatch");
  Matrix out = Matrix::Zero(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id >= a.cols()) throw std::out_of_range("pick: id out of range");
    if (id >= 0) out(i, 0) = a.value()(i, id);
  }
  const int ia = a.id();
  return tape_of(a).record(std::move(out), {a}, [ia, ids](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix ga = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (Eigen::Index i = 0; i < ga.rows(); ++i) {
      const int id = ids[static_cast<std::size_t>(i)];
      if (id >= 0) ga(i, id) = g(i, 0);
    }
    t.accumulate(ia, ga);
  });
}

}  // namespace dchat::ad
