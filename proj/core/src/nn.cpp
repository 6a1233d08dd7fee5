#include "dchat/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dchat::nn {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  }
  return m;
}

void set_requires_grad(const ParamList& params, bool on) {
  for (auto* p : params) p->requires_grad = on;
}

void zero_grad(const ParamList& params) {
  for (auto* p : params) p->zero_grad();
}

double grad_norm(const ParamList& params) {
  double s = 0.0;
  for (const auto* p : params) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

Linear::Linear(const std::string& name, int in, int out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  weight = Parameter(name + ".weight", uniform_matrix(in, out, bound, rng));
  bias = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Var Linear::operator()(Tape& tape, const Var& x) {
  return ad::add_row(ad::matmul(x, tape.param(weight)), tape.param(bias));
}

Embedding::Embedding(const std::string& name, int vocab, int dim, Rng& rng) {
  table = Parameter(name + ".table", uniform_matrix(vocab, dim, 0.1, rng));
}

Var Embedding::lookup(Tape& tape, const std::vector<int>& ids) { return ad::gather_rows(tape.param(table), ids); }

Var Embedding::expect(Tape& tape, const Var& dist) {
  if (dist.cols() != table.value.rows()) throw std::invalid_argument("Embedding::expect: distribution width != vocab");
  return ad::matmul(dist, tape.param(table));
}

GRUCell::GRUCell(const std::string& name, int in, int hidden, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w = Parameter(name + ".w", uniform_matrix(in, 3 * hidden, bound, rng));
  u = Parameter(name + ".u", uniform_matrix(hidden, 3 * hidden, bound, rng));
  bw = Parameter(name + ".bw", Matrix::Zero(1, 3 * hidden));
  bu = Parameter(name + ".bu", Matrix::Zero(1, 3 * hidden));
}

Var GRUCell::step(Tape& tape, const Var& x, const Var& h) {
  const Eigen::Index n = hidden();
  Var xw = ad::add_row(ad::matmul(x, tape.param(w)), tape.param(bw));
  Var hu = ad::add_row(ad::matmul(h, tape.param(u)), tape.param(bu));
  Var r = ad::sigmoid(ad::add(ad::slice_cols(xw, 0, n), ad::slice_cols(hu, 0, n)));
  Var z = ad::sigmoid(ad::add(ad::slice_cols(xw, n, n), ad::slice_cols(hu, n, n)));
  Var cand = ad::tanh(ad::add(ad::slice_cols(xw, 2 * n, n), ad::mul(r, ad::slice_cols(hu, 2 * n, n))));
  // h' = (1 - z) * cand + z * h
  return ad::add(ad::mul(ad::one_minus(z), cand), ad::mul(z, h));
}

void GRUCell::collect(ParamList& out) {
  out.push_back(&w);
  out.push_back(&u);
  out.push_back(&bw);
  out.push_back(&bu);
}

LSTMCell::LSTMCell(const std::string& name, int in, int hidden, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  w = Parameter(name + ".w", uniform_matrix(in, 4 * hidden, bound, rng));
  u = Parameter(name + ".u", uniform_matrix(hidden, 4 * hidden, bound, rng));
  Matrix bias = Matrix::Zero(1, 4 * hidden);
  bias.middleCols(hidden, hidden).setOnes();  // forget gate
  b = Parameter(name + ".b", bias);
}

LSTMState LSTMCell::step(Tape& tape, const Var& x, const LSTMState& s) {
  const Eigen::Index n = hidden();
  Var gates = ad::add_row(ad::add(ad::matmul(x, tape.param(w)), ad::matmul(s.h, tape.param(u))), tape.param(b));
  Var i = ad::sigmoid(ad::slice_cols(gates, 0, n));
  Var f = ad::sigmoid(ad::slice_cols(gates, n, n));
  Var g = ad::tanh(ad::slice_cols(gates, 2 * n, n));
  Var o = ad::sigmoid(ad::slice_cols(gates, 3 * n, n));
  Var c = ad::add(ad::mul(f, s.c), ad::mul(i, g));
  return {ad::mul(o, ad::tanh(c)), c};
}

void LSTMCell::collect(ParamList& out) {
  out.push_back(&w);
  out.push_back(&u);
  out.push_back(&b);
}

MLP::MLP(const std::string& name, const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("MLP: need at least input and output dims");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    layers.emplace_back(name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
  }
}

Var MLP::operator()(Tape& tape, const Var& x) {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](tape, h);
    if (i + 1 < layers.size()) h = ad::relu(h);
  }
  return h;
}

void MLP::collect(ParamList& out) {
  for (auto& l : layers) l.collect(out);
}

Var blend(const Var& next, const Var& prev, const Var& mask) {
  return ad::add(prev, ad::mul_col(ad::sub(next, prev), mask));
}

}  // namespace dchat::nn
