#pragma once

// Layers built on the autograd tape. Every layer exposes collect() so that
// models can enumerate their parameters without owning pointer lists that
// would dangle when a model is copied.

#include "dchat/autograd.hpp"
#include "dchat/random.hpp"

#include <string>
#include <utility>
#include <vector>

namespace dchat::nn {

using ad::Matrix;
using ad::Parameter;
using ad::Tape;
using ad::Var;
using ParamList = std::vector<Parameter*>;

/// Uniform(-bound, bound) matrix.
Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng);

void set_requires_grad(const ParamList& params, bool on);
void zero_grad(const ParamList& params);
double grad_norm(const ParamList& params);

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // 1 x out

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng);
  Var operator()(Tape& tape, const Var& x);
  void collect(ParamList& out) { out.push_back(&weight); out.push_back(&bias); }
  [[nodiscard]] int in_dim() const { return static_cast<int>(weight.value.rows()); }
  [[nodiscard]] int out_dim() const { return static_cast<int>(weight.value.cols()); }
};

struct Embedding {
  Parameter table;  // vocab x dim

  Embedding() = default;
  Embedding(const std::string& name, int vocab, int dim, Rng& rng);
  Var lookup(Tape& tape, const std::vector<int>& ids);
  /// Expected embedding under per-row distributions over the vocabulary.
  Var expect(Tape& tape, const Var& dist);
  void collect(ParamList& out) { out.push_back(&table); }
  [[nodiscard]] int dim() const { return static_cast<int>(table.value.cols()); }
};

/// Gated recurrent unit: r, z gates and candidate n with reset applied to the
/// recurrent term.
struct GRUCell {
  Parameter w;   // in x 3h  [r | z | n]
  Parameter u;   // h x 3h
  Parameter bw;  // 1 x 3h
  Parameter bu;  // 1 x 3h

  GRUCell() = default;
  GRUCell(const std::string& name, int in, int hidden, Rng& rng);
  Var step(Tape& tape, const Var& x, const Var& h);
  void collect(ParamList& out);
  [[nodiscard]] int hidden() const { return static_cast<int>(u.value.rows()); }
};

struct LSTMState {
  Var h;
  Var c;
};

struct LSTMCell {
  Parameter w;  // in x 4h  [i | f | g | o]
  Parameter u;  // h x 4h
  Parameter b;  // 1 x 4h

  LSTMCell() = default;
  LSTMCell(const std::string& name, int in, int hidden, Rng& rng);
  LSTMState step(Tape& tape, const Var& x, const LSTMState& s);
  void collect(ParamList& out);
  [[nodiscard]] int hidden() const { return static_cast<int>(u.value.rows()); }
};

/// Feedforward network with ReLU between layers and raw logits at the end.
struct MLP {
  std::vector<Linear> layers;

  MLP() = default;
  MLP(const std::string& name, const std::vector<int>& dims, Rng& rng);
  Var operator()(Tape& tape, const Var& x);
  void collect(ParamList& out);
};

/// Keep `next` where mask is 1 and `prev` where mask is 0; the mask is a
/// rows x 1 column and may be fractional.
Var blend(const Var& next, const Var& prev, const Var& mask);

}  // namespace dchat::nn
