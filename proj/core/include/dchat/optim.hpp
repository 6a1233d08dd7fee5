#pragma once

#include "dchat/nn.hpp"

#include <unordered_map>

namespace dchat::optim {

using nn::ParamList;

/// Scale all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const ParamList& params, double max_norm);

class Sgd {
 public:
  explicit Sgd(double lr, double clip = 0.0) : lr_(lr), clip_(clip) {}
  void step(const ParamList& params);

 private:
  double lr_;
  double clip_;
};

/// Adaptive-moment descent with bias correction. Moment buffers are keyed by
/// parameter address, so an instance must not outlive the model it updates.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const ParamList& params);

 private:
  struct Moments {
    ad::Matrix m;
    ad::Matrix v;
    long t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::unordered_map<const ad::Parameter*, Moments> state_;
};

}  // namespace dchat::optim
