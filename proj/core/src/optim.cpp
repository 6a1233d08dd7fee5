#include "dchat/optim.hpp"

#include <cmath>

namespace dchat::optim {

double clip_grad_norm(const ParamList& params, double max_norm) {
  const double norm = nn::grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

void Sgd::step(const ParamList& params) {
  if (clip_ > 0.0) clip_grad_norm(params, clip_);
  for (auto* p : params) p->value -= lr_ * p->grad;
}

void Adam::step(const ParamList& params) {
  for (auto* p : params) {
    auto& st = state_[p];
    if (st.t == 0) {
      st.m = ad::Matrix::Zero(p->value.rows(), p->value.cols());
      st.v = ad::Matrix::Zero(p->value.rows(), p->value.cols());
    }
    ++st.t;
    st.m = beta1_ * st.m + (1.0 - beta1_) * p->grad;
    st.v = beta2_ * st.v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(st.t));
    p->value.array() -= lr_ * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + eps_);
  }
}

}  // namespace dchat::optim
