#pragma once

#include <cmath>

#include "ilrec/model.hpp"

namespace ilrec {

// Adaptive moment estimation with decoupled weight decay. Moment state is a
// single flat buffer aligned with the canonical parameter order.
template <class S>
class AdamW {
 public:
  AdamW(Eigen::Index num_params, S lr, S weight_decay = S(0),
        S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8))
      : m_(VecX<S>::Zero(num_params)),
        v_(VecX<S>::Zero(num_params)),
        lr_(lr),
        wd_(weight_decay),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {}

  void step(ModelParams<S>& params, const ModelParams<S>& grads) {
    ++t_;
    const S bc1 = S(1) - std::pow(beta1_, S(t_));
    const S bc2 = S(1) - std::pow(beta2_, S(t_));
    auto pv = param_views(params);
    const auto gv = param_views(grads);
    Eigen::Index off = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const Eigen::Index n = pv[i].size();
      auto m = m_.segment(off, n);
      auto v = v_.segment(off, n);
      m = beta1_ * m + (S(1) - beta1_) * gv[i];
      v = beta2_ * v + (S(1) - beta2_) * gv[i].cwiseProduct(gv[i]);
      pv[i] -= lr_ * ((m / bc1).array() / ((v / bc2).array().sqrt() + eps_))
                   .matrix();
      if (wd_ > S(0)) pv[i] -= lr_ * wd_ * pv[i];
      off += n;
    }
  }

 private:
  VecX<S> m_, v_;
  S lr_, wd_, beta1_, beta2_, eps_;
  long t_ = 0;
};

template <class S>
S global_grad_norm(const ModelParams<S>& grads) {
  S sq = S(0);
  visit_params(grads, [&](const auto& t) { sq += t.squaredNorm(); });
  return std::sqrt(sq);
}

// Scales gradients so their global norm is at most max_norm (no-op when
// max_norm <= 0).
template <class S>
void clip_grad_norm(ModelParams<S>& grads, S max_norm) {
  if (max_norm <= S(0)) return;
  const S norm = global_grad_norm(grads);
  if (norm <= max_norm) return;
  const S scale = max_norm / norm;
  visit_params(grads, [&](auto& t) { t *= scale; });
}

}  // namespace ilrec
