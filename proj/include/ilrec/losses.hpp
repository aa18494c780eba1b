#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "ilrec/common.hpp"
#include "ilrec/model.hpp"

namespace ilrec {

enum class EnsembleStrategy { mean, entropy, variance, max_prob };
enum class PenaltyMode { multiplicative, additive };
enum class NegWeightSource { probability, logit };

inline EnsembleStrategy ensemble_strategy_from_string(const std::string& s) {
  if (s == "mean") return EnsembleStrategy::mean;
  if (s == "entropy") return EnsembleStrategy::entropy;
  if (s == "variance") return EnsembleStrategy::variance;
  if (s == "max_prob") return EnsembleStrategy::max_prob;
  throw ConfigError("unknown ensemble_strategy: " + s);
}

inline PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "multiplicative") return PenaltyMode::multiplicative;
  if (s == "additive") return PenaltyMode::additive;
  throw ConfigError("unknown penalty_mode: " + s);
}

inline NegWeightSource neg_weight_source_from_string(const std::string& s) {
  if (s == "probability") return NegWeightSource::probability;
  if (s == "logit") return NegWeightSource::logit;
  throw ConfigError("unknown negative_weight_source: " + s);
}

struct Hyperparams {
  double alpha = 0.8;   // hard-negative threshold fraction
  double beta = 0.1;    // preference penalty strength
  double lambda = 0.01; // distillation weight
  double mu = 0.01;     // collaborative reward weight
  int k = 3;            // intermediate layers in the ensemble
  EnsembleStrategy ensemble_strategy = EnsembleStrategy::mean;
  PenaltyMode penalty_mode = PenaltyMode::multiplicative;
  // When true the ensemble also includes layer L-k-1, matching the wider
  // window; the divisor stays k either way.
  bool include_extra_layer = false;
  NegWeightSource negative_weight_source = NegWeightSource::probability;

  void validate(int num_layers, int tapped_layer_count) const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    if (beta < 0.0) throw ConfigError("beta must be >= 0");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (mu < 0.0) throw ConfigError("mu must be >= 0");
    const int needed = k + (include_extra_layer ? 1 : 0);
    if (k < 1 || k > num_layers - 1)
      throw ConfigError("k must be in [1, num_layers-1]");
    if (needed > tapped_layer_count)
      throw ConfigError("ensemble needs " + std::to_string(needed) +
                        " tapped intermediate layers, have " +
                        std::to_string(tapped_layer_count));
  }
};

// ---- numerically stable primitives ----------------------------------------

template <class S, class Derived>
S logsumexp(const Eigen::DenseBase<Derived>& v) {
  const S mx = v.derived().maxCoeff();
  return mx + std::log((v.derived().array() - mx).exp().sum());
}

template <class S, class Derived>
VecX<S> softmax(const Eigen::DenseBase<Derived>& v) {
  const S mx = v.derived().maxCoeff();
  VecX<S> e = (v.derived().array() - mx).exp().matrix();
  return e / e.sum();
}

template <class S, class Derived>
VecX<S> log_softmax(const Eigen::DenseBase<Derived>& v) {
  VecX<S> out = v.derived();
  out.array() -= logsumexp<S>(out);
  return out;
}

// ---- supervised fine-tuning (token cross entropy) ---------------------------

// Mean next-token cross entropy over all response rows of one tap.
template <class S>
S ce_loss_rows(const MatX<S>& logits, std::span<const int> targets) {
  S total = S(0);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = targets[r];
    if (y < 0) throw NumericError("ce_loss: row without a target");
    total += logsumexp<S>(logits.row(r).transpose()) - logits(r, y);
  }
  return total / S(logits.rows());
}

template <class S>
MatX<S> ce_grad_rows(const MatX<S>& logits, std::span<const int> targets) {
  MatX<S> g(logits.rows(), logits.cols());
  const S inv = S(1) / S(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    VecX<S> sm = softmax<S>(logits.row(r).transpose());
    sm(targets[r]) -= S(1);
    g.row(r) = sm.transpose() * inv;
  }
  return g;
}

template <class S>
S sft_loss(const LayerLogits<S>& ll) {
  return ce_loss_rows(ll.final_logits(), std::span<const int>(ll.row_target));
}

// ---- intermediate-layer ensemble --------------------------------------------

template <class S>
struct EnsembleOutput {
  MatX<S> logits;             // rows x vocab
  MatX<S> probs;              // softmax of logits, per row
  std::vector<int> tap_set;   // tap indices that entered the ensemble
};

// Combines the logits of the k intermediate layers below the final one
// (plus one more with include_extra_layer). mean divides the sum by k
// regardless, so the wider window deliberately rescales the logits; the
// weighted strategies normalize per row via a softmax over layer scores.
template <class S>
EnsembleOutput<S> ensemble_logits(const LayerLogits<S>& ll,
                                  const Hyperparams& hp) {
  const int taps = ll.num_taps();
  const int width = hp.k + (hp.include_extra_layer ? 1 : 0);
  if (width > taps - 1)
    throw ConfigError("ensemble: not enough tapped intermediate layers");
  EnsembleOutput<S> out;
  for (int t = taps - 1 - width; t < taps - 1; ++t) out.tap_set.push_back(t);

  const Eigen::Index rows = ll.final_logits().rows();
  const Eigen::Index vocab = ll.final_logits().cols();
  out.logits = MatX<S>::Zero(rows, vocab);

  if (hp.ensemble_strategy == EnsembleStrategy::mean) {
    for (int t : out.tap_set) out.logits += ll.logits[t];
    out.logits /= S(hp.k);
  } else {
    for (Eigen::Index r = 0; r < rows; ++r) {
      VecX<S> score(static_cast<Eigen::Index>(out.tap_set.size()));
      for (std::size_t i = 0; i < out.tap_set.size(); ++i) {
        const auto row = ll.logits[out.tap_set[i]].row(r).transpose();
        switch (hp.ensemble_strategy) {
          case EnsembleStrategy::entropy: {
            // Negative entropy: confident layers score higher.
            VecX<S> p = softmax<S>(row);
            S h = S(0);
            for (Eigen::Index j = 0; j < p.size(); ++j)
              if (p(j) > S(0)) h += p(j) * std::log(p(j));
            score(i) = h;
            break;
          }
          case EnsembleStrategy::variance: {
            const S mean = row.mean();
            score(i) = (row.array() - mean).square().sum() / S(row.size());
            break;
          }
          case EnsembleStrategy::max_prob:
            score(i) = softmax<S>(row).maxCoeff();
            break;
          default:
            throw NumericError("unreachable ensemble strategy");
        }
      }
      VecX<S> w = softmax<S>(score);
      for (std::size_t i = 0; i < out.tap_set.size(); ++i)
        out.logits.row(r) += w(i) * ll.logits[out.tap_set[i]].row(r);
    }
  }

  out.probs.resize(rows, vocab);
  for (Eigen::Index r = 0; r < rows; ++r)
    out.probs.row(r) = softmax<S>(out.logits.row(r).transpose()).transpose();
  return out;
}

// ---- self-hard negatives ----------------------------------------------------

// Hard-negative set for one response position: tokens (other than the
// target) whose ensemble probability reaches alpha times the target's, with
// preference weights normalized over the set. Treated as a constant during
// backpropagation.
template <class S>
struct PositionNegatives {
  S tau = S(0);
  std::vector<int> tokens;  // ascending token ids
  VecX<S> weights;          // softmax weights, aligned with tokens
};

template <class S>
PositionNegatives<S> extract_negatives(const Eigen::Ref<const VecX<S>>& probs,
                                       const Eigen::Ref<const VecX<S>>& logits,
                                       int target, const Hyperparams& hp) {
  PositionNegatives<S> out;
  out.tau = S(hp.alpha) * probs(target);
  for (Eigen::Index v = 0; v < probs.size(); ++v)
    if (v != target && probs(v) >= out.tau)
      out.tokens.push_back(static_cast<int>(v));
  if (out.tokens.empty()) return out;
  VecX<S> raw(static_cast<Eigen::Index>(out.tokens.size()));
  for (std::size_t i = 0; i < out.tokens.size(); ++i)
    raw(i) = hp.negative_weight_source == NegWeightSource::probability
                 ? probs(out.tokens[i])
                 : logits(out.tokens[i]);
  out.weights = softmax<S>(raw);
  return out;
}

// ---- cross-layer preference loss --------------------------------------------

namespace detail {

// Penalized logit q_v: negatives are amplified, everything else passes
// through. multiplicative scales by (1 + beta * w_v); additive shifts by
// beta * w_v * |p_v| so the nudge also grows with logit magnitude.
template <class S>
VecX<S> penalized_logits(const Eigen::Ref<const VecX<S>>& p,
                         const PositionNegatives<S>& neg, S beta,
                         PenaltyMode mode) {
  VecX<S> q = p;
  for (std::size_t i = 0; i < neg.tokens.size(); ++i) {
    const int v = neg.tokens[i];
    const S w = neg.weights(i);
    if (mode == PenaltyMode::multiplicative)
      q(v) = p(v) * (S(1) + beta * w);
    else
      q(v) = p(v) + beta * w * std::abs(p(v));
  }
  return q;
}

}  // namespace detail

template <class S>
S cpo_loss_row(const Eigen::Ref<const VecX<S>>& p, int target,
               const PositionNegatives<S>& neg, S beta, PenaltyMode mode) {
  VecX<S> q = detail::penalized_logits(p, neg, beta, mode);
  return logsumexp<S>(q) - p(target);
}

// Gradient w.r.t. the raw logits p, treating the negative weights as
// constants. dq_v/dp_v is (1 + beta w_v) in multiplicative mode and
// 1 + beta w_v sign(p_v) in additive mode.
template <class S>
VecX<S> cpo_grad_row(const Eigen::Ref<const VecX<S>>& p, int target,
                     const PositionNegatives<S>& neg, S beta,
                     PenaltyMode mode) {
  VecX<S> q = detail::penalized_logits(p, neg, beta, mode);
  VecX<S> g = softmax<S>(q);
  for (std::size_t i = 0; i < neg.tokens.size(); ++i) {
    const int v = neg.tokens[i];
    const S w = neg.weights(i);
    if (mode == PenaltyMode::multiplicative)
      g(v) *= S(1) + beta * w;
    else
      g(v) *= S(1) + beta * w * S(p(v) > S(0) ? 1 : (p(v) < S(0) ? -1 : 0));
  }
  g(target) -= S(1);
  return g;
}

// Closed-form gradient of the multiplicative preference loss, written the
// way it falls out of differentiating the loss directly: the target picks up
// -sum_{v != y} exp(q_v)/Z and every other token (1 + beta w_v) exp(q_v)/Z.
// Kept as an independently-coded cross-check for cpo_grad_row.
template <class S>
VecX<S> cpo_gradient_reference(const Eigen::Ref<const VecX<S>>& p, int target,
                               const PositionNegatives<S>& neg, S beta) {
  VecX<S> q = detail::penalized_logits(p, neg, beta,
                                       PenaltyMode::multiplicative);
  const S mx = q.maxCoeff();
  VecX<S> ex = (q.array() - mx).exp();
  const S z = ex.sum();
  VecX<S> g(p.size());
  S others = S(0);
  for (Eigen::Index v = 0; v < p.size(); ++v) {
    if (v == target) continue;
    others += ex(v);
  }
  g(target) = -others / z;
  VecX<S> w_full = VecX<S>::Zero(p.size());
  for (std::size_t i = 0; i < neg.tokens.size(); ++i)
    w_full(neg.tokens[i]) = neg.weights(i);
  for (Eigen::Index v = 0; v < p.size(); ++v) {
    if (v == target) continue;
    g(v) = (S(1) + beta * w_full(v)) * ex(v) / z;
  }
  return g;
}

// ---- cross-layer preference distillation ------------------------------------

// KL(student || teacher) for one row, teacher given as log-probabilities and
// treated as a constant.
template <class S>
S kl_row(const Eigen::Ref<const VecX<S>>& student_logits,
         const Eigen::Ref<const VecX<S>>& teacher_logprobs) {
  VecX<S> ls = log_softmax<S>(student_logits);
  S kl = S(0);
  for (Eigen::Index j = 0; j < ls.size(); ++j)
    kl += std::exp(ls(j)) * (ls(j) - teacher_logprobs(j));
  return kl;
}

template <class S>
VecX<S> kl_grad_row(const Eigen::Ref<const VecX<S>>& student_logits,
                    const Eigen::Ref<const VecX<S>>& teacher_logprobs) {
  VecX<S> ls = log_softmax<S>(student_logits);
  VecX<S> s = ls.array().exp().matrix();
  const S kl = (s.array() * (ls - teacher_logprobs).array()).sum();
  return (s.array() * ((ls - teacher_logprobs).array() - kl)).matrix();
}

// ---- collaborative reward loss ----------------------------------------------

// Soft cross entropy between the reward distribution over the union of the
// negatives and the target, and the model's full-vocabulary distribution.
// Rewards act as constants.
template <class S>
S crr_loss_row(const Eigen::Ref<const VecX<S>>& p,
               const PositionNegatives<S>& neg, int target,
               const Eigen::Ref<const VecX<S>>& rewards) {
  std::vector<int> pool = neg.tokens;
  pool.push_back(target);
  VecX<S> r(static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) r(i) = rewards(pool[i]);
  VecX<S> soft = softmax<S>(r);
  VecX<S> lsm = log_softmax<S>(p);
  S loss = S(0);
  for (std::size_t i = 0; i < pool.size(); ++i) loss -= soft(i) * lsm(pool[i]);
  return loss;
}

template <class S>
VecX<S> crr_grad_row(const Eigen::Ref<const VecX<S>>& p,
                     const PositionNegatives<S>& neg, int target,
                     const Eigen::Ref<const VecX<S>>& rewards) {
  std::vector<int> pool = neg.tokens;
  pool.push_back(target);
  VecX<S> r(static_cast<Eigen::Index>(pool.size()));
  for (std::size_t i = 0; i < pool.size(); ++i) r(i) = rewards(pool[i]);
  VecX<S> soft = softmax<S>(r);
  VecX<S> g = softmax<S>(p);  // soft weights sum to one
  for (std::size_t i = 0; i < pool.size(); ++i) g(pool[i]) -= soft(i);
  return g;
}

// ---- combined objective ------------------------------------------------------

template <class S>
struct LossBreakdown {
  S sft = S(0);
  S cpo = S(0);
  S cpd = S(0);
  S crr = S(0);
  S cpt = S(0);
  S total = S(0);
  S mean_num_negatives = S(0);
  S mean_tau = S(0);
};

// Everything the combined loss treats as a constant: the hard-negative sets,
// the teacher distribution, and the collaborative rewards. Freezing these at
// one point makes the loss a smooth function of the logits, which is exactly
// what the finite-difference harness needs; the trainer rebuilds them every
// step from the live logits.
template <class S>
struct FrozenSupervision {
  std::vector<PositionNegatives<S>> negatives;  // per row
  MatX<S> teacher_logprobs;                     // rows x vocab
  MatX<S> rewards;                              // rows x vocab, empty if unused
};

template <class S>
FrozenSupervision<S> build_supervision(const LayerLogits<S>& ll,
                                       const Hyperparams& hp,
                                       const MatX<S>& rewards) {
  EnsembleOutput<S> ens = ensemble_logits(ll, hp);
  FrozenSupervision<S> sup;
  const Eigen::Index rows = ens.logits.rows();
  sup.negatives.reserve(rows);
  for (Eigen::Index r = 0; r < rows; ++r)
    sup.negatives.push_back(extract_negatives<S>(
        ens.probs.row(r).transpose(), ens.logits.row(r).transpose(),
        ll.row_target[r], hp));
  const MatX<S>& fin = ll.final_logits();
  sup.teacher_logprobs.resize(rows, fin.cols());
  for (Eigen::Index r = 0; r < rows; ++r)
    sup.teacher_logprobs.row(r) =
        log_softmax<S>(fin.row(r).transpose()).transpose();
  sup.rewards = rewards;
  return sup;
}

// Combined loss and its logit gradients under fixed supervision. Per-row
// terms are averaged over rows; the distillation term sums its per-layer KL
// at each row before averaging.
template <class S>
LossGrad<S> total_loss_grads(const LayerLogits<S>& ll,
                             const FrozenSupervision<S>& sup,
                             const Hyperparams& hp,
                             LossBreakdown<S>* breakdown = nullptr) {
  const MatX<S>& fin = ll.final_logits();
  const Eigen::Index rows = fin.rows();
  if (static_cast<Eigen::Index>(sup.negatives.size()) != rows)
    throw NumericError("total_loss: supervision row mismatch");
  const S inv_rows = S(1) / S(rows);
  const S beta = S(hp.beta), lambda = S(hp.lambda), mu = S(hp.mu);

  LossGrad<S> out;
  out.dlogits.assign(ll.num_taps(), MatX<S>());
  MatX<S>& dfinal = out.dlogits[ll.final_tap()];
  dfinal = MatX<S>::Zero(rows, fin.cols());

  LossBreakdown<S> bd;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int y = ll.row_target[r];
    const auto& neg = sup.negatives[r];
    const auto p = fin.row(r).transpose();
    bd.sft += logsumexp<S>(p) - p(y);
    bd.cpo += cpo_loss_row<S>(p, y, neg, beta, hp.penalty_mode);
    dfinal.row(r) +=
        cpo_grad_row<S>(p, y, neg, beta, hp.penalty_mode).transpose();
    if (mu > S(0)) {
      bd.crr += crr_loss_row<S>(p, neg, y, sup.rewards.row(r).transpose());
      dfinal.row(r) +=
          mu *
          crr_grad_row<S>(p, neg, y, sup.rewards.row(r).transpose()).transpose();
    }
    bd.mean_num_negatives += S(static_cast<double>(neg.tokens.size()));
    bd.mean_tau += neg.tau;
  }

  const int width = hp.k + (hp.include_extra_layer ? 1 : 0);
  std::vector<int> cpd_taps;
  for (int t = ll.num_taps() - 1 - width; t < ll.num_taps() - 1; ++t)
    cpd_taps.push_back(t);
  if (lambda > S(0)) {
    for (int t : cpd_taps) {
      MatX<S>& dl = out.dlogits[t];
      dl = MatX<S>::Zero(rows, fin.cols());
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto srow = ll.logits[t].row(r).transpose();
        const auto trow = sup.teacher_logprobs.row(r).transpose();
        bd.cpd += kl_row<S>(srow, trow);
        dl.row(r) = (lambda * inv_rows) * kl_grad_row<S>(srow, trow).transpose();
      }
    }
  }

  bd.sft *= inv_rows;
  bd.cpo *= inv_rows;
  bd.cpd *= inv_rows;
  bd.crr *= inv_rows;
  bd.mean_num_negatives *= inv_rows;
  bd.mean_tau *= inv_rows;
  bd.cpt = bd.cpo + S(hp.lambda) * bd.cpd;
  bd.total = bd.cpt + mu * bd.crr;
  dfinal *= inv_rows;

  out.value = bd.total;
  if (breakdown) *breakdown = bd;
  return out;
}

// Loss callback for plain cross-entropy training; intermediate taps carry no
// gradient.
template <class S>
LossGrad<S> sft_loss_grads(const LayerLogits<S>& ll,
                           LossBreakdown<S>* breakdown = nullptr) {
  LossGrad<S> out;
  out.dlogits.assign(ll.num_taps(), MatX<S>());
  std::span<const int> targets(ll.row_target);
  out.value = ce_loss_rows(ll.final_logits(), targets);
  out.dlogits[ll.final_tap()] = ce_grad_rows(ll.final_logits(), targets);
  if (breakdown) {
    LossBreakdown<S> bd;
    bd.sft = out.value;
    bd.total = out.value;
    *breakdown = bd;
  }
  return out;
}

}  // namespace ilrec
