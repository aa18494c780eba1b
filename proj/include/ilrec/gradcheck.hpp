#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ilrec/losses.hpp"
#include "ilrec/model.hpp"

namespace ilrec {

// ---- centered finite differences over every parameter ----------------------

template <class S>
struct FdResult {
  S max_rel_err = S(0);
  Eigen::Index params_checked = 0;
};

// Compares backward()'s analytic gradient with centered differences at every
// parameter scalar. The loss callback must be a fixed function of the logits
// (supervision frozen), otherwise the difference quotient measures the wrong
// derivative. Step 1e-5, scaled by parameter magnitude.
template <class S>
FdResult<S> finite_difference_check(ModelParams<S>& p, const Batch& batch,
                                    const LossFn<S>& loss_fn) {
  const BackwardResult<S> base = backward(p, batch, loss_fn);
  auto pviews = param_views(p);
  auto gviews = param_views(base.grads);

  FdResult<S> res;
  for (std::size_t v = 0; v < pviews.size(); ++v) {
    auto& pv = pviews[v];
    const auto& gv = gviews[v];
    for (Eigen::Index i = 0; i < pv.size(); ++i) {
      const S orig = pv(i);
      const S eps = S(1e-5) * std::max(S(1), std::abs(orig));
      pv(i) = orig + eps;
      const S up = loss_fn(forward_all_layers(p, batch)).value;
      pv(i) = orig - eps;
      const S dn = loss_fn(forward_all_layers(p, batch)).value;
      pv(i) = orig;
      const S fd = (up - dn) / (S(2) * eps);
      const S a = gv(i);
      const S denom = std::max({std::abs(a), std::abs(fd), S(1e-6)});
      res.max_rel_err = std::max(res.max_rel_err, std::abs(a - fd) / denom);
      ++res.params_checked;
    }
  }
  return res;
}

// ---- frozen per-term loss callbacks -----------------------------------------

enum class LossTerm { sft, cpo, cpd, crr, cpt, total };

inline const char* to_string(LossTerm t) {
  switch (t) {
    case LossTerm::sft: return "l_sft";
    case LossTerm::cpo: return "l_cpo";
    case LossTerm::cpd: return "l_cpd";
    case LossTerm::crr: return "l_crr";
    case LossTerm::cpt: return "l_cpt";
    case LossTerm::total: return "l_total";
  }
  return "?";
}

// Builds a loss callback for one term with the supervision (negatives,
// teacher, rewards) frozen at `sup`, so the callback is smooth in the logits.
template <class S>
LossFn<S> frozen_term_loss(LossTerm term,
                           std::shared_ptr<const FrozenSupervision<S>> sup,
                           Hyperparams hp) {
  switch (term) {
    case LossTerm::sft:
      return [](const LayerLogits<S>& ll) { return sft_loss_grads<S>(ll); };
    case LossTerm::cpo:
      return [sup, hp](const LayerLogits<S>& ll) {
        const MatX<S>& fin = ll.final_logits();
        const Eigen::Index rows = fin.rows();
        const S inv = S(1) / S(rows);
        LossGrad<S> out;
        out.dlogits.assign(ll.num_taps(), MatX<S>());
        MatX<S>& d = out.dlogits[ll.final_tap()];
        d.resize(rows, fin.cols());
        for (Eigen::Index r = 0; r < rows; ++r) {
          const auto p = fin.row(r).transpose();
          const auto& neg = sup->negatives[r];
          out.value += cpo_loss_row<S>(p, ll.row_target[r], neg, S(hp.beta),
                                       hp.penalty_mode);
          d.row(r) = inv * cpo_grad_row<S>(p, ll.row_target[r], neg,
                                           S(hp.beta), hp.penalty_mode)
                               .transpose();
        }
        out.value *= inv;
        return out;
      };
    case LossTerm::cpd:
      return [sup, hp](const LayerLogits<S>& ll) {
        const Eigen::Index rows = ll.final_logits().rows();
        const S inv = S(1) / S(rows);
        const int width = hp.k + (hp.include_extra_layer ? 1 : 0);
        LossGrad<S> out;
        out.dlogits.assign(ll.num_taps(), MatX<S>());
        for (int t = ll.num_taps() - 1 - width; t < ll.num_taps() - 1; ++t) {
          MatX<S>& d = out.dlogits[t];
          d.resize(rows, ll.logits[t].cols());
          for (Eigen::Index r = 0; r < rows; ++r) {
            const auto srow = ll.logits[t].row(r).transpose();
            const auto trow = sup->teacher_logprobs.row(r).transpose();
            out.value += kl_row<S>(srow, trow);
            d.row(r) = inv * kl_grad_row<S>(srow, trow).transpose();
          }
        }
        out.value *= inv;
        return out;
      };
    case LossTerm::crr:
      return [sup](const LayerLogits<S>& ll) {
        const MatX<S>& fin = ll.final_logits();
        const Eigen::Index rows = fin.rows();
        const S inv = S(1) / S(rows);
        LossGrad<S> out;
        out.dlogits.assign(ll.num_taps(), MatX<S>());
        MatX<S>& d = out.dlogits[ll.final_tap()];
        d.resize(rows, fin.cols());
        for (Eigen::Index r = 0; r < rows; ++r) {
          const auto p = fin.row(r).transpose();
          const auto rw = sup->rewards.row(r).transpose();
          const auto& neg = sup->negatives[r];
          out.value += crr_loss_row<S>(p, neg, ll.row_target[r], rw);
          d.row(r) =
              inv * crr_grad_row<S>(p, neg, ll.row_target[r], rw).transpose();
        }
        out.value *= inv;
        return out;
      };
    case LossTerm::cpt: {
      Hyperparams cut = hp;
      cut.mu = 0.0;
      return [sup, cut](const LayerLogits<S>& ll) {
        return total_loss_grads<S>(ll, *sup, cut);
      };
    }
    case LossTerm::total:
      return [sup, hp](const LayerLogits<S>& ll) {
        return total_loss_grads<S>(ll, *sup, hp);
      };
  }
  throw NumericError("unreachable loss term");
}

// ---- the standard suite ------------------------------------------------------

struct GradCheckCase {
  std::string name;
  double max_rel_err = 0;
  Eigen::Index params_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double worst() const {
    double w = 0;
    for (const auto& c : cases) w = std::max(w, c.max_rel_err);
    return w;
  }
  bool pass(double tol = 1e-4) const { return worst() < tol; }
};

// Small random training batch with matching gather targets.
Batch random_batch(const ModelConfig& cfg, int num_seqs, int seq_len,
                   int rows_per_seq, std::uint64_t seed);

// Random reward rows in [0, 1], frozen constants for the CRR term.
MatXd random_rewards(int rows, int vocab, std::uint64_t seed);

// Runs every loss term under both head modes for the given seeds on a
// 2-layer, vocab-17 model. corrupt_gradient is a negative control: it biases
// one analytic gradient so the check must fail.
GradCheckReport run_gradcheck_suite(const std::vector<std::uint64_t>& seeds,
                                    bool corrupt_gradient = false);

// Compares the production preference-penalty gradient against the
// independently coded closed form on random (logits, target, negative set)
// fixtures; returns the worst absolute component error.
double cpo_reference_max_abs_err(int num_fixtures, std::uint64_t seed);

}  // namespace ilrec
