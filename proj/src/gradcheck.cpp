#include "ilrec/gradcheck.hpp"

#include <algorithm>

namespace ilrec {

Batch random_batch(const ModelConfig& cfg, int num_seqs, int seq_len,
                   int rows_per_seq, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> tok(0, cfg.vocab_size - 1);
  Batch batch;
  for (int s = 0; s < num_seqs; ++s) {
    SequenceInput seq;
    seq.tokens.resize(seq_len);
    seq.tokens[0] = kBosToken;
    for (int t = 1; t < seq_len; ++t) seq.tokens[t] = tok(rng);
    // Distinct gather positions in [1, seq_len-1]; the target is the token
    // actually at that position (teacher forcing).
    std::vector<int> pool;
    for (int t = 1; t < seq_len; ++t) pool.push_back(t);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min<std::size_t>(pool.size(), rows_per_seq));
    std::sort(pool.begin(), pool.end());
    for (int t : pool) {
      seq.gather.push_back(t);
      seq.targets.push_back(seq.tokens[t]);
    }
    batch.seqs.push_back(std::move(seq));
  }
  return batch;
}

MatXd random_rewards(int rows, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  MatXd r(rows, vocab);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < vocab; ++j) r(i, j) = uni(rng);
  return r;
}

GradCheckReport run_gradcheck_suite(const std::vector<std::uint64_t>& seeds,
                                    bool corrupt_gradient) {
  GradCheckReport report;
  const LossTerm terms[] = {LossTerm::sft, LossTerm::cpo, LossTerm::cpd,
                            LossTerm::crr, LossTerm::cpt, LossTerm::total};
  const HeadMode modes[] = {HeadMode::shared_unembedding,
                            HeadMode::per_layer_heads};

  for (std::uint64_t seed : seeds) {
    for (HeadMode mode : modes) {
      ModelConfig cfg;
      cfg.vocab_size = 17;
      cfg.embed_dim = 8;
      cfg.num_layers = 2;
      cfg.num_heads = 2;
      cfg.ff_dim = 12;
      cfg.max_positions = 16;
      cfg.tapped_layer_count = 1;
      cfg.head_mode = mode;
      cfg.seed = seed;

      Hyperparams hp;
      hp.alpha = 0.6;
      hp.beta = 0.3;
      hp.lambda = 0.5;
      hp.mu = 0.7;
      hp.k = 1;

      ModelParams<double> params = init_model<double>(cfg);
      Batch batch = random_batch(cfg, 2, 9, 3, seed * 7919 + 13);

      // Freeze supervision at the starting point.
      LayerLogits<double> base = forward_all_layers(params, batch);
      auto sup = std::make_shared<FrozenSupervision<double>>(
          build_supervision(base, hp, random_rewards(base.rows(),
                                                     cfg.vocab_size,
                                                     seed * 31 + 7)));

      for (LossTerm term : terms) {
        LossFn<double> fn = frozen_term_loss<double>(term, sup, hp);
        if (corrupt_gradient) {
          LossFn<double> inner = fn;
          fn = [inner](const LayerLogits<double>& ll) {
            LossGrad<double> lg = inner(ll);
            for (auto& d : lg.dlogits)
              if (d.size() != 0) {
                d(0, 0) += 1e-2;
                break;
              }
            return lg;
          };
        }
        FdResult<double> fd = finite_difference_check(params, batch, fn);
        GradCheckCase c;
        c.name = std::string(to_string(term)) + "/" + to_string(mode) +
                 "/seed" + std::to_string(seed);
        c.max_rel_err = fd.max_rel_err;
        c.params_checked = fd.params_checked;
        report.cases.push_back(c);
      }
    }
  }
  return report;
}

double cpo_reference_max_abs_err(int num_fixtures, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> vocab_pick(5, 40);
  std::uniform_real_distribution<double> logit(-4.0, 4.0);
  std::uniform_real_distribution<double> beta_pick(0.0, 1.0);
  std::uniform_real_distribution<double> alpha_pick(0.1, 0.95);

  double worst = 0.0;
  for (int f = 0; f < num_fixtures; ++f) {
    const int vocab = vocab_pick(rng);
    VecXd p(vocab);
    for (int j = 0; j < vocab; ++j) p(j) = logit(rng);
    std::uniform_int_distribution<int> tok(0, vocab - 1);
    const int target = tok(rng);

    Hyperparams hp;
    hp.alpha = alpha_pick(rng);
    const double beta = beta_pick(rng);
    VecXd probs = softmax<double>(p);
    PositionNegatives<double> neg =
        extract_negatives<double>(probs, p, target, hp);

    VecXd analytic =
        cpo_grad_row<double>(p, target, neg, beta, PenaltyMode::multiplicative);
    VecXd reference = cpo_gradient_reference<double>(p, target, neg, beta);
    worst = std::max(worst, (analytic - reference).cwiseAbs().maxCoeff());
  }
  return worst;
}

}  // namespace ilrec
