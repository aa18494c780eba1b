#include <doctest.h>

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "ilrec/gradcheck.hpp"
#include "ilrec/losses.hpp"

using namespace ilrec;

namespace {

VecXd vec(std::initializer_list<double> vals) {
  VecXd v(static_cast<Eigen::Index>(vals.size()));
  Eigen::Index i = 0;
  for (double x : vals) v(i++) = x;
  return v;
}

// Hand-built tapped logits: one matrix per tap, shared row targets.
LayerLogits<double> make_layers(const std::vector<MatXd>& taps,
                                const std::vector<int>& targets) {
  LayerLogits<double> ll;
  for (std::size_t t = 0; t < taps.size(); ++t) {
    ll.layers.push_back(static_cast<int>(t + 1));
    ll.logits.push_back(taps[t]);
  }
  for (std::size_t r = 0; r < targets.size(); ++r) {
    ll.row_seq.push_back(0);
    ll.row_pos.push_back(static_cast<int>(r + 1));
    ll.row_target.push_back(targets[r]);
  }
  return ll;
}

MatXd random_logits(int rows, int cols, std::uint64_t seed, double scale = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(-scale, scale);
  MatXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = unif(rng);
  return m;
}

PositionNegatives<double> single_negative(int token) {
  PositionNegatives<double> neg;
  neg.tokens = {token};
  neg.weights = vec({1.0});
  return neg;
}

}  // namespace

// ---- primitives -------------------------------------------------------------

TEST_CASE("stable softmax primitives") {
  VecXd v = vec({2, 1, 0});
  CHECK(logsumexp<double>(v) ==
        doctest::Approx(2.4076059644443801).epsilon(1e-14));
  VecXd p = softmax<double>(v);
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(p(0) > p(1));
  CHECK(p(1) > p(2));
  VecXd lp = log_softmax<double>(v);
  for (int i = 0; i < 3; ++i)
    CHECK(std::exp(lp(i)) == doctest::Approx(p(i)).epsilon(1e-13));

  // Shift invariance and huge-magnitude safety.
  VecXd shifted = v.array() + 1000.0;
  VecXd ps = softmax<double>(shifted);
  CHECK((ps - p).cwiseAbs().maxCoeff() < 1e-13);
  CHECK(std::isfinite(logsumexp<double>(shifted)));
  VecXd huge = vec({1e3, -1e3, 0});
  CHECK(std::isfinite(softmax<double>(huge).sum()));
}

// ---- token cross entropy ------------------------------------------------------

TEST_CASE("cross entropy matches the frozen single-row value") {
  MatXd logits(1, 3);
  logits << 2, 1, 0;
  const std::vector<int> y{0};
  CHECK(ce_loss_rows(logits, std::span<const int>(y)) ==
        doctest::Approx(0.40760596444438013).epsilon(1e-12));
}

TEST_CASE("cross entropy limits and averaging") {
  SUBCASE("uniform logits cost ln(vocab)") {
    MatXd logits = MatXd::Zero(1, 4);
    const std::vector<int> y{2};
    CHECK(ce_loss_rows(logits, std::span<const int>(y)) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("a dominant correct logit drives the loss to zero") {
    MatXd logits(1, 3);
    logits << 50, 0, 0;
    const std::vector<int> y{0};
    CHECK(ce_loss_rows(logits, std::span<const int>(y)) < 1e-20);
  }
  SUBCASE("rows are averaged") {
    MatXd two(2, 3);
    two.row(0) << 2, 1, 0;
    two.row(1) << 0, 0, 0;
    const std::vector<int> y{0, 1};
    const double want = 0.5 * (0.40760596444438013 + std::log(3.0));
    CHECK(ce_loss_rows(two, std::span<const int>(y)) ==
          doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("a scoring row (no target) is rejected") {
    MatXd logits = MatXd::Zero(1, 3);
    const std::vector<int> y{-1};
    CHECK_THROWS_AS(ce_loss_rows(logits, std::span<const int>(y)),
                    NumericError);
  }
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot over rows") {
  MatXd logits = random_logits(3, 5, 11);
  const std::vector<int> y{4, 0, 2};
  MatXd g = ce_grad_rows(logits, std::span<const int>(y));
  for (int r = 0; r < 3; ++r) {
    VecXd sm = softmax<double>(logits.row(r).transpose());
    sm(y[r]) -= 1.0;
    CHECK((g.row(r).transpose() - sm / 3.0).cwiseAbs().maxCoeff() < 1e-14);
  }
  // Gradients over each row sum to zero.
  for (int r = 0; r < 3; ++r)
    CHECK(std::abs(g.row(r).sum()) < 1e-14);
}

// ---- layer ensemble -----------------------------------------------------------

TEST_CASE("mean ensemble selects the k layers below the final one") {
  MatXd t0 = random_logits(2, 4, 1);
  MatXd t1 = random_logits(2, 4, 2);
  MatXd t2 = random_logits(2, 4, 3);
  MatXd fin = random_logits(2, 4, 4);
  LayerLogits<double> ll = make_layers({t0, t1, t2, fin}, {0, 1});
  Hyperparams hp;

  SUBCASE("k=1 passes the last intermediate layer through") {
    hp.k = 1;
    EnsembleOutput<double> ens = ensemble_logits(ll, hp);
    CHECK(ens.tap_set == std::vector<int>{2});
    CHECK((ens.logits - t2).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("k=2 averages the two layers below the final") {
    hp.k = 2;
    EnsembleOutput<double> ens = ensemble_logits(ll, hp);
    CHECK(ens.tap_set == std::vector<int>{1, 2});
    CHECK((ens.logits - 0.5 * (t1 + t2)).cwiseAbs().maxCoeff() < 1e-15);
    // The final layer never joins its own ensemble.
    CHECK((ens.logits - fin).cwiseAbs().maxCoeff() > 1e-10);
  }
  SUBCASE("the widened window adds one layer but keeps the divisor") {
    hp.k = 2;
    hp.include_extra_layer = true;
    EnsembleOutput<double> ens = ensemble_logits(ll, hp);
    CHECK(ens.tap_set == std::vector<int>{0, 1, 2});
    CHECK((ens.logits - (t0 + t1 + t2) / 2.0).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("probabilities are the row-wise softmax of the ensemble") {
    hp.k = 2;
    EnsembleOutput<double> ens = ensemble_logits(ll, hp);
    for (int r = 0; r < 2; ++r) {
      CHECK(ens.probs.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      VecXd want = softmax<double>(ens.logits.row(r).transpose());
      CHECK((ens.probs.row(r).transpose() - want).cwiseAbs().maxCoeff() <
            1e-14);
    }
  }
  SUBCASE("asking for more layers than are tapped fails") {
    hp.k = 4;  // only three intermediate taps exist
    CHECK_THROWS_AS(ensemble_logits(ll, hp), ConfigError);
    hp.k = 2;
    hp.include_extra_layer = true;
    LayerLogits<double> three = make_layers({t0, t1, fin}, {0, 1});
    CHECK_THROWS_AS(ensemble_logits(three, hp), ConfigError);
  }
}

TEST_CASE("confidence-weighted ensembles favor the peaked layer") {
  MatXd peaked(1, 3);
  peaked << 10, 0, 0;
  MatXd flat(1, 3);
  flat << 0, 0.1, -0.1;
  MatXd fin = MatXd::Zero(1, 3);
  LayerLogits<double> ll = make_layers({peaked, flat, fin}, {0});
  Hyperparams hp;
  hp.k = 2;

  hp.ensemble_strategy = EnsembleStrategy::entropy;
  EnsembleOutput<double> ent = ensemble_logits(ll, hp);
  // The low-entropy layer dominates, pulling the combined logit well above
  // the plain mean (which would sit at 5).
  CHECK(ent.logits(0, 0) > 5.0);

  hp.ensemble_strategy = EnsembleStrategy::max_prob;
  EnsembleOutput<double> mx = ensemble_logits(ll, hp);
  CHECK(mx.logits(0, 0) > 5.0);

  hp.ensemble_strategy = EnsembleStrategy::variance;
  EnsembleOutput<double> var = ensemble_logits(ll, hp);
  CHECK(var.logits(0, 0) > 5.0);

  // All weighted variants produce convex row combinations: bounded by the
  // extreme layer values.
  for (const auto& out : {ent, mx, var}) {
    for (int c = 0; c < 3; ++c) {
      const double lo = std::min(peaked(0, c), flat(0, c));
      const double hi = std::max(peaked(0, c), flat(0, c));
      CHECK(out.logits(0, c) >= lo - 1e-12);
      CHECK(out.logits(0, c) <= hi + 1e-12);
    }
  }
}

// ---- hard negatives -----------------------------------------------------------

TEST_CASE("negative extraction matches the worked fixture") {
  VecXd probs = vec({0.2, 0.5, 0.15, 0.15});
  VecXd logits = probs.array().log().matrix();
  Hyperparams hp;
  hp.alpha = 1.0;
  PositionNegatives<double> neg =
      extract_negatives<double>(probs, logits, 0, hp);
  CHECK(neg.tau == doctest::Approx(0.2).epsilon(1e-14));
  REQUIRE(neg.tokens == std::vector<int>{1});
  CHECK(neg.weights(0) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("negative extraction properties") {
  Hyperparams hp;

  SUBCASE("alpha zero admits every other token") {
    VecXd probs = vec({0.1, 0.4, 0.3, 0.2});
    VecXd logits = probs.array().log().matrix();
    hp.alpha = 0.0;
    PositionNegatives<double> neg =
        extract_negatives<double>(probs, logits, 2, hp);
    CHECK(neg.tokens == std::vector<int>{0, 1, 3});
    CHECK(neg.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("a strictly dominant target leaves the set empty") {
    VecXd probs = vec({0.9, 0.05, 0.05});
    VecXd logits = probs.array().log().matrix();
    hp.alpha = 1.0;
    PositionNegatives<double> neg =
        extract_negatives<double>(probs, logits, 0, hp);
    CHECK(neg.tokens.empty());
    CHECK(neg.weights.size() == 0);
  }
  SUBCASE("ties at the threshold are included") {
    VecXd probs = vec({0.25, 0.25, 0.3, 0.2});
    VecXd logits = probs.array().log().matrix();
    hp.alpha = 1.0;
    PositionNegatives<double> neg =
        extract_negatives<double>(probs, logits, 0, hp);
    CHECK(neg.tokens == std::vector<int>{1, 2});
  }
  SUBCASE("the target never joins and weights always normalize") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 200; ++trial) {
      const int vocab = 3 + static_cast<int>(rng() % 20);
      VecXd logits = random_logits(1, vocab, rng()).row(0).transpose();
      VecXd probs = softmax<double>(logits);
      hp.alpha = static_cast<double>(rng() % 100) / 100.0;
      const int target = static_cast<int>(rng() % vocab);
      PositionNegatives<double> neg =
          extract_negatives<double>(probs, logits, target, hp);
      for (int v : neg.tokens) CHECK(v != target);
      if (!neg.tokens.empty()) {
        CHECK(neg.weights.sum() == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(neg.weights.minCoeff() > 0.0);
        for (int v : neg.tokens) CHECK(probs(v) >= neg.tau);
      }
      // Everything excluded (other than the target) is below the threshold.
      std::vector<bool> in(vocab, false);
      for (int v : neg.tokens) in[v] = true;
      for (int v = 0; v < vocab; ++v)
        if (v != target && !in[v]) CHECK(probs(v) < neg.tau);
    }
  }
  SUBCASE("weight source: probabilities vs raw ensemble logits") {
    VecXd logits = vec({0.0, 3.0, 2.9, -5.0});
    VecXd probs = softmax<double>(logits);
    hp.alpha = 0.0;
    const int target = 0;

    hp.negative_weight_source = NegWeightSource::probability;
    PositionNegatives<double> by_prob =
        extract_negatives<double>(probs, logits, target, hp);
    REQUIRE(by_prob.tokens == std::vector<int>{1, 2, 3});
    VecXd want_p = softmax<double>(vec({probs(1), probs(2), probs(3)}));
    CHECK((by_prob.weights - want_p).cwiseAbs().maxCoeff() < 1e-14);

    hp.negative_weight_source = NegWeightSource::logit;
    PositionNegatives<double> by_logit =
        extract_negatives<double>(probs, logits, target, hp);
    VecXd want_l = softmax<double>(vec({3.0, 2.9, -5.0}));
    CHECK((by_logit.weights - want_l).cwiseAbs().maxCoeff() < 1e-14);

    // The two weightings genuinely differ.
    CHECK((by_prob.weights - by_logit.weights).cwiseAbs().maxCoeff() > 0.1);
  }
}

// ---- preference loss ----------------------------------------------------------

TEST_CASE("preference loss matches the frozen fixture") {
  VecXd p = vec({2, 1, 0});
  PositionNegatives<double> neg = single_negative(1);
  const double loss =
      cpo_loss_row<double>(p, 0, neg, 0.1, PenaltyMode::multiplicative);
  CHECK(loss == doctest::Approx(0.43301862796032253).epsilon(1e-12));
  // Penalizing a positive-logit competitor raises the loss above the plain
  // cross entropy.
  CHECK(loss > 0.40760596444438013);
}

TEST_CASE("preference loss reductions and penalty modes") {
  VecXd p = vec({2, 1, 0});
  PositionNegatives<double> neg = single_negative(1);

  SUBCASE("beta zero is token cross entropy") {
    CHECK(cpo_loss_row<double>(p, 0, neg, 0.0, PenaltyMode::multiplicative) ==
          doctest::Approx(0.40760596444438013).epsilon(1e-13));
  }
  SUBCASE("an empty negative set is token cross entropy") {
    PositionNegatives<double> none;
    CHECK(cpo_loss_row<double>(p, 0, none, 0.7, PenaltyMode::multiplicative) ==
          doctest::Approx(0.40760596444438013).epsilon(1e-13));
  }
  SUBCASE("nonnegative logits make the penalized loss at least the plain one") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      VecXd logits =
          (random_logits(1, 6, rng()).row(0).transpose().array() + 3.0)
              .matrix();  // entries in [0, 6]
      VecXd probs = softmax<double>(logits);
      Hyperparams hp;
      hp.alpha = 0.5;
      PositionNegatives<double> n =
          extract_negatives<double>(probs, logits, 0, hp);
      const double plain =
          cpo_loss_row<double>(logits, 0, n, 0.0, PenaltyMode::multiplicative);
      const double pen =
          cpo_loss_row<double>(logits, 0, n, 0.3, PenaltyMode::multiplicative);
      CHECK(pen >= plain - 1e-12);
    }
  }
  SUBCASE("the two penalty modes act differently on a negative logit") {
    VecXd mixed = vec({2, -1, 0});
    // Multiplicative scaling pushes a negative competitor logit further
    // down; the magnitude-shift raises it.
    const double mult = cpo_loss_row<double>(mixed, 0, neg, 0.1,
                                             PenaltyMode::multiplicative);
    const double addi =
        cpo_loss_row<double>(mixed, 0, neg, 0.1, PenaltyMode::additive);
    CHECK(mult == doctest::Approx(0.1658402206845926).epsilon(1e-12));
    CHECK(addi == doctest::Approx(0.174254525024216).epsilon(1e-12));
    CHECK(addi > mult);
  }
}

TEST_CASE("preference gradient agrees with the independent closed form") {
  VecXd p = vec({2, 1, 0});
  PositionNegatives<double> neg = single_negative(1);
  VecXd g =
      cpo_grad_row<double>(p, 0, neg, 0.1, PenaltyMode::multiplicative);
  VecXd ref = cpo_gradient_reference<double>(p, 0, neg, 0.1);
  CHECK((g - ref).cwiseAbs().maxCoeff() < 1e-15);

  CHECK(cpo_reference_max_abs_err(200, 424242) < 1e-12);

  SUBCASE("beta zero reduces the gradient to softmax minus one-hot") {
    VecXd g0 =
        cpo_grad_row<double>(p, 0, neg, 0.0, PenaltyMode::multiplicative);
    VecXd sm = softmax<double>(p);
    sm(0) -= 1.0;
    CHECK((g0 - sm).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("additive-mode gradient matches finite differences") {
    VecXd mixed = vec({2, -1, 0.5});
    for (PenaltyMode mode :
         {PenaltyMode::multiplicative, PenaltyMode::additive}) {
      VecXd grad = cpo_grad_row<double>(mixed, 0, neg, 0.25, mode);
      for (int i = 0; i < 3; ++i) {
        VecXd up = mixed, dn = mixed;
        up(i) += 1e-6;
        dn(i) -= 1e-6;
        const double fd = (cpo_loss_row<double>(up, 0, neg, 0.25, mode) -
                           cpo_loss_row<double>(dn, 0, neg, 0.25, mode)) /
                          2e-6;
        CHECK(grad(i) == doctest::Approx(fd).epsilon(1e-6));
      }
    }
  }
}

// ---- distillation -------------------------------------------------------------

TEST_CASE("distillation matches the frozen fixture and its limits") {
  VecXd student = vec({std::log(0.8), std::log(0.2)});
  VecXd teacher_lp = vec({std::log(0.5), std::log(0.5)});
  CHECK(kl_row<double>(student, teacher_lp) ==
        doctest::Approx(0.19274475702175753).epsilon(1e-12));

  SUBCASE("zero when the distributions coincide") {
    VecXd logits = vec({1.0, -0.3, 0.2});
    VecXd lp = log_softmax<double>(logits);
    CHECK(std::abs(kl_row<double>(logits, lp)) < 1e-14);
    CHECK(kl_grad_row<double>(logits, lp).cwiseAbs().maxCoeff() < 1e-13);
  }
  SUBCASE("always nonnegative") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
      VecXd s = random_logits(1, 7, rng()).row(0).transpose();
      VecXd t = log_softmax<double>(
          random_logits(1, 7, rng()).row(0).transpose().eval());
      CHECK(kl_row<double>(s, t) >= -1e-13);
    }
  }
  SUBCASE("finite at extreme logits") {
    VecXd s = vec({50, -50, 0});
    VecXd t = log_softmax<double>(vec({-50, 50, 0}));
    CHECK(std::isfinite(kl_row<double>(s, t)));
    CHECK(std::isfinite(kl_grad_row<double>(s, t).cwiseAbs().maxCoeff()));
  }
  SUBCASE("gradient matches finite differences with the teacher held fixed") {
    VecXd s = vec({0.3, -1.2, 0.8, 0.0});
    VecXd t = log_softmax<double>(vec({1.0, 0.0, -1.0, 0.5}));
    VecXd grad = kl_grad_row<double>(s, t);
    for (int i = 0; i < 4; ++i) {
      VecXd up = s, dn = s;
      up(i) += 1e-6;
      dn(i) -= 1e-6;
      const double fd =
          (kl_row<double>(up, t) - kl_row<double>(dn, t)) / 2e-6;
      CHECK(grad(i) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

// ---- collaborative reward loss --------------------------------------------------

TEST_CASE("reward loss matches the frozen fixture") {
  VecXd p = vec({1, 0, -1});
  PositionNegatives<double> neg = single_negative(1);
  VecXd rewards = vec({1.0, 0.0, 0.0});
  CHECK(crr_loss_row<double>(p, neg, 0, rewards) ==
        doctest::Approx(0.6765473858143755).epsilon(1e-12));
}

TEST_CASE("reward loss reductions") {
  VecXd p = vec({1, 0, -1});

  SUBCASE("no negatives collapses onto the target cross entropy") {
    PositionNegatives<double> none;
    VecXd rewards = vec({0.37, 0.0, 0.0});  // value irrelevant after softmax
    CHECK(crr_loss_row<double>(p, none, 0, rewards) ==
          doctest::Approx(1.4076059644443804 - 1.0).epsilon(1e-12));
  }
  SUBCASE("uniform rewards spread the soft label uniformly over the pool") {
    PositionNegatives<double> neg = single_negative(1);
    VecXd rewards = vec({0.5, 0.5, 0.0});
    VecXd lsm = log_softmax<double>(p);
    const double want = -0.5 * (lsm(0) + lsm(1));
    CHECK(crr_loss_row<double>(p, neg, 0, rewards) ==
          doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("gradient matches finite differences") {
    PositionNegatives<double> neg;
    neg.tokens = {1, 2};
    neg.weights = vec({0.5, 0.5});
    VecXd rewards = vec({0.6, 0.3, 0.1});
    VecXd grad = crr_grad_row<double>(p, neg, 0, rewards);
    for (int i = 0; i < 3; ++i) {
      VecXd up = p, dn = p;
      up(i) += 1e-6;
      dn(i) -= 1e-6;
      const double fd = (crr_loss_row<double>(up, neg, 0, rewards) -
                         crr_loss_row<double>(dn, neg, 0, rewards)) /
                        2e-6;
      CHECK(grad(i) == doctest::Approx(fd).epsilon(1e-6));
    }
    // The gradient of a soft cross entropy over logits sums to zero.
    CHECK(std::abs(grad.sum()) < 1e-13);
  }
}

// ---- combined objective ---------------------------------------------------------

TEST_CASE("with every extension switched off the combined loss is the plain "
          "cross entropy") {
  Hyperparams hp;
  hp.beta = 0.0;
  hp.lambda = 0.0;
  hp.mu = 0.0;
  hp.k = 2;
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % 5);
    const int vocab = 5 + static_cast<int>(rng() % 12);
    std::vector<MatXd> taps;
    for (int t = 0; t < 4; ++t)
      taps.push_back(random_logits(rows, vocab, rng()));
    std::vector<int> targets;
    for (int r = 0; r < rows; ++r)
      targets.push_back(static_cast<int>(rng() % vocab));
    LayerLogits<double> ll = make_layers(taps, targets);
    const MatXd no_rewards = MatXd::Zero(rows, vocab);
    FrozenSupervision<double> sup = build_supervision(ll, hp, no_rewards);
    LossBreakdown<double> bd;
    LossGrad<double> lg = total_loss_grads(ll, sup, hp, &bd);
    const double sft = sft_loss(ll);
    CHECK(std::abs(lg.value - sft) <= 1e-6);
    CHECK(std::abs(bd.total - bd.sft) <= 1e-12);
    // And the gradient collapses to the cross-entropy gradient.
    MatXd ce = ce_grad_rows(ll.final_logits(), std::span<const int>(targets));
    CHECK((lg.dlogits.back() - ce).cwiseAbs().maxCoeff() < 1e-12);
    for (int t = 0; t + 1 < ll.num_taps(); ++t)
      CHECK(lg.dlogits[t].size() == 0);
  }
}

TEST_CASE("combined loss decomposes into its terms") {
  Hyperparams hp;  // defaults: alpha .8, beta .1, lambda .01, mu .01, k 3
  const int rows = 4, vocab = 9;
  std::vector<MatXd> taps;
  for (int t = 0; t < 5; ++t) taps.push_back(random_logits(rows, vocab, 40 + t));
  std::vector<int> targets{0, 3, 8, 5};
  LayerLogits<double> ll = make_layers(taps, targets);
  MatXd rewards = random_rewards(rows, vocab, 99);
  auto sup = std::make_shared<FrozenSupervision<double>>(
      build_supervision(ll, hp, rewards));

  LossBreakdown<double> bd;
  LossGrad<double> lg = total_loss_grads(ll, *sup, hp, &bd);

  const double cpo = frozen_term_loss<double>(LossTerm::cpo, sup, hp)(ll).value;
  const double cpd = frozen_term_loss<double>(LossTerm::cpd, sup, hp)(ll).value;
  const double crr = frozen_term_loss<double>(LossTerm::crr, sup, hp)(ll).value;
  const double cpt = frozen_term_loss<double>(LossTerm::cpt, sup, hp)(ll).value;

  CHECK(bd.cpo == doctest::Approx(cpo).epsilon(1e-12));
  CHECK(bd.cpd == doctest::Approx(cpd).epsilon(1e-12));
  CHECK(bd.crr == doctest::Approx(crr).epsilon(1e-12));
  CHECK(bd.cpt == doctest::Approx(cpo + hp.lambda * cpd).epsilon(1e-12));
  CHECK(cpt == doctest::Approx(bd.cpt).epsilon(1e-12));
  CHECK(bd.total ==
        doctest::Approx(bd.cpt + hp.mu * bd.crr).epsilon(1e-12));
  CHECK(lg.value == doctest::Approx(bd.total).epsilon(1e-14));

  // Negative bookkeeping matches a direct recount.
  EnsembleOutput<double> ens = ensemble_logits(ll, hp);
  double count = 0, tau = 0;
  for (int r = 0; r < rows; ++r) {
    PositionNegatives<double> neg = extract_negatives<double>(
        ens.probs.row(r).transpose(), ens.logits.row(r).transpose(),
        targets[r], hp);
    count += static_cast<double>(neg.tokens.size());
    tau += neg.tau;
  }
  CHECK(bd.mean_num_negatives == doctest::Approx(count / rows).epsilon(1e-12));
  CHECK(bd.mean_tau == doctest::Approx(tau / rows).epsilon(1e-12));

  // Distillation gradients appear exactly on the ensemble window taps.
  CHECK(lg.dlogits[4].size() > 0);
  CHECK(lg.dlogits[0].size() == 0);  // outside the k=3 window below the final
  for (int t = 1; t <= 3; ++t) CHECK(lg.dlogits[t].size() > 0);
}

TEST_CASE("identical tapped layers silence the distillation term") {
  Hyperparams hp;
  hp.lambda = 1.0;
  hp.mu = 0.05;
  hp.k = 2;
  const int rows = 3, vocab = 6;
  MatXd shared_tap = random_logits(rows, vocab, 7);
  LayerLogits<double> ll =
      make_layers({shared_tap, shared_tap, shared_tap}, {1, 2, 3});
  MatXd rewards = random_rewards(rows, vocab, 8);
  auto sup = std::make_shared<FrozenSupervision<double>>(
      build_supervision(ll, hp, rewards));
  LossBreakdown<double> bd;
  total_loss_grads(ll, *sup, hp, &bd);
  CHECK(std::abs(bd.cpd) < 1e-13);
  CHECK(bd.total == doctest::Approx(bd.cpo + hp.mu * bd.crr).epsilon(1e-12));
}

TEST_CASE("frozen per-term callbacks expose the same loss surface") {
  Hyperparams hp;
  hp.beta = 0.0;
  const int rows = 2, vocab = 7;
  std::vector<MatXd> taps;
  for (int t = 0; t < 4; ++t) taps.push_back(random_logits(rows, vocab, 60 + t));
  LayerLogits<double> ll = make_layers(taps, {2, 4});
  auto sup = std::make_shared<FrozenSupervision<double>>(
      build_supervision(ll, hp, random_rewards(rows, vocab, 3)));
  // With beta = 0 the preference term is the cross entropy.
  const double cpo = frozen_term_loss<double>(LossTerm::cpo, sup, hp)(ll).value;
  const double sft = frozen_term_loss<double>(LossTerm::sft, sup, hp)(ll).value;
  CHECK(cpo == doctest::Approx(sft).epsilon(1e-12));
  CHECK(sft == doctest::Approx(sft_loss(ll)).epsilon(1e-14));
}

TEST_CASE("hyperparameter validation") {
  Hyperparams hp;
  hp.validate(4, 3);  // defaults fit a 4-layer model with 3 tapped layers
  hp.k = 4;
  CHECK_THROWS_AS(hp.validate(4, 3), ConfigError);
  hp.k = 3;
  CHECK_THROWS_AS(hp.validate(4, 2), ConfigError);  // window wider than taps
  hp.k = 2;
  hp.include_extra_layer = true;
  CHECK_THROWS_AS(hp.validate(4, 2), ConfigError);
  hp.include_extra_layer = false;
  hp.alpha = 1.5;
  CHECK_THROWS_AS(hp.validate(4, 3), ConfigError);
  hp.alpha = 0.5;
  hp.beta = -0.1;
  CHECK_THROWS_AS(hp.validate(4, 3), ConfigError);
  hp.beta = 0.1;
  hp.lambda = -1;
  CHECK_THROWS_AS(hp.validate(4, 3), ConfigError);
  hp.lambda = 0;
  hp.mu = -2;
  CHECK_THROWS_AS(hp.validate(4, 3), ConfigError);
}

TEST_CASE("name parsers reject unknown values") {
  CHECK(ensemble_strategy_from_string("mean") == EnsembleStrategy::mean);
  CHECK(ensemble_strategy_from_string("entropy") == EnsembleStrategy::entropy);
  CHECK(ensemble_strategy_from_string("variance") ==
        EnsembleStrategy::variance);
  CHECK(ensemble_strategy_from_string("max_prob") ==
        EnsembleStrategy::max_prob);
  CHECK_THROWS_AS(ensemble_strategy_from_string("median"), ConfigError);
  CHECK(penalty_mode_from_string("additive") == PenaltyMode::additive);
  CHECK_THROWS_AS(penalty_mode_from_string("scaled"), ConfigError);
  CHECK(neg_weight_source_from_string("logit") == NegWeightSource::logit);
  CHECK_THROWS_AS(neg_weight_source_from_string("prob"), ConfigError);
}
