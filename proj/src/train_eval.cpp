#include "ilrec/train_eval.hpp"

#include <algorithm>
#include <cmath>

#include "ilrec/optimizer.hpp"

namespace ilrec {

double Metrics::hit_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return hit[i];
  throw ConfigError("metrics: K=" + std::to_string(k) + " not evaluated");
}

double Metrics::ndcg_at(int k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return ndcg[i];
  throw ConfigError("metrics: K=" + std::to_string(k) + " not evaluated");
}

Batch make_batch(std::span<const TokenizedExample> examples) {
  Batch batch;
  for (const auto& ex : examples) {
    SequenceInput seq;
    seq.tokens = ex.tokens;
    for (int j = 0; j < ex.m; ++j) {
      seq.gather.push_back(ex.response_start + j);
      seq.targets.push_back(ex.tokens[ex.response_start + j]);
    }
    batch.seqs.push_back(std::move(seq));
  }
  return batch;
}

namespace {

// Lazily caches the dense reward row for each (example, response slot); the
// scores R come from the scorer once per example (or once globally for
// history-independent scorers).
class RewardProvider {
 public:
  RewardProvider(const Dataset& ds, const ItemIdentifierMap& map,
                 const IdentifierTrie& trie, const CfScorer& scorer,
                 int vocab_size, bool cache)
      : ds_(ds), map_(map), trie_(trie), scorer_(scorer),
        vocab_(vocab_size), cache_(cache) {
    if (scorer_.history_independent()) {
      global_scores_ = scorer_.score_items({});
      by_target_.assign(static_cast<std::size_t>(map.num_items()) * map.m, {});
    } else if (cache_) {
      by_example_.assign(ds.train.size(), {});
    }
  }

  // Reward row over the vocabulary for response slot `slot` of train example
  // `index` (prefix = the target's first `slot` digits).
  const VecXd& row(int index, int slot) {
    const Example& ex = ds_.train[index];
    if (scorer_.history_independent()) {
      auto& cell = by_target_[static_cast<std::size_t>(ex.target) * map_.m +
                              slot];
      if (!cell) cell = compute(ex.target, slot, global_scores_);
      return *cell;
    }
    if (cache_) {
      auto& cell = by_example_[index];
      if (!cell) cell = scorer_.score_items(ex.history);
      scratch_ = compute(ex.target, slot, *cell);
      return scratch_;
    }
    scratch_ = compute(ex.target, slot, scorer_.score_items(ex.history));
    return scratch_;
  }

 private:
  VecXd compute(int target, int slot, const VecXd& scores) const {
    std::vector<int> prefix(static_cast<std::size_t>(slot));
    for (int j = 0; j < slot; ++j) prefix[j] = map_.digit(target, j);
    return token_rewards<double>(trie_, prefix, scores).to_vocab(vocab_);
  }

  const Dataset& ds_;
  const ItemIdentifierMap& map_;
  const IdentifierTrie& trie_;
  const CfScorer& scorer_;
  int vocab_;
  bool cache_;
  VecXd global_scores_;
  std::vector<std::optional<VecXd>> by_target_;   // (target * m + slot)
  std::vector<std::optional<VecXd>> by_example_;  // R per train example
  VecXd scratch_;
};

}  // namespace

TrainResult train(const Dataset& ds, const ItemIdentifierMap& map,
                  const IdentifierTrie& trie, const ModelConfig& mcfg,
                  const Hyperparams& hp, const TrainConfig& tc,
                  const CfScorer* scorer) {
  mcfg.validate();
  tc.validate();
  if (ds.train.empty()) throw ConfigError("train: empty train split");
  const bool ilrec_mode = tc.mode == TrainMode::ilrec;
  if (ilrec_mode) {
    hp.validate(mcfg.num_layers, mcfg.tapped_layer_count);
    if (hp.mu > 0.0 && scorer == nullptr)
      throw ConfigError("train: mu > 0 requires a CF scorer");
  }

  // Tokenize once; token streams are fixed across epochs.
  std::vector<TokenizedExample> encoded;
  encoded.reserve(ds.train.size());
  for (const auto& e : ds.train)
    encoded.push_back(encode_example(e.history, e.target, map));

  TrainResult result;
  result.params = init_model<double>(mcfg);
  ModelParams<double>& params = result.params;
  TrainLogs& logs = result.logs;
  logs.tapped_layers = mcfg.tapped_layers();

  AdamW<double> opt(param_count(params), tc.learning_rate, tc.weight_decay);
  Rng shuffle_rng(tc.seed);
  std::optional<RewardProvider> rewards;
  if (ilrec_mode && hp.mu > 0.0)
    rewards.emplace(ds, map, trie, *scorer, mcfg.vocab_size,
                    tc.precompute_cf);

  std::vector<int> order(encoded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const std::vector<int> eval_ks = {5, 10};
  std::optional<ModelParams<double>> best_params;
  double best_hit10 = -1.0;

  const std::uint64_t forwards_before = params.trunk_forwards;
  std::uint64_t eval_forwards = 0;  // subtract non-training forwards

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown<double> epoch_bd;
    VecXd layer_ce_sum = VecXd::Zero(mcfg.num_taps());
    long total_rows = 0;

    for (std::size_t at = 0; at < order.size();
         at += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t end =
          std::min(order.size(), at + static_cast<std::size_t>(tc.batch_size));
      std::vector<TokenizedExample> chunk;
      std::vector<int> chunk_examples;
      for (std::size_t i = at; i < end; ++i) {
        chunk.push_back(encoded[order[i]]);
        chunk_examples.push_back(order[i]);
      }
      Batch batch = make_batch(chunk);
      const int rows = batch.total_rows();

      LossBreakdown<double> bd;
      LossFn<double> loss_fn;
      if (!ilrec_mode) {
        loss_fn = [&bd](const LayerLogits<double>& ll) {
          return sft_loss_grads<double>(ll, &bd);
        };
      } else {
        loss_fn = [&](const LayerLogits<double>& ll) {
          MatXd reward_rows;
          if (rewards) {
            reward_rows.resize(ll.rows(), mcfg.vocab_size);
            for (int r = 0; r < ll.rows(); ++r) {
              const int ex = chunk_examples[ll.row_seq[r]];
              const int slot = ll.row_pos[r] -
                               encoded[ex].response_start;
              reward_rows.row(r) = rewards->row(ex, slot).transpose();
            }
          }
          FrozenSupervision<double> sup = build_supervision(ll, hp, reward_rows);
          return total_loss_grads(ll, sup, hp, &bd);
        };
      }

      BackwardResult<double> res = backward(params, batch, loss_fn);
      if (!std::isfinite(res.loss))
        throw NumericError("train: non-finite loss at step " +
                           std::to_string(logs.steps + 1));
      clip_grad_norm(res.grads, tc.grad_clip);
      opt.step(params, res.grads);
      ++logs.steps;

      const double w = static_cast<double>(rows);
      epoch_bd.sft += bd.sft * w;
      epoch_bd.cpo += bd.cpo * w;
      epoch_bd.cpd += bd.cpd * w;
      epoch_bd.crr += bd.crr * w;
      epoch_bd.cpt += bd.cpt * w;
      epoch_bd.total += bd.total * w;
      epoch_bd.mean_num_negatives += bd.mean_num_negatives * w;
      epoch_bd.mean_tau += bd.mean_tau * w;
      std::span<const int> targets(res.logits.row_target);
      for (int t = 0; t < mcfg.num_taps(); ++t)
        layer_ce_sum(t) += ce_loss_rows(res.logits.logits[t], targets) * w;
      total_rows += rows;
    }

    const double inv = 1.0 / static_cast<double>(total_rows);
    epoch_bd.sft *= inv;
    epoch_bd.cpo *= inv;
    epoch_bd.cpd *= inv;
    epoch_bd.crr *= inv;
    epoch_bd.cpt *= inv;
    epoch_bd.total *= inv;
    epoch_bd.mean_num_negatives *= inv;
    epoch_bd.mean_tau *= inv;
    logs.epoch_losses.push_back(epoch_bd);
    logs.epoch_layer_ce.push_back(layer_ce_sum * inv);

    if (tc.eval_every > 0 && (epoch % tc.eval_every == 0 ||
                              epoch == tc.epochs)) {
      const std::uint64_t before = params.trunk_forwards;
      Metrics m = evaluate(params, ds.catalog, ds.valid, map, trie, eval_ks);
      eval_forwards += params.trunk_forwards - before;
      logs.valid_evals.emplace_back(epoch, m);
      if (m.hit_at(10) > best_hit10) {
        best_hit10 = m.hit_at(10);
        best_params = params;
        logs.best_epoch = epoch;
      }
    } else {
      logs.best_epoch = epoch;
    }
  }

  logs.trunk_forwards_training =
      params.trunk_forwards - forwards_before - eval_forwards;
  if (best_params) {
    const std::uint64_t counter = params.trunk_forwards;
    result.params = std::move(*best_params);
    result.params.trunk_forwards = counter;
  }
  return result;
}

VecXd score_all_items(const ModelParams<double>& params,
                      std::span<const int> history,
                      const ItemIdentifierMap& map,
                      const IdentifierTrie& trie) {
  const int m = map.m;
  const int n = map.num_items();
  std::vector<int> prefix_tokens;
  prefix_tokens.push_back(kBosToken);
  for (int item : history) {
    for (int j = 0; j < m; ++j)
      prefix_tokens.push_back(digit_to_token(map.digit(item, j)));
    prefix_tokens.push_back(kSepToken);
  }

  // One sequence per trie node of depth < m: its final-layer distribution
  // scores the next digit for every item passing through that node.
  struct Ref {
    int node;
    std::vector<int> path;
  };
  std::vector<Ref> refs;
  refs.push_back({trie.root(), {}});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (static_cast<int>(refs[i].path.size()) + 1 >= m) continue;
    for (const auto& [digit, kid] : trie.children(refs[i].node)) {
      std::vector<int> path = refs[i].path;
      path.push_back(digit);
      refs.push_back({kid, std::move(path)});
    }
  }

  Batch batch;
  for (const auto& ref : refs) {
    SequenceInput seq;
    seq.tokens.resize(prefix_tokens.size() + ref.path.size());
    for (std::size_t t = 0; t < prefix_tokens.size(); ++t)
      seq.tokens[t] = prefix_tokens[t];
    for (std::size_t j = 0; j < ref.path.size(); ++j)
      seq.tokens[prefix_tokens.size() + j] = digit_to_token(ref.path[j]);
    seq.gather.push_back(static_cast<int>(seq.tokens.size()));
    seq.targets.push_back(-1);
    batch.seqs.push_back(std::move(seq));
  }

  LayerLogits<double> ll = forward_all_layers(params, batch);
  std::vector<int> node_row(trie.num_nodes(), -1);
  for (std::size_t i = 0; i < refs.size(); ++i)
    node_row[refs[i].node] = static_cast<int>(i);
  MatXd lsm(refs.size(), params.cfg.vocab_size);
  for (std::size_t i = 0; i < refs.size(); ++i)
    lsm.row(i) = log_softmax<double>(
                     ll.final_logits().row(i).transpose()).transpose();

  VecXd scores(n);
  for (int item = 0; item < n; ++item) {
    double s = 0.0;
    int node = trie.root();
    for (int j = 0; j < m; ++j) {
      const int digit = map.digit(item, j);
      s += lsm(node_row[node], digit_to_token(digit));
      if (j + 1 < m) node = trie.child(node, digit);
    }
    scores(item) = s;
  }
  return scores;
}

VecXd score_all_items_bruteforce(const ModelParams<double>& params,
                                 std::span<const int> history,
                                 const ItemIdentifierMap& map) {
  const int n = map.num_items();
  VecXd scores(n);
  for (int item = 0; item < n; ++item) {
    TokenizedExample ex = encode_example(history, item, map);
    Batch batch;
    batch.seqs.push_back(SequenceInput{});
    SequenceInput& seq = batch.seqs.back();
    seq.tokens = ex.tokens;
    for (int j = 0; j < map.m; ++j) {
      seq.gather.push_back(ex.response_start + j);
      seq.targets.push_back(-1);
    }
    LayerLogits<double> ll = forward_all_layers(params, batch);
    double s = 0.0;
    for (int j = 0; j < map.m; ++j) {
      VecXd lsm = log_softmax<double>(ll.final_logits().row(j).transpose());
      s += lsm(digit_to_token(map.digit(item, j)));
    }
    scores(item) = s;
  }
  return scores;
}

namespace {

bool ranks_before(const VecXd& scores, const Catalog& catalog, int a, int b) {
  if (scores(a) != scores(b)) return scores(a) > scores(b);
  return catalog.ids[a] < catalog.ids[b];
}

}  // namespace

std::vector<std::pair<int, double>> rank_items(
    const ModelParams<double>& params, std::span<const int> history,
    const ItemIdentifierMap& map, const IdentifierTrie& trie,
    const Catalog& catalog) {
  VecXd scores = score_all_items(params, history, map, trie);
  std::vector<int> idx(map.num_items());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return ranks_before(scores, catalog, a, b);
  });
  std::vector<std::pair<int, double>> out;
  out.reserve(idx.size());
  for (int i : idx) out.emplace_back(i, scores(i));
  return out;
}

int rank_of_target(const VecXd& scores, int target,
                   std::span<const int> eligible, const Catalog& catalog) {
  int rank = 1;
  if (eligible.empty()) {
    for (int i = 0; i < static_cast<int>(scores.size()); ++i)
      if (i != target && ranks_before(scores, catalog, i, target)) ++rank;
  } else {
    for (int i : eligible)
      if (i != target && ranks_before(scores, catalog, i, target)) ++rank;
  }
  return rank;
}

Metrics evaluate(const ModelParams<double>& params, const Catalog& catalog,
                 std::span<const Example> split, const ItemIdentifierMap& map,
                 const IdentifierTrie& trie, std::span<const int> ks,
                 const CandidateLists* candidates,
                 const std::vector<std::string>* users) {
  if (split.empty()) throw ConfigError("evaluate: empty split");
  Metrics m;
  m.ks.assign(ks.begin(), ks.end());
  m.hit.assign(ks.size(), 0.0);
  m.ndcg.assign(ks.size(), 0.0);

  for (const Example& e : split) {
    std::span<const int> eligible;
    if (candidates) {
      auto it = candidates->by_user.find(e.user);
      const std::string name =
          users && e.user < static_cast<int>(users->size())
              ? (*users)[e.user]
              : std::to_string(e.user);
      if (it == candidates->by_user.end())
        throw ConfigError("evaluate: no candidate list for user " + name);
      eligible = it->second;
      if (std::find(eligible.begin(), eligible.end(), e.target) ==
          eligible.end())
        throw ConfigError("evaluate: target missing from candidate list of user " +
                          name);
    }
    VecXd scores = score_all_items(params, e.history, map, trie);
    const int rank = rank_of_target(scores, e.target, eligible, catalog);
    for (std::size_t i = 0; i < m.ks.size(); ++i) {
      if (rank <= m.ks[i]) {
        m.hit[i] += 1.0;
        m.ndcg[i] += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
      }
    }
    ++m.examples;
  }
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    m.hit[i] /= m.examples;
    m.ndcg[i] /= m.examples;
  }
  return m;
}

VecXd per_layer_losses(const ModelParams<double>& params,
                       std::span<const Example> split,
                       const ItemIdentifierMap& map, int batch_size) {
  if (split.empty()) throw ConfigError("per_layer_losses: empty split");
  const int taps = params.cfg.num_taps();
  VecXd sum = VecXd::Zero(taps);
  long rows = 0;
  for (std::size_t at = 0; at < split.size();
       at += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(split.size(), at + static_cast<std::size_t>(batch_size));
    std::vector<TokenizedExample> chunk;
    for (std::size_t i = at; i < end; ++i)
      chunk.push_back(encode_example(split[i].history, split[i].target, map));
    Batch batch = make_batch(chunk);
    LayerLogits<double> ll = forward_all_layers(params, batch);
    std::span<const int> targets(ll.row_target);
    const double w = static_cast<double>(batch.total_rows());
    for (int t = 0; t < taps; ++t)
      sum(t) += ce_loss_rows(ll.logits[t], targets) * w;
    rows += batch.total_rows();
  }
  return sum / static_cast<double>(rows);
}

}  // namespace ilrec
