#pragma once

#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilrec/cf_scorer.hpp"
#include "ilrec/corpus.hpp"
#include "ilrec/losses.hpp"
#include "ilrec/model.hpp"
#include "ilrec/trie.hpp"

namespace ilrec {

enum class TrainMode { sft, ilrec };

inline TrainMode train_mode_from_string(const std::string& s) {
  if (s == "sft") return TrainMode::sft;
  if (s == "ilrec") return TrainMode::ilrec;
  throw ConfigError("unknown train mode: " + s);
}

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::ilrec;
  bool precompute_cf = true;  // cache R per example per epoch
  int eval_every = 0;         // validation cadence in epochs; 0 = off

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (learning_rate <= 0.0)
      throw ConfigError("train.learning_rate must be > 0");
    if (weight_decay < 0.0)
      throw ConfigError("train.weight_decay must be >= 0");
    if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  }
};

struct Metrics {
  std::vector<int> ks;
  std::vector<double> hit;   // aligned with ks
  std::vector<double> ndcg;  // aligned with ks
  int examples = 0;

  double hit_at(int k) const;
  double ndcg_at(int k) const;
};

struct TrainLogs {
  std::vector<LossBreakdown<double>> epoch_losses;  // per epoch, train split
  std::vector<VecXd> epoch_layer_ce;  // per epoch: mean CE per tapped layer
  std::vector<int> tapped_layers;     // 1-based layer index per tap
  std::vector<std::pair<int, Metrics>> valid_evals;  // (epoch, metrics)
  std::uint64_t steps = 0;
  std::uint64_t trunk_forwards_training = 0;
  int best_epoch = 0;  // epoch of the kept parameters (last if no evals)
};

struct TrainResult {
  ModelParams<double> params;
  TrainLogs logs;
};

// Per-user candidate item lists for candidate-ranking evaluation.
struct CandidateLists {
  std::unordered_map<int, std::vector<int>> by_user;
};

// Full training loop. Per step: one trunk forward yields every tapped
// layer's logits; in ilrec mode supervision (ensemble negatives, teacher,
// trie rewards) is rebuilt from them before the combined loss and manual
// backward; parameters advance by AdamW with optional gradient clipping.
// The scorer is required only when mode=ilrec and hp.mu > 0. With
// eval_every > 0 the returned parameters are the best-validation-Hit@10
// snapshot, otherwise the final ones.
TrainResult train(const Dataset& ds, const ItemIdentifierMap& map,
                  const IdentifierTrie& trie, const ModelConfig& mcfg,
                  const Hyperparams& hp, const TrainConfig& tc,
                  const CfScorer* scorer);

// Exact full-catalog scores: score(item) = sum over identifier slots of the
// final layer's log softmax of the item's next digit, teacher-forced on
// history + identifier. Shares the trunk across items via the trie: one
// sequence per internal trie node instead of one per item.
VecXd score_all_items(const ModelParams<double>& params,
                      std::span<const int> history,
                      const ItemIdentifierMap& map,
                      const IdentifierTrie& trie);

// Independent per-item scoring oracle (one forward per item); used to verify
// score_all_items.
VecXd score_all_items_bruteforce(const ModelParams<double>& params,
                                 std::span<const int> history,
                                 const ItemIdentifierMap& map);

// Items sorted by descending score, ties broken by ascending item id string.
std::vector<std::pair<int, double>> rank_items(
    const ModelParams<double>& params, std::span<const int> history,
    const ItemIdentifierMap& map, const IdentifierTrie& trie,
    const Catalog& catalog);

// Rank of the target under the score/tie rules, restricted to `eligible`
// (empty = full catalog).
int rank_of_target(const VecXd& scores, int target,
                   std::span<const int> eligible, const Catalog& catalog);

// Full-ranking (or candidate-ranking, when candidates given) evaluation.
Metrics evaluate(const ModelParams<double>& params, const Catalog& catalog,
                 std::span<const Example> split, const ItemIdentifierMap& map,
                 const IdentifierTrie& trie, std::span<const int> ks,
                 const CandidateLists* candidates = nullptr,
                 const std::vector<std::string>* users = nullptr);

// Mean next-token cross entropy of every tapped layer over a split
// (the last entry is the final layer).
VecXd per_layer_losses(const ModelParams<double>& params,
                       std::span<const Example> split,
                       const ItemIdentifierMap& map, int batch_size = 64);

// Training batch assembly: gather rows at the m response positions.
Batch make_batch(std::span<const TokenizedExample> examples);

}  // namespace ilrec
