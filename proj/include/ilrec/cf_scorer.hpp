#pragma once

#include <iosfwd>
#include <memory>
#include <span>
#include <string>

#include "ilrec/corpus.hpp"
#include "ilrec/model.hpp"

namespace ilrec {

enum class CfVariant { frequency, attention };

CfVariant cf_variant_from_string(const std::string& s);

struct CfConfig {
  CfVariant variant = CfVariant::frequency;
  double epsilon = 1.0;  // frequency smoothing
  // attention variant
  int embedding_dim = 32;
  int num_heads = 2;
  int num_blocks = 2;
  double learning_rate = 1e-3;
  int epochs = 3;
  std::uint64_t seed = 11;

  void validate() const {
    if (epsilon < 0.0) throw ConfigError("cf.epsilon must be >= 0");
    if (embedding_dim < 1 || num_heads < 1 || num_blocks < 2)
      throw ConfigError("cf dims must be positive (num_blocks >= 2)");
    if (embedding_dim % num_heads != 0)
      throw ConfigError("cf.embedding_dim must be divisible by cf.num_heads");
    if (learning_rate <= 0.0) throw ConfigError("cf.learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("cf.epochs must be >= 1");
  }
};

// Produces the per-item distribution R used by the collaborative reward
// term: a probability vector over the full catalog, conditioned on the
// user's history (the frequency variant ignores the history).
class CfScorer {
 public:
  virtual ~CfScorer() = default;
  virtual VecXd score_items(std::span<const int> history) const = 0;
  virtual bool history_independent() const = 0;
  virtual int num_items() const = 0;
  virtual void save(std::ostream& os) const = 0;
};

// frequency: add-epsilon-smoothed popularity over the training-visible
// interactions. attention: causal self-attention next-item model over the
// item vocabulary, trained with cross entropy; R = softmax over item logits
// at the last position. Deterministic given the seed.
std::unique_ptr<CfScorer> train_cf(const Dataset& dataset,
                                   const CfConfig& config);

std::unique_ptr<CfScorer> load_cf_scorer(const std::string& path);
void save_cf_scorer(const std::string& path, const CfScorer& scorer);

}  // namespace ilrec
