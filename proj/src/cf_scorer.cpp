#include "ilrec/cf_scorer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "ilrec/checkpoint.hpp"
#include "ilrec/losses.hpp"
#include "ilrec/optimizer.hpp"

namespace ilrec {

CfVariant cf_variant_from_string(const std::string& s) {
  if (s == "frequency") return CfVariant::frequency;
  if (s == "attention") return CfVariant::attention;
  throw ConfigError("unknown cf variant: " + s);
}

namespace {

constexpr char kScorerMagic[] = "ILRECCFS";
constexpr std::uint32_t kScorerVersion = 1;

class FrequencyScorer final : public CfScorer {
 public:
  explicit FrequencyScorer(VecXd probs) : probs_(std::move(probs)) {}

  VecXd score_items(std::span<const int>) const override { return probs_; }
  bool history_independent() const override { return true; }
  int num_items() const override { return static_cast<int>(probs_.size()); }

  void save(std::ostream& os) const override {
    os.write(kScorerMagic, 8);
    ckpt::write_u32(os, kScorerVersion);
    ckpt::write_string(os, "{\"variant\":\"frequency\"}");
    ckpt::write_u64(os, static_cast<std::uint64_t>(probs_.size()));
    ckpt::write_doubles(os, probs_.data(),
                        static_cast<std::size_t>(probs_.size()));
  }

 private:
  VecXd probs_;
};

// Item-level token stream for the attention variant: token 0 marks the
// sequence start, item i maps to token i+1.
SequenceInput attention_sequence(std::span<const int> history, int target) {
  SequenceInput seq;
  const int n = static_cast<int>(history.size());
  seq.tokens.resize(n + 1);
  seq.tokens[0] = 0;
  for (int i = 0; i < n; ++i) seq.tokens[i + 1] = history[i] + 1;
  seq.gather.push_back(n + 1);  // logits after the last item
  seq.targets.push_back(target >= 0 ? target + 1 : -1);
  return seq;
}

class AttentionScorer final : public CfScorer {
 public:
  AttentionScorer(ModelParams<double> params, int num_items)
      : params_(std::move(params)), num_items_(num_items) {}

  VecXd score_items(std::span<const int> history) const override {
    Batch batch;
    batch.seqs.push_back(attention_sequence(history, -1));
    LayerLogits<double> ll = forward_all_layers(params_, batch);
    // Softmax restricted to item tokens; the start token never scores.
    VecXd item_logits = ll.final_logits().row(0).segment(1, num_items_);
    return softmax<double>(item_logits);
  }

  bool history_independent() const override { return false; }
  int num_items() const override { return num_items_; }

  void save(std::ostream& os) const override {
    os.write(kScorerMagic, 8);
    ckpt::write_u32(os, kScorerVersion);
    ckpt::write_string(os, std::string("{\"variant\":\"attention\",\"model\":") +
                               model_config_to_json(params_.cfg) +
                               ",\"num_items\":" + std::to_string(num_items_) +
                               "}");
    ckpt::write_params(os, params_);
  }

  const ModelParams<double>& params() const { return params_; }

 private:
  ModelParams<double> params_;
  int num_items_;
};

VecXd training_visible_counts(const Dataset& ds) {
  // Interactions strictly before each user's validation target: the longest
  // train example per user covers them as history + target (up to max_len
  // truncation of the earliest items).
  std::unordered_map<int, const Example*> last;
  for (const auto& e : ds.train) {
    auto [it, fresh] = last.try_emplace(e.user, &e);
    if (!fresh && e.history.size() > it->second->history.size())
      it->second = &e;
  }
  VecXd counts = VecXd::Zero(ds.catalog.size());
  for (const auto& [user, e] : last) {
    (void)user;
    for (int i : e->history) counts(i) += 1.0;
    counts(e->target) += 1.0;
  }
  return counts;
}

std::unique_ptr<CfScorer> train_attention(const Dataset& ds,
                                          const CfConfig& cc) {
  int max_hist = 1;
  for (const auto& e : ds.train)
    max_hist = std::max(max_hist, static_cast<int>(e.history.size()));

  ModelConfig mc;
  mc.vocab_size = ds.catalog.size() + 1;
  mc.embed_dim = cc.embedding_dim;
  mc.num_layers = cc.num_blocks;
  mc.num_heads = cc.num_heads;
  mc.ff_dim = 2 * cc.embedding_dim;
  mc.max_positions = max_hist + 2;
  mc.tapped_layer_count = 0;  // only the final layer is read
  mc.seed = cc.seed;

  ModelParams<double> params = init_model<double>(mc);
  AdamW<double> opt(param_count(params), cc.learning_rate);
  Rng shuffle_rng(cc.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<int> order(ds.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  constexpr int kBatch = 32;

  for (int epoch = 0; epoch < cc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t at = 0; at < order.size(); at += kBatch) {
      Batch batch;
      const std::size_t end = std::min(order.size(), at + kBatch);
      for (std::size_t i = at; i < end; ++i) {
        const Example& e = ds.train[order[i]];
        batch.seqs.push_back(attention_sequence(e.history, e.target));
      }
      auto res = backward<double>(params, batch, [](const auto& ll) {
        return sft_loss_grads<double>(ll);
      });
      if (!std::isfinite(res.loss))
        throw NumericError("cf training diverged at epoch " +
                           std::to_string(epoch + 1));
      opt.step(params, res.grads);
    }
  }
  return std::make_unique<AttentionScorer>(std::move(params),
                                           ds.catalog.size());
}

}  // namespace

std::unique_ptr<CfScorer> train_cf(const Dataset& dataset,
                                   const CfConfig& config) {
  config.validate();
  if (dataset.catalog.size() == 0) throw ConfigError("cf: empty catalog");
  if (dataset.train.empty()) throw ConfigError("cf: empty train split");

  if (config.variant == CfVariant::frequency) {
    VecXd counts = training_visible_counts(dataset);
    VecXd smoothed = counts.array() + config.epsilon;
    const double total = smoothed.sum();
    if (!(total > 0.0))
      throw ConfigError("cf: zero total count and zero epsilon");
    return std::make_unique<FrequencyScorer>(smoothed / total);
  }
  return train_attention(dataset, config);
}

void save_cf_scorer(const std::string& path, const CfScorer& scorer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write scorer checkpoint: " + path);
  scorer.save(os);
  if (!os) throw ConfigError("failed writing scorer checkpoint: " + path);
}

std::unique_ptr<CfScorer> load_cf_scorer(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open scorer checkpoint: " + path);
  char magic[8] = {};
  if (!is.read(magic, 8) || std::string(magic, 8) != kScorerMagic)
    throw ConfigError(path + ": not a scorer checkpoint (bad magic)");
  const std::uint32_t version = ckpt::read_u32(is, path);
  if (version != kScorerVersion)
    throw ConfigError(path + ": unsupported scorer version " +
                      std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(ckpt::read_string(is, path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": corrupt scorer header: " + e.what());
  }
  const std::string variant = header.value("variant", "");
  if (variant == "frequency") {
    const std::uint64_t n = ckpt::read_u64(is, path);
    if (n == 0 || n > (1ull << 32)) throw ConfigError(path + ": corrupt size");
    VecXd probs(static_cast<Eigen::Index>(n));
    ckpt::read_doubles(is, probs.data(), n, path);
    return std::make_unique<FrequencyScorer>(std::move(probs));
  }
  if (variant == "attention") {
    if (!header.contains("model") || !header.contains("num_items"))
      throw ConfigError(path + ": corrupt scorer header");
    const ModelConfig cfg = model_config_from_json(header["model"].dump());
    const int num_items = header["num_items"].get<int>();
    ModelParams<double> params = init_model<double>(cfg);
    ckpt::read_params(is, params, path);
    return std::make_unique<AttentionScorer>(std::move(params), num_items);
  }
  throw ConfigError(path + ": unknown scorer variant");
}

}  // namespace ilrec
