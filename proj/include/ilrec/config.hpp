#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ilrec/cf_scorer.hpp"
#include "ilrec/corpus.hpp"
#include "ilrec/losses.hpp"
#include "ilrec/model.hpp"
#include "ilrec/synthetic.hpp"
#include "ilrec/train_eval.hpp"

namespace ilrec {

// [corpus] section: raw data source, sequence handling, identifier scheme.
struct CorpusConfig {
  std::string input;            // raw interactions file (unless synthetic)
  std::string format = "jsonl";  // jsonl | tsv
  bool synthetic = false;        // generate seeded clustered interactions
  SyntheticConfig syn;
  std::string data_dir;  // prepared dataset directory (train/eval commands)
  int max_len = 20;
  int min_interactions = 5;  // n-core filter threshold
  std::string scheme = "random_unique";
  std::string identifier_file;  // external_file scheme source
  std::uint64_t identifier_seed = 7;
  int m = 2;
  int b = 32;
};

// [eval] section.
struct EvalConfig {
  std::vector<int> ks = {5, 10};
  std::string mode = "full";   // full | candidates
  std::string split = "test";  // valid | test
  int num_candidates = 20;     // candidate list size written by prepare
  std::string checkpoint;      // model file for cmd_eval
};

// The whole run configuration: INI-style sections, every key checked.
struct RunConfig {
  CorpusConfig corpus;
  CfConfig cf;
  ModelConfig model;  // vocab_size always derived as corpus.b + 2
  Hyperparams hyper;
  TrainConfig train;
  EvalConfig eval;
  std::string out_dir = "out";

  // Applies one "section.key = value" assignment; unknown names throw
  // ConfigError with the offending key.
  void set(const std::string& section, const std::string& key,
           const std::string& value);

  // Derived fields + cross-field checks; call before any side effect.
  void finalize();
  void validate() const;
};

// Parses INI text (sections, key=value, '#'/';' comments) into cfg.
void apply_ini(std::istream& in, RunConfig& cfg, const std::string& source);

// Loads the optional config file, then applies --set overrides
// ("section.key=value" each), then finalize().
RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides);

}  // namespace ilrec
