#pragma once

#include <string>
#include <vector>

#include "ilrec/corpus.hpp"
#include "ilrec/train_eval.hpp"
#include "ilrec/trie.hpp"

namespace ilrec {

// File layout of a prepared dataset directory.
struct PreparedPaths {
  std::string dataset_json;      // metadata + catalog + user list
  std::string splits_jsonl;      // one example per line
  std::string identifiers_tsv;   // item \t space-separated digits
  std::string stats_txt;         // corpus summary
  std::string candidates_valid;  // candidate lists per split
  std::string candidates_test;

  static PreparedPaths in(const std::string& dir);
};

struct DatasetStats {
  int users = 0;
  int items = 0;
  long interactions = 0;
  double sparsity = 0.0;  // 1 - interactions/(users*items), as a fraction
  double avg_len = 0.0;

  std::string to_text() const;
};

DatasetStats dataset_stats(const InteractionLog& log);

// Prepared-dataset serialization. write_prepared stores the split examples,
// identifier table, and metadata; load_prepared restores the full working
// set (identifier map re-validated, trie rebuilt).
void write_prepared(const std::string& dir, const Dataset& ds,
                    const ItemIdentifierMap& map, const DatasetStats& stats,
                    int max_len);

struct LoadedData {
  Dataset ds;
  ItemIdentifierMap map;
  IdentifierTrie trie;
  int max_len = 0;
};

LoadedData load_prepared(const std::string& dir);

// Candidate lists: {"user": id, "candidates": [item ids], "target": id} per
// line. Generation samples num_candidates-1 distinct non-target items per
// example (seeded) and always includes the target.
CandidateLists make_candidates(const Dataset& ds,
                               std::span<const Example> split,
                               int num_candidates, std::uint64_t seed);
void write_candidates(const std::string& path, const CandidateLists& lists,
                      const Dataset& ds, std::span<const Example> split);
CandidateLists read_candidates(const std::string& path, const Dataset& ds);

// Training reports. metrics.csv: train rows carry the loss breakdown,
// valid rows carry ranking metrics; layers.csv: per-epoch mean CE per tapped
// layer. Numbers use %.10g so identical runs are byte-identical.
void write_metrics_csv(const std::string& path, const TrainLogs& logs);
void write_layers_csv(const std::string& path, const TrainLogs& logs);

std::string format_g10(double v);

}  // namespace ilrec
