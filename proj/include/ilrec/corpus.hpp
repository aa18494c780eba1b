#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ilrec/common.hpp"

namespace ilrec {

// One user's interaction history, already ordered by time.
struct InteractionRecord {
  std::string user;
  std::vector<std::string> items;
};

struct InteractionLog {
  std::vector<InteractionRecord> records;

  std::size_t total_interactions() const;
  std::vector<std::string> distinct_items() const;  // sorted
};

enum class LogFormat { jsonl, tsv };

LogFormat log_format_from_string(const std::string& s);

// Reads a log from disk. jsonl: one {"user": ..., "items": [...]} object per
// line, items already time-ordered, one line per user. tsv: unordered
// user \t item \t timestamp rows, sorted per user by timestamp (stable, so
// equal timestamps keep file order). Exact duplicate tsv rows and repeated
// jsonl users are errors.
InteractionLog ingest_interactions(const std::string& path, LogFormat format);

// Iteratively drops users and items with fewer than min_count interactions
// until none remain. The fixpoint is the unique maximal subgraph in which
// every surviving user and item has >= min_count interactions, so removal
// order does not matter.
InteractionLog five_core_filter(const InteractionLog& log, int min_count = 5);

// Drops records with fewer than min_items interactions; appends the removed
// user ids to *dropped when given.
InteractionLog drop_short_records(const InteractionLog& log, int min_items,
                                  std::vector<std::string>* dropped = nullptr);

// Dense item catalog: contiguous indices with their external string ids.
struct Catalog {
  std::vector<std::string> ids;  // index -> external id
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(ids.size()); }
  int require(const std::string& id) const;

  static Catalog build(std::vector<std::string> sorted_ids);
};

// One next-item prediction task: `history` is the (truncated) prefix and
// `target` the item to predict, both as catalog indices.
struct Example {
  int user = -1;
  std::vector<int> history;
  int target = -1;
};

struct Dataset {
  Catalog catalog;
  std::vector<std::string> users;  // user index -> external id
  std::vector<Example> train, valid, test;
};

// Per-user temporal split: for a history of n items the test example targets
// item n, validation targets item n-1, and training targets items 2..n-2, so
// neither held-out target is ever trained on. Histories keep the most recent
// max_len items before the target. Records with fewer than three interactions
// are an error (they leave no training target).
Dataset leave_one_out_split(const InteractionLog& log, int max_len);

enum class IdScheme { random_unique, base_b_index, external_file };

IdScheme id_scheme_from_string(const std::string& s);

// Fixed-length identifier codes: each item maps to m digits in [0, b).
struct ItemIdentifierMap {
  int m = 0;
  int b = 0;
  MatXi codes;  // items x m

  int num_items() const { return static_cast<int>(codes.rows()); }
  int digit(int item, int slot) const { return codes(item, slot); }
  // Item with exactly this digit sequence, or -1.
  int lookup(std::span<const int> digits) const;

  std::unordered_map<std::uint64_t, int> reverse;  // packed code -> item
  std::uint64_t pack(std::span<const int> digits) const;
  void rebuild_reverse();
};

// random_unique draws distinct codes uniformly with a seeded generator;
// base_b_index writes the catalog index in base b (requires b^m >= n items,
// most significant digit first); external_file reads "item \t d0 d1 ..."
// rows and validates coverage, digit range, and uniqueness.
ItemIdentifierMap assign_identifiers(const Catalog& catalog, IdScheme scheme,
                                     int m, int b, std::uint64_t seed,
                                     const std::string& external_path = "");

void write_identifiers(const std::string& path, const Catalog& catalog,
                       const ItemIdentifierMap& map);

// Token sequence for one example:
//   [BOS] id(h_1) [SEP] id(h_2) [SEP] ... id(h_k) [SEP] id(target)
// The m target-digit positions at the tail are the response positions.
struct TokenizedExample {
  VecXi tokens;
  int response_start = 0;  // index of the first target digit
  int m = 0;
};

TokenizedExample encode_example(std::span<const int> history, int target,
                                const ItemIdentifierMap& map);

// Inverse of encode_example; fails on malformed layout or unknown codes.
struct DecodedExample {
  std::vector<int> history;
  int target = -1;
};
DecodedExample decode_example(const TokenizedExample& ex,
                              const ItemIdentifierMap& map);

}  // namespace ilrec
