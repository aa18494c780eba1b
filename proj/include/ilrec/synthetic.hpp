#pragma once

#include "ilrec/corpus.hpp"

namespace ilrec {

// Seeded generator planting learnable sequential structure: items are
// partitioned into contiguous clusters; each user starts in a latent cluster
// and walks a first-order Markov chain that stays in the current item's
// cluster with probability in_cluster, otherwise jumps uniformly.
struct SyntheticConfig {
  int num_users = 2000;
  int num_items = 500;
  int num_clusters = 10;
  int min_len = 8;
  int max_len = 20;
  double in_cluster = 0.8;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_users < 1 || num_items < 1) throw ConfigError("synthetic sizes must be >= 1");
    if (num_clusters < 1 || num_clusters > num_items)
      throw ConfigError("synthetic_clusters must be in [1, num_items]");
    if (min_len < 1 || max_len < min_len)
      throw ConfigError("synthetic lengths need 1 <= min_len <= max_len");
    if (in_cluster < 0.0 || in_cluster > 1.0)
      throw ConfigError("synthetic_in_cluster must be in [0,1]");
  }
};

InteractionLog synthetic_interactions(const SyntheticConfig& cfg);

}  // namespace ilrec
