#include "ilrec/synthetic.hpp"

#include <cstdio>

namespace ilrec {

namespace {

std::string padded_id(char prefix, int index, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%c%0*d", prefix, width, index + 1);
  return buf;
}

}  // namespace

InteractionLog synthetic_interactions(const SyntheticConfig& cfg) {
  cfg.validate();
  const int n = cfg.num_items, c = cfg.num_clusters;
  // Contiguous, nearly equal clusters: item i belongs to cluster i*c/n.
  auto cluster_of = [&](int item) {
    return static_cast<int>(static_cast<long long>(item) * c / n);
  };
  auto cluster_range = [&](int cl) {
    // smallest i with floor(i*c/n) >= cl is ceil(cl*n/c)
    const int begin = static_cast<int>((static_cast<long long>(cl) * n + c - 1) / c);
    const int end = static_cast<int>((static_cast<long long>(cl + 1) * n + c - 1) / c);
    return std::pair<int, int>(begin, end);
  };

  const int id_width = cfg.num_items >= 1000 || cfg.num_users >= 1000 ? 4 : 3;

  Rng rng(cfg.seed);
  std::uniform_int_distribution<int> pick_cluster(0, c - 1);
  std::uniform_int_distribution<int> pick_len(cfg.min_len, cfg.max_len);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> any_item(0, n - 1);

  InteractionLog log;
  log.records.reserve(cfg.num_users);
  for (int u = 0; u < cfg.num_users; ++u) {
    InteractionRecord rec;
    rec.user = padded_id('u', u, id_width);
    const int len = pick_len(rng);
    auto [lo, hi] = cluster_range(pick_cluster(rng));
    std::uniform_int_distribution<int> in_home(lo, hi - 1);
    int cur = in_home(rng);
    rec.items.push_back(padded_id('i', cur, id_width));
    for (int t = 1; t < len; ++t) {
      if (coin(rng) < cfg.in_cluster) {
        auto [a, b] = cluster_range(cluster_of(cur));
        std::uniform_int_distribution<int> in_cur(a, b - 1);
        cur = in_cur(rng);
      } else {
        cur = any_item(rng);
      }
      rec.items.push_back(padded_id('i', cur, id_width));
    }
    log.records.push_back(std::move(rec));
  }
  return log;
}

}  // namespace ilrec
