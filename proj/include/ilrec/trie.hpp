#pragma once

#include <ostream>
#include <span>
#include <vector>

#include "ilrec/common.hpp"
#include "ilrec/corpus.hpp"

namespace ilrec {

// Prefix tree over item identifier codes. Every item sits at depth m; each
// node stores the items in its subtree so prefix queries are O(answer).
class IdentifierTrie {
 public:
  static IdentifierTrie build(const ItemIdentifierMap& map);

  int depth() const { return m_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  int root() const { return 0; }

  // Child reached by one identifier digit, or -1.
  int child(int node, int digit) const;
  // (digit, child node) pairs in ascending digit order.
  const std::vector<std::pair<int, int>>& children(int node) const {
    return nodes_[node].children;
  }
  // Items in the node's subtree, ascending item index.
  const std::vector<int>& subtree_items(int node) const {
    return nodes_[node].items;
  }

  // Node for a digit prefix, or -1 if no item starts with it.
  int node_for_prefix(std::span<const int> prefix) const;

  std::vector<int> items_with_prefix(std::span<const int> prefix) const;
  // Digits that extend the prefix toward at least one item.
  std::vector<int> constrained_next_tokens(std::span<const int> prefix) const;

  void dump(std::ostream& os) const;

 private:
  struct Node {
    std::vector<std::pair<int, int>> children;
    std::vector<int> items;
  };
  std::vector<Node> nodes_;
  int m_ = 0;
};

// Collaborative reward for each digit that can follow `prefix`: the share of
// scorer mass R carried by the digit's subtree, relative to the mass under
// the prefix. Rewards over the siblings of a node therefore sum to 1 (when
// the prefix mass is nonzero) and are invariant to rescaling R.
template <class S>
struct DigitRewards {
  std::vector<int> digits;  // valid continuations, ascending
  std::vector<S> values;    // reward per digit, aligned with `digits`

  // Dense vector over the token vocabulary; digits map to their token ids,
  // everything else gets zero.
  VecX<S> to_vocab(int vocab_size) const {
    VecX<S> out = VecX<S>::Zero(vocab_size);
    for (std::size_t i = 0; i < digits.size(); ++i)
      out(digit_to_token(digits[i])) = values[i];
    return out;
  }
};

template <class S>
DigitRewards<S> token_rewards(const IdentifierTrie& trie,
                              std::span<const int> prefix,
                              const Eigen::Ref<const VecX<S>>& item_scores) {
  if (static_cast<int>(prefix.size()) >= trie.depth())
    throw ConfigError("token_rewards: prefix must be shorter than the code");
  const int node = trie.node_for_prefix(prefix);
  DigitRewards<S> out;
  if (node < 0) return out;  // no item extends this prefix: all rewards 0

  S prefix_mass = S(0);
  for (int item : trie.subtree_items(node)) prefix_mass += item_scores(item);
  if (!(prefix_mass > S(0)))
    throw NumericError("token_rewards: zero score mass under the prefix");

  for (const auto& [digit, kid] : trie.children(node)) {
    S mass = S(0);
    for (int item : trie.subtree_items(kid)) mass += item_scores(item);
    out.digits.push_back(digit);
    out.values.push_back(mass / prefix_mass);
  }
  return out;
}

}  // namespace ilrec
