#include "ilrec/trie.hpp"

#include <algorithm>

namespace ilrec {

IdentifierTrie IdentifierTrie::build(const ItemIdentifierMap& map) {
  IdentifierTrie trie;
  trie.m_ = map.m;
  trie.nodes_.emplace_back();
  for (int item = 0; item < map.num_items(); ++item) {
    int node = 0;
    trie.nodes_[node].items.push_back(item);
    for (int j = 0; j < map.m; ++j) {
      const int digit = map.digit(item, j);
      int next = trie.child(node, digit);
      if (next < 0) {
        next = static_cast<int>(trie.nodes_.size());
        trie.nodes_[node].children.emplace_back(digit, next);
        trie.nodes_.emplace_back();
      }
      node = next;
      trie.nodes_[node].items.push_back(item);
    }
  }
  for (auto& n : trie.nodes_) std::sort(n.children.begin(), n.children.end());
  return trie;
}

int IdentifierTrie::child(int node, int digit) const {
  for (const auto& [d, kid] : nodes_[node].children)
    if (d == digit) return kid;
  return -1;
}

int IdentifierTrie::node_for_prefix(std::span<const int> prefix) const {
  int node = 0;
  for (int digit : prefix) {
    node = child(node, digit);
    if (node < 0) return -1;
  }
  return node;
}

std::vector<int> IdentifierTrie::items_with_prefix(
    std::span<const int> prefix) const {
  const int node = node_for_prefix(prefix);
  if (node < 0) return {};
  return nodes_[node].items;
}

std::vector<int> IdentifierTrie::constrained_next_tokens(
    std::span<const int> prefix) const {
  std::vector<int> out;
  const int node = node_for_prefix(prefix);
  if (node < 0) return out;
  for (const auto& [digit, kid] : nodes_[node].children) {
    (void)kid;
    out.push_back(digit);
  }
  return out;
}

void IdentifierTrie::dump(std::ostream& os) const {
  // Depth-first, one line per node: indented digit, subtree item count.
  struct Frame {
    int node;
    int depth;
    int digit;
  };
  std::vector<Frame> stack{{0, 0, -1}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    for (int i = 0; i < f.depth; ++i) os << "  ";
    if (f.digit < 0)
      os << "(root)";
    else
      os << f.digit;
    os << " [" << nodes_[f.node].items.size() << " items]\n";
    const auto& kids = nodes_[f.node].children;
    for (auto it = kids.rbegin(); it != kids.rend(); ++it)
      stack.push_back({it->second, f.depth + 1, it->first});
  }
}

}  // namespace ilrec
