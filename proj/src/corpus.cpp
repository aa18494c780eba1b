#include "ilrec/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace ilrec {

std::size_t InteractionLog::total_interactions() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.items.size();
  return n;
}

std::vector<std::string> InteractionLog::distinct_items() const {
  std::set<std::string> s;
  for (const auto& r : records) s.insert(r.items.begin(), r.items.end());
  return {s.begin(), s.end()};
}

LogFormat log_format_from_string(const std::string& s) {
  if (s == "jsonl") return LogFormat::jsonl;
  if (s == "tsv") return LogFormat::tsv;
  throw ConfigError("unknown interaction log format: " + s);
}

namespace {

InteractionLog ingest_jsonl(std::istream& in, const std::string& path) {
  InteractionLog log;
  std::unordered_map<std::string, int> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": invalid json: " + e.what());
    }
    if (!j.is_object() || !j.contains("user") || !j.contains("items") ||
        !j["user"].is_string() || !j["items"].is_array()) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected {\"user\": str, \"items\": [str...]}");
    }
    InteractionRecord rec;
    rec.user = j["user"].get<std::string>();
    for (const auto& it : j["items"]) {
      if (!it.is_string())
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": items must be strings");
      rec.items.push_back(it.get<std::string>());
    }
    if (!seen.emplace(rec.user, 1).second)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": duplicate user " + rec.user);
    log.records.push_back(std::move(rec));
  }
  return log;
}

InteractionLog ingest_tsv(std::istream& in, const std::string& path) {
  struct Row {
    std::string item;
    long long ts;
    std::size_t order;  // file order breaks timestamp ties
  };
  std::unordered_map<std::string, std::vector<Row>> by_user;
  std::vector<std::string> user_order;
  std::set<std::tuple<std::string, std::string, long long>> seen_rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string user, item, ts_str;
    if (!std::getline(ls, user, '\t') || !std::getline(ls, item, '\t') ||
        !std::getline(ls, ts_str, '\t')) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected user\\titem\\ttimestamp");
    }
    long long ts = 0;
    try {
      std::size_t pos = 0;
      ts = std::stoll(ts_str, &pos);
      if (pos != ts_str.size()) throw std::invalid_argument(ts_str);
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": bad timestamp: " + ts_str);
    }
    if (!seen_rows.emplace(user, item, ts).second)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": duplicate row for user " + user + ", item " + item);
    auto [it, fresh] = by_user.try_emplace(user);
    if (fresh) user_order.push_back(user);
    it->second.push_back({item, ts, lineno});
  }
  InteractionLog log;
  for (const auto& user : user_order) {
    auto& rows = by_user[user];
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.ts != b.ts) return a.ts < b.ts;
      return a.order < b.order;
    });
    InteractionRecord rec;
    rec.user = user;
    for (auto& r : rows) rec.items.push_back(std::move(r.item));
    log.records.push_back(std::move(rec));
  }
  return log;
}

}  // namespace

InteractionLog ingest_interactions(const std::string& path, LogFormat format) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open interaction log: " + path);
  return format == LogFormat::jsonl ? ingest_jsonl(in, path)
                                    : ingest_tsv(in, path);
}

InteractionLog five_core_filter(const InteractionLog& log, int min_count) {
  InteractionLog cur = log;
  for (;;) {
    std::unordered_map<std::string, int> item_count;
    for (const auto& r : cur.records)
      for (const auto& it : r.items) ++item_count[it];

    InteractionLog next;
    bool changed = false;
    for (const auto& r : cur.records) {
      InteractionRecord kept;
      kept.user = r.user;
      for (const auto& it : r.items)
        if (item_count[it] >= min_count) kept.items.push_back(it);
      if (kept.items.size() != r.items.size()) changed = true;
      if (static_cast<int>(kept.items.size()) >= min_count) {
        next.records.push_back(std::move(kept));
      } else {
        changed = true;
      }
    }
    if (!changed) return cur;
    cur = std::move(next);
  }
}

InteractionLog drop_short_records(const InteractionLog& log, int min_items,
                                  std::vector<std::string>* dropped) {
  InteractionLog out;
  for (const auto& r : log.records) {
    if (static_cast<int>(r.items.size()) >= min_items) {
      out.records.push_back(r);
    } else if (dropped) {
      dropped->push_back(r.user);
    }
  }
  return out;
}

int Catalog::require(const std::string& id) const {
  auto it = index.find(id);
  if (it == index.end()) throw ConfigError("unknown item id: " + id);
  return it->second;
}

Catalog Catalog::build(std::vector<std::string> sorted_ids) {
  Catalog c;
  c.ids = std::move(sorted_ids);
  for (int i = 0; i < static_cast<int>(c.ids.size()); ++i)
    c.index.emplace(c.ids[i], i);
  return c;
}

Dataset leave_one_out_split(const InteractionLog& log, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  Dataset ds;
  ds.catalog = Catalog::build(log.distinct_items());

  auto tail = [max_len](const std::vector<int>& seq, int end) {
    int begin = std::max(0, end - max_len);
    return std::vector<int>(seq.begin() + begin, seq.begin() + end);
  };

  for (const auto& rec : log.records) {
    const int n = static_cast<int>(rec.items.size());
    if (n < 3)
      throw ConfigError("user " + rec.user + " has fewer than 3 interactions");
    const int user = static_cast<int>(ds.users.size());
    ds.users.push_back(rec.user);
    std::vector<int> seq(n);
    for (int i = 0; i < n; ++i) seq[i] = ds.catalog.require(rec.items[i]);
    // Targets by position (0-based): train 1..n-3, valid n-2, test n-1.
    for (int t = 1; t <= n - 3; ++t)
      ds.train.push_back({user, tail(seq, t), seq[t]});
    ds.valid.push_back({user, tail(seq, n - 2), seq[n - 2]});
    ds.test.push_back({user, tail(seq, n - 1), seq[n - 1]});
  }
  return ds;
}

IdScheme id_scheme_from_string(const std::string& s) {
  if (s == "random_unique") return IdScheme::random_unique;
  if (s == "base_b_index") return IdScheme::base_b_index;
  if (s == "external_file") return IdScheme::external_file;
  throw ConfigError("unknown identifier scheme: " + s);
}

std::uint64_t ItemIdentifierMap::pack(std::span<const int> digits) const {
  std::uint64_t key = 0;
  for (int d : digits) key = key * static_cast<std::uint64_t>(b) +
                             static_cast<std::uint64_t>(d);
  return key;
}

void ItemIdentifierMap::rebuild_reverse() {
  reverse.clear();
  std::vector<int> buf(m);
  for (int i = 0; i < num_items(); ++i) {
    for (int j = 0; j < m; ++j) buf[j] = codes(i, j);
    reverse.emplace(pack(buf), i);
  }
}

int ItemIdentifierMap::lookup(std::span<const int> digits) const {
  if (static_cast<int>(digits.size()) != m) return -1;
  for (int d : digits)
    if (d < 0 || d >= b) return -1;
  auto it = reverse.find(pack(digits));
  return it == reverse.end() ? -1 : it->second;
}

namespace {

double code_space_log(int b, int m) {
  return static_cast<double>(m) * std::log(static_cast<double>(b));
}

ItemIdentifierMap read_external_identifiers(const Catalog& catalog, int m,
                                            int b, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open identifier file: " + path);
  ItemIdentifierMap map;
  map.m = m;
  map.b = b;
  map.codes = MatXi::Constant(catalog.size(), m, -1);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string item, rest;
    if (!std::getline(ls, item, '\t'))
      throw ConfigError(path + ":" + std::to_string(lineno) + ": bad row");
    std::getline(ls, rest);
    // digits after the first tab, separated by any whitespace
    std::istringstream ds(rest);
    std::vector<int> digits;
    std::string field;
    while (ds >> field) {
      try {
        std::size_t used = 0;
        digits.push_back(std::stoi(field, &used));
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": bad digit: " + field);
      }
    }
    if (static_cast<int>(digits.size()) != m)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(m) + " digits");
    for (int d : digits)
      if (d < 0 || d >= b)
        throw ConfigError(path + ":" + std::to_string(lineno) +
                          ": digit out of range [0, " + std::to_string(b) +
                          ")");
    int idx = catalog.require(item);
    if (map.codes(idx, 0) != -1)
      throw ConfigError(path + ": duplicate identifier row for item " + item);
    for (int j = 0; j < m; ++j) map.codes(idx, j) = digits[j];
  }
  for (int i = 0; i < catalog.size(); ++i)
    if (map.codes(i, 0) == -1)
      throw ConfigError(path + ": no identifier for item " + catalog.ids[i]);
  map.rebuild_reverse();
  if (static_cast<int>(map.reverse.size()) != catalog.size())
    throw ConfigError(path + ": identifiers are not unique across items");
  return map;
}

}  // namespace

ItemIdentifierMap assign_identifiers(const Catalog& catalog, IdScheme scheme,
                                     int m, int b, std::uint64_t seed,
                                     const std::string& external_path) {
  if (m < 1 || b < 2) throw ConfigError("identifier scheme needs m >= 1, b >= 2");
  const int n = catalog.size();
  if (code_space_log(b, m) < std::log(static_cast<double>(std::max(n, 1))))
    throw ConfigError("identifier space b^m is smaller than the catalog (" +
                      std::to_string(n) + " items)");

  if (scheme == IdScheme::external_file)
    return read_external_identifiers(catalog, m, b, external_path);

  ItemIdentifierMap map;
  map.m = m;
  map.b = b;
  map.codes.resize(n, m);

  if (scheme == IdScheme::base_b_index) {
    for (int i = 0; i < n; ++i) {
      int rem = i;
      for (int j = m - 1; j >= 0; --j) {
        map.codes(i, j) = rem % b;
        rem /= b;
      }
    }
  } else {  // random_unique: rejection-sample distinct codes
    Rng rng(seed);
    std::uniform_int_distribution<int> digit(0, b - 1);
    std::set<std::uint64_t> used;
    std::vector<int> buf(m);
    for (int i = 0; i < n; ++i) {
      for (;;) {
        for (int j = 0; j < m; ++j) buf[j] = digit(rng);
        std::uint64_t key = 0;
        for (int d : buf)
          key = key * static_cast<std::uint64_t>(b) + static_cast<std::uint64_t>(d);
        if (used.insert(key).second) {
          for (int j = 0; j < m; ++j) map.codes(i, j) = buf[j];
          break;
        }
      }
    }
  }
  map.rebuild_reverse();
  return map;
}

void write_identifiers(const std::string& path, const Catalog& catalog,
                       const ItemIdentifierMap& map) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write identifier file: " + path);
  for (int i = 0; i < catalog.size(); ++i) {
    out << catalog.ids[i] << '\t';
    for (int j = 0; j < map.m; ++j) {
      if (j) out << ' ';
      out << map.codes(i, j);
    }
    out << '\n';
  }
}

TokenizedExample encode_example(std::span<const int> history, int target,
                                const ItemIdentifierMap& map) {
  const int m = map.m;
  const int n = static_cast<int>(history.size());
  auto check_item = [&](int item) {
    if (item < 0 || item >= map.num_items())
      throw ConfigError("encode_example: item index " + std::to_string(item) +
                        " outside identifier map of size " +
                        std::to_string(map.num_items()));
  };
  for (int i = 0; i < n; ++i) check_item(history[i]);
  check_item(target);
  TokenizedExample ex;
  ex.m = m;
  ex.tokens.resize(1 + n * (m + 1) + m);
  int pos = 0;
  ex.tokens[pos++] = kBosToken;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j)
      ex.tokens[pos++] = digit_to_token(map.digit(history[i], j));
    ex.tokens[pos++] = kSepToken;
  }
  ex.response_start = pos;
  for (int j = 0; j < m; ++j)
    ex.tokens[pos++] = digit_to_token(map.digit(target, j));
  return ex;
}

DecodedExample decode_example(const TokenizedExample& ex,
                              const ItemIdentifierMap& map) {
  const int m = map.m;
  const auto& t = ex.tokens;
  const int len = static_cast<int>(t.size());
  if (len < 1 + m || t[0] != kBosToken)
    throw ConfigError("decode: sequence must start with the begin token");
  if ((len - 1 - m) % (m + 1) != 0)
    throw ConfigError("decode: sequence length does not match the layout");
  const int n = (len - 1 - m) / (m + 1);
  if (ex.response_start != len - m)
    throw ConfigError("decode: response must cover the final identifier");

  auto read_item = [&](int at) {
    std::vector<int> digits(m);
    for (int j = 0; j < m; ++j) {
      if (t[at + j] < kTokenOffset)
        throw ConfigError("decode: control token inside an identifier");
      digits[j] = token_to_digit(t[at + j]);
    }
    int item = map.lookup(digits);
    if (item < 0) throw ConfigError("decode: unknown identifier code");
    return item;
  };

  DecodedExample out;
  int pos = 1;
  for (int i = 0; i < n; ++i) {
    out.history.push_back(read_item(pos));
    pos += m;
    if (t[pos] != kSepToken)
      throw ConfigError("decode: expected separator after an identifier");
    ++pos;
  }
  out.target = read_item(pos);
  return out;
}

}  // namespace ilrec
