#include "ilrec/dataset_io.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include <json.hpp>

namespace ilrec {

namespace {

using ordered_json = nlohmann::ordered_json;

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open file: " + path);
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write file: " + path);
  return out;
}

ordered_json parse_line(const std::string& line, const std::string& where) {
  try {
    return ordered_json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": invalid JSON: " + e.what());
  }
}

}  // namespace

PreparedPaths PreparedPaths::in(const std::string& dir) {
  PreparedPaths p;
  p.dataset_json = dir + "/dataset.json";
  p.splits_jsonl = dir + "/splits.jsonl";
  p.identifiers_tsv = dir + "/identifiers.tsv";
  p.stats_txt = dir + "/stats.txt";
  p.candidates_valid = dir + "/candidates_valid.jsonl";
  p.candidates_test = dir + "/candidates_test.jsonl";
  return p;
}

std::string format_g10(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

DatasetStats dataset_stats(const InteractionLog& log) {
  DatasetStats s;
  s.users = static_cast<int>(log.records.size());
  s.items = static_cast<int>(log.distinct_items().size());
  s.interactions = log.total_interactions();
  if (s.users > 0 && s.items > 0) {
    s.sparsity = 1.0 - static_cast<double>(s.interactions) /
                           (static_cast<double>(s.users) * s.items);
    s.avg_len = static_cast<double>(s.interactions) / s.users;
  }
  return s;
}

std::string DatasetStats::to_text() const {
  char sp[32];
  std::snprintf(sp, sizeof(sp), "%.4f%%", sparsity * 100.0);
  std::string out;
  out += "users\t" + std::to_string(users) + "\n";
  out += "items\t" + std::to_string(items) + "\n";
  out += "interactions\t" + std::to_string(interactions) + "\n";
  out += "sparsity\t" + std::string(sp) + "\n";
  out += "avg_len\t" + format_g10(avg_len) + "\n";
  return out;
}

namespace {

void write_split(std::ofstream& out, const char* name, const Dataset& ds,
                 const std::vector<Example>& split) {
  for (const auto& e : split) {
    ordered_json j;
    j["split"] = name;
    j["user"] = ds.users[e.user];
    ordered_json hist = ordered_json::array();
    for (int it : e.history) hist.push_back(ds.catalog.ids[it]);
    j["history"] = std::move(hist);
    j["target"] = ds.catalog.ids[e.target];
    out << j.dump() << "\n";
  }
}

}  // namespace

void write_prepared(const std::string& dir, const Dataset& ds,
                    const ItemIdentifierMap& map, const DatasetStats& stats,
                    int max_len) {
  std::filesystem::create_directories(dir);
  const PreparedPaths paths = PreparedPaths::in(dir);

  ordered_json meta;
  meta["max_len"] = max_len;
  meta["m"] = map.m;
  meta["b"] = map.b;
  meta["users"] = ds.users;
  meta["items"] = ds.catalog.ids;
  open_out(paths.dataset_json) << meta.dump(2) << "\n";

  {
    auto out = open_out(paths.splits_jsonl);
    write_split(out, "train", ds, ds.train);
    write_split(out, "valid", ds, ds.valid);
    write_split(out, "test", ds, ds.test);
  }

  write_identifiers(paths.identifiers_tsv, ds.catalog, map);
  open_out(paths.stats_txt) << stats.to_text();
}

LoadedData load_prepared(const std::string& dir) {
  const PreparedPaths paths = PreparedPaths::in(dir);
  LoadedData data;

  ordered_json meta;
  {
    auto in = open_in(paths.dataset_json);
    try {
      in >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(paths.dataset_json + ": invalid JSON: " + e.what());
    }
  }
  for (const char* key : {"max_len", "m", "b", "users", "items"})
    if (!meta.contains(key))
      throw ConfigError(paths.dataset_json + ": missing field " + key);
  data.max_len = meta.at("max_len").get<int>();
  const int m = meta.at("m").get<int>();
  const int b = meta.at("b").get<int>();
  auto items = meta.at("items").get<std::vector<std::string>>();
  if (!std::is_sorted(items.begin(), items.end()))
    throw ConfigError(paths.dataset_json + ": items must be sorted");
  data.ds.catalog = Catalog::build(std::move(items));
  data.ds.users = meta.at("users").get<std::vector<std::string>>();
  std::unordered_map<std::string, int> user_index;
  for (std::size_t i = 0; i < data.ds.users.size(); ++i)
    user_index[data.ds.users[i]] = static_cast<int>(i);

  {
    auto in = open_in(paths.splits_jsonl);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::string where =
          paths.splits_jsonl + ":" + std::to_string(line_no);
      ordered_json j = parse_line(line, where);
      for (const char* key : {"split", "user", "history", "target"})
        if (!j.contains(key))
          throw ConfigError(where + ": missing field " + key);
      Example e;
      const auto user = j.at("user").get<std::string>();
      const auto uit = user_index.find(user);
      if (uit == user_index.end())
        throw ConfigError(where + ": unknown user " + user);
      e.user = uit->second;
      for (const auto& id : j.at("history"))
        e.history.push_back(data.ds.catalog.require(id.get<std::string>()));
      e.target = data.ds.catalog.require(j.at("target").get<std::string>());
      const auto split = j.at("split").get<std::string>();
      if (split == "train") data.ds.train.push_back(std::move(e));
      else if (split == "valid") data.ds.valid.push_back(std::move(e));
      else if (split == "test") data.ds.test.push_back(std::move(e));
      else throw ConfigError(where + ": unknown split " + split);
    }
  }

  data.map = assign_identifiers(data.ds.catalog, IdScheme::external_file, m, b,
                                0, paths.identifiers_tsv);
  data.trie = IdentifierTrie::build(data.map);
  return data;
}

CandidateLists make_candidates(const Dataset& ds,
                               std::span<const Example> split,
                               int num_candidates, std::uint64_t seed) {
  const int n = ds.catalog.size();
  if (num_candidates < 1)
    throw ConfigError("num_candidates must be >= 1 to build candidate lists");
  const int want = std::min(num_candidates, n);
  Rng rng(seed);
  std::uniform_int_distribution<int> pick(0, n - 1);
  CandidateLists lists;
  for (const auto& e : split) {
    std::vector<char> taken(n, 0);
    std::vector<int> cand = {e.target};
    taken[e.target] = 1;
    while (static_cast<int>(cand.size()) < want) {
      const int item = pick(rng);
      if (taken[item]) continue;
      taken[item] = 1;
      cand.push_back(item);
    }
    std::sort(cand.begin(), cand.end());
    lists.by_user[e.user] = std::move(cand);
  }
  return lists;
}

void write_candidates(const std::string& path, const CandidateLists& lists,
                      const Dataset& ds, std::span<const Example> split) {
  auto out = open_out(path);
  for (const auto& e : split) {
    const auto it = lists.by_user.find(e.user);
    if (it == lists.by_user.end())
      throw ConfigError("no candidate list for user " + ds.users[e.user]);
    ordered_json j;
    j["user"] = ds.users[e.user];
    ordered_json cand = ordered_json::array();
    for (int item : it->second) cand.push_back(ds.catalog.ids[item]);
    j["candidates"] = std::move(cand);
    j["target"] = ds.catalog.ids[e.target];
    out << j.dump() << "\n";
  }
}

CandidateLists read_candidates(const std::string& path, const Dataset& ds) {
  auto in = open_in(path);
  std::unordered_map<std::string, int> user_index;
  for (std::size_t i = 0; i < ds.users.size(); ++i)
    user_index[ds.users[i]] = static_cast<int>(i);

  CandidateLists lists;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    ordered_json j = parse_line(line, where);
    for (const char* key : {"user", "candidates", "target"})
      if (!j.contains(key))
        throw ConfigError(where + ": missing field " + key);
    const auto user = j.at("user").get<std::string>();
    const auto uit = user_index.find(user);
    if (uit == user_index.end())
      throw ConfigError(where + ": unknown user " + user);
    std::vector<int> cand;
    for (const auto& id : j.at("candidates"))
      cand.push_back(ds.catalog.require(id.get<std::string>()));
    lists.by_user[uit->second] = std::move(cand);
  }
  return lists;
}

void write_metrics_csv(const std::string& path, const TrainLogs& logs) {
  auto out = open_out(path);
  out << "epoch,split,hit@5,hit@10,ndcg@5,ndcg@10,"
         "l_sft,l_cpo,l_cpd,l_crr,l_total,mean_|V_N|\n";
  std::size_t vi = 0;
  for (std::size_t e = 0; e < logs.epoch_losses.size(); ++e) {
    const int epoch = static_cast<int>(e) + 1;
    const auto& bd = logs.epoch_losses[e];
    out << epoch << ",train,,,,," << format_g10(bd.sft) << ','
        << format_g10(bd.cpo) << ',' << format_g10(bd.cpd) << ','
        << format_g10(bd.crr) << ',' << format_g10(bd.total) << ','
        << format_g10(bd.mean_num_negatives) << "\n";
    while (vi < logs.valid_evals.size() &&
           logs.valid_evals[vi].first == epoch) {
      const Metrics& m = logs.valid_evals[vi].second;
      out << epoch << ",valid," << format_g10(m.hit_at(5)) << ','
          << format_g10(m.hit_at(10)) << ',' << format_g10(m.ndcg_at(5)) << ','
          << format_g10(m.ndcg_at(10)) << ",,,,,,\n";
      ++vi;
    }
  }
}

void write_layers_csv(const std::string& path, const TrainLogs& logs) {
  auto out = open_out(path);
  out << "epoch,layer_index,mean_ce\n";
  for (std::size_t e = 0; e < logs.epoch_layer_ce.size(); ++e) {
    const VecXd& ce = logs.epoch_layer_ce[e];
    for (int t = 0; t < static_cast<int>(ce.size()); ++t)
      out << (e + 1) << ',' << logs.tapped_layers[t] << ','
          << format_g10(ce(t)) << "\n";
  }
}

}  // namespace ilrec
