#include "ilrec/config.hpp"

#include <fstream>
#include <sstream>

namespace ilrec {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& want) {
  throw ConfigError("config key " + key + ": cannot parse '" + value +
                    "' as " + want);
}

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) bad_value(key, value, "an integer");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value, "an integer");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size() || (!value.empty() && value[0] == '-'))
      bad_value(key, value, "an unsigned integer");
    return static_cast<std::uint64_t>(v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value, "an unsigned integer");
  }
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) bad_value(key, value, "a number");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value, "a number");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean (true/false)");
}

std::vector<int> to_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) bad_value(key, value, "a comma-separated integer list");
    out.push_back(to_int(key, part));
  }
  if (out.empty()) bad_value(key, value, "a comma-separated integer list");
  return out;
}

}  // namespace

void RunConfig::set(const std::string& section, const std::string& key,
                    const std::string& value) {
  const std::string full = section + "." + key;
  if (section == "corpus") {
    if (key == "input") corpus.input = value;
    else if (key == "format") corpus.format = value;
    else if (key == "synthetic") corpus.synthetic = to_bool(full, value);
    else if (key == "synthetic_users") corpus.syn.num_users = to_int(full, value);
    else if (key == "synthetic_items") corpus.syn.num_items = to_int(full, value);
    else if (key == "synthetic_clusters")
      corpus.syn.num_clusters = to_int(full, value);
    else if (key == "synthetic_min_len") corpus.syn.min_len = to_int(full, value);
    else if (key == "synthetic_max_len") corpus.syn.max_len = to_int(full, value);
    else if (key == "synthetic_in_cluster")
      corpus.syn.in_cluster = to_double(full, value);
    else if (key == "synthetic_seed") corpus.syn.seed = to_u64(full, value);
    else if (key == "data_dir") corpus.data_dir = value;
    else if (key == "max_len") corpus.max_len = to_int(full, value);
    else if (key == "min_interactions")
      corpus.min_interactions = to_int(full, value);
    else if (key == "scheme") corpus.scheme = value;
    else if (key == "identifier_file") corpus.identifier_file = value;
    else if (key == "identifier_seed")
      corpus.identifier_seed = to_u64(full, value);
    else if (key == "m") corpus.m = to_int(full, value);
    else if (key == "b") corpus.b = to_int(full, value);
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "cf") {
    if (key == "variant") cf.variant = cf_variant_from_string(value);
    else if (key == "epsilon") cf.epsilon = to_double(full, value);
    else if (key == "embedding_dim") cf.embedding_dim = to_int(full, value);
    else if (key == "num_heads") cf.num_heads = to_int(full, value);
    else if (key == "num_blocks") cf.num_blocks = to_int(full, value);
    else if (key == "learning_rate") cf.learning_rate = to_double(full, value);
    else if (key == "epochs") cf.epochs = to_int(full, value);
    else if (key == "seed") cf.seed = to_u64(full, value);
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "model") {
    if (key == "embed_dim") model.embed_dim = to_int(full, value);
    else if (key == "num_layers") model.num_layers = to_int(full, value);
    else if (key == "num_heads") model.num_heads = to_int(full, value);
    else if (key == "ff_dim") model.ff_dim = to_int(full, value);
    else if (key == "max_positions") model.max_positions = to_int(full, value);
    else if (key == "head_mode") model.head_mode = head_mode_from_string(value);
    else if (key == "tapped_layer_count")
      model.tapped_layer_count = to_int(full, value);
    else if (key == "seed") model.seed = to_u64(full, value);
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "hyper") {
    if (key == "alpha") hyper.alpha = to_double(full, value);
    else if (key == "beta") hyper.beta = to_double(full, value);
    else if (key == "lambda" || key == "lambda_")
      hyper.lambda = to_double(full, value);
    else if (key == "mu") hyper.mu = to_double(full, value);
    else if (key == "k") hyper.k = to_int(full, value);
    else if (key == "ensemble_strategy")
      hyper.ensemble_strategy = ensemble_strategy_from_string(value);
    else if (key == "penalty_mode")
      hyper.penalty_mode = penalty_mode_from_string(value);
    else if (key == "include_extra_layer")
      hyper.include_extra_layer = to_bool(full, value);
    else if (key == "negative_weight_source")
      hyper.negative_weight_source = neg_weight_source_from_string(value);
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "train") {
    if (key == "mode") train.mode = train_mode_from_string(value);
    else if (key == "epochs") train.epochs = to_int(full, value);
    else if (key == "batch_size") train.batch_size = to_int(full, value);
    else if (key == "learning_rate") train.learning_rate = to_double(full, value);
    else if (key == "weight_decay") train.weight_decay = to_double(full, value);
    else if (key == "grad_clip") train.grad_clip = to_double(full, value);
    else if (key == "seed") train.seed = to_u64(full, value);
    else if (key == "precompute_cf") train.precompute_cf = to_bool(full, value);
    else if (key == "eval_every") train.eval_every = to_int(full, value);
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "eval") {
    if (key == "ks") eval.ks = to_int_list(full, value);
    else if (key == "mode") eval.mode = value;
    else if (key == "split") eval.split = value;
    else if (key == "num_candidates") eval.num_candidates = to_int(full, value);
    else if (key == "checkpoint") eval.checkpoint = value;
    else throw ConfigError("unknown config key: " + full);
  } else if (section == "output") {
    if (key == "dir") out_dir = value;
    else throw ConfigError("unknown config key: " + full);
  } else {
    throw ConfigError("unknown config section: " + section);
  }
}

void RunConfig::finalize() {
  model.vocab_size = vocab_size_for_base(corpus.b);
  if (model.max_positions <= 0)
    model.max_positions = 1 + corpus.max_len * (corpus.m + 1) + corpus.m;
  validate();
}

void RunConfig::validate() const {
  if (corpus.max_len < 1) throw ConfigError("corpus.max_len must be >= 1");
  if (corpus.min_interactions < 1)
    throw ConfigError("corpus.min_interactions must be >= 1");
  if (corpus.m < 1) throw ConfigError("corpus.m must be >= 1");
  if (corpus.b < 2) throw ConfigError("corpus.b must be >= 2");
  log_format_from_string(corpus.format);
  id_scheme_from_string(corpus.scheme);
  if (corpus.synthetic) corpus.syn.validate();
  cf.validate();
  model.validate();
  if (model.max_positions < 1 + corpus.max_len * (corpus.m + 1) + corpus.m)
    throw ConfigError("model.max_positions too small for corpus.max_len");
  if (train.mode == TrainMode::ilrec)
    hyper.validate(model.num_layers, model.tapped_layer_count);
  train.validate();
  if (eval.mode != "full" && eval.mode != "candidates")
    throw ConfigError("eval.mode must be full or candidates");
  if (eval.split != "valid" && eval.split != "test")
    throw ConfigError("eval.split must be valid or test");
  if (eval.ks.empty()) throw ConfigError("eval.ks must be nonempty");
  for (std::size_t i = 0; i < eval.ks.size(); ++i) {
    if (eval.ks[i] < 1) throw ConfigError("eval.ks entries must be >= 1");
    if (i > 0 && eval.ks[i] <= eval.ks[i - 1])
      throw ConfigError("eval.ks must be strictly increasing");
  }
  if (eval.num_candidates < 0)
    throw ConfigError("eval.num_candidates must be >= 0");
  if (out_dir.empty()) throw ConfigError("output.dir must be nonempty");
}

void apply_ini(std::istream& in, RunConfig& cfg, const std::string& source) {
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto where = source + ":" + std::to_string(line_no);
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw ConfigError(where + ": malformed section header: " + s);
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected key = value, got: " + s);
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (section.empty())
      throw ConfigError(where + ": key " + key + " outside any [section]");
    try {
      cfg.set(section, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

RunConfig load_run_config(const std::string& config_path,
                          const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file: " + config_path);
    apply_ini(in, cfg, config_path);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    const auto dot = ov.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("--set expects section.key=value, got: " + ov);
    const std::string section = trim(ov.substr(0, dot));
    const std::string key = trim(ov.substr(dot + 1, eq - dot - 1));
    const std::string value = trim(ov.substr(eq + 1));
    cfg.set(section, key, value);
  }
  cfg.finalize();
  return cfg;
}

}  // namespace ilrec
