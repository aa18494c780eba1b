#include "ilrec/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

namespace ilrec {

namespace ckpt {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_doubles(std::ostream& os, const double* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(n * sizeof(double)));
}

std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw ConfigError(what + ": truncated file");
  return v;
}

std::uint64_t read_u64(std::istream& is, const std::string& what) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw ConfigError(what + ": truncated file");
  return v;
}

std::string read_string(std::istream& is, const std::string& what) {
  const std::uint32_t n = read_u32(is, what);
  if (n > (1u << 20)) throw ConfigError(what + ": corrupt header length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw ConfigError(what + ": truncated file");
  return s;
}

void read_doubles(std::istream& is, double* data, std::size_t n,
                  const std::string& what) {
  if (!is.read(reinterpret_cast<char*>(data),
               static_cast<std::streamsize>(n * sizeof(double))))
    throw ConfigError(what + ": truncated parameter data");
}

void write_params(std::ostream& os, const ModelParams<double>& p) {
  write_u64(os, static_cast<std::uint64_t>(param_count(p)));
  visit_params(p, [&](const auto& t) {
    write_doubles(os, t.data(), static_cast<std::size_t>(t.size()));
  });
}

void read_params(std::istream& is, ModelParams<double>& p,
                 const std::string& what) {
  const std::uint64_t n = read_u64(is, what);
  if (n != static_cast<std::uint64_t>(param_count(p)))
    throw ConfigError(what + ": parameter count mismatch");
  visit_params(p, [&](auto& t) {
    read_doubles(is, t.data(), static_cast<std::size_t>(t.size()), what);
  });
}

}  // namespace ckpt

namespace {

constexpr char kModelMagic[] = "ILRECMDL";
constexpr std::uint32_t kModelVersion = 1;

nlohmann::json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"embed_dim", c.embed_dim},
          {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},
          {"ff_dim", c.ff_dim},
          {"max_positions", c.max_positions},
          {"head_mode", to_string(c.head_mode)},
          {"tapped_layer_count", c.tapped_layer_count},
          {"seed", c.seed}};
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  return config_json(cfg).dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header is not valid json: ") +
                      e.what());
  }
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.num_layers = j.at("num_layers").get<int>();
    c.num_heads = j.at("num_heads").get<int>();
    c.ff_dim = j.at("ff_dim").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.head_mode = head_mode_from_string(j.at("head_mode").get<std::string>());
    c.tapped_layer_count = j.at("tapped_layer_count").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint header missing field: ") +
                      e.what());
  }
  c.validate();
  return c;
}

std::vector<std::string> model_config_diff(const ModelConfig& a,
                                           const ModelConfig& b) {
  std::vector<std::string> diff;
  if (a.vocab_size != b.vocab_size) diff.push_back("vocab_size");
  if (a.embed_dim != b.embed_dim) diff.push_back("embed_dim");
  if (a.num_layers != b.num_layers) diff.push_back("num_layers");
  if (a.num_heads != b.num_heads) diff.push_back("num_heads");
  if (a.ff_dim != b.ff_dim) diff.push_back("ff_dim");
  if (a.max_positions != b.max_positions) diff.push_back("max_positions");
  if (a.head_mode != b.head_mode) diff.push_back("head_mode");
  if (a.tapped_layer_count != b.tapped_layer_count)
    diff.push_back("tapped_layer_count");
  return diff;
}

void save_model(const std::string& path, const ModelParams<double>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint: " + path);
  os.write(kModelMagic, 8);
  ckpt::write_u32(os, kModelVersion);
  ckpt::write_string(os, model_config_to_json(params.cfg));
  ckpt::write_params(os, params);
  if (!os) throw ConfigError("failed writing checkpoint: " + path);
}

ModelParams<double> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  char magic[8] = {};
  if (!is.read(magic, 8) || std::string(magic, 8) != kModelMagic)
    throw ConfigError(path + ": not a model checkpoint (bad magic)");
  const std::uint32_t version = ckpt::read_u32(is, path);
  if (version != kModelVersion)
    throw ConfigError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  const ModelConfig cfg = model_config_from_json(ckpt::read_string(is, path));
  ModelParams<double> params = init_model<double>(cfg);
  ckpt::read_params(is, params, path);
  // Reject trailing garbage so corruption cannot slip through silently.
  char extra;
  if (is.read(&extra, 1)) throw ConfigError(path + ": trailing bytes");
  return params;
}

}  // namespace ilrec
