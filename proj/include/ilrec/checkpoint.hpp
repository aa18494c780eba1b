#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ilrec/model.hpp"

namespace ilrec {

// Checkpoint layout: magic, format version, JSON config header, parameter
// count, then the flat parameter array in canonical order as raw doubles.
// Round-trips bit-exactly.
void save_model(const std::string& path, const ModelParams<double>& params);
ModelParams<double> load_model(const std::string& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// Names of fields that differ between the two configs (empty = identical).
std::vector<std::string> model_config_diff(const ModelConfig& a,
                                           const ModelConfig& b);

namespace ckpt {

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_string(std::ostream& os, const std::string& s);
void write_doubles(std::ostream& os, const double* data, std::size_t n);

std::uint32_t read_u32(std::istream& is, const std::string& what);
std::uint64_t read_u64(std::istream& is, const std::string& what);
std::string read_string(std::istream& is, const std::string& what);
void read_doubles(std::istream& is, double* data, std::size_t n,
                  const std::string& what);

void write_params(std::ostream& os, const ModelParams<double>& p);
void read_params(std::istream& is, ModelParams<double>& p,
                 const std::string& what);

}  // namespace ckpt

}  // namespace ilrec
