#pragma once

#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "deepmatch/autograd.hpp"
#include "deepmatch/errors.hpp"
#include "deepmatch/geometry.hpp"
#include "deepmatch/training.hpp"

namespace dm {

/// Everything a command needs: pyramid geometry, per-level exponents, the
/// descriptor choice, and training settings. Loaded from a line-oriented
/// `key = value` file with '#' comments; unknown keys are rejected.
struct RunConfig {
  GeometryParams geom;
  std::vector<double> exponents;  // broadcast to one per level when scalar
  DescriptorKind descriptor = DescriptorKind::Fixed;
  TrainConfig train;
  std::uint64_t seed = 0;
  int threads = 1;

  ModelParams model() const {
    ModelParams m;
    m.exponents = exponents;
    m.kind = descriptor;
    if (descriptor == DescriptorKind::Trainable)
      m.extractor = ExtractorParams::initialized(seed);
    return m;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline int to_int(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  }
}

inline double to_double(const std::string& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for '" + key + "': " + v);
  }
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

inline Attachment to_attachment(const std::string& v, const std::string& key) {
  if (v.size() < 2 || (v[0] != 'q' && v[0] != 's'))
    throw ConfigError("config: bad attachment for '" + key + "': " + v +
                      " (expected e.g. q0, s2)");
  Attachment a;
  a.decoded = v[0] == 'q';
  a.level = to_int(v.substr(1), key);
  return a;
}

}  // namespace detail

inline void validate_config(RunConfig& cfg);

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  double scalar_exponent = 1.4;
  bool exponent_list = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " is not 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config: line " + std::to_string(lineno) +
                        " has an empty key or value");

    if (key == "levels") cfg.geom.levels = detail::to_int(val, key);
    else if (key == "search_range") cfg.geom.range0 = detail::to_int(val, key);
    else if (key == "ref_stride") cfg.geom.ref_stride = detail::to_int(val, key);
    else if (key == "ref_offset") cfg.geom.ref_offset = detail::to_int(val, key);
    else if (key == "target_stride") cfg.geom.target_stride = detail::to_int(val, key);
    else if (key == "agg_window") cfg.geom.agg_window = detail::to_int(val, key);
    else if (key == "pool_halfwin") cfg.geom.pool_halfwin = detail::to_int(val, key);
    else if (key == "exponent") scalar_exponent = detail::to_double(val, key);
    else if (key == "exponents") {
      cfg.exponents.clear();
      std::istringstream is(val);
      std::string tok;
      while (std::getline(is, tok, ','))
        cfg.exponents.push_back(detail::to_double(detail::trim(tok), key));
      exponent_list = true;
    } else if (key == "descriptor") {
      if (val == "fixed") cfg.descriptor = DescriptorKind::Fixed;
      else if (val == "trainable") cfg.descriptor = DescriptorKind::Trainable;
      else throw ConfigError("config: descriptor must be fixed or trainable");
    } else if (key == "lr_exponents") cfg.train.lr_exponents = detail::to_double(val, key);
    else if (key == "lr_weights") cfg.train.lr_weights = detail::to_double(val, key);
    else if (key == "momentum") cfg.train.momentum = detail::to_double(val, key);
    else if (key == "weight_decay") cfg.train.weight_decay = detail::to_double(val, key);
    else if (key == "epochs") cfg.train.epochs = detail::to_int(val, key);
    else if (key == "sigma") cfg.train.sigma = detail::to_double(val, key);
    else if (key == "attach") cfg.train.attach = detail::to_attachment(val, key);
    else if (key == "train_exponents") cfg.train.train_exponents = detail::to_bool(val, key);
    else if (key == "train_weights") cfg.train.train_weights = detail::to_bool(val, key);
    else if (key == "checkpoint_every") cfg.train.checkpoint_every = detail::to_int(val, key);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(std::stoull(val));
    else if (key == "threads") cfg.threads = detail::to_int(val, key);
    else throw ConfigError("config: unknown key '" + key + "'");
  }

  if (!exponent_list)
    cfg.exponents.assign(static_cast<std::size_t>(cfg.geom.levels), scalar_exponent);
  validate_config(cfg);
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  return parse_config(in);
}

inline void validate_config(RunConfig& cfg) {
  validate(cfg.geom);
  if (static_cast<int>(cfg.exponents.size()) != cfg.geom.levels)
    throw ConfigError("config: need one exponent per level (got " +
                      std::to_string(cfg.exponents.size()) + " for " +
                      std::to_string(cfg.geom.levels) + " levels)");
  for (double e : cfg.exponents)
    if (!(e > 0)) throw ConfigError("config: exponents must be > 0");
  if (cfg.train.attach.level < 0 || cfg.train.attach.level > cfg.geom.levels)
    throw ConfigError("config: attachment level out of range");
  if (cfg.threads < 1) throw ConfigError("config: threads must be >= 1");
  cfg.train.threads = cfg.threads;
  cfg.train.seed = cfg.seed;
  cfg.train.validate();
}

}  // namespace dm
