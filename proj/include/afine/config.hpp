#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "afine/backbone.hpp"
#include "afine/errors.hpp"
#include "afine/trainer.hpp"

namespace afine {

// Flat `key = value` configuration: UTF-8 lines, '#' comments, unknown keys
// rejected. Every training hyper-parameter has one addressable key whose
// default equals the published schedule.
struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::vector<ConfigEntry> parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  std::vector<ConfigEntry> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    std::size_t b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string();
    std::size_t e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    ConfigEntry e{trim(t.substr(0, eq)), trim(t.substr(eq + 1)), lineno};
    if (e.key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

struct RunConfig {
  std::string corpus_root;
  std::string backbone_kind = "toy";  // toy | vit-b32 | tiny-transformer
  std::uint64_t seed = 0;

  // Optional geometry overrides; <0 keeps the preset.
  int patch_size = -1, embed_dim = -1, depth = -1, heads = -1, mlp_ratio = -1,
      base_resolution = -1;
  std::vector<int> fidelity_stages, naturalness_stages;

  double lr_phase1 = 5e-6, lr_phase2 = 5e-4, lr_phase3 = 1e-3;
  int max_iters_phase1 = 40000, max_iters_phase2 = 40000, max_iters_phase3 = 10000;
  double weight_decay = 1e-3;
  int cosine_period = 10000;
  int batch_size = 128;
  int checkpoint_every = 1000;

  std::string train_triplets, val_triplets;
  std::string log_level = "info";

  BackboneConfig backbone() const {
    BackboneConfig c;
    if (backbone_kind == "toy")
      c = BackboneConfig::toy(seed);
    else if (backbone_kind == "vit-b32")
      c = BackboneConfig::vit_b32(seed);
    else if (backbone_kind == "tiny-transformer")
      c = BackboneConfig::tiny_transformer(seed);
    else
      throw ConfigError("unknown backbone '" + backbone_kind + "'");
    if (patch_size > 0) c.patch_size = patch_size;
    if (embed_dim > 0) c.embed_dim = embed_dim;
    if (depth > 0) c.depth = depth;
    if (heads > 0) c.heads = heads;
    if (mlp_ratio > 0) c.mlp_ratio = mlp_ratio;
    if (base_resolution > 0) c.base_resolution = base_resolution;
    if (!fidelity_stages.empty()) c.fidelity_stage_ids = fidelity_stages;
    if (!naturalness_stages.empty()) c.naturalness_stage_ids = naturalness_stages;
    c.init_seed = seed;
    c.validate();
    return c;
  }

  TrainConfig train_config(int phase) const {
    TrainConfig t = TrainConfig::for_phase(phase);
    switch (phase) {
      case 1: t.learning_rate = lr_phase1; t.max_iters = max_iters_phase1; break;
      case 2: t.learning_rate = lr_phase2; t.max_iters = max_iters_phase2; break;
      case 3: t.learning_rate = lr_phase3; t.max_iters = max_iters_phase3; break;
    }
    t.weight_decay = weight_decay;
    t.cosine_period_iters = cosine_period;
    t.batch_size = batch_size;
    t.checkpoint_every = checkpoint_every;
    t.seed = seed;
    return t;
  }
};

namespace detail {

inline std::string cfg_where(const ConfigEntry& e) {
  return "config line " + std::to_string(e.line) + ", key '" + e.key + "'";
}

inline int cfg_int(const ConfigEntry& e) {
  int v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size())
    throw ConfigError(cfg_where(e) + ": invalid integer '" + e.value + "'");
  return v;
}

inline std::uint64_t cfg_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(e.value.data(), e.value.data() + e.value.size(), v);
  if (ec != std::errc() || p != e.value.data() + e.value.size())
    throw ConfigError(cfg_where(e) + ": invalid unsigned integer '" + e.value + "'");
  return v;
}

inline double cfg_double(const ConfigEntry& e) {
  try {
    std::size_t pos = 0;
    double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(cfg_where(e) + ": invalid number '" + e.value + "'");
  }
}

inline std::vector<int> cfg_int_list(const ConfigEntry& e) {
  std::vector<int> out;
  std::stringstream ss(e.value);
  std::string part;
  while (std::getline(ss, part, ',')) {
    ConfigEntry sub{e.key, part, e.line};
    out.push_back(cfg_int(sub));
  }
  if (out.empty()) throw ConfigError(cfg_where(e) + ": empty list");
  return out;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const ConfigEntry& e) {
  using detail::cfg_double;
  using detail::cfg_int;
  using detail::cfg_int_list;
  using detail::cfg_u64;
  const std::string& k = e.key;
  if (k == "corpus_root") cfg.corpus_root = e.value;
  else if (k == "backbone") cfg.backbone_kind = e.value;
  else if (k == "seed") cfg.seed = cfg_u64(e);
  else if (k == "patch_size") cfg.patch_size = cfg_int(e);
  else if (k == "embed_dim") cfg.embed_dim = cfg_int(e);
  else if (k == "depth") cfg.depth = cfg_int(e);
  else if (k == "heads") cfg.heads = cfg_int(e);
  else if (k == "mlp_ratio") cfg.mlp_ratio = cfg_int(e);
  else if (k == "base_resolution") cfg.base_resolution = cfg_int(e);
  else if (k == "fidelity_stages") cfg.fidelity_stages = cfg_int_list(e);
  else if (k == "naturalness_stages") cfg.naturalness_stages = cfg_int_list(e);
  else if (k == "lr_phase1") cfg.lr_phase1 = cfg_double(e);
  else if (k == "lr_phase2") cfg.lr_phase2 = cfg_double(e);
  else if (k == "lr_phase3") cfg.lr_phase3 = cfg_double(e);
  else if (k == "max_iters_phase1") cfg.max_iters_phase1 = cfg_int(e);
  else if (k == "max_iters_phase2") cfg.max_iters_phase2 = cfg_int(e);
  else if (k == "max_iters_phase3") cfg.max_iters_phase3 = cfg_int(e);
  else if (k == "weight_decay") cfg.weight_decay = cfg_double(e);
  else if (k == "cosine_period") cfg.cosine_period = cfg_int(e);
  else if (k == "batch_size") cfg.batch_size = cfg_int(e);
  else if (k == "checkpoint_every") cfg.checkpoint_every = cfg_int(e);
  else if (k == "train_triplets") cfg.train_triplets = e.value;
  else if (k == "val_triplets") cfg.val_triplets = e.value;
  else if (k == "log_level") cfg.log_level = e.value;
  else throw ConfigError(detail::cfg_where(e) + ": unknown key");
}

inline RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  for (const auto& e : parse_config_file(path)) apply_config_entry(cfg, e);
  return cfg;
}

// CLI `--set key=value` overrides, applied after the file.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  std::size_t eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
  apply_config_entry(cfg, {kv.substr(0, eq), kv.substr(eq + 1), 0});
}

}  // namespace afine
