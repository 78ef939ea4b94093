#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "afine/errors.hpp"
#include "afine/fidelity.hpp"
#include "afine/model.hpp"

namespace afine {

// Binary checkpoint: magic, format_version, backbone config, then every
// parameter tensor in its canonical order. All integers and doubles are
// little-endian, so save -> load -> save is byte-identical.
namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("truncated checkpoint");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw DataError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline std::string get_str(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  if (!is) throw DataError("truncated checkpoint");
  return s;
}

inline void put_ids(std::ostream& os, const std::vector<int>& ids) {
  put_u32(os, std::uint32_t(ids.size()));
  for (int id : ids) put_u32(os, std::uint32_t(id));
}

inline std::vector<int> get_ids(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::vector<int> ids(n);
  for (auto& id : ids) id = int(get_u32(is));
  return ids;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'A', 'F', 'C', 'K'};

inline void save_checkpoint(const ModelParameters& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, std::uint32_t(model.format_version));
  const BackboneConfig& c = model.config;
  detail::put_u32(os, c.kind == BackboneKind::transformer ? 1 : 0);
  detail::put_u32(os, std::uint32_t(c.patch_size));
  detail::put_u32(os, std::uint32_t(c.embed_dim));
  detail::put_u32(os, std::uint32_t(c.depth));
  detail::put_u32(os, std::uint32_t(c.heads));
  detail::put_u32(os, std::uint32_t(c.mlp_ratio));
  detail::put_u32(os, std::uint32_t(c.base_resolution));
  detail::put_ids(os, c.fidelity_stage_ids);
  detail::put_ids(os, c.naturalness_stage_ids);
  detail::put_u64(os, c.init_seed);
  detail::put_u32(os, std::uint32_t(model.params.size()));
  for (const auto& e : model.params.entries()) {
    detail::put_str(os, e.name);
    detail::put_u32(os, std::uint32_t(e.group));
    detail::put_u32(os, std::uint32_t(e.value.shape.size()));
    for (std::size_t d : e.value.shape) detail::put_u64(os, d);
    for (double v : e.value.data) detail::put_f64(os, v);
  }
  if (!os) throw DataError("failed writing checkpoint: " + path);
}

inline ModelParameters load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError("not an afine checkpoint: " + path);
  ModelParameters m;
  m.format_version = int(detail::get_u32(is));
  if (m.format_version != kCheckpointFormatVersion)
    throw DataError("unsupported checkpoint format_version " + std::to_string(m.format_version));
  BackboneConfig& c = m.config;
  c.kind = detail::get_u32(is) == 1 ? BackboneKind::transformer : BackboneKind::toy_conv;
  c.patch_size = int(detail::get_u32(is));
  c.embed_dim = int(detail::get_u32(is));
  c.depth = int(detail::get_u32(is));
  c.heads = int(detail::get_u32(is));
  c.mlp_ratio = int(detail::get_u32(is));
  c.base_resolution = int(detail::get_u32(is));
  c.fidelity_stage_ids = detail::get_ids(is);
  c.naturalness_stage_ids = detail::get_ids(is);
  c.init_seed = detail::get_u64(is);
  c.validate();
  std::uint32_t count = detail::get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = detail::get_str(is);
    auto group = ParamGroup(detail::get_u32(is));
    std::uint32_t ndim = detail::get_u32(is);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = std::size_t(detail::get_u64(is));
    Tensor t(shape);
    for (double& v : t.data) v = detail::get_f64(is);
    m.params.add(std::move(name), group, std::move(t));
  }

  // Structural and invariant checks before the model is let loose.
  for (const char* nm : {"fidelity.logits", "scale.k_raw", "calibration.eta3",
                         "calibration.eta4", "calibration.gamma3", "calibration.gamma4",
                         "naturalness.proj.weight", "naturalness.mlp.w1"})
    if (!m.params.has(nm)) throw DataError(std::string("checkpoint missing parameter ") + nm);
  if (m.params.at("fidelity.logits").size() != fidelity_logit_count(c))
    throw DataError("checkpoint fidelity logits do not match backbone config");
  if (m.params.at("calibration.eta4")[0] == 0.0 || m.params.at("calibration.gamma4")[0] == 0.0)
    throw ParameterError("checkpoint calibration slope parameter is zero");
  return m;
}

}  // namespace afine
