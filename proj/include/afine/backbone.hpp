#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "afine/autodiff.hpp"
#include "afine/errors.hpp"
#include "afine/image.hpp"
#include "afine/params.hpp"

namespace afine {

enum class BackboneKind { toy_conv, transformer };

// Toy backbone: 3 conv stages, kernel 3, stride 2, widths below, GELU after
// each. Small enough that every gradient and training test runs in seconds.
inline constexpr int kToyChannels[3] = {8, 16, 32};
inline constexpr int kToyStageCount = 3;
inline constexpr int kToyMinInput = 8;

struct BackboneConfig {
  BackboneKind kind = BackboneKind::toy_conv;
  int patch_size = 8;        // transformer patch; min input side for toy
  int embed_dim = 32;        // transformer token width; toy: widest stage
  int depth = 3;             // transformer block count; toy: 3 conv stages
  int heads = 4;             // transformer only
  int mlp_ratio = 4;         // transformer only
  int base_resolution = 224; // resolution the positional grid was laid out for
  std::vector<int> fidelity_stage_ids;     // block/stage indices >= 1; stage 0 is implicit
  std::vector<int> naturalness_stage_ids;  // block/stage indices >= 1
  std::uint64_t init_seed = 0;

  static BackboneConfig toy(std::uint64_t seed = 0) {
    BackboneConfig c;
    c.kind = BackboneKind::toy_conv;
    c.patch_size = kToyMinInput;
    c.embed_dim = kToyChannels[2];
    c.depth = kToyStageCount;
    c.fidelity_stage_ids = {1, 2, 3};
    c.naturalness_stage_ids = {1, 2, 3};
    c.init_seed = seed;
    return c;
  }

  // ViT-B/32 geometry with a 7x7 positional grid laid out at 224x224.
  static BackboneConfig vit_b32(std::uint64_t seed = 0) {
    BackboneConfig c;
    c.kind = BackboneKind::transformer;
    c.patch_size = 32;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.mlp_ratio = 4;
    c.base_resolution = 224;
    c.fidelity_stage_ids = {3, 6, 9, 12};
    c.naturalness_stage_ids = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
    c.init_seed = seed;
    return c;
  }

  // Small transformer for desk-scale tests; same code path as vit_b32.
  static BackboneConfig tiny_transformer(std::uint64_t seed = 0) {
    BackboneConfig c;
    c.kind = BackboneKind::transformer;
    c.patch_size = 8;
    c.embed_dim = 16;
    c.depth = 4;
    c.heads = 4;
    c.mlp_ratio = 2;
    c.base_resolution = 32;
    c.fidelity_stage_ids = {2, 4};
    c.naturalness_stage_ids = {1, 2, 3, 4};
    c.init_seed = seed;
    return c;
  }

  int stage_count() const { return depth; }

  int pos_grid_side() const { return base_resolution / patch_size; }

  void validate() const {
    auto check_ids = [this](const std::vector<int>& ids, const char* what) {
      int prev = 0;
      for (int id : ids) {
        if (id <= prev)
          throw ConfigError(std::string(what) + " stage ids must be strictly increasing");
        if (id > depth) throw ConfigError(std::string(what) + " stage id beyond backbone depth");
        prev = id;
      }
      if (ids.empty()) throw ConfigError(std::string(what) + " stage ids empty");
    };
    check_ids(fidelity_stage_ids, "fidelity");
    check_ids(naturalness_stage_ids, "naturalness");
    if (patch_size < 1) throw ConfigError("patch_size must be positive");
    if (kind == BackboneKind::transformer) {
      if (embed_dim % heads != 0) throw ConfigError("embed_dim must divide into heads");
      if (base_resolution % patch_size != 0)
        throw ConfigError("base_resolution must be a multiple of patch_size");
      if (pos_grid_side() < 2) throw ConfigError("positional grid must be at least 2x2");
    }
  }

  // Sorted union of all tapped backbone stages (never includes 0).
  std::vector<int> tapped_stage_ids() const {
    std::set<int> s(fidelity_stage_ids.begin(), fidelity_stage_ids.end());
    s.insert(naturalness_stage_ids.begin(), naturalness_stage_ids.end());
    return {s.begin(), s.end()};
  }

  // Channel count of a pyramid stage; stage 0 is the raw image.
  int stage_channels(int stage_id) const {
    if (stage_id == 0) return 3;
    if (kind == BackboneKind::toy_conv) return kToyChannels[stage_id - 1];
    return embed_dim;
  }
};

inline void init_backbone_params(const BackboneConfig& cfg, ParamSet& params,
                                 std::mt19937_64& rng) {
  auto fan_in_uniform = [&rng](Tensor& t, std::size_t fan_in) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    t.fill_uniform(rng, -bound, bound);
  };
  if (cfg.kind == BackboneKind::toy_conv) {
    int in_ch = 3;
    for (int s = 0; s < kToyStageCount; ++s) {
      int out_ch = kToyChannels[s];
      Tensor w({std::size_t(out_ch), std::size_t(in_ch), 3, 3});
      fan_in_uniform(w, std::size_t(in_ch) * 9);
      params.add("backbone.conv" + std::to_string(s + 1) + ".weight", ParamGroup::backbone,
                 std::move(w));
      params.add("backbone.conv" + std::to_string(s + 1) + ".bias", ParamGroup::backbone,
                 Tensor({std::size_t(out_ch)}, 0.0));
      in_ch = out_ch;
    }
    return;
  }
  std::size_t d = std::size_t(cfg.embed_dim);
  std::size_t p = std::size_t(cfg.patch_size);
  std::size_t g = std::size_t(cfg.pos_grid_side());
  Tensor patch_w({d, 3, p, p});
  fan_in_uniform(patch_w, 3 * p * p);
  params.add("backbone.patch.weight", ParamGroup::backbone, std::move(patch_w));
  params.add("backbone.patch.bias", ParamGroup::backbone, Tensor({d}, 0.0));
  Tensor cls({d});
  cls.fill_normal(rng, 0.0, 0.02);
  params.add("backbone.cls", ParamGroup::backbone, std::move(cls));
  Tensor pos_cls({d});
  pos_cls.fill_normal(rng, 0.0, 0.02);
  params.add("backbone.pos_cls", ParamGroup::backbone, std::move(pos_cls));
  Tensor pos_grid({g, g, d});
  pos_grid.fill_normal(rng, 0.0, 0.02);
  params.add("backbone.pos_grid", ParamGroup::backbone, std::move(pos_grid));
  std::size_t hidden = d * std::size_t(cfg.mlp_ratio);
  for (int blk = 1; blk <= cfg.depth; ++blk) {
    std::string base = "backbone.block" + std::to_string(blk) + ".";
    params.add(base + "ln1.gamma", ParamGroup::backbone, Tensor({d}, 1.0));
    params.add(base + "ln1.beta", ParamGroup::backbone, Tensor({d}, 0.0));
    for (const char* nm : {"wq", "wk", "wv", "wo"}) {
      Tensor w({d, d});
      fan_in_uniform(w, d);
      params.add(base + "attn." + nm, ParamGroup::backbone, std::move(w));
      params.add(base + "attn.b" + std::string(nm + 1), ParamGroup::backbone, Tensor({d}, 0.0));
    }
    params.add(base + "ln2.gamma", ParamGroup::backbone, Tensor({d}, 1.0));
    params.add(base + "ln2.beta", ParamGroup::backbone, Tensor({d}, 0.0));
    Tensor w1({hidden, d});
    fan_in_uniform(w1, d);
    params.add(base + "mlp.w1", ParamGroup::backbone, std::move(w1));
    params.add(base + "mlp.b1", ParamGroup::backbone, Tensor({hidden}, 0.0));
    Tensor w2({d, hidden});
    fan_in_uniform(w2, hidden);
    params.add(base + "mlp.w2", ParamGroup::backbone, std::move(w2));
    params.add(base + "mlp.b2", ParamGroup::backbone, Tensor({d}, 0.0));
  }
}

struct StageFeatures {
  int stage_index = 0;
  Var features;  // [channels, h, w]
};

struct FeaturePyramid {
  std::vector<StageFeatures> stages;  // ascending stage index, stage 0 first

  const StageFeatures& stage(int id) const {
    for (const auto& s : stages)
      if (s.stage_index == id) return s;
    throw ConfigError("pyramid has no stage " + std::to_string(id));
  }
  bool has_stage(int id) const {
    for (const auto& s : stages)
      if (s.stage_index == id) return true;
    return false;
  }
};

// Plain-tensor interpolation of a positional grid; class-token embeddings are
// stored separately and pass through unchanged.
inline Tensor interpolate_positional_grid(const Tensor& grid, std::size_t target_h,
                                          std::size_t target_w) {
  Tape tape(false);
  Var g = tape.constant(grid);
  Var out = ops::interp_grid_bilinear(tape, g, target_h, target_w);
  return tape.value(out);
}

namespace detail {

inline Tensor normalize_for_backbone(const Image& img, const BackboneConfig& cfg) {
  // CLIP channel statistics for the transformer; symmetric [-1,1] for toy.
  static const double clip_mean[3] = {0.48145466, 0.4578275, 0.40821073};
  static const double clip_std[3] = {0.26862954, 0.26130258, 0.27577711};
  Tensor t = img.tensor();
  std::size_t hw = std::size_t(img.height) * img.width;
  for (int c = 0; c < 3; ++c) {
    double m = cfg.kind == BackboneKind::transformer ? clip_mean[c] : 0.5;
    double s = cfg.kind == BackboneKind::transformer ? clip_std[c] : 0.5;
    for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = (t[c * hw + i] - m) / s;
  }
  return t;
}

inline Image center_crop_to_multiple(const Image& img, int multiple) {
  int h = (img.height / multiple) * multiple;
  int w = (img.width / multiple) * multiple;
  if (h == img.height && w == img.width) return img;
  int oy = (img.height - h) / 2, ox = (img.width - w) / 2;
  Image out(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y + oy, x + ox);
  return out;
}

inline Var transformer_block(Tape& t, Var x, const BoundParams& p, const std::string& base,
                             int heads) {
  using namespace ops;
  std::size_t d = t.value(x).dim(1);
  std::size_t dh = d / std::size_t(heads);
  Var n1 = layer_norm(t, x, p[base + "ln1.gamma"], p[base + "ln1.beta"]);
  Var q = add_rowvec(t, matmul_nt(t, n1, p[base + "attn.wq"]), p[base + "attn.bq"]);
  Var k = add_rowvec(t, matmul_nt(t, n1, p[base + "attn.wk"]), p[base + "attn.bk"]);
  Var v = add_rowvec(t, matmul_nt(t, n1, p[base + "attn.wv"]), p[base + "attn.bv"]);
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    std::size_t c0 = std::size_t(h) * dh, c1 = c0 + dh;
    Var qh = slice_cols(t, q, c0, c1);
    Var kh = slice_cols(t, k, c0, c1);
    Var vh = slice_cols(t, v, c0, c1);
    Var scores = axpb(t, matmul_nt(t, qh, kh), 1.0 / std::sqrt(double(dh)), 0.0);
    head_out.push_back(matmul(t, softmax_rows(t, scores), vh));
  }
  Var attn = add_rowvec(t, matmul_nt(t, concat_cols(t, head_out), p[base + "attn.wo"]),
                        p[base + "attn.bo"]);
  x = add(t, x, attn);
  Var n2 = layer_norm(t, x, p[base + "ln2.gamma"], p[base + "ln2.beta"]);
  Var h1 = gelu(t, add_rowvec(t, matmul_nt(t, n2, p[base + "mlp.w1"]), p[base + "mlp.b1"]));
  Var h2 = add_rowvec(t, matmul_nt(t, h1, p[base + "mlp.w2"]), p[base + "mlp.b2"]);
  return add(t, x, h2);
}

}  // namespace detail

// Runs the configured backbone and returns stage 0 (the raw image) plus every
// tapped stage. Pure in (image, params); safe to call concurrently with
// per-call tapes and shared read-only parameters.
inline FeaturePyramid extract_pyramid(Tape& tape, const Image& image, const BackboneConfig& cfg,
                                      const BoundParams& params) {
  using namespace ops;
  cfg.validate();
  if (image.height < cfg.patch_size || image.width < cfg.patch_size)
    throw DimensionError("input image smaller than one patch");
  for (double v : image.data)
    if (v < -1e-9 || v > 1.0 + 1e-9) throw DataError("image values must lie in [0,1]");

  FeaturePyramid pyr;
  std::vector<int> taps = cfg.tapped_stage_ids();

  if (cfg.kind == BackboneKind::toy_conv) {
    pyr.stages.push_back({0, tape.constant(image.tensor())});
    Var x = tape.constant(detail::normalize_for_backbone(image, cfg));
    for (int s = 1; s <= kToyStageCount; ++s) {
      std::string base = "backbone.conv" + std::to_string(s);
      x = gelu(tape, conv2d(tape, x, params[base + ".weight"], params[base + ".bias"], 2, 1));
      if (std::binary_search(taps.begin(), taps.end(), s)) pyr.stages.push_back({s, x});
    }
    return pyr;
  }

  // Transformer path: crop to a patch multiple, patchify, add interpolated
  // positional embeddings, then tap the configured block outputs.
  Image cropped = detail::center_crop_to_multiple(image, cfg.patch_size);
  pyr.stages.push_back({0, tape.constant(cropped.tensor())});
  std::size_t gh = std::size_t(cropped.height) / cfg.patch_size;
  std::size_t gw = std::size_t(cropped.width) / cfg.patch_size;
  std::size_t d = std::size_t(cfg.embed_dim);

  Var x = tape.constant(detail::normalize_for_backbone(cropped, cfg));
  Var grid = conv2d(tape, x, params["backbone.patch.weight"], params["backbone.patch.bias"],
                    cfg.patch_size, 0);
  Var tokens = grid_to_tokens(tape, grid);  // [gh*gw, d]

  Var pos_grid = params["backbone.pos_grid"];
  std::size_t src = std::size_t(cfg.pos_grid_side());
  Var pos_tokens;
  if (gh == src && gw == src) {
    pos_tokens = reshape(tape, pos_grid, {gh * gw, d});
  } else {
    pos_tokens = reshape(tape, interp_grid_bilinear(tape, pos_grid, gh, gw), {gh * gw, d});
  }
  tokens = add(tape, tokens, pos_tokens);
  Var cls_row = reshape(tape, add(tape, params["backbone.cls"], params["backbone.pos_cls"]), {1, d});
  Var seq = concat_rows(tape, {cls_row, tokens});

  for (int blk = 1; blk <= cfg.depth; ++blk) {
    seq = detail::transformer_block(tape, seq, params,
                                    "backbone.block" + std::to_string(blk) + ".", cfg.heads);
    if (std::binary_search(taps.begin(), taps.end(), blk)) {
      Var body = slice_rows(tape, seq, 1, gh * gw + 1);  // drop the class token
      pyr.stages.push_back({blk, tokens_to_grid(tape, body, gh, gw)});
    }
  }
  return pyr;
}

// Per-channel global statistics of two matching stages. Population variance
// convention (divide by the element count).
struct ChannelStats {
  std::vector<double> mean_x, mean_y, var_x, var_y, cov_xy;
};

inline ChannelStats stage_statistics(const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y) || x.rank() != 3) throw DimensionError("stage_statistics: shape mismatch");
  std::size_t C = x.dim(0), HW = x.dim(1) * x.dim(2);
  if (HW == 0) throw DimensionError("stage_statistics: empty grid");
  ChannelStats st;
  st.mean_x.resize(C);
  st.mean_y.resize(C);
  st.var_x.resize(C);
  st.var_y.resize(C);
  st.cov_xy.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      mx += x[c * HW + i];
      my += y[c * HW + i];
    }
    mx /= double(HW);
    my /= double(HW);
    double vx = 0.0, vy = 0.0, cxy = 0.0;
    for (std::size_t i = 0; i < HW; ++i) {
      double dx = x[c * HW + i] - mx, dy = y[c * HW + i] - my;
      vx += dx * dx;
      vy += dy * dy;
      cxy += dx * dy;
    }
    st.mean_x[c] = mx;
    st.mean_y[c] = my;
    st.var_x[c] = vx / double(HW);
    st.var_y[c] = vy / double(HW);
    st.cov_xy[c] = cxy / double(HW);
  }
  return st;
}

}  // namespace afine
