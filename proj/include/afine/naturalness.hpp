#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "afine/autodiff.hpp"
#include "afine/backbone.hpp"
#include "afine/errors.hpp"
#include "afine/image.hpp"
#include "afine/params.hpp"

namespace afine {

// Head geometry: every pooled stage vector is projected to 128 dimensions by
// one projection shared across stages, concatenated with the 6 global color
// statistics of the raw image, and scored by a two-layer GELU MLP with a
// fixed 768-wide hidden layer.
inline constexpr std::size_t kNaturalnessProjDim = 128;
inline constexpr std::size_t kNaturalnessHiddenDim = 768;

inline std::size_t naturalness_input_dim(const BackboneConfig& cfg) {
  return 6 + kNaturalnessProjDim * cfg.naturalness_stage_ids.size();
}

inline void init_naturalness_params(const BackboneConfig& cfg, ParamSet& params,
                                    std::mt19937_64& rng) {
  auto fan_in_uniform = [&rng](Tensor& t, std::size_t fan_in) {
    double bound = 1.0 / std::sqrt(double(fan_in));
    t.fill_uniform(rng, -bound, bound);
  };
  std::size_t proj_in = 2 * std::size_t(cfg.embed_dim);
  Tensor proj({kNaturalnessProjDim, proj_in});
  fan_in_uniform(proj, proj_in);
  params.add("naturalness.proj.weight", ParamGroup::naturalness, std::move(proj));
  params.add("naturalness.proj.bias", ParamGroup::naturalness, Tensor({kNaturalnessProjDim}, 0.0));
  std::size_t in_dim = naturalness_input_dim(cfg);
  Tensor w1({kNaturalnessHiddenDim, in_dim});
  fan_in_uniform(w1, in_dim);
  params.add("naturalness.mlp.w1", ParamGroup::naturalness, std::move(w1));
  params.add("naturalness.mlp.b1", ParamGroup::naturalness, Tensor({kNaturalnessHiddenDim}, 0.0));
  Tensor w2({1, kNaturalnessHiddenDim});
  fan_in_uniform(w2, kNaturalnessHiddenDim);
  params.add("naturalness.mlp.w2", ParamGroup::naturalness, std::move(w2));
  params.add("naturalness.mlp.b2", ParamGroup::naturalness, Tensor({1}, 0.0));
}

// Global average then variance pooling of one stage: [2*channels].
inline Var pool_stage(Tape& t, Var stage) {
  using namespace ops;
  const Tensor& v = t.value(stage);
  if (v.rank() != 3 || v.dim(1) * v.dim(2) == 0)
    throw DimensionError("pool_stage: non-empty [C,H,W] grid required");
  Var mean = spatial_mean(t, stage);
  Var centered = sub_channel(t, stage, mean);
  Var var = spatial_mean(t, mul(t, centered, centered));
  return concat_vec(t, {mean, var});
}

inline Tensor pool_stage(const Tensor& stage) {
  Tape t(false);
  return t.value(pool_stage(t, t.constant(stage)));
}

// Means then variances of the three color channels of the raw test image,
// computed on [0,1] pixels before any backbone normalization.
inline Tensor color_statistics(const Image& img) {
  Tensor out({6});
  std::size_t hw = std::size_t(img.height) * img.width;
  for (int c = 0; c < 3; ++c) {
    double m = 0.0;
    for (std::size_t i = 0; i < hw; ++i) m += img.data[c * hw + i];
    m /= double(hw);
    double v = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      double d = img.data[c * hw + i] - m;
      v += d * d;
    }
    out[c] = m;
    out[3 + c] = v / double(hw);
  }
  return out;
}

namespace detail {

// Pooled stage vectors are laid out [means | variances], each half padded
// with zeros to embed_dim so that one projection matrix serves stages of any
// width (the toy stages are narrower than embed_dim).
inline Var padded_pooled(Tape& t, Var stage, std::size_t embed_dim) {
  using namespace ops;
  std::size_t c = t.value(stage).dim(0);
  if (c > embed_dim) throw DimensionError("stage wider than embed_dim");
  Var pooled = pool_stage(t, stage);
  if (c == embed_dim) return pooled;
  Var means = slice_vec(t, pooled, 0, c);
  Var vars = slice_vec(t, pooled, c, 2 * c);
  Var pad = t.constant(Tensor({embed_dim - c}, 0.0));
  return concat_vec(t, {means, pad, vars, pad});
}

}  // namespace detail

// No-reference naturalness score of the image behind `pyr`. Lower output is
// read as more natural, matching the orientation of the combined score.
inline Var naturalness_score(Tape& t, const Image& image, const FeaturePyramid& pyr,
                             const BackboneConfig& cfg, const BoundParams& params) {
  using namespace ops;
  std::vector<Var> parts{t.constant(color_statistics(image))};
  for (int id : cfg.naturalness_stage_ids) {
    if (!pyr.has_stage(id))
      throw ConfigError("naturalness: pyramid missing stage " + std::to_string(id));
    Var padded = detail::padded_pooled(t, pyr.stage(id).features, std::size_t(cfg.embed_dim));
    parts.push_back(linear(t, params["naturalness.proj.weight"], padded,
                           params["naturalness.proj.bias"]));
  }
  Var input = concat_vec(t, parts);
  if (t.value(input).size() != naturalness_input_dim(cfg))
    throw ConfigError("naturalness: head input length mismatch");
  Var hidden = gelu(t, linear(t, params["naturalness.mlp.w1"], input, params["naturalness.mlp.b1"]));
  Var out = linear(t, params["naturalness.mlp.w2"], hidden, params["naturalness.mlp.b2"]);
  return out;  // [1]
}

}  // namespace afine
