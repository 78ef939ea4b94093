#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "afine/autodiff.hpp"
#include "afine/backbone.hpp"
#include "afine/errors.hpp"
#include "afine/params.hpp"

namespace afine {

// Small stabilizers in the luminance/structure ratios, sized for unit-scale
// activations.
inline constexpr double kFidelityC1 = 1e-6;
inline constexpr double kFidelityC2 = 1e-6;

inline double luminance_similarity(double mean_x, double mean_y, double c1) {
  return (2.0 * mean_x * mean_y + c1) / (mean_x * mean_x + mean_y * mean_y + c1);
}

inline double structure_similarity(double var_x, double var_y, double cov_xy, double c2) {
  return (2.0 * cov_xy + c2) / (var_x + var_y + c2);
}

// Pyramid stages that feed the fidelity sum: the raw image plus the
// configured backbone stages.
inline std::vector<int> fidelity_stages(const BackboneConfig& cfg) {
  std::vector<int> ids{0};
  ids.insert(ids.end(), cfg.fidelity_stage_ids.begin(), cfg.fidelity_stage_ids.end());
  return ids;
}

inline std::size_t fidelity_channel_total(const BackboneConfig& cfg) {
  std::size_t n = 0;
  for (int id : fidelity_stages(cfg)) n += std::size_t(cfg.stage_channels(id));
  return n;
}

// One luminance weight and one structure weight per (stage, channel); a
// single softmax over the concatenated logits keeps every weight positive
// and the total exactly one during gradient-based training.
inline std::size_t fidelity_logit_count(const BackboneConfig& cfg) {
  return 2 * fidelity_channel_total(cfg);
}

inline void init_fidelity_params(const BackboneConfig& cfg, ParamSet& params) {
  params.add("fidelity.logits", ParamGroup::fidelity,
             Tensor({fidelity_logit_count(cfg)}, 0.0));
}

// Effective (alpha, beta) weights from logits: alphas first, betas second,
// in stage-major channel order.
inline std::vector<double> effective_fidelity_weights(const Tensor& logits) {
  double mx = logits[0];
  for (double v : logits.data) mx = std::max(mx, v);
  std::vector<double> w(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(logits[i] - mx);
    z += w[i];
  }
  for (double& v : w) v /= z;
  return w;
}

namespace detail {

struct StagePairStats {
  Var mean_x, mean_y, var_x, var_y, cov_xy;  // each [C]
};

inline StagePairStats tape_stage_statistics(Tape& t, Var x, Var y) {
  using namespace ops;
  if (!t.value(x).same_shape(t.value(y)))
    throw DimensionError("fidelity: pyramid stage shape mismatch");
  StagePairStats s;
  s.mean_x = spatial_mean(t, x);
  s.mean_y = spatial_mean(t, y);
  Var dx = sub_channel(t, x, s.mean_x);
  Var dy = sub_channel(t, y, s.mean_y);
  s.var_x = spatial_mean(t, mul(t, dx, dx));
  s.var_y = spatial_mean(t, mul(t, dy, dy));
  s.cov_xy = spatial_mean(t, mul(t, dx, dy));
  return s;
}

// Per-channel L and S vectors for one stage pair.
inline std::pair<Var, Var> tape_stage_similarity(Tape& t, const StagePairStats& s, double c1,
                                                 double c2) {
  using namespace ops;
  Var lum_num = axpb(t, mul(t, s.mean_x, s.mean_y), 2.0, c1);
  Var lum_den = axpb(t, add(t, mul(t, s.mean_x, s.mean_x), mul(t, s.mean_y, s.mean_y)), 1.0, c1);
  Var L = mul(t, lum_num, reciprocal(t, lum_den));
  Var str_num = axpb(t, s.cov_xy, 2.0, c2);
  Var str_den = axpb(t, add(t, s.var_x, s.var_y), 1.0, c2);
  Var S = mul(t, str_num, reciprocal(t, str_den));
  return {L, S};
}

}  // namespace detail

// DISTS-like fidelity: 1 - sum_ij alpha_ij L_ij + beta_ij S_ij over the raw
// image and the configured feature stages. Symmetric in (x, y); zero for
// identical pyramids.
inline Var fidelity_score(Tape& t, const FeaturePyramid& pyr_x, const FeaturePyramid& pyr_y,
                          const BackboneConfig& cfg, Var logits, double c1 = kFidelityC1,
                          double c2 = kFidelityC2) {
  using namespace ops;
  std::vector<Var> lum_parts, str_parts;
  for (int id : fidelity_stages(cfg)) {
    auto stats = detail::tape_stage_statistics(t, pyr_x.stage(id).features,
                                               pyr_y.stage(id).features);
    auto [L, S] = detail::tape_stage_similarity(t, stats, c1, c2);
    lum_parts.push_back(L);
    str_parts.push_back(S);
  }
  Var L_all = concat_vec(t, lum_parts);
  Var S_all = concat_vec(t, str_parts);
  std::size_t n = t.value(L_all).size();
  if (t.value(logits).size() != 2 * n)
    throw DimensionError("fidelity: logit count does not match pyramid channels");
  Var w = softmax_vec(t, logits);
  Var w_alpha = slice_vec(t, w, 0, n);
  Var w_beta = slice_vec(t, w, n, 2 * n);
  Var weighted = add(t, dot(t, w_alpha, L_all), dot(t, w_beta, S_all));
  return axpb(t, weighted, -1.0, 1.0);
}

}  // namespace afine
