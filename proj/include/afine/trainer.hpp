#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "afine/calibration.hpp"
#include "afine/data.hpp"
#include "afine/model.hpp"
#include "afine/ranking.hpp"

namespace afine {

// ---- schedule ----

struct TrainConfig {
  int phase = 1;
  double learning_rate = 5e-6;
  double weight_decay = 1e-3;
  int cosine_period_iters = 10000;
  int batch_size = 128;
  int max_iters = 40000;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;

  // Per-phase defaults of the three-phase schedule.
  static TrainConfig for_phase(int phase) {
    TrainConfig c;
    c.phase = phase;
    switch (phase) {
      case 1: c.learning_rate = 5e-6; c.max_iters = 40000; break;
      case 2: c.learning_rate = 5e-4; c.max_iters = 40000; break;
      case 3: c.learning_rate = 1e-3; c.max_iters = 10000; break;
      default: throw ConfigError("phase must be 1, 2, or 3");
    }
    return c;
  }
};

// Phase 1 warms up the naturalness path (backbone + head); phase 2 freezes
// the backbone and trains the fidelity weights; phase 3 trains the scale and
// the two calibrations, five scalars in total.
inline std::function<bool(ParamGroup)> phase_mask(int phase) {
  switch (phase) {
    case 1:
      return [](ParamGroup g) {
        return g == ParamGroup::backbone || g == ParamGroup::naturalness;
      };
    case 2:
      return [](ParamGroup g) { return g == ParamGroup::fidelity; };
    case 3:
      return [](ParamGroup g) {
        return g == ParamGroup::scale || g == ParamGroup::calibration;
      };
  }
  throw ConfigError("phase must be 1, 2, or 3");
}

// Cosine annealing with warm restarts every `period` iterations; iter is
// zero-based within the run.
inline double cosine_lr(double base, int iter, int period) {
  int t = iter % period;
  return 0.5 * base * (1.0 + std::cos(3.14159265358979323846 * double(t) / double(period)));
}

// ---- optimizer ----

// Adam with decoupled weight decay. Moments live per parameter entry and are
// discarded between phases (a fresh optimizer is constructed per phase).
class AdamWOptimizer {
 public:
  explicit AdamWOptimizer(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& params, const std::vector<std::pair<std::size_t, const Tensor*>>& grads,
            double lr, double weight_decay) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    for (const auto& [idx, g] : grads) {
      Tensor& theta = params.entries()[idx].value;
      auto it = moments_.find(idx);
      if (it == moments_.end())
        it = moments_.emplace(idx, std::make_pair(Tensor(theta.shape, 0.0),
                                                  Tensor(theta.shape, 0.0)))
                 .first;
      auto& [m, v] = it->second;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        double gi = (*g)[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * theta[i]);
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<std::size_t, std::pair<Tensor, Tensor>> moments_;
};

// ---- loss graphs ----

// Full ranking loss of one triplet: both pair scores, Thurstone probability,
// fidelity loss. The reference features are shared between the two pairs.
struct TripletLossVars {
  Var loss, d_y, d_z, p_hat;
};

inline TripletLossVars full_triplet_loss(Tape& t, const BackboneConfig& cfg,
                                         const BoundParams& params, const Image& x,
                                         const Image& y, const Image& z, double p) {
  ImageFeatures fx = image_features(t, cfg, params, x);
  ImageFeatures fy = image_features(t, cfg, params, y);
  ImageFeatures fz = image_features(t, cfg, params, z);
  TripletLossVars out;
  out.d_y = pair_score_graph(t, cfg, params, fx, fy).d;
  out.d_z = pair_score_graph(t, cfg, params, fx, fz).d;
  out.p_hat = preference_probability(t, out.d_y, out.d_z);
  out.loss = fidelity_loss(t, p, out.p_hat);
  return out;
}

// Phase 1 objective: the same ranking loss with the pair score replaced by
// the calibrated naturalness of the test image; the reference only groups
// the pair.
inline TripletLossVars naturalness_triplet_loss(Tape& t, const BackboneConfig& cfg,
                                                const BoundParams& params, const Image& y,
                                                const Image& z, double p) {
  ImageFeatures fy = image_features(t, cfg, params, y);
  ImageFeatures fz = image_features(t, cfg, params, z);
  Var g3 = params["calibration.gamma3"];
  Var g4 = params["calibration.gamma4"];
  TripletLossVars out;
  out.d_y = calibrate(t, fy.naturalness_raw, g3, g4);
  out.d_z = calibrate(t, fz.naturalness_raw, g3, g4);
  out.p_hat = preference_probability(t, out.d_y, out.d_z);
  out.loss = fidelity_loss(t, p, out.p_hat);
  return out;
}

// ---- frozen-feature caches ----
// Phases 2 and 3 never differentiate through the backbone, so per-image and
// per-pair quantities that cannot change within the phase are computed once.

// Per-channel similarity vectors of a pair plus its constant naturalness
// contribution; only the softmax weights and (frozen) eta enter afterwards.
struct PairSimilarityCache {
  Tensor lum;        // concatenated per-channel L over fidelity stages
  Tensor str;        // concatenated per-channel S
  double nat_term;   // lambda(x,y) * N_gamma(y), frozen in phase 2
  double fidelity_raw;  // F(x,y) under the cached weights, for phase 3
  double nat_ref_raw, nat_test_raw;
};

inline PairSimilarityCache make_pair_cache(const ModelParameters& model, const Image& ref,
                                           const Image& test) {
  Tape t(false);
  BoundParams bound = BoundParams::bind_frozen(t, model.params);
  ImageFeatures fr = image_features(t, model.config, bound, ref);
  ImageFeatures ft = image_features(t, model.config, bound, test);

  std::vector<Var> lum_parts, str_parts;
  for (int id : fidelity_stages(model.config)) {
    auto stats = detail::tape_stage_statistics(t, fr.pyramid.stage(id).features,
                                               ft.pyramid.stage(id).features);
    auto [L, S] = detail::tape_stage_similarity(t, stats, kFidelityC1, kFidelityC2);
    lum_parts.push_back(L);
    str_parts.push_back(S);
  }
  PairSimilarityCache c;
  c.lum = t.value(ops::concat_vec(t, lum_parts));
  c.str = t.value(ops::concat_vec(t, str_parts));

  PairScoreVars s = pair_score_graph(t, model.config, bound, fr, ft);
  c.nat_term = t.value(s.lambda)[0] * t.value(s.nat_test_cal)[0];
  c.fidelity_raw = t.value(s.fidelity_raw)[0];
  c.nat_ref_raw = t.value(s.nat_ref_raw)[0];
  c.nat_test_raw = t.value(s.nat_test_raw)[0];
  return c;
}

// Phase-2 triplet loss from cached similarity vectors: only the fidelity
// logits are live.
inline TripletLossVars cached_fidelity_triplet_loss(Tape& t, const BoundParams& params,
                                                    const PairSimilarityCache& cy,
                                                    const PairSimilarityCache& cz, double p) {
  using namespace ops;
  Var logits = params["fidelity.logits"];
  std::size_t n = cy.lum.size();
  Var w = softmax_vec(t, logits);
  Var wa = slice_vec(t, w, 0, n);
  Var wb = slice_vec(t, w, n, 2 * n);
  auto pair_d = [&](const PairSimilarityCache& c) {
    Var weighted = add(t, dot(t, wa, t.constant(c.lum)), dot(t, wb, t.constant(c.str)));
    Var f_raw = axpb(t, weighted, -1.0, 1.0);
    Var f_cal = calibrate(t, f_raw, params["calibration.eta3"], params["calibration.eta4"]);
    return add(t, f_cal, t.constant(c.nat_term));
  };
  TripletLossVars out;
  out.d_y = pair_d(cy);
  out.d_z = pair_d(cz);
  out.p_hat = preference_probability(t, out.d_y, out.d_z);
  out.loss = fidelity_loss(t, p, out.p_hat);
  return out;
}

// Phase-3 triplet loss from cached raw scalars: k and the calibrations are
// live, everything upstream is constant.
inline TripletLossVars cached_scalar_triplet_loss(Tape& t, const BoundParams& params,
                                                  const PairSimilarityCache& cy,
                                                  const PairSimilarityCache& cz, double p) {
  using namespace ops;
  Var e3 = params["calibration.eta3"], e4 = params["calibration.eta4"];
  Var g3 = params["calibration.gamma3"], g4 = params["calibration.gamma4"];
  Var k = softplus_(t, params["scale.k_raw"]);
  Var n_ref = calibrate(t, t.constant(cy.nat_ref_raw), g3, g4);  // same reference for both pairs
  auto pair_d = [&](const PairSimilarityCache& c) {
    Var f_cal = calibrate(t, t.constant(c.fidelity_raw), e3, e4);
    Var n_test = calibrate(t, t.constant(c.nat_test_raw), g3, g4);
    Var lam = adaptive_lambda(t, n_ref, n_test, k);
    return add(t, f_cal, mul(t, lam, n_test));
  };
  TripletLossVars out;
  out.d_y = pair_d(cy);
  out.d_z = pair_d(cz);
  out.p_hat = preference_probability(t, out.d_y, out.d_z);
  out.loss = fidelity_loss(t, p, out.p_hat);
  return out;
}

// ---- training driver ----

struct TraceRow {
  int iter = 0;
  int phase = 0;
  double lr = 0.0;
  double loss = 0.0;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<TraceRow> trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double best_val_accuracy = std::numeric_limits<double>::quiet_NaN();
  int best_iter = -1;
};

inline void write_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write trace: " + path);
  f << "iter,phase,lr,loss,val_accuracy\n";
  for (const auto& r : trace) {
    f << r.iter << "," << r.phase << "," << r.lr << "," << r.loss << ",";
    if (!std::isnan(r.val_accuracy)) f << r.val_accuracy;
    f << "\n";
  }
}

namespace detail {

struct PairKey {
  std::string ref, test;
  bool operator==(const PairKey& o) const { return ref == o.ref && test == o.test; }
};

struct PairKeyHash {
  std::size_t operator()(const PairKey& k) const {
    std::size_t h = std::hash<std::string>()(k.ref);
    return h ^ (std::hash<std::string>()(k.test) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2));
  }
};

// Cyclic seeded sampler over triplet indices; reshuffles at every wrap so
// iteration order is a pure function of the seed.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : rng_(seed), order_(n) {
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    pos_ = n;  // force initial shuffle
  }
  std::size_t next() {
    if (pos_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    return order_[pos_++];
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_;
};

}  // namespace detail

// Runs one phase of the schedule. Only the phase's parameter groups change;
// everything else is bit-identical afterwards. When a validation set is
// given, 2AFC accuracy is measured every `checkpoint_every` iterations and
// the best-scoring parameters are restored at the end.
inline TrainResult train_phase(ModelParameters& model, const std::vector<Triplet>& train_data,
                               const std::vector<Triplet>& val_data, const ImageStore& images,
                               const TrainConfig& cfg) {
  if (train_data.empty()) throw DataError("training data stream is empty");
  if (cfg.batch_size < 1 || cfg.max_iters < 1) throw ConfigError("bad batch size or iteration count");
  auto mask = phase_mask(cfg.phase);

  // Frozen-backbone phases: compute per-pair similarity caches once.
  std::unordered_map<detail::PairKey, PairSimilarityCache, detail::PairKeyHash> pair_cache;
  auto cache_of = [&](const std::string& ref, const std::string& test) -> const PairSimilarityCache& {
    return pair_cache.at({ref, test});
  };
  if (cfg.phase >= 2) {
    auto warm = [&](const std::vector<Triplet>& set) {
      for (const auto& tr : set) {
        for (const std::string* id : {&tr.y_id, &tr.z_id}) {
          detail::PairKey key{tr.reference_id, *id};
          if (!pair_cache.count(key))
            pair_cache.emplace(key, make_pair_cache(model, images.get(tr.reference_id),
                                                    images.get(*id)));
        }
      }
    };
    warm(train_data);
    warm(val_data);
  }

  auto triplet_loss = [&](Tape& tape, const BoundParams& bound, const Triplet& tr) -> Var {
    switch (cfg.phase) {
      case 1:
        return naturalness_triplet_loss(tape, model.config, bound, images.get(tr.y_id),
                                        images.get(tr.z_id), tr.p)
            .loss;
      case 2:
        return cached_fidelity_triplet_loss(tape, bound, cache_of(tr.reference_id, tr.y_id),
                                            cache_of(tr.reference_id, tr.z_id), tr.p)
            .loss;
      default:
        return cached_scalar_triplet_loss(tape, bound, cache_of(tr.reference_id, tr.y_id),
                                          cache_of(tr.reference_id, tr.z_id), tr.p)
            .loss;
    }
  };

  // Validation d-scores under the current parameters, all on a value-only tape.
  auto validation_accuracy = [&]() -> double {
    std::size_t judged = 0, correct = 0;
    for (const auto& tr : val_data) {
      if (tr.p == 0.5) continue;
      Tape tape(false);
      BoundParams bound = BoundParams::bind_frozen(tape, model.params);
      TripletLossVars v;
      switch (cfg.phase) {
        case 1:
          v = naturalness_triplet_loss(tape, model.config, bound, images.get(tr.y_id),
                                       images.get(tr.z_id), tr.p);
          break;
        case 2:
          v = cached_fidelity_triplet_loss(tape, bound, cache_of(tr.reference_id, tr.y_id),
                                           cache_of(tr.reference_id, tr.z_id), tr.p);
          break;
        default:
          v = cached_scalar_triplet_loss(tape, bound, cache_of(tr.reference_id, tr.y_id),
                                         cache_of(tr.reference_id, tr.z_id), tr.p);
      }
      double dy = tape.value(v.d_y)[0], dz = tape.value(v.d_z)[0];
      ++judged;
      if ((dy < dz) == (tr.p == 1.0)) ++correct;
    }
    return judged == 0 ? std::numeric_limits<double>::quiet_NaN()
                       : double(correct) / double(judged);
  };

  AdamWOptimizer opt;
  detail::BatchSampler sampler(train_data.size(), cfg.seed);
  TrainResult result;
  result.trace.reserve(std::size_t(cfg.max_iters));
  std::vector<Tensor> best_snapshot;
  double best_acc = -1.0;
  int best_iter = -1;

  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    Tape tape(true);
    BoundParams bound = BoundParams::bind(tape, model.params, mask);
    std::vector<Var> losses;
    losses.reserve(std::size_t(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b)
      losses.push_back(triplet_loss(tape, bound, train_data[sampler.next()]));
    Var loss = ops::axpb(tape, ops::sum_list(tape, losses), 1.0 / double(cfg.batch_size), 0.0);
    double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value))
      throw NumericError("training aborted: non-finite loss at phase " +
                         std::to_string(cfg.phase) + " iteration " + std::to_string(iter));
    tape.backward(loss);

    std::vector<std::pair<std::size_t, const Tensor*>> grads;
    for (std::size_t i = 0; i < model.params.size(); ++i)
      if (mask(model.params.entries()[i].group)) grads.emplace_back(i, &tape.grad(bound.by_index(i)));
    double lr = cosine_lr(cfg.learning_rate, iter - 1, cfg.cosine_period_iters);
    opt.step(model.params, grads, lr, cfg.weight_decay);

    TraceRow row{iter, cfg.phase, lr, loss_value, std::numeric_limits<double>::quiet_NaN()};
    if (!val_data.empty() && (iter % cfg.checkpoint_every == 0 || iter == cfg.max_iters)) {
      row.val_accuracy = validation_accuracy();
      if (!std::isnan(row.val_accuracy) && row.val_accuracy > best_acc) {
        best_acc = row.val_accuracy;
        best_iter = iter;
        best_snapshot.clear();
        for (const auto& e : model.params.entries()) best_snapshot.push_back(e.value);
      }
    }
    result.trace.push_back(row);
    if (iter == 1) result.initial_loss = loss_value;
    result.final_loss = loss_value;
  }

  if (!best_snapshot.empty()) {
    for (std::size_t i = 0; i < model.params.size(); ++i)
      model.params.entries()[i].value = best_snapshot[i];
    result.best_val_accuracy = best_acc;
    result.best_iter = best_iter;
  }
  return result;
}

// ---- gradient verification ----

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

// Compares analytic gradients of the full training loss on one triplet
// against central finite differences over a seeded sample of parameter
// indices. Relative error uses max(|a|, |fd|, 1e-2) as the denominator so
// near-zero gradients are compared absolutely at the finite-difference
// noise scale.
inline GradCheckReport gradient_check(ModelParameters& model, const Triplet& triplet,
                                      const ImageStore& images,
                                      const std::function<bool(ParamGroup)>& selector,
                                      std::size_t samples_per_tensor = 24,
                                      std::uint64_t seed = 0, double step = 1e-3) {
  const Image& x = images.get(triplet.reference_id);
  const Image& y = images.get(triplet.y_id);
  const Image& z = images.get(triplet.z_id);

  Tape tape(true);
  BoundParams bound = BoundParams::bind(tape, model.params, selector);
  Var loss = full_triplet_loss(tape, model.config, bound, x, y, z, triplet.p).loss;
  tape.backward(loss);

  auto loss_at = [&]() {
    Tape t(false);
    BoundParams b = BoundParams::bind_frozen(t, model.params);
    return t.value(full_triplet_loss(t, model.config, b, x, y, z, triplet.p).loss)[0];
  };

  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (std::size_t e = 0; e < model.params.size(); ++e) {
    auto& entry = model.params.entries()[e];
    if (!selector(entry.group)) continue;
    const Tensor& analytic = tape.grad(bound.by_index(e));
    std::size_t n = entry.value.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples_per_tensor);
    }
    for (std::size_t i : idx) {
      double saved = entry.value[i];
      entry.value[i] = saved + step;
      double up = loss_at();
      entry.value[i] = saved - step;
      double down = loss_at();
      entry.value[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double rel = std::fabs(analytic[i] - fd) /
                   std::max({std::fabs(analytic[i]), std::fabs(fd), 1e-2});
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = entry.name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace afine
