#pragma once

#include <algorithm>
#include <cmath>

#include "afine/autodiff.hpp"
#include "afine/errors.hpp"

namespace afine {

// Ground-truth pairwise label from two quality values on a common scale:
// 1 when y is better, 0.5 on a tie, 0 otherwise.
inline double ranking_label(double q_y, double q_z) {
  if (q_y > q_z) return 1.0;
  if (q_y == q_z) return 0.5;
  return 0.0;
}

// Thurstone Case V preference probability with unit variances. Scores are
// lower-better, so the argument is (d_z - d_y)/sqrt(2): a better (lower) d_y
// yields a probability above one half, matching the label orientation.
inline double preference_probability(double d_y, double d_z) {
  return ops::normal_cdf_value((d_z - d_y) * 0.7071067811865475244);
}

inline Var preference_probability(Tape& t, Var d_y, Var d_z) {
  using namespace ops;
  return normal_cdf(t, axpb(t, sub(t, d_z, d_y), 0.7071067811865475244, 0.0));
}

// Fidelity loss between a ground-truth label p and a predicted probability:
// 1 - sqrt(p*p_hat) - sqrt((1-p)(1-p_hat)), in [0,1], zero iff p == p_hat.
inline double fidelity_loss(double p, double p_hat) {
  if (p < 0.0 || p > 1.0 || p_hat < 0.0 || p_hat > 1.0)
    throw ParameterError("fidelity_loss arguments must lie in [0,1]");
  return 1.0 - std::sqrt(p * p_hat) - std::sqrt((1.0 - p) * (1.0 - p_hat));
}

// Tape form with a constant label. The predicted probability is nudged off
// the exact endpoints before the square roots so the backward pass stays
// finite when the normal CDF saturates.
inline Var fidelity_loss(Tape& t, double p, Var p_hat) {
  if (p < 0.0 || p > 1.0) throw ParameterError("fidelity_loss label must lie in [0,1]");
  constexpr double eps = 1e-12;
  double ph = std::clamp(t.value(p_hat)[0], eps, 1.0 - eps);
  double loss = 1.0 - std::sqrt(p * ph) - std::sqrt((1.0 - p) * (1.0 - ph));
  return t.make(Tensor::scalar(loss), {p_hat}, [p_hat, p, ph](Tape& t, std::size_t id) {
    if (!t.wants_grad(p_hat)) return;
    double g = t.grad(Var{(int)id})[0];
    double d = 0.0;
    if (p > 0.0) d -= 0.5 * std::sqrt(p / ph);
    if (p < 1.0) d += 0.5 * std::sqrt((1.0 - p) / (1.0 - ph));
    t.grad_sink(p_hat)[0] += g * d;
  });
}

}  // namespace afine
