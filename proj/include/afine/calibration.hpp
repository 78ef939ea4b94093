#pragma once

#include <cmath>

#include "afine/autodiff.hpp"
#include "afine/errors.hpp"
#include "afine/params.hpp"

namespace afine {

// Four-parameter monotonic logistic with fixed symmetric bounds:
// (p1 - p2) / (1 + exp(-(v - p3)/|p4|)) + p2, p1 = 2, p2 = -2. Output lies
// strictly inside (-2, 2) and is strictly increasing for any nonzero p4.
inline constexpr double kCalibrationUpper = 2.0;
inline constexpr double kCalibrationLower = -2.0;

inline double calibrate(double value, double p3, double p4) {
  if (p4 == 0.0) throw ParameterError("calibration slope parameter must be nonzero");
  double span = kCalibrationUpper - kCalibrationLower;
  return span / (1.0 + std::exp(-(value - p3) / std::fabs(p4))) + kCalibrationLower;
}

inline Var calibrate(Tape& t, Var value, Var p3, Var p4) {
  using namespace ops;
  if (t.value(p4)[0] == 0.0) throw ParameterError("calibration slope parameter must be nonzero");
  Var z = mul(t, sub(t, value, p3), reciprocal(t, abs_(t, p4)));
  Var den = axpb(t, exp_(t, neg(t, z)), 1.0, 1.0);
  double span = kCalibrationUpper - kCalibrationLower;
  return axpb(t, reciprocal(t, den), span, kCalibrationLower);
}

// Adaptive weighting between the fidelity and naturalness terms:
// lambda = exp(k * (n_ref - n_test)) with k >= 0. When the reference is much
// more natural than the test image (n_ref << n_test) the naturalness
// contribution vanishes and the combined score behaves like a standard
// full-reference metric.
inline double adaptive_lambda(double nat_ref, double nat_test, double k) {
  if (k < 0.0) throw ParameterError("adaptive scale k must be nonnegative");
  return std::exp(k * (nat_ref - nat_test));
}

inline Var adaptive_lambda(Tape& t, Var nat_ref, Var nat_test, Var k) {
  using namespace ops;
  return exp_(t, mul(t, k, sub(t, nat_ref, nat_test)));
}

// k is stored as an unconstrained scalar and mapped through softplus; the
// default initialization makes the effective k exactly 1.
inline double k_raw_for(double k) { return std::log(std::expm1(k)); }
inline double effective_scale(double k_raw) { return ops::softplus_value(k_raw); }

inline void init_scale_and_calibration(ParamSet& params) {
  params.add("scale.k_raw", ParamGroup::scale, Tensor::scalar(k_raw_for(1.0)));
  params.add("calibration.eta3", ParamGroup::calibration, Tensor::scalar(0.0));
  params.add("calibration.eta4", ParamGroup::calibration, Tensor::scalar(1.0));
  params.add("calibration.gamma3", ParamGroup::calibration, Tensor::scalar(0.0));
  params.add("calibration.gamma4", ParamGroup::calibration, Tensor::scalar(1.0));
}

}  // namespace afine
