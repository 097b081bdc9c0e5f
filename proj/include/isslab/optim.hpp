#pragma once

#include "isslab/numerics.hpp"
#include "isslab/segmodel.hpp"

#include <cstdint>

namespace isslab::optim {

/// lr0 * (1 - step / total)^power.
double poly_lr(double lr0, std::int64_t step, std::int64_t total, double power);

/// Plain SGD with a poly-decayed rate; frozen parameter groups are left
/// bit-identical.  Returns the rate used.
double sgd_poly_step(ModelParams& params, const ModelGrads& grads, std::int64_t step, std::int64_t total,
                     double lr0, double power, const FreezeMask& mask = {});

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates for one parameter vector.
struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;

  static AdamState zeros(Eigen::Index n) { return {Vector::Zero(n), Vector::Zero(n), 0}; }
};

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, Vector& params, const Vector& grads, double lr, const AdamConfig& cfg = {});

}  // namespace isslab::optim
