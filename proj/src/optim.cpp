#include "isslab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace isslab::optim {

double poly_lr(double lr0, std::int64_t step, std::int64_t total, double power) {
  if (total <= 0) throw std::invalid_argument("poly schedule needs a positive step count");
  if (step < 0 || step >= total) throw std::out_of_range("poly schedule step outside [0, total)");
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

double sgd_poly_step(ModelParams& params, const ModelGrads& grads, std::int64_t step, std::int64_t total,
                     double lr0, double power, const FreezeMask& mask) {
  const double lr = poly_lr(lr0, step, total, power);
  if (!mask.extractor) {
    for (std::size_t l = 0; l < params.extractor.size(); ++l) {
      params.extractor[l].weight -= lr * grads.extractor[l].weight;
      params.extractor[l].bias -= lr * grads.extractor[l].bias;
    }
  }
  if (!mask.classifier) {
    params.classifier -= lr * grads.classifier;
    if (params.has_bias()) params.classifier_bias -= lr * grads.classifier_bias;
  }
  if (!mask.extractor || !mask.classifier) ++params.version;
  return lr;
}

void adam_step(AdamState& state, Vector& params, const Vector& grads, double lr, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) state = AdamState::zeros(params.size());
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double m_hat = state.m(i) / c1;
    const double v_hat = state.v(i) / c2;
    params(i) -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

}  // namespace isslab::optim
