#include "avopt/optimizer.hpp"

#include <cmath>

namespace avopt {

Adam::Adam(Eigen::Index n, AdamConfig cfg) : cfg_(cfg), m_(VecX::Zero(n)), v_(VecX::Zero(n)) {}

void Adam::step(Eigen::Ref<VecX> params, const Eigen::Ref<const VecX>& grad, double lr_scale) {
  if (params.size() != m_.size() || grad.size() != m_.size())
    throw ValidationError("optimizer state size mismatch");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_.array().matrix() + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.lr * lr_scale;
  params.array() -=
      lr * (m_.array() / bc1) / ((v_.array() / bc2).sqrt() + cfg_.eps);
}

void Adam::reset() {
  m_.setZero();
  v_.setZero();
  t_ = 0;
}

double cosine_decay(double lr0, double lr_min, int64_t step, int64_t total) {
  if (total <= 0 || step >= total) return lr_min;
  if (step < 0) step = 0;
  const double x = static_cast<double>(step) / static_cast<double>(total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(M_PI * x));
}

}  // namespace avopt
