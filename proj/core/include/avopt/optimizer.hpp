#pragma once

#include <cstdint>

#include "avopt/common.hpp"

namespace avopt {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(Eigen::Index n, AdamConfig cfg);

  // In-place update; lr_scale multiplies the configured learning rate
  // (used for schedules).
  void step(Eigen::Ref<VecX> params, const Eigen::Ref<const VecX>& grad, double lr_scale = 1.0);
  void reset();
  int64_t steps_taken() const { return t_; }

 private:
  AdamConfig cfg_;
  VecX m_;
  VecX v_;
  int64_t t_ = 0;
};

// Cosine schedule from lr0 down to lr_min across total steps (inclusive of
// step = total); constant lr_min afterwards.
double cosine_decay(double lr0, double lr_min, int64_t step, int64_t total);

}  // namespace avopt
