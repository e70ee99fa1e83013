#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "avopt/body.hpp"
#include "avopt/field.hpp"
#include "avopt/grad.hpp"
#include "avopt/rng.hpp"
#include "avopt/scene.hpp"
#include "avopt/synth.hpp"

// Avatar fitting: stochastic descent on the per-person canonical fields
// (and optionally the poses) against calibrated multi-view images and
// masks, under photometric, opacity, layering, and free-space losses.

namespace avopt {

struct TrainConfig {
  int iterations = 2000;
  int ray_batch = 512;   // pixels per iteration, half biased to mask foreground
  int n_per_box = 64;    // ray samples per instance interval
  int density_probes = 128;  // free-space probe points per person per iteration
  double lr_grid = 5e-3;
  double lr_decoder = 5e-4;
  double lr_pose = 1e-3;  // used only with joint_optimization
  double w_rgb = 1.0;
  double w_alpha = 0.1;
  double w_layer = 0.01;
  double w_hard = 0.1;
  double w_density = 1e-2;
  double huber_delta = 0.1;
  bool joint_optimization = false;
};

void validate_train_config(const TrainConfig& cfg);
// Reads the [train] table; unknown keys are rejected.
TrainConfig load_train_config(const std::string& toml_path);

// Huber penalty on the color-difference norm, averaged over the batch.
// dpred, when non-null, is resized and overwritten with d/d(pred).
double loss_rgb_train(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                      double huber_delta, std::vector<Vec3>* dpred = nullptr);

// Mean squared error between rendered and reference opacities.
double loss_alpha_train(const VecX& pred, const VecX& gt, VecX* dpred = nullptr);

// Entropy-style penalty over per-layer opacities (rays x layers): zero
// exactly when every accumulator is 0 or 1, so opacity concentrates in a
// single layer per ray.
double loss_layer(const MatX& inst_alpha, MatX* dalpha = nullptr);

// Mean of -log(exp(-a) + exp(-(1-a))), pushing total opacity toward 0 or 1.
double loss_hard_surface(const VecX& alpha, VecX* dalpha = nullptr);

// Uniform points in the canonical bounds at least min_gap outside the rest
// capsule surface, where the field should decay to empty space.
std::vector<Vec3> density_probe_points(const SkeletonTemplate& tmpl, const VecX& beta, int count,
                                       Rng& rng, double min_gap = 0.05);

// Mean field density over the probes; param_grad (field-sized, or empty to
// skip) accumulates grad_scale times d/d(field params). The Ref form
// targets slices of concatenated multi-person parameter vectors.
double loss_density_reg(const CanonicalField& field, const std::vector<Vec3>& points,
                        Eigen::Ref<VecX> param_grad, double grad_scale = 1.0);
double loss_density_reg(const CanonicalField& field, const std::vector<Vec3>& points,
                        VecX* param_grad = nullptr, double grad_scale = 1.0);

// Raw per-term values; total is the weighted sum.
struct LossRow {
  int iteration = 0;
  double rgb = 0.0;
  double alpha = 0.0;
  double layer = 0.0;
  double hard = 0.0;
  double density = 0.0;
  double total = 0.0;
};

// CSV with header iteration,rgb,alpha,layer,hard,density,total.
void save_loss_history(const std::string& path, const std::vector<LossRow>& history);

struct TrainResult {
  std::vector<LossRow> history;
  int best_iteration = -1;
  std::vector<FramePoses> poses;  // refined in joint mode, else input copies
};

// Fits scene.fields to the bundle in place. Each iteration draws one
// (frame, view) pair and a ray batch, descends the fields with Adam under
// a cosine schedule (grid and decoder at separate rates), and with
// joint_optimization also descends theta and trans per frame. The best
// iterate by total loss is restored before returning. Throws
// NumericalError on non-finite losses or after 100 consecutive iterations
// above 10x the initial loss.
TrainResult train_avatars(Scene& scene, const GroundTruthBundle& data, const TrainConfig& cfg,
                          uint64_t seed, int threads = 1);

// One frozen training step (fixed rays and probes) as a differentiable
// objective over the concatenated field parameters, with blocks
// person<i>/grid and person<i>/decoder (plus frame<f>/person<p>/pose in
// joint mode). Shares the forward/backward used by train_avatars.
// Evaluation writes the supplied parameters into the scene; both references
// must outlive the objective.
struct TrainingObjective {
  std::shared_ptr<ParamRegistry> registry;
  VecX initial;  // current scene parameters in registry order
  DiffObjective objective;
};
TrainingObjective make_training_objective(Scene& scene, const GroundTruthBundle& data,
                                          const TrainConfig& cfg, uint64_t seed);

}  // namespace avopt
