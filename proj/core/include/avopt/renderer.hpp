#pragma once

#include <functional>
#include <vector>

#include "avopt/body.hpp"
#include "avopt/field.hpp"
#include "avopt/geometry.hpp"
#include "avopt/image.hpp"
#include "avopt/rng.hpp"

// Layered volume rendering. Each instance is sampled inside its own
// bounding box, samples carry an instance label, the merged list is sorted
// by depth and composited once, yielding pixel color, total opacity, and a
// per-instance opacity decomposition that sums exactly to the total.

namespace avopt {

struct RaySample {
  Vec3 position = Vec3::Zero();
  double depth = 0.0;
  // Integration interval: distance to the next merged sample; the last
  // sample of a ray uses its own instance's interval width / n_per_box.
  double delta = 0.0;
  int label = 0;  // instance index, the one-hot component that is set
  Vec3 color = Vec3::Zero();
  double density = 0.0;
};

struct RenderOutput {
  Vec3 color = Vec3::Zero();
  double alpha = 0.0;
  VecX instance_alpha;  // one entry per instance, sums exactly to alpha
};

// Per-instance stratified sampling (n_per_box samples in each ray/box
// interval), merged and sorted ascending by depth. The caller passes one
// fresh base Rng per ray; jitter streams derive from it per hit, keyed by
// the hit's depth rank so that permuting instance indices permutes the
// samples exactly. Positions and labels are filled; colors and densities
// are left for the caller. Rays missing every box yield an empty list.
std::vector<RaySample> sample_ray(const Ray& ray, const std::vector<Aabb>& boxes, int n_per_box,
                                  const Rng& rng);

// Front-to-back compositing over depth-sorted samples:
//   alpha_i = 1 - exp(-density_i * delta_i)
//   weight_i = alpha_i * prod_{j<i} (1 - alpha_j)
//   color = sum weight_i * color_i, instance_alpha[l] = sum over label l,
//   alpha = sum of the instance accumulators.
// Throws ValidationError on unsorted depths or out-of-range labels and
// NumericalError on non-finite densities or colors. With early_terminate,
// compositing stops once transmittance drops below 1e-4 (use only for
// final renders; objectives need the full sum for exact gradients).
RenderOutput composite(const std::vector<RaySample>& samples, int n_instances,
                       bool early_terminate = false);

struct SampleGrad {
  Vec3 dcolor = Vec3::Zero();
  double ddensity = 0.0;
};

// Reverse-mode derivatives of composite (without early termination) given
// upstream gradients for color, alpha, and each instance alpha. Uses a
// suffix recurrence, so no division by (1 - alpha_i) occurs and saturated
// samples are safe.
void composite_backward(const std::vector<RaySample>& samples, int n_instances,
                        const Vec3& dcolor, double dalpha, const VecX& dinstance_alpha,
                        std::vector<SampleGrad>& grads);

struct RenderConfig {
  int n_per_box = 256;
  double bbox_padding = 0.1;  // meters added around posed vertices
  Vec3 background = Vec3::Zero();
  bool early_terminate = true;
  int threads = 1;
};

struct RenderResult {
  ImageRGB color;
  ImageGray alpha;
  std::vector<ImageGray> instance_alpha;
};

// World-space appearance query for one instance, evaluated at sample
// positions inside that instance's bounding box.
using WorldField = std::function<FieldSample(const Vec3&)>;

// Renders all instances into one image. Background is blended with weight
// (1 - alpha). Per-pixel sampling streams derive from (seed, pixel index),
// so the result is bit-identical for any thread count. Field or skinning
// errors are rethrown with the pixel coordinate attached.
RenderResult render_image(const std::vector<WorldField>& fields, const std::vector<Aabb>& boxes,
                          const CameraModel& camera, const RenderConfig& config, uint64_t seed);

// Canonical-field instances: boxes come from the posed bodies, queries pull
// world points back through inverse skinning.
RenderResult render_image(const std::vector<const CanonicalField*>& fields,
                          const std::vector<PosedBody>& bodies, const CameraModel& camera,
                          const RenderConfig& config, uint64_t seed);

}  // namespace avopt
