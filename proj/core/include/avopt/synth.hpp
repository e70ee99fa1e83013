#pragma once

#include <string>
#include <vector>

#include "avopt/body.hpp"
#include "avopt/field.hpp"
#include "avopt/geometry.hpp"
#include "avopt/image.hpp"
#include "avopt/renderer.hpp"

// Procedural ground-truth factory: analytic per-person appearance fields on
// the capsule body, seeded motion scripts, a circular camera rig, rendered
// images with foreground masks, and controlled pose perturbations standing
// in for an off-the-shelf pose initializer.

namespace avopt {

struct PersonSpec {
  uint64_t texture_seed = 0;  // 0 derives one from the scene seed and index
  VecX beta = VecX::Zero(kShapeDims);
  // Optional explicit motion script (one entry per frame); empty entries
  // are generated procedurally.
  std::vector<VecX> theta_keys;
  std::vector<Vec3> trans_keys;
};

struct RigSpec {
  int cameras = 8;
  double radius = 3.0;
  double height = 1.2;
  Vec3 look_at = Vec3(0.0, 0.9, 0.0);
  int resolution = 256;
  double focal_px = 0.0;  // 0 means equal to resolution
};

struct MotionSpec {
  double spacing = 0.4;       // placement radius around the rig center, meters
  double amplitude = 0.25;    // joint swing across the clip, radians
  double root_travel = 0.15;  // inward root drift across the clip, meters
};

struct SceneSpec {
  int persons = 1;
  int frames = 1;
  RigSpec rig;
  MotionSpec motion;
  std::vector<PersonSpec> people;  // empty, or one entry per person
};

void validate_spec(const SceneSpec& spec);
SceneSpec load_scene_spec(const std::string& toml_path);

// Analytic appearance on a smooth-min capsule body: density falls off
// sigmoidally at the surface, colors are striped per capsule. When posed,
// each capsule rides the rigid bone frame of its parent joint, which maps
// both rest endpoints exactly onto the posed joints, so stripes move with
// the bones and all spatial gradients stay closed-form.
class ReferenceField {
 public:
  ReferenceField(const SkeletonTemplate& tmpl, const VecX& beta, uint64_t texture_seed);

  FieldSample query(const Vec3& canonical) const;
  // Also fills spatial derivatives: row c of dcolor_dx is d color[c] / dx.
  FieldSample query_grad(const Vec3& canonical, Vec3* ddensity_dx, Mat3* dcolor_dx) const;
  const Aabb& bounds() const { return bounds_; }

  // Per-capsule rigid maps from world space into capsule-local rest
  // coordinates under the posed body's bone frames.
  std::vector<RigidTransform> world_to_local(const PosedBody& body) const;
  FieldSample query_world(const Vec3& world, const std::vector<RigidTransform>& to_local,
                          Vec3* ddensity_dx = nullptr, Mat3* dcolor_dx = nullptr) const;

 private:
  struct Capsule {
    Vec3 a = Vec3::Zero();
    Vec3 axis = Vec3::Zero();  // b - a
    double inv_len2 = 0.0;
    double radius = 0.0;
  };
  struct Stripe {
    Vec3 base = Vec3::Zero();
    Vec3 amp = Vec3::Zero();
    Vec3 wave = Vec3::Zero();      // wave vector, rad/m
    Vec3 cos_phase = Vec3::Zero();  // per-channel phase, stored as cos/sin so
    Vec3 sin_phase = Vec3::Zero();  // one sincos per capsule covers 3 channels
  };
  FieldSample eval(const Vec3* local, const Mat3* d_local_dx, Vec3* ddensity_dx,
                   Mat3* dcolor_dx) const;
  std::vector<Capsule> capsules_;
  std::vector<Stripe> stripes_;
  std::vector<int> capsule_parent_;
  Aabb bounds_;
};

// World-space adapter for rendering; captures the posed bone frames, so the
// body may be discarded afterwards.
WorldField reference_world_field(const ReferenceField& field, const PosedBody& body);

struct SynthScene {
  SkeletonTemplate tmpl;
  std::vector<ReferenceField> ref_fields;
  std::vector<CameraModel> cameras;
  std::vector<FramePoses> gt_frames;  // one entry per frame
  uint64_t seed = 0;                  // drives ground-truth render jitter
};

SynthScene generate_scene(const SceneSpec& spec, uint64_t seed);

struct GroundTruthBundle {
  std::vector<CameraModel> cameras;
  std::vector<std::vector<ImageRGB>> images;  // [frame][view]
  std::vector<std::vector<ImageGray>> masks;  // [frame][view], union over persons
  std::vector<FramePoses> poses;              // [frame]
  std::vector<std::vector<Mat3X>> joints;     // [frame][person], 3 x n_b
};

// Renders images at 4x the final-render sample count and thresholds the
// union mask at alpha > 0.5. Deterministic given the scene's seed.
GroundTruthBundle render_ground_truth(const SynthScene& scene, const SceneSpec& spec,
                                      int threads = 1);

// Layout: cameras.json, gt_joints.json, frames/<f>/view_<v>.png,
// frames/<f>/mask_<v>.png, frames/<f>/poses.json.
void save_bundle(const std::string& dir, const GroundTruthBundle& bundle);
GroundTruthBundle load_bundle(const std::string& dir, int n_b);

// I.i.d. Gaussian noise on joint angles and root translation; shape is left
// untouched.
FramePoses perturb_poses(const FramePoses& gt, double angle_sigma, double trans_sigma,
                         uint64_t seed);

}  // namespace avopt
