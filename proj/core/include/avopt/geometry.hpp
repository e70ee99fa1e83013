#pragma once

#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avopt/common.hpp"

namespace avopt {

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

  // Composition: (a * b).apply(x) == a.apply(b.apply(x)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return {a.R * b.R, a.R * b.t + a.t};
  }
};

// Pinhole camera. Right-handed world; the camera looks down +z in its own
// frame, x is image-right, y is image-down. Pixel (i,j) samples its center
// at continuous coordinates (i+0.5, j+0.5).
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  RigidTransform world_to_camera;
  int width = 0;
  int height = 0;

  Vec3 center() const { return -(world_to_camera.R.transpose() * world_to_camera.t); }
  Vec3 optical_axis() const { return world_to_camera.R.row(2).transpose(); }
};

// Throws ValidationError unless focals are positive and the rotation is
// orthonormal with determinant +1 (tolerance 1e-9).
void validate_camera(const CameraModel& cam);

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();
  double near = 0.0;
  double far = std::numeric_limits<double>::infinity();

  Vec3 point_at(double t) const { return origin + t * direction; }
};

struct Aabb {
  Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

  static Aabb of(const Vec3& lo, const Vec3& hi) { return {lo, hi}; }

  bool empty() const { return (min.array() > max.array()).any(); }
  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
  double diagonal() const { return empty() ? 0.0 : extent().norm(); }

  void expand(const Vec3& p) {
    min = min.cwiseMin(p);
    max = max.cwiseMax(p);
  }
  void expand(const Aabb& b) {
    min = min.cwiseMin(b.min);
    max = max.cwiseMax(b.max);
  }
  Aabb padded(double margin) const {
    return {min - Vec3::Constant(margin), max + Vec3::Constant(margin)};
  }
  bool contains(const Vec3& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  Aabb intersection(const Aabb& b) const { return {min.cwiseMax(b.min), max.cwiseMin(b.max)}; }
};

// Perspective projection to continuous pixel coordinates. Throws
// NumericalError when the point is at or behind the camera plane.
Vec2 project(const CameraModel& cam, const Vec3& point);

// Ray through a continuous pixel coordinate; inverse of project. Throws
// ValidationError when the pixel lies outside [0,width] x [0,height].
Ray pixel_ray(const CameraModel& cam, const Vec2& pixel);

// Slab intersection clipped to [ray.near, ray.far]; absent on miss.
std::optional<std::pair<double, double>> ray_aabb_intersect(const Ray& ray, const Aabb& box);

// Camera rig JSON: a list of {intrinsics: 9 row-major numbers, rotation: 9
// row-major numbers, translation: 3 numbers, width, height}.
std::vector<CameraModel> load_rig(const std::string& path);
void save_rig(const std::string& path, const std::vector<CameraModel>& cams);

// Camera at `eye` looking toward `target` (world up-hint `up`), focal length
// in pixels, principal point at the image center.
CameraModel make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                               double focal_px, int width, int height);

}  // namespace avopt
