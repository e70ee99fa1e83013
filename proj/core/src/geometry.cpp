#include "avopt/geometry.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace avopt {

void validate_camera(const CameraModel& cam) {
  if (cam.width <= 0 || cam.height <= 0) throw ValidationError("camera resolution must be positive");
  if (cam.intrinsics(0, 0) <= 0.0 || cam.intrinsics(1, 1) <= 0.0)
    throw ValidationError("camera focal lengths must be positive");
  const Mat3& R = cam.world_to_camera.R;
  const double ortho = (R * R.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-9 || std::abs(R.determinant() - 1.0) > 1e-9)
    throw ValidationError("camera rotation is not a proper rotation");
  if (!all_finite(cam.intrinsics) || !all_finite(cam.world_to_camera.t))
    throw ValidationError("camera parameters must be finite");
}

Vec2 project(const CameraModel& cam, const Vec3& point) {
  const Vec3 pc = cam.world_to_camera.apply(point);
  if (pc.z() <= 0.0) throw NumericalError("point at or behind camera plane");
  const Vec3 h = cam.intrinsics * pc;
  return Vec2(h.x() / h.z(), h.y() / h.z());
}

Ray pixel_ray(const CameraModel& cam, const Vec2& pixel) {
  if (pixel.x() < 0.0 || pixel.x() > cam.width || pixel.y() < 0.0 || pixel.y() > cam.height)
    throw ValidationError("pixel outside image bounds");
  const Vec3 dir_cam = cam.intrinsics.inverse() * Vec3(pixel.x(), pixel.y(), 1.0);
  Ray ray;
  ray.origin = cam.center();
  ray.direction = (cam.world_to_camera.R.transpose() * dir_cam).normalized();
  return ray;
}

std::optional<std::pair<double, double>> ray_aabb_intersect(const Ray& ray, const Aabb& box) {
  double t0 = ray.near;
  double t1 = ray.far;
  for (int a = 0; a < 3; ++a) {
    const double d = ray.direction[a];
    if (d == 0.0) {
      if (ray.origin[a] < box.min[a] || ray.origin[a] > box.max[a]) return std::nullopt;
      continue;
    }
    const double inv = 1.0 / d;
    double ta = (box.min[a] - ray.origin[a]) * inv;
    double tb = (box.max[a] - ray.origin[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  return std::make_pair(t0, t1);
}

namespace {

using nlohmann::json;

json row_major(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

Mat3 mat_from(const json& a, const char* what) {
  if (!a.is_array() || a.size() != 9)
    throw ValidationError(std::string(what) + " must hold 9 numbers");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = a[3 * r + c].get<double>();
  return m;
}

}  // namespace

std::vector<CameraModel> load_rig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open camera rig '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ValidationError("camera rig '" + path + "': " + e.what());
  }
  if (!doc.is_array() || doc.empty())
    throw ValidationError("camera rig '" + path + "' must be a non-empty list");
  std::vector<CameraModel> cams;
  cams.reserve(doc.size());
  try {
    for (const json& j : doc) {
      CameraModel cam;
      cam.intrinsics = mat_from(j.at("intrinsics"), "intrinsics");
      cam.world_to_camera.R = mat_from(j.at("rotation"), "rotation");
      const json& t = j.at("translation");
      if (!t.is_array() || t.size() != 3)
        throw ValidationError("translation must hold 3 numbers");
      cam.world_to_camera.t = Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
      cam.width = j.at("width").get<int>();
      cam.height = j.at("height").get<int>();
      validate_camera(cam);
      cams.push_back(cam);
    }
  } catch (const json::exception& e) {
    throw ValidationError("camera rig '" + path + "': " + e.what());
  }
  return cams;
}

void save_rig(const std::string& path, const std::vector<CameraModel>& cams) {
  json doc = json::array();
  for (const CameraModel& cam : cams) {
    json j;
    j["intrinsics"] = row_major(cam.intrinsics);
    j["rotation"] = row_major(cam.world_to_camera.R);
    j["translation"] = {cam.world_to_camera.t.x(), cam.world_to_camera.t.y(),
                        cam.world_to_camera.t.z()};
    j["width"] = cam.width;
    j["height"] = cam.height;
    doc.push_back(j);
  }
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write camera rig '" + path + "'");
  out << doc.dump(2) << "\n";
}

CameraModel make_lookat_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                               double focal_px, int width, int height) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) throw ValidationError("look-at direction parallel to up vector");
  x.normalize();
  const Vec3 y = z.cross(x);
  CameraModel cam;
  cam.world_to_camera.R.row(0) = x.transpose();
  cam.world_to_camera.R.row(1) = y.transpose();
  cam.world_to_camera.R.row(2) = z.transpose();
  cam.world_to_camera.t = -(cam.world_to_camera.R * eye);
  cam.intrinsics = Mat3::Identity();
  cam.intrinsics(0, 0) = focal_px;
  cam.intrinsics(1, 1) = focal_px;
  cam.intrinsics(0, 2) = width / 2.0;
  cam.intrinsics(1, 2) = height / 2.0;
  cam.width = width;
  cam.height = height;
  validate_camera(cam);
  return cam;
}

}  // namespace avopt
