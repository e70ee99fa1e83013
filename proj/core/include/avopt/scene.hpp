#pragma once

#include <string>
#include <vector>

#include "avopt/body.hpp"
#include "avopt/field.hpp"
#include "avopt/geometry.hpp"

namespace avopt {

// One multi-person capture setup on the optimization side: a shared body
// template, one appearance field per person, and the calibrated rig. Poses,
// images, and masks flow separately since they vary per frame and stage.
struct Scene {
  SkeletonTemplate tmpl;
  std::vector<CanonicalField> fields;
  std::vector<CameraModel> cameras;

  int person_count() const { return static_cast<int>(fields.size()); }
};

// Directory layout: scene.json (person count), template.bin, cameras.json,
// person_<i>.field. Files are written atomically.
void save_scene(const std::string& dir, const Scene& scene);
Scene load_scene(const std::string& dir);

}  // namespace avopt
