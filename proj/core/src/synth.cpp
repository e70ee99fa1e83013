#include "avopt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "avopt/container.hpp"
#include "avopt/rng.hpp"
#include "avopt/toml.hpp"
#include "json.hpp"

namespace avopt {

namespace fs = std::filesystem;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Reference body shape: smooth-min blend temperature, surface falloff width,
// color blend temperature, and interior density.
constexpr size_t kMaxCapsules = 32;
constexpr double kSminTemp = 0.01;
constexpr double kOccWidth = 0.01;
constexpr double kColorTemp = 0.02;
constexpr double kSigmaMax = 80.0;

}  // namespace

ReferenceField::ReferenceField(const SkeletonTemplate& tmpl, const VecX& beta,
                               uint64_t texture_seed) {
  if (beta.size() != kShapeDims) throw ValidationError("ReferenceField: beta size mismatch");
  const Mat3X joints = shape_blend(tmpl, beta).second;
  const std::vector<BoneCapsule> layout = default_bone_capsules();
  if (layout.size() > kMaxCapsules)
    throw ValidationError("ReferenceField: capsule count exceeds the fixed evaluation buffer");
  capsules_.reserve(layout.size());
  stripes_.reserve(layout.size());
  capsule_parent_.reserve(layout.size());
  for (size_t i = 0; i < layout.size(); ++i) {
    Capsule cap;
    cap.a = joints.col(layout[i].parent);
    cap.axis = joints.col(layout[i].child) - cap.a;
    cap.inv_len2 = 1.0 / std::max(cap.axis.squaredNorm(), 1e-12);
    cap.radius = layout[i].radius;
    capsules_.push_back(cap);
    capsule_parent_.push_back(layout[i].parent);

    Rng rng(mix_seed(texture_seed, hash_tag("stripe"), i));
    Vec3 dir(rng.normal(), rng.normal(), rng.normal());
    if (dir.norm() < 1e-6) dir = Vec3::UnitY();
    dir.normalize();
    Stripe st;
    st.wave = dir * (kTwoPi * rng.uniform(20.0, 40.0));
    for (int c = 0; c < 3; ++c) st.base[c] = rng.uniform(0.3, 0.7);
    for (int c = 0; c < 3; ++c) st.amp[c] = rng.uniform(0.1, 0.2);
    for (int c = 0; c < 3; ++c) {
      const double phase = rng.uniform(0.0, kTwoPi);
      st.cos_phase[c] = std::cos(phase);
      st.sin_phase[c] = std::sin(phase);
    }
    stripes_.push_back(st);
  }
  bounds_ = canonical_bounds(tmpl, beta);
}

FieldSample ReferenceField::query(const Vec3& canonical) const {
  return query_grad(canonical, nullptr, nullptr);
}

FieldSample ReferenceField::query_grad(const Vec3& canonical, Vec3* ddensity_dx,
                                       Mat3* dcolor_dx) const {
  if (ddensity_dx != nullptr) ddensity_dx->setZero();
  if (dcolor_dx != nullptr) dcolor_dx->setZero();
  if (!bounds_.contains(canonical)) return FieldSample{};

  Vec3 local[kMaxCapsules];
  const int n = static_cast<int>(capsules_.size());
  for (int i = 0; i < n; ++i) local[i] = canonical;
  return eval(local, nullptr, ddensity_dx, dcolor_dx);
}

std::vector<RigidTransform> ReferenceField::world_to_local(const PosedBody& body) const {
  if (body.tmpl == nullptr || body.bones.bones.size() != static_cast<size_t>(body.tmpl->n_b))
    throw ValidationError("ReferenceField: posed body has no bone transforms");
  std::vector<RigidTransform> to_local;
  to_local.reserve(capsule_parent_.size());
  for (int p : capsule_parent_) {
    if (p < 0 || p >= static_cast<int>(body.bones.bones.size()))
      throw ValidationError("ReferenceField: posed body joint count mismatch");
    const Mat4& B = body.bones.bones[static_cast<size_t>(p)];
    const RigidTransform bone{B.topLeftCorner<3, 3>(), B.topRightCorner<3, 1>()};
    to_local.push_back(bone.inverse());
  }
  return to_local;
}

FieldSample ReferenceField::query_world(const Vec3& world,
                                        const std::vector<RigidTransform>& to_local,
                                        Vec3* ddensity_dx, Mat3* dcolor_dx) const {
  if (to_local.size() != capsules_.size())
    throw ValidationError("ReferenceField: wrong number of capsule frames");
  if (ddensity_dx != nullptr) ddensity_dx->setZero();
  if (dcolor_dx != nullptr) dcolor_dx->setZero();

  Vec3 local[kMaxCapsules];
  Mat3 rot[kMaxCapsules];
  const int n = static_cast<int>(capsules_.size());
  for (int i = 0; i < n; ++i) {
    local[i] = to_local[i].apply(world);
    rot[i] = to_local[i].R;
  }
  return eval(local, rot, ddensity_dx, dcolor_dx);
}

// Evaluates the body at per-capsule local points local[i]; d_local_dx (the
// per-capsule Jacobian d local[i] / d query point, null for identity) chains
// the returned gradients back to the query point.
FieldSample ReferenceField::eval(const Vec3* local, const Mat3* d_local_dx, Vec3* ddensity_dx,
                                 Mat3* dcolor_dx) const {
  FieldSample out;
  const bool want_grad = ddensity_dx != nullptr || dcolor_dx != nullptr;
  const int n = static_cast<int>(capsules_.size());
  double sdf[kMaxCapsules];
  Vec3 dsdf[kMaxCapsules];
  double m = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const Capsule& cap = capsules_[i];
    const Vec3 p = local[i] - cap.a;
    const double h = std::clamp(p.dot(cap.axis) * cap.inv_len2, 0.0, 1.0);
    Vec3 perp = p - h * cap.axis;
    double dist = perp.norm();
    if (dist < 1e-12) {
      perp = Vec3::UnitX();
      dist = 1e-12;
    }
    sdf[i] = dist - cap.radius;
    if (want_grad) {
      dsdf[i] = perp / dist;
      if (d_local_dx != nullptr) dsdf[i] = d_local_dx[i].transpose() * dsdf[i];
    }
    m = std::min(m, sdf[i]);
  }

  // Capsules whose softmin/softmax weight underflows double precision are
  // skipped; kSkipScale temperatures put that cutoff at exp(-50).
  constexpr double kSkipScale = 50.0;
  double lse[kMaxCapsules];
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    lse[i] = sdf[i] - m < kSkipScale * kSminTemp ? std::exp(-(sdf[i] - m) / kSminTemp) : 0.0;
    z += lse[i];
  }
  const double smin = m - kSminTemp * std::log(z);
  out.inside = true;
  // Far from the surface the occupancy sigmoid underflows double noise;
  // density is exactly zero there and the color defaults to flat gray, so
  // gradients (already zeroed) stay consistent.
  if (smin > kSkipScale * kOccWidth) {
    out.color = Vec3::Constant(0.5);
    return out;
  }
  const double sig = sigmoid(-smin / kOccWidth);
  out.density = kSigmaMax * sig;

  // Color: softmin-of-distance blend of per-capsule plane-wave stripes.
  double w[kMaxCapsules];
  Vec3 stripe_color[kMaxCapsules];
  double sin_arg[kMaxCapsules];
  double cos_arg[kMaxCapsules];
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    w[i] = sdf[i] - m < kSkipScale * kColorTemp ? std::exp(-(sdf[i] - m) / kColorTemp) : 0.0;
    wsum += w[i];
  }
  Vec3 color = Vec3::Zero();
  for (int i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    w[i] /= wsum;
    const Stripe& st = stripes_[i];
    const double arg = st.wave.dot(local[i]);
    sin_arg[i] = std::sin(arg);
    cos_arg[i] = std::cos(arg);
    for (int c = 0; c < 3; ++c) {
      const double s = sin_arg[i] * st.cos_phase[c] + cos_arg[i] * st.sin_phase[c];
      stripe_color[i][c] = st.base[c] + st.amp[c] * s;
    }
    color += w[i] * stripe_color[i];
  }
  out.color = color;

  if (!want_grad) return out;

  Vec3 dsmin = Vec3::Zero();
  for (int i = 0; i < n; ++i)
    if (lse[i] != 0.0) dsmin += (lse[i] / z) * dsdf[i];
  if (ddensity_dx != nullptr)
    *ddensity_dx = -(kSigmaMax * sig * (1.0 - sig) / kOccWidth) * dsmin;

  if (dcolor_dx != nullptr) {
    Vec3 gbar = Vec3::Zero();
    for (int i = 0; i < n; ++i)
      if (w[i] != 0.0) gbar += w[i] * dsdf[i];
    for (int i = 0; i < n; ++i) {
      if (w[i] == 0.0) continue;
      const Stripe& st = stripes_[i];
      Vec3 dwave = st.wave;
      if (d_local_dx != nullptr) dwave = d_local_dx[i].transpose() * dwave;
      const Vec3 dw = (w[i] / kColorTemp) * (gbar - dsdf[i]);
      for (int c = 0; c < 3; ++c) {
        const double dc = cos_arg[i] * st.cos_phase[c] - sin_arg[i] * st.sin_phase[c];
        dcolor_dx->row(c) += dw.transpose() * stripe_color[i][c];
        dcolor_dx->row(c) += (w[i] * st.amp[c] * dc) * dwave.transpose();
      }
    }
  }
  return out;
}

WorldField reference_world_field(const ReferenceField& field, const PosedBody& body) {
  const ReferenceField* f = &field;
  return [f, frames = field.world_to_local(body)](const Vec3& x) {
    return f->query_world(x, frames);
  };
}

void validate_spec(const SceneSpec& spec) {
  if (spec.persons < 1) throw ValidationError("scene spec: persons must be >= 1");
  if (spec.frames < 1) throw ValidationError("scene spec: frames must be >= 1");
  if (spec.rig.cameras < 2) throw ValidationError("scene spec: rig needs at least 2 cameras");
  if (spec.rig.radius <= 0.0) throw ValidationError("scene spec: rig radius must be positive");
  if (spec.rig.resolution < 8) throw ValidationError("scene spec: resolution must be >= 8");
  if (spec.rig.focal_px < 0.0) throw ValidationError("scene spec: focal must be >= 0");
  if (spec.motion.spacing < 0.0 || spec.motion.amplitude < 0.0 || spec.motion.root_travel < 0.0)
    throw ValidationError("scene spec: motion parameters must be >= 0");
  if (!spec.people.empty() && static_cast<int>(spec.people.size()) != spec.persons)
    throw ValidationError("scene spec: person table count does not match persons");
  for (size_t p = 0; p < spec.people.size(); ++p) {
    const PersonSpec& ps = spec.people[p];
    const std::string who = "scene spec: person " + std::to_string(p);
    if (ps.beta.size() != kShapeDims) throw ValidationError(who + ": beta size mismatch");
    if (!ps.theta_keys.empty() && static_cast<int>(ps.theta_keys.size()) != spec.frames)
      throw ValidationError(who + ": theta keyframe count does not match frames");
    if (!ps.trans_keys.empty() && static_cast<int>(ps.trans_keys.size()) != spec.frames)
      throw ValidationError(who + ": trans keyframe count does not match frames");
  }
}

SceneSpec load_scene_spec(const std::string& toml_path) {
  const toml::Value root = toml::parse_file(toml_path);
  toml::Reader r(root);
  SceneSpec spec;

  if (const toml::Value* t = r.opt("scene")) {
    toml::Reader rt(*t);
    spec.persons = static_cast<int>(rt.integer("persons", spec.persons));
    spec.frames = static_cast<int>(rt.integer("frames", spec.frames));
    rt.finish();
  }
  if (const toml::Value* t = r.opt("rig")) {
    toml::Reader rt(*t);
    spec.rig.cameras = static_cast<int>(rt.integer("cameras", spec.rig.cameras));
    spec.rig.radius = rt.number("radius", spec.rig.radius);
    spec.rig.height = rt.number("height", spec.rig.height);
    if (const toml::Value* la = rt.opt("look_at")) {
      const std::vector<double> v = la->as_float_array();
      if (v.size() != 3) throw ValidationError(la->path + ": expected 3 numbers");
      spec.rig.look_at = Vec3(v[0], v[1], v[2]);
    }
    spec.rig.resolution = static_cast<int>(rt.integer("resolution", spec.rig.resolution));
    spec.rig.focal_px = rt.number("focal", spec.rig.focal_px);
    rt.finish();
  }
  if (const toml::Value* t = r.opt("motion")) {
    toml::Reader rt(*t);
    spec.motion.spacing = rt.number("spacing", spec.motion.spacing);
    spec.motion.amplitude = rt.number("amplitude", spec.motion.amplitude);
    spec.motion.root_travel = rt.number("root_travel", spec.motion.root_travel);
    rt.finish();
  }
  if (const toml::Value* people = r.opt("person")) {
    if (!people->is_array()) throw ValidationError(people->path + ": expected array of tables");
    for (const toml::Value& entry : people->as_array()) {
      toml::Reader rp(entry);
      PersonSpec ps;
      const int64_t ts = rp.integer("texture_seed", 0);
      if (ts < 0) throw ValidationError(entry.path + ".texture_seed: must be >= 0");
      ps.texture_seed = static_cast<uint64_t>(ts);
      if (const toml::Value* b = rp.opt("beta")) {
        const std::vector<double> v = b->as_float_array();
        if (static_cast<int>(v.size()) > kShapeDims)
          throw ValidationError(b->path + ": at most " + std::to_string(kShapeDims) +
                                " shape coefficients");
        for (size_t k = 0; k < v.size(); ++k) ps.beta[static_cast<Eigen::Index>(k)] = v[k];
      }
      if (const toml::Value* th = rp.opt("theta")) {
        for (const toml::Value& row : th->as_array()) {
          const std::vector<double> v = row.as_float_array();
          ps.theta_keys.push_back(
              Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size())));
        }
      }
      if (const toml::Value* tr = rp.opt("trans")) {
        for (const toml::Value& row : tr->as_array()) {
          const std::vector<double> v = row.as_float_array();
          if (v.size() != 3) throw ValidationError(row.path + ": expected 3 numbers");
          ps.trans_keys.emplace_back(v[0], v[1], v[2]);
        }
      }
      rp.finish();
      spec.people.push_back(std::move(ps));
    }
  }
  r.finish();
  validate_spec(spec);
  return spec;
}

namespace {

// One sinusoidal joint swing. Symmetric swings cross zero; one-sided swings
// stay on the sign the bend prior allows.
struct Swing {
  int comp = 0;
  double amp = 0.0;
  double phase = 0.0;
  double one_sided_sign = 0.0;  // 0 for symmetric

  double eval(double progress) const {
    const double s = std::sin(kTwoPi * progress + phase);
    if (one_sided_sign == 0.0) return amp * s;
    return one_sided_sign * amp * (0.5 + 0.5 * s);
  }
};

std::vector<Swing> draw_swings(const SkeletonTemplate& tmpl, const MotionSpec& motion, Rng& rng) {
  std::vector<Swing> swings;
  // Shoulders about z, hips about x, spine about y; joint numbering follows
  // the default template.
  const int symmetric[] = {3 * 16 + 2, 3 * 17 + 2, 3 * 1 + 0, 3 * 2 + 0, 3 * 3 + 1};
  for (int comp : symmetric) {
    Swing s;
    s.comp = comp;
    s.amp = motion.amplitude * rng.uniform(0.4, 1.0);
    s.phase = rng.uniform(0.0, kTwoPi);
    swings.push_back(s);
  }
  for (size_t k = 0; k < tmpl.prior_joint_indices.size(); ++k) {
    Swing s;
    s.comp = tmpl.prior_joint_indices[k];
    s.amp = motion.amplitude * rng.uniform(0.4, 1.0);
    s.phase = rng.uniform(0.0, kTwoPi);
    s.one_sided_sign = -tmpl.prior_joint_signs[k];
    swings.push_back(s);
  }
  return swings;
}

}  // namespace

SynthScene generate_scene(const SceneSpec& spec, uint64_t seed) {
  validate_spec(spec);
  SynthScene scene;
  scene.seed = seed;
  scene.tmpl = make_default_template();

  std::vector<PersonSpec> people = spec.people;
  if (people.empty()) people.resize(static_cast<size_t>(spec.persons));
  for (int p = 0; p < spec.persons; ++p) {
    const uint64_t tex = people[p].texture_seed != 0
                             ? people[p].texture_seed
                             : mix_seed(seed, hash_tag("texture"), static_cast<uint64_t>(p));
    scene.ref_fields.emplace_back(scene.tmpl, people[p].beta, tex);
  }

  const double focal = spec.rig.focal_px > 0.0 ? spec.rig.focal_px
                                               : static_cast<double>(spec.rig.resolution);
  for (int v = 0; v < spec.rig.cameras; ++v) {
    const double angle = kTwoPi * v / spec.rig.cameras;
    const Vec3 eye(spec.rig.look_at.x() + spec.rig.radius * std::cos(angle), spec.rig.height,
                   spec.rig.look_at.z() + spec.rig.radius * std::sin(angle));
    scene.cameras.push_back(make_lookat_camera(eye, spec.rig.look_at, Vec3::UnitY(), focal,
                                               spec.rig.resolution, spec.rig.resolution));
  }

  // Procedural motion: people stand on a circle around the rig center facing
  // inward, drift toward the center over the clip, and swing a fixed set of
  // joints sinusoidally.
  const double shared_angle = Rng(mix_seed(seed, hash_tag("motion"))).uniform(0.0, kTwoPi);
  std::vector<std::vector<PoseParams>> tracks(static_cast<size_t>(spec.persons));
  for (int p = 0; p < spec.persons; ++p) {
    const PersonSpec& ps = people[p];
    Rng rng(mix_seed(seed, hash_tag("motion"), static_cast<uint64_t>(p)));
    const std::vector<Swing> swings = draw_swings(scene.tmpl, spec.motion, rng);
    const double angle = shared_angle + kTwoPi * p / spec.persons;
    const double yaw = std::atan2(-std::cos(angle), -std::sin(angle));

    for (const VecX& theta : ps.theta_keys)
      if (theta.size() != scene.tmpl.theta_dims())
        throw ValidationError("scene spec: theta keyframe has wrong dimension");

    tracks[p].resize(static_cast<size_t>(spec.frames));
    for (int f = 0; f < spec.frames; ++f) {
      const double progress = spec.frames > 1 ? static_cast<double>(f) / (spec.frames - 1) : 0.0;
      PoseParams pose;
      pose.beta = ps.beta;
      if (!ps.theta_keys.empty()) {
        pose.theta = ps.theta_keys[f];
      } else {
        pose.theta = VecX::Zero(scene.tmpl.theta_dims());
        pose.theta[1] = yaw;
        for (const Swing& s : swings) pose.theta[s.comp] += s.eval(progress);
      }
      if (!ps.trans_keys.empty()) {
        pose.trans = ps.trans_keys[f];
      } else {
        const double r = spec.motion.spacing - spec.motion.root_travel * progress;
        pose.trans = Vec3(spec.rig.look_at.x() + r * std::cos(angle), 0.0,
                          spec.rig.look_at.z() + r * std::sin(angle));
      }
      tracks[p][f] = std::move(pose);
    }
  }

  scene.gt_frames.resize(static_cast<size_t>(spec.frames));
  for (int f = 0; f < spec.frames; ++f) {
    FramePoses& frame = scene.gt_frames[f];
    for (int p = 0; p < spec.persons; ++p) {
      frame.person_ids.push_back(p);
      frame.poses.push_back(tracks[p][f]);
    }
  }
  return scene;
}

GroundTruthBundle render_ground_truth(const SynthScene& scene, const SceneSpec& spec,
                                      int threads) {
  if (static_cast<int>(scene.gt_frames.size()) != spec.frames)
    throw ValidationError("render_ground_truth: scene frame count does not match spec");
  for (const FramePoses& frame : scene.gt_frames)
    if (frame.poses.size() != scene.ref_fields.size())
      throw ValidationError("render_ground_truth: frame person count does not match fields");

  RenderConfig cfg;
  cfg.n_per_box *= 4;
  cfg.background = Vec3::Zero();
  cfg.early_terminate = true;
  cfg.threads = threads;

  const int n_frames = static_cast<int>(scene.gt_frames.size());
  const int n_views = static_cast<int>(scene.cameras.size());
  const int n_persons = static_cast<int>(scene.ref_fields.size());

  GroundTruthBundle bundle;
  bundle.cameras = scene.cameras;
  bundle.poses = scene.gt_frames;
  bundle.images.resize(static_cast<size_t>(n_frames));
  bundle.masks.resize(static_cast<size_t>(n_frames));
  bundle.joints.resize(static_cast<size_t>(n_frames));

  for (int f = 0; f < n_frames; ++f) {
    const FramePoses& frame = scene.gt_frames[f];
    std::vector<PosedBody> bodies;
    bodies.reserve(static_cast<size_t>(n_persons));
    std::vector<WorldField> fields;
    std::vector<Aabb> boxes;
    for (int p = 0; p < n_persons; ++p)
      bodies.push_back(pose_body(scene.tmpl, frame.poses[p]));
    for (int p = 0; p < n_persons; ++p) {
      fields.push_back(reference_world_field(scene.ref_fields[p], bodies[p]));
      boxes.push_back(bodies[p].bbox(cfg.bbox_padding));
      bundle.joints[f].push_back(joints3d(scene.tmpl, frame.poses[p]));
    }
    for (int v = 0; v < n_views; ++v) {
      const uint64_t img_seed =
          mix_seed(scene.seed, hash_tag("gt-render"), static_cast<uint64_t>(f) * n_views + v);
      RenderResult res = render_image(fields, boxes, scene.cameras[v], cfg, img_seed);
      ImageGray mask(res.alpha.width, res.alpha.height);
      for (size_t i = 0; i < mask.data.size(); ++i)
        mask.data[i] = res.alpha.data[i] > 0.5 ? 1.0 : 0.0;
      bundle.images[f].push_back(std::move(res.color));
      bundle.masks[f].push_back(std::move(mask));
    }
  }
  return bundle;
}

void save_bundle(const std::string& dir, const GroundTruthBundle& bundle) {
  const size_t n_frames = bundle.images.size();
  if (bundle.masks.size() != n_frames || bundle.poses.size() != n_frames ||
      bundle.joints.size() != n_frames)
    throw ValidationError("save_bundle: per-frame array sizes disagree");

  fs::create_directories(dir);
  save_rig((fs::path(dir) / "cameras.json").string(), bundle.cameras);

  nlohmann::json gt;
  gt["frames"] = nlohmann::json::array();
  for (size_t f = 0; f < n_frames; ++f) {
    if (bundle.images[f].size() != bundle.cameras.size() ||
        bundle.masks[f].size() != bundle.cameras.size())
      throw ValidationError("save_bundle: image count does not match cameras");
    const fs::path frame_dir = fs::path(dir) / "frames" / std::to_string(f);
    fs::create_directories(frame_dir);
    for (size_t v = 0; v < bundle.images[f].size(); ++v) {
      write_png((frame_dir / ("view_" + std::to_string(v) + ".png")).string(),
                bundle.images[f][v]);
      write_png((frame_dir / ("mask_" + std::to_string(v) + ".png")).string(),
                bundle.masks[f][v]);
    }
    save_poses((frame_dir / "poses.json").string(), bundle.poses[f]);

    nlohmann::json jf;
    jf["persons"] = nlohmann::json::array();
    for (size_t p = 0; p < bundle.joints[f].size(); ++p) {
      nlohmann::json jp;
      jp["person_id"] = bundle.poses[f].person_ids[p];
      nlohmann::json arr = nlohmann::json::array();
      const Mat3X& J = bundle.joints[f][p];
      for (Eigen::Index j = 0; j < J.cols(); ++j)
        arr.push_back({J(0, j), J(1, j), J(2, j)});
      jp["joints"] = std::move(arr);
      jf["persons"].push_back(std::move(jp));
    }
    gt["frames"].push_back(std::move(jf));
  }
  atomic_write_file((fs::path(dir) / "gt_joints.json").string(), gt.dump(2));
}

GroundTruthBundle load_bundle(const std::string& dir, int n_b) {
  GroundTruthBundle bundle;
  bundle.cameras = load_rig((fs::path(dir) / "cameras.json").string());

  const fs::path joints_path = fs::path(dir) / "gt_joints.json";
  std::ifstream in(joints_path);
  if (!in) throw ValidationError("load_bundle: cannot open " + joints_path.string());
  nlohmann::json gt;
  try {
    in >> gt;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_bundle: " + joints_path.string() + ": " + e.what());
  }
  if (!gt.contains("frames") || !gt["frames"].is_array())
    throw ValidationError("load_bundle: gt_joints.json missing frames array");

  const size_t n_frames = gt["frames"].size();
  const size_t n_views = bundle.cameras.size();
  bundle.images.resize(n_frames);
  bundle.masks.resize(n_frames);
  bundle.joints.resize(n_frames);
  for (size_t f = 0; f < n_frames; ++f) {
    const fs::path frame_dir = fs::path(dir) / "frames" / std::to_string(f);
    for (size_t v = 0; v < n_views; ++v) {
      bundle.images[f].push_back(
          read_png_rgb((frame_dir / ("view_" + std::to_string(v) + ".png")).string()));
      bundle.masks[f].push_back(
          read_png_gray((frame_dir / ("mask_" + std::to_string(v) + ".png")).string()));
    }
    bundle.poses.push_back(load_poses((frame_dir / "poses.json").string(), n_b));

    const nlohmann::json& jf = gt["frames"][f];
    if (!jf.contains("persons") || !jf["persons"].is_array())
      throw ValidationError("load_bundle: frame " + std::to_string(f) + " missing persons");
    if (jf["persons"].size() != bundle.poses[f].poses.size())
      throw ValidationError("load_bundle: frame " + std::to_string(f) +
                            " joints/poses person count mismatch");
    for (const nlohmann::json& jp : jf["persons"]) {
      const nlohmann::json& arr = jp.at("joints");
      if (static_cast<int>(arr.size()) != n_b)
        throw ValidationError("load_bundle: joint count does not match template");
      Mat3X J(3, n_b);
      for (int j = 0; j < n_b; ++j)
        for (int c = 0; c < 3; ++c) J(c, j) = arr[j][c].get<double>();
      bundle.joints[f].push_back(std::move(J));
    }
  }
  return bundle;
}

FramePoses perturb_poses(const FramePoses& gt, double angle_sigma, double trans_sigma,
                         uint64_t seed) {
  if (angle_sigma < 0.0 || trans_sigma < 0.0)
    throw ValidationError("perturb_poses: sigmas must be >= 0");
  FramePoses out = gt;
  for (size_t i = 0; i < out.poses.size(); ++i) {
    Rng rng(mix_seed(seed, hash_tag("perturb"), static_cast<uint64_t>(out.person_ids[i])));
    PoseParams& pose = out.poses[i];
    // Zero sigma leaves components bitwise untouched.
    if (angle_sigma != 0.0)
      for (Eigen::Index k = 0; k < pose.theta.size(); ++k)
        pose.theta[k] += rng.normal(0.0, angle_sigma);
    if (trans_sigma != 0.0)
      for (int k = 0; k < 3; ++k) pose.trans[k] += rng.normal(0.0, trans_sigma);
  }
  return out;
}

}  // namespace avopt
