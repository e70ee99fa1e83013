#include "avopt/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>

#include "avopt/container.hpp"
#include "avopt/geometry.hpp"
#include "avopt/optimizer.hpp"
#include "avopt/renderer.hpp"
#include "avopt/toml.hpp"

namespace avopt {

namespace {

constexpr double kLayerEps = 1e-7;
constexpr double kDivergenceFactor = 10.0;
constexpr int kDivergencePatience = 100;
// The hard-surface term can make healthy totals negative or tiny, so the
// divergence threshold never keys off a scale below this.
constexpr double kDivergenceScaleFloor = 0.1;
constexpr double kTrainBboxPadding = 0.1;  // matches the final-render default

}  // namespace

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.iterations < 1) throw ValidationError("training config: iterations must be at least 1");
  if (cfg.ray_batch < 1) throw ValidationError("training config: ray_batch must be at least 1");
  if (cfg.n_per_box < 1) throw ValidationError("training config: n_per_box must be at least 1");
  if (cfg.density_probes < 0)
    throw ValidationError("training config: density_probes must be non-negative");
  if (cfg.lr_grid < 0.0 || cfg.lr_decoder < 0.0 || cfg.lr_pose < 0.0)
    throw ValidationError("training config: learning rates must be non-negative");
  if (cfg.w_rgb < 0.0 || cfg.w_alpha < 0.0 || cfg.w_layer < 0.0 || cfg.w_hard < 0.0 ||
      cfg.w_density < 0.0)
    throw ValidationError("training config: loss weights must be non-negative");
  if (!(cfg.huber_delta > 0.0))
    throw ValidationError("training config: huber_delta must be positive");
}

TrainConfig load_train_config(const std::string& toml_path) {
  const toml::Value root = toml::parse_file(toml_path);
  toml::Reader r(root);
  TrainConfig cfg;
  if (const toml::Value* t = r.opt("train")) {
    toml::Reader rt(*t);
    cfg.iterations = static_cast<int>(rt.integer("iterations", cfg.iterations));
    cfg.ray_batch = static_cast<int>(rt.integer("ray_batch", cfg.ray_batch));
    cfg.n_per_box = static_cast<int>(rt.integer("n_per_box", cfg.n_per_box));
    cfg.density_probes = static_cast<int>(rt.integer("density_probes", cfg.density_probes));
    cfg.lr_grid = rt.number("lr_grid", cfg.lr_grid);
    cfg.lr_decoder = rt.number("lr_decoder", cfg.lr_decoder);
    cfg.lr_pose = rt.number("lr_pose", cfg.lr_pose);
    cfg.w_rgb = rt.number("w_rgb", cfg.w_rgb);
    cfg.w_alpha = rt.number("w_alpha", cfg.w_alpha);
    cfg.w_layer = rt.number("w_layer", cfg.w_layer);
    cfg.w_hard = rt.number("w_hard", cfg.w_hard);
    cfg.w_density = rt.number("w_density", cfg.w_density);
    cfg.huber_delta = rt.number("huber_delta", cfg.huber_delta);
    cfg.joint_optimization = rt.boolean("joint_optimization", cfg.joint_optimization);
    rt.finish();
  }
  r.finish();
  validate_train_config(cfg);
  return cfg;
}

double loss_rgb_train(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                      double huber_delta, std::vector<Vec3>* dpred) {
  if (pred.size() != gt.size()) throw ValidationError("loss_rgb_train: batch size mismatch");
  if (!(huber_delta > 0.0)) throw ValidationError("loss_rgb_train: huber_delta must be positive");
  if (dpred) dpred->assign(pred.size(), Vec3::Zero());
  if (pred.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  double sum = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const Vec3 diff = pred[i] - gt[i];
    const double r = diff.norm();
    if (r <= huber_delta) {
      sum += 0.5 * r * r;
      if (dpred) (*dpred)[i] = inv_n * diff;
    } else {
      sum += huber_delta * (r - 0.5 * huber_delta);
      if (dpred) (*dpred)[i] = inv_n * (huber_delta / r) * diff;
    }
  }
  return sum * inv_n;
}

double loss_alpha_train(const VecX& pred, const VecX& gt, VecX* dpred) {
  if (pred.size() != gt.size()) throw ValidationError("loss_alpha_train: batch size mismatch");
  if (pred.size() == 0) {
    if (dpred) dpred->resize(0);
    return 0.0;
  }
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  if (dpred) *dpred = 2.0 * inv_n * (pred - gt);
  return (pred - gt).squaredNorm() * inv_n;
}

double loss_layer(const MatX& inst_alpha, MatX* dalpha) {
  if (dalpha) *dalpha = MatX::Zero(inst_alpha.rows(), inst_alpha.cols());
  if (inst_alpha.size() == 0) return 0.0;
  const double norm = 1.0 / static_cast<double>(inst_alpha.size());
  double sum = 0.0;
  for (Eigen::Index r = 0; r < inst_alpha.rows(); ++r) {
    for (Eigen::Index l = 0; l < inst_alpha.cols(); ++l) {
      const double a = inst_alpha(r, l);
      if (a < -1e-12 || a > 1.0 + 1e-12)
        throw ValidationError("loss_layer: opacity outside [0, 1]");
      const double la = std::log(std::max(a, kLayerEps));
      sum += a * la;
      if (dalpha) (*dalpha)(r, l) = -norm * (la + (a > kLayerEps ? 1.0 : 0.0));
    }
  }
  return -sum * norm;
}

double loss_hard_surface(const VecX& alpha, VecX* dalpha) {
  if (dalpha) *dalpha = VecX::Zero(alpha.size());
  if (alpha.size() == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(alpha.size());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < alpha.size(); ++i) {
    const double ea = std::exp(-alpha(i));
    const double eb = std::exp(alpha(i) - 1.0);
    sum += -std::log(ea + eb);
    if (dalpha) (*dalpha)(i) = inv_n * (ea - eb) / (ea + eb);
  }
  return sum * inv_n;
}

namespace {

double capsule_distance(const Vec3& x, const Vec3& a, const Vec3& b, double radius) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0.0 ? std::clamp((x - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (x - (a + t * ab)).norm() - radius;
}

}  // namespace

std::vector<Vec3> density_probe_points(const SkeletonTemplate& tmpl, const VecX& beta, int count,
                                       Rng& rng, double min_gap) {
  if (count < 0) throw ValidationError("density_probe_points: negative count");
  if (min_gap < 0.0) throw ValidationError("density_probe_points: negative min_gap");
  const Aabb bounds = canonical_bounds(tmpl, beta);
  const Mat3X joints = shape_blend(tmpl, beta).second;
  const std::vector<BoneCapsule> capsules = default_bone_capsules();
  for (const BoneCapsule& c : capsules)
    if (c.parent >= joints.cols() || c.child >= joints.cols())
      throw ValidationError("density_probe_points: template joints do not match the capsule layout");

  const Vec3 ext = bounds.extent();
  std::vector<Vec3> points;
  points.reserve(count);
  int64_t attempts = 0;
  const int64_t max_attempts = 10000LL * (count + 1);
  while (static_cast<int>(points.size()) < count) {
    if (++attempts > max_attempts)
      throw NumericalError("density_probe_points: free-space rejection sampling stalled");
    const double ux = rng.uniform();
    const double uy = rng.uniform();
    const double uz = rng.uniform();
    const Vec3 x = bounds.min + Vec3(ux * ext.x(), uy * ext.y(), uz * ext.z());
    bool free_space = true;
    for (const BoneCapsule& c : capsules) {
      if (capsule_distance(x, joints.col(c.parent), joints.col(c.child), c.radius) <= min_gap) {
        free_space = false;
        break;
      }
    }
    if (free_space) points.push_back(x);
  }
  return points;
}

double loss_density_reg(const CanonicalField& field, const std::vector<Vec3>& points,
                        Eigen::Ref<VecX> param_grad, double grad_scale) {
  if (points.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(points.size());
  double sum = 0.0;
  for (const Vec3& x : points)
    sum += field.query_grad(x, Vec3::Zero(), grad_scale * inv_n, param_grad, nullptr).density;
  return sum * inv_n;
}

double loss_density_reg(const CanonicalField& field, const std::vector<Vec3>& points,
                        VecX* param_grad, double grad_scale) {
  if (param_grad) return loss_density_reg(field, points, Eigen::Ref<VecX>(*param_grad), grad_scale);
  if (points.empty()) return 0.0;
  double sum = 0.0;
  for (const Vec3& x : points) sum += field.query(x).density;
  return sum / static_cast<double>(points.size());
}

void save_loss_history(const std::string& path, const std::vector<LossRow>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,rgb,alpha,layer,hard,density,total\n";
  for (const LossRow& r : history)
    out << r.iteration << ',' << r.rgb << ',' << r.alpha << ',' << r.layer << ',' << r.hard << ','
        << r.density << ',' << r.total << '\n';
  atomic_write_file(path, out.str());
}

namespace {

// Offsets into the flat parameter vector: per-person field parameters
// first, then (in joint mode) per-frame per-person [theta; trans] blocks.
struct ParamLayout {
  Eigen::Index field_size = 0;
  Eigen::Index pose_dims = 0;  // theta_dims + 3, or 0 without joint mode
  int persons = 0;
  int frames = 0;

  Eigen::Index field_offset(int p) const { return p * field_size; }
  Eigen::Index pose_offset(int f, int p) const {
    return persons * field_size + (static_cast<Eigen::Index>(f) * persons + p) * pose_dims;
  }
  Eigen::Index total() const {
    return persons * field_size + static_cast<Eigen::Index>(frames) * persons * pose_dims;
  }
};

ParamLayout make_layout(const Scene& scene, const GroundTruthBundle& data,
                        const TrainConfig& cfg) {
  ParamLayout layout;
  layout.field_size = scene.fields[0].param_count();
  layout.persons = scene.person_count();
  if (cfg.joint_optimization) {
    layout.pose_dims = scene.tmpl.theta_dims() + 3;
    layout.frames = static_cast<int>(data.poses.size());
  }
  return layout;
}

void validate_training_inputs(const Scene& scene, const GroundTruthBundle& data) {
  if (scene.fields.empty()) throw ValidationError("training: scene has no avatars");
  if (data.cameras.empty()) throw ValidationError("training: bundle has no cameras");
  if (data.images.empty()) throw ValidationError("training: bundle has no frames");
  if (data.masks.size() != data.images.size() || data.poses.size() != data.images.size())
    throw ValidationError("training: bundle frame counts disagree");
  const size_t persons = scene.fields.size();
  for (size_t f = 0; f < data.images.size(); ++f) {
    const std::string where = "training: frame " + std::to_string(f);
    if (data.images[f].size() != data.cameras.size() ||
        data.masks[f].size() != data.cameras.size())
      throw ValidationError(where + ": view count does not match cameras");
    if (data.poses[f].poses.size() != persons)
      throw ValidationError(where + ": pose count does not match avatar count");
    for (size_t v = 0; v < data.cameras.size(); ++v) {
      const CameraModel& cam = data.cameras[v];
      const ImageRGB& img = data.images[f][v];
      const ImageGray& mask = data.masks[f][v];
      if (img.width != cam.width || img.height != cam.height)
        throw ValidationError(where + ": image size does not match camera");
      if (mask.width != img.width || mask.height != img.height)
        throw ValidationError(where + ": mask size does not match image");
    }
  }
}

// fg[frame][view]: flat pixel indices (y * width + x) where the mask is set.
std::vector<std::vector<std::vector<int64_t>>> foreground_pixels(const GroundTruthBundle& data) {
  std::vector<std::vector<std::vector<int64_t>>> fg(data.masks.size());
  for (size_t f = 0; f < data.masks.size(); ++f) {
    fg[f].resize(data.masks[f].size());
    for (size_t v = 0; v < data.masks[f].size(); ++v) {
      const ImageGray& mask = data.masks[f][v];
      for (size_t i = 0; i < mask.data.size(); ++i)
        if (mask.data[i] > 0.5) fg[f][v].push_back(static_cast<int64_t>(i));
    }
  }
  return fg;
}

struct RayRecord {
  std::vector<RaySample> samples;
  std::vector<int> vidx;
  std::vector<Vec3> xbar;
  RenderOutput out;
};

struct StepInfo {
  LossRow row;
  int frame = 0;
  int view = 0;
};

// One stochastic training step at the scene's current parameters: draws the
// iteration's (frame, view) and ray batch, renders, and reduces the losses.
// With grad non-null, fills it sized layout.total() plus bone-adjoint
// scratch; only the layout-mapped prefix is meaningful afterwards. Weights
// are already applied to the gradient but not to the per-term row values.
StepInfo evaluate_step(Scene& scene, const std::vector<FramePoses>& poses,
                       const GroundTruthBundle& data, const TrainConfig& cfg,
                       const std::vector<std::vector<std::vector<int64_t>>>& fg,
                       const ParamLayout& layout, uint64_t seed, int iteration, int threads,
                       VecX* grad) {
  const int persons = layout.persons;
  const int n_b = scene.tmpl.n_b;
  const bool joint = cfg.joint_optimization;

  Rng it_rng(mix_seed(seed, hash_tag("train-iter"), static_cast<uint64_t>(iteration)));
  StepInfo info;
  info.frame = static_cast<int>(it_rng.uniform_index(data.images.size()));
  info.view = static_cast<int>(it_rng.uniform_index(data.cameras.size()));
  const CameraModel& cam = data.cameras[info.view];
  const ImageRGB& image = data.images[info.frame][info.view];
  const ImageGray& mask = data.masks[info.frame][info.view];
  const FramePoses& frame_poses = poses[info.frame];

  std::vector<PosedBody> bodies;
  std::vector<Aabb> boxes;
  bodies.reserve(persons);
  boxes.reserve(persons);
  for (int p = 0; p < persons; ++p) {
    bodies.push_back(pose_body(scene.tmpl, frame_poses.poses[p]));
    boxes.push_back(bodies.back().bbox(kTrainBboxPadding));
  }

  // Half the batch is biased to mask foreground (all uniform when empty).
  const std::vector<int64_t>& fg_list = fg[info.frame][info.view];
  const int64_t n_pixels = static_cast<int64_t>(cam.width) * cam.height;
  std::vector<int64_t> pixels(cfg.ray_batch);
  for (int k = 0; k < cfg.ray_batch; ++k) {
    const bool biased = (k % 2 == 1) && !fg_list.empty();
    pixels[k] = biased ? fg_list[it_rng.uniform_index(fg_list.size())]
                       : static_cast<int64_t>(it_rng.uniform_index(n_pixels));
  }

  std::vector<RayRecord> records(cfg.ray_batch);
  const auto forward_item = [&](Eigen::Index k, double&, VecX&) {
    RayRecord& rec = records[k];
    const int px = static_cast<int>(pixels[k] % cam.width);
    const int py = static_cast<int>(pixels[k] / cam.width);
    const Ray ray = pixel_ray(cam, Vec2(px + 0.5, py + 0.5));
    const Rng ray_rng(mix_seed(seed, hash_tag("train-ray"),
                               static_cast<uint64_t>(iteration) * cfg.ray_batch +
                                   static_cast<uint64_t>(k)));
    rec.samples = sample_ray(ray, boxes, cfg.n_per_box, ray_rng);
    rec.vidx.resize(rec.samples.size());
    rec.xbar.resize(rec.samples.size());
    for (size_t i = 0; i < rec.samples.size(); ++i) {
      RaySample& s = rec.samples[i];
      rec.vidx[i] = nearest_vertex(bodies[s.label], s.position);
      rec.xbar[i] = inverse_lbs(bodies[s.label], s.position, rec.vidx[i]);
      const FieldSample fs = scene.fields[s.label].query(rec.xbar[i]);
      s.color = fs.color;
      s.density = fs.density;
    }
    rec.out = composite(rec.samples, persons, false);
  };
  VecX ignore;
  parallel_accumulate(cfg.ray_batch, threads, 0, forward_item, ignore);

  std::vector<Vec3> pred_color(cfg.ray_batch), gt_color(cfg.ray_batch);
  VecX pred_alpha(cfg.ray_batch), gt_alpha(cfg.ray_batch);
  MatX inst_alpha(cfg.ray_batch, persons);
  for (int k = 0; k < cfg.ray_batch; ++k) {
    const int px = static_cast<int>(pixels[k] % cam.width);
    const int py = static_cast<int>(pixels[k] / cam.width);
    pred_color[k] = records[k].out.color;
    pred_alpha(k) = records[k].out.alpha;
    inst_alpha.row(k) = records[k].out.instance_alpha.transpose();
    gt_color[k] = Vec3(image.at(px, py, 0), image.at(px, py, 1), image.at(px, py, 2));
    gt_alpha(k) = mask.at(px, py);
  }

  LossRow& row = info.row;
  row.iteration = iteration;
  std::vector<Vec3> drgb;
  VecX dalpha_mse, dhard;
  MatX dinst;
  row.rgb = loss_rgb_train(pred_color, gt_color, cfg.huber_delta, grad ? &drgb : nullptr);
  row.alpha = loss_alpha_train(pred_alpha, gt_alpha, grad ? &dalpha_mse : nullptr);
  row.layer = loss_layer(inst_alpha, grad ? &dinst : nullptr);
  row.hard = loss_hard_surface(pred_alpha, grad ? &dhard : nullptr);

  if (grad) {
    const Eigen::Index scratch_off = layout.total();
    const Eigen::Index scratch =
        joint ? static_cast<Eigen::Index>(persons) * n_b * 16 : 0;
    const auto backward_item = [&](Eigen::Index k, double&, VecX& g) {
      const RayRecord& rec = records[k];
      if (rec.samples.empty()) return;
      const Vec3 up_color = cfg.w_rgb * drgb[k];
      const double up_alpha = cfg.w_alpha * dalpha_mse(k) + cfg.w_hard * dhard(k);
      const VecX up_inst = cfg.w_layer * dinst.row(k).transpose();
      std::vector<SampleGrad> sgrads;
      composite_backward(rec.samples, persons, up_color, up_alpha, up_inst, sgrads);
      std::vector<std::vector<Mat4>> bones_bar;
      if (joint) bones_bar.assign(persons, std::vector<Mat4>(n_b, Mat4::Zero()));
      for (size_t i = 0; i < rec.samples.size(); ++i) {
        const RaySample& s = rec.samples[i];
        Vec3 dx;
        scene.fields[s.label].query_grad(rec.xbar[i], sgrads[i].dcolor, sgrads[i].ddensity,
                                         g.segment(layout.field_offset(s.label), layout.field_size),
                                         joint ? &dx : nullptr);
        if (joint)
          inverse_lbs_backward(bodies[s.label], rec.vidx[i], rec.xbar[i], dx,
                               bones_bar[s.label]);
      }
      if (joint) {
        for (int p = 0; p < persons; ++p) {
          for (int b = 0; b < n_b; ++b) {
            const Eigen::Map<const VecX> flat(bones_bar[p][b].data(), 16);
            g.segment(scratch_off + (static_cast<Eigen::Index>(p) * n_b + b) * 16, 16) += flat;
          }
        }
      }
    };
    parallel_accumulate(cfg.ray_batch, threads, scratch_off + scratch, backward_item, *grad);

    // Sample positions and integration intervals are treated as fixed, so
    // pose gradients flow only through the canonical warp.
    if (joint) {
      for (int p = 0; p < persons; ++p) {
        std::vector<Mat4> bb(n_b);
        for (int b = 0; b < n_b; ++b)
          bb[b] = Eigen::Map<const Mat4>(
              grad->data() + scratch_off + (static_cast<Eigen::Index>(p) * n_b + b) * 16);
        const PoseGrads pg =
            fk_backward(scene.tmpl, frame_poses.poses[p], bodies[p].bones, bb, Mat3X());
        grad->segment(layout.pose_offset(info.frame, p), layout.pose_dims - 3) = pg.theta;
        grad->segment(layout.pose_offset(info.frame, p) + layout.pose_dims - 3, 3) = pg.trans;
      }
    }
  }

  double density_sum = 0.0;
  for (int p = 0; p < persons; ++p) {
    Rng probe_rng(mix_seed(seed, hash_tag("train-probes"),
                           static_cast<uint64_t>(iteration) * persons + static_cast<uint64_t>(p)));
    const std::vector<Vec3> probes = density_probe_points(
        scene.tmpl, frame_poses.poses[p].beta, cfg.density_probes, probe_rng);
    if (grad)
      density_sum +=
          loss_density_reg(scene.fields[p], probes,
                           grad->segment(layout.field_offset(p), layout.field_size),
                           cfg.w_density / persons);
    else
      density_sum += loss_density_reg(scene.fields[p], probes);
  }
  row.density = density_sum / persons;

  row.total = cfg.w_rgb * row.rgb + cfg.w_alpha * row.alpha + cfg.w_layer * row.layer +
              cfg.w_hard * row.hard + cfg.w_density * row.density;
  if (!std::isfinite(row.total))
    throw NumericalError("training: non-finite loss at iteration " + std::to_string(iteration));
  return info;
}

}  // namespace

TrainResult train_avatars(Scene& scene, const GroundTruthBundle& data, const TrainConfig& cfg,
                          uint64_t seed, int threads) {
  validate_train_config(cfg);
  validate_training_inputs(scene, data);
  const ParamLayout layout = make_layout(scene, data, cfg);
  const int persons = layout.persons;
  const auto fg = foreground_pixels(data);
  const Eigen::Index dec_off = scene.fields[0].decoder_offset();
  const Eigen::Index dec_size = layout.field_size - dec_off;
  const int theta_dims = scene.tmpl.theta_dims();

  std::vector<FramePoses> poses = data.poses;
  std::vector<Adam> grid_opt, decoder_opt, pose_opt;
  for (int p = 0; p < persons; ++p) {
    grid_opt.emplace_back(dec_off, AdamConfig{.lr = cfg.lr_grid});
    decoder_opt.emplace_back(dec_size, AdamConfig{.lr = cfg.lr_decoder});
  }
  if (cfg.joint_optimization)
    for (int i = 0; i < layout.frames * persons; ++i)
      pose_opt.emplace_back(layout.pose_dims, AdamConfig{.lr = cfg.lr_pose});

  TrainResult result;
  result.history.reserve(cfg.iterations);
  double best_total = std::numeric_limits<double>::infinity();
  std::vector<VecX> best_fields;
  std::vector<FramePoses> best_poses;
  double divergence_threshold = std::numeric_limits<double>::infinity();
  int high_streak = 0;
  VecX grad;

  for (int t = 0; t < cfg.iterations; ++t) {
    const StepInfo info = evaluate_step(scene, poses, data, cfg, fg, layout, seed, t, threads, &grad);
    result.history.push_back(info.row);
    const double total = info.row.total;
    if (t == 0)
      divergence_threshold =
          kDivergenceFactor * std::max(std::abs(total), kDivergenceScaleFloor);

    if (total < best_total) {
      best_total = total;
      result.best_iteration = t;
      best_fields.clear();
      for (int p = 0; p < persons; ++p) best_fields.push_back(scene.fields[p].params());
      if (cfg.joint_optimization) best_poses = poses;
    }

    high_streak = total > divergence_threshold ? high_streak + 1 : 0;
    if (high_streak >= kDivergencePatience)
      throw NumericalError("train_avatars: loss stayed above " +
                           std::to_string(kDivergenceFactor) + "x the initial scale for " +
                           std::to_string(kDivergencePatience) +
                           " consecutive iterations (iteration " + std::to_string(t) + ")");

    const double lr_scale = cosine_decay(1.0, 0.0, t, cfg.iterations);
    for (int p = 0; p < persons; ++p) {
      VecX& params = scene.fields[p].params();
      grid_opt[p].step(params.head(dec_off), grad.segment(layout.field_offset(p), dec_off),
                       lr_scale);
      decoder_opt[p].step(params.segment(dec_off, dec_size),
                          grad.segment(layout.field_offset(p) + dec_off, dec_size), lr_scale);
    }
    if (cfg.joint_optimization) {
      for (int p = 0; p < persons; ++p) {
        PoseParams& pose = poses[info.frame].poses[p];
        VecX x(layout.pose_dims);
        x.head(theta_dims) = pose.theta;
        x.tail<3>() = pose.trans;
        pose_opt[info.frame * persons + p].step(
            x, grad.segment(layout.pose_offset(info.frame, p), layout.pose_dims), lr_scale);
        pose.theta = x.head(theta_dims);
        pose.trans = x.tail<3>();
      }
    }
  }

  for (int p = 0; p < persons; ++p) scene.fields[p].params() = best_fields[p];
  if (cfg.joint_optimization) poses = best_poses;
  for (int p = 0; p < persons; ++p) scene.fields[p].validate_finite();
  result.poses = std::move(poses);
  return result;
}

TrainingObjective make_training_objective(Scene& scene, const GroundTruthBundle& data,
                                          const TrainConfig& cfg, uint64_t seed) {
  validate_train_config(cfg);
  validate_training_inputs(scene, data);
  const ParamLayout layout = make_layout(scene, data, cfg);
  const int theta_dims = scene.tmpl.theta_dims();
  const Eigen::Index dec_off = scene.fields[0].decoder_offset();

  TrainingObjective out;
  auto registry = std::make_shared<ParamRegistry>();
  for (int p = 0; p < layout.persons; ++p) {
    registry->add("person" + std::to_string(p) + "/grid", dec_off);
    registry->add("person" + std::to_string(p) + "/decoder", layout.field_size - dec_off);
  }
  if (cfg.joint_optimization)
    for (int f = 0; f < layout.frames; ++f)
      for (int p = 0; p < layout.persons; ++p)
        registry->add("frame" + std::to_string(f) + "/person" + std::to_string(p) + "/pose",
                      layout.pose_dims);
  out.registry = registry;

  out.initial = VecX::Zero(layout.total());
  for (int p = 0; p < layout.persons; ++p)
    out.initial.segment(layout.field_offset(p), layout.field_size) = scene.fields[p].params();
  if (cfg.joint_optimization) {
    for (int f = 0; f < layout.frames; ++f) {
      for (int p = 0; p < layout.persons; ++p) {
        const PoseParams& pose = data.poses[f].poses[p];
        out.initial.segment(layout.pose_offset(f, p), theta_dims) = pose.theta;
        out.initial.segment(layout.pose_offset(f, p) + theta_dims, 3) = pose.trans;
      }
    }
  }

  out.objective.eval = [&scene, &data, cfg, seed, layout, theta_dims,
                        fg = foreground_pixels(data)](const VecX& params, VecX* grad) -> double {
    if (params.size() != layout.total())
      throw ValidationError("training objective: parameter size mismatch");
    for (int p = 0; p < layout.persons; ++p)
      scene.fields[p].params() = params.segment(layout.field_offset(p), layout.field_size);
    std::vector<FramePoses> poses = data.poses;
    if (layout.pose_dims > 0) {
      for (int f = 0; f < layout.frames; ++f) {
        for (int p = 0; p < layout.persons; ++p) {
          poses[f].poses[p].theta = params.segment(layout.pose_offset(f, p), theta_dims);
          poses[f].poses[p].trans = params.segment(layout.pose_offset(f, p) + theta_dims, 3);
        }
      }
    }
    VecX work;
    const StepInfo info =
        evaluate_step(scene, poses, data, cfg, fg, layout, seed, 0, 1, grad ? &work : nullptr);
    if (grad) *grad = work.head(layout.total());
    return info.row.total;
  };
  return out;
}

}  // namespace avopt
