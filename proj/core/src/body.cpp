#include "avopt/body.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "avopt/container.hpp"
#include "avopt/optimizer.hpp"
#include "json.hpp"

namespace avopt {

namespace {

Mat4 trans4(const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.block<3, 1>(0, 3) = t;
  return m;
}

Mat4 local4(const Mat3& R, const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.block<3, 3>(0, 0) = R;
  m.block<3, 1>(0, 3) = t;
  return m;
}

double smootherstep01(double t) {
  const double x = clamp01(t);
  return x * x * x * (x * (6.0 * x - 15.0) + 10.0);
}

}  // namespace

void SkeletonTemplate::finalize() {
  if (n_b <= 0) throw ValidationError("template joint count must be positive");
  if (static_cast<int>(parents.size()) != n_b || parents[0] != -1)
    throw ValidationError("template parents must list n_b entries with root first");
  for (int i = 1; i < n_b; ++i)
    if (parents[i] < 0 || parents[i] >= i)
      throw ValidationError("template parents must be topologically ordered");
  if (rest_joints.cols() != n_b) throw ValidationError("rest_joints size mismatch");
  const int V = vertex_count();
  if (V <= 0) throw ValidationError("template has no vertices");
  if (skinning_weights.rows() != V || skinning_weights.cols() != n_b)
    throw ValidationError("skinning_weights size mismatch");
  if (static_cast<int>(shape_dirs.size()) != kShapeDims ||
      static_cast<int>(joint_shape_dirs.size()) != kShapeDims)
    throw ValidationError("shape basis must have 10 directions");
  for (const Mat3X& d : shape_dirs)
    if (d.cols() != V) throw ValidationError("shape_dirs size mismatch");
  for (const Mat3X& d : joint_shape_dirs)
    if (d.cols() != n_b) throw ValidationError("joint_shape_dirs size mismatch");
  if (prior_joint_indices.empty() || prior_joint_indices.size() != prior_joint_signs.size())
    throw ValidationError("prior joint index set must be non-empty with matching signs");
  for (int idx : prior_joint_indices)
    if (idx < 0 || idx >= theta_dims())
      throw ValidationError("prior joint index out of range");

  skin_rows.assign(V, SkinRow{});
  for (int v = 0; v < V; ++v) {
    double sum = 0.0;
    SkinRow& row = skin_rows[v];
    for (int j = 0; j < n_b; ++j) {
      const double w = skinning_weights(v, j);
      if (w < 0.0) throw ValidationError("negative skinning weight");
      sum += w;
      if (w > 1e-12) {
        if (row.n == 4) throw ValidationError("more than 4 skinning entries in a row");
        row.idx[row.n] = j;
        row.w[row.n] = w;
        ++row.n;
      }
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValidationError("skinning row does not sum to 1");
    if (row.n == 0) throw ValidationError("empty skinning row");
  }
}

namespace {
constexpr double kDefaultBoneRadii[24] = {0,     0.09,  0.09,  0.11,  0.075, 0.075,
                                          0.115, 0.055, 0.055, 0.11,  0.04,  0.04,
                                          0.05,  0.06,  0.06,  0.095, 0.055, 0.055,
                                          0.045, 0.045, 0.038, 0.038, 0.033, 0.033};
}  // namespace

std::vector<BoneCapsule> default_bone_capsules() {
  const SkeletonTemplate t = make_default_template();
  std::vector<BoneCapsule> capsules;
  capsules.reserve(t.n_b - 1);
  for (int c = 1; c < t.n_b; ++c) capsules.push_back({t.parents[c], c, kDefaultBoneRadii[c]});
  return capsules;
}

SkeletonTemplate make_default_template() {
  SkeletonTemplate t;
  t.n_b = 24;
  t.parents = {-1, 0, 0,  0,  1,  2,  3,  4,  5,  6,  7,  8,
               9,  9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

  t.rest_joints.resize(3, t.n_b);
  const double J[24][3] = {
      {0.00, 1.00, 0.00},     // pelvis
      {0.10, 0.95, 0.00},     // left hip
      {-0.10, 0.95, 0.00},    // right hip
      {0.00, 1.10, 0.00},     // spine1
      {0.11, 0.55, 0.00},     // left knee
      {-0.11, 0.55, 0.00},    // right knee
      {0.00, 1.22, 0.00},     // spine2
      {0.12, 0.12, 0.00},     // left ankle
      {-0.12, 0.12, 0.00},    // right ankle
      {0.00, 1.32, 0.00},     // spine3
      {0.13, 0.04, 0.12},     // left foot
      {-0.13, 0.04, 0.12},    // right foot
      {0.00, 1.46, 0.00},     // neck
      {0.08, 1.40, 0.00},     // left collar
      {-0.08, 1.40, 0.00},    // right collar
      {0.00, 1.62, 0.00},     // head
      {0.20, 1.42, 0.00},     // left shoulder
      {-0.20, 1.42, 0.00},    // right shoulder
      {0.46, 1.42, 0.00},     // left elbow
      {-0.46, 1.42, 0.00},    // right elbow
      {0.70, 1.42, 0.00},     // left wrist
      {-0.70, 1.42, 0.00},    // right wrist
      {0.78, 1.42, 0.00},     // left hand
      {-0.78, 1.42, 0.00},    // right hand
  };
  for (int j = 0; j < t.n_b; ++j) t.rest_joints.col(j) = Vec3(J[j][0], J[j][1], J[j][2]);

  const double* radius = kDefaultBoneRadii;

  std::vector<Vec3> verts;
  struct WeightEntry {
    int parent, child;
    double w_child;
  };
  std::vector<WeightEntry> weights;
  verts.reserve(2400);
  weights.reserve(2400);

  // Child weight ramps up over the last 30% of the bone so skin bends at the
  // child joint while the shaft follows the parent frame.
  const auto child_weight = [](double s) { return 0.5 * smootherstep01((s - 0.7) / 0.3); };

  for (int c = 1; c < t.n_b; ++c) {
    const int p = t.parents[c];
    const Vec3 a = t.rest_joints.col(p);
    const Vec3 b = t.rest_joints.col(c);
    const Vec3 axis = b - a;
    const double len = axis.norm();
    const Vec3 za = axis / len;
    const Vec3 ref = std::abs(za.y()) < 0.9 ? Vec3::UnitY() : Vec3::UnitX();
    const Vec3 u = za.cross(ref).normalized();
    const Vec3 v = za.cross(u);
    const double r = radius[c];
    const int n_seg = 10;
    const int n_rings = std::max(2, static_cast<int>(std::lround(len / 0.025)));

    for (int k = 0; k < n_rings; ++k) {
      const double s = (k + 0.5) / n_rings;
      const Vec3 center = a + s * axis;
      const double stagger = (k % 2) ? 0.5 : 0.0;
      for (int m = 0; m < n_seg; ++m) {
        const double phi = 2.0 * M_PI * (m + stagger) / n_seg;
        verts.push_back(center + r * (std::cos(phi) * u + std::sin(phi) * v));
        weights.push_back({p, c, child_weight(s)});
      }
    }
    // Hemispherical caps: one 45-degree ring plus the pole at each end.
    for (int end = 0; end < 2; ++end) {
      const Vec3 j0 = end == 0 ? a : b;
      const Vec3 out = end == 0 ? Vec3(-za) : za;
      const double wc = end == 0 ? 0.0 : 0.5;
      const double c45 = std::sqrt(0.5);
      for (int m = 0; m < n_seg; ++m) {
        const double phi = 2.0 * M_PI * (m + 0.25) / n_seg;
        verts.push_back(j0 + r * (c45 * out + c45 * (std::cos(phi) * u + std::sin(phi) * v)));
        weights.push_back({p, c, wc});
      }
      verts.push_back(j0 + r * out);
      weights.push_back({p, c, wc});
    }
  }

  const int V = static_cast<int>(verts.size());
  t.template_vertices.resize(3, V);
  t.skinning_weights = MatX::Zero(V, t.n_b);
  for (int i = 0; i < V; ++i) {
    t.template_vertices.col(i) = verts[i];
    t.skinning_weights(i, weights[i].child) += weights[i].w_child;
    t.skinning_weights(i, weights[i].parent) += 1.0 - weights[i].w_child;
  }

  // Shape basis: smooth global displacement fields sampled at the surface
  // vertices and at the joints, so surface and skeleton deform consistently.
  const auto bump = [](const Vec3& p, const Vec3& mu, double s, const Vec3& c) -> Vec3 {
    const double g = std::exp(-(p - mu).squaredNorm() / (2.0 * s * s));
    return g * Vec3(c.x() * (p.x() - mu.x()), c.y() * (p.y() - mu.y()), c.z() * (p.z() - mu.z()));
  };
  const auto shape_field = [&bump](int k, const Vec3& p) -> Vec3 {
    switch (k) {
      case 0: return Vec3(0.0, 0.10 * (p.y() - 1.0), 0.0);
      case 1: return Vec3(0.06 * p.x(), 0.0, 0.06 * p.z());
      case 2: return bump(p, Vec3(0, 1.35, 0), 0.30, Vec3(0.06, 0.02, 0.06));
      case 3: return bump(p, Vec3(0, 1.05, 0.05), 0.18, Vec3(0.05, 0.01, 0.08));
      case 4:
        return bump(p, Vec3(0.11, 0.70, 0), 0.22, Vec3(0.05, 0.0, 0.05)) +
               bump(p, Vec3(-0.11, 0.70, 0), 0.22, Vec3(0.05, 0.0, 0.05));
      case 5:
        return bump(p, Vec3(0.45, 1.42, 0), 0.18, Vec3(0.0, 0.04, 0.04)) +
               bump(p, Vec3(-0.45, 1.42, 0), 0.18, Vec3(0.0, 0.04, 0.04));
      case 6: {
        const double g = std::exp(-(p - Vec3(0, 1.42, 0)).squaredNorm() / (2.0 * 0.35 * 0.35));
        return Vec3(0.08 * p.x() * g, 0.0, 0.0);
      }
      case 7: {
        const double mask = sigmoid((0.95 - p.y()) / 0.1);
        return Vec3(0.0, 0.10 * (p.y() - 0.95) * mask, 0.0);
      }
      case 8: return bump(p, Vec3(0, 1.54, 0), 0.12, Vec3(0.05, 0.05, 0.05));
      case 9:
        return bump(p, Vec3(0.13, 0.06, 0.06), 0.10, Vec3(0.02, 0.02, 0.05)) +
               bump(p, Vec3(-0.13, 0.06, 0.06), 0.10, Vec3(0.02, 0.02, 0.05));
      default: return Vec3::Zero();
    }
  };
  t.shape_dirs.assign(kShapeDims, Mat3X::Zero(3, V));
  t.joint_shape_dirs.assign(kShapeDims, Mat3X::Zero(3, t.n_b));
  for (int k = 0; k < kShapeDims; ++k) {
    for (int i = 0; i < V; ++i) t.shape_dirs[k].col(i) = shape_field(k, verts[i]);
    for (int j = 0; j < t.n_b; ++j)
      t.joint_shape_dirs[k].col(j) = shape_field(k, t.rest_joints.col(j));
  }

  // Bend priors on the knee (x) and elbow (y) hinge components; signs chosen
  // so positive sign*theta is the anatomically impossible direction.
  t.prior_joint_indices = {3 * 4 + 0, 3 * 5 + 0, 3 * 18 + 1, 3 * 19 + 1};
  t.prior_joint_signs = {-1.0, -1.0, +1.0, -1.0};

  t.finalize();
  return t;
}

void validate_pose(const PoseParams& pose, int n_b) {
  if (pose.beta.size() != kShapeDims) throw ValidationError("beta must have 10 components");
  if (pose.theta.size() != 3 * n_b)
    throw ValidationError("theta must have 3*n_b components");
  if (!pose.beta.allFinite() || !pose.theta.allFinite() || !pose.trans.allFinite())
    throw ValidationError("pose parameters must be finite");
}

std::pair<Mat3X, Mat3X> shape_blend(const SkeletonTemplate& tmpl, const VecX& beta) {
  if (beta.size() != kShapeDims) throw ValidationError("beta must have 10 components");
  Mat3X verts = tmpl.template_vertices;
  Mat3X joints = tmpl.rest_joints;
  for (int k = 0; k < kShapeDims; ++k) {
    if (beta[k] == 0.0) continue;
    verts += beta[k] * tmpl.shape_dirs[k];
    joints += beta[k] * tmpl.joint_shape_dirs[k];
  }
  return {std::move(verts), std::move(joints)};
}

Mat3 rodrigues(const Vec3& v) {
  const double th2 = v.squaredNorm();
  const double th = std::sqrt(th2);
  double a, b;
  if (th < 1e-8) {
    a = 1.0 - th2 / 6.0;
    b = 0.5 - th2 / 24.0;
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  const Mat3 K = skew(v);
  return Mat3::Identity() + a * K + b * (K * K);
}

std::array<Mat3, 3> rodrigues_jacobian(const Vec3& v) {
  std::array<Mat3, 3> out;
  const double n2 = v.squaredNorm();
  if (std::sqrt(n2) < 1e-4) {
    // Second-order series of d/dv_k [I + [v]x + 0.5 [v]x^2].
    const Mat3 K = skew(v);
    for (int k = 0; k < 3; ++k) {
      const Mat3 Ek = skew(Vec3::Unit(k));
      out[k] = Ek + 0.5 * (Ek * K + K * Ek);
    }
    return out;
  }
  const Mat3 R = rodrigues(v);
  const Mat3 K = skew(v);
  const Mat3 ImR = Mat3::Identity() - R;
  for (int k = 0; k < 3; ++k) {
    const Vec3 col = ImR.col(k);
    out[k] = ((v[k] * K + skew(v.cross(col))) / n2) * R;
  }
  return out;
}

BoneTransforms forward_kinematics(const SkeletonTemplate& tmpl, const PoseParams& pose) {
  return forward_kinematics(tmpl, pose, shape_blend(tmpl, pose.beta).second);
}

BoneTransforms forward_kinematics(const SkeletonTemplate& tmpl, const PoseParams& pose,
                                  const Mat3X& blended_joints) {
  validate_pose(pose, tmpl.n_b);
  BoneTransforms bt;
  bt.locals.resize(tmpl.n_b);
  bt.frames.resize(tmpl.n_b);
  bt.bones.resize(tmpl.n_b);
  for (int i = 0; i < tmpl.n_b; ++i) {
    const Mat3 R = rodrigues(pose.theta.segment<3>(3 * i));
    const Vec3 offset = i == 0 ? Vec3(blended_joints.col(0) + pose.trans)
                               : Vec3(blended_joints.col(i) - blended_joints.col(tmpl.parents[i]));
    bt.locals[i] = local4(R, offset);
    bt.frames[i] = i == 0 ? bt.locals[0] : Mat4(bt.frames[tmpl.parents[i]] * bt.locals[i]);
    bt.bones[i] = bt.frames[i] * trans4(-blended_joints.col(i));
  }
  return bt;
}

Mat3X joints3d(const SkeletonTemplate& tmpl, const PoseParams& pose) {
  const BoneTransforms bt = forward_kinematics(tmpl, pose);
  Mat3X out(3, tmpl.n_b);
  for (int i = 0; i < tmpl.n_b; ++i) out.col(i) = bt.frames[i].block<3, 1>(0, 3);
  return out;
}

namespace {

Mat3X apply_lbs(const SkeletonTemplate& tmpl, const BoneTransforms& bt,
                const Mat3X& rest_vertices) {
  const int V = static_cast<int>(rest_vertices.cols());
  Mat3X out(3, V);
  for (int i = 0; i < V; ++i) {
    const SkeletonTemplate::SkinRow& row = tmpl.skin_rows[i];
    Mat4 M = row.w[0] * bt.bones[row.idx[0]];
    for (int k = 1; k < row.n; ++k) M += row.w[k] * bt.bones[row.idx[k]];
    out.col(i) = M.block<3, 3>(0, 0) * rest_vertices.col(i) + M.block<3, 1>(0, 3);
  }
  return out;
}

}  // namespace

Mat3X deform_vertices(const SkeletonTemplate& tmpl, const PoseParams& pose) {
  auto [verts, joints] = shape_blend(tmpl, pose.beta);
  const BoneTransforms bt = forward_kinematics(tmpl, pose, joints);
  return apply_lbs(tmpl, bt, verts);
}

Aabb instance_bbox(const Mat3X& posed_vertices, double padding) {
  if (posed_vertices.cols() == 0) throw ValidationError("bounding box of empty vertex set");
  Aabb box;
  box.min = posed_vertices.rowwise().minCoeff();
  box.max = posed_vertices.rowwise().maxCoeff();
  return box.padded(padding);
}

NearestVertexIndex::NearestVertexIndex(const Mat3X& points, int brute_force_limit)
    : points_(points) {
  const int n = static_cast<int>(points_.cols());
  if (n == 0) throw ValidationError("nearest-vertex index over empty point set");
  if (n < brute_force_limit) return;

  for (int i = 0; i < n; ++i) bounds_.expand(points_.col(i));
  const Vec3 ext = bounds_.extent().cwiseMax(1e-9);
  const int per_axis = std::max(2, static_cast<int>(std::cbrt(static_cast<double>(n))));
  cell_size_ = ext.maxCoeff() / per_axis;
  for (int a = 0; a < 3; ++a)
    dims_[a] = std::max(1, static_cast<int>(std::ceil(ext[a] / cell_size_)));
  cells_.assign(static_cast<size_t>(dims_[0]) * dims_[1] * dims_[2], {});
  for (int i = 0; i < n; ++i) {
    const Vec3 rel = (points_.col(i) - bounds_.min) / cell_size_;
    const int ix = std::min(dims_[0] - 1, std::max(0, static_cast<int>(rel.x())));
    const int iy = std::min(dims_[1] - 1, std::max(0, static_cast<int>(rel.y())));
    const int iz = std::min(dims_[2] - 1, std::max(0, static_cast<int>(rel.z())));
    cells_[cell_of(ix, iy, iz)].push_back(i);
  }
}

int NearestVertexIndex::query(const Vec3& p) const {
  const int n = static_cast<int>(points_.cols());
  if (cells_.empty()) {
    int best = 0;
    double best_d = (points_.col(0) - p).squaredNorm();
    for (int i = 1; i < n; ++i) {
      const double d = (points_.col(i) - p).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return best;
  }

  const Vec3 rel = (p - bounds_.min) / cell_size_;
  const int cx = std::min(dims_[0] - 1, std::max(0, static_cast<int>(std::floor(rel.x()))));
  const int cy = std::min(dims_[1] - 1, std::max(0, static_cast<int>(std::floor(rel.y()))));
  const int cz = std::min(dims_[2] - 1, std::max(0, static_cast<int>(std::floor(rel.z()))));

  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
  for (int ring = 0; ring <= max_ring; ++ring) {
    for (int dz = -ring; dz <= ring; ++dz) {
      const int iz = cz + dz;
      if (iz < 0 || iz >= dims_[2]) continue;
      for (int dy = -ring; dy <= ring; ++dy) {
        const int iy = cy + dy;
        if (iy < 0 || iy >= dims_[1]) continue;
        for (int dx = -ring; dx <= ring; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          const int ix = cx + dx;
          if (ix < 0 || ix >= dims_[0]) continue;
          const Vec3 lo = bounds_.min + Vec3(ix, iy, iz) * cell_size_;
          const Vec3 hi = lo + Vec3::Constant(cell_size_);
          const Vec3 clamped = p.cwiseMax(lo).cwiseMin(hi);
          if ((clamped - p).squaredNorm() >= best_d) continue;
          for (int i : cells_[cell_of(ix, iy, iz)]) {
            const double d = (points_.col(i) - p).squaredNorm();
            if (d < best_d) {
              best_d = d;
              best = i;
            }
          }
        }
      }
    }
    // Cells at ring r+1 are at least r cell widths away, so stop once that
    // bound already exceeds the best candidate.
    if (best >= 0 && sq(ring * cell_size_) >= best_d) break;
  }
  return best;
}

PosedBody pose_body(const SkeletonTemplate& tmpl, const PoseParams& pose) {
  PosedBody body;
  body.tmpl = &tmpl;
  body.pose = pose;
  auto blended = shape_blend(tmpl, pose.beta);
  body.rest_vertices = std::move(blended.first);
  body.rest_joints = std::move(blended.second);
  body.bones = forward_kinematics(tmpl, pose, body.rest_joints);

  const int V = tmpl.vertex_count();
  body.posed_vertices.resize(3, V);
  body.vertex_skin.resize(V);
  body.vertex_inv_skin.resize(V);
  for (int i = 0; i < V; ++i) {
    const SkeletonTemplate::SkinRow& row = tmpl.skin_rows[i];
    Mat4 M = row.w[0] * body.bones.bones[row.idx[0]];
    for (int k = 1; k < row.n; ++k) M += row.w[k] * body.bones.bones[row.idx[k]];
    const Mat3 A = M.block<3, 3>(0, 0);
    const double det = A.determinant();
    if (std::abs(det) < 1e-12) throw NumericalError("singular skinning matrix");
    const Mat3 Ainv = A.inverse();
    Mat4 Minv = Mat4::Identity();
    Minv.block<3, 3>(0, 0) = Ainv;
    Minv.block<3, 1>(0, 3) = -Ainv * M.block<3, 1>(0, 3);
    body.vertex_skin[i] = M;
    body.vertex_inv_skin[i] = Minv;
    body.posed_vertices.col(i) =
        A * body.rest_vertices.col(i) + M.block<3, 1>(0, 3);
  }
  body.nn = NearestVertexIndex(body.posed_vertices);
  return body;
}

int nearest_vertex(const PosedBody& body, const Vec3& x) { return body.nn.query(x); }

Vec3 inverse_lbs(const PosedBody& body, const Vec3& x, int v_idx) {
  const Mat4& Minv = body.vertex_inv_skin[v_idx];
  return Minv.block<3, 3>(0, 0) * x + Minv.block<3, 1>(0, 3);
}

Vec3 inverse_lbs(const PosedBody& body, const Vec3& x) {
  return inverse_lbs(body, x, nearest_vertex(body, x));
}

void inverse_lbs_backward(const PosedBody& body, int v_idx, const Vec3& xbar,
                          const Vec3& xbar_bar, std::vector<Mat4>& bones_bar) {
  const Mat4& Minv = body.vertex_inv_skin[v_idx];
  // xbar = (M^-1 x)_xyz; dL/dM = -(M^-T [xbar_bar;0]) (xbar,1)^T.
  const Vec3 u = Minv.block<3, 3>(0, 0).transpose() * xbar_bar;
  Eigen::Matrix<double, 3, 4> Mbar;
  Mbar.block<3, 3>(0, 0) = -u * xbar.transpose();
  Mbar.col(3) = -u;
  const SkeletonTemplate::SkinRow& row = body.tmpl->skin_rows[v_idx];
  for (int k = 0; k < row.n; ++k)
    bones_bar[row.idx[k]].block<3, 4>(0, 0) += row.w[k] * Mbar;
}

PoseGrads fk_backward(const SkeletonTemplate& tmpl, const PoseParams& pose,
                      const BoneTransforms& bt, const std::vector<Mat4>& bones_bar,
                      const Mat3X& joints_bar) {
  const int n = tmpl.n_b;
  PoseGrads g;
  g.theta = VecX::Zero(3 * n);

  std::vector<Mat4> A_bar(n, Mat4::Zero());
  Mat3X rj_bar = Mat3X::Zero(3, n);

  // Seed frame adjoints from bone adjoints (B_i = A_i * T(-j_i)) and posed
  // joints (the translation column of A_i).
  for (int i = 0; i < n; ++i) {
    if (!bones_bar.empty()) {
      const Mat4& Bb = bones_bar[i];
      // B_i = A_i T(-j_i); recover the blended joint from the stored
      // transforms: A_i t - B_i t = R_A j_i.
      const Mat3 Ra = bt.frames[i].block<3, 3>(0, 0);
      const Vec3 ji =
          Ra.transpose() * (bt.frames[i].block<3, 1>(0, 3) - bt.bones[i].block<3, 1>(0, 3));
      Mat4 Tt = Mat4::Identity();
      Tt.block<1, 3>(3, 0) = -ji.transpose();
      A_bar[i] += Bb * Tt;
      // T's translation is -j_i, so its adjoint (A_i^T Bb) column feeds the
      // joint gradient with a sign flip.
      rj_bar.col(i) -= Ra.transpose() * Bb.block<3, 1>(0, 3);
    }
    if (joints_bar.size() > 0) A_bar[i].block<3, 1>(0, 3) += joints_bar.col(i);
  }

  for (int i = n - 1; i >= 0; --i) {
    Mat4 L_bar;
    if (i > 0) {
      const int p = tmpl.parents[i];
      A_bar[p] += A_bar[i] * bt.locals[i].transpose();
      L_bar = bt.frames[p].transpose() * A_bar[i];
    } else {
      L_bar = A_bar[0];
    }
    // L_i = [R_i | d_i]; the translation column is independent of R_i.
    const Mat3 R_bar = L_bar.block<3, 3>(0, 0);
    const Vec3 d_bar = L_bar.block<3, 1>(0, 3);
    const auto J = rodrigues_jacobian(pose.theta.segment<3>(3 * i));
    for (int k = 0; k < 3; ++k)
      g.theta[3 * i + k] = (R_bar.array() * J[k].array()).sum();
    if (i == 0) {
      g.trans += d_bar;
      rj_bar.col(0) += d_bar;
    } else {
      rj_bar.col(i) += d_bar;
      rj_bar.col(tmpl.parents[i]) -= d_bar;
    }
  }

  for (int k = 0; k < kShapeDims; ++k)
    g.beta[k] = (tmpl.joint_shape_dirs[k].array() * rj_bar.array()).sum();
  return g;
}

FitResult fit_to_joints(const SkeletonTemplate& tmpl, const Mat3X& target_joints,
                        const PoseParams& init) {
  if (target_joints.cols() != tmpl.n_b || !target_joints.allFinite())
    throw ValidationError("fit targets must be finite with one column per joint");
  validate_pose(init, tmpl.n_b);

  const int n_theta = tmpl.theta_dims();
  const int dim = kShapeDims + n_theta + 3;
  VecX x(dim);
  x << init.beta, init.theta, init.trans;

  const auto unpack = [&](const VecX& v) {
    PoseParams p;
    p.beta = v.head(kShapeDims);
    p.theta = v.segment(kShapeDims, n_theta);
    p.trans = v.tail(3);
    return p;
  };
  const double reg = 1e-3;
  const auto eval = [&](const VecX& v, VecX* grad) {
    const PoseParams p = unpack(v);
    Mat3X jrest = tmpl.rest_joints;
    for (int k = 0; k < kShapeDims; ++k) jrest += p.beta[k] * tmpl.joint_shape_dirs[k];
    const BoneTransforms bt = forward_kinematics(tmpl, p, jrest);
    Mat3X joints(3, tmpl.n_b);
    for (int i = 0; i < tmpl.n_b; ++i) joints.col(i) = bt.frames[i].block<3, 1>(0, 3);
    const Mat3X diff = joints - target_joints;
    const double loss = diff.squaredNorm() + reg * p.theta.squaredNorm();
    if (grad) {
      const PoseGrads pg = fk_backward(tmpl, p, bt, {}, Mat3X(2.0 * diff));
      grad->head(kShapeDims) = pg.beta;
      grad->segment(kShapeDims, n_theta) = pg.theta + 2.0 * reg * p.theta;
      grad->tail(3) = pg.trans;
    }
    return loss;
  };

  // Coarse phase: Adam handles the nonconvex search from far initializations.
  const int max_steps = 1500;
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam adam(dim, cfg);
  VecX grad(dim);
  VecX best_x = x;
  double best_loss = eval(x, nullptr);
  int stall = 0;
  for (int step = 0; step < max_steps; ++step) {
    const double loss = eval(x, &grad);
    if (!is_finite(loss)) throw NumericalError("non-finite loss in joint fitting");
    if (loss < best_loss - 1e-14) {
      best_loss = loss;
      best_x = x;
      stall = 0;
    } else if (++stall >= 50) {
      break;
    }
    adam.step(x, grad, cosine_decay(1.0, 1e-3, step, max_steps));
  }
  x = best_x;

  // Polish phase: damped Gauss-Newton on the joint residuals, with exact
  // Jacobian rows from one adjoint pass per joint coordinate.
  const auto jacobian_row = [&](const PoseParams& p, const BoneTransforms& bt, int joint,
                                int coord) {
    Mat3X seed = Mat3X::Zero(3, tmpl.n_b);
    seed(coord, joint) = 1.0;
    const PoseGrads pg = fk_backward(tmpl, p, bt, {}, seed);
    VecX row(dim);
    row << pg.beta, pg.theta, pg.trans;
    return row;
  };
  double mu = 1e-6;
  double loss = eval(x, nullptr);
  for (int it = 0; it < 100 && mu < 1e10; ++it) {
    const PoseParams p = unpack(x);
    Mat3X jrest = tmpl.rest_joints;
    for (int k = 0; k < kShapeDims; ++k) jrest += p.beta[k] * tmpl.joint_shape_dirs[k];
    const BoneTransforms bt = forward_kinematics(tmpl, p, jrest);

    MatX H = MatX::Zero(dim, dim);
    VecX rhs = VecX::Zero(dim);
    for (int j = 0; j < tmpl.n_b; ++j)
      for (int c = 0; c < 3; ++c) {
        const VecX row = jacobian_row(p, bt, j, c);
        const double r = bt.frames[j](c, 3) - target_joints(c, j);
        H.noalias() += row * row.transpose();
        rhs.noalias() += r * row;
      }
    H.block(kShapeDims, kShapeDims, n_theta, n_theta).diagonal().array() += reg;
    rhs.segment(kShapeDims, n_theta) += reg * p.theta;

    bool accepted = false;
    for (int attempt = 0; attempt < 8 && mu < 1e10; ++attempt) {
      MatX Hd = H;
      Hd.diagonal().array() += mu;
      const VecX delta = Hd.ldlt().solve(-rhs);
      const double trial_loss = eval(x + delta, nullptr);
      if (is_finite(trial_loss) && trial_loss < loss) {
        x += delta;
        loss = trial_loss;
        mu = std::max(mu / 3.0, 1e-12);
        accepted = true;
        if (delta.norm() < 1e-12) it = 100;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted) break;
  }

  FitResult out;
  out.pose = unpack(x);
  const Mat3X joints = joints3d(tmpl, out.pose);
  out.residual_rms = std::sqrt((joints - target_joints).squaredNorm() / tmpl.n_b);
  eval(x, &grad);
  out.converged = grad.norm() / std::sqrt(static_cast<double>(dim)) < 1e-3;
  return out;
}

void save_template(const std::string& path, const SkeletonTemplate& tmpl) {
  const int V = tmpl.vertex_count();
  ContainerWriter w("AVTMPL", 1);
  {
    std::vector<double> parents(tmpl.parents.begin(), tmpl.parents.end());
    w.add_f8("parents", {tmpl.n_b}, parents.data());
  }
  {
    const MatX rj = tmpl.rest_joints.transpose();  // n_b x 3 row-major rows
    std::vector<double> buf(rj.size());
    for (int r = 0; r < rj.rows(); ++r)
      for (int c = 0; c < 3; ++c) buf[r * 3 + c] = rj(r, c);
    w.add_f8("rest_joints", {tmpl.n_b, 3}, buf.data());
  }
  {
    std::vector<double> buf(static_cast<size_t>(V) * 3);
    for (int i = 0; i < V; ++i)
      for (int c = 0; c < 3; ++c) buf[i * 3 + c] = tmpl.template_vertices(c, i);
    w.add_f8("vertices", {V, 3}, buf.data());
  }
  {
    std::vector<double> buf(static_cast<size_t>(V) * tmpl.n_b);
    for (int i = 0; i < V; ++i)
      for (int j = 0; j < tmpl.n_b; ++j) buf[i * tmpl.n_b + j] = tmpl.skinning_weights(i, j);
    w.add_f8("skinning", {V, tmpl.n_b}, buf.data());
  }
  {
    std::vector<double> buf(static_cast<size_t>(kShapeDims) * V * 3);
    size_t o = 0;
    for (int k = 0; k < kShapeDims; ++k)
      for (int i = 0; i < V; ++i)
        for (int c = 0; c < 3; ++c) buf[o++] = tmpl.shape_dirs[k](c, i);
    w.add_f8("shape_dirs", {kShapeDims, V, 3}, buf.data());
  }
  {
    std::vector<double> buf(static_cast<size_t>(kShapeDims) * tmpl.n_b * 3);
    size_t o = 0;
    for (int k = 0; k < kShapeDims; ++k)
      for (int j = 0; j < tmpl.n_b; ++j)
        for (int c = 0; c < 3; ++c) buf[o++] = tmpl.joint_shape_dirs[k](c, j);
    w.add_f8("joint_shape_dirs", {kShapeDims, tmpl.n_b, 3}, buf.data());
  }
  {
    std::vector<double> idx(tmpl.prior_joint_indices.begin(), tmpl.prior_joint_indices.end());
    w.add_f8("prior_indices", {static_cast<int64_t>(idx.size())}, idx.data());
    w.add_f8("prior_signs", {static_cast<int64_t>(tmpl.prior_joint_signs.size())},
             tmpl.prior_joint_signs.data());
  }
  std::ostringstream meta;
  meta << "{\"n_b\":" << tmpl.n_b << ",\"n_vertices\":" << V << "}";
  w.set_meta(meta.str());
  w.write(path);
}

SkeletonTemplate load_template(const std::string& path) {
  ContainerReader r(path, "AVTMPL");
  if (r.version() != 1) throw ValidationError("unsupported template version");
  SkeletonTemplate t;
  const auto parents = r.read_f8("parents");
  t.n_b = static_cast<int>(parents.size());
  t.parents.resize(t.n_b);
  for (int i = 0; i < t.n_b; ++i) t.parents[i] = static_cast<int>(parents[i]);

  const auto rj = r.read_f8("rest_joints");
  t.rest_joints.resize(3, t.n_b);
  for (int j = 0; j < t.n_b; ++j)
    t.rest_joints.col(j) = Vec3(rj[j * 3], rj[j * 3 + 1], rj[j * 3 + 2]);

  const auto vs = r.read_f8("vertices");
  const int V = static_cast<int>(vs.size() / 3);
  t.template_vertices.resize(3, V);
  for (int i = 0; i < V; ++i)
    t.template_vertices.col(i) = Vec3(vs[i * 3], vs[i * 3 + 1], vs[i * 3 + 2]);

  const auto sw = r.read_f8("skinning");
  if (static_cast<int>(sw.size()) != V * t.n_b)
    throw ValidationError("skinning block size mismatch in '" + path + "'");
  t.skinning_weights.resize(V, t.n_b);
  for (int i = 0; i < V; ++i)
    for (int j = 0; j < t.n_b; ++j) t.skinning_weights(i, j) = sw[i * t.n_b + j];

  const auto sd = r.read_f8("shape_dirs");
  if (static_cast<int>(sd.size()) != kShapeDims * V * 3)
    throw ValidationError("shape_dirs block size mismatch in '" + path + "'");
  t.shape_dirs.assign(kShapeDims, Mat3X::Zero(3, V));
  size_t o = 0;
  for (int k = 0; k < kShapeDims; ++k)
    for (int i = 0; i < V; ++i)
      for (int c = 0; c < 3; ++c) t.shape_dirs[k](c, i) = sd[o++];

  const auto jd = r.read_f8("joint_shape_dirs");
  if (static_cast<int>(jd.size()) != kShapeDims * t.n_b * 3)
    throw ValidationError("joint_shape_dirs block size mismatch in '" + path + "'");
  t.joint_shape_dirs.assign(kShapeDims, Mat3X::Zero(3, t.n_b));
  o = 0;
  for (int k = 0; k < kShapeDims; ++k)
    for (int j = 0; j < t.n_b; ++j)
      for (int c = 0; c < 3; ++c) t.joint_shape_dirs[k](c, j) = jd[o++];

  const auto pi = r.read_f8("prior_indices");
  const auto ps = r.read_f8("prior_signs");
  for (double v : pi) t.prior_joint_indices.push_back(static_cast<int>(v));
  t.prior_joint_signs = ps;

  t.finalize();
  return t;
}

void save_poses(const std::string& path, const FramePoses& frame) {
  nlohmann::json doc = nlohmann::json::array();
  for (size_t i = 0; i < frame.poses.size(); ++i) {
    const PoseParams& p = frame.poses[i];
    nlohmann::json j;
    j["person_id"] = i < frame.person_ids.size() ? frame.person_ids[i] : static_cast<int>(i);
    j["beta"] = std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size());
    j["theta"] = std::vector<double>(p.theta.data(), p.theta.data() + p.theta.size());
    j["trans"] = std::vector<double>{p.trans.x(), p.trans.y(), p.trans.z()};
    doc.push_back(j);
  }
  atomic_write_file(path, doc.dump(2) + "\n");
}

FramePoses load_poses(const std::string& path, int n_b) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open poses file '" + path + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("poses file '" + path + "': " + e.what());
  }
  if (!doc.is_array()) throw ValidationError("poses file '" + path + "' must be a list");
  FramePoses out;
  try {
    for (const auto& j : doc) {
      PoseParams p;
      const auto beta = j.at("beta").get<std::vector<double>>();
      const auto theta = j.at("theta").get<std::vector<double>>();
      const auto trans = j.at("trans").get<std::vector<double>>();
      if (static_cast<int>(beta.size()) != kShapeDims ||
          static_cast<int>(theta.size()) != 3 * n_b || trans.size() != 3)
        throw ValidationError("pose entry has wrong dimensions in '" + path + "'");
      p.beta = Eigen::Map<const VecX>(beta.data(), beta.size());
      p.theta = Eigen::Map<const VecX>(theta.data(), theta.size());
      p.trans = Vec3(trans[0], trans[1], trans[2]);
      validate_pose(p, n_b);
      out.person_ids.push_back(j.at("person_id").get<int>());
      out.poses.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("poses file '" + path + "': " + e.what());
  }
  return out;
}

}  // namespace avopt
