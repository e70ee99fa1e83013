#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "avopt/common.hpp"
#include "avopt/geometry.hpp"

namespace avopt {

constexpr int kShapeDims = 10;

struct PoseParams {
  VecX beta = VecX::Zero(kShapeDims);
  VecX theta;  // 3 * n_b axis-angle components
  Vec3 trans = Vec3::Zero();
};

// Simplified articulated body standing in for a learned parametric model:
// capsule surface per bone, linear shape basis, axis-angle joints.
struct SkeletonTemplate {
  int n_b = 0;
  std::vector<int> parents;  // parents[0] == -1
  Mat3X rest_joints;         // 3 x n_b
  Mat3X template_vertices;   // 3 x V
  MatX skinning_weights;     // V x n_b, rows sum to 1
  std::vector<Mat3X> shape_dirs;        // kShapeDims entries, each 3 x V
  std::vector<Mat3X> joint_shape_dirs;  // kShapeDims entries, each 3 x n_b
  std::vector<int> prior_joint_indices;   // theta components with a bend prior
  std::vector<double> prior_joint_signs;  // sign s.t. positive s*theta is impossible

  // Compact nonzero skinning entries per vertex, built by finalize().
  struct SkinRow {
    std::array<int, 4> idx{};
    std::array<double, 4> w{};
    int n = 0;
  };
  std::vector<SkinRow> skin_rows;

  int vertex_count() const { return static_cast<int>(template_vertices.cols()); }
  int theta_dims() const { return 3 * n_b; }

  // Validates invariants (tree parents, weight rows, shape basis sizes) and
  // builds skin_rows. Throws ValidationError on violation.
  void finalize();
};

SkeletonTemplate make_default_template();

struct BoneCapsule {
  int parent = 0;
  int child = 0;  // segment spans rest_joints of parent -> child
  double radius = 0.0;
};

// Surface capsule layout of the default template: one capsule per non-root
// joint, with the radii used to generate its vertex rings.
std::vector<BoneCapsule> default_bone_capsules();

void save_template(const std::string& path, const SkeletonTemplate& tmpl);
SkeletonTemplate load_template(const std::string& path);

void validate_pose(const PoseParams& pose, int n_b);

// vertices = template + shape_dirs * beta, joints analogous.
std::pair<Mat3X, Mat3X> shape_blend(const SkeletonTemplate& tmpl, const VecX& beta);

Mat3 rodrigues(const Vec3& v);
// d(rodrigues)/d(v_k) for k = 0,1,2.
std::array<Mat3, 3> rodrigues_jacobian(const Vec3& v);

struct BoneTransforms {
  std::vector<Mat4> bones;   // B_i: canonical bone frame -> posed space
  std::vector<Mat4> frames;  // A_i: accumulated joint frames
  std::vector<Mat4> locals;  // L_i: per-joint local transforms, A_i = A_parent * L_i
};

BoneTransforms forward_kinematics(const SkeletonTemplate& tmpl, const PoseParams& pose);
BoneTransforms forward_kinematics(const SkeletonTemplate& tmpl, const PoseParams& pose,
                                  const Mat3X& blended_joints);

Mat3X joints3d(const SkeletonTemplate& tmpl, const PoseParams& pose);
Mat3X deform_vertices(const SkeletonTemplate& tmpl, const PoseParams& pose);

Aabb instance_bbox(const Mat3X& posed_vertices, double padding);

// Nearest-vertex lookup: exact brute force below brute_force_limit points,
// uniform-grid acceleration above it.
class NearestVertexIndex {
 public:
  NearestVertexIndex() = default;
  explicit NearestVertexIndex(const Mat3X& points, int brute_force_limit = 4096);
  int query(const Vec3& p) const;
  bool uses_grid() const { return !cells_.empty(); }

 private:
  Mat3X points_;
  Aabb bounds_;
  double cell_size_ = 0.0;
  int dims_[3] = {0, 0, 0};
  std::vector<std::vector<int>> cells_;

  int cell_of(int ix, int iy, int iz) const { return (iz * dims_[1] + iy) * dims_[0] + ix; }
};

// Everything derived from one (template, pose) pair that rendering and
// gradients need: bone transforms, posed surface, per-vertex blended skinning
// matrices and their inverses, and the nearest-vertex index.
struct PosedBody {
  const SkeletonTemplate* tmpl = nullptr;
  PoseParams pose;
  Mat3X rest_vertices;
  Mat3X rest_joints;
  BoneTransforms bones;
  Mat3X posed_vertices;
  std::vector<Mat4> vertex_skin;      // per-vertex sum_i w_i B_i
  std::vector<Mat4> vertex_inv_skin;  // inverses of the above
  NearestVertexIndex nn;

  Aabb bbox(double padding) const { return instance_bbox(posed_vertices, padding); }
};

// Throws NumericalError when any blended skinning matrix is singular
// (|det| < 1e-12).
PosedBody pose_body(const SkeletonTemplate& tmpl, const PoseParams& pose);

int nearest_vertex(const PosedBody& body, const Vec3& x);
// Canonical point via the skinning row of vertex v_idx.
Vec3 inverse_lbs(const PosedBody& body, const Vec3& x, int v_idx);
// Convenience: nearest-vertex row.
Vec3 inverse_lbs(const PosedBody& body, const Vec3& x);

struct PoseGrads {
  VecX beta = VecX::Zero(kShapeDims);
  VecX theta;
  Vec3 trans = Vec3::Zero();
};

// Accumulates d(loss)/d(B_i) for the inverse-skinning warp at world point x
// with frozen correspondence v_idx, given d(loss)/d(canonical point).
void inverse_lbs_backward(const PosedBody& body, int v_idx, const Vec3& xbar,
                          const Vec3& xbar_bar, std::vector<Mat4>& bones_bar);

// Backpropagates bone-transform and posed-joint adjoints to pose parameters.
// bones_bar may be empty (treated as zeros); joints_bar is 3 x n_b or empty.
PoseGrads fk_backward(const SkeletonTemplate& tmpl, const PoseParams& pose,
                      const BoneTransforms& bt, const std::vector<Mat4>& bones_bar,
                      const Mat3X& joints_bar);

struct FitResult {
  PoseParams pose;
  double residual_rms = 0.0;  // meters
  bool converged = false;
};

// Registers the template to target joints (3 x n_b) by first-order descent
// on squared joint distance with a small theta regularizer.
FitResult fit_to_joints(const SkeletonTemplate& tmpl, const Mat3X& target_joints,
                        const PoseParams& init);

struct FramePoses {
  std::vector<int> person_ids;
  std::vector<PoseParams> poses;
};

void save_poses(const std::string& path, const FramePoses& frame);
FramePoses load_poses(const std::string& path, int n_b);

}  // namespace avopt
