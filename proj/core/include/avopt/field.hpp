#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avopt/body.hpp"
#include "avopt/common.hpp"
#include "avopt/geometry.hpp"

// Canonical appearance/geometry field: multiresolution trilinear feature
// grids (dense below a size threshold, hashed above) feeding a small MLP
// that outputs RGB + raw density.

namespace avopt {

inline constexpr int kFieldLevels = 8;
inline constexpr int kFeatureDim = 2;
inline constexpr int kHiddenDim = 64;
inline constexpr int kDecoderIn = kFieldLevels * kFeatureDim;
inline constexpr int kDecoderOut = 4;
inline constexpr int64_t kHashTableSize = int64_t(1) << 19;

struct FieldLevelSpec {
  int res = 0;  // cells per axis; vertices are res+1 per axis
  bool hashed = false;
  int64_t entries = 0;
  int64_t offset = 0;  // feature-vector start within the parameter vector
};

struct FieldSample {
  Vec3 color = Vec3::Zero();
  double density = 0.0;
  bool inside = false;
};

class CanonicalField {
 public:
  // Zero-initialized decoder output layer: density softplus(0) and gray
  // color everywhere inside bounds until trained.
  CanonicalField(const Aabb& bounds, uint64_t seed);

  static const std::vector<int>& level_resolutions();

  const Aabb& bounds() const { return bounds_; }
  const std::vector<FieldLevelSpec>& levels() const { return levels_; }
  int64_t decoder_offset() const { return dec_offset_; }
  Eigen::Index param_count() const { return params_.size(); }

  // The parameter vector must never be resized; optimizers update in place.
  VecX& params() { return params_; }
  const VecX& params() const { return params_; }

  FieldSample query(const Vec3& x) const;

  // Fused forward + backward: accumulates into param_grad (same length as
  // params, or empty to skip) and writes the spatial gradient for the warp
  // chain into dx when non-null. Outside bounds everything is zero. The Ref
  // form targets slices of concatenated multi-person parameter vectors.
  FieldSample query_grad(const Vec3& x, const Vec3& dcolor, double ddensity,
                         Eigen::Ref<VecX> param_grad, Vec3* dx) const;
  FieldSample query_grad(const Vec3& x, const Vec3& dcolor, double ddensity,
                         VecX* param_grad, Vec3* dx) const;

  void validate_finite() const;  // throws NumericalError on any non-finite parameter

  void save(const std::string& path) const;
  static CanonicalField load(const std::string& path);

 private:
  CanonicalField() = default;
  void build_layout();

  Aabb bounds_;
  std::vector<FieldLevelSpec> levels_;
  int64_t dec_offset_ = 0;
  VecX params_;
};

// Field value at a world point under a pose: canonical warp via inverse
// skinning, then field query. Propagates singular-skinning errors.
FieldSample query_posed(const CanonicalField& field, const PosedBody& body, const Vec3& x);

// Canonical bounds: blended rest vertices at beta, padded.
Aabb canonical_bounds(const SkeletonTemplate& tmpl, const VecX& beta, double padding = 0.15);

}  // namespace avopt
