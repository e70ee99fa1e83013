#include "avopt/field.hpp"

#include <cmath>

#include "avopt/container.hpp"
#include "avopt/rng.hpp"
#include "json.hpp"

namespace avopt {

namespace {

constexpr uint64_t kHashPrimeY = 2654435761ull;
constexpr uint64_t kHashPrimeZ = 805459861ull;

inline int64_t hash_corner(int64_t ix, int64_t iy, int64_t iz) {
  const uint64_t h = static_cast<uint64_t>(ix) ^ (static_cast<uint64_t>(iy) * kHashPrimeY) ^
                     (static_cast<uint64_t>(iz) * kHashPrimeZ);
  return static_cast<int64_t>(h & (kHashTableSize - 1));
}

inline int64_t dense_corner(int64_t ix, int64_t iy, int64_t iz, int64_t side) {
  return (iz * side + iy) * side + ix;
}

using Mat64x16 = Eigen::Matrix<double, kHiddenDim, kDecoderIn, Eigen::RowMajor>;
using Mat64x64 = Eigen::Matrix<double, kHiddenDim, kHiddenDim, Eigen::RowMajor>;
using Mat4x64 = Eigen::Matrix<double, kDecoderOut, kHiddenDim, Eigen::RowMajor>;
using Vec64 = Eigen::Matrix<double, kHiddenDim, 1>;
using Vec16 = Eigen::Matrix<double, kDecoderIn, 1>;
using Vec4d = Eigen::Matrix<double, kDecoderOut, 1>;

struct DecoderSizes {
  int64_t w1, b1, w2, b2, w3, b3, total;
};

constexpr DecoderSizes decoder_sizes() {
  const int64_t w1 = kHiddenDim * kDecoderIn;
  const int64_t b1 = kHiddenDim;
  const int64_t w2 = kHiddenDim * kHiddenDim;
  const int64_t b2 = kHiddenDim;
  const int64_t w3 = kDecoderOut * kHiddenDim;
  const int64_t b3 = kDecoderOut;
  return {w1, b1, w2, b2, w3, b3, w1 + b1 + w2 + b2 + w3 + b3};
}

// Per-level interpolation context: the 8 corner parameter indices and their
// trilinear weights plus the weight gradients in grid units.
struct CornerSet {
  int64_t idx[8];
  double w[8];
  double dw[8][3];
};

void corner_set(const FieldLevelSpec& lv, const Vec3& u, CornerSet& out) {
  // u is the position in cell units for this level, in [0, res].
  double fx[3];
  int64_t i0[3];
  for (int a = 0; a < 3; ++a) {
    double f = std::floor(u[a]);
    if (f > lv.res - 1) f = lv.res - 1;
    if (f < 0) f = 0;
    i0[a] = static_cast<int64_t>(f);
    fx[a] = u[a] - f;
  }
  const int64_t side = lv.res + 1;
  for (int c = 0; c < 8; ++c) {
    const int cx = c & 1, cy = (c >> 1) & 1, cz = (c >> 2) & 1;
    const int64_t ix = i0[0] + cx, iy = i0[1] + cy, iz = i0[2] + cz;
    out.idx[c] = lv.hashed ? hash_corner(ix, iy, iz) : dense_corner(ix, iy, iz, side);
    const double wx = cx ? fx[0] : 1.0 - fx[0];
    const double wy = cy ? fx[1] : 1.0 - fx[1];
    const double wz = cz ? fx[2] : 1.0 - fx[2];
    out.w[c] = wx * wy * wz;
    out.dw[c][0] = (cx ? 1.0 : -1.0) * wy * wz;
    out.dw[c][1] = (cy ? 1.0 : -1.0) * wx * wz;
    out.dw[c][2] = (cz ? 1.0 : -1.0) * wx * wy;
  }
}

}  // namespace

const std::vector<int>& CanonicalField::level_resolutions() {
  // Nearest integers of the geometric sequence from 16 to 256 over 8 levels.
  static const std::vector<int> res = [] {
    std::vector<int> r(kFieldLevels);
    const double growth = std::pow(256.0 / 16.0, 1.0 / (kFieldLevels - 1));
    for (int l = 0; l < kFieldLevels; ++l)
      r[l] = static_cast<int>(std::lround(16.0 * std::pow(growth, l)));
    return r;
  }();
  return res;
}

void CanonicalField::build_layout() {
  levels_.clear();
  int64_t offset = 0;
  for (int l = 0; l < kFieldLevels; ++l) {
    FieldLevelSpec lv;
    lv.res = level_resolutions()[l];
    const int64_t side = lv.res + 1;
    const int64_t dense = side * side * side;
    lv.hashed = dense > kHashTableSize;
    lv.entries = lv.hashed ? kHashTableSize : dense;
    lv.offset = offset;
    offset += lv.entries * kFeatureDim;
    levels_.push_back(lv);
  }
  dec_offset_ = offset;
}

CanonicalField::CanonicalField(const Aabb& bounds, uint64_t seed) : bounds_(bounds) {
  if (bounds.empty() || !bounds.min.allFinite() || !bounds.max.allFinite())
    throw ValidationError("field bounds must be a finite non-empty box");
  build_layout();
  const DecoderSizes ds = decoder_sizes();
  params_ = VecX::Zero(dec_offset_ + ds.total);

  Rng rng(mix_seed(seed, hash_tag("field-init")));
  Rng grid_rng = rng.stream("grid");
  for (const FieldLevelSpec& lv : levels_)
    for (int64_t i = 0; i < lv.entries * kFeatureDim; ++i)
      params_[lv.offset + i] = grid_rng.uniform(-1e-2, 1e-2);

  // He-style hidden layers, zero output layer so the initial field is the
  // activation of zero everywhere.
  Rng dec_rng = rng.stream("decoder");
  double* d = params_.data() + dec_offset_;
  const double s1 = std::sqrt(2.0 / kDecoderIn);
  for (int64_t i = 0; i < ds.w1; ++i) d[i] = dec_rng.normal(0.0, s1);
  d += ds.w1 + ds.b1;
  const double s2 = std::sqrt(2.0 / kHiddenDim);
  for (int64_t i = 0; i < ds.w2; ++i) d[i] = dec_rng.normal(0.0, s2);
}

FieldSample CanonicalField::query(const Vec3& x) const {
  return query_grad(x, Vec3::Zero(), 0.0, nullptr, nullptr);
}

FieldSample CanonicalField::query_grad(const Vec3& x, const Vec3& dcolor, double ddensity,
                                       VecX* param_grad, Vec3* dx) const {
  if (param_grad) return query_grad(x, dcolor, ddensity, Eigen::Ref<VecX>(*param_grad), dx);
  VecX none;
  return query_grad(x, dcolor, ddensity, Eigen::Ref<VecX>(none), dx);
}

FieldSample CanonicalField::query_grad(const Vec3& x, const Vec3& dcolor, double ddensity,
                                       Eigen::Ref<VecX> param_grad, Vec3* dx) const {
  const bool want_param = param_grad.size() != 0;
  if (want_param && param_grad.size() != params_.size())
    throw ValidationError("field gradient buffer size mismatch");
  FieldSample out;
  if (dx) dx->setZero();
  if (!bounds_.contains(x)) return out;
  out.inside = true;

  const Vec3 ext = bounds_.extent();
  const Vec3 rel = (x - bounds_.min).cwiseQuotient(ext);

  Vec16 feat;
  CornerSet corners[kFieldLevels];
  for (int l = 0; l < kFieldLevels; ++l) {
    const FieldLevelSpec& lv = levels_[l];
    corner_set(lv, rel * lv.res, corners[l]);
    double f0 = 0.0, f1 = 0.0;
    for (int c = 0; c < 8; ++c) {
      const double* e = params_.data() + lv.offset + corners[l].idx[c] * kFeatureDim;
      f0 += corners[l].w[c] * e[0];
      f1 += corners[l].w[c] * e[1];
    }
    feat[2 * l] = f0;
    feat[2 * l + 1] = f1;
  }

  const DecoderSizes ds = decoder_sizes();
  const double* base = params_.data() + dec_offset_;
  Eigen::Map<const Mat64x16> W1(base);
  Eigen::Map<const Vec64> b1(base + ds.w1);
  Eigen::Map<const Mat64x64> W2(base + ds.w1 + ds.b1);
  Eigen::Map<const Vec64> b2(base + ds.w1 + ds.b1 + ds.w2);
  Eigen::Map<const Mat4x64> W3(base + ds.w1 + ds.b1 + ds.w2 + ds.b2);
  Eigen::Map<const Vec4d> b3(base + ds.w1 + ds.b1 + ds.w2 + ds.b2 + ds.w3);

  const Vec64 z1 = W1 * feat + b1;
  Vec64 a1, g1;
  for (int i = 0; i < kHiddenDim; ++i) {
    a1[i] = squareplus(z1[i]);
    g1[i] = squareplus_grad(z1[i]);
  }
  const Vec64 z2 = W2 * a1 + b2;
  Vec64 a2, g2;
  for (int i = 0; i < kHiddenDim; ++i) {
    a2[i] = squareplus(z2[i]);
    g2[i] = squareplus_grad(z2[i]);
  }
  const Vec4d o = W3 * a2 + b3;

  for (int c = 0; c < 3; ++c) out.color[c] = sigmoid(o[c]);
  out.density = softplus(o[3]);

  if (!want_param && !dx) return out;

  Vec4d dout;
  for (int c = 0; c < 3; ++c) dout[c] = dcolor[c] * out.color[c] * (1.0 - out.color[c]);
  dout[3] = ddensity * sigmoid(o[3]);

  const Vec64 da2 = W3.transpose() * dout;
  const Vec64 dz2 = da2.cwiseProduct(g2);
  const Vec64 da1 = W2.transpose() * dz2;
  const Vec64 dz1 = da1.cwiseProduct(g1);
  const Vec16 dfeat = W1.transpose() * dz1;

  if (want_param) {
    double* gbase = param_grad.data() + dec_offset_;
    Eigen::Map<Mat64x16> gW1(gbase);
    Eigen::Map<Vec64> gb1(gbase + ds.w1);
    Eigen::Map<Mat64x64> gW2(gbase + ds.w1 + ds.b1);
    Eigen::Map<Vec64> gb2(gbase + ds.w1 + ds.b1 + ds.w2);
    Eigen::Map<Mat4x64> gW3(gbase + ds.w1 + ds.b1 + ds.w2 + ds.b2);
    Eigen::Map<Vec4d> gb3(gbase + ds.w1 + ds.b1 + ds.w2 + ds.b2 + ds.w3);
    gW3.noalias() += dout * a2.transpose();
    gb3 += dout;
    gW2.noalias() += dz2 * a1.transpose();
    gb2 += dz2;
    gW1.noalias() += dz1 * feat.transpose();
    gb1 += dz1;

    for (int l = 0; l < kFieldLevels; ++l) {
      const FieldLevelSpec& lv = levels_[l];
      double* g = param_grad.data() + lv.offset;
      for (int c = 0; c < 8; ++c) {
        g[corners[l].idx[c] * kFeatureDim] += corners[l].w[c] * dfeat[2 * l];
        g[corners[l].idx[c] * kFeatureDim + 1] += corners[l].w[c] * dfeat[2 * l + 1];
      }
    }
  }

  if (dx) {
    Vec3 acc = Vec3::Zero();
    for (int l = 0; l < kFieldLevels; ++l) {
      const FieldLevelSpec& lv = levels_[l];
      const double scale = lv.res;  // cell units per normalized unit
      Vec3 df0 = Vec3::Zero(), df1 = Vec3::Zero();
      for (int c = 0; c < 8; ++c) {
        const double* e = params_.data() + lv.offset + corners[l].idx[c] * kFeatureDim;
        for (int a = 0; a < 3; ++a) {
          df0[a] += corners[l].dw[c][a] * e[0];
          df1[a] += corners[l].dw[c][a] * e[1];
        }
      }
      acc += (dfeat[2 * l] * df0 + dfeat[2 * l + 1] * df1) * scale;
    }
    *dx = acc.cwiseQuotient(ext);
  }
  return out;
}

void CanonicalField::validate_finite() const {
  if (!params_.allFinite()) throw NumericalError("non-finite field parameters");
}

void CanonicalField::save(const std::string& path) const {
  ContainerWriter w("AVFIELD", 1);
  std::vector<float> buf;
  for (int l = 0; l < kFieldLevels; ++l) {
    const FieldLevelSpec& lv = levels_[l];
    buf.resize(static_cast<size_t>(lv.entries) * kFeatureDim);
    for (int64_t i = 0; i < lv.entries * kFeatureDim; ++i)
      buf[i] = static_cast<float>(params_[lv.offset + i]);
    w.add_f4("level_" + std::to_string(l), {lv.entries, kFeatureDim}, buf.data());
  }
  const DecoderSizes ds = decoder_sizes();
  const struct {
    const char* name;
    int64_t offset, rows, cols;
  } blocks[] = {
      {"dec_w1", 0, kHiddenDim, kDecoderIn},
      {"dec_b1", ds.w1, kHiddenDim, 1},
      {"dec_w2", ds.w1 + ds.b1, kHiddenDim, kHiddenDim},
      {"dec_b2", ds.w1 + ds.b1 + ds.w2, kHiddenDim, 1},
      {"dec_w3", ds.w1 + ds.b1 + ds.w2 + ds.b2, kDecoderOut, kHiddenDim},
      {"dec_b3", ds.w1 + ds.b1 + ds.w2 + ds.b2 + ds.w3, kDecoderOut, 1},
  };
  for (const auto& blk : blocks) {
    buf.resize(static_cast<size_t>(blk.rows * blk.cols));
    for (int64_t i = 0; i < blk.rows * blk.cols; ++i)
      buf[i] = static_cast<float>(params_[dec_offset_ + blk.offset + i]);
    w.add_f4(blk.name, {blk.rows, blk.cols}, buf.data());
  }

  nlohmann::json meta;
  meta["bounds_min"] = {bounds_.min.x(), bounds_.min.y(), bounds_.min.z()};
  meta["bounds_max"] = {bounds_.max.x(), bounds_.max.y(), bounds_.max.z()};
  meta["feature_dim"] = kFeatureDim;
  meta["hidden_dim"] = kHiddenDim;
  nlohmann::json lvs = nlohmann::json::array();
  for (const FieldLevelSpec& lv : levels_)
    lvs.push_back({{"res", lv.res}, {"hashed", lv.hashed}, {"entries", lv.entries}});
  meta["levels"] = lvs;
  w.set_meta(meta.dump());
  w.write(path);
}

CanonicalField CanonicalField::load(const std::string& path) {
  ContainerReader r(path, "AVFIELD");
  if (r.version() != 1) throw ValidationError("unsupported field checkpoint version");

  CanonicalField f;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.meta());
    const auto mn = meta.at("bounds_min").get<std::vector<double>>();
    const auto mx = meta.at("bounds_max").get<std::vector<double>>();
    if (mn.size() != 3 || mx.size() != 3) throw ValidationError("bad bounds in checkpoint");
    f.bounds_.min = Vec3(mn[0], mn[1], mn[2]);
    f.bounds_.max = Vec3(mx[0], mx[1], mx[2]);
    if (meta.at("feature_dim").get<int>() != kFeatureDim ||
        meta.at("hidden_dim").get<int>() != kHiddenDim)
      throw ValidationError("checkpoint decoder shape mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("field checkpoint header: ") + e.what());
  }

  f.build_layout();
  const DecoderSizes ds = decoder_sizes();
  f.params_ = VecX::Zero(f.dec_offset_ + ds.total);

  for (int l = 0; l < kFieldLevels; ++l) {
    const FieldLevelSpec& lv = f.levels_[l];
    const auto block = r.read_f4("level_" + std::to_string(l));
    if (static_cast<int64_t>(block.size()) != lv.entries * kFeatureDim)
      throw ValidationError("field checkpoint level size mismatch");
    for (int64_t i = 0; i < lv.entries * kFeatureDim; ++i) f.params_[lv.offset + i] = block[i];
  }
  const struct {
    const char* name;
    int64_t offset, count;
  } blocks[] = {
      {"dec_w1", 0, ds.w1},
      {"dec_b1", ds.w1, ds.b1},
      {"dec_w2", ds.w1 + ds.b1, ds.w2},
      {"dec_b2", ds.w1 + ds.b1 + ds.w2, ds.b2},
      {"dec_w3", ds.w1 + ds.b1 + ds.w2 + ds.b2, ds.w3},
      {"dec_b3", ds.w1 + ds.b1 + ds.w2 + ds.b2 + ds.w3, ds.b3},
  };
  for (const auto& blk : blocks) {
    const auto block = r.read_f4(blk.name);
    if (static_cast<int64_t>(block.size()) != blk.count)
      throw ValidationError("field checkpoint decoder size mismatch");
    for (int64_t i = 0; i < blk.count; ++i) f.params_[f.dec_offset_ + blk.offset + i] = block[i];
  }
  f.validate_finite();
  return f;
}

FieldSample query_posed(const CanonicalField& field, const PosedBody& body, const Vec3& x) {
  return field.query(inverse_lbs(body, x));
}

Aabb canonical_bounds(const SkeletonTemplate& tmpl, const VecX& beta, double padding) {
  return instance_bbox(shape_blend(tmpl, beta).first, padding);
}

}  // namespace avopt
