#include "avopt/renderer.hpp"

#include <algorithm>
#include <exception>
#include <thread>

namespace avopt {

namespace {

constexpr double kEarlyTermTransmittance = 1e-4;

}  // namespace

std::vector<RaySample> sample_ray(const Ray& ray, const std::vector<Aabb>& boxes, int n_per_box,
                                  const Rng& rng) {
  if (n_per_box < 1) throw ValidationError("sample_ray: n_per_box must be >= 1");
  struct Hit {
    int label;
    double t0, width;
  };
  std::vector<Hit> hits;
  hits.reserve(boxes.size());
  for (size_t l = 0; l < boxes.size(); ++l) {
    const auto span = ray_aabb_intersect(ray, boxes[l]);
    if (!span || span->second <= span->first) continue;
    hits.push_back({static_cast<int>(l), span->first, span->second - span->first});
  }
  // One jitter stream per hit, ranked by box geometry rather than instance
  // index, so relabeling instances permutes the output exactly instead of
  // reshuffling jitters. Entry depth alone would tie for distinct boxes
  // sharing a face plane.
  std::sort(hits.begin(), hits.end(), [&boxes](const Hit& a, const Hit& b) {
    if (a.t0 != b.t0) return a.t0 < b.t0;
    const Aabb& ba = boxes[a.label];
    const Aabb& bb = boxes[b.label];
    for (int k = 0; k < 3; ++k) {
      if (ba.min[k] != bb.min[k]) return ba.min[k] < bb.min[k];
      if (ba.max[k] != bb.max[k]) return ba.max[k] < bb.max[k];
    }
    return a.label < b.label;
  });
  std::vector<RaySample> samples;
  samples.reserve(hits.size() * static_cast<size_t>(n_per_box));
  for (size_t rank = 0; rank < hits.size(); ++rank) {
    const Hit& h = hits[rank];
    Rng jitter = rng.stream(rank);
    const double stride = h.width / n_per_box;
    for (int k = 0; k < n_per_box; ++k) {
      RaySample s;
      s.depth = h.t0 + (k + jitter.uniform()) * stride;
      s.position = ray.point_at(s.depth);
      s.label = h.label;
      s.delta = stride;  // placeholder for the trailing sample; overwritten below
      samples.push_back(s);
    }
  }
  std::sort(samples.begin(), samples.end(), [](const RaySample& a, const RaySample& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.label < b.label;
  });
  for (size_t i = 0; i + 1 < samples.size(); ++i)
    samples[i].delta = samples[i + 1].depth - samples[i].depth;
  return samples;
}

RenderOutput composite(const std::vector<RaySample>& samples, int n_instances,
                       bool early_terminate) {
  if (n_instances < 0) throw ValidationError("composite: negative instance count");
  RenderOutput out;
  out.instance_alpha = VecX::Zero(n_instances);
  double transmittance = 1.0;
  double prev_depth = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < samples.size(); ++i) {
    const RaySample& s = samples[i];
    if (s.depth < prev_depth)
      throw ValidationError("composite: samples not sorted by depth");
    prev_depth = s.depth;
    if (s.label < 0 || s.label >= n_instances)
      throw ValidationError("composite: sample label out of range");
    if (!is_finite(s.density) || !all_finite(s.color) || !is_finite(s.delta))
      throw NumericalError("composite: non-finite sample at index " + std::to_string(i));
    const double alpha_i = 1.0 - std::exp(-s.density * s.delta);
    const double weight = alpha_i * transmittance;
    out.color += weight * s.color;
    out.instance_alpha[s.label] += weight;
    transmittance *= 1.0 - alpha_i;
    if (early_terminate && transmittance < kEarlyTermTransmittance) break;
  }
  // Total opacity as the sum of the per-label accumulators keeps the
  // decomposition exact and reduces bit-for-bit to a plain renderer at L=1.
  out.alpha = out.instance_alpha.sum();
  return out;
}

void composite_backward(const std::vector<RaySample>& samples, int n_instances,
                        const Vec3& dcolor, double dalpha, const VecX& dinstance_alpha,
                        std::vector<SampleGrad>& grads) {
  if (dinstance_alpha.size() != n_instances)
    throw ValidationError("composite_backward: instance gradient size mismatch");
  const size_t n = samples.size();
  grads.assign(n, SampleGrad{});
  if (n == 0) return;

  // d(loss)/d(weight_i) for weight_i = alpha_i * transmittance_i.
  std::vector<double> alpha(n), g(n);
  for (size_t i = 0; i < n; ++i) {
    const RaySample& s = samples[i];
    if (s.label < 0 || s.label >= n_instances)
      throw ValidationError("composite_backward: sample label out of range");
    alpha[i] = 1.0 - std::exp(-s.density * s.delta);
    g[i] = dcolor.dot(s.color) + dalpha + dinstance_alpha[s.label];
  }
  // weight_j (j > i) carries a (1 - alpha_i) factor, so
  //   d(loss)/d(alpha_i) = T_i * (g_i - R_i),
  //   R_i = sum_{j>i} alpha_j * prod_{i<k<j} (1 - alpha_k) * g_j,
  // accumulated as a suffix recurrence to avoid dividing by (1 - alpha_i).
  double suffix = 0.0;
  std::vector<double> dalpha_over_t(n);
  for (size_t i = n; i-- > 0;) {
    dalpha_over_t[i] = g[i] - suffix;
    suffix = alpha[i] * g[i] + (1.0 - alpha[i]) * suffix;
  }
  double transmittance = 1.0;
  for (size_t i = 0; i < n; ++i) {
    const RaySample& s = samples[i];
    const double dL_dalpha = transmittance * dalpha_over_t[i];
    grads[i].ddensity = dL_dalpha * s.delta * (1.0 - alpha[i]);
    grads[i].dcolor = (alpha[i] * transmittance) * dcolor;
    transmittance *= 1.0 - alpha[i];
  }
}

RenderResult render_image(const std::vector<WorldField>& fields, const std::vector<Aabb>& boxes,
                          const CameraModel& camera, const RenderConfig& config, uint64_t seed) {
  if (fields.size() != boxes.size())
    throw ValidationError("render_image: fields/boxes count mismatch");
  validate_camera(camera);
  const int n_instances = static_cast<int>(fields.size());
  const int w = camera.width;
  const int h = camera.height;

  RenderResult result;
  result.color = ImageRGB(w, h);
  result.alpha = ImageGray(w, h);
  result.instance_alpha.assign(n_instances, ImageGray(w, h));

  const auto render_pixel = [&](int x, int y) {
    const uint64_t pixel_index = static_cast<uint64_t>(y) * w + x;
    Rng rng(mix_seed(seed, hash_tag("render-pixel"), pixel_index));
    const Ray ray = pixel_ray(camera, Vec2(x + 0.5, y + 0.5));
    std::vector<RaySample> samples = sample_ray(ray, boxes, config.n_per_box, rng);
    RenderOutput out;
    if (config.early_terminate) {
      // Fields are evaluated lazily so samples behind an already-opaque
      // surface are never queried. Same arithmetic and order as composite()
      // with early termination.
      out.instance_alpha = VecX::Zero(n_instances);
      double transmittance = 1.0;
      double prev_depth = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < samples.size(); ++i) {
        RaySample& s = samples[i];
        if (s.depth < prev_depth)
          throw ValidationError("composite: samples not sorted by depth");
        prev_depth = s.depth;
        if (s.label < 0 || s.label >= n_instances)
          throw ValidationError("composite: sample label out of range");
        const FieldSample fs = fields[s.label](s.position);
        s.color = fs.color;
        s.density = fs.density;
        if (!is_finite(s.density) || !all_finite(s.color) || !is_finite(s.delta))
          throw NumericalError("composite: non-finite sample at index " + std::to_string(i));
        const double alpha_i = 1.0 - std::exp(-s.density * s.delta);
        const double weight = alpha_i * transmittance;
        out.color += weight * s.color;
        out.instance_alpha[s.label] += weight;
        transmittance *= 1.0 - alpha_i;
        if (transmittance < kEarlyTermTransmittance) break;
      }
      out.alpha = out.instance_alpha.sum();
    } else {
      for (RaySample& s : samples) {
        const FieldSample fs = fields[s.label](s.position);
        s.color = fs.color;
        s.density = fs.density;
      }
      out = composite(samples, n_instances, false);
    }
    const Vec3 rgb = out.color + (1.0 - out.alpha) * config.background;
    for (int c = 0; c < 3; ++c) result.color.at(x, y, c) = rgb[c];
    result.alpha.at(x, y) = out.alpha;
    for (int l = 0; l < n_instances; ++l)
      result.instance_alpha[l].at(x, y) = out.instance_alpha[l];
  };

  const auto render_rows = [&](int y0, int y1) {
    for (int y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        try {
          render_pixel(x, y);
        } catch (const NumericalError& e) {
          throw NumericalError(std::string(e.what()) + " [pixel " + std::to_string(x) + "," +
                               std::to_string(y) + "]");
        } catch (const ValidationError& e) {
          throw ValidationError(std::string(e.what()) + " [pixel " + std::to_string(x) + "," +
                                std::to_string(y) + "]");
        }
      }
  };

  const int n_threads = std::max(1, std::min(config.threads, h));
  if (n_threads == 1) {
    render_rows(0, h);
    return result;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n_threads);
  for (int t = 0; t < n_threads; ++t) {
    const int y0 = h * t / n_threads;
    const int y1 = h * (t + 1) / n_threads;
    pool.emplace_back([&, t, y0, y1] {
      try {
        render_rows(y0, y1);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);
  return result;
}

RenderResult render_image(const std::vector<const CanonicalField*>& fields,
                          const std::vector<PosedBody>& bodies, const CameraModel& camera,
                          const RenderConfig& config, uint64_t seed) {
  if (fields.size() != bodies.size())
    throw ValidationError("render_image: fields/bodies count mismatch");
  std::vector<WorldField> world(fields.size());
  std::vector<Aabb> boxes(fields.size());
  for (size_t l = 0; l < fields.size(); ++l) {
    const CanonicalField* field = fields[l];
    const PosedBody* body = &bodies[l];
    world[l] = [field, body](const Vec3& x) { return query_posed(*field, *body, x); };
    boxes[l] = bodies[l].bbox(config.bbox_padding);
  }
  return render_image(world, boxes, camera, config, seed);
}

}  // namespace avopt
