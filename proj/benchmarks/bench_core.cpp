#include <benchmark/benchmark.h>

#include "avopt/geometry.hpp"
#include "avopt/rng.hpp"

namespace {

void BM_RngNormal(benchmark::State& state) {
  avopt::Rng rng(42);
  for (auto _ : state) benchmark::DoNotOptimize(rng.normal());
}
BENCHMARK(BM_RngNormal);

void BM_RayAabb(benchmark::State& state) {
  avopt::Rng rng(7);
  const avopt::Aabb box = avopt::Aabb::of(avopt::Vec3(-0.5, 0, -0.3), avopt::Vec3(0.5, 1.8, 0.3));
  avopt::Ray ray;
  ray.origin = avopt::Vec3(3, 1.2, 0);
  for (auto _ : state) {
    avopt::Vec3 d(rng.normal(), rng.normal(), rng.normal());
    ray.direction = d.normalized();
    benchmark::DoNotOptimize(avopt::ray_aabb_intersect(ray, box));
  }
}
BENCHMARK(BM_RayAabb);

}  // namespace

BENCHMARK_MAIN();
