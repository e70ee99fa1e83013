#include "avopt/grad.hpp"

#include <cmath>

#include "avopt/renderer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace avopt;

namespace {

std::shared_ptr<ParamRegistry> two_block_registry(Eigen::Index a, Eigen::Index b) {
  auto reg = std::make_shared<ParamRegistry>();
  reg->add("alpha", a);
  reg->add("beta", b);
  return reg;
}

DiffObjective half_norm_squared() {
  return {[](const VecX& p, VecX* g) {
    if (g) *g = p;
    return 0.5 * p.squaredNorm();
  }};
}

// smooth non-quadratic: sum sin(p_i) + 0.5 p^T D p with fixed diagonal D
DiffObjective wavy(Eigen::Index n) {
  VecX d(n);
  for (Eigen::Index i = 0; i < n; ++i) d[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return {[d](const VecX& p, VecX* g) {
    double v = 0.5 * p.dot(d.cwiseProduct(p));
    for (Eigen::Index i = 0; i < p.size(); ++i) v += std::sin(p[i]);
    if (g) {
      *g = d.cwiseProduct(p);
      for (Eigen::Index i = 0; i < p.size(); ++i) (*g)[i] += std::cos(p[i]);
    }
    return v;
  }};
}

}  // namespace

TEST_CASE("registry blocks are contiguous, disjoint, and covering") {
  ParamRegistry reg;
  CHECK(reg.add("grid", 100) == 0);
  CHECK(reg.add("decoder", 40) == 100);
  CHECK(reg.add("pose", 7) == 140);
  CHECK(reg.total_size() == 147);

  Eigen::Index covered = 0;
  Eigen::Index expected_offset = 0;
  for (const ParamBlock& b : reg.blocks()) {
    CHECK(b.offset == expected_offset);
    expected_offset += b.size;
    covered += b.size;
  }
  CHECK(covered == reg.total_size());

  CHECK(reg.find("decoder").offset == 100);
  CHECK(reg.has("pose"));
  CHECK_FALSE(reg.has("missing"));
  CHECK_THROWS_AS(reg.find("missing"), ValidationError);
  CHECK_THROWS_AS(reg.add("pose", 3), ValidationError);
  CHECK_THROWS_AS(reg.add("empty", 0), ValidationError);
  CHECK_THROWS_AS(reg.add("", 3), ValidationError);
}

TEST_CASE("param vector block views alias the flat storage") {
  ParamVector pv(two_block_registry(3, 4));
  CHECK(pv.values.size() == 7);
  pv.block("alpha") << 1, 2, 3;
  pv.block("beta") << 4, 5, 6, 7;
  for (int i = 0; i < 7; ++i) CHECK(pv.values[i] == i + 1);
  pv.values[5] = 50;
  CHECK(pv.block("beta")[2] == 50);
}

TEST_CASE("analytic gradients of the basic objectives") {
  Rng rng(3);
  VecX p(9);
  for (int i = 0; i < 9; ++i) p[i] = rng.normal();

  SUBCASE("half squared norm has gradient equal to the point") {
    VecX g;
    const double v = eval_with_grad(half_norm_squared(), p, g);
    CHECK(v == doctest::Approx(0.5 * p.squaredNorm()));
    CHECK((g - p).norm() == 0.0);
  }

  SUBCASE("constant objective has zero gradient") {
    DiffObjective c{[](const VecX& q, VecX* g) {
      if (g) *g = VecX::Zero(q.size());
      return 7.25;
    }};
    VecX g;
    CHECK(eval_with_grad(c, p, g) == 7.25);
    CHECK(g.norm() == 0.0);
  }

  SUBCASE("non-finite value or gradient is rejected") {
    DiffObjective bad_value{[](const VecX&, VecX* g) {
      if (g) g->setZero(2);
      return std::numeric_limits<double>::quiet_NaN();
    }};
    VecX g;
    CHECK_THROWS_AS(eval_with_grad(bad_value, p, g), NumericalError);

    DiffObjective bad_grad{[](const VecX& q, VecX* g) {
      if (g) {
        *g = VecX::Zero(q.size());
        (*g)[0] = std::numeric_limits<double>::infinity();
      }
      return 1.0;
    }};
    CHECK_THROWS_AS(eval_with_grad(bad_grad, p, g), NumericalError);
  }
}

TEST_CASE("composite opacity derivative through the objective interface") {
  const double delta = 0.42;
  const Eigen::Index n = 3;
  std::vector<RaySample> base(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    base[i].depth = 1.0 + 0.5 * static_cast<double>(i);
    base[i].delta = delta;
    base[i].label = 0;
    base[i].color = Vec3(0.2, 0.4, 0.6);
  }
  DiffObjective alpha_of_sigma{[base, n](const VecX& p, VecX* g) {
    auto samples = base;
    for (Eigen::Index i = 0; i < n; ++i) samples[i].density = p[i];
    const RenderOutput out = composite(samples, 1);
    if (g) {
      std::vector<SampleGrad> sg;
      composite_backward(samples, 1, Vec3::Zero(), 1.0, VecX::Zero(1), sg);
      g->resize(n);
      for (Eigen::Index i = 0; i < n; ++i) (*g)[i] = sg[i].ddensity;
    }
    return out.alpha;
  }};

  // lone sample at sigma*delta = ln 2: d(alpha)/d(sigma) = 0.5 * delta
  VecX p = VecX::Zero(n);
  p[0] = std::log(2.0) / delta;
  VecX g;
  eval_with_grad(alpha_of_sigma, p, g);
  CHECK(g[0] == doctest::Approx(0.5 * delta).epsilon(1e-14));

  ParamRegistry reg;
  reg.add("sigma", n);
  p << 0.9, 1.7, 0.3;
  const GradReport report = fd_check(alpha_of_sigma, reg, p, {}, 1e-4, 5);
  CHECK(report.max_rel_error() < 1e-6);
}

TEST_CASE("fd_check on a quadratic is exact to roundoff") {
  auto reg = two_block_registry(24, 100);
  Rng rng(11);
  VecX p(reg->total_size());
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = rng.uniform(-2, 2);

  for (const double h : {1e-3, 1e-4}) {
    const GradReport report = fd_check(half_norm_squared(), *reg, p, {}, h, 17);
    REQUIRE(report.blocks.size() == 2);
    CHECK(report.max_rel_error() < 1e-8);
    CHECK(report.h == h);
  }
}

TEST_CASE("fd_check samples at most 64 coordinates per block") {
  auto reg = std::make_shared<ParamRegistry>();
  reg->add("big", 500);
  reg->add("small", 10);
  VecX p = VecX::Constant(510, 0.25);
  const GradReport report = fd_check(half_norm_squared(), *reg, p, {}, 1e-4, 2);
  REQUIRE(report.blocks.size() == 2);
  CHECK(report.blocks[0].checked == 64);
  CHECK(report.blocks[1].checked == 10);

  // same seed picks the same subset
  const GradReport again = fd_check(half_norm_squared(), *reg, p, {}, 1e-4, 2);
  CHECK(again.blocks[0].worst_index == report.blocks[0].worst_index);
}

TEST_CASE("fd_check block filter and argument validation") {
  auto reg = two_block_registry(5, 6);
  VecX p = VecX::Ones(11);
  const GradReport report = fd_check(half_norm_squared(), *reg, p, {"beta"}, 1e-4, 1);
  REQUIRE(report.blocks.size() == 1);
  CHECK(report.blocks[0].name == "beta");

  CHECK_THROWS_AS(fd_check(half_norm_squared(), *reg, p, {"nope"}, 1e-4, 1), ValidationError);
  CHECK_THROWS_AS(fd_check(half_norm_squared(), *reg, p, {}, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(fd_check(half_norm_squared(), *reg, p, {}, -1e-4, 1), ValidationError);
  VecX wrong = VecX::Ones(12);
  CHECK_THROWS_AS(fd_check(half_norm_squared(), *reg, wrong, {}, 1e-4, 1), ValidationError);
}

TEST_CASE("gradients combine linearly") {
  const Eigen::Index n = 20;
  const DiffObjective f = wavy(n);
  const DiffObjective g = half_norm_squared();
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    const double a = rng.uniform(-3, 3);
    const double b = rng.uniform(-3, 3);
    VecX p(n);
    for (Eigen::Index i = 0; i < n; ++i) p[i] = rng.uniform(-2, 2);

    DiffObjective combo{[&f, &g, a, b](const VecX& q, VecX* grad) {
      VecX gf, gg;
      const double vf = f.eval(q, grad ? &gf : nullptr);
      const double vg = g.eval(q, grad ? &gg : nullptr);
      if (grad) *grad = a * gf + b * gg;
      return a * vf + b * vg;
    }};

    VecX gc, gf, gg;
    const double vc = eval_with_grad(combo, p, gc);
    const double vf = eval_with_grad(f, p, gf);
    const double vg = eval_with_grad(g, p, gg);
    CHECK(std::abs(vc - (a * vf + b * vg)) <= 1e-12 * std::max(1.0, std::abs(vc)));
    CHECK((gc - (a * gf + b * gg)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("parallel accumulation is deterministic and thread-count tolerant") {
  const Eigen::Index n_items = 257;
  const Eigen::Index dim = 33;
  const auto item_fn = [dim](Eigen::Index i, double& value, VecX& grad) {
    Rng rng(mix_seed(999, static_cast<uint64_t>(i)));
    for (Eigen::Index k = 0; k < dim; ++k) {
      const double x = rng.uniform(-1, 1);
      value += std::sin(x + static_cast<double>(i % 13)) / static_cast<double>(n_items);
      grad[k] += x * 1e-2;
    }
  };

  VecX g1, g1b, g3;
  const double v1 = parallel_accumulate(n_items, 1, dim, item_fn, g1);
  const double v1b = parallel_accumulate(n_items, 1, dim, item_fn, g1b);
  CHECK(v1 == v1b);
  CHECK(g1 == g1b);

  const double v3 = parallel_accumulate(n_items, 3, dim, item_fn, g3);
  CHECK(std::abs(v1 - v3) <= 1e-10);
  CHECK((g1 - g3).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("parallel accumulation propagates worker failures") {
  VecX g;
  CHECK_THROWS_AS(parallel_accumulate(
                      100, 4, 3,
                      [](Eigen::Index i, double&, VecX&) {
                        if (i == 57) throw NumericalError("item 57 exploded");
                      },
                      g),
                  NumericalError);
  CHECK_THROWS_AS(parallel_accumulate(
                      10, 1, 3, [](Eigen::Index, double&, VecX&) { throw ValidationError("no"); },
                      g),
                  ValidationError);
}

TEST_CASE("grad report serializes to parseable JSON") {
  auto reg = two_block_registry(8, 3);
  VecX p = VecX::LinSpaced(11, -1.0, 1.0);
  const GradReport report = fd_check(wavy(11), *reg, p, {}, 1e-5, 4);
  const nlohmann::json j = nlohmann::json::parse(report.to_json());
  CHECK(j["h"] == 1e-5);
  REQUIRE(j["blocks"].size() == 2);
  CHECK(j["blocks"][0]["name"] == "alpha");
  CHECK(j["blocks"][1]["name"] == "beta");
  CHECK(j["blocks"][0]["checked"] == 8);
  CHECK(j["max_rel_error"].get<double>() < 1e-8);
  CHECK(j["max_rel_error"].get<double>() == report.max_rel_error());
}
