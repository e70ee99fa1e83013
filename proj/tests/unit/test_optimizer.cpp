#include <cmath>

#include "avopt/optimizer.hpp"
#include "avopt/rng.hpp"
#include "doctest.h"

using namespace avopt;

TEST_CASE("adam minimizes a separable quadratic") {
  Rng rng(7);
  VecX target(5);
  for (int i = 0; i < 5; ++i) target[i] = rng.uniform(-2.0, 2.0);
  VecX x = VecX::Zero(5);
  AdamConfig cfg;
  cfg.lr = 0.05;
  Adam adam(5, cfg);
  for (int step = 0; step < 2000; ++step) {
    const VecX grad = 2.0 * (x - target);
    adam.step(x, grad);
  }
  CHECK((x - target).norm() < 1e-6);
  CHECK(adam.steps_taken() == 2000);
}

TEST_CASE("adam first update has magnitude close to the learning rate") {
  VecX x = VecX::Zero(1);
  VecX g(1);
  g[0] = 3.7;
  AdamConfig cfg;
  cfg.lr = 0.01;
  Adam adam(1, cfg);
  adam.step(x, g);
  // Bias correction makes the first step lr * g / (|g| + eps').
  CHECK(x[0] == doctest::Approx(-0.01).epsilon(1e-3));
}

TEST_CASE("adam rejects mismatched sizes and resets cleanly") {
  Adam adam(3, AdamConfig{});
  VecX x = VecX::Zero(3);
  VecX bad = VecX::Zero(2);
  CHECK_THROWS_AS(adam.step(x, bad), ValidationError);
  VecX g = VecX::Ones(3);
  adam.step(x, g);
  adam.reset();
  CHECK(adam.steps_taken() == 0);
}

TEST_CASE("cosine decay endpoints and midpoint") {
  CHECK(cosine_decay(1.0, 0.1, 0, 100) == doctest::Approx(1.0));
  CHECK(cosine_decay(1.0, 0.1, 100, 100) == doctest::Approx(0.1));
  CHECK(cosine_decay(1.0, 0.1, 200, 100) == doctest::Approx(0.1));
  CHECK(cosine_decay(1.0, 0.1, 50, 100) == doctest::Approx(0.55));
  // lr_scale argument scales the applied rate, checked through one step.
  VecX x = VecX::Zero(1);
  VecX g(1);
  g[0] = 1.0;
  AdamConfig cfg;
  cfg.lr = 0.01;
  Adam adam(1, cfg);
  adam.step(x, g, 0.5);
  CHECK(x[0] == doctest::Approx(-0.005).epsilon(1e-3));
}
