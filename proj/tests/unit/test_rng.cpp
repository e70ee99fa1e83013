#include "avopt/rng.hpp"

#include <cmath>
#include <vector>

#include "doctest.h"

using namespace avopt;

TEST_SUITE("rng") {
  TEST_CASE("same seed reproduces the sequence") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  }

  TEST_CASE("different seeds diverge") {
    Rng a(1), b(2);
    int equal = 0;
    for (int i = 0; i < 64; ++i)
      if (a.next_u64() == b.next_u64()) ++equal;
    CHECK(equal == 0);
  }

  TEST_CASE("uniform lies in [0,1) with mean near one half") {
    Rng rng(7);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double u = rng.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
      sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
  }

  TEST_CASE("normal has unit variance and zero mean") {
    Rng rng(11);
    double sum = 0.0, sumsq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = rng.normal();
      sum += x;
      sumsq += x * x;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.03);
  }

  TEST_CASE("normal sequence is reproducible across instances") {
    Rng a(99), b(99);
    for (int i = 0; i < 10; ++i) CHECK(a.normal() == b.normal());
  }

  TEST_CASE("named streams are independent and stable") {
    const Rng root(42);
    Rng s1 = root.stream("jitter");
    Rng s2 = root.stream("init");
    Rng s1_again = root.stream("jitter");
    CHECK(s1.next_u64() == s1_again.next_u64());
    Rng t1 = root.stream("jitter");
    Rng t2 = root.stream("init");
    int equal = 0;
    for (int i = 0; i < 64; ++i)
      if (t1.next_u64() == t2.next_u64()) ++equal;
    CHECK(equal == 0);
  }

  TEST_CASE("hash_uniform is a pure function into [0,1)") {
    for (uint64_t k = 0; k < 1000; ++k) {
      const double u = hash_uniform(mix_seed(5, k));
      CHECK(u == hash_uniform(mix_seed(5, k)));
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
  }

  TEST_CASE("uniform_index stays in range") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) CHECK(rng.uniform_index(17) < 17);
  }
}
