#include "ulm/rng.hpp"

#include <cmath>
#include <cstdint>

#include "doctest.h"

using ulm::Rng;

TEST_CASE("same seed gives the same stream") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
    CHECK(a.uniform_int(-5, 5) == b.uniform_int(-5, 5));
  }
}

TEST_CASE("engine output is the standard-pinned mt19937_64 sequence") {
  // The C++ standard fixes mt19937_64's 10000th draw for the default seed.
  std::mt19937_64 reference;  // seed 5489
  reference.discard(9999);
  const std::uint64_t pinned = reference();
  CHECK(pinned == 9981545732273789042ULL);

  Rng r(5489);
  std::uint64_t got = 0;
  for (int i = 0; i < 10000; ++i) got = r.next_u64();
  CHECK(got == pinned);
}

TEST_CASE("uniform stays in [0,1) and fills the range") {
  Rng r(1);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.01);
  CHECK(hi > 0.99);
}

TEST_CASE("uniform_int respects the closed bounds") {
  Rng r(2);
  bool saw_lo = false, saw_hi = false;
  for (int i = 0; i < 5000; ++i) {
    const auto v = r.uniform_int(-3, 3);
    CHECK(v >= -3);
    CHECK(v <= 3);
    saw_lo |= (v == -3);
    saw_hi |= (v == 3);
  }
  CHECK(saw_lo);
  CHECK(saw_hi);
}

TEST_CASE("normal has roughly standard moments") {
  Rng r(3);
  const int n = 200000;
  double sum = 0.0, sum2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("scaled normal applies mean and stddev") {
  Rng a(4), b(4);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.normal(2.0, 0.5) == doctest::Approx(2.0 + 0.5 * b.normal()));
  }
}
