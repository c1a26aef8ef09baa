#include <doctest.h>

#include <cmath>
#include <vector>

#include "exms/errors.hpp"
#include "exms/rng.hpp"
#include "exms/rope.hpp"
#include "gradcheck.hpp"

using namespace exms;
using testutil::gradcheck;

namespace {

double dot_vec(const double* a, const double* b, int64_t n) {
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double norm_vec(const double* a, int64_t n) { return std::sqrt(dot_vec(a, a, n)); }

}  // namespace

TEST_CASE("rope_1d: position zero is the identity") {
  CounterRng rng(1);
  const RopeParams p = rope_params_1d(8);
  Tensor x = Tensor::randn({3, 8}, rng);
  Tensor y = rope_1d_apply(x, {0, 0, 0}, p);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("rope preserves per-position norms (isometry)") {
  CounterRng rng(2);
  const RopeParams p1 = rope_params_1d(16);
  const RopeParams p2 = rope_params_2d(16);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = Tensor::randn({5, 16}, rng);
    std::vector<int64_t> pos, rows, cols;
    for (int64_t t = 0; t < 5; ++t) {
      pos.push_back(static_cast<int64_t>(rng.next_below(500)));
      rows.push_back(static_cast<int64_t>(rng.next_below(40)));
      cols.push_back(static_cast<int64_t>(rng.next_below(40)));
    }
    Tensor y1 = rope_1d_apply(x, pos, p1);
    Tensor y2 = rope_2d_apply(x, rows, cols, p2);
    for (int64_t t = 0; t < 5; ++t) {
      const double n0 = norm_vec(x.data() + t * 16, 16);
      CHECK(std::abs(norm_vec(y1.data() + t * 16, 16) - n0) <= 1e-12);
      CHECK(std::abs(norm_vec(y2.data() + t * 16, 16) - n0) <= 1e-12);
    }
  }
}

TEST_CASE("rope_1d: attention scores depend only on the offset") {
  CounterRng rng(3);
  const int64_t hd = 12;
  const RopeParams p = rope_params_1d(hd);
  for (int trial = 0; trial < 12; ++trial) {
    Tensor q = Tensor::randn({1, hd}, rng);
    Tensor k = Tensor::randn({1, hd}, rng);
    const int64_t pos = static_cast<int64_t>(rng.next_below(300));
    const int64_t delta = static_cast<int64_t>(rng.next_below(100));
    Tensor qa = rope_1d_apply(q, {pos}, p);
    Tensor kb = rope_1d_apply(k, {pos + delta}, p);
    Tensor q0 = rope_1d_apply(q, {0}, p);
    Tensor kd = rope_1d_apply(k, {delta}, p);
    const double s1 = dot_vec(qa.data(), kb.data(), hd);
    const double s2 = dot_vec(q0.data(), kd.data(), hd);
    CHECK(std::abs(s1 - s2) <= 1e-10);
  }
}

TEST_CASE("rope_2d: grid origin is the identity") {
  CounterRng rng(4);
  const RopeParams p = rope_params_2d(8);
  Tensor x = Tensor::randn({2, 8}, rng);
  Tensor y = rope_2d_apply(x, {0, 0}, {0, 0}, p);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("rope_2d with zero columns reduces to rope_1d on the first half") {
  CounterRng rng(5);
  const int64_t hd = 16;
  const RopeParams p2 = rope_params_2d(hd);
  const RopeParams p1 = rope_params_1d(hd / 2);
  Tensor x = Tensor::randn({4, hd}, rng);
  std::vector<int64_t> rows = {3, 0, 7, 2};
  std::vector<int64_t> zeros = {0, 0, 0, 0};
  Tensor y = rope_2d_apply(x, rows, zeros, p2);

  // First half behaves like 1D rope with head_dim/2.
  Tensor first({4, hd / 2});
  for (int64_t t = 0; t < 4; ++t) {
    for (int64_t j = 0; j < hd / 2; ++j) first.data()[t * hd / 2 + j] = x.data()[t * hd + j];
  }
  Tensor want = rope_1d_apply(first, rows, p1);
  for (int64_t t = 0; t < 4; ++t) {
    for (int64_t j = 0; j < hd / 2; ++j) {
      CHECK(y.data()[t * hd + j] == want.data()[t * hd / 2 + j]);
    }
    // Second half untouched.
    for (int64_t j = hd / 2; j < hd; ++j) CHECK(y.data()[t * hd + j] == x.data()[t * hd + j]);
  }
}

TEST_CASE("rope_2d: scores depend only on the grid offset") {
  CounterRng rng(6);
  const int64_t hd = 16;
  const RopeParams p = rope_params_2d(hd);
  for (int trial = 0; trial < 12; ++trial) {
    Tensor q = Tensor::randn({1, hd}, rng);
    Tensor k = Tensor::randn({1, hd}, rng);
    const int64_t r2 = static_cast<int64_t>(rng.next_below(20));
    const int64_t c2 = static_cast<int64_t>(rng.next_below(20));
    const int64_t r1 = r2 + static_cast<int64_t>(rng.next_below(20));
    const int64_t c1 = c2 + static_cast<int64_t>(rng.next_below(20));
    Tensor qa = rope_2d_apply(q, {r1}, {c1}, p);
    Tensor kb = rope_2d_apply(k, {r2}, {c2}, p);
    Tensor qd = rope_2d_apply(q, {r1 - r2}, {c1 - c2}, p);
    Tensor k0 = rope_2d_apply(k, {0}, {0}, p);
    const double s1 = dot_vec(qa.data(), kb.data(), hd);
    const double s2 = dot_vec(qd.data(), k0.data(), hd);
    CHECK(std::abs(s1 - s2) <= 1e-10);
  }
}

TEST_CASE("rope validation errors") {
  CounterRng rng(7);
  Tensor x = Tensor::randn({2, 8}, rng);
  const RopeParams p1 = rope_params_1d(8);
  const RopeParams p2 = rope_params_2d(8);

  CHECK_THROWS_AS(rope_1d_apply(x, {0, 1}, p2), Error);               // mode mismatch
  CHECK_THROWS_AS(rope_2d_apply(x, {0, 1}, {0, 1}, p1), Error);       // mode mismatch
  CHECK_THROWS_AS(rope_1d_apply(x, {0}, p1), Error);                  // position count
  CHECK_THROWS_AS(rope_1d_apply(x, {-1, 0}, p1), Error);              // negative position
  CHECK_THROWS_AS(rope_params_1d(7), Error);                          // odd head_dim
  CHECK_THROWS_AS(rope_params_2d(6), Error);                          // not divisible by 4
  Tensor wide = Tensor::randn({2, 10}, rng);
  CHECK_THROWS_AS(rope_1d_apply(wide, {0, 1}, p1), Error);            // head_dim mismatch
}

TEST_CASE("rope gradients match finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng rng(derive_seed(500, seed));
    Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 8}, rng);
    const RopeParams p1 = rope_params_1d(8);
    const RopeParams p2 = rope_params_2d(8);
    std::vector<int64_t> pos = {0, 5, 11};
    std::vector<int64_t> rows = {0, 1, 2};
    std::vector<int64_t> cols = {2, 0, 1};
    gradcheck([&](const std::vector<Tensor>& ps) {
      return mean(mul(rope_1d_apply(ps[0], pos, p1), w));
    }, {x});
    gradcheck([&](const std::vector<Tensor>& ps) {
      return mean(mul(rope_2d_apply(ps[0], rows, cols, p2), w));
    }, {x});
  }
}
