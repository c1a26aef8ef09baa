#include <cmath>

#include <doctest.h>

#include "exms/losses.hpp"
#include "gradcheck.hpp"

using namespace exms;

namespace {

Tensor neg_logprobs(CounterRng& rng, int64_t len, bool needs_grad = false) {
  Tensor t = Tensor::uniform({len}, rng, -3.0, -0.1);
  t.set_requires_grad(needs_grad);
  return t;
}

PreferencePair random_pair(CounterRng& rng, int64_t nc, int64_t nr, bool same = false) {
  PreferencePair pair;
  pair.chosen_policy = neg_logprobs(rng, nc, true);
  pair.rejected_policy = neg_logprobs(rng, nr, true);
  if (same) {
    pair.chosen_ref = pair.chosen_policy.detach();
    pair.rejected_ref = pair.rejected_policy.detach();
  } else {
    pair.chosen_ref = neg_logprobs(rng, nc);
    pair.rejected_ref = neg_logprobs(rng, nr);
  }
  return pair;
}

double sum_of(const Tensor& t) {
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i];
  return s;
}

}  // namespace

TEST_CASE("dpo at policy == reference is exactly log 2") {
  LossConfig cfg;
  CounterRng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    PreferencePair pair = random_pair(rng, 3 + trial % 5, 2 + trial % 7, /*same=*/true);
    double loss = dpo_loss(pair, cfg).item();
    CHECK(std::abs(loss - 0.6931471805599453) <= 1e-12);
  }
}

TEST_CASE("dpo frozen value at margin 2, beta 0.1") {
  LossConfig cfg;  // beta = 0.1
  PreferencePair pair;
  pair.chosen_policy = Tensor({1}, std::vector<double>{-1.0}, true);
  pair.chosen_ref = Tensor({1}, std::vector<double>{-3.0});
  pair.rejected_policy = Tensor({1}, std::vector<double>{-2.0}, true);
  pair.rejected_ref = Tensor({1}, std::vector<double>{-2.0});
  // margin = 2, loss = -log sigmoid(0.2)
  CHECK(std::abs(dpo_loss(pair, cfg).item() - 0.5981388693815918) <= 1e-12);
}

TEST_CASE("dpo gradients push chosen up and rejected down") {
  LossConfig cfg;
  CounterRng rng(7);
  PreferencePair pair = random_pair(rng, 4, 5);
  Tensor loss = dpo_loss(pair, cfg);
  std::vector<Tensor> grads = grad(loss, {pair.chosen_policy, pair.rejected_policy});
  for (int64_t i = 0; i < grads[0].numel(); ++i) CHECK(grads[0].data()[i] < 0.0);
  for (int64_t i = 0; i < grads[1].numel(); ++i) CHECK(grads[1].data()[i] > 0.0);

  // Raising the chosen log-probs strictly lowers the loss.
  double before = loss.item();
  for (int64_t i = 0; i < pair.chosen_policy.numel(); ++i) pair.chosen_policy.data()[i] += 0.05;
  CHECK(dpo_loss(pair, cfg).item() < before);
}

TEST_CASE("dpo matches finite differences") {
  LossConfig cfg;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(900 + seed);
    PreferencePair pair = random_pair(rng, 2 + seed % 4, 3 + seed % 3);
    auto loss_fn = [&](const std::vector<Tensor>&) { return dpo_loss(pair, cfg); };
    testutil::gradcheck(loss_fn, {pair.chosen_policy, pair.rejected_policy});
  }
}

TEST_CASE("dpo validation") {
  LossConfig cfg;
  CounterRng rng(3);
  PreferencePair pair = random_pair(rng, 3, 3);
  pair.chosen_policy.data()[0] = 0.5;  // positive log-prob
  try {
    dpo_loss(pair, cfg);
    FAIL("expected InvalidValue");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::InvalidValue);
  }
  pair = random_pair(rng, 3, 3);
  pair.chosen_ref = neg_logprobs(rng, 4);  // length mismatch
  CHECK_THROWS_AS(dpo_loss(pair, cfg), Error);
  pair = random_pair(rng, 3, 3);
  LossConfig bad;
  bad.beta = 0.0;
  try {
    dpo_loss(pair, bad);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::ConfigError);
  }
}

TEST_CASE("grouper advantages frozen values") {
  LossConfig cfg;
  auto a = grouper_advantages({1.0, 2.0, 3.0, 4.0}, cfg);
  REQUIRE(a.has_value());
  CHECK(std::abs((*a)[0] - (-1.0)) <= 1e-12);
  CHECK(std::abs((*a)[1] - (-1.0 / 3.0)) <= 1e-12);
  CHECK(std::abs((*a)[2] - (1.0 / 3.0)) <= 1e-12);
  CHECK(std::abs((*a)[3] - 1.0) <= 1e-12);

  auto b = grouper_advantages({0.0, 0.0, 1.0, 1.0}, cfg);
  REQUIRE(b.has_value());
  CHECK((*b)[0] == -1.0);
  CHECK((*b)[1] == -1.0);
  CHECK((*b)[2] == 1.0);
  CHECK((*b)[3] == 1.0);
}

TEST_CASE("grouper advantages are affine invariant and span [-1, 1]") {
  LossConfig cfg;
  CounterRng rng(55);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> r(4);
    for (double& x : r) x = rng.next_uniform() * 10.0 - 5.0;
    r[1] += 1.0;  // ensure spread
    auto base = grouper_advantages(r, cfg);
    REQUIRE(base.has_value());
    double scale = 0.5 + rng.next_uniform() * 4.0;
    double shift = rng.next_uniform() * 20.0 - 10.0;
    std::vector<double> t(4);
    for (size_t i = 0; i < 4; ++i) t[i] = scale * r[i] + shift;
    auto moved = grouper_advantages(t, cfg);
    REQUIRE(moved.has_value());
    double lo = 1e30, hi = -1e30;
    for (size_t i = 0; i < 4; ++i) {
      CHECK(std::abs((*base)[i] - (*moved)[i]) <= 1e-9);
      CHECK((*base)[i] >= -1.0 - 1e-12);
      CHECK((*base)[i] <= 1.0 + 1e-12);
      lo = std::min(lo, (*base)[i]);
      hi = std::max(hi, (*base)[i]);
    }
    CHECK(lo == -1.0);  // endpoints attained exactly
    CHECK(hi == 1.0);
  }
}

TEST_CASE("grouper degenerates on constant rewards") {
  LossConfig cfg;
  CHECK_FALSE(grouper_advantages({5.0, 5.0, 5.0, 5.0}, cfg).has_value());
  // Sub-epsilon spread counts as constant too.
  CHECK_FALSE(grouper_advantages({5.0, 5.0, 5.0, 5.0 + 1e-13}, cfg).has_value());
  CHECK(grouper_advantages({5.0, 5.0, 5.0, 5.1}, cfg).has_value());

  CounterRng rng(9);
  RewardGroup g;
  g.rewards = {2.0, 2.0, 2.0, 2.0};
  for (int i = 0; i < 4; ++i) g.logprobs.push_back(neg_logprobs(rng, 3));
  try {
    grouper_loss(g, cfg);
    FAIL("expected DegenerateGroup");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::DegenerateGroup);
  }
}

TEST_CASE("grouper loss value matches the formula") {
  LossConfig cfg;
  CounterRng rng(21);
  RewardGroup g;
  g.rewards = {1.0, 2.0, 3.0, 4.0};
  for (int i = 0; i < 4; ++i) g.logprobs.push_back(neg_logprobs(rng, 2 + i));
  double expect = 0.0;
  std::vector<double> adv = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
  for (int i = 0; i < 4; ++i) {
    double m = sum_of(g.logprobs[i]) / static_cast<double>(g.logprobs[i].numel());
    expect += adv[i] * std::exp(m);
  }
  expect *= -0.25;
  CHECK(std::abs(grouper_loss(g, cfg).item() - expect) <= 1e-12);
}

TEST_CASE("grouper loss matches finite differences") {
  LossConfig cfg;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(300 + seed);
    RewardGroup g;
    for (int i = 0; i < 4; ++i) {
      g.rewards.push_back(rng.next_uniform() * 4.0 + (i == 0 ? 1.0 : 0.0));
      g.logprobs.push_back(neg_logprobs(rng, 2 + (seed + i) % 4, /*needs_grad=*/true));
    }
    if (!grouper_advantages(g.rewards, cfg).has_value()) continue;
    auto loss_fn = [&](const std::vector<Tensor>&) { return grouper_loss(g, cfg); };
    testutil::gradcheck(loss_fn, g.logprobs);
  }
}

TEST_CASE("grpo advantages subtract the group mean and filter constants") {
  LossConfig cfg;
  std::vector<std::vector<double>> rewards = {
      {1.0, 2.0, 3.0, 4.0}, {7.0, 7.0, 7.0, 7.0}, {0.0, 1.0, 0.0, 1.0}};
  GrpoResult res = grpo_advantages(rewards, cfg);
  REQUIRE(res.surviving == std::vector<std::size_t>{0, 2});
  REQUIRE(res.advantages.size() == 2);
  CHECK(std::abs(res.advantages[0][0] - (-1.5)) <= 1e-12);
  CHECK(std::abs(res.advantages[0][3] - 1.5) <= 1e-12);
  for (const std::vector<double>& adv : res.advantages) {
    double s = 0.0;
    for (double a : adv) s += a;
    CHECK(std::abs(s) <= 1e-12);  // zero-sum within each surviving group
  }

  try {
    grpo_advantages({{3.0, 3.0, 3.0, 3.0}, {1.0, 1.0, 1.0, 1.0}}, cfg);
    FAIL("expected EmptyBatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::EmptyBatch);
  }
  CHECK_THROWS_AS(grpo_advantages({}, cfg), Error);
}

TEST_CASE("grpo surrogate loss ignores constant groups") {
  LossConfig cfg;
  CounterRng rng(77);
  RewardGroup live;
  live.rewards = {0.0, 1.0, 2.0, 3.0};
  for (int i = 0; i < 4; ++i) live.logprobs.push_back(neg_logprobs(rng, 3));
  RewardGroup flat;
  flat.rewards = {1.0, 1.0, 1.0, 1.0};
  for (int i = 0; i < 4; ++i) flat.logprobs.push_back(neg_logprobs(rng, 3));

  double with_flat = grpo_surrogate_loss({flat, live}, cfg).item();
  double alone = grpo_surrogate_loss({live}, cfg).item();
  CHECK(with_flat == alone);

  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    double m = sum_of(live.logprobs[i]) / static_cast<double>(live.logprobs[i].numel());
    expect += (live.rewards[i] - 1.5) * m;
  }
  CHECK(std::abs(alone - (-expect)) <= 1e-12);
}

TEST_CASE("grpo surrogate matches finite differences") {
  LossConfig cfg;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    CounterRng rng(500 + seed);
    std::vector<RewardGroup> groups(2);
    std::vector<Tensor> params;
    for (RewardGroup& g : groups) {
      for (int i = 0; i < 4; ++i) {
        g.rewards.push_back(rng.next_uniform() * 3.0 + (i == 1 ? 0.7 : 0.0));
        g.logprobs.push_back(neg_logprobs(rng, 2 + (seed + i) % 3, /*needs_grad=*/true));
        params.push_back(g.logprobs.back());
      }
    }
    auto loss_fn = [&](const std::vector<Tensor>&) { return grpo_surrogate_loss(groups, cfg); };
    testutil::gradcheck(loss_fn, params);
  }
}

TEST_CASE("reward group validation") {
  LossConfig cfg;
  CounterRng rng(2);
  RewardGroup g;
  g.rewards = {1.0, 2.0, 3.0};  // wrong size
  for (int i = 0; i < 3; ++i) g.logprobs.push_back(neg_logprobs(rng, 2));
  CHECK_THROWS_AS(grouper_loss(g, cfg), Error);
  g.rewards.push_back(4.0);
  CHECK_THROWS_AS(grouper_loss(g, cfg), Error);  // logprobs misaligned
  g.logprobs.push_back(neg_logprobs(rng, 2));
  CHECK_NOTHROW(grouper_loss(g, cfg));
  g.logprobs[0].data()[0] = 0.25;
  CHECK_THROWS_AS(grouper_loss(g, cfg), Error);
}

TEST_CASE("sft loss wraps masked cross entropy") {
  CounterRng rng(11);
  Tensor logits = Tensor::randn({5, 7}, rng);
  std::vector<int32_t> targets = {1, 4, 0, 6, 2};
  std::vector<uint8_t> mask = {1, 0, 1, 1, 0};
  CHECK(sft_loss(logits, targets, mask).item() ==
        masked_cross_entropy(logits, targets, mask).item());
}
