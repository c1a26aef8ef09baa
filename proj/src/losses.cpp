#include "exms/losses.hpp"

#include <cmath>
#include <string>

namespace exms {

namespace {

void check_logprobs(const Tensor& t, const char* what) {
  require(t.defined() && t.rank() == 1, Errc::ShapeMismatch,
          std::string(what) + " must be a rank-1 tensor");
  require(t.numel() >= 1, Errc::ShapeMismatch, std::string(what) + " must not be empty");
  const double* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i)
    require(std::isfinite(p[i]) && p[i] <= 0.0, Errc::InvalidValue,
            std::string(what) + " must hold finite log-probabilities <= 0");
}

struct Moments {
  double mean = 0.0;
  double std = 0.0;  // population
};

Moments moments(const std::vector<double>& xs) {
  Moments m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(var / static_cast<double>(xs.size()));
  return m;
}

}  // namespace

void validate(const LossConfig& cfg) {
  require(std::isfinite(cfg.beta) && cfg.beta > 0.0, Errc::ConfigError, "beta must be positive");
  require(cfg.group_size >= 2, Errc::ConfigError, "group_size must be >= 2");
  require(std::isfinite(cfg.zero_variance_eps) && cfg.zero_variance_eps >= 0.0, Errc::ConfigError,
          "zero_variance_eps must be finite and >= 0");
}

void validate(const PreferencePair& pair) {
  check_logprobs(pair.chosen_policy, "chosen_policy");
  check_logprobs(pair.chosen_ref, "chosen_ref");
  check_logprobs(pair.rejected_policy, "rejected_policy");
  check_logprobs(pair.rejected_ref, "rejected_ref");
  require(pair.chosen_policy.numel() == pair.chosen_ref.numel(), Errc::ShapeMismatch,
          "chosen policy/reference lengths differ");
  require(pair.rejected_policy.numel() == pair.rejected_ref.numel(), Errc::ShapeMismatch,
          "rejected policy/reference lengths differ");
}

void validate(const RewardGroup& group, const LossConfig& cfg) {
  validate(cfg);
  require(static_cast<int64_t>(group.rewards.size()) == cfg.group_size, Errc::ShapeMismatch,
          "reward group must hold group_size rewards");
  require(group.logprobs.size() == group.rewards.size(), Errc::ShapeMismatch,
          "rewards and responses must align");
  for (double r : group.rewards)
    require(std::isfinite(r), Errc::InvalidValue, "rewards must be finite");
  for (const Tensor& t : group.logprobs) check_logprobs(t, "response logprobs");
}

Tensor sft_loss(const Tensor& logits, const std::vector<int32_t>& targets,
                const std::vector<uint8_t>& mask) {
  return masked_cross_entropy(logits, targets, mask);
}

Tensor dpo_loss(const PreferencePair& pair, const LossConfig& cfg) {
  validate(cfg);
  validate(pair);
  Tensor margin = sub(sub(sum(pair.chosen_policy), sum(pair.chosen_ref)),
                      sub(sum(pair.rejected_policy), sum(pair.rejected_ref)));
  return softplus(mul_scalar(margin, -cfg.beta));  // -log sigmoid(beta * margin)
}

std::optional<std::vector<double>> grouper_advantages(const std::vector<double>& rewards,
                                                      const LossConfig& cfg) {
  validate(cfg);
  require(static_cast<int64_t>(rewards.size()) == cfg.group_size, Errc::ShapeMismatch,
          "reward list must hold group_size entries");
  for (double r : rewards) require(std::isfinite(r), Errc::InvalidValue, "rewards must be finite");
  Moments m = moments(rewards);
  if (m.std <= cfg.zero_variance_eps) return std::nullopt;
  std::vector<double> z(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) z[i] = (rewards[i] - m.mean) / m.std;
  double lo = z[0], hi = z[0];
  for (double v : z) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double& v : z) v = 2.0 * (v - lo) / (hi - lo) - 1.0;
  return z;
}

Tensor grouper_loss(const RewardGroup& group, const LossConfig& cfg) {
  validate(group, cfg);
  std::optional<std::vector<double>> adv = grouper_advantages(group.rewards, cfg);
  require(adv.has_value(), Errc::DegenerateGroup,
          "constant rewards give no GROUPER learning signal");
  Tensor total;
  for (size_t i = 0; i < group.logprobs.size(); ++i) {
    Tensor term = mul_scalar(exp(mean(group.logprobs[i])), (*adv)[i]);
    total = total.defined() ? add(total, term) : term;
  }
  return mul_scalar(total, -1.0 / static_cast<double>(cfg.group_size));
}

GrpoResult grpo_advantages(const std::vector<std::vector<double>>& rewards,
                           const LossConfig& cfg) {
  validate(cfg);
  require(!rewards.empty(), Errc::EmptyBatch, "no reward groups supplied");
  GrpoResult out;
  for (size_t g = 0; g < rewards.size(); ++g) {
    require(static_cast<int64_t>(rewards[g].size()) == cfg.group_size, Errc::ShapeMismatch,
            "reward group must hold group_size entries");
    for (double r : rewards[g])
      require(std::isfinite(r), Errc::InvalidValue, "rewards must be finite");
    Moments m = moments(rewards[g]);
    if (m.std <= cfg.zero_variance_eps) continue;  // constant group: no signal
    std::vector<double> adv(rewards[g].size());
    for (size_t i = 0; i < adv.size(); ++i) adv[i] = rewards[g][i] - m.mean;
    out.advantages.push_back(std::move(adv));
    out.surviving.push_back(g);
  }
  require(!out.surviving.empty(), Errc::EmptyBatch, "every reward group is constant");
  return out;
}

Tensor grpo_surrogate_loss(const std::vector<RewardGroup>& groups, const LossConfig& cfg) {
  validate(cfg);
  require(!groups.empty(), Errc::EmptyBatch, "no reward groups supplied");
  std::vector<std::vector<double>> rewards;
  rewards.reserve(groups.size());
  for (const RewardGroup& g : groups) {
    validate(g, cfg);
    rewards.push_back(g.rewards);
  }
  GrpoResult res = grpo_advantages(rewards, cfg);
  Tensor total;
  for (size_t s = 0; s < res.surviving.size(); ++s) {
    const RewardGroup& g = groups[res.surviving[s]];
    for (size_t i = 0; i < g.logprobs.size(); ++i) {
      Tensor term = mul_scalar(mean(g.logprobs[i]), res.advantages[s][i]);
      total = total.defined() ? add(total, term) : term;
    }
  }
  return mul_scalar(total, -1.0);
}

}  // namespace exms
