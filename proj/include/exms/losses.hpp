#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "exms/tensor.hpp"

namespace exms {

struct LossConfig {
  double beta = 0.1;               // DPO inverse temperature
  int64_t group_size = 4;          // responses per prompt for GROUPER/GRPO
  double zero_variance_eps = 1e-12;  // population-std threshold for degeneracy
};

void validate(const LossConfig& cfg);

// Per-token log-probabilities of one chosen/rejected completion pair under
// the trained policy and the frozen reference. Rank-1 tensors; values <= 0.
struct PreferencePair {
  Tensor chosen_policy;
  Tensor chosen_ref;
  Tensor rejected_policy;
  Tensor rejected_ref;
};

void validate(const PreferencePair& pair);

// G sampled responses for one prompt: scalar rewards plus per-token policy
// log-probabilities (rank-1 tensor per response).
struct RewardGroup {
  std::vector<double> rewards;
  std::vector<Tensor> logprobs;
};

void validate(const RewardGroup& group, const LossConfig& cfg);

Tensor sft_loss(const Tensor& logits, const std::vector<int32_t>& targets,
                const std::vector<uint8_t>& mask);

// -log sigmoid(beta * margin) with sequence-sum log-probs:
// margin = (sum cp - sum cr) - (sum rp - sum rr). At policy == reference the
// loss is exactly log 2. Differentiable through the policy tensors.
Tensor dpo_loss(const PreferencePair& pair, const LossConfig& cfg);

// Z-score rewards with the population std, then rescale min/max to [-1, 1]:
// A_i = 2 (z_i - min z) / (max z - min z) - 1. nullopt when the population
// std is <= zero_variance_eps (constant rewards) -- callers drop the group.
std::optional<std::vector<double>> grouper_advantages(const std::vector<double>& rewards,
                                                      const LossConfig& cfg);

// -(1/G) sum_i A_i * exp(mean token log-prob of response i). Throws
// DegenerateGroup when the advantages are degenerate.
Tensor grouper_loss(const RewardGroup& group, const LossConfig& cfg);

struct GrpoResult {
  std::vector<std::vector<double>> advantages;  // aligned with `surviving`
  std::vector<std::size_t> surviving;           // original indices of kept groups
};

// Mean-only advantages A_i = r_i - mean(group), no std division. Groups with
// (population) zero variance are filtered; EmptyBatch when none survive.
GrpoResult grpo_advantages(const std::vector<std::vector<double>>& rewards,
                           const LossConfig& cfg);

// Surrogate policy-gradient loss -sum_i A_i * mean-token-log-prob(y_i) summed
// over surviving groups.
Tensor grpo_surrogate_loss(const std::vector<RewardGroup>& groups, const LossConfig& cfg);

}  // namespace exms
