#pragma once

#include <cstdint>
#include <optional>

#include "exms/tensor.hpp"

namespace exms {

struct AttnConfig {
  int64_t n_heads = 1;
  int64_t n_kv_heads = 1;
  int64_t head_dim = 0;
  bool causal = false;
  std::optional<int64_t> window;  // sliding-window radius; nullopt = unwindowed
};

void validate(const AttnConfig& cfg);

// Grouped-query attention. q is [T x n_heads x d], k/v are [T x n_kv_heads x d];
// query head h reads KV head h / (n_heads / n_kv_heads). Scores are scaled by
// 1/sqrt(d). Masked positions are excluded from the computation entirely
// (exact -inf semantics): causal hides j > i, a window hides |i - j| > window.
Tensor gqa_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg);

// Same result as gqa_attention but walks keys/values in blocks of `chunk`
// positions, maintaining a running max and running denominator per query
// (online softmax). Agreement with the dense path is <= 1e-10 for any chunk.
Tensor chunked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttnConfig& cfg, int64_t chunk);

}  // namespace exms
