#pragma once

#include <cstdint>
#include <vector>

#include "exms/tensor.hpp"

namespace exms {

enum class RopeMode { OneDim, TwoDim };

struct RopeParams {
  int64_t head_dim = 0;
  double theta_base = 10000.0;
  RopeMode mode = RopeMode::OneDim;
};

RopeParams rope_params_1d(int64_t head_dim, double theta_base = 10000.0);
RopeParams rope_params_2d(int64_t head_dim, double theta_base = 10000.0);
void validate(const RopeParams& params);

// Rotates consecutive pairs (x_{2i}, x_{2i+1}) of the last dim by
// pos * theta_base^(-2i/head_dim). x is [... x T x head_dim]; positions has
// length T and indexes dim(-2).
Tensor rope_1d_apply(const Tensor& x, const std::vector<int64_t>& positions,
                     const RopeParams& params);

// First half of head_dim rotated by row index, second half by column index,
// each half using 1D frequencies over head_dim/2.
Tensor rope_2d_apply(const Tensor& x, const std::vector<int64_t>& rows,
                     const std::vector<int64_t>& cols, const RopeParams& params);

}  // namespace exms
