#include "exms/rope.hpp"

#include <cmath>

#include "op_common.hpp"

namespace exms {

RopeParams rope_params_1d(int64_t head_dim, double theta_base) {
  RopeParams p{head_dim, theta_base, RopeMode::OneDim};
  validate(p);
  return p;
}

RopeParams rope_params_2d(int64_t head_dim, double theta_base) {
  RopeParams p{head_dim, theta_base, RopeMode::TwoDim};
  validate(p);
  return p;
}

void validate(const RopeParams& params) {
  require(params.head_dim >= 2 && params.head_dim % 2 == 0, Errc::ShapeMismatch,
          "rope head_dim must be a positive even integer, got " +
              std::to_string(params.head_dim));
  require(params.theta_base > 0.0, Errc::InvalidValue, "rope theta_base must be positive");
  if (params.mode == RopeMode::TwoDim) {
    require(params.head_dim % 4 == 0, Errc::ShapeMismatch,
            "two-dimensional rope needs head_dim divisible by 4, got " +
                std::to_string(params.head_dim));
  }
}

namespace {

// Rotate consecutive pairs of a dim-wide block in place. sign -1 applies the
// inverse rotation (used by the backward rules).
void rotate_block(double* x, int64_t dim, int64_t pos, double base, double sign) {
  if (pos == 0) return;
  for (int64_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    const double angle = static_cast<double>(pos) * freq;
    const double c = std::cos(angle);
    const double s = sign * std::sin(angle);
    const double x0 = x[2 * i];
    const double x1 = x[2 * i + 1];
    x[2 * i] = x0 * c - x1 * s;
    x[2 * i + 1] = x0 * s + x1 * c;
  }
}

void apply_1d(double* data, const Shape& shape, const int64_t* positions, double base,
              double sign) {
  const int64_t hd = shape.back();
  const int64_t t_len = shape[shape.size() - 2];
  const int64_t outer = shape_numel(shape) / (t_len * hd);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t t = 0; t < t_len; ++t) {
      rotate_block(data + (o * t_len + t) * hd, hd, positions[t], base, sign);
    }
  }
}

void apply_2d(double* data, const Shape& shape, const int64_t* rows, const int64_t* cols,
              double base, double sign) {
  const int64_t hd = shape.back();
  const int64_t half = hd / 2;
  const int64_t n = shape[shape.size() - 2];
  const int64_t outer = shape_numel(shape) / (n * hd);
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t t = 0; t < n; ++t) {
      double* block = data + (o * n + t) * hd;
      rotate_block(block, half, rows[t], base, sign);
      rotate_block(block + half, half, cols[t], base, sign);
    }
  }
}

std::vector<Tensor> rope_1d_backward(const TapeNode& node, const Tensor& g) {
  Tensor gx = g.detach();
  apply_1d(gx.data(), gx.shape(), node.saved_ints.data(), node.saved_scalars[0], -1.0);
  return {gx};
}

std::vector<Tensor> rope_2d_backward(const TapeNode& node, const Tensor& g) {
  Tensor gx = g.detach();
  const int64_t n = static_cast<int64_t>(node.saved_ints.size()) / 2;
  apply_2d(gx.data(), gx.shape(), node.saved_ints.data(), node.saved_ints.data() + n,
           node.saved_scalars[0], -1.0);
  return {gx};
}

void check_rope_input(const Tensor& x, const RopeParams& params, std::size_t n_positions,
                      const char* op) {
  validate(params);
  require(x.defined(), Errc::InvalidValue, std::string(op) + ": undefined input");
  require(x.rank() >= 2, Errc::ShapeMismatch, std::string(op) + ": input rank must be >= 2");
  require(x.dim(-1) == params.head_dim, Errc::ShapeMismatch,
          std::string(op) + ": last dim " + std::to_string(x.dim(-1)) +
              " != head_dim " + std::to_string(params.head_dim));
  require(static_cast<int64_t>(n_positions) == x.dim(-2), Errc::ShapeMismatch,
          std::string(op) + ": position list length must equal dim(-2)");
}

}  // namespace

Tensor rope_1d_apply(const Tensor& x, const std::vector<int64_t>& positions,
                     const RopeParams& params) {
  require(params.mode == RopeMode::OneDim, Errc::ModeMismatch,
          "rope_1d_apply called with two-dimensional params");
  check_rope_input(x, params, positions.size(), "rope_1d_apply");
  for (int64_t p : positions) {
    require(p >= 0, Errc::InvalidValue, "rope_1d_apply: positions must be non-negative");
  }
  std::vector<double> out(x.data(), x.data() + x.numel());
  apply_1d(out.data(), x.shape(), positions.data(), params.theta_base, 1.0);
  return make_op_output(x.shape(), std::move(out), OpKind::Rope1d, {x}, {},
                        {params.theta_base}, std::vector<int64_t>(positions),
                        &rope_1d_backward);
}

Tensor rope_2d_apply(const Tensor& x, const std::vector<int64_t>& rows,
                     const std::vector<int64_t>& cols, const RopeParams& params) {
  require(params.mode == RopeMode::TwoDim, Errc::ModeMismatch,
          "rope_2d_apply called with one-dimensional params");
  check_rope_input(x, params, rows.size(), "rope_2d_apply");
  require(rows.size() == cols.size(), Errc::ShapeMismatch,
          "rope_2d_apply: rows and cols must have equal length");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && cols[i] >= 0, Errc::InvalidValue,
            "rope_2d_apply: grid coordinates must be non-negative");
  }
  std::vector<int64_t> ints;
  ints.reserve(rows.size() * 2);
  ints.insert(ints.end(), rows.begin(), rows.end());
  ints.insert(ints.end(), cols.begin(), cols.end());
  std::vector<double> out(x.data(), x.data() + x.numel());
  apply_2d(out.data(), x.shape(), rows.data(), cols.data(), params.theta_base, 1.0);
  return make_op_output(x.shape(), std::move(out), OpKind::Rope2d, {x}, {},
                        {params.theta_base}, std::move(ints), &rope_2d_backward);
}

}  // namespace exms
