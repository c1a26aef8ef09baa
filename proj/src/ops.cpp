#include <cmath>
#include <cstring>
#include <unordered_set>

#include "exms/kernels.hpp"
#include "exms/tensor.hpp"
#include "op_common.hpp"

namespace exms {

namespace detail {

void mm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::memset(c, 0, static_cast<std::size_t>(m * n) * sizeof(double));
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      kernels::axpy(arow[l], b + l * n, crow, static_cast<std::size_t>(n));
    }
  }
}

void mm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      c[i * n + j] = kernels::dot(a + i * k, b + j * k, static_cast<std::size_t>(k));
    }
  }
}

void mm_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  std::memset(c, 0, static_cast<std::size_t>(k * n) * sizeof(double));
  for (int64_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      kernels::axpy(a[i * k + l], brow, c + l * n, static_cast<std::size_t>(n));
    }
  }
}

double softmax_row(const double* x, double* p, int64_t n) {
  const double m = kernels::max(x, static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) p[i] = std::exp(x[i] - m);
  const double s = kernels::sum(p, static_cast<std::size_t>(n));
  kernels::scale(1.0 / s, p, static_cast<std::size_t>(n));
  return m + std::log(s);
}

}  // namespace detail

namespace {

bool is_suffix(const Shape& suffix, const Shape& full) {
  if (suffix.size() > full.size()) return false;
  const std::size_t off = full.size() - suffix.size();
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    if (suffix[i] != full[off + i]) return false;
  }
  return true;
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined(), Errc::InvalidValue,
          std::string(op) + ": undefined operand");
  require(is_suffix(b.shape(), a.shape()), Errc::ShapeMismatch,
          std::string(op) + ": shape " + shape_str(b.shape()) +
              " is not a trailing suffix of " + shape_str(a.shape()));
}

// Sums g (shape of a) over leading dims down to the suffix shape of b.
Tensor reduce_to_suffix(const Tensor& g, const Shape& bshape) {
  Tensor out(bshape);
  const int64_t m = out.numel();
  const int64_t blocks = g.numel() / m;
  for (int64_t blk = 0; blk < blocks; ++blk) {
    kernels::add(out.data(), g.data() + blk * m, out.data(), static_cast<std::size_t>(m));
  }
  return out;
}

std::vector<Tensor> add_backward(const TapeNode& node, const Tensor& g) {
  return {g.detach(), reduce_to_suffix(g, node.inputs[1].shape())};
}

std::vector<Tensor> sub_backward(const TapeNode& node, const Tensor& g) {
  Tensor gb = reduce_to_suffix(g, node.inputs[1].shape());
  kernels::scale(-1.0, gb.data(), static_cast<std::size_t>(gb.numel()));
  return {g.detach(), gb};
}

std::vector<Tensor> mul_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const Tensor& b = node.inputs[1];
  const int64_t m = b.numel();
  const int64_t blocks = a.numel() / m;
  Tensor ga(a.shape());
  Tensor gb(b.shape());
  std::vector<double> tmp(static_cast<std::size_t>(m));
  for (int64_t blk = 0; blk < blocks; ++blk) {
    const int64_t off = blk * m;
    kernels::mul(g.data() + off, b.data(), ga.data() + off, static_cast<std::size_t>(m));
    kernels::mul(g.data() + off, a.data() + off, tmp.data(), static_cast<std::size_t>(m));
    kernels::add(gb.data(), tmp.data(), gb.data(), static_cast<std::size_t>(m));
  }
  return {ga, gb};
}

Tensor binary_forward(const Tensor& a, const Tensor& b, OpKind kind, const char* name,
                      void (*kernel)(const double*, const double*, double*, std::size_t),
                      BackwardFn backward) {
  check_broadcast(a, b, name);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const int64_t m = b.numel();
  const int64_t blocks = a.numel() / m;
  for (int64_t blk = 0; blk < blocks; ++blk) {
    kernel(a.data() + blk * m, b.data(), out.data() + blk * m, static_cast<std::size_t>(m));
  }
  return make_op_output(a.shape(), std::move(out), kind, {a, b}, {}, {}, {}, backward);
}

std::vector<Tensor> add_scalar_backward(const TapeNode&, const Tensor& g) {
  return {g.detach()};
}

std::vector<Tensor> mul_scalar_backward(const TapeNode& node, const Tensor& g) {
  Tensor ga = g.detach();
  kernels::scale(node.saved_scalars[0], ga.data(), static_cast<std::size_t>(ga.numel()));
  return {ga};
}

std::vector<Tensor> matmul_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const Tensor& b = node.inputs[1];
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor ga(a.shape());
  Tensor gb(b.shape());
  detail::mm_nt(g.data(), b.data(), ga.data(), m, n, k);  // [m,n] * [k,n]^T -> [m,k]
  detail::mm_tn(a.data(), g.data(), gb.data(), m, k, n);  // [m,k]^T * [m,n] -> [k,n]
  return {ga, gb};
}

std::vector<Tensor> transpose_backward(const TapeNode& node, const Tensor& g) {
  const int64_t r = node.inputs[0].dim(0), c = node.inputs[0].dim(1);
  Tensor ga({r, c});
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) ga.data()[i * c + j] = g.data()[j * r + i];
  }
  return {ga};
}

std::vector<Tensor> reshape_backward(const TapeNode& node, const Tensor& g) {
  std::vector<double> data(g.data(), g.data() + g.numel());
  return {Tensor(node.inputs[0].shape(), std::move(data))};
}

std::vector<Tensor> exp_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& out = node.saved[0];
  Tensor ga(out.shape());
  kernels::mul(g.data(), out.data(), ga.data(), static_cast<std::size_t>(ga.numel()));
  return {ga};
}

std::vector<Tensor> log_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& x = node.inputs[0];
  Tensor ga(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) ga.data()[i] = g.data()[i] / x.data()[i];
  return {ga};
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<Tensor> softplus_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& x = node.inputs[0];
  Tensor ga(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) ga.data()[i] = g.data()[i] * sigmoid(x.data()[i]);
  return {ga};
}

std::vector<Tensor> silu_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& x = node.inputs[0];
  Tensor ga(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double s = sigmoid(x.data()[i]);
    ga.data()[i] = g.data()[i] * (s + x.data()[i] * s * (1.0 - s));
  }
  return {ga};
}

std::vector<Tensor> sum_backward(const TapeNode& node, const Tensor& g) {
  return {Tensor::full(node.inputs[0].shape(), g.item())};
}

std::vector<Tensor> mean_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& x = node.inputs[0];
  return {Tensor::full(x.shape(), g.item() / static_cast<double>(x.numel()))};
}

std::vector<Tensor> softmax_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& p = node.saved[0];
  const int64_t d = p.dim(-1);
  const int64_t rows = p.numel() / d;
  Tensor ga(p.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* pr = p.data() + r * d;
    const double* gr = g.data() + r * d;
    double* or_ = ga.data() + r * d;
    const double dotgp = kernels::dot(gr, pr, static_cast<std::size_t>(d));
    for (int64_t j = 0; j < d; ++j) or_[j] = pr[j] * (gr[j] - dotgp);
  }
  return {ga};
}

std::vector<Tensor> rms_norm_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& x = node.inputs[0];
  const Tensor& gain = node.inputs[1];
  const Tensor& inv = node.saved[0];  // [rows], 1/sqrt(mean(x^2)+eps)
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  Tensor gx(x.shape());
  Tensor ggain(gain.shape());
  std::vector<double> gg(static_cast<std::size_t>(d));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double* gr = g.data() + r * d;
    double* gxr = gx.data() + r * d;
    const double s = inv.data()[r];
    kernels::mul(gr, gain.data(), gg.data(), static_cast<std::size_t>(d));
    const double c = kernels::dot(gg.data(), xr, static_cast<std::size_t>(d));
    const double coef = s * s * s * c / static_cast<double>(d);
    for (int64_t j = 0; j < d; ++j) gxr[j] = s * gg[j] - coef * xr[j];
    // d/dgain_j = g_j * x_j * s, accumulated over rows
    for (int64_t j = 0; j < d; ++j) ggain.data()[j] += gr[j] * xr[j] * s;
  }
  return {gx, ggain};
}

std::vector<Tensor> masked_ce_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& logits = node.inputs[0];
  const Tensor& probs = node.saved[0];
  const int64_t t_len = logits.dim(0);
  const int64_t v = logits.dim(1);
  const int64_t count = node.saved_ints[2 * t_len];
  const double scale = g.item() / static_cast<double>(count);
  Tensor gl(logits.shape());
  for (int64_t t = 0; t < t_len; ++t) {
    if (!node.saved_ints[t_len + t]) continue;
    const int64_t target = node.saved_ints[t];
    const double* pr = probs.data() + t * v;
    double* gr = gl.data() + t * v;
    for (int64_t j = 0; j < v; ++j) gr[j] = scale * pr[j];
    gr[target] -= scale;
  }
  return {gl};
}

std::vector<Tensor> gather_logprobs_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& logits = node.inputs[0];
  const Tensor& probs = node.saved[0];  // [len, v], rows for [begin, end)
  const int64_t v = logits.dim(1);
  const int64_t begin = node.saved_ints[0];
  const int64_t len = probs.dim(0);
  Tensor gl(logits.shape());
  for (int64_t r = 0; r < len; ++r) {
    const double gv = g.data()[r];
    const int64_t target = node.saved_ints[2 + r];
    const double* pr = probs.data() + r * v;
    double* gr = gl.data() + (begin + r) * v;
    for (int64_t j = 0; j < v; ++j) gr[j] = -gv * pr[j];
    gr[target] += gv;
  }
  return {gl};
}

std::vector<Tensor> embedding_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& table = node.inputs[0];
  const int64_t d = table.dim(1);
  Tensor gt(table.shape());
  for (std::size_t t = 0; t < node.saved_ints.size(); ++t) {
    double* dst = gt.data() + node.saved_ints[t] * d;
    kernels::add(dst, g.data() + static_cast<int64_t>(t) * d, dst, static_cast<std::size_t>(d));
  }
  return {gt};
}

std::vector<Tensor> overwrite_rows_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& rows = node.inputs[1];
  const int64_t d = rows.dim(1);
  Tensor gbase = g.detach();
  Tensor grows(rows.shape());
  for (std::size_t m = 0; m < node.saved_ints.size(); ++m) {
    const int64_t r = node.saved_ints[m];
    std::memcpy(grows.data() + static_cast<int64_t>(m) * d, g.data() + r * d,
                static_cast<std::size_t>(d) * sizeof(double));
    std::memset(gbase.data() + r * d, 0, static_cast<std::size_t>(d) * sizeof(double));
  }
  return {gbase, grows};
}

std::vector<Tensor> concat_lastdim_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const Tensor& b = node.inputs[1];
  const int64_t da = a.dim(-1), db = b.dim(-1);
  const int64_t rows = a.numel() / da;
  Tensor ga(a.shape());
  Tensor gb(b.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* gr = g.data() + r * (da + db);
    std::memcpy(ga.data() + r * da, gr, static_cast<std::size_t>(da) * sizeof(double));
    std::memcpy(gb.data() + r * db, gr + da, static_cast<std::size_t>(db) * sizeof(double));
  }
  return {ga, gb};
}

std::vector<Tensor> slice_rows_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const int64_t begin = node.saved_ints[0];
  const int64_t row_sz = a.numel() / a.dim(0);
  Tensor ga(a.shape());
  std::memcpy(ga.data() + begin * row_sz, g.data(),
              static_cast<std::size_t>(g.numel()) * sizeof(double));
  return {ga};
}

std::vector<Tensor> swap01_backward(const TapeNode&, const Tensor& g);

std::vector<Tensor> slice_lastdim_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const int64_t begin = node.saved_ints[0];
  const int64_t count = node.saved_ints[1];
  const int64_t d = a.dim(-1);
  const int64_t rows = a.numel() / d;
  Tensor ga(a.shape());
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(ga.data() + r * d + begin, g.data() + r * count,
                static_cast<std::size_t>(count) * sizeof(double));
  }
  return {ga};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_forward(a, b, OpKind::Add, "add", &kernels::add, &add_backward);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_forward(a, b, OpKind::Sub, "sub", &kernels::sub, &sub_backward);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_forward(a, b, OpKind::Mul, "mul", &kernels::mul, &mul_backward);
}

Tensor add_scalar(const Tensor& a, double c) {
  require(a.defined(), Errc::InvalidValue, "add_scalar: undefined operand");
  std::vector<double> out(a.data(), a.data() + a.numel());
  for (double& v : out) v += c;
  return make_op_output(a.shape(), std::move(out), OpKind::AddScalar, {a}, {}, {c}, {},
                        &add_scalar_backward);
}

Tensor mul_scalar(const Tensor& a, double c) {
  require(a.defined(), Errc::InvalidValue, "mul_scalar: undefined operand");
  std::vector<double> out(a.data(), a.data() + a.numel());
  for (double& v : out) v *= c;
  return make_op_output(a.shape(), std::move(out), OpKind::MulScalar, {a}, {}, {c}, {},
                        &mul_scalar_backward);
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), Errc::InvalidValue, "matmul: undefined operand");
  require(a.rank() == 2 && b.rank() == 2, Errc::ShapeMismatch,
          "matmul requires rank-2 operands, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), Errc::ShapeMismatch,
          "matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::mm_nn(a.data(), b.data(), out.data(), m, k, n);
  return make_op_output({m, n}, std::move(out), OpKind::Matmul, {a, b}, {}, {}, {},
                        &matmul_backward);
}

Tensor transpose(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "transpose: undefined operand");
  require(a.rank() == 2, Errc::ShapeMismatch,
          "transpose requires a rank-2 tensor, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(static_cast<std::size_t>(r * c));
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(j * r + i)] = a.data()[i * c + j];
  }
  return make_op_output({c, r}, std::move(out), OpKind::Transpose, {a}, {}, {}, {},
                        &transpose_backward);
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(a.defined(), Errc::InvalidValue, "reshape: undefined operand");
  require(shape_numel(shape) == a.numel(), Errc::ShapeMismatch,
          "reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
              " changes element count");
  std::vector<double> out(a.data(), a.data() + a.numel());
  return make_op_output(std::move(shape), std::move(out), OpKind::Reshape, {a}, {}, {}, {},
                        &reshape_backward);
}

Tensor exp(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "exp: undefined operand");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) out[static_cast<std::size_t>(i)] = std::exp(a.data()[i]);
  Tensor saved(a.shape(), out);
  return make_op_output(a.shape(), std::move(out), OpKind::Exp, {a}, {saved}, {}, {},
                        &exp_backward);
}

Tensor log(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "log: undefined operand");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) {
    require(a.data()[i] > 0.0, Errc::InvalidValue, "log of a non-positive value");
    out[static_cast<std::size_t>(i)] = std::log(a.data()[i]);
  }
  return make_op_output(a.shape(), std::move(out), OpKind::Log, {a}, {}, {}, {}, &log_backward);
}

Tensor softplus(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "softplus: undefined operand");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i];
    out[static_cast<std::size_t>(i)] =
        x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  return make_op_output(a.shape(), std::move(out), OpKind::Softplus, {a}, {}, {}, {},
                        &softplus_backward);
}

Tensor silu(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "silu: undefined operand");
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (int64_t i = 0; i < a.numel(); ++i) {
    out[static_cast<std::size_t>(i)] = a.data()[i] * sigmoid(a.data()[i]);
  }
  return make_op_output(a.shape(), std::move(out), OpKind::Silu, {a}, {}, {}, {},
                        &silu_backward);
}

Tensor sum(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "sum: undefined operand");
  const double s = kernels::sum(a.data(), static_cast<std::size_t>(a.numel()));
  return make_op_output({}, {s}, OpKind::Sum, {a}, {}, {}, {}, &sum_backward);
}

Tensor mean(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "mean: undefined operand");
  const double s = kernels::sum(a.data(), static_cast<std::size_t>(a.numel()));
  return make_op_output({}, {s / static_cast<double>(a.numel())}, OpKind::Mean, {a}, {}, {}, {},
                        &mean_backward);
}

Tensor softmax_lastdim(const Tensor& x) {
  require(x.defined(), Errc::InvalidValue, "softmax_lastdim: undefined operand");
  require(x.rank() >= 1, Errc::ShapeMismatch, "softmax_lastdim requires rank >= 1");
  const int64_t d = x.dim(-1);
  const int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    detail::softmax_row(x.data() + r * d, out.data() + r * d, d);
  }
  Tensor saved(x.shape(), out);
  return make_op_output(x.shape(), std::move(out), OpKind::SoftmaxLastDim, {x}, {saved}, {}, {},
                        &softmax_backward);
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
  require(x.defined() && gain.defined(), Errc::InvalidValue, "rms_norm: undefined operand");
  require(x.rank() >= 1, Errc::ShapeMismatch, "rms_norm requires rank >= 1");
  require(eps >= 0.0, Errc::InvalidValue, "rms_norm: eps must be non-negative");
  const int64_t d = x.dim(-1);
  require(gain.rank() == 1 && gain.dim(0) == d, Errc::ShapeMismatch,
          "rms_norm gain must have shape [" + std::to_string(d) + "], got " +
              shape_str(gain.shape()));
  const int64_t rows = x.numel() / d;
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  std::vector<double> invs(static_cast<std::size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    const double ms =
        kernels::dot(xr, xr, static_cast<std::size_t>(d)) / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    invs[static_cast<std::size_t>(r)] = inv;
    double* o = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j) o[j] = xr[j] * inv * gain.data()[j];
  }
  Tensor saved_inv({rows}, std::move(invs));
  return make_op_output(x.shape(), std::move(out), OpKind::RmsNorm, {x, gain}, {saved_inv},
                        {eps}, {}, &rms_norm_backward);
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int32_t>& targets,
                            const std::vector<uint8_t>& mask) {
  require(logits.defined(), Errc::InvalidValue, "masked_cross_entropy: undefined logits");
  require(logits.rank() == 2, Errc::ShapeMismatch,
          "masked_cross_entropy expects [T, vocab] logits, got " + shape_str(logits.shape()));
  const int64_t t_len = logits.dim(0);
  const int64_t v = logits.dim(1);
  require(static_cast<int64_t>(targets.size()) == t_len &&
              static_cast<int64_t>(mask.size()) == t_len,
          Errc::ShapeMismatch, "masked_cross_entropy: targets/mask length must equal T");

  int64_t count = 0;
  for (uint8_t f : mask) count += f ? 1 : 0;
  require(count > 0, Errc::AllMasked, "masked_cross_entropy: every position is masked out");

  Tensor probs({t_len, v});
  std::vector<int64_t> ints(static_cast<std::size_t>(2 * t_len + 1), 0);
  std::vector<double> row(static_cast<std::size_t>(v));
  double total = 0.0;
  for (int64_t t = 0; t < t_len; ++t) {
    ints[static_cast<std::size_t>(t)] = targets[static_cast<std::size_t>(t)];
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const int32_t target = targets[static_cast<std::size_t>(t)];
    require(target >= 0 && target < v, Errc::InvalidValue,
            "masked_cross_entropy: target out of vocab range at position " + std::to_string(t));
    ints[static_cast<std::size_t>(t_len + t)] = 1;
    const double lse = detail::softmax_row(logits.data() + t * v, row.data(), v);
    std::memcpy(probs.data() + t * v, row.data(), static_cast<std::size_t>(v) * sizeof(double));
    total += lse - logits.data()[t * v + target];
  }
  ints[static_cast<std::size_t>(2 * t_len)] = count;
  const double loss = total / static_cast<double>(count);
  return make_op_output({}, {loss}, OpKind::MaskedCrossEntropy, {logits}, {probs}, {},
                        std::move(ints), &masked_ce_backward);
}

Tensor gather_logprobs(const Tensor& logits, const std::vector<int32_t>& targets,
                       int64_t begin, int64_t end) {
  require(logits.defined(), Errc::InvalidValue, "gather_logprobs: undefined logits");
  require(logits.rank() == 2, Errc::ShapeMismatch,
          "gather_logprobs expects [T, vocab] logits, got " + shape_str(logits.shape()));
  const int64_t t_len = logits.dim(0);
  const int64_t v = logits.dim(1);
  require(begin >= 0 && begin < end && end <= t_len, Errc::ShapeMismatch,
          "gather_logprobs: range [" + std::to_string(begin) + ", " + std::to_string(end) +
              ") invalid for T=" + std::to_string(t_len));
  require(static_cast<int64_t>(targets.size()) >= end, Errc::ShapeMismatch,
          "gather_logprobs: targets shorter than range end");
  const int64_t len = end - begin;
  Tensor probs({len, v});
  std::vector<int64_t> ints;
  ints.reserve(static_cast<std::size_t>(2 + len));
  ints.push_back(begin);
  ints.push_back(end);
  std::vector<double> out(static_cast<std::size_t>(len));
  for (int64_t r = 0; r < len; ++r) {
    const int32_t target = targets[static_cast<std::size_t>(begin + r)];
    require(target >= 0 && target < v, Errc::InvalidValue,
            "gather_logprobs: target out of vocab range");
    ints.push_back(target);
    const double lse = detail::softmax_row(logits.data() + (begin + r) * v,
                                           probs.data() + r * v, v);
    out[static_cast<std::size_t>(r)] = logits.data()[(begin + r) * v + target] - lse;
  }
  return make_op_output({len}, std::move(out), OpKind::GatherLogProbs, {logits}, {probs}, {},
                        std::move(ints), &gather_logprobs_backward);
}

Tensor embedding(const Tensor& table, const std::vector<int32_t>& ids) {
  require(table.defined(), Errc::InvalidValue, "embedding: undefined table");
  require(table.rank() == 2, Errc::ShapeMismatch,
          "embedding table must be [vocab, dim], got " + shape_str(table.shape()));
  require(!ids.empty(), Errc::ShapeMismatch, "embedding: empty id list");
  const int64_t v = table.dim(0), d = table.dim(1);
  const int64_t t_len = static_cast<int64_t>(ids.size());
  std::vector<double> out(static_cast<std::size_t>(t_len * d));
  std::vector<int64_t> ints(ids.size());
  for (int64_t t = 0; t < t_len; ++t) {
    const int32_t id = ids[static_cast<std::size_t>(t)];
    require(id >= 0 && id < v, Errc::InvalidValue,
            "embedding: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
    ints[static_cast<std::size_t>(t)] = id;
    std::memcpy(out.data() + t * d, table.data() + static_cast<int64_t>(id) * d,
                static_cast<std::size_t>(d) * sizeof(double));
  }
  return make_op_output({t_len, d}, std::move(out), OpKind::Embedding, {table}, {}, {},
                        std::move(ints), &embedding_backward);
}

Tensor overwrite_rows(const Tensor& base, const std::vector<int64_t>& row_idx,
                      const Tensor& rows) {
  require(base.defined() && rows.defined(), Errc::InvalidValue,
          "overwrite_rows: undefined operand");
  require(base.rank() == 2 && rows.rank() == 2, Errc::ShapeMismatch,
          "overwrite_rows expects rank-2 tensors");
  require(base.dim(1) == rows.dim(1), Errc::ShapeMismatch,
          "overwrite_rows: row width mismatch: " + shape_str(base.shape()) + " vs " +
              shape_str(rows.shape()));
  require(static_cast<int64_t>(row_idx.size()) == rows.dim(0), Errc::ShapeMismatch,
          "overwrite_rows: index count must match rows");
  const int64_t d = base.dim(1);
  std::unordered_set<int64_t> dup;
  std::vector<double> out(base.data(), base.data() + base.numel());
  for (std::size_t m = 0; m < row_idx.size(); ++m) {
    const int64_t r = row_idx[m];
    require(r >= 0 && r < base.dim(0), Errc::ShapeMismatch,
            "overwrite_rows: row index out of range");
    require(dup.insert(r).second, Errc::InvalidValue, "overwrite_rows: duplicate row index");
    std::memcpy(out.data() + r * d, rows.data() + static_cast<int64_t>(m) * d,
                static_cast<std::size_t>(d) * sizeof(double));
  }
  return make_op_output(base.shape(), std::move(out), OpKind::OverwriteRows, {base, rows}, {},
                        {}, std::vector<int64_t>(row_idx), &overwrite_rows_backward);
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), Errc::InvalidValue, "concat_lastdim: undefined operand");
  require(a.rank() == b.rank() && a.rank() >= 1, Errc::ShapeMismatch,
          "concat_lastdim: rank mismatch");
  for (int i = 0; i + 1 < a.rank(); ++i) {
    require(a.dim(i) == b.dim(i), Errc::ShapeMismatch,
            "concat_lastdim: leading dims differ: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
  }
  const int64_t da = a.dim(-1), db = b.dim(-1);
  const int64_t rows = a.numel() / da;
  Shape out_shape = a.shape();
  out_shape.back() = da + db;
  std::vector<double> out(static_cast<std::size_t>(rows * (da + db)));
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (da + db), a.data() + r * da,
                static_cast<std::size_t>(da) * sizeof(double));
    std::memcpy(out.data() + r * (da + db) + da, b.data() + r * db,
                static_cast<std::size_t>(db) * sizeof(double));
  }
  return make_op_output(std::move(out_shape), std::move(out), OpKind::ConcatLastDim, {a, b}, {},
                        {}, {}, &concat_lastdim_backward);
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count) {
  require(a.defined(), Errc::InvalidValue, "slice_rows: undefined operand");
  require(a.rank() >= 1, Errc::ShapeMismatch, "slice_rows requires rank >= 1");
  require(begin >= 0 && count >= 1 && begin + count <= a.dim(0), Errc::ShapeMismatch,
          "slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
              ") invalid for dim0=" + std::to_string(a.dim(0)));
  const int64_t row_sz = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape[0] = count;
  std::vector<double> out(a.data() + begin * row_sz, a.data() + (begin + count) * row_sz);
  return make_op_output(std::move(out_shape), std::move(out), OpKind::SliceRows, {a}, {}, {},
                        {begin, count}, &slice_rows_backward);
}

Tensor slice_lastdim(const Tensor& a, int64_t begin, int64_t count) {
  require(a.defined(), Errc::InvalidValue, "slice_lastdim: undefined operand");
  require(a.rank() >= 1, Errc::ShapeMismatch, "slice_lastdim requires rank >= 1");
  const int64_t d = a.dim(-1);
  require(begin >= 0 && count >= 1 && begin + count <= d, Errc::ShapeMismatch,
          "slice_lastdim: range invalid for last dim " + std::to_string(d));
  const int64_t rows = a.numel() / d;
  Shape out_shape = a.shape();
  out_shape.back() = count;
  std::vector<double> out(static_cast<std::size_t>(rows * count));
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * count, a.data() + r * d + begin,
                static_cast<std::size_t>(count) * sizeof(double));
  }
  return make_op_output(std::move(out_shape), std::move(out), OpKind::SliceLastDim, {a}, {}, {},
                        {begin, count}, &slice_lastdim_backward);
}

Tensor swap01(const Tensor& a) {
  require(a.defined(), Errc::InvalidValue, "swap01: undefined operand");
  require(a.rank() == 3, Errc::ShapeMismatch,
          "swap01 requires a rank-3 tensor, got " + shape_str(a.shape()));
  const int64_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (int64_t i = 0; i < d0; ++i) {
    for (int64_t j = 0; j < d1; ++j) {
      std::memcpy(out.data() + (j * d0 + i) * d2, a.data() + (i * d1 + j) * d2,
                  static_cast<std::size_t>(d2) * sizeof(double));
    }
  }
  return make_op_output({d1, d0, d2}, std::move(out), OpKind::Swap01, {a}, {}, {}, {},
                        &swap01_backward);
}

namespace {

std::vector<Tensor> swap01_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& a = node.inputs[0];
  const int64_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2);
  Tensor ga(a.shape());
  for (int64_t i = 0; i < d0; ++i) {
    for (int64_t j = 0; j < d1; ++j) {
      std::memcpy(ga.data() + (i * d1 + j) * d2, g.data() + (j * d0 + i) * d2,
                  static_cast<std::size_t>(d2) * sizeof(double));
    }
  }
  return {ga};
}

}  // namespace

}  // namespace exms
