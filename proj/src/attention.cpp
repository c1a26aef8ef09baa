#include "exms/attention.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "exms/kernels.hpp"
#include "op_common.hpp"

namespace exms {

void validate(const AttnConfig& cfg) {
  require(cfg.n_heads >= 1 && cfg.n_kv_heads >= 1, Errc::InvalidValue,
          "attention head counts must be positive");
  require(cfg.n_heads % cfg.n_kv_heads == 0, Errc::IndivisibleHeads,
          "n_heads " + std::to_string(cfg.n_heads) + " not divisible by n_kv_heads " +
              std::to_string(cfg.n_kv_heads));
  require(cfg.head_dim >= 1, Errc::InvalidValue, "attention head_dim must be positive");
  if (cfg.window.has_value()) {
    require(*cfg.window >= 1, Errc::InvalidValue, "attention window must be >= 1");
  }
}

namespace {

struct Dims {
  int64_t t, h, kv, d, group;
  bool causal;
  int64_t window;  // -1 when unwindowed
};

Dims check_inputs(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg) {
  validate(cfg);
  require(q.defined() && k.defined() && v.defined(), Errc::InvalidValue,
          "attention: undefined operand");
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, Errc::ShapeMismatch,
          "attention operands must be [T x heads x d]");
  Dims dm{};
  dm.t = q.dim(0);
  dm.h = q.dim(1);
  dm.kv = k.dim(1);
  dm.d = q.dim(2);
  require(k.dim(0) == dm.t && v.dim(0) == dm.t, Errc::ShapeMismatch,
          "attention: sequence lengths disagree");
  require(k.dim(2) == dm.d && v.dim(2) == dm.d, Errc::ShapeMismatch,
          "attention: head dims disagree");
  require(v.dim(1) == dm.kv, Errc::ShapeMismatch, "attention: k/v head counts disagree");
  require(dm.h == cfg.n_heads && dm.kv == cfg.n_kv_heads, Errc::ShapeMismatch,
          "attention: tensors disagree with config head counts");
  require(dm.d == cfg.head_dim, Errc::ShapeMismatch,
          "attention: tensors disagree with config head_dim");
  dm.group = dm.h / dm.kv;
  dm.causal = cfg.causal;
  dm.window = cfg.window.has_value() ? *cfg.window : -1;
  return dm;
}

// Visible keys for query i form the contiguous inclusive range [lo, hi].
void visible_range(const Dims& dm, int64_t i, int64_t& lo, int64_t& hi) {
  lo = 0;
  hi = dm.causal ? i : dm.t - 1;
  if (dm.window >= 0) {
    lo = std::max<int64_t>(lo, i - dm.window);
    if (!dm.causal) hi = std::min(hi, i + dm.window);
  }
  require(lo <= hi, Errc::EmptyAttentionRow,
          "attention row " + std::to_string(i) + " has no visible key");
}

std::vector<Tensor> attention_backward(const TapeNode& node, const Tensor& g) {
  const Tensor& q = node.inputs[0];
  const Tensor& k = node.inputs[1];
  const Tensor& v = node.inputs[2];
  Dims dm{};
  dm.t = q.dim(0);
  dm.h = q.dim(1);
  dm.kv = k.dim(1);
  dm.d = q.dim(2);
  dm.group = dm.h / dm.kv;
  dm.causal = node.saved_ints[0] != 0;
  dm.window = node.saved_ints[1];
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dm.d));

  Tensor dq(q.shape());
  Tensor dk(k.shape());
  Tensor dv(v.shape());
  std::vector<double> logits(static_cast<std::size_t>(dm.t));
  std::vector<double> probs(static_cast<std::size_t>(dm.t));
  std::vector<double> dprob(static_cast<std::size_t>(dm.t));
  const std::size_t dsz = static_cast<std::size_t>(dm.d);

  for (int64_t h = 0; h < dm.h; ++h) {
    const int64_t kvh = h / dm.group;
    for (int64_t i = 0; i < dm.t; ++i) {
      int64_t lo, hi;
      visible_range(dm, i, lo, hi);
      const int64_t len = hi - lo + 1;
      const double* qi = q.data() + (i * dm.h + h) * dm.d;
      for (int64_t j = lo; j <= hi; ++j) {
        logits[static_cast<std::size_t>(j - lo)] =
            inv_scale * kernels::dot(qi, k.data() + (j * dm.kv + kvh) * dm.d, dsz);
      }
      detail::softmax_row(logits.data(), probs.data(), len);
      const double* go = g.data() + (i * dm.h + h) * dm.d;
      for (int64_t j = lo; j <= hi; ++j) {
        dprob[static_cast<std::size_t>(j - lo)] =
            kernels::dot(go, v.data() + (j * dm.kv + kvh) * dm.d, dsz);
      }
      const double mix = kernels::dot(probs.data(), dprob.data(), static_cast<std::size_t>(len));
      double* dqi = dq.data() + (i * dm.h + h) * dm.d;
      for (int64_t j = lo; j <= hi; ++j) {
        const std::size_t r = static_cast<std::size_t>(j - lo);
        const double dl = probs[r] * (dprob[r] - mix) * inv_scale;
        kernels::axpy(dl, k.data() + (j * dm.kv + kvh) * dm.d, dqi, dsz);
        kernels::axpy(dl, qi, dk.data() + (j * dm.kv + kvh) * dm.d, dsz);
        kernels::axpy(probs[r], go, dv.data() + (j * dm.kv + kvh) * dm.d, dsz);
      }
    }
  }
  return {dq, dk, dv};
}

}  // namespace

Tensor gqa_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttnConfig& cfg) {
  const Dims dm = check_inputs(q, k, v, cfg);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dm.d));
  std::vector<double> out(static_cast<std::size_t>(q.numel()), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(dm.t));
  std::vector<double> probs(static_cast<std::size_t>(dm.t));
  const std::size_t dsz = static_cast<std::size_t>(dm.d);

  for (int64_t h = 0; h < dm.h; ++h) {
    const int64_t kvh = h / dm.group;
    for (int64_t i = 0; i < dm.t; ++i) {
      int64_t lo, hi;
      visible_range(dm, i, lo, hi);
      const int64_t len = hi - lo + 1;
      const double* qi = q.data() + (i * dm.h + h) * dm.d;
      for (int64_t j = lo; j <= hi; ++j) {
        logits[static_cast<std::size_t>(j - lo)] =
            inv_scale * kernels::dot(qi, k.data() + (j * dm.kv + kvh) * dm.d, dsz);
      }
      detail::softmax_row(logits.data(), probs.data(), len);
      double* oi = out.data() + (i * dm.h + h) * dm.d;
      for (int64_t j = lo; j <= hi; ++j) {
        kernels::axpy(probs[static_cast<std::size_t>(j - lo)],
                      v.data() + (j * dm.kv + kvh) * dm.d, oi, dsz);
      }
    }
  }
  return make_op_output(q.shape(), std::move(out), OpKind::Attention, {q, k, v}, {}, {},
                        {dm.causal ? 1 : 0, dm.window}, &attention_backward);
}

Tensor chunked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttnConfig& cfg, int64_t chunk) {
  const Dims dm = check_inputs(q, k, v, cfg);
  require(chunk >= 1, Errc::InvalidValue, "chunked_attention: chunk must be >= 1");
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dm.d));
  std::vector<double> out(static_cast<std::size_t>(q.numel()), 0.0);
  std::vector<double> logits(static_cast<std::size_t>(std::min(chunk, dm.t)));
  std::vector<double> acc(static_cast<std::size_t>(dm.d));
  const std::size_t dsz = static_cast<std::size_t>(dm.d);

  for (int64_t h = 0; h < dm.h; ++h) {
    const int64_t kvh = h / dm.group;
    for (int64_t i = 0; i < dm.t; ++i) {
      int64_t lo, hi;
      visible_range(dm, i, lo, hi);
      const double* qi = q.data() + (i * dm.h + h) * dm.d;
      double run_max = -std::numeric_limits<double>::infinity();
      double denom = 0.0;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int64_t b0 = 0; b0 < dm.t; b0 += chunk) {
        const int64_t jlo = std::max(lo, b0);
        const int64_t jhi = std::min(hi, b0 + chunk - 1);
        if (jlo > jhi) continue;
        const int64_t len = jhi - jlo + 1;
        for (int64_t j = jlo; j <= jhi; ++j) {
          logits[static_cast<std::size_t>(j - jlo)] =
              inv_scale * kernels::dot(qi, k.data() + (j * dm.kv + kvh) * dm.d, dsz);
        }
        const double block_max = kernels::max(logits.data(), static_cast<std::size_t>(len));
        const double new_max = std::max(run_max, block_max);
        const double rescale = std::exp(run_max - new_max);  // exp(-inf) == 0 on first block
        denom *= rescale;
        kernels::scale(rescale, acc.data(), dsz);
        for (int64_t j = jlo; j <= jhi; ++j) {
          const double w = std::exp(logits[static_cast<std::size_t>(j - jlo)] - new_max);
          denom += w;
          kernels::axpy(w, v.data() + (j * dm.kv + kvh) * dm.d, acc.data(), dsz);
        }
        run_max = new_max;
      }
      require(denom > 0.0, Errc::EmptyAttentionRow,
              "attention row " + std::to_string(i) + " has no visible key");
      double* oi = out.data() + (i * dm.h + h) * dm.d;
      for (int64_t c = 0; c < dm.d; ++c) oi[c] = acc[static_cast<std::size_t>(c)] / denom;
    }
  }
  return make_op_output(q.shape(), std::move(out), OpKind::Attention, {q, k, v}, {}, {},
                        {dm.causal ? 1 : 0, dm.window}, &attention_backward);
}

}  // namespace exms
