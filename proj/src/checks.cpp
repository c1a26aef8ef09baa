#include "exms/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "exms/attention.hpp"
#include "exms/datagen.hpp"
#include "exms/losses.hpp"
#include "exms/model.hpp"
#include "exms/rope.hpp"
#include "exms/tensor.hpp"

namespace exms {

namespace {

constexpr double kGradTol = 1e-5;
constexpr double kGradH = 1e-6;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Max relative error between reverse-mode and central-difference gradients.
double gradient_error(const LossFn& f, const std::vector<Tensor>& params, bool sabotage) {
  Tensor loss = f(params);
  std::vector<Tensor> analytic = grad(loss, params);
  auto scalar = [&](const std::vector<Tensor>& ps) { return f(ps).item(); };
  std::vector<Tensor> numeric = finite_diff_grad(scalar, params, kGradH);
  if (sabotage && !analytic.empty() && analytic[0].numel() > 0) analytic[0].data()[0] += 1e-3;
  double worst = 0.0;
  for (size_t p = 0; p < params.size(); ++p)
    for (int64_t i = 0; i < params[p].numel(); ++i)
      worst = std::max(worst, rel_err(analytic[p].data()[i], numeric[p].data()[i]));
  return worst;
}

// Central differences on a random subset of coordinates; keeps whole-model
// checks inside the time budget.
double sampled_gradient_error(const LossFn& f, const std::vector<Tensor>& params,
                              int64_t probes, CounterRng& rng, bool sabotage) {
  Tensor loss = f(params);
  std::vector<Tensor> analytic = grad(loss, params);
  double worst = 0.0;
  for (int64_t s = 0; s < probes; ++s) {
    size_t p = static_cast<size_t>(rng.next_below(params.size()));
    int64_t i = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(params[p].numel())));
    Tensor handle = params[p];  // shares storage; non-const data access
    double* slot = handle.data() + i;
    const double orig = *slot;
    *slot = orig + kGradH;
    double fp = f(params).item();
    *slot = orig - kGradH;
    double fm = f(params).item();
    *slot = orig;
    double fd = (fp - fm) / (2.0 * kGradH);
    double g = analytic[p].data()[i] + (sabotage && s == 0 ? 1e-3 : 0.0);
    worst = std::max(worst, rel_err(g, fd));
  }
  return worst;
}

// Contract all output coordinates against a fixed random weighting so every
// entry of the output influences the scalar under test.
Tensor weighted(const Tensor& out, CounterRng& rng) {
  Tensor w = Tensor::randn(out.shape(), rng);
  return sum(mul(out, w));
}

struct GradCheck {
  std::string name;
  std::function<double(uint64_t seed, bool sabotage)> run;  // one instance
};

// ---- dense reference attention (independent oracle) ---------------------

Tensor dense_mha_oracle(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttnConfig& cfg) {
  const int64_t t_len = q.dim(0), heads = q.dim(1), d = q.dim(2);
  const int64_t group = heads / cfg.n_kv_heads;
  Tensor out({t_len, heads, d});
  std::vector<double> logits(static_cast<size_t>(t_len));
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int64_t h = 0; h < heads; ++h) {
    const int64_t kvh = h / group;
    for (int64_t i = 0; i < t_len; ++i) {
      double best = -HUGE_VAL;
      for (int64_t j = 0; j < t_len; ++j) {
        bool visible = !(cfg.causal && j > i) &&
                       !(cfg.window && std::llabs(i - j) > *cfg.window);
        if (!visible) {
          logits[static_cast<size_t>(j)] = -HUGE_VAL;
          continue;
        }
        double dot = 0.0;
        for (int64_t c = 0; c < d; ++c)
          dot += q.data()[(i * heads + h) * d + c] * k.data()[(j * cfg.n_kv_heads + kvh) * d + c];
        logits[static_cast<size_t>(j)] = dot * scale;
        best = std::max(best, logits[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (int64_t j = 0; j < t_len; ++j)
        if (logits[static_cast<size_t>(j)] != -HUGE_VAL)
          denom += std::exp(logits[static_cast<size_t>(j)] - best);
      for (int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j < t_len; ++j) {
          if (logits[static_cast<size_t>(j)] == -HUGE_VAL) continue;
          acc += std::exp(logits[static_cast<size_t>(j)] - best) / denom *
                 v.data()[(j * cfg.n_kv_heads + kvh) * d + c];
        }
        out.data()[(i * heads + h) * d + c] = acc;
      }
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

bool rows_identical(const Tensor& a, const Tensor& b, int64_t row_begin, int64_t row_end) {
  const int64_t stride = a.numel() / a.dim(0);
  return std::memcmp(a.data() + row_begin * stride, b.data() + row_begin * stride,
                     sizeof(double) * static_cast<size_t>((row_end - row_begin) * stride)) == 0;
}

// ---- fixtures -----------------------------------------------------------

ModelConfig check_model_config() {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers_enc = 1;
  cfg.n_layers_dec = 1;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 1;
  cfg.head_dim = 16;
  cfg.d_ff = 64;
  cfg.patch_size = 16;
  cfg.merge_factor = 2;
  cfg.max_image_side = 64;
  cfg.mtp_enabled = true;
  cfg.mtp_weight = 0.1;
  return cfg;
}

Tensor logprob_vector(CounterRng& rng, int64_t len) {
  Tensor t = Tensor::uniform({len}, rng, -3.0, -0.05);
  t.set_requires_grad(true);
  return t;
}

std::vector<GradCheck> gradient_checks() {
  std::vector<GradCheck> checks;
  auto add_check = [&](const std::string& name,
                       std::function<double(uint64_t, bool)> run) {
    checks.push_back({name, std::move(run)});
  };

  add_check("elementwise_add_mul_broadcast", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({3, 4, 5}, rng, 1.0, true);
    Tensor b = Tensor::randn({4, 5}, rng, 1.0, true);
    Tensor c = Tensor::randn({5}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(mul(add(p[0], p[1]), sub(p[0], p[2])), wrng);
    };
    return gradient_error(f, {a, b, c}, sab);
  });
  add_check("scalar_ops_neg", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({6, 3}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(neg(add_scalar(mul_scalar(p[0], 1.7), 0.3)), wrng);
    };
    return gradient_error(f, {a}, sab);
  });
  add_check("matmul", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({4, 6}, rng, 1.0, true);
    Tensor b = Tensor::randn({6, 3}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(matmul(p[0], p[1]), wrng);
    };
    return gradient_error(f, {a, b}, sab);
  });
  add_check("transpose_reshape_swap01", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({4, 6}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      Tensor t = transpose(p[0]);                 // [6,4]
      Tensor r = reshape(t, {2, 3, 4});
      return weighted(swap01(r), wrng);
    };
    return gradient_error(f, {a}, sab);
  });
  add_check("exp_log_softplus_silu", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::uniform({5, 4}, rng, 0.5, 2.0);
    a.set_requires_grad(true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(silu(softplus(log(exp(p[0])))), wrng);
    };
    return gradient_error(f, {a}, sab);
  });
  add_check("sum_mean", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({7, 3}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      return add(sum(mul(p[0], p[0])), mean(p[0]));
    };
    return gradient_error(f, {a}, sab);
  });
  add_check("softmax_lastdim", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({4, 6}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(softmax_lastdim(p[0]), wrng);
    };
    return gradient_error(f, {a}, sab);
  });
  add_check("rms_norm", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor x = Tensor::randn({5, 8}, rng, 1.0, true);
    Tensor g = Tensor::uniform({8}, rng, 0.5, 1.5);
    g.set_requires_grad(true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(rms_norm(p[0], p[1]), wrng);
    };
    return gradient_error(f, {x, g}, sab);
  });
  add_check("embedding_overwrite_rows", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor table = Tensor::randn({9, 4}, rng, 1.0, true);
    Tensor rows = Tensor::randn({2, 4}, rng, 1.0, true);
    std::vector<int32_t> ids = {3, 1, 8, 1, 0};
    std::vector<int64_t> idx = {1, 3};
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(overwrite_rows(embedding(p[0], ids), idx, p[1]), wrng);
    };
    return gradient_error(f, {table, rows}, sab);
  });
  add_check("concat_slice", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor a = Tensor::randn({5, 3}, rng, 1.0, true);
    Tensor b = Tensor::randn({5, 4}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      Tensor cat = concat_lastdim(p[0], p[1]);       // [5,7]
      Tensor s1 = slice_rows(cat, 1, 3);             // [3,7]
      return weighted(slice_lastdim(s1, 2, 4), wrng);
    };
    return gradient_error(f, {a, b}, sab);
  });
  add_check("masked_cross_entropy", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor logits = Tensor::randn({6, 9}, rng, 1.0, true);
    std::vector<int32_t> targets = {1, 4, 0, 8, 2, 5};
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0, 1};
    LossFn f = [&](const std::vector<Tensor>& p) {
      return masked_cross_entropy(p[0], targets, mask);
    };
    return gradient_error(f, {logits}, sab);
  });
  add_check("gather_logprobs", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor logits = Tensor::randn({6, 9}, rng, 1.0, true);
    std::vector<int32_t> targets = {1, 4, 0, 8, 2, 5};
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(gather_logprobs(p[0], targets, 1, 5), wrng);
    };
    return gradient_error(f, {logits}, sab);
  });
  add_check("rope_1d", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor x = Tensor::randn({2, 5, 8}, rng, 1.0, true);
    std::vector<int64_t> pos = {3, 0, 11, 7, 2};
    RopeParams rp = rope_params_1d(8);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(rope_1d_apply(p[0], pos, rp), wrng);
    };
    return gradient_error(f, {x}, sab);
  });
  add_check("rope_2d", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    Tensor x = Tensor::randn({2, 4, 8}, rng, 1.0, true);
    std::vector<int64_t> rows = {0, 1, 2, 3}, cols = {2, 0, 1, 2};
    RopeParams rp = rope_params_2d(8);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(rope_2d_apply(p[0], rows, cols, rp), wrng);
    };
    return gradient_error(f, {x}, sab);
  });
  add_check("gqa_attention", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    AttnConfig cfg;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 4;
    cfg.causal = seed % 2 == 0;
    Tensor q = Tensor::randn({6, 4, 4}, rng, 1.0, true);
    Tensor k = Tensor::randn({6, 2, 4}, rng, 1.0, true);
    Tensor v = Tensor::randn({6, 2, 4}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(gqa_attention(p[0], p[1], p[2], cfg), wrng);
    };
    return gradient_error(f, {q, k, v}, sab);
  });
  add_check("chunked_attention", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    AttnConfig cfg;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 4;
    cfg.causal = true;
    Tensor q = Tensor::randn({7, 2, 4}, rng, 1.0, true);
    Tensor k = Tensor::randn({7, 1, 4}, rng, 1.0, true);
    Tensor v = Tensor::randn({7, 1, 4}, rng, 1.0, true);
    LossFn f = [&](const std::vector<Tensor>& p) {
      CounterRng wrng(seed ^ 0x9E37);
      return weighted(chunked_attention(p[0], p[1], p[2], cfg, 3), wrng);
    };
    return gradient_error(f, {q, k, v}, sab);
  });
  add_check("dpo_loss", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    LossConfig lc;
    PreferencePair pair;
    pair.chosen_policy = logprob_vector(rng, 5);
    pair.chosen_ref = logprob_vector(rng, 5);
    pair.rejected_policy = logprob_vector(rng, 4);
    pair.rejected_ref = logprob_vector(rng, 4);
    LossFn f = [&](const std::vector<Tensor>& p) {
      PreferencePair q{p[0], p[1], p[2], p[3]};
      return dpo_loss(q, lc);
    };
    return gradient_error(
        f, {pair.chosen_policy, pair.chosen_ref, pair.rejected_policy, pair.rejected_ref}, sab);
  });
  add_check("grouper_loss", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    LossConfig lc;
    RewardGroup g;
    g.rewards = {0.1, 0.9, 0.4, 0.6};
    for (int i = 0; i < 4; ++i) g.logprobs.push_back(logprob_vector(rng, 3 + i));
    LossFn f = [&](const std::vector<Tensor>& p) {
      RewardGroup gg;
      gg.rewards = g.rewards;
      gg.logprobs = p;
      return grouper_loss(gg, lc);
    };
    return gradient_error(f, g.logprobs, sab);
  });
  add_check("grpo_surrogate_loss", [](uint64_t seed, bool sab) {
    CounterRng rng(seed);
    LossConfig lc;
    std::vector<RewardGroup> groups(2);
    std::vector<Tensor> params;
    for (auto& g : groups) {
      g.rewards = {0.0, 1.0, 0.25, 0.5};
      for (int i = 0; i < 4; ++i) {
        g.logprobs.push_back(logprob_vector(rng, 4));
        params.push_back(g.logprobs.back());
      }
    }
    LossFn f = [&](const std::vector<Tensor>& p) {
      std::vector<RewardGroup> gs(2);
      for (int gi = 0; gi < 2; ++gi) {
        gs[gi].rewards = groups[gi].rewards;
        for (int i = 0; i < 4; ++i) gs[gi].logprobs.push_back(p[gi * 4 + i]);
      }
      return grpo_surrogate_loss(gs, lc);
    };
    return gradient_error(f, params, sab);
  });
  add_check("model_sft_mtp", [](uint64_t seed, bool sab) {
    ModelConfig cfg = check_model_config();
    SceneRecord rec =
        render_scene({{ShapeClass::Circle, ColorName::Red}}, 32, 32, seed, RenderOpts{0.3, 100, 6, 9});
    Weights w = init_weights(cfg, seed);
    TokenSeq seq = make_vlm_seq(1, 1, "", rec.caption, true);
    std::vector<Tensor> params = w.all();
    LossFn f = [&](const std::vector<Tensor>&) {
      Patches p = patchify(rec.image, cfg);
      Tensor vis = merge_tokens(encode_patches(p, cfg, w), p.rows, p.cols, cfg, w);
      Tensor logits = decoder_forward(seq, vis, cfg, w);
      int64_t t_len = seq.size();
      std::vector<int32_t> targets(static_cast<size_t>(t_len), 0);
      std::vector<uint8_t> mask(static_cast<size_t>(t_len), 0);
      for (int64_t t = 0; t + 1 < t_len; ++t) {
        targets[static_cast<size_t>(t)] = seq.ids[t + 1];
        mask[static_cast<size_t>(t)] = t + 1 >= 2 ? 1 : 0;
      }
      Tensor main = sft_loss(logits, targets, mask);
      std::vector<uint8_t> mtp_mask(static_cast<size_t>(t_len), 0);
      for (int64_t p2 = 2; p2 < t_len; ++p2) mtp_mask[static_cast<size_t>(p2)] = 1;
      return add(main, mul_scalar(mtp_loss(seq, vis, cfg, w, mtp_mask), cfg.mtp_weight));
    };
    CounterRng probe_rng(seed ^ 0xFD);
    return sampled_gradient_error(f, params, 40, probe_rng, sab);
  });
  return checks;
}

// ---- suite runners --------------------------------------------------------

void run_gradients(std::vector<CheckResult>& out, const CheckOptions& opts) {
  for (const GradCheck& check : gradient_checks()) {
    double worst = 0.0;
    for (int64_t i = 0; i < opts.instances; ++i)
      worst = std::max(worst, check.run(1000 + 7 * i, opts.sabotage));
    out.push_back({"gradients", check.name, kGradTol, worst, worst <= kGradTol});
  }
}

void run_attention(std::vector<CheckResult>& out) {
  {  // dense oracle agreement, grouped and ungrouped
    double worst = 0.0;
    int inst = 0;
    for (int64_t t_len : {4, 9, 33}) {
      for (auto [heads, kv] : {std::pair<int64_t, int64_t>{4, 4}, {4, 2}, {2, 1}}) {
        AttnConfig cfg;
        cfg.n_heads = heads;
        cfg.n_kv_heads = kv;
        cfg.head_dim = 8;
        cfg.causal = inst % 2 == 0;
        CounterRng rng(300 + inst++);
        Tensor q = Tensor::randn({t_len, heads, 8}, rng);
        Tensor k = Tensor::randn({t_len, kv, 8}, rng);
        Tensor v = Tensor::randn({t_len, kv, 8}, rng);
        worst = std::max(worst, max_abs_diff(gqa_attention(q, k, v, cfg),
                                             dense_mha_oracle(q, k, v, cfg)));
      }
    }
    out.push_back({"attention", "gqa_matches_dense_oracle", 1e-12, worst, worst <= 1e-12});
  }
  {  // causality: future perturbations leave earlier rows bit-identical
    bool exact = true;
    AttnConfig cfg;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 4;
    cfg.causal = true;
    const int64_t t_len = 10;
    CounterRng rng(410);
    Tensor q = Tensor::randn({t_len, 2, 4}, rng);
    Tensor k = Tensor::randn({t_len, 2, 4}, rng);
    Tensor v = Tensor::randn({t_len, 2, 4}, rng);
    Tensor base = gqa_attention(q, k, v, cfg);
    for (int64_t pos = 1; pos < t_len; ++pos) {
      Tensor k2 = k.detach(), v2 = v.detach();
      for (int64_t c = 0; c < 2 * 4; ++c) {
        k2.data()[pos * 8 + c] += 3.5;
        v2.data()[pos * 8 + c] -= 1.25;
      }
      Tensor got = gqa_attention(q, k2, v2, cfg);
      exact = exact && rows_identical(base, got, 0, pos);
    }
    out.push_back({"attention", "causal_prefix_bit_identical", 0.0, exact ? 0.0 : 1.0, exact});
  }
  {  // window: keys beyond the radius have no influence at all
    bool exact = true;
    AttnConfig cfg;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.head_dim = 4;
    cfg.causal = true;
    cfg.window = 3;
    const int64_t t_len = 16;
    CounterRng rng(420);
    Tensor q = Tensor::randn({t_len, 2, 4}, rng);
    Tensor k = Tensor::randn({t_len, 1, 4}, rng);
    Tensor v = Tensor::randn({t_len, 1, 4}, rng);
    Tensor base = gqa_attention(q, k, v, cfg);
    for (int64_t i : {5L, 9L, 15L}) {
      Tensor k2 = k.detach(), v2 = v.detach();
      for (int64_t j = 0; j < t_len; ++j) {
        if (j >= i - *cfg.window && j <= i) continue;  // visible to query i
        for (int64_t c = 0; c < 4; ++c) {
          k2.data()[j * 4 + c] = 100.0 + static_cast<double>(j);
          v2.data()[j * 4 + c] = -7.0;
        }
      }
      Tensor got = gqa_attention(q, k2, v2, cfg);
      exact = exact && rows_identical(base, got, i, i + 1);
    }
    out.push_back({"attention", "window_hides_far_keys_exactly", 0.0, exact ? 0.0 : 1.0, exact});
  }
  {  // online-softmax chunking agrees with the dense path
    double worst = 0.0;
    int inst = 0;
    for (int64_t t_len : {5, 64, 257}) {
      for (int64_t chunk : {int64_t{1}, int64_t{2}, t_len / 2, t_len, t_len + 5}) {
        if (chunk < 1) continue;
        AttnConfig cfg;
        cfg.n_heads = 2;
        cfg.n_kv_heads = 1;
        cfg.head_dim = 8;
        cfg.causal = inst % 2 == 0;
        CounterRng rng(500 + inst++);
        Tensor q = Tensor::randn({t_len, 2, 8}, rng);
        Tensor k = Tensor::randn({t_len, 1, 8}, rng);
        Tensor v = Tensor::randn({t_len, 1, 8}, rng);
        worst = std::max(worst, max_abs_diff(chunked_attention(q, k, v, cfg, chunk),
                                             gqa_attention(q, k, v, cfg)));
      }
    }
    out.push_back({"attention", "chunked_matches_dense", 1e-10, worst, worst <= 1e-10});
  }
}

void run_rope(std::vector<CheckResult>& out) {
  const RopeParams p1 = rope_params_1d(8);
  const RopeParams p2 = rope_params_2d(8);
  {  // rotation preserves per-position norms
    double worst = 0.0;
    for (uint64_t s = 0; s < 10; ++s) {
      CounterRng rng(600 + s);
      Tensor x = Tensor::randn({3, 6, 8}, rng);
      std::vector<int64_t> pos;
      for (int64_t t = 0; t < 6; ++t)
        pos.push_back(static_cast<int64_t>(rng.next_below(100)));
      Tensor y = rope_1d_apply(x, pos, p1);
      for (int64_t r = 0; r < 3 * 6; ++r) {
        double nx = 0, ny = 0;
        for (int64_t c = 0; c < 8; ++c) {
          nx += x.data()[r * 8 + c] * x.data()[r * 8 + c];
          ny += y.data()[r * 8 + c] * y.data()[r * 8 + c];
        }
        worst = std::max(worst, std::abs(std::sqrt(nx) - std::sqrt(ny)));
      }
    }
    out.push_back({"rope", "per_position_isometry", 1e-12, worst, worst <= 1e-12});
  }
  {  // 1D: q.k depends only on the relative offset
    double worst = 0.0;
    for (uint64_t s = 0; s < 12; ++s) {
      CounterRng rng(640 + s);
      Tensor q = Tensor::randn({1, 1, 8}, rng);
      Tensor k = Tensor::randn({1, 1, 8}, rng);
      int64_t a = static_cast<int64_t>(rng.next_below(64));
      int64_t b = static_cast<int64_t>(rng.next_below(64));
      int64_t shift = static_cast<int64_t>(rng.next_below(200));
      auto dot = [&](int64_t pa, int64_t pb) {
        Tensor qa = rope_1d_apply(q, {pa}, p1);
        Tensor kb = rope_1d_apply(k, {pb}, p1);
        double acc = 0;
        for (int64_t c = 0; c < 8; ++c) acc += qa.data()[c] * kb.data()[c];
        return acc;
      };
      worst = std::max(worst, std::abs(dot(a, b) - dot(a + shift, b + shift)));
    }
    out.push_back({"rope", "offset_invariance_1d", 1e-10, worst, worst <= 1e-10});
  }
  {  // 2D: logits depend only on (row delta, col delta)
    double worst = 0.0;
    for (uint64_t s = 0; s < 12; ++s) {
      CounterRng rng(680 + s);
      Tensor q = Tensor::randn({1, 1, 8}, rng);
      Tensor k = Tensor::randn({1, 1, 8}, rng);
      int64_t r1 = static_cast<int64_t>(rng.next_below(24));
      int64_t c1 = static_cast<int64_t>(rng.next_below(24));
      int64_t r2 = static_cast<int64_t>(rng.next_below(24));
      int64_t c2 = static_cast<int64_t>(rng.next_below(24));
      int64_t dr = static_cast<int64_t>(rng.next_below(40));
      int64_t dc = static_cast<int64_t>(rng.next_below(40));
      auto dot = [&](int64_t qr, int64_t qc, int64_t kr, int64_t kc) {
        Tensor qa = rope_2d_apply(q, {qr}, {qc}, p2);
        Tensor kb = rope_2d_apply(k, {kr}, {kc}, p2);
        double acc = 0;
        for (int64_t c = 0; c < 8; ++c) acc += qa.data()[c] * kb.data()[c];
        return acc;
      };
      worst = std::max(worst, std::abs(dot(r1, c1, r2, c2) -
                                       dot(r1 + dr, c1 + dc, r2 + dr, c2 + dc)));
    }
    out.push_back({"rope", "offset_invariance_2d", 1e-10, worst, worst <= 1e-10});
  }
  {  // zero columns reduce the 2D rotation to the 1D one on the first half
    CounterRng rng(720);
    Tensor x = Tensor::randn({4, 8}, rng);
    std::vector<int64_t> rows = {3, 0, 7, 2}, zeros = {0, 0, 0, 0};
    Tensor y = rope_2d_apply(x, rows, zeros, p2);
    Tensor first({4, 4});
    for (int64_t t = 0; t < 4; ++t)
      for (int64_t j = 0; j < 4; ++j) first.data()[t * 4 + j] = x.data()[t * 8 + j];
    Tensor want = rope_1d_apply(first, rows, rope_params_1d(4));
    double worst = 0.0;
    for (int64_t t = 0; t < 4; ++t) {
      for (int64_t j = 0; j < 4; ++j)
        worst = std::max(worst, std::abs(y.data()[t * 8 + j] - want.data()[t * 4 + j]));
      for (int64_t j = 4; j < 8; ++j)
        worst = std::max(worst, std::abs(y.data()[t * 8 + j] - x.data()[t * 8 + j]));
    }
    out.push_back({"rope", "two_dim_reduces_to_one_dim", 1e-12, worst, worst <= 1e-12});
  }
}

void run_losses(std::vector<CheckResult>& out) {
  LossConfig lc;
  {  // policy == reference gives exactly log 2
    double worst = 0.0;
    for (uint64_t s = 0; s < 100; ++s) {
      CounterRng rng(800 + s);
      Tensor cp = logprob_vector(rng, 3 + static_cast<int64_t>(s % 5));
      Tensor rp = logprob_vector(rng, 2 + static_cast<int64_t>(s % 7));
      PreferencePair pair{cp, cp.detach(), rp, rp.detach()};
      worst = std::max(worst, std::abs(dpo_loss(pair, lc).item() - std::log(2.0)));
    }
    out.push_back({"losses", "dpo_identity_log2", 1e-12, worst, worst <= 1e-12});
  }
  {  // gradient pushes chosen up and rejected down
    int64_t violations = 0;
    for (uint64_t s = 0; s < 100; ++s) {
      CounterRng rng(900 + s);
      PreferencePair pair{logprob_vector(rng, 4), logprob_vector(rng, 4),
                          logprob_vector(rng, 3), logprob_vector(rng, 3)};
      Tensor loss = dpo_loss(pair, lc);
      std::vector<Tensor> g = grad(loss, {pair.chosen_policy, pair.rejected_policy});
      for (int64_t i = 0; i < g[0].numel(); ++i)
        violations += g[0].data()[i] < 0.0 ? 0 : 1;
      for (int64_t i = 0; i < g[1].numel(); ++i)
        violations += g[1].data()[i] > 0.0 ? 0 : 1;
    }
    out.push_back({"losses", "dpo_gradient_signs", 0.0, static_cast<double>(violations),
                   violations == 0});
  }
  {  // frozen advantage mapping
    auto adv = grouper_advantages({1, 2, 3, 4}, lc);
    double worst = HUGE_VAL;
    if (adv) {
      const double want[4] = {-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0};
      worst = 0.0;
      for (int i = 0; i < 4; ++i) worst = std::max(worst, std::abs((*adv)[i] - want[i]));
    }
    out.push_back({"losses", "grouper_frozen_mapping", 1e-12, worst, worst <= 1e-12});
  }
  {  // range, attained endpoints, positive-affine invariance
    double worst = 0.0;
    for (uint64_t s = 0; s < 50; ++s) {
      CounterRng rng(1000 + s);
      std::vector<double> r;
      for (int i = 0; i < 4; ++i)
        r.push_back(static_cast<double>(rng.next_below(1000)) / 250.0);
      auto base = grouper_advantages(r, lc);
      if (!base) continue;  // degenerate draw
      double lo = HUGE_VAL, hi = -HUGE_VAL;
      for (double a : *base) {
        lo = std::min(lo, a);
        hi = std::max(hi, a);
        if (a < -1.0 || a > 1.0) worst = std::max(worst, std::abs(a) - 1.0);
      }
      worst = std::max(worst, std::abs(lo + 1.0));  // endpoints attained exactly
      worst = std::max(worst, std::abs(hi - 1.0));
      double scale = 0.5 + static_cast<double>(rng.next_below(150)) / 100.0;
      double shift = -2.0 + static_cast<double>(rng.next_below(400)) / 100.0;
      std::vector<double> r2;
      for (double x : r) r2.push_back(scale * x + shift);
      auto affine = grouper_advantages(r2, lc);
      if (!affine) {
        worst = HUGE_VAL;
        continue;
      }
      for (int i = 0; i < 4; ++i)
        worst = std::max(worst, std::abs((*base)[i] - (*affine)[i]));
    }
    out.push_back({"losses", "grouper_range_affine", 1e-12, worst, worst <= 1e-12});
  }
  {  // constant rewards are degenerate
    bool ok = !grouper_advantages({2, 2, 2, 2}, lc).has_value();
    RewardGroup g;
    g.rewards = {2, 2, 2, 2};
    CounterRng rng(1100);
    for (int i = 0; i < 4; ++i) g.logprobs.push_back(logprob_vector(rng, 3));
    bool threw = false;
    try {
      grouper_loss(g, lc);
    } catch (const Error& e) {
      threw = e.code() == Errc::DegenerateGroup;
    }
    ok = ok && threw;
    out.push_back({"losses", "grouper_degenerate_detected", 0.0, ok ? 0.0 : 1.0, ok});
  }
  {  // constant groups filtered; surviving advantages sum to zero
    LossConfig lc3 = lc;
    lc3.group_size = 3;
    GrpoResult res = grpo_advantages({{1, 2, 3}, {5, 5, 5}, {0, 4, 8}}, lc3);
    bool ok = res.surviving == std::vector<size_t>{0, 2};
    double worst = 0.0;
    for (const auto& g : res.advantages) {
      double sum = 0.0;
      for (double a : g) sum += a;
      worst = std::max(worst, std::abs(sum));
    }
    bool threw = false;
    try {
      grpo_advantages({{3, 3, 3}}, lc3);
    } catch (const Error& e) {
      threw = e.code() == Errc::EmptyBatch;
    }
    ok = ok && threw && worst <= 1e-12;
    out.push_back({"losses", "grpo_filter_and_zero_sum", 1e-12, ok ? worst : 1.0, ok});
  }
}

void run_data(std::vector<CheckResult>& out) {
  {  // frozen normalization examples
    double worst = 0.0;
    BBox n = normalize_bbox(PixelBox{80, 60, 400, 300}, 800, 600);
    worst = std::max({worst, std::abs(static_cast<double>(n.x1 - 100)),
                      std::abs(static_cast<double>(n.y1 - 100)),
                      std::abs(static_cast<double>(n.x2 - 500)),
                      std::abs(static_cast<double>(n.y2 - 500))});
    PixelBox p = denormalize_bbox(BBox{500, 500, 1000, 1000}, 200, 100);
    worst = std::max({worst, std::abs(static_cast<double>(p.x1 - 100)),
                      std::abs(static_cast<double>(p.y1 - 50)),
                      std::abs(static_cast<double>(p.x2 - 200)),
                      std::abs(static_cast<double>(p.y2 - 100))});
    out.push_back({"data", "bbox_frozen_examples", 0.0, worst, worst == 0.0});
  }
  {  // round-trip quantization bound on 1e4 random boxes
    CounterRng rng(1200);
    double worst_excess = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
      int64_t w = 1 + static_cast<int64_t>(rng.next_below(1024));
      int64_t h = 1 + static_cast<int64_t>(rng.next_below(1024));
      int64_t x1 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(w)));
      int64_t x2 = x1 + 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(w - x1)));
      int64_t y1 = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(h)));
      int64_t y2 = y1 + 1 + static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(h - y1)));
      PixelBox box{x1, y1, x2, y2};
      PixelBox back = denormalize_bbox(normalize_bbox(box, w, h), w, h);
      double bx = static_cast<double>(w) / 2000.0 + 0.5;
      double by = static_cast<double>(h) / 2000.0 + 0.5;
      worst_excess = std::max({worst_excess, std::abs(static_cast<double>(back.x1 - box.x1)) - bx,
                               std::abs(static_cast<double>(back.x2 - box.x2)) - bx,
                               std::abs(static_cast<double>(back.y1 - box.y1)) - by,
                               std::abs(static_cast<double>(back.y2 - box.y2)) - by});
    }
    out.push_back({"data", "bbox_roundtrip_bound", 0.0, std::max(worst_excess, 0.0),
                   worst_excess <= 0.0});
  }
  {  // stratified balance and caption consistency on the default layout
    DatasetOpts opts;
    const int64_t n = 1000;
    std::vector<SceneRecord> recs = sample_counting_dataset(n, opts, 1300);
    std::map<std::pair<size_t, ShapeClass>, int64_t> cells;
    int64_t caption_mismatches = 0;
    for (const SceneRecord& rec : recs) {
      ShapeClass cls = rec.objects.empty() ? ShapeClass::Circle : rec.objects[0].shape;
      int64_t count = static_cast<int64_t>(rec.objects.size());
      size_t bucket = opts.buckets.size();
      for (size_t b = 0; b < opts.buckets.size(); ++b)
        if (count >= opts.buckets[b].first && count <= opts.buckets[b].second) bucket = b;
      ++cells[{bucket, cls}];
      auto parsed = parse_caption(rec.caption);
      if (!parsed || *parsed != rec.count_targets) ++caption_mismatches;
    }
    const double ideal = static_cast<double>(n) /
                         static_cast<double>(opts.buckets.size() * opts.classes.size());
    double worst = caption_mismatches > 0 ? HUGE_VAL : 0.0;
    size_t expect_cells = opts.buckets.size() * opts.classes.size();
    if (cells.size() != expect_cells) worst = HUGE_VAL;
    for (const auto& [cell, c] : cells)
      worst = std::max(worst, std::abs(static_cast<double>(c) - ideal));
    out.push_back({"data", "counting_balance_and_captions", 1.0, worst, worst <= 1.0});
  }
}

}  // namespace

bool all_passed(const std::vector<CheckResult>& results) {
  for (const CheckResult& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

std::vector<CheckResult> run_check_suite(const std::string& suite, const CheckOptions& opts) {
  std::vector<CheckResult> out;
  bool known = false;
  if (suite == "gradients" || suite == "all") {
    run_gradients(out, opts);
    known = true;
  }
  if (suite == "attention" || suite == "all") {
    run_attention(out);
    known = true;
  }
  if (suite == "rope" || suite == "all") {
    run_rope(out);
    known = true;
  }
  if (suite == "losses" || suite == "all") {
    run_losses(out);
    known = true;
  }
  if (suite == "data" || suite == "all") {
    run_data(out);
    known = true;
  }
  require(known, Errc::UnknownSuite, "unknown check suite \"" + suite + "\"");
  return out;
}

}  // namespace exms
