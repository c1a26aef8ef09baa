#include "exms/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace exms {

namespace {

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Per-parameter init stream: adding or removing parameters (e.g. the MTP
// head) never shifts the draws of the others.
Tensor init_normal(const std::string& name, Shape shape, uint64_t seed, double stddev) {
  CounterRng rng(derive_seed(seed, fnv1a(name)));
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

void add_block_params(Weights& w, const std::string& p, const ModelConfig& cfg, uint64_t seed) {
  const double s = 0.02;
  int64_t qd = cfg.n_heads * cfg.head_dim;
  int64_t kvd = cfg.n_kv_heads * cfg.head_dim;
  w.params.emplace(p + "attn.norm.gain", Tensor::full({cfg.d_model}, 1.0, true));
  w.params.emplace(p + "attn.wq", init_normal(p + "attn.wq", {cfg.d_model, qd}, seed, s));
  w.params.emplace(p + "attn.wk", init_normal(p + "attn.wk", {cfg.d_model, kvd}, seed, s));
  w.params.emplace(p + "attn.wv", init_normal(p + "attn.wv", {cfg.d_model, kvd}, seed, s));
  w.params.emplace(p + "attn.wo", init_normal(p + "attn.wo", {qd, cfg.d_model}, seed, s));
  w.params.emplace(p + "mlp.norm.gain", Tensor::full({cfg.d_model}, 1.0, true));
  w.params.emplace(p + "mlp.w_in", init_normal(p + "mlp.w_in", {cfg.d_model, cfg.d_ff}, seed, s));
  w.params.emplace(p + "mlp.b_in", Tensor::zeros({cfg.d_ff}, true));
  w.params.emplace(p + "mlp.w_out", init_normal(p + "mlp.w_out", {cfg.d_ff, cfg.d_model}, seed, s));
  w.params.emplace(p + "mlp.b_out", Tensor::zeros({cfg.d_model}, true));
}

struct PosInfo {
  bool two_dim = false;
  std::vector<int64_t> positions;  // 1D
  std::vector<int64_t> rows, cols;  // 2D
};

Tensor attn_sublayer(const Tensor& x, const std::string& p, const Weights& w,
                     const ModelConfig& cfg, const AttnConfig& acfg, const PosInfo& pos) {
  int64_t t = x.dim(0);
  Tensor h = rms_norm(x, w.at(p + "attn.norm.gain"));
  Tensor q = matmul(h, w.at(p + "attn.wq"));
  Tensor k = matmul(h, w.at(p + "attn.wk"));
  Tensor v = matmul(h, w.at(p + "attn.wv"));
  q = swap01(reshape(q, {t, cfg.n_heads, cfg.head_dim}));      // [H x T x hd]
  k = swap01(reshape(k, {t, cfg.n_kv_heads, cfg.head_dim}));   // [KV x T x hd]
  if (pos.two_dim) {
    RopeParams rp = rope_params_2d(cfg.head_dim);
    q = rope_2d_apply(q, pos.rows, pos.cols, rp);
    k = rope_2d_apply(k, pos.rows, pos.cols, rp);
  } else {
    RopeParams rp = rope_params_1d(cfg.head_dim);
    q = rope_1d_apply(q, pos.positions, rp);
    k = rope_1d_apply(k, pos.positions, rp);
  }
  q = swap01(q);
  k = swap01(k);
  v = reshape(v, {t, cfg.n_kv_heads, cfg.head_dim});
  Tensor o = gqa_attention(q, k, v, acfg);
  o = reshape(o, {t, cfg.n_heads * cfg.head_dim});
  return matmul(o, w.at(p + "attn.wo"));
}

Tensor mlp_sublayer(const Tensor& x, const std::string& p, const Weights& w) {
  Tensor h = rms_norm(x, w.at(p + "mlp.norm.gain"));
  h = silu(add(matmul(h, w.at(p + "mlp.w_in")), w.at(p + "mlp.b_in")));
  return add(matmul(h, w.at(p + "mlp.w_out")), w.at(p + "mlp.b_out"));
}

// Pre-norm residual block.
Tensor block(const Tensor& x_in, const std::string& p, const Weights& w, const ModelConfig& cfg,
             const AttnConfig& acfg, const PosInfo& pos) {
  Tensor x = add(x_in, attn_sublayer(x_in, p, w, cfg, acfg, pos));
  return add(x, mlp_sublayer(x, p, w));
}

// Decoder input embeddings: token table rows, visual slots overwritten by the
// merged image embeddings.
Tensor embed_inputs(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                    const ModelConfig& cfg, const Weights& w) {
  std::vector<int64_t> vis_idx = seq.visual_indices();
  int64_t slots = static_cast<int64_t>(vis_idx.size());
  int64_t given = 0;
  if (visual_embeds) {
    require(visual_embeds->rank() == 2 && visual_embeds->dim(1) == cfg.d_model,
            Errc::ShapeMismatch, "visual embeddings must be [M x d_model]");
    given = visual_embeds->dim(0);
  }
  require(slots == given, Errc::SlotCountMismatch,
          "sequence has " + std::to_string(slots) + " visual slots but " + std::to_string(given) +
              " visual embeddings were provided");
  Tensor x = embedding(w.at("dec.embed"), seq.ids);
  if (slots > 0) x = overwrite_rows(x, vis_idx, *visual_embeds);
  return x;
}

}  // namespace

std::vector<int32_t> encode_bytes(const std::string& text) {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string decode_bytes(const std::vector<int32_t>& ids) {
  std::string out;
  for (int32_t id : ids) {
    if (id == kEosId) break;
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

void validate(const ModelConfig& cfg) {
  require(cfg.vocab_size >= 2, Errc::ConfigError, "vocab_size must be >= 2");
  require(cfg.d_model >= 1, Errc::ConfigError, "d_model must be positive");
  require(cfg.n_layers_enc >= 0, Errc::ConfigError, "n_layers_enc must be >= 0");
  require(cfg.n_layers_dec >= 1, Errc::ConfigError, "n_layers_dec must be >= 1");
  require(cfg.n_heads >= 1 && cfg.n_kv_heads >= 1, Errc::ConfigError, "head counts must be >= 1");
  require(cfg.n_heads % cfg.n_kv_heads == 0, Errc::ConfigError,
          "n_heads must be divisible by n_kv_heads");
  require(cfg.head_dim >= 2 && cfg.head_dim % 4 == 0, Errc::ConfigError,
          "head_dim must be a positive multiple of 4");
  require(cfg.d_model == cfg.n_heads * cfg.head_dim, Errc::ConfigError,
          "d_model must equal n_heads * head_dim");
  require(cfg.d_ff >= 1, Errc::ConfigError, "d_ff must be positive");
  require(cfg.patch_size >= 1, Errc::ConfigError, "patch_size must be positive");
  require(cfg.merge_factor >= 1, Errc::ConfigError, "merge_factor must be positive");
  require(cfg.max_image_side >= cfg.patch_size, Errc::ConfigError,
          "max_image_side must be >= patch_size");
  require(std::isfinite(cfg.mtp_weight) && cfg.mtp_weight >= 0.0, Errc::ConfigError,
          "mtp_weight must be finite and >= 0");
  if (cfg.window) require(*cfg.window >= 1, Errc::ConfigError, "window must be >= 1");
}

bool layer_is_windowed(const ModelConfig& cfg, int64_t layer) {
  return cfg.window.has_value() && layer % 4 != 3;  // 3 windowed : 1 global
}

int64_t TokenSeq::visual_count() const {
  int64_t n = 0;
  for (Modality m : modality) n += (m == Modality::Visual);
  return n;
}

std::vector<int64_t> TokenSeq::visual_indices() const {
  std::vector<int64_t> idx;
  for (int64_t i = 0; i < size(); ++i)
    if (modality[i] == Modality::Visual) idx.push_back(i);
  return idx;
}

void validate(const TokenSeq& seq, const ModelConfig& cfg) {
  int64_t t = seq.size();
  require(t >= 1, Errc::InvalidValue, "empty token sequence");
  require(static_cast<int64_t>(seq.modality.size()) == t &&
              static_cast<int64_t>(seq.text_pos.size()) == t &&
              static_cast<int64_t>(seq.vis_rows.size()) == t &&
              static_cast<int64_t>(seq.vis_cols.size()) == t,
          Errc::ShapeMismatch, "token sequence arrays must have equal length");
  for (int64_t i = 0; i < t; ++i) {
    require(seq.ids[i] >= 0 && seq.ids[i] < cfg.vocab_size, Errc::InvalidValue,
            "token id out of vocabulary at slot " + std::to_string(i));
    require(seq.text_pos[i] >= 0, Errc::InvalidValue, "negative text position");
    if (i > 0)
      require(seq.text_pos[i] > seq.text_pos[i - 1], Errc::InvalidValue,
              "text positions must be strictly increasing");
    bool visual = seq.modality[i] == Modality::Visual;
    bool has_coords = seq.vis_rows[i] >= 0 && seq.vis_cols[i] >= 0;
    require(visual == has_coords, Errc::InvalidValue,
            "visual slots and grid coordinates must agree at slot " + std::to_string(i));
    if (!visual)
      require(seq.vis_rows[i] == -1 && seq.vis_cols[i] == -1, Errc::InvalidValue,
              "text slots must carry -1 grid coordinates");
  }
}

TokenSeq make_text_seq(const std::string& text, bool add_bos, bool add_eos) {
  TokenSeq seq;
  if (add_bos) seq.ids.push_back(kBosId);
  for (int32_t id : encode_bytes(text)) seq.ids.push_back(id);
  if (add_eos) seq.ids.push_back(kEosId);
  int64_t t = static_cast<int64_t>(seq.ids.size());
  seq.modality.assign(t, Modality::Text);
  seq.vis_rows.assign(t, -1);
  seq.vis_cols.assign(t, -1);
  for (int64_t i = 0; i < t; ++i) seq.text_pos.push_back(i);
  return seq;
}

TokenSeq make_vlm_seq(int64_t slots, int64_t grid_cols, const std::string& prompt,
                      const std::string& completion, bool add_eos) {
  require(slots >= 0, Errc::InvalidValue, "negative visual slot count");
  require(slots == 0 || grid_cols >= 1, Errc::InvalidValue, "grid_cols must be >= 1");
  TokenSeq seq;
  seq.ids.push_back(kBosId);
  seq.modality.push_back(Modality::Text);
  seq.vis_rows.push_back(-1);
  seq.vis_cols.push_back(-1);
  for (int64_t i = 0; i < slots; ++i) {
    seq.ids.push_back(kImgId);
    seq.modality.push_back(Modality::Visual);
    seq.vis_rows.push_back(i / grid_cols);
    seq.vis_cols.push_back(i % grid_cols);
  }
  auto push_text = [&](const std::string& s) {
    for (int32_t id : encode_bytes(s)) {
      seq.ids.push_back(id);
      seq.modality.push_back(Modality::Text);
      seq.vis_rows.push_back(-1);
      seq.vis_cols.push_back(-1);
    }
  };
  push_text(prompt);
  push_text(completion);
  if (add_eos) {
    seq.ids.push_back(kEosId);
    seq.modality.push_back(Modality::Text);
    seq.vis_rows.push_back(-1);
    seq.vis_cols.push_back(-1);
  }
  for (int64_t i = 0; i < seq.size(); ++i) seq.text_pos.push_back(i);
  return seq;
}

void validate(const ImageBatch& img, const ModelConfig& cfg) {
  require(img.pixels.defined() && img.pixels.rank() == 3 && img.pixels.dim(0) == img.height &&
              img.pixels.dim(1) == img.width && img.pixels.dim(2) == 3,
          Errc::ShapeMismatch, "image pixels must be [height x width x 3]");
  require(img.height >= 1 && img.width >= 1, Errc::InvalidValue, "empty image");
  require(img.height <= cfg.max_image_side && img.width <= cfg.max_image_side, Errc::InvalidValue,
          "image side exceeds max_image_side");
  const double* p = img.pixels.data();
  for (int64_t i = 0; i < img.pixels.numel(); ++i)
    require(p[i] >= 0.0 && p[i] <= 1.0, Errc::InvalidValue, "pixel values must lie in [0,1]");
}

const Tensor& Weights::at(const std::string& name) const {
  auto it = params.find(name);
  require(it != params.end(), Errc::ConfigError, "missing parameter " + name);
  return it->second;
}

Tensor& Weights::at(const std::string& name) {
  auto it = params.find(name);
  require(it != params.end(), Errc::ConfigError, "missing parameter " + name);
  return it->second;
}

int64_t Weights::total_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

std::vector<Tensor> Weights::all() const {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

Weights init_weights(const ModelConfig& cfg, uint64_t seed) {
  validate(cfg);
  const double s = 0.02;
  Weights w;
  int64_t patch_dim = cfg.patch_size * cfg.patch_size * 3;
  w.params.emplace("enc.patch_proj.w",
                   init_normal("enc.patch_proj.w", {patch_dim, cfg.d_model}, seed, s));
  w.params.emplace("enc.patch_proj.b", Tensor::zeros({cfg.d_model}, true));
  for (int64_t i = 0; i < cfg.n_layers_enc; ++i)
    add_block_params(w, "enc.L" + std::to_string(i) + ".", cfg, seed);
  int64_t merge_dim = cfg.merge_factor * cfg.merge_factor * cfg.d_model;
  w.params.emplace("merger.w1", init_normal("merger.w1", {merge_dim, cfg.d_model}, seed, s));
  w.params.emplace("merger.b1", Tensor::zeros({cfg.d_model}, true));
  w.params.emplace("merger.w2", init_normal("merger.w2", {cfg.d_model, cfg.d_model}, seed, s));
  w.params.emplace("merger.b2", Tensor::zeros({cfg.d_model}, true));
  w.params.emplace("dec.embed", init_normal("dec.embed", {cfg.vocab_size, cfg.d_model}, seed, s));
  for (int64_t i = 0; i < cfg.n_layers_dec; ++i)
    add_block_params(w, "dec.L" + std::to_string(i) + ".", cfg, seed);
  w.params.emplace("dec.final_norm.gain", Tensor::full({cfg.d_model}, 1.0, true));
  if (cfg.mtp_enabled) {
    w.params.emplace("mtp.proj.w",
                     init_normal("mtp.proj.w", {2 * cfg.d_model, cfg.d_model}, seed, s));
    w.params.emplace("mtp.proj.b", Tensor::zeros({cfg.d_model}, true));
    add_block_params(w, "mtp.L0.", cfg, seed);
  }
  return w;
}

Patches patchify(const ImageBatch& img, const ModelConfig& cfg) {
  validate(cfg);
  validate(img, cfg);
  int64_t p = cfg.patch_size;
  require(img.height % p == 0 && img.width % p == 0, Errc::IndivisibleImage,
          "image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
              " is not divisible by patch_size " + std::to_string(p));
  int64_t gr = img.height / p, gc = img.width / p;
  Patches out;
  out.values = Tensor({gr * gc, p * p * 3});
  double* dst = out.values.data();
  const double* src = img.pixels.data();
  for (int64_t r = 0; r < gr; ++r) {
    for (int64_t c = 0; c < gc; ++c) {
      double* d = dst + (r * gc + c) * p * p * 3;
      for (int64_t py = 0; py < p; ++py)
        std::memcpy(d + py * p * 3, src + ((r * p + py) * img.width + c * p) * 3,
                    static_cast<size_t>(p * 3) * sizeof(double));
      out.rows.push_back(r);
      out.cols.push_back(c);
    }
  }
  return out;
}

ImageBatch unpatchify(const Patches& p, int64_t height, int64_t width, const ModelConfig& cfg) {
  validate(cfg);
  int64_t ps = cfg.patch_size;
  require(height >= 1 && width >= 1 && height % ps == 0 && width % ps == 0,
          Errc::IndivisibleImage, "target size is not divisible by patch_size");
  int64_t gr = height / ps, gc = width / ps;
  int64_t n = gr * gc;
  require(p.values.defined() && p.values.rank() == 2 && p.values.dim(0) == n &&
              p.values.dim(1) == ps * ps * 3 && static_cast<int64_t>(p.rows.size()) == n &&
              static_cast<int64_t>(p.cols.size()) == n,
          Errc::ShapeMismatch, "patch tensor does not match the target grid");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  ImageBatch img;
  img.height = height;
  img.width = width;
  img.pixels = Tensor({height, width, 3});
  double* dst = img.pixels.data();
  const double* src = p.values.data();
  for (int64_t i = 0; i < n; ++i) {
    int64_t r = p.rows[i], c = p.cols[i];
    require(r >= 0 && r < gr && c >= 0 && c < gc, Errc::InvalidValue,
            "patch coordinate outside the grid");
    require(!seen[static_cast<size_t>(r * gc + c)], Errc::InvalidValue,
            "duplicate patch coordinate");
    seen[static_cast<size_t>(r * gc + c)] = 1;
    const double* s = src + i * ps * ps * 3;
    for (int64_t py = 0; py < ps; ++py)
      std::memcpy(dst + ((r * ps + py) * width + c * ps) * 3, s + py * ps * 3,
                  static_cast<size_t>(ps * 3) * sizeof(double));
  }
  return img;
}

Tensor encode_patches(const Patches& p, const ModelConfig& cfg, const Weights& w) {
  validate(cfg);
  int64_t n = p.values.dim(0);
  require(n >= 1, Errc::InvalidValue, "no patches to encode");
  require(static_cast<int64_t>(p.rows.size()) == n && static_cast<int64_t>(p.cols.size()) == n,
          Errc::ShapeMismatch, "patch coordinates must match patch count");
  Tensor x = add(matmul(p.values, w.at("enc.patch_proj.w")), w.at("enc.patch_proj.b"));
  AttnConfig acfg{cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, /*causal=*/false, std::nullopt};
  PosInfo pos;
  pos.two_dim = true;
  pos.rows = p.rows;
  pos.cols = p.cols;
  for (int64_t i = 0; i < cfg.n_layers_enc; ++i)
    x = block(x, "enc.L" + std::to_string(i) + ".", w, cfg, acfg, pos);
  return x;
}

Tensor encode_image(const ImageBatch& img, const ModelConfig& cfg, const Weights& w) {
  return encode_patches(patchify(img, cfg), cfg, w);
}

int64_t merged_grid_cols(const ImageBatch& img, const ModelConfig& cfg) {
  validate(cfg);
  int64_t p = cfg.patch_size, mf = cfg.merge_factor;
  require(img.height % p == 0 && img.width % p == 0, Errc::IndivisibleImage,
          "image is not divisible by patch_size");
  require((img.width / p) % mf == 0, Errc::IndivisibleGrid,
          "patch grid is not divisible by merge_factor");
  return (img.width / p) / mf;
}

int64_t merged_count(const ImageBatch& img, const ModelConfig& cfg) {
  validate(cfg);
  int64_t p = cfg.patch_size, mf = cfg.merge_factor;
  require(img.height % p == 0 && img.width % p == 0, Errc::IndivisibleImage,
          "image is not divisible by patch_size");
  int64_t gr = img.height / p, gc = img.width / p;
  require(gr % mf == 0 && gc % mf == 0, Errc::IndivisibleGrid,
          "patch grid is not divisible by merge_factor");
  return (gr / mf) * (gc / mf);
}

Tensor merge_tokens(const Tensor& enc, const std::vector<int64_t>& rows,
                    const std::vector<int64_t>& cols, const ModelConfig& cfg, const Weights& w) {
  validate(cfg);
  require(enc.defined() && enc.rank() == 2 && enc.dim(1) == cfg.d_model, Errc::ShapeMismatch,
          "encoder output must be [N x d_model]");
  int64_t n = enc.dim(0);
  require(static_cast<int64_t>(rows.size()) == n && static_cast<int64_t>(cols.size()) == n,
          Errc::ShapeMismatch, "grid coordinates must match token count");
  int64_t r_dim = 0, c_dim = 0;
  for (int64_t i = 0; i < n; ++i) {
    require(rows[i] >= 0 && cols[i] >= 0, Errc::InvalidValue, "negative grid coordinate");
    r_dim = std::max(r_dim, rows[i] + 1);
    c_dim = std::max(c_dim, cols[i] + 1);
  }
  require(r_dim * c_dim == n, Errc::ShapeMismatch, "grid coordinates do not form a full grid");
  std::vector<int64_t> slot(static_cast<size_t>(n), -1);
  for (int64_t i = 0; i < n; ++i) {
    int64_t cell = rows[i] * c_dim + cols[i];
    require(slot[static_cast<size_t>(cell)] < 0, Errc::InvalidValue, "duplicate grid coordinate");
    slot[static_cast<size_t>(cell)] = i;
  }
  int64_t mf = cfg.merge_factor;
  require(r_dim % mf == 0 && c_dim % mf == 0, Errc::IndivisibleGrid,
          "grid " + std::to_string(r_dim) + "x" + std::to_string(c_dim) +
              " is not divisible by merge_factor " + std::to_string(mf));
  int64_t mr = r_dim / mf, mc = c_dim / mf;
  // One gather per neighborhood offset, concatenated feature-wise.
  Tensor cat;
  for (int64_t i = 0; i < mf; ++i) {
    for (int64_t j = 0; j < mf; ++j) {
      std::vector<int32_t> ids;
      ids.reserve(static_cast<size_t>(mr * mc));
      for (int64_t rr = 0; rr < mr; ++rr)
        for (int64_t cc = 0; cc < mc; ++cc)
          ids.push_back(
              static_cast<int32_t>(slot[static_cast<size_t>((rr * mf + i) * c_dim + cc * mf + j)]));
      Tensor g = embedding(enc, ids);
      cat = cat.defined() ? concat_lastdim(cat, g) : g;
    }
  }
  Tensor h1 = add(matmul(cat, w.at("merger.w1")), w.at("merger.b1"));
  return add(h1, add(matmul(silu(h1), w.at("merger.w2")), w.at("merger.b2")));
}

Tensor decoder_hidden(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                      const ModelConfig& cfg, const Weights& w) {
  validate(cfg);
  validate(seq, cfg);
  Tensor x = embed_inputs(seq, visual_embeds, cfg, w);
  PosInfo pos;
  pos.positions = seq.text_pos;
  for (int64_t i = 0; i < cfg.n_layers_dec; ++i) {
    AttnConfig acfg{cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, /*causal=*/true,
                    layer_is_windowed(cfg, i) ? cfg.window : std::nullopt};
    x = block(x, "dec.L" + std::to_string(i) + ".", w, cfg, acfg, pos);
  }
  return rms_norm(x, w.at("dec.final_norm.gain"));
}

Tensor decoder_forward(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                       const ModelConfig& cfg, const Weights& w) {
  Tensor h = decoder_hidden(seq, visual_embeds, cfg, w);
  return matmul(h, transpose(w.at("dec.embed")));
}

Tensor mtp_loss(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                const ModelConfig& cfg, const Weights& w, const std::vector<uint8_t>& loss_mask) {
  validate(cfg);
  require(cfg.mtp_enabled, Errc::MtpDisabled, "mtp_enabled is false");
  validate(seq, cfg);
  int64_t t = seq.size();
  require(t >= 3, Errc::SequenceTooShort,
          "MTP needs at least 3 tokens, got " + std::to_string(t));
  if (!loss_mask.empty())
    require(static_cast<int64_t>(loss_mask.size()) == t, Errc::ShapeMismatch,
            "loss mask length must match the sequence");
  Tensor h = decoder_hidden(seq, visual_embeds, cfg, w);
  Tensor x0 = embed_inputs(seq, visual_embeds, cfg, w);
  // Row t holds [hidden(t) ++ input-embedding(t+1)] and predicts token t+2.
  Tensor cat = concat_lastdim(slice_rows(h, 0, t - 2), slice_rows(x0, 1, t - 2));
  Tensor z = add(matmul(cat, w.at("mtp.proj.w")), w.at("mtp.proj.b"));
  AttnConfig acfg{cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, /*causal=*/true, std::nullopt};
  PosInfo pos;
  pos.positions.assign(seq.text_pos.begin(), seq.text_pos.begin() + (t - 2));
  z = block(z, "mtp.L0.", w, cfg, acfg, pos);
  z = rms_norm(z, w.at("dec.final_norm.gain"));
  Tensor logits = matmul(z, transpose(w.at("dec.embed")));
  std::vector<int32_t> targets(seq.ids.begin() + 2, seq.ids.end());
  std::vector<uint8_t> mask(static_cast<size_t>(t - 2), 1);
  if (!loss_mask.empty())
    for (int64_t i = 0; i < t - 2; ++i) mask[static_cast<size_t>(i)] = loss_mask[i + 2];
  return masked_cross_entropy(logits, targets, mask);
}

Tensor mtp_loss(const TokenSeq& seq, const ModelConfig& cfg, const Weights& w) {
  return mtp_loss(seq, std::nullopt, cfg, w, {});
}

void validate(const SamplingParams& sp) {
  require(std::isfinite(sp.temperature) && sp.temperature >= 0.0, Errc::InvalidSamplingParams,
          "temperature must be finite and >= 0");
  require(std::isfinite(sp.top_p) && sp.top_p > 0.0 && sp.top_p <= 1.0,
          Errc::InvalidSamplingParams, "top_p must lie in (0, 1]");
  require(std::isfinite(sp.presence_penalty), Errc::InvalidSamplingParams,
          "presence_penalty must be finite");
  require(sp.max_tokens >= 1, Errc::InvalidSamplingParams, "max_tokens must be >= 1");
}

int32_t sample_token(const double* logits, int64_t vocab, const SamplingParams& sp,
                     const std::vector<int32_t>& emitted, CounterRng& rng) {
  validate(sp);
  require(vocab >= 1, Errc::ShapeMismatch, "empty logits row");
  std::vector<double> z(logits, logits + vocab);
  // Presence penalty hits tokens already emitted in this call, before
  // temperature; repeats are penalized once.
  std::unordered_set<int32_t> seen(emitted.begin(), emitted.end());
  for (int32_t id : seen)
    if (id >= 0 && id < vocab) z[static_cast<size_t>(id)] -= sp.presence_penalty;
  if (sp.temperature == 0.0) {  // greedy; ties break to the lowest id
    int64_t best = 0;
    for (int64_t i = 1; i < vocab; ++i)
      if (z[static_cast<size_t>(i)] > z[static_cast<size_t>(best)]) best = i;
    return static_cast<int32_t>(best);
  }
  double mx = z[0];
  for (int64_t i = 0; i < vocab; ++i) {
    z[static_cast<size_t>(i)] /= sp.temperature;
    if (i == 0) mx = z[0];
    mx = std::max(mx, z[static_cast<size_t>(i)]);
  }
  double denom = 0.0;
  for (int64_t i = 0; i < vocab; ++i) {
    z[static_cast<size_t>(i)] = std::exp(z[static_cast<size_t>(i)] - mx);
    denom += z[static_cast<size_t>(i)];
  }
  for (int64_t i = 0; i < vocab; ++i) z[static_cast<size_t>(i)] /= denom;
  // Nucleus: smallest prefix of (prob desc, id asc) with cumulative mass >= top_p.
  std::vector<int32_t> order(static_cast<size_t>(vocab));
  for (int64_t i = 0; i < vocab; ++i) order[static_cast<size_t>(i)] = static_cast<int32_t>(i);
  std::sort(order.begin(), order.end(), [&](int32_t a, int32_t b) {
    double pa = z[static_cast<size_t>(a)], pb = z[static_cast<size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  size_t keep = order.size();
  double cum = 0.0;
  for (size_t i = 0; i < order.size(); ++i) {
    cum += z[static_cast<size_t>(order[i])];
    if (cum >= sp.top_p) {
      keep = i + 1;
      break;
    }
  }
  double total = 0.0;
  for (size_t i = 0; i < keep; ++i) total += z[static_cast<size_t>(order[i])];
  double u = rng.next_uniform() * total;
  double acc = 0.0;
  for (size_t i = 0; i < keep; ++i) {
    acc += z[static_cast<size_t>(order[i])];
    if (u < acc) return order[i];
  }
  return order[keep - 1];
}

std::vector<int32_t> generate(const TokenSeq& prompt, const std::optional<ImageBatch>& img,
                              const ModelConfig& cfg, const Weights& w,
                              const SamplingParams& sp) {
  validate(cfg);
  validate(sp);
  NoGradGuard ng;
  std::optional<Tensor> embeds;
  if (img) {
    Patches p = patchify(*img, cfg);
    Tensor enc = encode_patches(p, cfg, w);
    embeds = merge_tokens(enc, p.rows, p.cols, cfg, w);
  }
  TokenSeq seq = prompt;
  CounterRng rng(sp.seed);
  std::vector<int32_t> emitted;
  for (int64_t step = 0; step < sp.max_tokens; ++step) {
    Tensor logits = decoder_forward(seq, embeds, cfg, w);
    int64_t t = logits.dim(0), v = logits.dim(1);
    int32_t tok = sample_token(logits.data() + (t - 1) * v, v, sp, emitted, rng);
    emitted.push_back(tok);
    seq.ids.push_back(tok);
    seq.modality.push_back(Modality::Text);
    seq.text_pos.push_back(seq.text_pos.back() + 1);
    seq.vis_rows.push_back(-1);
    seq.vis_cols.push_back(-1);
    if (tok == kEosId) break;
  }
  return emitted;
}

}  // namespace exms
