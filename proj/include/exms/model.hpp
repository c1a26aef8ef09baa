#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "exms/attention.hpp"
#include "exms/rope.hpp"
#include "exms/tensor.hpp"

namespace exms {

// Byte-level tokenizer: 256 raw bytes plus specials.
inline constexpr int32_t kPadId = 256;
inline constexpr int32_t kBosId = 257;
inline constexpr int32_t kEosId = 258;
inline constexpr int32_t kImgId = 259;
inline constexpr int64_t kVocabSize = 260;

std::vector<int32_t> encode_bytes(const std::string& text);
std::string decode_bytes(const std::vector<int32_t>& ids);  // byte ids only; stops at EOS

struct ModelConfig {
  int64_t vocab_size = kVocabSize;
  int64_t d_model = 64;
  int64_t n_layers_enc = 2;
  int64_t n_layers_dec = 2;
  int64_t n_heads = 4;
  int64_t n_kv_heads = 2;
  int64_t head_dim = 16;
  int64_t d_ff = 128;
  int64_t patch_size = 16;
  int64_t merge_factor = 2;
  int64_t max_image_side = 256;
  bool mtp_enabled = true;
  double mtp_weight = 0.1;
  // Decoder hybrid attention: layers use this sliding window except every
  // fourth layer (3 windowed : 1 global). Unset = all layers global.
  std::optional<int64_t> window;
};

void validate(const ModelConfig& cfg);
bool layer_is_windowed(const ModelConfig& cfg, int64_t layer);  // decoder pattern

enum class Modality : uint8_t { Text = 0, Visual = 1 };

struct TokenSeq {
  std::vector<int32_t> ids;
  std::vector<Modality> modality;
  std::vector<int64_t> text_pos;  // strictly increasing 1D decoder positions
  std::vector<int64_t> vis_rows;  // merged-grid coordinates, -1 on text slots
  std::vector<int64_t> vis_cols;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  int64_t visual_count() const;
  std::vector<int64_t> visual_indices() const;
};

void validate(const TokenSeq& seq, const ModelConfig& cfg);
TokenSeq make_text_seq(const std::string& text, bool add_bos = true, bool add_eos = true);
// [BOS] [IMG x slots] prompt-bytes completion-bytes [EOS]; grid_cols gives the
// merged grid width used for the visual slot coordinates.
TokenSeq make_vlm_seq(int64_t slots, int64_t grid_cols, const std::string& prompt,
                      const std::string& completion, bool add_eos = true);

struct ImageBatch {
  Tensor pixels;  // [H x W x 3], values in [0,1]
  int64_t height = 0;
  int64_t width = 0;
};

void validate(const ImageBatch& img, const ModelConfig& cfg);

// Named parameters; std::map keeps checkpoint ordering deterministic.
struct Weights {
  std::map<std::string, Tensor> params;

  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool has(const std::string& name) const { return params.count(name) != 0; }
  int64_t total_params() const;
  std::vector<Tensor> all() const;
};

Weights init_weights(const ModelConfig& cfg, uint64_t seed);

struct Patches {
  Tensor values;  // [N x patch_size^2 * 3]
  std::vector<int64_t> rows, cols;
};

Patches patchify(const ImageBatch& img, const ModelConfig& cfg);
ImageBatch unpatchify(const Patches& p, int64_t height, int64_t width, const ModelConfig& cfg);

Tensor encode_image(const ImageBatch& img, const ModelConfig& cfg, const Weights& w);
// Raw-patch variant used by tests that permute patch order.
Tensor encode_patches(const Patches& p, const ModelConfig& cfg, const Weights& w);

Tensor merge_tokens(const Tensor& enc, const std::vector<int64_t>& rows,
                    const std::vector<int64_t>& cols, const ModelConfig& cfg, const Weights& w);

// Merged token count for an image under this config.
int64_t merged_count(const ImageBatch& img, const ModelConfig& cfg);
int64_t merged_grid_cols(const ImageBatch& img, const ModelConfig& cfg);

// Final-norm hidden states [T x d_model].
Tensor decoder_hidden(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                      const ModelConfig& cfg, const Weights& w);
Tensor decoder_forward(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                       const ModelConfig& cfg, const Weights& w);  // [T x vocab]

// Depth-1 multi-token prediction loss: an extra block reads
// [hidden(t) ++ embed(token t+1)] and predicts token t+2; mean cross-entropy
// over the T-2 valid positions. loss_mask, when given, selects target
// positions (indexed by t+2) like the main loss mask.
Tensor mtp_loss(const TokenSeq& seq, const std::optional<Tensor>& visual_embeds,
                const ModelConfig& cfg, const Weights& w,
                const std::vector<uint8_t>& loss_mask = {});
Tensor mtp_loss(const TokenSeq& seq, const ModelConfig& cfg, const Weights& w);

struct SamplingParams {
  double temperature = 1.0;
  double top_p = 0.95;
  double presence_penalty = 0.0;
  int64_t max_tokens = 64;
  uint64_t seed = 0;
};

void validate(const SamplingParams& sp);

// One sampling step over a logits row. `emitted` lists token ids already
// generated in this call (presence penalty applies to them, before
// temperature). Deterministic given rng state.
int32_t sample_token(const double* logits, int64_t vocab, const SamplingParams& sp,
                     const std::vector<int32_t>& emitted, CounterRng& rng);

// Autoregressive generation with prefix recompute. Appends text tokens after
// the prompt; stops after max_tokens or when EOS is produced (EOS included in
// the returned list). The MTP head never participates.
std::vector<int32_t> generate(const TokenSeq& prompt, const std::optional<ImageBatch>& img,
                              const ModelConfig& cfg, const Weights& w,
                              const SamplingParams& sp);

}  // namespace exms
