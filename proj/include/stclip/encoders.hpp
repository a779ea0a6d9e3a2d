#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stclip/nn.hpp"
#include "stclip/param_store.hpp"
#include "stclip/vocab.hpp"

namespace stclip {

struct ImageEncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t joint_dim = 64;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  void validate() const;
};

struct TextEncoderConfig {
  std::size_t context_length = 16;
  std::size_t width = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t joint_dim = 64;

  void validate() const;
};

struct EncoderConfigs {
  ImageEncoderConfig image;
  TextEncoderConfig text;
};

// Fills `store` with freshly initialized image and text encoders, the
// learnable logit scale and the config echo under "meta.".
void init_clip(ParamStore& store, const EncoderConfigs& cfg, const Vocabulary& vocab,
               std::uint64_t seed);

// Writes and reads the architecture echo ("meta.*" scalars and the
// vocabulary bytes) so a checkpoint is self-describing.
void write_meta(ParamStore& store, const EncoderConfigs& cfg, const Vocabulary& vocab);
EncoderConfigs read_configs(const ParamStore& store);
Vocabulary read_vocabulary(const ParamStore& store);

// ---------------------------------------------------------------------------
// Pre-LN transformer layer shared by both encoders and by the detection
// stack: x + MHSA(LN1(x)), then + FFN(LN2(x)).

struct EncoderLayer {
  nn::LayerNormParams ln1;
  nn::MhsaParams attn;
  nn::LayerNormParams ln2;
  nn::FfnParams ffn;
};

struct LoraPair {
  nn::LoraFactors fc1;
  nn::LoraFactors fc2;
  std::size_t rank = 0;
  float alpha = 0.0f;
};

struct LayerResult {
  Tensor y;
  // Head-averaged attention of the block, [rows × keys-per-group].
  Tensor importance;
  // Output of the attention residual, before the FFN.
  Tensor hidden;
};

EncoderLayer encoder_layer_from(const ParamStore& s, std::string_view prefix, std::size_t heads);
LayerResult encoder_layer_forward(const Tensor& x, const EncoderLayer& p,
                                  const LoraPair* lora = nullptr, std::size_t groups = 1,
                                  bool causal = false);

// ---------------------------------------------------------------------------
// Image side.

struct ImageFeatures {
  Tensor cls_feature;        // [B × D], raw residual stream at the cls slot
  Tensor projected_feature;  // [B × D_joint], unit rows
};

// Patch tokens plus their positional encodings: [N × D]. No cls token.
Tensor patch_tokens(const Tensor& image, const ParamStore& store, const ImageEncoderConfig& cfg);
// [x_cls; patches] + e: [(N+1) × D].
Tensor image_tokens(const Tensor& image, const ParamStore& store, const ImageEncoderConfig& cfg);

ImageFeatures encode_image(const Tensor& image, const ParamStore& store,
                           const ImageEncoderConfig& cfg);
// Batched form; rows follow input order.
ImageFeatures encode_images(std::span<const Tensor> images, const ParamStore& store,
                            const ImageEncoderConfig& cfg);
// ln_post, visual projection and unit normalization of cls-slot rows.
Tensor project_visual(const Tensor& cls_rows, const ParamStore& store);

// ---------------------------------------------------------------------------
// Text side.

// Unit rows [names × D_joint], one per name, features taken at EOS.
Tensor encode_text(std::span<const std::string> names, const ParamStore& store,
                   const Vocabulary& vocab, const TextEncoderConfig& cfg);

// ---------------------------------------------------------------------------
// Contrastive pretraining.

struct CaptionedImage {
  Tensor image;  // [H × W × 3] in [−1, 1]
  std::string caption;
  // Items sharing a group (for instance the action) never share a batch,
  // so off-diagonal pairs are always true negatives.
  std::string group;
};

struct PretrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 12;
  double lr = 1e-3;
  double warmup_steps = 100;
  std::uint64_t seed = 0;
  float init_temperature = 0.07f;
  float max_logit_scale = 100.0f;
};

struct PretrainLogEntry {
  std::size_t step;
  double loss;
  double logit_scale;
};

// Symmetric cross-entropy over a square logit matrix with the positives on
// the diagonal.
Tensor symmetric_cross_entropy(const Tensor& logits);

ParamStore contrastive_pretrain(std::span<const CaptionedImage> corpus, const EncoderConfigs& cfg,
                                const Vocabulary& vocab, const PretrainConfig& hyper,
                                std::vector<PretrainLogEntry>* log = nullptr);

struct AlignmentStats {
  double mean_diagonal = 0.0;
  double mean_off_diagonal = 0.0;
  double margin() const { return mean_diagonal - mean_off_diagonal; }
};

// Cosine statistics of image/caption pairs over a batch of distinct groups.
AlignmentStats alignment_stats(std::span<const CaptionedImage> batch, const ParamStore& store,
                               const Vocabulary& vocab, const EncoderConfigs& cfg);

// Every parameter under "img." and "txt." plus the logit scale.
bool is_encoder_param(std::string_view name);

}  // namespace stclip
