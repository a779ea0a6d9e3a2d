#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stclip/data.hpp"
#include "stclip/encoders.hpp"
#include "stclip/nn.hpp"

// Person-context interaction detector built on top of the frozen image and
// text encoders. Every trainable tensor lives under "det." and is
// initialized so the whole model starts out equal to the frozen encoders.
namespace stclip {

struct DetectorConfig {
  std::size_t t_frames = 4;  // total frames per clip, keyframe-centred
  std::size_t k_interest = 100;
  std::size_t lora_rank = 8;  // 0 disables LoRA
  bool adapter = true;
  bool temporal_mhsa = true;       // false: plain average over frames
  bool prompt_every_layer = true;  // false: last layer only
  bool interest_tokens = true;     // false: shared prompting with all context tokens
  std::size_t temporal_heads = 4;
  std::size_t prompt_heads = 4;
  float temperature = 0.01f;

  void validate() const;
};

enum class LabelMode { Single, Multi };

// ---------------------------------------------------------------------------
// Parameters.

void init_detector(ParamStore& store, const DetectorConfig& cfg, std::uint64_t seed);
// Detector hyperparameters echoed as "meta.det.*" scalars.
void write_detector_meta(ParamStore& store, const DetectorConfig& cfg);
DetectorConfig read_detector_config(const ParamStore& store);

struct TemporalParams {
  Tensor e_temp;  // [T × D]
  nn::LayerNormParams ln;
  nn::MhsaParams attn;
};

struct AdapterParams {
  nn::LayerNormParams ln;
  nn::FfnParams ffn;
};

struct PromptParams {
  nn::Linear proj;  // interest tokens D -> D_t
  nn::MhsaParams ca;
  nn::FfnParams ffn;
  Tensor rho;  // [D_t]
};

TemporalParams temporal_params_from(const ParamStore& s, std::size_t heads);
AdapterParams adapter_params_from(const ParamStore& s);
PromptParams prompt_params_from(const ParamStore& s, std::size_t layer, std::size_t heads);

// ---------------------------------------------------------------------------
// Building blocks.

struct ContextTokens {
  Tensor tokens;  // [N × D]
  std::size_t frames = 0;
};

struct PersonTokens {
  Tensor tokens;  // [B × D]
  std::vector<int> ids;
};

// frames: [T × N × D]. Attention runs along T independently per patch
// position; the result is the temporal mean of each position.
ContextTokens temporal_model(const Tensor& frames, const TemporalParams& p);
ContextTokens average_pool_frames(const Tensor& frames);

// P + FFN(LN(P)).
PersonTokens person_adapter(const Tensor& persons, const AdapterParams& p, std::vector<int> ids = {});

// The k largest entries of `row` within [begin, end), as positions relative
// to `begin`, sorted ascending. Ties go to the lower column.
std::vector<std::size_t> spot_interest_tokens(std::span<const float> row, std::size_t begin,
                                              std::size_t end, std::size_t k);
std::vector<std::size_t> spot_interest_tokens(const nn::ImportanceMatrix& m, std::size_t person_row,
                                              std::size_t begin, std::size_t end, std::size_t k);

// f_t: [batch·N_L × D_t], f_i: [batch·K' × D_t], both grouped by person.
// Returns F_T + ρ ⊙ F̂ where F̄ = F_T + CA(F_T, F_I) and F̂ = F̄ + FFN(F̄).
Tensor context_prompt_layer(const Tensor& f_t, const Tensor& f_i, std::size_t batch,
                            const PromptParams& p);

struct LayerTrace {
  Tensor importance;  // [(B+N) × (B+N)]
  // Interest positions within the context block, one list per person;
  // empty in shared mode or when the layer does not prompt.
  std::vector<std::vector<std::size_t>> interest;
  // Label features after this layer (one block when shared).
  std::vector<Tensor> labels;
  bool prompted = false;
};

struct InteractionOutput {
  Tensor person_out;              // [B × D_joint], unit rows
  std::vector<Tensor> label_out;  // one [N_L × D_t] block when shared, else one per person
  std::vector<LayerTrace> layers;
  bool shared = false;
};

// Runs [P̃ + slot; Z̃] through the image encoder layers (with LoRA when
// configured), prompting the label features after each selected layer.
InteractionOutput interaction_forward(const PersonTokens& persons, const ContextTokens& ctx,
                                      const Tensor& labels, const ParamStore& store,
                                      const DetectorConfig& cfg);

struct ClassScores {
  Tensor logits;  // cosine / τ, [B × N_L]
  Tensor scores;  // softmax (single) or sigmoid (multi) of the logits
};

// Label blocks may be one shared block or one per person. Inputs are
// normalized here, so their scale does not matter.
ClassScores classify(const Tensor& person_out, std::span<const Tensor> label_out, float temperature,
                     LabelMode mode);

// ---------------------------------------------------------------------------
// Whole-clip helpers.

// Frozen-encoder inputs of one clip. None of these carry gradients, so they
// can be computed once and reused across training iterations.
struct ClipFeatures {
  Tensor persons;  // [B × D] cls features of the keyframe crops
  Tensor frames;   // [T × N × D] patch tokens with positions
};

ClipFeatures extract_features(const ClipSample& clip, const ParamStore& store,
                              const ImageEncoderConfig& cfg);

// Context, adapter and interaction stages for one clip.
InteractionOutput detector_forward(const ClipFeatures& f, const Tensor& labels,
                                   const ParamStore& store, const DetectorConfig& cfg);

// The frozen encoders alone: persons and the frame-averaged context go
// through the unmodified layers and are scored against the raw labels.
ClassScores frozen_baseline(const ClipFeatures& f, const Tensor& labels, const ParamStore& store,
                            const DetectorConfig& cfg, LabelMode mode);

// ---------------------------------------------------------------------------
// Introspection helpers.

// Importance over the context block as a grid×grid 8-bit image, scaled so
// the largest entry is 255.
std::vector<std::uint8_t> importance_grid(std::span<const float> context_row, std::size_t grid);

// Rows projected on the top two principal axes of their covariance. Each
// axis is signed so its first nonzero loading is positive. [n × 2].
std::vector<std::array<double, 2>> pca_2d(const Tensor& rows);

}  // namespace stclip
