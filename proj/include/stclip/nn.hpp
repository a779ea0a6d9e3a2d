#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "stclip/param_store.hpp"
#include "stclip/rng.hpp"
#include "stclip/tensor.hpp"

// Transformer building blocks. Weights are stored input-major, so a linear
// layer computes x·W + b with W: [in × out].
namespace stclip::nn {

struct Linear {
  Tensor w;  // [in × out]
  Tensor b;  // [out]
};
Tensor linear(const Tensor& x, const Linear& p);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};
Tensor layer_norm(const Tensor& x, const LayerNormParams& p, float eps = 1e-5f);

struct MhsaParams {
  std::size_t num_heads = 1;
  Linear q, k, v, o;
  std::size_t width() const { return q.w.dim(0); }
  std::size_t head_dim() const { return width() / num_heads; }
};

// Head-averaged attention probabilities; row i is how much each token
// matters to token i.
struct ImportanceMatrix {
  Tensor values;  // [C × C]
  std::size_t token_count() const { return values.dim(0); }
  std::span<const float> row(std::size_t i) const;
};

struct MhsaOutput {
  Tensor y;  // excludes the residual
  ImportanceMatrix importance;
};

MhsaOutput mhsa_forward(const Tensor& x, const MhsaParams& p);

struct GroupedAttention {
  Tensor y;          // [G·C × D], no residual
  Tensor head_mean;  // [G·C × C]
};
// Self-attention applied independently to `groups` consecutive blocks of rows.
GroupedAttention self_attention(const Tensor& x, const MhsaParams& p, std::size_t groups,
                                bool causal = false);

// Queries from q_in, keys and values from kv_in. No residual. With groups,
// query block g only sees key block g.
Tensor cross_attention(const Tensor& q_in, const Tensor& kv_in, const MhsaParams& p,
                       std::size_t groups = 1);

struct FfnParams {
  Linear fc1;  // [D × hidden]
  Linear fc2;  // [hidden × D]
};
Tensor ffn_forward(const Tensor& x, const FfnParams& p);

struct LoraFactors {
  Tensor a;  // [in × r]
  Tensor b;  // [r × out], zero at initialization
};

struct LoraFfnParams {
  FfnParams base;  // frozen
  LoraFactors fc1;
  LoraFactors fc2;
  std::size_t rank = 8;
  float alpha = 8.0f;
};
Tensor lora_ffn_forward(const Tensor& x, const LoraFfnParams& p);

// [H × W × 3] -> [N × P·P·3], patches in raster order, features ordered
// (row, col, channel) within a patch.
Tensor patchify(const Tensor& image, std::size_t patch);
// Linear map of each flattened patch; no class token, no positions.
Tensor patch_embed(const Tensor& image, std::size_t patch, const Linear& proj);

// --- construction from a ParamStore ------------------------------------------
// Parameter names are "<prefix>.<field>"; initializers derive each tensor's
// random stream from its full name so insertion order does not matter.

Linear linear_from(const ParamStore& s, std::string_view prefix);
LayerNormParams layer_norm_from(const ParamStore& s, std::string_view prefix);
MhsaParams mhsa_from(const ParamStore& s, std::string_view prefix, std::size_t heads);
FfnParams ffn_from(const ParamStore& s, std::string_view prefix);
LoraFactors lora_from(const ParamStore& s, std::string_view prefix);

void init_linear(ParamStore& s, std::string_view prefix, std::size_t in, std::size_t out,
                 const RngStream& rng, bool zero = false, bool frozen = false);
void init_layer_norm(ParamStore& s, std::string_view prefix, std::size_t width,
                     bool frozen = false);
void init_mhsa(ParamStore& s, std::string_view prefix, std::size_t width, const RngStream& rng,
               bool zero_output = false, bool frozen = false);
void init_ffn(ParamStore& s, std::string_view prefix, std::size_t width, std::size_t hidden,
              const RngStream& rng, bool zero_output = false, bool frozen = false);
void init_lora(ParamStore& s, std::string_view prefix, std::size_t in, std::size_t out,
               std::size_t rank, const RngStream& rng);
Tensor init_normal(const RngStream& rng, std::string_view name, Shape shape, double stddev);

}  // namespace stclip::nn
