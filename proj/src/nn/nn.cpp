#include "stclip/nn.hpp"

#include <cmath>
#include <string>

#include "stclip/errors.hpp"

namespace stclip::nn {

namespace {

std::string join(std::string_view prefix, std::string_view field) {
  std::string s(prefix);
  s += '.';
  s += field;
  return s;
}

void require_width(const Tensor& x, std::size_t d, const char* op) {
  if (x.rank() < 1 || x.cols() != d)
    throw DimensionError(std::string(op) + ": input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(d));
}

Tensor project(const Tensor& x, const Linear& p) { return linear(x, p); }

}  // namespace

Tensor linear(const Tensor& x, const Linear& p) {
  return add_rowvec(matmul(x, p.w), p.b);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, float eps) {
  return stclip::layer_norm(x, p.gamma, p.beta, eps);
}

std::span<const float> ImportanceMatrix::row(std::size_t i) const {
  const std::size_t c = values.cols();
  if (i >= values.rows()) throw DimensionError("importance row out of range");
  return values.data().subspan(i * c, c);
}

GroupedAttention self_attention(const Tensor& x, const MhsaParams& p, std::size_t groups,
                                bool causal) {
  const std::size_t d = p.width();
  if (p.num_heads == 0 || d % p.num_heads != 0)
    throw ConfigError("mhsa: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(p.num_heads) + " heads");
  require_width(x, d, "mhsa");
  if (x.rank() != 2 || x.dim(0) == 0) throw DimensionError("mhsa: expected [C x D] tokens");
  auto att = attention(project(x, p.q), project(x, p.k), project(x, p.v), p.num_heads, groups, causal);
  return {project(att.out, p.o), att.head_mean};
}

MhsaOutput mhsa_forward(const Tensor& x, const MhsaParams& p) {
  auto g = self_attention(x, p, 1, false);
  return {g.y, ImportanceMatrix{g.head_mean}};
}

Tensor cross_attention(const Tensor& q_in, const Tensor& kv_in, const MhsaParams& p,
                       std::size_t groups) {
  if (!kv_in.defined() || kv_in.numel() == 0)
    throw EmptyContextError("cross_attention: no key/value tokens");
  const std::size_t d = p.width();
  if (p.num_heads == 0 || d % p.num_heads != 0)
    throw ConfigError("cross_attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(p.num_heads) + " heads");
  require_width(q_in, d, "cross_attention(query)");
  require_width(kv_in, d, "cross_attention(context)");
  auto att = attention(project(q_in, p.q), project(kv_in, p.k), project(kv_in, p.v), p.num_heads,
                       groups);
  return project(att.out, p.o);
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  return linear(gelu(linear(x, p.fc1)), p.fc2);
}

namespace {

Tensor lora_linear(const Tensor& x, const Linear& base, const LoraFactors& f, float factor) {
  Tensor delta = matmul(matmul(x, f.a), f.b);
  if (factor != 1.0f) delta = scale(delta, factor);
  return add_rowvec(add(matmul(x, base.w), delta), base.b);
}

}  // namespace

Tensor lora_ffn_forward(const Tensor& x, const LoraFfnParams& p) {
  if (p.rank < 1) throw ConfigError("LoRA rank must be at least 1");
  if (p.fc1.a.dim(1) != p.rank || p.fc2.a.dim(1) != p.rank)
    throw ConfigError("LoRA factors do not have rank " + std::to_string(p.rank));
  const float factor = p.alpha / static_cast<float>(p.rank);
  const Tensor h = gelu(lora_linear(x, p.base.fc1, p.fc1, factor));
  return lora_linear(h, p.base.fc2, p.fc2, factor);
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw DimensionError("patchify: expected [H x W x 3] image, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw DimensionError("patchify: image " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch;
  // Express the rearrangement as a row gather over the [H·W × 3] pixel view.
  std::vector<std::size_t> index;
  index.reserve(h * w);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          index.push_back((py * patch + dy) * w + (px * patch + dx));
  const Tensor pixels = reshape(image, {h * w, 3});
  return reshape(gather_rows(pixels, index), {gh * gw, patch * patch * 3});
}

Tensor patch_embed(const Tensor& image, std::size_t patch, const Linear& proj) {
  const Tensor patches = patchify(image, patch);
  if (proj.w.rank() != 2 || proj.w.dim(0) != patches.cols())
    throw DimensionError("patch_embed: projection " + shape_str(proj.w.shape()) +
                         " does not accept patches of size " + std::to_string(patches.cols()));
  return linear(patches, proj);
}

Linear linear_from(const ParamStore& s, std::string_view prefix) {
  return {s.get(join(prefix, "w")), s.get(join(prefix, "b"))};
}

LayerNormParams layer_norm_from(const ParamStore& s, std::string_view prefix) {
  return {s.get(join(prefix, "g")), s.get(join(prefix, "b"))};
}

MhsaParams mhsa_from(const ParamStore& s, std::string_view prefix, std::size_t heads) {
  MhsaParams p;
  p.num_heads = heads;
  p.q = linear_from(s, join(prefix, "q"));
  p.k = linear_from(s, join(prefix, "k"));
  p.v = linear_from(s, join(prefix, "v"));
  p.o = linear_from(s, join(prefix, "o"));
  if (heads == 0 || p.width() % heads != 0)
    throw ConfigError("'" + std::string(prefix) + "': width " + std::to_string(p.width()) +
                      " not divisible by " + std::to_string(heads) + " heads");
  return p;
}

FfnParams ffn_from(const ParamStore& s, std::string_view prefix) {
  return {linear_from(s, join(prefix, "fc1")), linear_from(s, join(prefix, "fc2"))};
}

LoraFactors lora_from(const ParamStore& s, std::string_view prefix) {
  return {s.get(join(prefix, "a")), s.get(join(prefix, "b"))};
}

Tensor init_normal(const RngStream& rng, std::string_view name, Shape shape, double stddev) {
  RngStream r = rng.derive(name);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(r.normal() * stddev);
  return Tensor(std::move(shape), std::move(v));
}

void init_linear(ParamStore& s, std::string_view prefix, std::size_t in, std::size_t out,
                 const RngStream& rng, bool zero, bool frozen) {
  const auto wn = join(prefix, "w");
  s.add(wn, zero ? Tensor::zeros({in, out})
                 : init_normal(rng, wn, {in, out}, 1.0 / std::sqrt(static_cast<double>(in))),
        frozen);
  s.add(join(prefix, "b"), Tensor::zeros({out}), frozen);
}

void init_layer_norm(ParamStore& s, std::string_view prefix, std::size_t width, bool frozen) {
  s.add(join(prefix, "g"), Tensor::full({width}, 1.0f), frozen);
  s.add(join(prefix, "b"), Tensor::zeros({width}), frozen);
}

void init_mhsa(ParamStore& s, std::string_view prefix, std::size_t width, const RngStream& rng,
               bool zero_output, bool frozen) {
  init_linear(s, join(prefix, "q"), width, width, rng, false, frozen);
  init_linear(s, join(prefix, "k"), width, width, rng, false, frozen);
  init_linear(s, join(prefix, "v"), width, width, rng, false, frozen);
  init_linear(s, join(prefix, "o"), width, width, rng, zero_output, frozen);
}

void init_ffn(ParamStore& s, std::string_view prefix, std::size_t width, std::size_t hidden,
              const RngStream& rng, bool zero_output, bool frozen) {
  init_linear(s, join(prefix, "fc1"), width, hidden, rng, false, frozen);
  init_linear(s, join(prefix, "fc2"), hidden, width, rng, zero_output, frozen);
}

void init_lora(ParamStore& s, std::string_view prefix, std::size_t in, std::size_t out,
               std::size_t rank, const RngStream& rng) {
  if (rank < 1) throw ConfigError("LoRA rank must be at least 1");
  const auto an = join(prefix, "a");
  s.add(an, init_normal(rng, an, {in, rank}, 1.0 / std::sqrt(static_cast<double>(in))));
  s.add(join(prefix, "b"), Tensor::zeros({rank, out}));
}

}  // namespace stclip::nn
