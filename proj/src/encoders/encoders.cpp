#include "stclip/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "stclip/errors.hpp"
#include "stclip/optim.hpp"

namespace stclip {

namespace {

std::string layer_prefix(std::string_view tower, std::size_t i) {
  return std::string(tower) + ".l" + std::to_string(i);
}

void init_tower_layers(ParamStore& s, std::string_view tower, std::size_t layers,
                       std::size_t width, const RngStream& rng) {
  for (std::size_t i = 0; i < layers; ++i) {
    const auto p = layer_prefix(tower, i);
    nn::init_layer_norm(s, p + ".ln1", width);
    nn::init_mhsa(s, p + ".attn", width, rng);
    nn::init_layer_norm(s, p + ".ln2", width);
    nn::init_ffn(s, p + ".ffn", width, 4 * width, rng);
  }
}

std::size_t meta_size(const ParamStore& s, std::string_view name) {
  const Tensor* t = s.find(name);
  if (t == nullptr) throw FormatError("missing architecture entry '" + std::string(name) + "'", 0);
  const float v = t->data()[0];
  if (!(v >= 0.0f) || v != std::floor(v))
    throw FormatError("architecture entry '" + std::string(name) + "' is not a count", 0);
  return static_cast<std::size_t>(v);
}

void add_meta(ParamStore& s, const std::string& name, std::size_t value) {
  const Tensor t = Tensor::scalar(static_cast<float>(value));
  if (s.contains(name))
    s.set(name, t);
  else
    s.add(name, t, true);
}

void check_image(const Tensor& image, const ImageEncoderConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
      image.dim(2) != 3)
    throw DimensionError("image " + shape_str(image.shape()) + " does not match encoder size " +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) +
                         "x3");
}

}  // namespace

void ImageEncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch size " +
                      std::to_string(patch_size));
  if (heads == 0 || width % heads != 0)
    throw ConfigError("image width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (joint_dim == 0) throw ConfigError("joint dimension must be positive");
}

void TextEncoderConfig::validate() const {
  if (context_length < 2) throw ConfigError("text context must hold at least BOS and EOS");
  if (heads == 0 || width % heads != 0)
    throw ConfigError("text width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (joint_dim == 0) throw ConfigError("joint dimension must be positive");
}

void write_meta(ParamStore& s, const EncoderConfigs& cfg, const Vocabulary& vocab) {
  add_meta(s, "meta.image.image_size", cfg.image.image_size);
  add_meta(s, "meta.image.patch_size", cfg.image.patch_size);
  add_meta(s, "meta.image.width", cfg.image.width);
  add_meta(s, "meta.image.layers", cfg.image.layers);
  add_meta(s, "meta.image.heads", cfg.image.heads);
  add_meta(s, "meta.image.joint_dim", cfg.image.joint_dim);
  add_meta(s, "meta.text.context_length", cfg.text.context_length);
  add_meta(s, "meta.text.width", cfg.text.width);
  add_meta(s, "meta.text.layers", cfg.text.layers);
  add_meta(s, "meta.text.heads", cfg.text.heads);
  add_meta(s, "meta.text.joint_dim", cfg.text.joint_dim);
  // The vocabulary travels as its UTF-8 bytes, which floats hold exactly.
  const std::string bytes = vocab.serialize();
  std::vector<float> v(bytes.size());
  std::transform(bytes.begin(), bytes.end(), v.begin(),
                 [](char c) { return static_cast<float>(static_cast<unsigned char>(c)); });
  if (s.contains("meta.vocab")) s.erase("meta.vocab");
  const std::size_t n = v.size();
  if (n > 0) s.add("meta.vocab", Tensor({n}, std::move(v)), true);
}

EncoderConfigs read_configs(const ParamStore& s) {
  EncoderConfigs c;
  c.image.image_size = meta_size(s, "meta.image.image_size");
  c.image.patch_size = meta_size(s, "meta.image.patch_size");
  c.image.width = meta_size(s, "meta.image.width");
  c.image.layers = meta_size(s, "meta.image.layers");
  c.image.heads = meta_size(s, "meta.image.heads");
  c.image.joint_dim = meta_size(s, "meta.image.joint_dim");
  c.text.context_length = meta_size(s, "meta.text.context_length");
  c.text.width = meta_size(s, "meta.text.width");
  c.text.layers = meta_size(s, "meta.text.layers");
  c.text.heads = meta_size(s, "meta.text.heads");
  c.text.joint_dim = meta_size(s, "meta.text.joint_dim");
  return c;
}

Vocabulary read_vocabulary(const ParamStore& s) {
  const Tensor* t = s.find("meta.vocab");
  if (t == nullptr) return Vocabulary{};
  std::string bytes;
  for (float f : t->data()) {
    if (!(f >= 0.0f && f <= 255.0f) || f != std::floor(f))
      throw FormatError("vocabulary entry holds a non-byte value", 0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  }
  return Vocabulary::deserialize(bytes);
}

void init_clip(ParamStore& s, const EncoderConfigs& cfg, const Vocabulary& vocab,
               std::uint64_t seed) {
  cfg.image.validate();
  cfg.text.validate();
  const RngStream rng(seed, hash_name("clip-init"));
  const auto& ic = cfg.image;
  const double id = 1.0 / std::sqrt(static_cast<double>(ic.width));
  nn::init_linear(s, "img.patch", ic.patch_size * ic.patch_size * 3, ic.width, rng);
  s.add("img.cls", nn::init_normal(rng, "img.cls", {ic.width}, id));
  s.add("img.pos", nn::init_normal(rng, "img.pos", {ic.num_patches() + 1, ic.width}, id));
  init_tower_layers(s, "img", ic.layers, ic.width, rng);
  nn::init_layer_norm(s, "img.ln_post", ic.width);
  s.add("img.proj", nn::init_normal(rng, "img.proj", {ic.width, ic.joint_dim}, id));

  const auto& tc = cfg.text;
  const double td = 1.0 / std::sqrt(static_cast<double>(tc.width));
  s.add("txt.tok", nn::init_normal(rng, "txt.tok", {vocab.size(), tc.width}, 0.02));
  s.add("txt.pos", nn::init_normal(rng, "txt.pos", {tc.context_length, tc.width}, 0.01));
  init_tower_layers(s, "txt", tc.layers, tc.width, rng);
  nn::init_layer_norm(s, "txt.ln_final", tc.width);
  s.add("txt.proj", nn::init_normal(rng, "txt.proj", {tc.width, tc.joint_dim}, td));

  s.add("clip.logit_scale", Tensor::scalar(std::log(1.0f / 0.07f)));
  write_meta(s, cfg, vocab);
}

bool is_encoder_param(std::string_view name) {
  return name.starts_with("img.") || name.starts_with("txt.") || name.starts_with("clip.");
}

EncoderLayer encoder_layer_from(const ParamStore& s, std::string_view prefix, std::size_t heads) {
  const std::string p(prefix);
  return {nn::layer_norm_from(s, p + ".ln1"), nn::mhsa_from(s, p + ".attn", heads),
          nn::layer_norm_from(s, p + ".ln2"), nn::ffn_from(s, p + ".ffn")};
}

LayerResult encoder_layer_forward(const Tensor& x, const EncoderLayer& p, const LoraPair* lora,
                                  std::size_t groups, bool causal) {
  auto att = nn::self_attention(nn::layer_norm(x, p.ln1), p.attn, groups, causal);
  const Tensor h = add(x, att.y);
  const Tensor b = nn::layer_norm(h, p.ln2);
  Tensor f;
  if (lora != nullptr)
    f = nn::lora_ffn_forward(b, {p.ffn, lora->fc1, lora->fc2, lora->rank, lora->alpha});
  else
    f = nn::ffn_forward(b, p.ffn);
  return {add(h, f), att.head_mean, h};
}

Tensor patch_tokens(const Tensor& image, const ParamStore& s, const ImageEncoderConfig& cfg) {
  check_image(image, cfg);
  const Tensor patches = nn::patch_embed(image, cfg.patch_size, nn::linear_from(s, "img.patch"));
  return add(patches, slice_rows(s.get("img.pos"), 1, cfg.num_patches() + 1));
}

Tensor image_tokens(const Tensor& image, const ParamStore& s, const ImageEncoderConfig& cfg) {
  check_image(image, cfg);
  const Tensor patches = nn::patch_embed(image, cfg.patch_size, nn::linear_from(s, "img.patch"));
  const Tensor parts[] = {reshape(s.get("img.cls"), {1, cfg.width}), patches};
  return add(concat_rows(parts), s.get("img.pos"));
}

Tensor project_visual(const Tensor& cls_rows, const ParamStore& s) {
  return l2_normalize_rows(
      matmul(nn::layer_norm(cls_rows, nn::layer_norm_from(s, "img.ln_post")), s.get("img.proj")));
}

ImageFeatures encode_images(std::span<const Tensor> images, const ParamStore& s,
                            const ImageEncoderConfig& cfg) {
  if (images.empty()) throw InputError("encode_images: no images");
  std::vector<Tensor> seqs;
  seqs.reserve(images.size());
  for (const auto& im : images) seqs.push_back(image_tokens(im, s, cfg));
  Tensor x = seqs.size() == 1 ? seqs[0] : concat_rows(seqs);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    x = encoder_layer_forward(x, encoder_layer_from(s, layer_prefix("img", i), cfg.heads), nullptr,
                              images.size())
            .y;
  const std::size_t stride = cfg.num_patches() + 1;
  std::vector<std::size_t> cls_rows(images.size());
  for (std::size_t b = 0; b < images.size(); ++b) cls_rows[b] = b * stride;
  const Tensor cls = gather_rows(x, cls_rows);
  return {cls, project_visual(cls, s)};
}

ImageFeatures encode_image(const Tensor& image, const ParamStore& s, const ImageEncoderConfig& cfg) {
  return encode_images(std::span<const Tensor>(&image, 1), s, cfg);
}

Tensor encode_text(std::span<const std::string> names, const ParamStore& s, const Vocabulary& vocab,
                   const TextEncoderConfig& cfg) {
  if (names.empty()) throw InputError("encode_text: no class names");
  // Names of equal token length share one grouped pass; causal attention
  // makes this identical to encoding each name on its own.
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  std::vector<std::vector<std::size_t>> ids(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    ids[i] = vocab.encode(names[i]);
    if (ids[i].size() > cfg.context_length)
      throw InputError("class '" + names[i] + "' needs " + std::to_string(ids[i].size()) +
                       " tokens, context length is " + std::to_string(cfg.context_length));
    by_length[ids[i].size()].push_back(i);
  }
  std::vector<EncoderLayer> layers;
  for (std::size_t l = 0; l < cfg.layers; ++l)
    layers.push_back(encoder_layer_from(s, layer_prefix("txt", l), cfg.heads));
  const Tensor& tok = s.get("txt.tok");
  const Tensor& pos = s.get("txt.pos");

  std::vector<Tensor> eos_blocks;
  std::vector<std::size_t> order;  // original index of each collected row
  for (const auto& [len, members] : by_length) {
    std::vector<std::size_t> flat;
    for (std::size_t m : members) flat.insert(flat.end(), ids[m].begin(), ids[m].end());
    const Tensor positions = slice_rows(pos, 0, len);
    std::vector<Tensor> pos_rep(members.size(), positions);
    Tensor x = add(gather_rows(tok, flat), members.size() == 1 ? positions : concat_rows(pos_rep));
    for (const auto& layer : layers)
      x = encoder_layer_forward(x, layer, nullptr, members.size(), true).y;
    std::vector<std::size_t> eos(members.size());
    for (std::size_t j = 0; j < members.size(); ++j) eos[j] = j * len + len - 1;
    eos_blocks.push_back(gather_rows(x, eos));
    order.insert(order.end(), members.begin(), members.end());
  }
  Tensor rows = eos_blocks.size() == 1 ? eos_blocks[0] : concat_rows(eos_blocks);
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t r = 0; r < order.size(); ++r) inverse[order[r]] = r;
  rows = gather_rows(rows, inverse);
  return l2_normalize_rows(
      matmul(nn::layer_norm(rows, nn::layer_norm_from(s, "txt.ln_final")), s.get("txt.proj")));
}

Tensor symmetric_cross_entropy(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(0) != logits.dim(1) || logits.dim(0) == 0)
    throw DimensionError("contrastive logits must be square, got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0);
  std::vector<std::pair<std::size_t, std::size_t>> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = {i, i};
  const Tensor rows = sum(select_elements(log_softmax_rows(logits), diag));
  const Tensor cols = sum(select_elements(log_softmax_rows(transpose(logits)), diag));
  return scale(add(rows, cols), -0.5f / static_cast<float>(b));
}

namespace {

struct GroupIndex {
  std::vector<std::string> names;
  std::vector<std::vector<std::size_t>> members;
};

GroupIndex index_groups(std::span<const CaptionedImage> corpus) {
  std::map<std::string, std::vector<std::size_t>> m;
  for (std::size_t i = 0; i < corpus.size(); ++i) m[corpus[i].group].push_back(i);
  GroupIndex g;
  for (auto& [name, idx] : m) {
    g.names.push_back(name);
    g.members.push_back(std::move(idx));
  }
  return g;
}

Tensor pair_logits(std::span<const CaptionedImage> batch, const ParamStore& s,
                   const Vocabulary& vocab, const EncoderConfigs& cfg, bool scaled) {
  std::vector<Tensor> images;
  std::vector<std::string> captions;
  for (const auto& item : batch) {
    images.push_back(item.image);
    captions.push_back(item.caption);
  }
  const Tensor img = encode_images(images, s, cfg.image).projected_feature;
  const Tensor txt = encode_text(captions, s, vocab, cfg.text);
  const Tensor sim = matmul(img, transpose(txt));
  return scaled ? mul_scalar(sim, exp(s.get("clip.logit_scale"))) : sim;
}

}  // namespace

ParamStore contrastive_pretrain(std::span<const CaptionedImage> corpus, const EncoderConfigs& cfg,
                                const Vocabulary& vocab, const PretrainConfig& hyper,
                                std::vector<PretrainLogEntry>* log) {
  if (hyper.batch_size < 2)
    throw ConfigError("contrastive pretraining needs a batch of at least 2, got " +
                      std::to_string(hyper.batch_size));
  const GroupIndex groups = index_groups(corpus);
  if (groups.names.size() < hyper.batch_size)
    throw ConfigError("corpus has " + std::to_string(groups.names.size()) +
                      " caption groups, fewer than the batch size " +
                      std::to_string(hyper.batch_size));

  ParamStore store;
  init_clip(store, cfg, vocab, hyper.seed);
  store.set("clip.logit_scale", Tensor::scalar(std::log(1.0f / hyper.init_temperature)));
  Adam opt;
  const RngStream batch_rng(hyper.seed, hash_name("pretrain-batches"));
  const float max_scale = std::log(hyper.max_logit_scale);

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    RngStream r = batch_rng.derive(step);
    std::vector<std::size_t> pick(groups.names.size());
    std::iota(pick.begin(), pick.end(), 0);
    r.shuffle(pick);
    pick.resize(hyper.batch_size);
    std::sort(pick.begin(), pick.end());
    std::vector<CaptionedImage> batch;
    for (std::size_t g : pick) {
      const auto& m = groups.members[g];
      batch.push_back(corpus[m[r.below(m.size())]]);
    }

    const ParamStore graded = store.with_grad();
    const Tensor loss = symmetric_cross_entropy(pair_logits(batch, graded, vocab, cfg, true));
    if (!loss.all_finite()) throw NumericError("pretraining loss is not finite at step " +
                                               std::to_string(step));
    loss.backward();

    // Linear warmup, then cosine decay to a tenth of the peak rate.
    const double s = static_cast<double>(step);
    double lr = hyper.lr;
    if (s < hyper.warmup_steps) {
      lr *= (s + 1.0) / hyper.warmup_steps;
    } else {
      const double span = std::max(1.0, static_cast<double>(hyper.steps) - hyper.warmup_steps);
      const double progress = (s - hyper.warmup_steps) / span;
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
    opt.step(store, GradSet::collect(graded), lr);
    const float ls = store.get("clip.logit_scale").item();
    if (ls > max_scale) store.set("clip.logit_scale", Tensor::scalar(max_scale));
    if (log != nullptr) log->push_back({step, loss.item(), std::exp(store.get("clip.logit_scale").item())});
  }
  return store;
}

AlignmentStats alignment_stats(std::span<const CaptionedImage> batch, const ParamStore& s,
                               const Vocabulary& vocab, const EncoderConfigs& cfg) {
  if (batch.size() < 2) throw ConfigError("alignment statistics need at least 2 pairs");
  const Tensor sim = pair_logits(batch, s, vocab, cfg, false);
  const std::size_t b = batch.size();
  AlignmentStats st;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      if (i == j)
        st.mean_diagonal += sim.at(i, j);
      else
        st.mean_off_diagonal += sim.at(i, j);
    }
  st.mean_diagonal /= static_cast<double>(b);
  st.mean_off_diagonal /= static_cast<double>(b * (b - 1));
  return st;
}

}  // namespace stclip
