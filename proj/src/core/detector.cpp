#include "stclip/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stclip/errors.hpp"
#include "stclip/log.hpp"

namespace stclip {

namespace {

std::string layer_name(std::string_view tower, std::size_t i) {
  return std::string(tower) + ".l" + std::to_string(i);
}

std::string prompt_prefix(std::size_t layer) { return "det.prompt.l" + std::to_string(layer); }

void put_meta(ParamStore& s, const std::string& name, float value) {
  const Tensor t = Tensor::scalar(value);
  if (s.contains(name))
    s.set(name, t);
  else
    s.add(name, t, true);
}

float get_meta(const ParamStore& s, std::string_view name) {
  const Tensor* t = s.find(name);
  if (t == nullptr) throw FormatError("missing detector entry '" + std::string(name) + "'", 0);
  return t->data()[0];
}

std::size_t get_count(const ParamStore& s, std::string_view name) {
  const float v = get_meta(s, name);
  if (!(v >= 0.0f) || v != std::floor(v))
    throw FormatError("detector entry '" + std::string(name) + "' is not a count", 0);
  return static_cast<std::size_t>(v);
}

bool prompts_at(const DetectorConfig& cfg, std::size_t layer, std::size_t layers) {
  return cfg.prompt_every_layer || layer + 1 == layers;
}

std::vector<Tensor> split_blocks(const Tensor& t, std::size_t blocks) {
  const std::size_t rows = t.dim(0) / blocks;
  std::vector<Tensor> out;
  out.reserve(blocks);
  for (std::size_t b = 0; b < blocks; ++b) out.push_back(slice_rows(t, b * rows, (b + 1) * rows));
  return out;
}

// Runs the frozen image layers over [persons; context] and returns the
// projected person rows.
Tensor frozen_person_features(const Tensor& persons, const Tensor& context, const ParamStore& store,
                              const ImageEncoderConfig& ic) {
  const Tensor parts[] = {persons, context};
  Tensor x = concat_rows(parts);
  for (std::size_t l = 0; l < ic.layers; ++l)
    x = encoder_layer_forward(x, encoder_layer_from(store, layer_name("img", l), ic.heads)).y;
  return project_visual(slice_rows(x, 0, persons.dim(0)), store);
}

}  // namespace

void DetectorConfig::validate() const {
  if (t_frames < 1) throw ConfigError("clips need at least one frame");
  if (k_interest < 1) throw ConfigError("the number of interest tokens must be at least 1");
  if (temporal_heads == 0 || prompt_heads == 0) throw ConfigError("head counts must be positive");
  if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
}

void write_detector_meta(ParamStore& s, const DetectorConfig& cfg) {
  put_meta(s, "meta.det.t_frames", static_cast<float>(cfg.t_frames));
  put_meta(s, "meta.det.k_interest", static_cast<float>(cfg.k_interest));
  put_meta(s, "meta.det.lora_rank", static_cast<float>(cfg.lora_rank));
  put_meta(s, "meta.det.adapter", cfg.adapter ? 1.0f : 0.0f);
  put_meta(s, "meta.det.temporal_mhsa", cfg.temporal_mhsa ? 1.0f : 0.0f);
  put_meta(s, "meta.det.prompt_every_layer", cfg.prompt_every_layer ? 1.0f : 0.0f);
  put_meta(s, "meta.det.interest_tokens", cfg.interest_tokens ? 1.0f : 0.0f);
  put_meta(s, "meta.det.temporal_heads", static_cast<float>(cfg.temporal_heads));
  put_meta(s, "meta.det.prompt_heads", static_cast<float>(cfg.prompt_heads));
  put_meta(s, "meta.det.temperature", cfg.temperature);
}

DetectorConfig read_detector_config(const ParamStore& s) {
  DetectorConfig c;
  c.t_frames = get_count(s, "meta.det.t_frames");
  c.k_interest = get_count(s, "meta.det.k_interest");
  c.lora_rank = get_count(s, "meta.det.lora_rank");
  c.adapter = get_meta(s, "meta.det.adapter") != 0.0f;
  c.temporal_mhsa = get_meta(s, "meta.det.temporal_mhsa") != 0.0f;
  c.prompt_every_layer = get_meta(s, "meta.det.prompt_every_layer") != 0.0f;
  c.interest_tokens = get_meta(s, "meta.det.interest_tokens") != 0.0f;
  c.temporal_heads = get_count(s, "meta.det.temporal_heads");
  c.prompt_heads = get_count(s, "meta.det.prompt_heads");
  c.temperature = get_meta(s, "meta.det.temperature");
  c.validate();
  return c;
}

void init_detector(ParamStore& s, const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const EncoderConfigs enc = read_configs(s);
  const std::size_t d = enc.image.width, dt = enc.text.joint_dim;
  if (d % cfg.temporal_heads != 0)
    throw ConfigError("image width " + std::to_string(d) + " not divisible by " +
                      std::to_string(cfg.temporal_heads) + " temporal heads");
  if (dt % cfg.prompt_heads != 0)
    throw ConfigError("label width " + std::to_string(dt) + " not divisible by " +
                      std::to_string(cfg.prompt_heads) + " prompting heads");
  const RngStream rng(seed, hash_name("detector-init"));

  // Zero-initialized pieces (temporal output, adapter output, person slot,
  // LoRA B, ρ) make the untrained model reproduce the frozen encoders.
  if (cfg.temporal_mhsa) {
    s.add("det.temporal.e_temp", Tensor::zeros({cfg.t_frames, d}));
    nn::init_layer_norm(s, "det.temporal.ln", d);
    nn::init_mhsa(s, "det.temporal.attn", d, rng, true);
  }
  if (cfg.adapter) {
    nn::init_layer_norm(s, "det.adapter.ln", d);
    nn::init_ffn(s, "det.adapter.ffn", d, 4 * d, rng, true);
  }
  s.add("det.person_slot", Tensor::zeros({d}));
  if (cfg.lora_rank > 0)
    for (std::size_t l = 0; l < enc.image.layers; ++l) {
      const auto p = layer_name("det.lora", l);
      nn::init_lora(s, p + ".fc1", d, 4 * d, cfg.lora_rank, rng);
      nn::init_lora(s, p + ".fc2", 4 * d, d, cfg.lora_rank, rng);
    }
  for (std::size_t l = 0; l < enc.image.layers; ++l) {
    if (!prompts_at(cfg, l, enc.image.layers)) continue;
    const auto p = prompt_prefix(l);
    nn::init_linear(s, p + ".proj", d, dt, rng);
    nn::init_mhsa(s, p + ".ca", dt, rng);
    nn::init_ffn(s, p + ".ffn", dt, 4 * dt, rng);
    s.add(p + ".rho", Tensor::zeros({dt}));
  }
  write_detector_meta(s, cfg);
}

TemporalParams temporal_params_from(const ParamStore& s, std::size_t heads) {
  return {s.get("det.temporal.e_temp"), nn::layer_norm_from(s, "det.temporal.ln"),
          nn::mhsa_from(s, "det.temporal.attn", heads)};
}

AdapterParams adapter_params_from(const ParamStore& s) {
  return {nn::layer_norm_from(s, "det.adapter.ln"), nn::ffn_from(s, "det.adapter.ffn")};
}

PromptParams prompt_params_from(const ParamStore& s, std::size_t layer, std::size_t heads) {
  const auto p = prompt_prefix(layer);
  return {nn::linear_from(s, p + ".proj"), nn::mhsa_from(s, p + ".ca", heads),
          nn::ffn_from(s, p + ".ffn"), s.get(p + ".rho")};
}

// ---------------------------------------------------------------------------

namespace {

struct FrameShape {
  std::size_t t, n, d;
};

FrameShape frame_shape(const Tensor& frames) {
  if (!frames.defined()) throw InputError("a clip needs at least one frame");
  if (frames.rank() != 3)
    throw DimensionError("frame tokens must be [T × N × D], got " + shape_str(frames.shape()));
  if (frames.dim(0) < 1) throw InputError("a clip needs at least one frame");
  if (frames.dim(1) < 1) throw InputError("frames carry no tokens");
  return {frames.dim(0), frames.dim(1), frames.dim(2)};
}

// Frame-major [T·N × D] rows reordered so each patch position's T frames
// are consecutive.
Tensor position_major(const Tensor& frames, const FrameShape& fs) {
  std::vector<std::size_t> idx(fs.t * fs.n);
  for (std::size_t i = 0; i < fs.n; ++i)
    for (std::size_t t = 0; t < fs.t; ++t) idx[i * fs.t + t] = t * fs.n + i;
  return gather_rows(reshape(frames, {fs.t * fs.n, fs.d}), idx);
}

}  // namespace

ContextTokens temporal_model(const Tensor& frames, const TemporalParams& p) {
  const FrameShape fs = frame_shape(frames);
  if (p.e_temp.rank() != 2 || p.e_temp.dim(0) != fs.t || p.e_temp.dim(1) != fs.d)
    throw DimensionError("temporal encoding " + shape_str(p.e_temp.shape()) + " does not fit " +
                         std::to_string(fs.t) + " frames of width " + std::to_string(fs.d));
  std::vector<std::size_t> tile(fs.t * fs.n);
  for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % fs.t;
  const Tensor z = add(position_major(frames, fs), gather_rows(p.e_temp, tile));
  const auto att = nn::self_attention(nn::layer_norm(z, p.ln), p.attn, fs.n);
  return {group_mean(add(z, att.y), fs.t), fs.t};
}

ContextTokens average_pool_frames(const Tensor& frames) {
  const FrameShape fs = frame_shape(frames);
  return {group_mean(position_major(frames, fs), fs.t), fs.t};
}

PersonTokens person_adapter(const Tensor& persons, const AdapterParams& p, std::vector<int> ids) {
  if (!persons.defined() || persons.rank() != 2) throw DimensionError("person features must be [B × D]");
  return {add(persons, nn::ffn_forward(nn::layer_norm(persons, p.ln), p.ffn)), std::move(ids)};
}

std::vector<std::size_t> spot_interest_tokens(std::span<const float> row, std::size_t begin,
                                              std::size_t end, std::size_t k) {
  if (begin >= end) throw InputError("interest token spotting needs a nonempty context range");
  if (end > row.size())
    throw DimensionError("context range ends at " + std::to_string(end) + " but the row has " +
                         std::to_string(row.size()) + " columns");
  if (k < 1) throw ConfigError("the number of interest tokens must be at least 1");
  std::vector<std::size_t> cols(end - begin);
  std::iota(cols.begin(), cols.end(), begin);
  const std::size_t take = std::min(k, cols.size());
  std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(take), cols.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  cols.resize(take);
  std::sort(cols.begin(), cols.end());
  for (auto& c : cols) c -= begin;
  return cols;
}

std::vector<std::size_t> spot_interest_tokens(const nn::ImportanceMatrix& m, std::size_t person_row,
                                              std::size_t begin, std::size_t end, std::size_t k) {
  if (person_row >= begin && person_row < end)
    throw InputError("the person row lies inside the context range");
  return spot_interest_tokens(m.row(person_row), begin, end, k);
}

Tensor context_prompt_layer(const Tensor& f_t, const Tensor& f_i, std::size_t batch,
                            const PromptParams& p) {
  if (!f_i.defined() || f_i.numel() == 0) throw EmptyContextError("context prompting got no visual tokens");
  if (batch == 0 || f_t.rank() != 2 || f_i.rank() != 2 || f_t.dim(0) % batch != 0 ||
      f_i.dim(0) % batch != 0)
    throw DimensionError("prompting inputs " + shape_str(f_t.shape()) + " and " +
                         shape_str(f_i.shape()) + " do not split into " + std::to_string(batch) +
                         " persons");
  const Tensor f_bar = add(f_t, nn::cross_attention(f_t, f_i, p.ca, batch));
  const Tensor f_hat = add(f_bar, nn::ffn_forward(f_bar, p.ffn));
  return add(f_t, mul_rowvec(f_hat, p.rho));
}

InteractionOutput interaction_forward(const PersonTokens& persons, const ContextTokens& ctx,
                                      const Tensor& labels, const ParamStore& store,
                                      const DetectorConfig& cfg) {
  if (cfg.k_interest < 1) throw ConfigError("the number of interest tokens must be at least 1");
  const EncoderConfigs enc = read_configs(store);
  const auto& ic = enc.image;
  if (!persons.tokens.defined() || persons.tokens.rank() != 2)
    throw InputError("interaction needs at least one person");
  const std::size_t b = persons.tokens.dim(0);
  if (!ctx.tokens.defined()) throw EmptyContextError("interaction needs context tokens");
  const std::size_t n = ctx.tokens.dim(0);
  if (persons.tokens.dim(1) != ic.width || ctx.tokens.dim(1) != ic.width)
    throw DimensionError("person and context tokens must have the image width " +
                         std::to_string(ic.width));
  if (!labels.defined() || labels.rank() != 2 || labels.dim(1) != enc.text.joint_dim)
    throw DimensionError("label features " + shape_str(labels.shape()) + " do not have width " +
                         std::to_string(enc.text.joint_dim));

  const bool shared = !cfg.interest_tokens;
  std::size_t k = cfg.k_interest;
  if (!shared && k > n) {
    log_note_once("interest tokens: K=" + std::to_string(k) + " exceeds the " + std::to_string(n) +
                  " context tokens, using all of them");
    k = n;
  }

  const Tensor slotted = add_rowvec(persons.tokens, store.get("det.person_slot"));
  const Tensor parts[] = {slotted, ctx.tokens};
  Tensor x = concat_rows(parts);

  Tensor f_t;
  if (shared) {
    f_t = labels;
  } else {
    std::vector<Tensor> copies(b, labels);
    f_t = concat_rows(copies);
  }
  const std::size_t blocks = shared ? 1 : b;

  InteractionOutput out;
  out.shared = shared;
  for (std::size_t l = 0; l < ic.layers; ++l) {
    const EncoderLayer layer = encoder_layer_from(store, layer_name("img", l), ic.heads);
    LoraPair lora;
    if (cfg.lora_rank > 0) {
      const auto p = layer_name("det.lora", l);
      lora = {nn::lora_from(store, p + ".fc1"), nn::lora_from(store, p + ".fc2"), cfg.lora_rank,
              static_cast<float>(cfg.lora_rank)};
    }
    const LayerResult r = encoder_layer_forward(x, layer, cfg.lora_rank > 0 ? &lora : nullptr);
    x = r.y;

    LayerTrace trace;
    trace.importance = r.importance;
    if (prompts_at(cfg, l, ic.layers)) {
      const PromptParams pp = prompt_params_from(store, l, cfg.prompt_heads);
      Tensor visual;
      if (shared) {
        visual = slice_rows(x, b, b + n);
      } else {
        const nn::ImportanceMatrix m{r.importance};
        std::vector<std::size_t> rows;
        rows.reserve(b * k);
        for (std::size_t p = 0; p < b; ++p) {
          auto idx = spot_interest_tokens(m, p, b, b + n, k);
          for (std::size_t i : idx) rows.push_back(b + i);
          trace.interest.push_back(std::move(idx));
        }
        visual = gather_rows(x, rows);
      }
      f_t = context_prompt_layer(f_t, nn::linear(visual, pp.proj), blocks, pp);
      trace.labels = split_blocks(f_t, blocks);
      trace.prompted = true;
    }
    out.layers.push_back(std::move(trace));
  }
  out.person_out = project_visual(slice_rows(x, 0, b), store);
  out.label_out = split_blocks(f_t, blocks);
  return out;
}

ClassScores classify(const Tensor& person_out, std::span<const Tensor> label_out, float temperature,
                     LabelMode mode) {
  if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
  if (!person_out.defined() || person_out.rank() != 2) throw InputError("no persons to classify");
  const std::size_t b = person_out.dim(0);
  if (label_out.empty() || (label_out.size() != 1 && label_out.size() != b))
    throw DimensionError("expected one shared label block or one per person, got " +
                         std::to_string(label_out.size()) + " for " + std::to_string(b) + " persons");
  const Tensor p = l2_normalize_rows(person_out);
  Tensor sim;
  if (label_out.size() == 1) {
    sim = matmul(p, transpose(l2_normalize_rows(label_out[0])));
  } else {
    std::vector<Tensor> rows;
    rows.reserve(b);
    for (std::size_t i = 0; i < b; ++i)
      rows.push_back(matmul(slice_rows(p, i, i + 1), transpose(l2_normalize_rows(label_out[i]))));
    sim = concat_rows(rows);
  }
  ClassScores out;
  out.logits = scale(sim, 1.0f / temperature);
  out.scores = mode == LabelMode::Single ? softmax_rows(out.logits) : sigmoid(out.logits);
  return out;
}

// ---------------------------------------------------------------------------

ClipFeatures extract_features(const ClipSample& clip, const ParamStore& store,
                              const ImageEncoderConfig& cfg) {
  if (clip.boxes.empty()) throw InputError("clip '" + clip.video_id + "' has no person boxes");
  if (clip.frames.empty()) throw InputError("clip '" + clip.video_id + "' has no frames");
  auto fit = [&](const Image& im) {
    if (im.width == cfg.image_size && im.height == cfg.image_size) return image_to_tensor(im);
    return crop_person(im, Box{0, 0, static_cast<float>(im.width), static_cast<float>(im.height)},
                       cfg.image_size);
  };
  std::vector<Tensor> crops;
  crops.reserve(clip.boxes.size());
  const Image& key = clip.keyframe.width > 0 ? clip.keyframe : clip.frames[clip.frames.size() / 2];
  for (const auto& box : clip.boxes) crops.push_back(crop_person(key, box, cfg.image_size));

  std::vector<Tensor> tokens;
  tokens.reserve(clip.frames.size());
  for (const auto& f : clip.frames) tokens.push_back(patch_tokens(fit(f), store, cfg));
  ClipFeatures out;
  out.persons = encode_images(crops, store, cfg).cls_feature.detach();
  out.frames = reshape(concat_rows(tokens), {clip.frames.size(), cfg.num_patches(), cfg.width}).detach();
  return out;
}

InteractionOutput detector_forward(const ClipFeatures& f, const Tensor& labels,
                                   const ParamStore& store, const DetectorConfig& cfg) {
  const ContextTokens ctx = cfg.temporal_mhsa
                                ? temporal_model(f.frames, temporal_params_from(store, cfg.temporal_heads))
                                : average_pool_frames(f.frames);
  const PersonTokens persons =
      cfg.adapter ? person_adapter(f.persons, adapter_params_from(store)) : PersonTokens{f.persons, {}};
  return interaction_forward(persons, ctx, labels, store, cfg);
}

ClassScores frozen_baseline(const ClipFeatures& f, const Tensor& labels, const ParamStore& store,
                            const DetectorConfig& cfg, LabelMode mode) {
  const EncoderConfigs enc = read_configs(store);
  const Tensor context = average_pool_frames(f.frames).tokens;
  const Tensor person_out = frozen_person_features(f.persons, context, store, enc.image);
  return classify(person_out, std::span<const Tensor>(&labels, 1), cfg.temperature, mode);
}

}  // namespace stclip
