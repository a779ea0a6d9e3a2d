#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "stclip/checkpoint.hpp"
#include "stclip/errors.hpp"
#include "stclip/optim.hpp"
#include "stclip/parallel.hpp"
#include "stclip/train.hpp"

namespace stclip {

LabelMode read_label_mode(const ParamStore& store) {
  const Tensor* t = store.find(kLabelModeEntry);
  return t != nullptr && t->item() != 0.0f ? LabelMode::Multi : LabelMode::Single;
}

bool FreezeMask::frozen(std::string_view name) {
  if (name.starts_with("det.")) return false;
  if (name.starts_with("img.") || name.starts_with("txt.") || name.starts_with("clip.") ||
      name.starts_with("meta."))
    return true;
  throw InputError("parameter '" + std::string(name) + "' belongs to no known module");
}

void FreezeMask::apply(ParamStore& store) { store.freeze_where(&FreezeMask::frozen); }

Tensor detection_loss(const Tensor& logits, std::span<const std::vector<std::size_t>> targets,
                      LabelMode mode) {
  if (!logits.defined() || logits.rank() != 2) throw DimensionError("logits must be [persons × labels]");
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  if (targets.size() != b)
    throw DimensionError(std::to_string(targets.size()) + " target lists for " + std::to_string(b) +
                         " persons");
  for (const auto& t : targets)
    for (std::size_t c : t)
      if (c >= n)
        throw InputError("target class " + std::to_string(c) + " outside a label set of " +
                         std::to_string(n));
  if (mode == LabelMode::Single) {
    std::vector<std::pair<std::size_t, std::size_t>> at;
    at.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
      if (targets[i].size() != 1)
        throw InputError("single-label mode needs exactly one target per person, person " +
                         std::to_string(i) + " has " + std::to_string(targets[i].size()));
      at.emplace_back(i, targets[i][0]);
    }
    return scale(mean(select_elements(log_softmax_rows(logits), at)), -1.0f);
  }
  std::vector<float> y(b * n, 0.0f);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c : targets[i]) y[i * n + c] = 1.0f;
  return mean(bce_with_logits(logits, Tensor({b, n}, std::move(y))));
}

double lr_at(std::size_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.warmup_iters) return cfg.base_lr;
  const double progress = static_cast<double>(iter) / static_cast<double>(cfg.warmup_iters);
  return cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * progress);
}

std::vector<TrainSample> build_train_samples(const ParamStore& store,
                                             std::span<const VideoManifest> videos,
                                             const LabelSplit& split, const TrainConfig& cfg,
                                             const TrainOptions& opts) {
  if (split.seen.empty()) throw ConfigError("split '" + split.split_id + "' has no seen classes");
  std::map<std::string, std::size_t, std::less<>> seen;
  for (std::size_t i = 0; i < split.seen.size(); ++i) seen.emplace(split.seen[i], i);

  struct Candidate {
    std::size_t video, pos;
  };
  std::vector<Candidate> candidates;
  for (std::size_t v = 0; v < videos.size(); ++v)
    for (std::size_t p = 0; p < videos[v].frames.size(); ++p) {
      const auto& persons = videos[v].frames[p].persons;
      bool usable = !persons.empty();
      for (const auto& person : persons) {
        if (person.labels.empty()) usable = false;
        for (const auto& l : person.labels)
          if (!seen.count(l)) usable = false;
      }
      if (usable) candidates.push_back({v, p});
    }
  if (candidates.empty())
    throw ConfigError("no keyframe of the " + std::to_string(videos.size()) +
                      " training videos shows only seen classes of split '" + split.split_id + "'");

  const ImageEncoderConfig icfg = read_configs(store).image;
  std::vector<TrainSample> out(candidates.size());
  parallel_for(candidates.size(), opts.threads, [&](std::size_t i) {
    const VideoManifest& v = videos[candidates[i].video];
    const auto clip = sample_clip(v, candidates[i].pos, cfg.t_frames, cfg.stride, opts.base_dir);
    TrainSample s;
    s.features = extract_features(*clip, store, icfg);
    for (const auto& labels : clip->labels) {
      std::vector<std::size_t> t;
      for (const auto& l : labels) {
        t.push_back(seen.find(l)->second);
        if (cfg.mode == LabelMode::Single) break;
      }
      s.targets.push_back(std::move(t));
    }
    out[i] = std::move(s);
  });
  return out;
}

namespace {

void write_metrics_line(std::ofstream& out, const TrainLogEntry& e) {
  out << nlohmann::json{{"iter", e.iter}, {"loss", e.loss}, {"lr", e.lr}, {"wall_ms", e.wall_ms}}.dump()
      << '\n';
  out.flush();
}

}  // namespace

TrainResult train_detection(const ParamStore& pretrained, std::span<const VideoManifest> videos,
                            const LabelSplit& split, const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (split.seen.empty()) throw ConfigError("split '" + split.split_id + "' has no seen classes");
  for (const auto& e : pretrained.entries())
    if (e.name.starts_with("det."))
      throw ConfigError("the pretrained store already carries detector parameters ('" + e.name + "')");

  TrainResult result;
  result.store = pretrained;
  const DetectorConfig dcfg = cfg.detector();
  init_detector(result.store, dcfg, cfg.seed);
  result.store.add(kLabelModeEntry, Tensor::scalar(cfg.mode == LabelMode::Multi ? 1.0f : 0.0f), true);
  FreezeMask::apply(result.store);
  ParamStore& store = result.store;

  const std::vector<TrainSample> samples = build_train_samples(store, videos, split, cfg, opts);
  result.samples = samples.size();
  const EncoderConfigs enc = read_configs(store);
  std::vector<std::string> prompts;
  for (const auto& c : split.seen) prompts.push_back(class_prompt(c));
  const Tensor labels = encode_text(prompts, store, read_vocabulary(store), enc.text).detach();

  std::ofstream metrics;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    metrics.open(*opts.out_dir / "metrics.jsonl");
    if (!metrics) throw InputError("cannot write " + (*opts.out_dir / "metrics.jsonl").string());
  }

  RngStream order_rng(cfg.seed, hash_name("train-batches"));
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  Sgd sgd(cfg.momentum);
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> batch(cfg.batch_size);
    for (auto& b : batch) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      b = order[cursor++];
    }

    std::vector<GradSet> grads(batch.size());
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), opts.threads, [&](std::size_t i) {
      const TrainSample& s = samples[batch[i]];
      const ParamStore graded = store.with_grad();
      const InteractionOutput out = detector_forward(s.features, labels, graded, dcfg);
      const Tensor logits = classify(out.person_out, out.label_out, dcfg.temperature, cfg.mode).logits;
      const Tensor loss = detection_loss(logits, s.targets, cfg.mode);
      loss.backward();
      losses[i] = loss.item();
      grads[i] = GradSet::collect(graded);
    });

    GradSet total = GradSet::zeros_like(store);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      total.add(grads[i]);
      loss += losses[i];
    }
    total.scale(1.0 / static_cast<double>(batch.size()));
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw NumericError("training loss became non-finite at iteration " + std::to_string(it + 1));

    const double lr = lr_at(it, cfg);
    sgd.step(store, total, lr);

    TrainLogEntry entry;
    entry.iter = it + 1;
    entry.loss = loss;
    entry.lr = lr;
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(entry);
    if (metrics.is_open()) write_metrics_line(metrics, entry);
    if (opts.on_iter) opts.on_iter(entry);
    if (opts.out_dir && cfg.checkpoint_every > 0 && entry.iter % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06zu.stck", entry.iter);
      save_checkpoint(store, *opts.out_dir / name);
    }
  }
  if (opts.out_dir) save_checkpoint(store, *opts.out_dir / "final.stck");
  return result;
}

}  // namespace stclip
