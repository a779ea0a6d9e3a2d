#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "stclip/data.hpp"
#include "stclip/detector.hpp"

namespace stclip {

struct TrainToggles {
  bool adapter = true;
  bool temporal = true;               // false: average pooling over frames
  bool prompting_every_layer = true;  // false: last layer only
  bool its = true;                    // false: shared prompting with all context tokens
};

struct TrainConfig {
  std::size_t iterations = 300;
  std::size_t batch_size = 8;
  double base_lr = 2.5e-4;
  std::size_t warmup_iters = 80;
  double warmup_factor = 0.25;
  LabelMode mode = LabelMode::Single;
  std::size_t k_interest = 100;
  std::size_t lora_rank = 8;
  std::size_t t_frames = 4;
  std::size_t stride = 1;
  TrainToggles toggles;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  // Write a checkpoint every this many iterations (0: final only).
  std::size_t checkpoint_every = 0;

  // base_lr = 0 is accepted as a dry run; every other rate must be positive.
  void validate() const;
  DetectorConfig detector() const;
};

// JSON objects mirror the field names; absent keys keep their defaults and
// unknown keys are rejected with ConfigError.
void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

// Frozen: encoder weights ("img.", "txt."), the logit scale ("clip.") and
// configuration echoes ("meta."). Everything under "det." trains. Any other
// name is rejected, so the partition covers every parameter.
struct FreezeMask {
  static bool frozen(std::string_view name);
  static void apply(ParamStore& store);
};

// logits: [B × N_L] cosine/τ scores before softmax or sigmoid. Each person
// has exactly one target in single mode (cross-entropy over the softmax) and
// a possibly empty set in multi mode (mean binary cross-entropy over every
// person-class entry).
Tensor detection_loss(const Tensor& logits, std::span<const std::vector<std::size_t>> targets,
                      LabelMode mode);

// Linear ramp from warmup_factor·base_lr at iteration 0 up to base_lr at
// warmup_iters, then flat.
double lr_at(std::size_t iter, const TrainConfig& cfg);

struct TrainLogEntry {
  std::size_t iter = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

struct TrainOptions {
  std::filesystem::path base_dir;  // resolves relative frame paths
  // When set, metrics.jsonl and checkpoints (ckpt_<iter>.stck, final.stck)
  // are written here.
  std::optional<std::filesystem::path> out_dir;
  std::size_t threads = 1;
  std::function<void(const TrainLogEntry&)> on_iter;
};

// One training example: a keyframe whose persons all carry seen labels.
struct TrainSample {
  ClipFeatures features;
  std::vector<std::vector<std::size_t>> targets;  // indices into split.seen
};

// Keyframes of `videos` whose persons carry only seen labels, with frozen
// features precomputed. Keyframes showing any unseen action are skipped so
// unseen classes never reach training, not even as unlabeled context.
std::vector<TrainSample> build_train_samples(const ParamStore& store,
                                             std::span<const VideoManifest> videos,
                                             const LabelSplit& split, const TrainConfig& cfg,
                                             const TrainOptions& opts = {});

struct TrainResult {
  ParamStore store;
  std::vector<TrainLogEntry> log;
  std::size_t samples = 0;
};

// Trained checkpoints record their label mode here (1 = multi-label), so
// evaluation needs nothing beyond the checkpoint, manifests and split.
inline constexpr const char* kLabelModeEntry = "meta.train.multi_label";
// Single when the entry is absent.
LabelMode read_label_mode(const ParamStore& store);

// Adds a fresh detector to a copy of `pretrained` and fits it with SGD on the
// seen classes. Per-sample gradients are reduced in batch order, so results
// do not depend on the thread count.
TrainResult train_detection(const ParamStore& pretrained, std::span<const VideoManifest> videos,
                            const LabelSplit& split, const TrainConfig& cfg,
                            const TrainOptions& opts = {});

}  // namespace stclip
