#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "stclip/data.hpp"
#include "stclip/detector.hpp"

namespace stclip {

struct DetectionResult {
  std::string video_id;
  std::size_t frame_idx = 0;
  Box box;
  std::string label;
  float score = 0;  // in [0, 1]
};

struct GroundTruthBox {
  std::string video_id;
  std::size_t frame_idx = 0;
  Box box;
};

// Throws InputError on a degenerate box.
double iou(const Box& a, const Box& b);

struct ApResult {
  std::optional<double> ap;  // empty when the class has no ground truth
  std::size_t tp = 0, fp = 0, gt = 0;
};

// Detections of one class. Greedy matching in descending score order (ties
// to the lower index); each detection claims the unmatched ground truth of
// its frame with the highest IoU ≥ iou_thresh (ties to the lower index).
// AP is the area under the precision envelope (all-point interpolation).
ApResult average_precision(std::span<const DetectionResult> dets, std::span<const GroundTruthBox> gts,
                           double iou_thresh = 0.5);

struct ClassReport {
  std::string label;
  ApResult result;
};

struct EvalReport {
  std::string split_id;
  double iou_threshold = 0.5;
  std::string interpolation = "all-point";
  std::string zero_gt_policy = "excluded";
  std::vector<ClassReport> unseen;  // headline classes
  double map = 0.0;                 // mean AP over unseen classes with ground truth
  std::vector<ClassReport> seen;    // appendix
  std::optional<double> seen_map;
  std::size_t results = 0;
  std::size_t keyframes = 0;
};

// Every annotated frame of `videos` is a keyframe. Result labels must belong
// to the split; results on frames that are not annotated are rejected.
// Throws EvaluationError when no unseen class has ground truth.
EvalReport frame_map(std::span<const DetectionResult> results, std::span<const VideoManifest> videos,
                     const LabelSplit& split, double iou_thresh = 0.5, std::size_t threads = 1);

nlohmann::json report_to_json(const EvalReport& report);

// Mean of the per-person score vectors; throws InputError when empty.
Tensor soft_vote(std::span<const Tensor> scores);

void write_results(const std::filesystem::path& jsonl, std::span<const DetectionResult> results);
std::vector<DetectionResult> read_results(const std::filesystem::path& jsonl);

// The same detections with independent uniform scores, for the chance-level
// reference.
std::vector<DetectionResult> randomize_scores(std::span<const DetectionResult> results,
                                              std::uint64_t seed);

struct InferenceOptions {
  LabelMode mode = LabelMode::Single;
  std::vector<std::string> labels;  // evaluated label set, class names
  std::size_t stride = 1;
  // Average each video's scores and give every person the winning class.
  bool soft_vote = false;
  // When set, persons whose detector score falls more than this below the
  // frame's best are dropped; persons without a score count as 1.
  std::optional<float> detector_margin;
  std::filesystem::path base_dir;
  std::size_t threads = 1;
};

// Scores every person box of every annotated frame against every label with
// a trained detector store. One result per (person, label), or one per
// person under soft voting.
std::vector<DetectionResult> run_detection(const ParamStore& store, std::span<const VideoManifest> videos,
                                           const InferenceOptions& opts);

// Per-person argmax of the detector scores against the persons' first label,
// over every annotated frame of `videos` (labels not in the set are skipped).
struct AccuracyReport {
  std::size_t correct = 0, total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};
AccuracyReport person_accuracy(const ParamStore& store, std::span<const VideoManifest> videos,
                               const InferenceOptions& opts);

}  // namespace stclip
