#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stclip/encoders.hpp"
#include "stclip/image.hpp"

namespace stclip {

// The twelve built-in synthetic actions, in canonical order.
const std::vector<std::string>& motion_classes();

struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() * height(); }
  float center_x() const { return 0.5f * (x1 + x2); }
  float center_y() const { return 0.5f * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }
  bool operator==(const Box&) const = default;
};

struct PersonAnnotation {
  Box box;
  std::vector<std::string> labels;
  std::optional<float> detector_score;
  int actor_id = -1;
};

struct FrameAnnotation {
  std::size_t frame_idx = 0;
  // Path relative to the manifest directory; empty when the frame is
  // rendered from the video's actor specs.
  std::string image;
  std::vector<PersonAnnotation> persons;
};

// Everything needed to re-render one synthetic actor at any frame.
struct ActorSpec {
  int actor_id = 0;
  std::string action;
  std::string color;
  std::string shape;
  float x0 = 0, y0 = 0;  // centre at frame 0
  float radius = 5;
  float angle0 = 0;
  float phase = 0;
};

struct VideoManifest {
  std::string video_id;
  std::size_t width = 0, height = 0;
  std::vector<ActorSpec> actors;
  std::vector<FrameAnnotation> frames;

  // Throws InputError on the first broken invariant. `classes` may be empty
  // to skip the label check.
  void validate(std::span<const std::string> classes = {}) const;
};

std::vector<VideoManifest> read_manifests(const std::filesystem::path& jsonl);
void write_manifests(const std::filesystem::path& jsonl, std::span<const VideoManifest> videos);

// ---------------------------------------------------------------------------
// Rendering.

struct ActorState {
  float cx, cy, scale, angle, brightness;
};

ActorState actor_state(const ActorSpec& a, float t);
Box actor_box(const ActorSpec& a, float t, std::size_t width, std::size_t height);
// The scene at t blended with the scenes at t-3, t-6 and t-9 (weights 4:3:2:1), so
// motion leaves a fading trail; boxes track the shape at t only.
Image render_frame(std::span<const ActorSpec> actors, std::size_t width, std::size_t height, float t);

// Frame at position `pos` of a video: read from disk when the annotation names
// an image, otherwise rendered from the actor specs.
Image load_frame(const VideoManifest& v, std::size_t pos, const std::filesystem::path& base_dir = {});

struct SynthConfig {
  std::size_t num_videos = 4;
  std::size_t frames_per_video = 8;
  std::size_t actors_min = 1;
  std::size_t actors_max = 1;
  std::vector<std::string> classes = motion_classes();
  std::size_t image_size = 32;
  std::string id_prefix = "synth";
};

// Pure function of (config, seed). When `out_dir` is given, frames are
// written there as PPM, the manifests reference them and manifests.jsonl is
// written alongside.
std::vector<VideoManifest> synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                                          const std::optional<std::filesystem::path>& out_dir = {});

// ---------------------------------------------------------------------------
// Label splits.

struct LabelSplit {
  std::string split_id;
  std::vector<std::string> seen;
  std::vector<std::string> unseen;
};

std::vector<LabelSplit> gen_splits(std::span<const std::string> classes, std::size_t n_splits,
                                   double test_fraction, std::uint64_t seed);
void write_split(const std::filesystem::path& path, const LabelSplit& split);
LabelSplit read_split(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Clips, crops and detector filtering.

struct ClipSample {
  std::string video_id;
  std::size_t keyframe_pos = 0;
  std::size_t keyframe_idx = 0;
  std::vector<std::size_t> frame_positions;  // t_frames entries, keyframe-centred
  std::vector<Image> frames;
  Image keyframe;  // person crops come from here
  std::vector<Box> boxes;
  std::vector<std::vector<std::string>> labels;
  std::vector<float> detector_scores;
  std::vector<int> actor_ids;
};

// Positions of a t_frames clip around `keyframe` with the given stride,
// clamped to [0, count).
std::vector<std::size_t> clip_positions(std::size_t keyframe, std::size_t count, std::size_t t_frames,
                                        std::size_t stride);

struct ClipStats {
  std::size_t sampled = 0;
  std::size_t skipped_no_boxes = 0;
};

// Empty optional when the keyframe has no boxes (counted in `stats`).
std::optional<ClipSample> sample_clip(const VideoManifest& v, std::size_t keyframe_pos,
                                      std::size_t t_frames, std::size_t stride,
                                      const std::filesystem::path& base_dir = {},
                                      ClipStats* stats = nullptr);

// Bilinear crop-and-resize with half-pixel centres and edge clamping,
// returning [out × out × 3] in [−1, 1].
Tensor crop_person(const Image& frame, const Box& box, std::size_t out_size);

struct ScoredBox {
  Box box;
  float score = 0;
};

// Indices (ascending) of the kept boxes: the best box plus every box whose
// score exceeds best − margin.
std::vector<std::size_t> filter_detections(std::span<const ScoredBox> boxes, float margin);

// ---------------------------------------------------------------------------
// Caption corpus for contrastive pretraining.

struct CorpusConfig {
  std::vector<std::string> classes = motion_classes();
  std::size_t per_class = 64;
  std::size_t image_size = 32;
};

// Single-actor stills (rendered with their motion trail), half of them as
// full frames and half cropped to the actor's box; captions name the action.
std::vector<CaptionedImage> caption_corpus(const CorpusConfig& cfg, std::uint64_t seed);
// Every word any corpus caption can use, for building the vocabulary.
std::vector<std::string> caption_vocabulary_texts(std::span<const std::string> classes);
// Text used for a class at classification time ("move-right" -> "move right").
std::string class_prompt(const std::string& class_name);

}  // namespace stclip
