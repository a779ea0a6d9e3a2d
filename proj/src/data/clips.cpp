#include <algorithm>
#include <cmath>
#include <set>

#include "stclip/data.hpp"
#include "stclip/errors.hpp"
#include "stclip/rng.hpp"

namespace stclip {

std::vector<LabelSplit> gen_splits(std::span<const std::string> classes, std::size_t n_splits,
                                   double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test fraction must lie in (0, 1)");
  if (n_splits < 1) throw ConfigError("need at least one split");
  const std::set<std::string> distinct(classes.begin(), classes.end());
  if (distinct.size() != classes.size()) throw ConfigError("class list has duplicates");
  const std::size_t n = classes.size();
  // Rounded up so that, for instance, a quarter of 21 classes gives 6.
  const auto size = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - 1e-9));
  if (size == 0) throw ConfigError("test set would be empty");
  if (size >= n) throw ConfigError("test set would leave no seen classes");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream(seed, hash_name("label-splits")).shuffle(order);

  std::vector<LabelSplit> out;
  for (std::size_t s = 0; s < n_splits; ++s) {
    std::vector<bool> test(n, false);
    for (std::size_t j = 0; j < size; ++j) test[order[(s * size + j) % n]] = true;
    LabelSplit split;
    split.split_id = "split" + std::to_string(s + 1);
    for (std::size_t i = 0; i < n; ++i) (test[i] ? split.unseen : split.seen).push_back(classes[i]);
    out.push_back(std::move(split));
  }
  return out;
}

std::vector<std::size_t> clip_positions(std::size_t keyframe, std::size_t count, std::size_t t_frames,
                                        std::size_t stride) {
  if (t_frames < 1) throw ConfigError("clips need at least one frame");
  if (count == 0) throw InputError("video has no frames");
  std::vector<std::size_t> pos(t_frames);
  const auto t = static_cast<long long>(t_frames);
  const auto st = static_cast<long long>(stride);
  for (long long j = 0; j < t; ++j) {
    // floor(stride · (2j − T + 1) / 2) keeps the keyframe at the centre.
    const long long num = st * (2 * j - t + 1);
    const long long off = num >= 0 ? num / 2 : -((-num + 1) / 2);
    const long long p = static_cast<long long>(keyframe) + off;
    pos[static_cast<std::size_t>(j)] =
        static_cast<std::size_t>(std::clamp<long long>(p, 0, static_cast<long long>(count) - 1));
  }
  return pos;
}

std::optional<ClipSample> sample_clip(const VideoManifest& v, std::size_t keyframe_pos,
                                      std::size_t t_frames, std::size_t stride,
                                      const std::filesystem::path& base_dir, ClipStats* stats) {
  if (keyframe_pos >= v.frames.size())
    throw InputError("video '" + v.video_id + "' has no keyframe at position " + std::to_string(keyframe_pos));
  const auto& key = v.frames[keyframe_pos];
  if (key.persons.empty()) {
    if (stats) ++stats->skipped_no_boxes;
    return std::nullopt;
  }
  ClipSample c;
  c.video_id = v.video_id;
  c.keyframe_pos = keyframe_pos;
  c.keyframe_idx = key.frame_idx;
  c.frame_positions = clip_positions(keyframe_pos, v.frames.size(), t_frames, stride);
  for (std::size_t p : c.frame_positions) c.frames.push_back(load_frame(v, p, base_dir));
  const auto at = std::find(c.frame_positions.begin(), c.frame_positions.end(), keyframe_pos);
  c.keyframe = at != c.frame_positions.end() ? c.frames[static_cast<std::size_t>(at - c.frame_positions.begin())]
                                              : load_frame(v, keyframe_pos, base_dir);
  for (const auto& p : key.persons) {
    c.boxes.push_back(p.box);
    c.labels.push_back(p.labels);
    c.detector_scores.push_back(p.detector_score.value_or(1.0f));
    c.actor_ids.push_back(p.actor_id);
  }
  if (stats) ++stats->sampled;
  return c;
}

Tensor crop_person(const Image& frame, const Box& box, std::size_t out_size) {
  if (out_size == 0) throw ConfigError("crop size must be positive");
  if (frame.width == 0 || frame.height == 0) throw InputError("cannot crop an empty frame");
  const float fw = static_cast<float>(frame.width), fh = static_cast<float>(frame.height);
  const Box b{std::clamp(box.x1, 0.0f, fw), std::clamp(box.y1, 0.0f, fh), std::clamp(box.x2, 0.0f, fw),
              std::clamp(box.y2, 0.0f, fh)};
  if (!(b.area() > 0.0f)) throw InputError("person box has no area inside the frame");

  const double sx = static_cast<double>(b.width()) / static_cast<double>(out_size);
  const double sy = static_cast<double>(b.height()) / static_cast<double>(out_size);
  std::vector<float> out(out_size * out_size * 3);
  auto sample_axis = [](double c, std::size_t n, std::size_t& i0, std::size_t& i1, double& w) {
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    w = c - static_cast<double>(i0);
  };
  for (std::size_t oy = 0; oy < out_size; ++oy) {
    std::size_t y0, y1;
    double wy;
    sample_axis(b.y1 + (static_cast<double>(oy) + 0.5) * sy - 0.5, frame.height, y0, y1, wy);
    for (std::size_t ox = 0; ox < out_size; ++ox) {
      std::size_t x0, x1;
      double wx;
      sample_axis(b.x1 + (static_cast<double>(ox) + 0.5) * sx - 0.5, frame.width, x0, x1, wx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = (1 - wx) * frame.at(x0, y0, c) + wx * frame.at(x1, y0, c);
        const double bot = (1 - wx) * frame.at(x0, y1, c) + wx * frame.at(x1, y1, c);
        const double v = (1 - wy) * top + wy * bot;
        out[(oy * out_size + ox) * 3 + c] = static_cast<float>(v / 127.5 - 1.0);
      }
    }
  }
  return Tensor({out_size, out_size, 3}, std::move(out));
}

std::vector<std::size_t> filter_detections(std::span<const ScoredBox> boxes, float margin) {
  if (boxes.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < boxes.size(); ++i)
    if (boxes[i].score > boxes[best].score) best = i;
  const float threshold = boxes[best].score - margin;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < boxes.size(); ++i)
    if (i == best || boxes[i].score > threshold) kept.push_back(i);
  return kept;
}

}  // namespace stclip
