#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "stclip/errors.hpp"
#include "stclip/eval.hpp"
#include "stclip/parallel.hpp"
#include "stclip/rng.hpp"

namespace stclip {

using nlohmann::json;

double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw InputError("IoU of a degenerate box");
  const double w = std::min<double>(a.x2, b.x2) - std::max<double>(a.x1, b.x1);
  const double h = std::min<double>(a.y2, b.y2) - std::max<double>(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  const double inter = w * h;
  const double area_a = (static_cast<double>(a.x2) - a.x1) * (static_cast<double>(a.y2) - a.y1);
  const double area_b = (static_cast<double>(b.x2) - b.x1) * (static_cast<double>(b.y2) - b.y1);
  return inter / (area_a + area_b - inter);
}

ApResult average_precision(std::span<const DetectionResult> dets, std::span<const GroundTruthBox> gts,
                           double iou_thresh) {
  ApResult r;
  r.gt = gts.size();
  using Key = std::pair<std::string_view, std::size_t>;
  std::map<Key, std::vector<std::size_t>> by_frame;
  for (std::size_t g = 0; g < gts.size(); ++g) by_frame[{gts[g].video_id, gts[g].frame_idx}].push_back(g);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<bool> matched(gts.size(), false);
  std::vector<double> precision;
  std::vector<bool> hit;
  precision.reserve(order.size());
  hit.reserve(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const DetectionResult& d = dets[order[k]];
    std::optional<std::size_t> best;
    double best_iou = 0.0;
    if (auto it = by_frame.find({d.video_id, d.frame_idx}); it != by_frame.end())
      for (std::size_t g : it->second) {
        if (matched[g]) continue;
        const double o = iou(d.box, gts[g].box);
        if (o >= iou_thresh && (!best || o > best_iou)) {
          best = g;
          best_iou = o;
        }
      }
    if (best) {
      matched[*best] = true;
      ++r.tp;
    } else {
      ++r.fp;
    }
    hit.push_back(best.has_value());
    precision.push_back(static_cast<double>(r.tp) / static_cast<double>(k + 1));
  }
  if (r.gt == 0) return r;

  // Right-to-left running max gives the monotone envelope; recall only
  // moves at true positives, each adding 1/gt.
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k)
    if (hit[k]) ap += precision[k] / static_cast<double>(r.gt);
  r.ap = ap;
  return r;
}

EvalReport frame_map(std::span<const DetectionResult> results, std::span<const VideoManifest> videos,
                     const LabelSplit& split, double iou_thresh, std::size_t threads) {
  std::vector<std::string> classes = split.unseen;
  classes.insert(classes.end(), split.seen.begin(), split.seen.end());
  std::map<std::string, std::size_t, std::less<>> class_index;
  for (std::size_t i = 0; i < classes.size(); ++i) class_index.emplace(classes[i], i);

  EvalReport report;
  report.split_id = split.split_id;
  report.iou_threshold = iou_thresh;
  report.results = results.size();

  std::vector<std::vector<GroundTruthBox>> gts(classes.size());
  std::set<std::pair<std::string, std::size_t>> keyframes;
  for (const auto& v : videos)
    for (const auto& f : v.frames) {
      if (f.persons.empty()) continue;
      keyframes.emplace(v.video_id, f.frame_idx);
      for (const auto& p : f.persons)
        for (const auto& l : p.labels)
          if (auto it = class_index.find(l); it != class_index.end())
            gts[it->second].push_back({v.video_id, f.frame_idx, p.box});
    }
  report.keyframes = keyframes.size();

  std::vector<std::vector<DetectionResult>> dets(classes.size());
  for (const auto& r : results) {
    const auto it = class_index.find(r.label);
    if (it == class_index.end()) throw InputError("result label '" + r.label + "' is not in split '" + split.split_id + "'");
    if (!(r.score >= 0.0f && r.score <= 1.0f))
      throw InputError("result score " + std::to_string(r.score) + " outside [0, 1]");
    if (!r.box.valid()) throw InputError("result with a degenerate box in video '" + r.video_id + "'");
    if (!keyframes.count({r.video_id, r.frame_idx}))
      throw InputError("result on frame " + std::to_string(r.frame_idx) + " of video '" + r.video_id +
                       "', which is not an annotated keyframe");
    dets[it->second].push_back(r);
  }

  std::vector<ApResult> aps(classes.size());
  parallel_for(classes.size(), threads,
               [&](std::size_t c) { aps[c] = average_precision(dets[c], gts[c], iou_thresh); });

  auto summarize = [&](std::size_t begin, std::size_t end, std::vector<ClassReport>& out) {
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = begin; c < end; ++c) {
      out.push_back({classes[c], aps[c]});
      if (aps[c].ap) {
        sum += *aps[c].ap;
        ++counted;
      }
    }
    return counted ? std::optional<double>(sum / static_cast<double>(counted)) : std::nullopt;
  };
  const auto unseen_map = summarize(0, split.unseen.size(), report.unseen);
  report.seen_map = summarize(split.unseen.size(), classes.size(), report.seen);
  if (!unseen_map)
    throw EvaluationError("no unseen class of split '" + split.split_id + "' has ground truth");
  report.map = *unseen_map;
  return report;
}

json report_to_json(const EvalReport& r) {
  auto classes = [](const std::vector<ClassReport>& list) {
    json out = json::object();
    for (const auto& c : list)
      out[c.label] = {{"ap", c.result.ap ? json(*c.result.ap) : json(nullptr)},
                      {"tp", c.result.tp},
                      {"fp", c.result.fp},
                      {"gt", c.result.gt}};
    return out;
  };
  return {{"split_id", r.split_id},
          {"iou_threshold", r.iou_threshold},
          {"interpolation", r.interpolation},
          {"zero_gt_policy", r.zero_gt_policy},
          {"map", r.map},
          {"classes", classes(r.unseen)},
          {"counts", {{"results", r.results}, {"keyframes", r.keyframes}}},
          {"appendix",
           {{"seen_map", r.seen_map ? json(*r.seen_map) : json(nullptr)}, {"seen_classes", classes(r.seen)}}}};
}

Tensor soft_vote(std::span<const Tensor> scores) {
  if (scores.empty()) throw InputError("soft voting needs at least one score vector");
  const std::size_t n = scores[0].numel();
  std::vector<double> acc(n, 0.0);
  for (const auto& s : scores) {
    if (s.numel() != n) throw DimensionError("score vectors of different lengths");
    const auto d = s.data();
    for (std::size_t i = 0; i < n; ++i) acc[i] += d[i];
  }
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(scores.size()));
  return Tensor({n}, std::move(out));
}

void write_results(const std::filesystem::path& path, std::span<const DetectionResult> results) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  for (const auto& r : results)
    out << json{{"video_id", r.video_id},
                {"frame_idx", r.frame_idx},
                {"box", {r.box.x1, r.box.y1, r.box.x2, r.box.y2}},
                {"label", r.label},
                {"score", r.score}}
               .dump()
        << '\n';
}

std::vector<DetectionResult> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  std::vector<DetectionResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      DetectionResult r;
      r.video_id = j.at("video_id").get<std::string>();
      r.frame_idx = j.at("frame_idx").get<std::size_t>();
      const auto b = j.at("box").get<std::vector<float>>();
      if (b.size() != 4) throw InputError("box needs 4 coordinates");
      r.box = {b[0], b[1], b[2], b[3]};
      r.label = j.at("label").get<std::string>();
      r.score = j.at("score").get<float>();
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<DetectionResult> randomize_scores(std::span<const DetectionResult> results, std::uint64_t seed) {
  RngStream rng(seed, hash_name("random-scores"));
  std::vector<DetectionResult> out(results.begin(), results.end());
  for (auto& r : out) r.score = static_cast<float>(rng.uniform());
  return out;
}

namespace {

struct ScoredKeyframe {
  const VideoManifest* video = nullptr;
  std::size_t frame_idx = 0;
  std::vector<Box> boxes;
  std::vector<std::vector<std::string>> labels;
  std::vector<float> scores;  // [persons × labels]
};

std::vector<ScoredKeyframe> score_keyframes(const ParamStore& store, std::span<const VideoManifest> videos,
                                            const InferenceOptions& opts) {
  if (opts.labels.empty()) throw ConfigError("inference needs a nonempty label set");
  const DetectorConfig dcfg = read_detector_config(store);
  const EncoderConfigs enc = read_configs(store);
  std::vector<std::string> prompts;
  for (const auto& c : opts.labels) prompts.push_back(class_prompt(c));
  const Tensor labels = encode_text(prompts, store, read_vocabulary(store), enc.text).detach();

  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t v = 0; v < videos.size(); ++v)
    for (std::size_t p = 0; p < videos[v].frames.size(); ++p)
      if (!videos[v].frames[p].persons.empty()) jobs.emplace_back(v, p);

  std::vector<ScoredKeyframe> out(jobs.size());
  parallel_for(jobs.size(), opts.threads, [&](std::size_t j) {
    const VideoManifest& v = videos[jobs[j].first];
    auto clip = *sample_clip(v, jobs[j].second, dcfg.t_frames, opts.stride, opts.base_dir);
    if (opts.detector_margin) {
      std::vector<ScoredBox> boxes;
      for (std::size_t i = 0; i < clip.boxes.size(); ++i) boxes.push_back({clip.boxes[i], clip.detector_scores[i]});
      const auto keep = filter_detections(boxes, *opts.detector_margin);
      ClipSample kept = clip;
      kept.boxes.clear();
      kept.labels.clear();
      for (std::size_t i : keep) {
        kept.boxes.push_back(clip.boxes[i]);
        kept.labels.push_back(clip.labels[i]);
      }
      clip = std::move(kept);
    }
    const ClipFeatures f = extract_features(clip, store, enc.image);
    const InteractionOutput io = detector_forward(f, labels, store, dcfg);
    const ClassScores s = classify(io.person_out, io.label_out, dcfg.temperature, opts.mode);
    ScoredKeyframe& k = out[j];
    k.video = &v;
    k.frame_idx = clip.keyframe_idx;
    k.boxes = clip.boxes;
    k.labels = clip.labels;
    k.scores.assign(s.scores.data().begin(), s.scores.data().end());
  });
  return out;
}

}  // namespace

std::vector<DetectionResult> run_detection(const ParamStore& store, std::span<const VideoManifest> videos,
                                           const InferenceOptions& opts) {
  const auto frames = score_keyframes(store, videos, opts);
  const std::size_t n = opts.labels.size();
  std::vector<DetectionResult> out;
  if (!opts.soft_vote) {
    for (const auto& k : frames)
      for (std::size_t b = 0; b < k.boxes.size(); ++b)
        for (std::size_t c = 0; c < n; ++c)
          out.push_back({k.video->video_id, k.frame_idx, k.boxes[b], opts.labels[c], k.scores[b * n + c]});
    return out;
  }
  // Frames of one video are contiguous in `frames`.
  for (std::size_t begin = 0; begin < frames.size();) {
    std::size_t end = begin;
    std::vector<Tensor> persons;
    while (end < frames.size() && frames[end].video == frames[begin].video) {
      const auto& k = frames[end++];
      for (std::size_t b = 0; b < k.boxes.size(); ++b)
        persons.push_back(Tensor({n}, std::vector<float>(k.scores.begin() + static_cast<long>(b * n),
                                                         k.scores.begin() + static_cast<long>((b + 1) * n))));
    }
    const Tensor voted = soft_vote(persons);
    const auto v = voted.data();
    const std::size_t best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    for (std::size_t i = begin; i < end; ++i)
      for (const auto& box : frames[i].boxes)
        out.push_back({frames[i].video->video_id, frames[i].frame_idx, box, opts.labels[best], v[best]});
    begin = end;
  }
  return out;
}

AccuracyReport person_accuracy(const ParamStore& store, std::span<const VideoManifest> videos,
                               const InferenceOptions& opts) {
  const auto frames = score_keyframes(store, videos, opts);
  const std::size_t n = opts.labels.size();
  AccuracyReport r;
  for (const auto& k : frames)
    for (std::size_t b = 0; b < k.boxes.size(); ++b) {
      if (k.labels[b].empty()) continue;
      const auto target = std::find(opts.labels.begin(), opts.labels.end(), k.labels[b][0]);
      if (target == opts.labels.end()) continue;
      const auto row = k.scores.begin() + static_cast<long>(b * n);
      const auto best = std::max_element(row, row + static_cast<long>(n)) - row;
      ++r.total;
      if (static_cast<std::size_t>(best) == static_cast<std::size_t>(target - opts.labels.begin())) ++r.correct;
    }
  return r;
}

}  // namespace stclip
