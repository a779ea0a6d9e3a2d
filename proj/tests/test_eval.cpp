#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "doctest.h"
#include "stclip/errors.hpp"
#include "stclip/eval.hpp"
#include "eval_oracle.hpp"
#include "support.hpp"
#include "tiny_model.hpp"

using namespace stclip;
using stclip::testing::head_split;
using stclip::testing::tiny_pretrained;
using stclip::testing::tiny_train_config;
using stclip::testing::tiny_videos;

namespace {

using namespace stclip::testing;

VideoManifest one_frame_video(const std::string& id, std::vector<PersonAnnotation> persons) {
  VideoManifest v;
  v.video_id = id;
  v.width = v.height = 10;
  v.frames.push_back({0, "", std::move(persons)});
  return v;
}

}  // namespace

TEST_CASE("intersection over union") {
  const Box a{0, 0, 2, 2}, b{1, 1, 3, 3};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, b) == 1.0 / 7.0);
  CHECK(iou(b, a) == iou(a, b));
  CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
  CHECK(iou(a, Box{2, 0, 4, 2}) == 0.0);  // shared edge only
  CHECK(iou(a, Box{0, 0, 1, 2}) == 0.5);
  CHECK_THROWS_AS(iou(a, Box{1, 1, 1, 3}), InputError);
  CHECK_THROWS_AS(iou(Box{2, 0, 0, 2}, a), InputError);
}

TEST_CASE("average precision hand cases") {
  const std::vector<GroundTruthBox> gt{{"v", 0, {0, 0, 10, 10}}};
  // IoU 0.6: [0,0,10,6] covers 60 of 100.
  const std::vector<DetectionResult> single{det("v", 0, {0, 0, 10, 6}, "x", 0.7f)};
  CHECK(iou(single[0].box, gt[0].box) == doctest::Approx(0.6));
  ApResult r = average_precision(single, gt);
  REQUIRE(r.ap);
  CHECK(*r.ap == 1.0);
  CHECK(r.tp == 1);

  const std::vector<DetectionResult> tp_fp{det("v", 0, {0, 0, 10, 10}, "x", 0.9f),
                                           det("v", 0, {0, 0, 10, 10}, "x", 0.8f)};
  r = average_precision(tp_fp, gt);
  CHECK(*r.ap == 1.0);
  CHECK(r.tp == 1);
  CHECK(r.fp == 1);

  const std::vector<DetectionResult> fps{det("v", 0, {20, 20, 30, 30}, "x", 0.9f),
                                         det("v", 1, {0, 0, 10, 10}, "x", 0.5f)};
  r = average_precision(fps, gt);
  CHECK(*r.ap == 0.0);
  CHECK(r.fp == 2);

  // The FP ranked first halves the precision at full recall.
  const std::vector<DetectionResult> fp_tp{det("v", 0, {0, 0, 10, 10}, "x", 0.5f),
                                           det("v", 0, {20, 20, 30, 30}, "x", 0.9f)};
  CHECK(*average_precision(fp_tp, gt).ap == 0.5);

  r = average_precision(single, {});
  CHECK_FALSE(r.ap.has_value());
  CHECK(r.gt == 0);
  CHECK(r.fp == 1);
  CHECK(*average_precision({}, gt).ap == 0.0);

  // Below-threshold overlap does not count; exactly 0.5 does.
  const std::vector<DetectionResult> half{det("v", 0, {0, 0, 10, 5}, "x", 0.9f)};
  CHECK(*average_precision(half, gt).ap == 1.0);
  const std::vector<DetectionResult> under{det("v", 0, {0, 0, 10, 4.9f}, "x", 0.9f)};
  CHECK(*average_precision(under, gt).ap == 0.0);
}

TEST_CASE("greedy matching takes the highest IoU ground truth") {
  const std::vector<GroundTruthBox> gts{{"v", 0, {0, 0, 10, 10}}, {"v", 0, {0, 0, 10, 8}}};
  // The top detection overlaps both; it must take the second (IoU 1) and
  // leave the first for the next detection.
  const std::vector<DetectionResult> dets{det("v", 0, {0, 0, 10, 8}, "x", 0.9f), det("v", 0, {0, 0, 10, 10}, "x", 0.8f)};
  const ApResult r = average_precision(dets, gts);
  CHECK(r.tp == 2);
  CHECK(*r.ap == 1.0);
}

TEST_CASE("average precision depends only on the ranking") {
  RngStream rng(5, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<GroundTruthBox> gts;
    std::vector<DetectionResult> dets;
    for (std::size_t f = 0; f < 4; ++f) {
      for (std::size_t g = rng.below(3); g > 0; --g) gts.push_back({"v", f, grid_box(rng)});
      for (std::size_t d = rng.below(4); d > 0; --d) dets.push_back(det("v", f, grid_box(rng), "x", 0.0f));
    }
    std::vector<std::size_t> rank(dets.size());
    std::iota(rank.begin(), rank.end(), 1);
    rng.shuffle(rank);
    for (std::size_t i = 0; i < dets.size(); ++i) dets[i].score = static_cast<float>(rank[i]) / 64.0f;
    auto squashed = dets;
    for (auto& d : squashed) d.score = d.score * d.score * 0.5f + 0.1f;
    const ApResult a = average_precision(dets, gts), b = average_precision(squashed, gts);
    CHECK(a.ap == b.ap);
    CHECK(a.tp == b.tp);

    if (gts.empty()) continue;
    // A trailing false positive leaves every earlier PR point untouched and
    // cannot raise AP.
    auto extended = dets;
    extended.push_back(det("v", 99, {0, 0, 1, 1}, "x", 0.0f));
    CHECK(*average_precision(extended, gts).ap <= *a.ap);
    CHECK(*average_precision(extended, gts).ap == doctest::Approx(*a.ap).epsilon(1e-12));
  }
}

TEST_CASE("frame mAP matches the exhaustive reference") {
  std::size_t compared = 0;
  for (std::uint64_t seed = 0; compared < 200; ++seed) {
    const Instance in = random_instance(seed);
    const auto expected = ref_frame_map(in);
    if (!expected) {
      CHECK_THROWS_AS(frame_map(in.results, in.videos, in.split), EvaluationError);
      continue;
    }
    const EvalReport rep = frame_map(in.results, in.videos, in.split);
    INFO("seed " << seed);
    CHECK(std::abs(rep.map - *expected) <= 1e-9);
    // Threads never change the numbers.
    CHECK(frame_map(in.results, in.videos, in.split, 0.5, 3).map == rep.map);
    ++compared;
  }
}

TEST_CASE("frame mAP examples and report") {
  const auto videos = tiny_videos(3, 4, 1);
  LabelSplit split{"s", {}, {}};
  std::set<std::string> present;
  for (const auto& v : videos) present.insert(v.frames[0].persons[0].labels[0]);
  for (const auto& c : motion_classes()) (present.count(c) ? split.unseen : split.seen).push_back(c);

  std::vector<DetectionResult> oracle;
  for (const auto& v : videos)
    for (const auto& f : v.frames)
      for (const auto& p : f.persons) oracle.push_back(det(v.video_id, f.frame_idx, p.box, p.labels[0], 1.0f));
  const EvalReport perfect = frame_map(oracle, videos, split);
  CHECK(perfect.map == 1.0);
  CHECK(perfect.unseen.size() == split.unseen.size());
  CHECK(perfect.keyframes == 9);
  CHECK_FALSE(perfect.seen_map.has_value());  // seen classes have no ground truth here

  const EvalReport empty = frame_map({}, videos, split);
  CHECK(empty.map == 0.0);
  for (const auto& c : empty.unseen) CHECK(c.result.gt > 0);

  const auto j = report_to_json(perfect);
  CHECK(j.at("interpolation") == "all-point");
  CHECK(j.at("zero_gt_policy") == "excluded");
  CHECK(j.at("map") == 1.0);
  CHECK(j.at("iou_threshold") == 0.5);
  CHECK(j.at("classes").size() == split.unseen.size());
  CHECK(j.at("appendix").at("seen_map").is_null());
  CHECK(j.at("appendix").at("seen_classes").at(split.seen[0]).at("ap").is_null());

  // Seen results go to the appendix and never move the headline number.
  auto mixed = oracle;
  mixed.push_back(det(videos[0].video_id, 0, {0, 0, 4, 4}, split.seen[0], 0.9f));
  CHECK(frame_map(mixed, videos, split).map == 1.0);
  CHECK(frame_map(mixed, videos, split).seen[0].result.fp == 1);
}

TEST_CASE("frame mAP errors") {
  const auto v = one_frame_video("v", {{{0, 0, 4, 4}, {"a"}, {}, -1}});
  const std::vector<VideoManifest> videos{v};
  const LabelSplit split{"s", {"b"}, {"a"}};
  CHECK_THROWS_AS(frame_map(std::vector<DetectionResult>{det("v", 0, {0, 0, 4, 4}, "z", 0.5f)}, videos, split), InputError);
  CHECK_THROWS_AS(frame_map(std::vector<DetectionResult>{det("v", 0, {0, 0, 4, 4}, "a", 1.5f)}, videos, split), InputError);
  CHECK_THROWS_AS(frame_map(std::vector<DetectionResult>{det("v", 3, {0, 0, 4, 4}, "a", 0.5f)}, videos, split), InputError);
  CHECK_THROWS_AS(frame_map(std::vector<DetectionResult>{det("w", 0, {0, 0, 4, 4}, "a", 0.5f)}, videos, split), InputError);
  CHECK_THROWS_AS(frame_map(std::vector<DetectionResult>{det("v", 0, {4, 0, 4, 4}, "a", 0.5f)}, videos, split), InputError);
  const LabelSplit no_gt{"s", {"a"}, {"b"}};
  CHECK_THROWS_AS(frame_map({}, videos, no_gt), EvaluationError);
}

TEST_CASE("soft voting") {
  const Tensor votes[] = {Tensor::vector({0.7f, 0.3f}), Tensor::vector({0.5f, 0.5f})};
  const Tensor m = soft_vote(votes);
  CHECK(m.data()[0] == doctest::Approx(0.6));
  CHECK(m.data()[1] == doctest::Approx(0.4));
  CHECK(std::max_element(m.data().begin(), m.data().end()) == m.data().begin());

  const Tensor one[] = {Tensor::vector({0.1f, 0.2f, 0.7f})};
  CHECK(stclip::testing::bit_equal(soft_vote(one).data(), one[0].data()));

  RngStream rng(9, 9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> vs;
    for (std::size_t i = 1 + rng.below(6); i > 0; --i) vs.push_back(stclip::testing::random_tensor(rng, {4}, 0.0f, 1.0f));
    auto shuffled = vs;
    rng.shuffle(shuffled);
    CHECK(stclip::testing::max_abs_diff(soft_vote(vs).data(), soft_vote(shuffled).data()) < 1e-7);
  }
  CHECK_THROWS_AS(soft_vote(std::vector<Tensor>{}), InputError);
  const Tensor ragged[] = {Tensor::vector({1, 0}), Tensor::vector({1, 0, 0})};
  CHECK_THROWS_AS(soft_vote(ragged), DimensionError);
}

TEST_CASE("results files") {
  const auto path = std::filesystem::temp_directory_path() / "stclip_eval_results" / "r.jsonl";
  const std::vector<DetectionResult> rs{det("v", 2, {1, 2, 3.5f, 4}, "a", 0.25f), det("w", 0, {0, 0, 1, 1}, "b", 1.0f)};
  write_results(path, rs);
  const auto back = read_results(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].video_id == "v");
  CHECK(back[0].frame_idx == 2);
  CHECK(back[0].box == Box{1, 2, 3.5f, 4});
  CHECK(back[1].label == "b");
  CHECK(back[1].score == 1.0f);

  std::ofstream(path) << R"({"video_id": "v", "frame_idx": 0, "box": [0, 0, 1], "label": "a", "score": 0.5})" << '\n';
  CHECK_THROWS_AS(read_results(path), InputError);
  std::ofstream(path) << "{not json\n";
  CHECK_THROWS_AS(read_results(path), InputError);
  CHECK_THROWS_AS(read_results(path.parent_path() / "missing.jsonl"), InputError);
  std::filesystem::remove_all(path.parent_path());

  const auto r1 = randomize_scores(rs, 3), r2 = randomize_scores(rs, 3), r3 = randomize_scores(rs, 4);
  CHECK(r1[0].score == r2[0].score);
  CHECK(r1[0].score != r3[0].score);
  for (const auto& r : r1) CHECK((r.score >= 0.0f && r.score < 1.0f));
  CHECK(r1[1].box == rs[1].box);
}

TEST_CASE("detection inference over manifests") {
  ParamStore s = tiny_pretrained();
  TrainConfig c = tiny_train_config();
  init_detector(s, c.detector(), 1);
  const auto videos = tiny_videos(3, 6, 2);
  InferenceOptions o;
  o.labels = {"bounce", "grow", "shrink"};
  const auto results = run_detection(s, videos, o);
  std::size_t persons = 0;
  for (const auto& v : videos)
    for (const auto& f : v.frames) persons += f.persons.size();
  REQUIRE(results.size() == persons * 3);
  for (std::size_t i = 0; i < results.size(); i += 3) {
    const double total = results[i].score + results[i + 1].score + results[i + 2].score;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(results[i].label == "bounce");
    CHECK(results[i + 2].box == results[i].box);
  }

  o.threads = 3;
  const auto threaded = run_detection(s, videos, o);
  for (std::size_t i = 0; i < results.size(); ++i) CHECK(threaded[i].score == results[i].score);

  o.mode = LabelMode::Multi;
  for (const auto& r : run_detection(s, videos, o)) CHECK((r.score >= 0.0f && r.score <= 1.0f));

  o.mode = LabelMode::Single;
  o.soft_vote = true;
  const auto voted = run_detection(s, videos, o);
  CHECK(voted.size() == persons);
  std::map<std::string, std::set<std::string>> labels_per_video;
  for (const auto& r : voted) labels_per_video[r.video_id].insert(r.label);
  for (const auto& [_, set] : labels_per_video) CHECK(set.size() == 1);

  // A huge margin keeps everyone; a tiny one keeps at least the best box.
  o.soft_vote = false;
  o.detector_margin = 1.0f;
  CHECK(run_detection(s, videos, o).size() == persons * 3);
  o.detector_margin = 1e-6f;
  const auto filtered = run_detection(s, videos, o);
  CHECK(filtered.size() >= 3 * 9);
  CHECK(filtered.size() <= persons * 3);

  o.detector_margin.reset();
  const AccuracyReport acc = person_accuracy(s, videos, o);
  std::size_t labelled = 0;
  for (const auto& v : videos)
    for (const auto& f : v.frames)
      for (const auto& p : f.persons) labelled += std::count(o.labels.begin(), o.labels.end(), p.labels[0]);
  CHECK(acc.total == labelled);
  CHECK(acc.correct <= acc.total);

  o.labels.clear();
  CHECK_THROWS_AS(run_detection(s, videos, o), ConfigError);
  ParamStore no_det = tiny_pretrained();
  o.labels = {"grow"};
  CHECK_THROWS_AS(run_detection(no_det, videos, o), Error);
}
