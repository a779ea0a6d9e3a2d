#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "stclip/data.hpp"
#include "stclip/errors.hpp"
#include "stclip/rng.hpp"

using namespace stclip;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("stclip_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string manifest_text(const std::vector<VideoManifest>& v) {
  const auto p = fs::temp_directory_path() / "stclip_manifest_text.jsonl";
  write_manifests(p, v);
  std::ifstream f(p);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("synthetic generation is deterministic and honours counts") {
  SynthConfig c;
  c.num_videos = 4;
  c.frames_per_video = 8;
  const auto a = synth_generate(c, 9);
  const auto b = synth_generate(c, 9);
  REQUIRE(a.size() == 4);
  CHECK(manifest_text(a) == manifest_text(b));
  for (const auto& v : a) {
    CHECK(v.frames.size() == 8);
    v.validate(motion_classes());
    for (const auto& f : v.frames) CHECK(f.persons.size() == 1);
    for (std::size_t p = 0; p < 8; ++p) CHECK(load_frame(v, p) == load_frame(b[&v - a.data()], p));
  }
  CHECK(manifest_text(a) != manifest_text(synth_generate(c, 10)));
}

TEST_CASE("each video depends only on its own index") {
  SynthConfig c;
  c.num_videos = 6;
  c.actors_max = 3;
  const auto six = synth_generate(c, 4);
  c.num_videos = 3;
  const auto three = synth_generate(c, 4);
  CHECK(manifest_text(three) ==
        manifest_text(std::vector<VideoManifest>(six.begin(), six.begin() + 3)));
}

TEST_CASE("multi-actor videos carry distinct labels and every class leads a video") {
  SynthConfig c;
  c.num_videos = 24;
  c.actors_min = 2;
  c.actors_max = 4;
  std::set<std::string> leads;
  for (const auto& v : synth_generate(c, 5)) {
    std::set<std::string> labels;
    for (const auto& p : v.frames[0].persons) labels.insert(p.labels[0]);
    CHECK(labels.size() == v.frames[0].persons.size());
    CHECK(v.actors.size() >= 2);
    leads.insert(v.actors[0].action);
    v.validate(motion_classes());
  }
  CHECK(leads.size() == 12);
}

TEST_CASE("rendered boxes track the motion") {
  SynthConfig c;
  c.num_videos = 3;
  c.classes = {"move-right"};
  for (const auto& v : synth_generate(c, 2))
    for (std::size_t f = 1; f < v.frames.size(); ++f)
      CHECK(v.frames[f].persons[0].box.center_x() > v.frames[f - 1].persons[0].box.center_x());
  c.classes = {"drift-up"};
  for (const auto& v : synth_generate(c, 2))
    for (std::size_t f = 1; f < v.frames.size(); ++f)
      CHECK(v.frames[f].persons[0].box.center_y() < v.frames[f - 1].persons[0].box.center_y());
  c.classes = {"grow"};
  for (const auto& v : synth_generate(c, 2))
    CHECK(v.frames.back().persons[0].box.area() > v.frames.front().persons[0].box.area());
}

TEST_CASE("box pixels belong to the actor") {
  SynthConfig c;
  c.num_videos = 4;
  for (const auto& v : synth_generate(c, 12)) {
    const Image img = load_frame(v, 3);
    const Box& b = v.frames[3].persons[0].box;
    double inside = 0, outside = 0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        const double lum = img.at(x, y, 0) + img.at(x, y, 1) + img.at(x, y, 2);
        const bool in = x + 0.5 > b.x1 && x + 0.5 < b.x2 && y + 0.5 > b.y1 && y + 0.5 < b.y2;
        (in ? inside : outside) += lum;
        ++(in ? n_in : n_out);
      }
    CHECK(inside / n_in > 1.5 * outside / n_out);  // flashing actors dim to 30%
  }
}

TEST_CASE("synth configuration errors") {
  SynthConfig c;
  c.actors_max = 5;
  CHECK_THROWS_AS(synth_generate(c, 1), ConfigError);
  c.actors_max = 2;
  c.classes = {"move-right"};
  CHECK_THROWS_AS(synth_generate(c, 1), ConfigError);
  c.actors_max = 1;
  c.classes = {"teleport"};
  CHECK_THROWS_AS(synth_generate(c, 1), InputError);
}

TEST_CASE("frames written to disk round-trip through the manifest") {
  const auto dir = scratch_dir("synth_disk");
  SynthConfig c;
  c.num_videos = 2;
  c.frames_per_video = 3;
  const auto written = synth_generate(c, 7, dir);
  const auto back = read_manifests(dir / "manifests.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(manifest_text(back) == manifest_text(written));
  CHECK_FALSE(back[0].frames[0].image.empty());
  const auto rendered = synth_generate(c, 7);
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t p = 0; p < 3; ++p) CHECK(load_frame(back[v], p, dir) == load_frame(rendered[v], p));
  fs::remove_all(dir);
}

TEST_CASE("manifest validation and parse errors") {
  SynthConfig c;
  c.num_videos = 1;
  auto v = synth_generate(c, 3)[0];
  auto bad = v;
  bad.frames[1].frame_idx = 0;
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = v;
  bad.frames[0].persons[0].box.x2 = 40;
  CHECK_THROWS_AS(bad.validate(), InputError);
  bad = v;
  bad.frames[0].persons[0].box.x2 = bad.frames[0].persons[0].box.x1;
  CHECK_THROWS_AS(bad.validate(), InputError);
  const std::vector<std::string> only{"nothing"};
  CHECK_THROWS_AS(v.validate(only), InputError);

  const auto dir = scratch_dir("bad_manifest");
  fs::create_directories(dir);
  std::ofstream(dir / "m.jsonl") << "{\"video_id\": \"x\", \"width\": 4}\n";
  CHECK_THROWS_AS(read_manifests(dir / "m.jsonl"), FormatError);
  std::ofstream(dir / "n.jsonl") << "not json\n";
  CHECK_THROWS_AS(read_manifests(dir / "n.jsonl"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("ppm round trip and errors") {
  const auto dir = scratch_dir("ppm");
  Image img(3, 2);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 13);
  write_ppm(dir / "a.ppm", img);
  CHECK(read_ppm(dir / "a.ppm") == img);
  std::ofstream(dir / "b.ppm") << "P3\n1 1\n255\n0 0 0\n";
  CHECK_THROWS_AS(read_ppm(dir / "b.ppm"), FormatError);
  std::ofstream(dir / "c.ppm", std::ios::binary) << "P6\n4 4\n255\nabc";
  CHECK_THROWS_AS(read_ppm(dir / "c.ppm"), FormatError);
  write_pgm(dir / "g.pgm", 2, 2, {0, 64, 128, 255});
  CHECK(fs::file_size(dir / "g.pgm") == std::string("P5\n2 2\n255\n").size() + 4);
  fs::remove_all(dir);
}

TEST_CASE("label splits") {
  std::vector<std::string> c21;
  for (int i = 0; i < 21; ++i) c21.push_back("c" + std::to_string(i));
  const auto s21 = gen_splits(c21, 4, 0.25, 7);
  REQUIRE(s21.size() == 4);
  for (const auto& s : s21) {
    CHECK(s.unseen.size() == 6);
    CHECK(s.seen.size() == 15);
  }

  const std::vector<std::string> c8(c21.begin(), c21.begin() + 8);
  const auto two = gen_splits(c8, 2, 0.25, 3);
  std::set<std::string> u0(two[0].unseen.begin(), two[0].unseen.end());
  CHECK(u0.size() == 2);
  for (const auto& u : two[1].unseen) CHECK(u0.count(u) == 0);

  // Window positions 0,2,4,6 over 8 shuffled classes tile the list exactly.
  const auto four = gen_splits(c8, 4, 0.25, 3);
  std::set<std::string> all;
  for (const auto& s : four) all.insert(s.unseen.begin(), s.unseen.end());
  CHECK(all.size() == 8);

  // With 21 classes, windows 0..5, 6..11, 12..17 and 18..23 (mod 21): only
  // the last wraps into the first.
  auto overlap = [](const LabelSplit& a, const LabelSplit& b) {
    std::size_t n = 0;
    for (const auto& u : a.unseen) n += std::count(b.unseen.begin(), b.unseen.end(), u);
    return n;
  };
  CHECK(overlap(s21[3], s21[0]) == 3);
  CHECK(overlap(s21[0], s21[1]) == 0);
  CHECK(overlap(s21[1], s21[2]) == 0);
  CHECK(overlap(s21[2], s21[3]) == 0);
  CHECK(overlap(s21[1], s21[3]) == 0);

  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& s : gen_splits(motion_classes(), 4, 0.25, seed)) {
      std::set<std::string> seen(s.seen.begin(), s.seen.end());
      for (const auto& u : s.unseen) CHECK(seen.count(u) == 0);
      CHECK(s.seen.size() + s.unseen.size() == 12);
    }
  CHECK(gen_splits(c21, 4, 0.25, 7)[2].unseen == s21[2].unseen);

  CHECK_THROWS_AS(gen_splits(c8, 2, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(gen_splits(c8, 2, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(gen_splits(c8, 0, 0.25, 1), ConfigError);
  const std::vector<std::string> one{"a"};
  CHECK_THROWS_AS(gen_splits(one, 1, 0.5, 1), ConfigError);

  const auto dir = scratch_dir("split");
  write_split(dir / "s.json", s21[1]);
  const auto back = read_split(dir / "s.json");
  CHECK(back.split_id == s21[1].split_id);
  CHECK(back.seen == s21[1].seen);
  CHECK(back.unseen == s21[1].unseen);
  fs::remove_all(dir);
}

TEST_CASE("clip positions") {
  CHECK(clip_positions(5, 10, 1, 3) == std::vector<std::size_t>{5});
  CHECK(clip_positions(4, 8, 4, 2) == std::vector<std::size_t>{1, 3, 5, 7});
  CHECK(clip_positions(0, 8, 4, 1) == std::vector<std::size_t>{0, 0, 0, 1});
  CHECK(clip_positions(7, 8, 4, 1) == std::vector<std::size_t>{5, 6, 7, 7});
  CHECK(clip_positions(3, 8, 3, 2) == std::vector<std::size_t>{1, 3, 5});
  for (std::size_t t = 1; t <= 6; ++t)
    for (std::size_t k = 0; k < 5; ++k) {
      const auto p = clip_positions(k, 5, t, 2);
      CHECK(p.size() == t);
      CHECK(std::is_sorted(p.begin(), p.end()));
    }
  CHECK_THROWS_AS(clip_positions(0, 8, 0, 1), ConfigError);
}

TEST_CASE("sample_clip") {
  SynthConfig c;
  c.num_videos = 1;
  auto v = synth_generate(c, 8)[0];
  ClipStats stats;
  const auto clip = sample_clip(v, 0, 4, 1, {}, &stats);
  REQUIRE(clip.has_value());
  CHECK(clip->frames.size() == 4);
  CHECK(clip->frames[0] == load_frame(v, 0));
  CHECK(clip->boxes.size() == 1);
  CHECK(clip->labels[0] == v.frames[0].persons[0].labels);
  const auto single = sample_clip(v, 3, 1, 1);
  CHECK(single->frames.size() == 1);
  CHECK(single->frame_positions == std::vector<std::size_t>{3});

  v.frames[2].persons.clear();
  CHECK_FALSE(sample_clip(v, 2, 4, 1, {}, &stats).has_value());
  CHECK(stats.sampled == 1);
  CHECK(stats.skipped_no_boxes == 1);
}

TEST_CASE("crop_person") {
  Image frame(32, 32);
  RngStream rng(4, 0);
  for (auto& b : frame.rgb) b = static_cast<std::uint8_t>(rng.below(256));
  const Tensor full = crop_person(frame, {0, 0, 32, 32}, 32);
  const Tensor direct = image_to_tensor(frame);
  for (std::size_t i = 0; i < full.numel(); ++i) CHECK(full.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-6));

  Image flat(16, 16);
  for (std::size_t i = 0; i < flat.rgb.size(); ++i) flat.rgb[i] = i % 3 == 0 ? 200 : 40;
  const Tensor c = crop_person(flat, {2.3f, 4.1f, 9.7f, 13.2f}, 7);
  for (std::size_t i = 0; i < c.numel(); ++i)
    CHECK(c.data()[i] == doctest::Approx(i % 3 == 0 ? 200 / 127.5 - 1 : 40 / 127.5 - 1).epsilon(1e-6));

  // 2x2 checkerboard to 4x4: sample positions per axis are −0.25, 0.25, 0.75
  // and 1.25, clamped to [0, 1].
  Image board(2, 2);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    board.at(1, 0, ch) = 255;
    board.at(0, 1, ch) = 255;
  }
  const double expected[4][4] = {{0, 63.75, 191.25, 255},
                                 {63.75, 95.625, 159.375, 191.25},
                                 {191.25, 159.375, 95.625, 63.75},
                                 {255, 191.25, 63.75, 0}};
  const Tensor up = crop_person(board, {0, 0, 2, 2}, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      CHECK(up.data()[(y * 4 + x) * 3] == doctest::Approx(expected[y][x] / 127.5 - 1.0).epsilon(1e-6));

  CHECK_THROWS_AS(crop_person(frame, {40, 40, 50, 50}, 8), InputError);
  CHECK_THROWS_AS(crop_person(frame, {5, 5, 5, 9}, 8), InputError);
}

TEST_CASE("filter_detections") {
  const std::vector<ScoredBox> three{{{0, 0, 1, 1}, 0.9f}, {{0, 0, 2, 2}, 0.85f}, {{0, 0, 3, 3}, 0.1f}};
  CHECK(filter_detections(three, 0.7f) == std::vector<std::size_t>{0, 1});
  CHECK(filter_detections(three, 0.001f) == std::vector<std::size_t>{0});
  const std::vector<ScoredBox> one{{{0, 0, 1, 1}, 0.02f}};
  CHECK(filter_detections(one, 0.001f) == std::vector<std::size_t>{0});
  CHECK(filter_detections(std::span<const ScoredBox>{}, 0.5f).empty());

  RngStream rng(6, 0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ScoredBox> boxes(1 + rng.below(8));
    for (auto& b : boxes) b.score = static_cast<float>(rng.below(20)) / 20.0f;
    const float margin = rng.uniform(0.0f, 1.0f);
    const auto kept = filter_detections(boxes, margin);
    const float best = std::max_element(boxes.begin(), boxes.end(), [](auto& a, auto& b) {
                         return a.score < b.score;
                       })->score;
    std::multiset<float> kept_scores;
    for (auto i : kept) kept_scores.insert(boxes[i].score);
    CHECK(kept_scores.count(best) >= 1);
    auto rev = boxes;
    std::reverse(rev.begin(), rev.end());
    std::multiset<float> rev_scores;
    for (auto i : filter_detections(rev, margin)) rev_scores.insert(rev[i].score);
    CHECK(rev_scores == kept_scores);
  }
}

TEST_CASE("caption corpus") {
  CorpusConfig c;
  c.per_class = 3;
  const auto corpus = caption_corpus(c, 2);
  REQUIRE(corpus.size() == 36);
  const Vocabulary v = Vocabulary::build(caption_vocabulary_texts(motion_classes()));
  std::set<std::string> groups;
  for (const auto& item : corpus) {
    CHECK(v.fully_known(item.caption));
    CHECK(item.image.shape() == Shape{32, 32, 3});
    CHECK(item.caption.find(class_prompt(item.group)) != std::string::npos);
    groups.insert(item.group);
  }
  CHECK(groups.size() == 12);
  for (const auto& name : motion_classes()) CHECK(v.fully_known(class_prompt(name)));
  const auto again = caption_corpus(c, 2);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(again[i].caption == corpus[i].caption);
    CHECK(std::equal(again[i].image.data().begin(), again[i].image.data().end(), corpus[i].image.data().begin()));
  }
}
