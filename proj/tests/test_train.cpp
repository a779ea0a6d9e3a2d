#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "stclip/checkpoint.hpp"
#include "stclip/errors.hpp"
#include "stclip/grad_check.hpp"
#include "stclip/train.hpp"
#include "support.hpp"
#include "tiny_model.hpp"

using namespace stclip;
using stclip::testing::head_split;
using stclip::testing::random_tensor;
using stclip::testing::tiny_pretrained;
using stclip::testing::tiny_train_config;
using stclip::testing::tiny_videos;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("stclip_train_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

double oracle_cross_entropy(const Tensor& logits, const std::vector<std::vector<std::size_t>>& t) {
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double m = -1e300;
    for (std::size_t c = 0; c < n; ++c) m = std::max(m, static_cast<double>(logits.at(i, c)));
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += std::exp(logits.at(i, c) - m);
    total -= logits.at(i, t[i][0]) - m - std::log(z);
  }
  return total / static_cast<double>(b);
}

double oracle_bce(const Tensor& logits, const std::vector<std::vector<std::size_t>>& t) {
  const std::size_t b = logits.dim(0), n = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t c = 0; c < n; ++c) {
      const double x = logits.at(i, c);
      const double y = std::find(t[i].begin(), t[i].end(), c) != t[i].end() ? 1.0 : 0.0;
      const double p = 1.0 / (1.0 + std::exp(-x));
      total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    }
  return total / static_cast<double>(b * n);
}

}  // namespace

TEST_CASE("warmup schedule") {
  TrainConfig c;
  c.base_lr = 2.5e-4;
  c.warmup_iters = 800;
  c.warmup_factor = 0.25;
  c.iterations = 3000;
  CHECK(lr_at(0, c) == 6.25e-5);
  CHECK(lr_at(0, c) == 0.25 * c.base_lr);
  CHECK(lr_at(800, c) == c.base_lr);
  CHECK(lr_at(2999, c) == c.base_lr);
  CHECK(lr_at(400, c) == doctest::Approx(0.5 * (6.25e-5 + 2.5e-4)).epsilon(1e-12));
  double prev = 0.0;
  for (std::size_t i = 0; i <= 800; ++i) {
    CHECK(lr_at(i, c) >= prev);
    prev = lr_at(i, c);
  }
  c.warmup_iters = 0;
  CHECK(lr_at(0, c) == c.base_lr);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.warmup_iters = c.iterations + 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.base_lr = -1e-3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup_factor = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.k_interest = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d;
  d.iterations = 12;
  d.mode = LabelMode::Multi;
  d.toggles.its = false;
  d.toggles.temporal = false;
  d.seed = 77;
  const nlohmann::json j = d;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.mode == LabelMode::Multi);
  CHECK_FALSE(back.toggles.its);
  CHECK(back.detector().interest_tokens == false);
  CHECK(back.detector().temporal_mhsa == false);

  CHECK(nlohmann::json::parse(R"({"iterations": 5})").get<TrainConfig>().iterations == 5);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"iters": 5})").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"mode": "both"})").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"toggles": {"lora": true}})").get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"base_lr": "fast"})").get<TrainConfig>(), ConfigError);
}

TEST_CASE("freeze mask partitions every parameter") {
  ParamStore s = tiny_pretrained();
  init_detector(s, tiny_train_config().detector(), 1);
  FreezeMask::apply(s);
  std::set<std::string> trainable_modules;
  for (const auto& e : s.entries()) {
    CHECK(s.frozen(e.name) == FreezeMask::frozen(e.name));
    CHECK(e.frozen == !e.name.starts_with("det."));
    if (!e.frozen) {
      const auto second = e.name.find('.', 4);
      trainable_modules.insert(e.name.substr(4, second - 4));
    }
  }
  CHECK(trainable_modules == std::set<std::string>{"temporal", "adapter", "person_slot", "lora", "prompt"});
  for (const char* n : {"det.temporal.e_temp", "det.prompt.l1.rho", "det.prompt.l1.ca.q.w", "det.prompt.l1.ffn.fc1.w",
                        "det.prompt.l1.proj.w", "det.lora.l0.fc1.a", "det.lora.l0.fc2.b", "det.adapter.ffn.fc2.w"}) {
    INFO(n);
    REQUIRE(s.contains(n));
    CHECK_FALSE(s.frozen(n));
  }
  CHECK(FreezeMask::frozen("img.layer0.attn.q.w"));
  CHECK(FreezeMask::frozen("txt.token_embedding"));
  CHECK(FreezeMask::frozen("clip.logit_scale"));
  CHECK(FreezeMask::frozen("meta.det.k_interest"));
  CHECK_THROWS_AS(FreezeMask::frozen("extra.weight"), InputError);
}

TEST_CASE("detection losses") {
  const Tensor confident = Tensor::matrix({{20.0f, 0.0f, 0.0f}, {0.0f, 0.0f, 30.0f}});
  const std::vector<std::vector<std::size_t>> single{{0}, {2}};
  CHECK(detection_loss(confident, single, LabelMode::Single).item() < 1e-3f);

  const Tensor half = Tensor::zeros({3, 4});
  const std::vector<std::vector<std::size_t>> multi{{0, 2}, {}, {3}};
  CHECK(detection_loss(half, multi, LabelMode::Multi).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  RngStream rng(3, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.below(4), n = 2 + rng.below(5);
    const Tensor logits = random_tensor(rng, {b, n}, -8.0f, 8.0f);
    std::vector<std::vector<std::size_t>> one(b), many(b);
    for (std::size_t i = 0; i < b; ++i) {
      one[i] = {rng.below(n)};
      for (std::size_t c = 0; c < n; ++c)
        if (rng.below(3) == 0) many[i].push_back(c);
    }
    CHECK(detection_loss(logits, one, LabelMode::Single).item() ==
          doctest::Approx(oracle_cross_entropy(logits, one)).epsilon(1e-5));
    CHECK(detection_loss(logits, many, LabelMode::Multi).item() ==
          doctest::Approx(oracle_bce(logits, many)).epsilon(1e-5));
  }

  const std::vector<std::vector<std::size_t>> outside{{0}, {3}};
  CHECK_THROWS_AS(detection_loss(confident, outside, LabelMode::Single), InputError);
  CHECK_THROWS_AS(detection_loss(confident, outside, LabelMode::Multi), InputError);
  const std::vector<std::vector<std::size_t>> two_targets{{0, 1}, {2}};
  CHECK_THROWS_AS(detection_loss(confident, two_targets, LabelMode::Single), InputError);
  const std::vector<std::vector<std::size_t>> no_target{{}, {2}};
  CHECK_THROWS_AS(detection_loss(confident, no_target, LabelMode::Single), InputError);
  CHECK_NOTHROW(detection_loss(confident, two_targets, LabelMode::Multi));
  CHECK_THROWS_AS(detection_loss(confident, std::vector<std::vector<std::size_t>>{{0}}, LabelMode::Single),
                  DimensionError);
  CHECK_THROWS_AS(detection_loss(Tensor::vector({1, 2}), single, LabelMode::Single), DimensionError);
}

TEST_CASE("loss gradients through the detector reach rho and LoRA") {
  for (LabelMode mode : {LabelMode::Single, LabelMode::Multi})
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
      RngStream rng(41, trial + (mode == LabelMode::Multi ? 100 : 0));
      TrainConfig c = tiny_train_config();
      c.toggles.prompting_every_layer = rng.below(2) == 0;
      c.k_interest = 1 + rng.below(4);
      ParamStore s = tiny_pretrained(trial);
      init_detector(s, c.detector(), trial);
      // Move off the zero init so every factor has a nonzero gradient.
      std::vector<std::string> det;
      for (const auto& e : s.entries())
        if (e.name.starts_with("det.")) det.push_back(e.name);
      for (const auto& n : det) s.set(n, random_tensor(rng, s.get(n).shape(), -0.3f, 0.3f));
      FreezeMask::apply(s);
      const auto& enc = stclip::testing::tiny_encoders();
      const std::size_t b = 1 + rng.below(2), labels_n = 3;
      const ClipFeatures f{random_tensor(rng, {b, enc.image.width}),
                           random_tensor(rng, {c.t_frames, enc.image.num_patches(), enc.image.width})};
      const Tensor labels = l2_normalize_rows(random_tensor(rng, {labels_n, enc.text.joint_dim}));
      std::vector<std::vector<std::size_t>> targets(b);
      for (auto& t : targets) t = {rng.below(labels_n)};
      const DetectorConfig d = c.detector();
      auto loss = [&](const ParamStore& p) {
        const InteractionOutput out = detector_forward(f, labels, p, d);
        // A softer temperature keeps the finite differences well conditioned.
        return detection_loss(classify(out.person_out, out.label_out, 0.1f, mode).logits, targets, mode);
      };
      // Restrict the check to rho and the LoRA factors.
      ParamStore focus = s;
      for (const auto& e : s.entries())
        focus.set_frozen(e.name, !(e.name.ends_with(".rho") || e.name.starts_with("det.lora.")));
      const auto rep = grad_check(loss, focus, 1e-3);
      INFO("trial " << trial);
      CHECK(rep.params.size() >= 5);
      CHECK(rep.max_rel_error() < 1e-3);
    }
}

TEST_CASE("one step at zero learning rate leaves the store unchanged") {
  const ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(4, 2);
  TrainConfig c = tiny_train_config();
  c.iterations = 1;
  c.warmup_iters = 0;
  c.base_lr = 0.0;
  const TrainResult r = train_detection(pre, videos, head_split(3), c);
  ParamStore init = pre;
  init_detector(init, c.detector(), c.seed);
  init.add(kLabelModeEntry, Tensor::scalar(0.0f), true);
  CHECK(serialize_checkpoint(r.store) == serialize_checkpoint(init));
  CHECK(read_label_mode(r.store) == LabelMode::Single);
  CHECK(read_label_mode(pre) == LabelMode::Single);
  REQUIRE(r.log.size() == 1);
  CHECK(r.log[0].lr == 0.0);
  CHECK(std::isfinite(r.log[0].loss));
}

TEST_CASE("training keeps frozen tensors and is reproducible") {
  const ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(6, 4);
  TrainConfig c = tiny_train_config();
  c.iterations = 4;
  const TrainResult a = train_detection(pre, videos, head_split(3), c);
  for (const auto& e : pre.entries()) {
    INFO(e.name);
    CHECK(checksum(a.store.get(e.name)) == checksum(e.value));
  }
  bool moved = false;
  ParamStore init = pre;
  init_detector(init, c.detector(), c.seed);
  for (const auto& e : init.entries())
    if (e.name.starts_with("det.") && checksum(a.store.get(e.name)) != checksum(e.value)) moved = true;
  CHECK(moved);

  TrainOptions threaded;
  threaded.threads = 3;
  const TrainResult b = train_detection(pre, videos, head_split(3), c, threaded);
  CHECK(serialize_checkpoint(a.store) == serialize_checkpoint(b.store));
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].loss == b.log[i].loss);

  c.seed = 1;
  const TrainResult other = train_detection(pre, videos, head_split(3), c);
  CHECK(serialize_checkpoint(a.store) != serialize_checkpoint(other.store));
}

TEST_CASE("training loss falls on a small problem") {
  const ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(8, 6);
  TrainConfig c = tiny_train_config();
  c.iterations = 40;
  c.batch_size = 4;
  c.warmup_iters = 5;
  c.base_lr = 2e-3;
  const TrainResult r = train_detection(pre, videos, head_split(3), c);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    head += r.log[i].loss;
    tail += r.log[r.log.size() - 1 - i].loss;
  }
  CHECK(tail < 0.5 * head);
}

TEST_CASE("training samples exclude unseen actions") {
  ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(12, 8, 2);
  const LabelSplit split = head_split(3);
  const std::set<std::string> unseen(split.unseen.begin(), split.unseen.end());
  std::size_t expected = 0;
  for (const auto& v : videos)
    for (const auto& f : v.frames) {
      bool ok = true;
      for (const auto& p : f.persons) ok = ok && !unseen.count(p.labels[0]);
      expected += ok;
    }
  const TrainConfig c = tiny_train_config();
  const auto samples = build_train_samples(pre, videos, split, c);
  CHECK(samples.size() == expected);
  CHECK(expected < 12 * 3);
  for (const auto& s : samples) {
    CHECK(s.targets.size() == s.features.persons.dim(0));
    for (const auto& t : s.targets) {
      REQUIRE(t.size() == 1);
      CHECK(t[0] < split.seen.size());
    }
  }
}

TEST_CASE("training errors") {
  const ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(3, 2);
  const TrainConfig c = tiny_train_config();
  LabelSplit none{"none", {}, motion_classes()};
  CHECK_THROWS_AS(train_detection(pre, videos, none, c), ConfigError);

  // Every video shows a class outside the seen set.
  LabelSplit missing{"missing", {"not-a-class"}, {}};
  for (const auto& v : videos) missing.unseen.push_back(v.frames[0].persons[0].labels[0]);
  CHECK_THROWS_AS(train_detection(pre, videos, missing, c), ConfigError);

  ParamStore has_det = pre;
  init_detector(has_det, c.detector(), 0);
  CHECK_THROWS_AS(train_detection(has_det, videos, head_split(3), c), ConfigError);

  TrainConfig bad = c;
  bad.warmup_iters = 10;
  CHECK_THROWS_AS(train_detection(pre, videos, head_split(3), bad), ConfigError);
}

TEST_CASE("metrics log and checkpoints") {
  const ParamStore pre = tiny_pretrained();
  const auto videos = tiny_videos(4, 2);
  TrainConfig c = tiny_train_config();
  c.iterations = 4;
  c.checkpoint_every = 2;
  TrainOptions o;
  o.out_dir = scratch_dir("metrics");
  std::size_t callbacks = 0;
  o.on_iter = [&](const TrainLogEntry& e) { CHECK(e.iter == ++callbacks); };
  const TrainResult r = train_detection(pre, videos, head_split(3), c, o);
  CHECK(callbacks == 4);

  std::ifstream in(*o.out_dir / "metrics.jsonl");
  std::string line;
  std::size_t n = 0;
  double prev_ms = -1.0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("iter").get<std::size_t>() == ++n);
    CHECK(j.at("loss").get<double>() == doctest::Approx(r.log[n - 1].loss));
    CHECK(j.at("lr").get<double>() == lr_at(n - 1, c));
    CHECK(j.at("wall_ms").get<double>() >= prev_ms);
    prev_ms = j.at("wall_ms").get<double>();
  }
  CHECK(n == 4);
  CHECK(std::filesystem::exists(*o.out_dir / "ckpt_000002.stck"));
  CHECK(std::filesystem::exists(*o.out_dir / "ckpt_000004.stck"));
  CHECK_FALSE(std::filesystem::exists(*o.out_dir / "ckpt_000003.stck"));
  const auto final_ckpt = load_checkpoint(*o.out_dir / "final.stck");
  CHECK(serialize_checkpoint(final_ckpt.store) == serialize_checkpoint(r.store));
  std::filesystem::remove_all(*o.out_dir);
}
