#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "stclip/checkpoint.hpp"
#include "stclip/encoders.hpp"
#include "stclip/errors.hpp"
#include "support.hpp"

using namespace stclip;
using stclip::testing::bit_equal;
using stclip::testing::max_abs_diff;
using stclip::testing::random_tensor;

namespace {

EncoderConfigs small_configs() {
  EncoderConfigs c;
  c.image = {16, 8, 16, 2, 2, 12};
  c.text = {8, 16, 2, 2, 12};
  return c;
}

Vocabulary small_vocab() {
  const std::vector<std::string> texts{"a red square moving right", "a blue circle that is bouncing",
                                       "grow", "shrink"};
  return Vocabulary::build(texts);
}

ParamStore small_store(std::uint64_t seed = 3) {
  ParamStore s;
  init_clip(s, small_configs(), small_vocab(), seed);
  return s;
}

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t j = 0; j < t.cols(); ++j) s += double(t.at(r, j)) * t.at(r, j);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("tokenizer and vocabulary") {
  CHECK(tokenize_words("Move-Right, NOW!") == std::vector<std::string>{"move", "right", "now"});
  CHECK(tokenize_words("  ").empty());

  const Vocabulary v = small_vocab();
  CHECK(v.words()[Vocabulary::kPad] == "<pad>");
  CHECK(v.words()[Vocabulary::kEos] == "<eos>");
  CHECK(v.fully_known("Red circle"));
  CHECK_FALSE(v.fully_known("purple circle"));
  const auto ids = v.encode("red purple");
  REQUIRE(ids.size() == 4);
  CHECK(ids.front() == Vocabulary::kBos);
  CHECK(ids[2] == Vocabulary::kUnk);
  CHECK(ids.back() == Vocabulary::kEos);

  const Vocabulary back = Vocabulary::deserialize(v.serialize());
  CHECK(back.words() == v.words());
}

TEST_CASE("config validation") {
  ImageEncoderConfig ic;
  ic.image_size = 30;
  CHECK_THROWS_AS(ic.validate(), ConfigError);
  ic = {};
  ic.heads = 3;
  CHECK_THROWS_AS(ic.validate(), ConfigError);
  TextEncoderConfig tc;
  tc.context_length = 1;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("meta entries reproduce the configuration and vocabulary") {
  const auto s = small_store();
  const auto c = read_configs(s);
  CHECK(c.image.image_size == 16);
  CHECK(c.image.joint_dim == 12);
  CHECK(c.text.context_length == 8);
  CHECK(read_vocabulary(s).words() == small_vocab().words());
  CHECK(s.frozen("meta.image.width"));
}

TEST_CASE("encode_image contracts") {
  const auto s = small_store();
  const auto cfg = small_configs().image;
  RngStream rng(11, 0);
  for (int i = 0; i < 5; ++i) {
    const Tensor img = random_tensor(rng, {16, 16, 3});
    const auto a = encode_image(img, s, cfg);
    const auto b = encode_image(img, s, cfg);
    CHECK(a.cls_feature.shape() == Shape{1, 16});
    CHECK(a.projected_feature.shape() == Shape{1, 12});
    CHECK(std::abs(row_norm(a.projected_feature, 0) - 1.0) < 1e-5);
    CHECK(bit_equal(a.projected_feature.data(), b.projected_feature.data()));
  }
  CHECK_THROWS_AS(encode_image(Tensor::zeros({8, 16, 3}), s, cfg), DimensionError);
}

TEST_CASE("encode_image with no layers returns the cls token plus its position") {
  auto c = small_configs();
  c.image.layers = 0;
  ParamStore s;
  init_clip(s, c, small_vocab(), 5);
  RngStream rng(12, 0);
  const auto f = encode_image(random_tensor(rng, {16, 16, 3}), s, c.image);
  const auto cls = s.get("img.cls").data();
  const auto pos = s.get("img.pos").data();
  for (std::size_t j = 0; j < 16; ++j) CHECK(f.cls_feature.at(0, j) == cls[j] + pos[j]);
}

TEST_CASE("encode_image depends on patch positions") {
  const auto s = small_store();
  const auto cfg = small_configs().image;
  RngStream rng(13, 0);
  const Tensor img = random_tensor(rng, {16, 16, 3});
  // Swap the top-left and bottom-right 8x8 patches.
  std::vector<float> swapped(img.data().begin(), img.data().end());
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        std::swap(swapped[(y * 16 + x) * 3 + c], swapped[((y + 8) * 16 + x + 8) * 3 + c]);
  const auto a = encode_image(img, s, cfg).projected_feature;
  const auto b = encode_image(Tensor({16, 16, 3}, swapped), s, cfg).projected_feature;
  CHECK(max_abs_diff(a.data(), b.data()) > 1e-4);
}

TEST_CASE("batched image encoding matches single images") {
  const auto s = small_store();
  const auto cfg = small_configs().image;
  RngStream rng(14, 0);
  const std::vector<Tensor> imgs{random_tensor(rng, {16, 16, 3}), random_tensor(rng, {16, 16, 3}),
                                 random_tensor(rng, {16, 16, 3})};
  const auto batch = encode_images(imgs, s, cfg).projected_feature;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto one = encode_image(imgs[i], s, cfg).projected_feature;
    for (std::size_t j = 0; j < 12; ++j) CHECK(batch.at(i, j) == doctest::Approx(one.at(0, j)).epsilon(1e-6));
  }
}

TEST_CASE("encode_text contracts") {
  const auto s = small_store();
  const auto cfg = small_configs().text;
  const Vocabulary v = small_vocab();
  const std::vector<std::string> names{"grow", "red square", "grow", "blue circle that is bouncing"};
  const Tensor t = encode_text(names, s, v, cfg);
  REQUIRE(t.shape() == Shape{4, 12});
  for (std::size_t r = 0; r < 4; ++r) CHECK(std::abs(row_norm(t, r) - 1.0) < 1e-5);
  for (std::size_t j = 0; j < 12; ++j) CHECK(t.at(0, j) == t.at(2, j));

  // Permuting names permutes rows; each row is independent of its batch.
  const std::vector<std::string> perm{names[3], names[1], names[0]};
  const Tensor p = encode_text(perm, s, v, cfg);
  const std::size_t src[] = {3, 1, 0};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 12; ++j) CHECK(p.at(r, j) == doctest::Approx(t.at(src[r], j)).epsilon(1e-6));
  for (std::size_t r = 0; r < 4; ++r) {
    const Tensor one = encode_text(std::span(&names[r], 1), s, v, cfg);
    for (std::size_t j = 0; j < 12; ++j) CHECK(one.at(0, j) == doctest::Approx(t.at(r, j)).epsilon(1e-6));
  }

  const std::vector<std::string> too_long{"a red square moving right a blue circle"};
  try {
    encode_text(too_long, s, v, cfg);
    FAIL("expected an input error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find(too_long[0]) != std::string::npos);
  }
}

TEST_CASE("symmetric cross-entropy") {
  std::vector<float> v(9, -50.0f);
  for (int i = 0; i < 3; ++i) v[i * 4] = 50.0f;
  CHECK(symmetric_cross_entropy(Tensor({3, 3}, v)).item() < 1e-6);
  CHECK(symmetric_cross_entropy(Tensor::zeros({4, 4})).item() == doctest::Approx(std::log(4.0)));
  CHECK_THROWS_AS(symmetric_cross_entropy(Tensor::zeros({2, 3})), DimensionError);

  // Naive double-precision oracle.
  RngStream rng(21, 0);
  const Tensor l = random_tensor(rng, {5, 5}, -3.0f, 3.0f);
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double zr = 0.0, zc = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      zr += std::exp(double(l.at(i, j)));
      zc += std::exp(double(l.at(j, i)));
    }
    total += (std::log(zr) - l.at(i, i)) + (std::log(zc) - l.at(i, i));
  }
  CHECK(symmetric_cross_entropy(l).item() == doctest::Approx(total / 10.0).epsilon(1e-5));
}

TEST_CASE("contrastive pretraining rejects degenerate batches and learns a toy corpus") {
  const auto cfg = small_configs();
  std::vector<CaptionedImage> corpus;
  const char* colors[] = {"red", "blue", "green", "white"};
  const float rgb[4][3] = {{1, -1, -1}, {-1, -1, 1}, {-1, 1, -1}, {1, 1, 1}};
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < 3; ++k) {
      std::vector<float> px(16 * 16 * 3);
      for (std::size_t i = 0; i < px.size(); ++i) px[i] = rgb[c][i % 3] * (0.6f + 0.1f * k);
      corpus.push_back({Tensor({16, 16, 3}, px), std::string("a ") + colors[c] + " image", colors[c]});
    }
  std::vector<std::string> captions;
  for (const auto& c : corpus) captions.push_back(c.caption);
  const Vocabulary v = Vocabulary::build(captions);

  PretrainConfig h;
  h.batch_size = 1;
  CHECK_THROWS_AS(contrastive_pretrain(corpus, cfg, v, h), ConfigError);
  h.batch_size = 5;
  CHECK_THROWS_AS(contrastive_pretrain(corpus, cfg, v, h), ConfigError);

  h.batch_size = 4;
  h.steps = 60;
  h.warmup_steps = 10;
  h.lr = 3e-3;
  std::vector<PretrainLogEntry> log;
  const ParamStore s = contrastive_pretrain(corpus, cfg, v, h, &log);
  REQUIRE(log.size() == 60);
  CHECK(log.back().loss < 0.5 * log.front().loss);
  const std::vector<CaptionedImage> probe{corpus[0], corpus[3], corpus[6], corpus[9]};
  CHECK(alignment_stats(probe, s, v, cfg).margin() > 0.2);

  // Identical seeds give identical weights.
  const ParamStore again = contrastive_pretrain(corpus, cfg, v, h);
  CHECK(serialize_checkpoint(s) == serialize_checkpoint(again));
}

TEST_CASE("checkpoint round trip") {
  ParamStore s = small_store();
  s.add("det.extra", Tensor::scalar(2.5f));
  const auto bytes = serialize_checkpoint(s);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back.warnings.empty());
  REQUIRE(back.store.size() == s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& a = s.entries()[i];
    const auto& b = back.store.entries()[i];
    CHECK(a.name == b.name);
    CHECK(a.value.shape() == b.value.shape());
    CHECK(checksum(a.value) == checksum(b.value));
  }
  CHECK(serialize_checkpoint(back.store) == bytes);

  const auto path = std::filesystem::temp_directory_path() / "stclip_test_roundtrip.stck";
  save_checkpoint(s, path);
  CHECK(serialize_checkpoint(load_checkpoint(path).store) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), InputError);
}

TEST_CASE("checkpoint corruption is reported with an offset") {
  ParamStore s;
  s.add("img.a", Tensor::matrix({{1, 2}, {3, 4}}));
  s.add("txt.b", Tensor::vector({5}));
  const auto bytes = serialize_checkpoint(s);

  for (std::size_t n = 0; n < bytes.size(); ++n) {
    const std::span<const std::uint8_t> cut(bytes.data(), n);
    CHECK_THROWS_AS(deserialize_checkpoint(cut), FormatError);
  }

  auto bad = bytes;
  bad[0] = 'X';
  try {
    deserialize_checkpoint(bad);
    FAIL("bad magic accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  bad = bytes;
  bad[4] = 9;
  try {
    deserialize_checkpoint(bad);
    FAIL("bad version accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 4);
  }
  bad = bytes;
  bad[bytes.size() - 6] ^= 0x40;  // inside the last payload
  try {
    deserialize_checkpoint(bad);
    FAIL("payload corruption accepted");
  } catch (const FormatError& e) {
    CHECK(e.offset() == bytes.size() - 4);
  }
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
}

TEST_CASE("checkpoint keeps unknown tensors with a warning") {
  ParamStore s;
  s.add("img.a", Tensor::vector({1}));
  s.add("future.thing", Tensor::vector({2, 3}));
  const auto loaded = deserialize_checkpoint(serialize_checkpoint(s));
  REQUIRE(loaded.warnings.size() == 1);
  CHECK(loaded.warnings[0].find("future.thing") != std::string::npos);
  CHECK(loaded.store.contains("future.thing"));
}
