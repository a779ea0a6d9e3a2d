#include "stclip/cli.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "stclip/checkpoint.hpp"
#include "stclip/errors.hpp"
#include "stclip/eval.hpp"
#include "stclip/parallel.hpp"
#include "stclip/train.hpp"

namespace stclip::cli {

using nlohmann::json;
namespace fs = std::filesystem;

std::string git_blob_sha1(std::span<const unsigned char> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) && EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw NumericError("SHA-1 digest failed");
  char hex[2 * EVP_MAX_MD_SIZE + 1];
  for (unsigned i = 0; i < len; ++i) std::snprintf(hex + 2 * i, 3, "%02x", digest[i]);
  return hex;
}

std::string git_blob_sha1_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return git_blob_sha1(bytes);
}

namespace {

class CliError : public Error {
 public:
  CliError(std::string code, const std::string& m) : Error(std::move(code), m) {}
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::is_regular_file(path)) throw CliError("CONFIG_NOT_FOUND", "config file '" + path + "' does not exist");
  std::ifstream in(path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ConfigError("config '" + path + "' is not a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw CliError("USAGE", "--" + what + " is required");
  if (!fs::is_regular_file(path)) throw InputError(what + " file '" + path + "' does not exist");
}

// Records what a command read and wrote so the run can be repeated.
class RunManifest {
 public:
  RunManifest(std::string command, std::span<const std::string> args) : command_(std::move(command)) {
    args_.assign(args.begin(), args.end());
  }
  void input(const std::string& role, const fs::path& path) {
    inputs_.push_back({{"role", role}, {"path", path.string()}, {"sha1", git_blob_sha1_file(path)}});
  }
  void output(const fs::path& path) { outputs_.push_back(path); }
  void write(const fs::path& out_dir, const json& resolved, std::uint64_t seed, std::size_t threads) const {
    json outs = json::array();
    for (const auto& p : outputs_)
      outs.push_back({{"path", fs::relative(p, out_dir).generic_string()}, {"sha1", git_blob_sha1_file(p)}});
    const json j{{"command", command_}, {"args", args_},     {"config", resolved}, {"seed", seed},
                 {"threads", threads},  {"inputs", inputs_}, {"outputs", outs}};
    std::ofstream(out_dir / "run_manifest.json") << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  json inputs_ = json::array();
  std::vector<fs::path> outputs_;
};

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw CliError("USAGE", "--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

void add_common(CLI::App* sub, Common& c, bool with_config = true) {
  if (with_config) sub->add_option("--config", c.config, "JSON config file");
  sub->add_option("--seed", c.seed, "Random seed (overrides the config)");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--threads", c.threads, "Worker threads (default: STCLIP_THREADS, else all cores)");
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  Common common;
};

int cmd_pretrain(const PretrainArgs& a, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(a.common.config);
  if (!a.common.config.empty()) rm.input("config", a.common.config);
  reject_unknown(cfg, {"image", "text", "pretrain", "corpus"}, "pretrain config");
  EncoderConfigs enc;
  PretrainConfig hyper;
  CorpusConfig corpus;
  if (cfg.contains("image")) {
    const json& j = cfg.at("image");
    reject_unknown(j, {"image_size", "patch_size", "width", "layers", "heads", "joint_dim"}, "image");
    read(j, "image_size", enc.image.image_size);
    read(j, "patch_size", enc.image.patch_size);
    read(j, "width", enc.image.width);
    read(j, "layers", enc.image.layers);
    read(j, "heads", enc.image.heads);
    read(j, "joint_dim", enc.image.joint_dim);
  }
  if (cfg.contains("text")) {
    const json& j = cfg.at("text");
    reject_unknown(j, {"context_length", "width", "layers", "heads", "joint_dim"}, "text");
    read(j, "context_length", enc.text.context_length);
    read(j, "width", enc.text.width);
    read(j, "layers", enc.text.layers);
    read(j, "heads", enc.text.heads);
    read(j, "joint_dim", enc.text.joint_dim);
  }
  if (cfg.contains("pretrain")) {
    const json& j = cfg.at("pretrain");
    reject_unknown(j, {"steps", "batch_size", "lr", "warmup_steps", "seed", "init_temperature", "max_logit_scale"},
                   "pretrain");
    read(j, "steps", hyper.steps);
    read(j, "batch_size", hyper.batch_size);
    read(j, "lr", hyper.lr);
    read(j, "warmup_steps", hyper.warmup_steps);
    read(j, "seed", hyper.seed);
    read(j, "init_temperature", hyper.init_temperature);
    read(j, "max_logit_scale", hyper.max_logit_scale);
  }
  if (cfg.contains("corpus")) {
    const json& j = cfg.at("corpus");
    reject_unknown(j, {"classes", "per_class"}, "corpus");
    read(j, "classes", corpus.classes);
    read(j, "per_class", corpus.per_class);
  }
  if (a.common.seed) hyper.seed = *a.common.seed;
  corpus.image_size = enc.image.image_size;

  const fs::path dir = prepare_out(a.common.out);
  const auto items = caption_corpus(corpus, hyper.seed);
  const Vocabulary vocab = Vocabulary::build(caption_vocabulary_texts(corpus.classes));
  std::vector<PretrainLogEntry> log;
  const ParamStore store = contrastive_pretrain(items, enc, vocab, hyper, &log);
  save_checkpoint(store, dir / "pretrained.stck");
  {
    std::ofstream f(dir / "pretrain_log.jsonl");
    for (const auto& e : log) f << json{{"step", e.step}, {"loss", e.loss}, {"logit_scale", e.logit_scale}}.dump() << '\n';
  }
  rm.output(dir / "pretrained.stck");
  rm.output(dir / "pretrain_log.jsonl");
  const json resolved{
      {"image",
       {{"image_size", enc.image.image_size}, {"patch_size", enc.image.patch_size}, {"width", enc.image.width},
        {"layers", enc.image.layers}, {"heads", enc.image.heads}, {"joint_dim", enc.image.joint_dim}}},
      {"text",
       {{"context_length", enc.text.context_length}, {"width", enc.text.width}, {"layers", enc.text.layers},
        {"heads", enc.text.heads}, {"joint_dim", enc.text.joint_dim}}},
      {"pretrain",
       {{"steps", hyper.steps}, {"batch_size", hyper.batch_size}, {"lr", hyper.lr},
        {"warmup_steps", hyper.warmup_steps}, {"seed", hyper.seed}, {"init_temperature", hyper.init_temperature},
        {"max_logit_scale", hyper.max_logit_scale}}},
      {"corpus", {{"classes", corpus.classes}, {"per_class", corpus.per_class}}}};
  rm.write(dir, resolved, hyper.seed, 1);
  out << "pretrained " << items.size() << " captioned images for " << hyper.steps << " steps, final loss "
      << (log.empty() ? 0.0 : log.back().loss) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(c.config);
  if (!c.config.empty()) rm.input("config", c.config);
  reject_unknown(cfg, {"num_videos", "frames_per_video", "actors_min", "actors_max", "classes", "image_size", "id_prefix", "seed"},
                 "synth config");
  SynthConfig s;
  std::uint64_t seed = 0;
  read(cfg, "num_videos", s.num_videos);
  read(cfg, "frames_per_video", s.frames_per_video);
  read(cfg, "actors_min", s.actors_min);
  read(cfg, "actors_max", s.actors_max);
  read(cfg, "classes", s.classes);
  read(cfg, "image_size", s.image_size);
  read(cfg, "id_prefix", s.id_prefix);
  read(cfg, "seed", seed);
  if (c.seed) seed = *c.seed;
  const fs::path dir = prepare_out(c.out);
  const auto videos = synth_generate(s, seed, dir);
  rm.output(dir / "manifests.jsonl");
  for (const auto& v : videos)
    for (const auto& f : v.frames) rm.output(dir / f.image);
  rm.write(dir,
           {{"num_videos", s.num_videos}, {"frames_per_video", s.frames_per_video}, {"actors_min", s.actors_min},
            {"actors_max", s.actors_max}, {"classes", s.classes}, {"image_size", s.image_size},
            {"id_prefix", s.id_prefix}, {"seed", seed}},
           seed, 1);
  out << "wrote " << videos.size() << " videos to " << (dir / "manifests.jsonl").string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SplitsArgs {
  Common common;
  std::string classes = "motion";
  std::size_t n = 1;
  double frac = 0.25;
};

std::vector<std::string> parse_classes(const std::string& arg) {
  if (arg == "motion") return motion_classes();
  if (!arg.empty() && arg.find_first_not_of("0123456789") == std::string::npos) {
    const std::size_t n = std::stoul(arg);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "class_%02zu", i);
      out.emplace_back(name);
    }
    return out;
  }
  std::vector<std::string> out;
  std::stringstream ss(arg);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  if (out.empty()) throw ConfigError("--classes names no classes");
  return out;
}

int cmd_splits(const SplitsArgs& a, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(a.common.config);
  if (!a.common.config.empty()) rm.input("config", a.common.config);
  reject_unknown(cfg, {}, "splits config");
  const std::uint64_t seed = a.common.seed.value_or(0);
  const auto classes = parse_classes(a.classes);
  const auto splits = gen_splits(classes, a.n, a.frac, seed);
  const fs::path dir = prepare_out(a.common.out);
  for (const auto& s : splits) {
    const fs::path p = dir / (s.split_id + ".json");
    write_split(p, s);
    rm.output(p);
  }
  rm.write(dir, {{"classes", classes}, {"n", a.n}, {"frac", a.frac}, {"seed", seed}}, seed, 1);
  out << "wrote " << splits.size() << " splits of " << classes.size() << " classes\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string pretrained, manifests, split;
};

int cmd_train(const TrainArgs& a, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(a.common.config);
  if (!a.common.config.empty()) rm.input("config", a.common.config);
  TrainConfig tc = cfg.get<TrainConfig>();
  if (a.common.seed) tc.seed = *a.common.seed;
  require_file(a.pretrained, "pretrained");
  require_file(a.manifests, "manifests");
  require_file(a.split, "split");
  rm.input("pretrained", a.pretrained);
  rm.input("manifests", a.manifests);
  rm.input("split", a.split);
  const auto loaded = load_checkpoint(a.pretrained);
  const auto videos = read_manifests(a.manifests);
  const LabelSplit split = read_split(a.split);
  const fs::path dir = prepare_out(a.common.out);
  TrainOptions opts;
  opts.base_dir = fs::path(a.manifests).parent_path();
  opts.out_dir = dir;
  opts.threads = resolve_threads(a.common.threads);
  const TrainResult r = train_detection(loaded.store, videos, split, tc, opts);
  rm.output(dir / "metrics.jsonl");
  if (tc.checkpoint_every > 0)
    for (std::size_t it = tc.checkpoint_every; it <= tc.iterations; it += tc.checkpoint_every) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06zu.stck", it);
      rm.output(dir / name);
    }
  rm.output(dir / "final.stck");
  rm.write(dir, json(tc), tc.seed, opts.threads);
  out << "trained on " << r.samples << " keyframes for " << tc.iterations << " iterations, loss "
      << r.log.front().loss << " -> " << r.log.back().loss << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint, manifests, split, results;
  std::string mode;    // empty: from the checkpoint
  std::string labels;  // all | unseen
  bool soft_vote = false;
  std::optional<float> detector_margin;
  std::optional<double> iou;
};

int cmd_eval(const EvalArgs& a, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(a.common.config);
  if (!a.common.config.empty()) rm.input("config", a.common.config);
  reject_unknown(cfg, {"mode", "labels", "soft_vote", "detector_margin", "iou_threshold", "stride"}, "eval config");
  std::string mode = "", labels = "all";
  bool soft = false;
  std::optional<float> margin;
  double iou_thresh = 0.5;
  std::size_t stride = 1;
  read(cfg, "mode", mode);
  read(cfg, "labels", labels);
  read(cfg, "soft_vote", soft);
  if (cfg.contains("detector_margin")) margin = cfg.at("detector_margin").get<float>();
  read(cfg, "iou_threshold", iou_thresh);
  read(cfg, "stride", stride);
  if (!a.mode.empty()) mode = a.mode;
  if (!a.labels.empty()) labels = a.labels;
  if (a.soft_vote) soft = true;
  if (a.detector_margin) margin = a.detector_margin;
  if (a.iou) iou_thresh = *a.iou;
  if (labels != "all" && labels != "unseen") throw ConfigError("labels must be \"all\" or \"unseen\"");
  if (!mode.empty() && mode != "single" && mode != "multi") throw ConfigError("mode must be \"single\" or \"multi\"");

  require_file(a.manifests, "manifests");
  require_file(a.split, "split");
  rm.input("manifests", a.manifests);
  rm.input("split", a.split);
  const auto videos = read_manifests(a.manifests);
  const LabelSplit split = read_split(a.split);
  const fs::path dir = prepare_out(a.common.out);
  const std::size_t threads = resolve_threads(a.common.threads);

  std::vector<DetectionResult> results;
  if (!a.results.empty()) {
    require_file(a.results, "results");
    rm.input("results", a.results);
    results = read_results(a.results);
  } else {
    require_file(a.checkpoint, "checkpoint");
    rm.input("checkpoint", a.checkpoint);
    const auto loaded = load_checkpoint(a.checkpoint);
    InferenceOptions io;
    io.mode = mode.empty() ? read_label_mode(loaded.store) : (mode == "multi" ? LabelMode::Multi : LabelMode::Single);
    mode = io.mode == LabelMode::Multi ? "multi" : "single";
    io.labels = split.unseen;
    if (labels == "all") io.labels.insert(io.labels.end(), split.seen.begin(), split.seen.end());
    io.stride = stride;
    io.soft_vote = soft;
    io.detector_margin = margin;
    io.base_dir = fs::path(a.manifests).parent_path();
    io.threads = threads;
    results = run_detection(loaded.store, videos, io);
    write_results(dir / "results.jsonl", results);
    rm.output(dir / "results.jsonl");
  }
  const EvalReport report = frame_map(results, videos, split, iou_thresh, threads);
  json rj = report_to_json(report);
  json echo{{"labels", labels}, {"soft_vote", soft}, {"iou_threshold", iou_thresh}, {"stride", stride}};
  echo["mode"] = mode.empty() ? json(nullptr) : json(mode);
  echo["detector_margin"] = margin ? json(*margin) : json(nullptr);
  rj["config"] = echo;
  std::ofstream(dir / "report.json") << rj.dump(2) << '\n';
  rm.output(dir / "report.json");
  rm.write(dir, echo, 0, threads);
  out << "frame-mAP@" << iou_thresh << " over " << report.unseen.size() << " unseen classes: " << report.map << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct IntrospectArgs {
  Common common;
  std::string checkpoint, manifests, split, video;
  std::optional<std::size_t> frame;
  std::size_t scale = 8;
};

int cmd_introspect(const IntrospectArgs& a, RunManifest& rm, std::ostream& out) {
  const json cfg = load_config(a.common.config);
  if (!a.common.config.empty()) rm.input("config", a.common.config);
  reject_unknown(cfg, {}, "introspect config");
  require_file(a.checkpoint, "checkpoint");
  require_file(a.manifests, "manifests");
  rm.input("checkpoint", a.checkpoint);
  rm.input("manifests", a.manifests);
  if (a.scale < 1) throw ConfigError("--scale must be at least 1");
  const ParamStore store = load_checkpoint(a.checkpoint).store;
  const auto videos = read_manifests(a.manifests);
  if (videos.empty()) throw InputError("no videos in " + a.manifests);
  std::vector<std::string> labels;
  if (!a.split.empty()) {
    require_file(a.split, "split");
    rm.input("split", a.split);
    const LabelSplit s = read_split(a.split);
    labels = s.unseen;
    labels.insert(labels.end(), s.seen.begin(), s.seen.end());
  } else {
    std::set<std::string> seen;
    for (const auto& v : videos)
      for (const auto& f : v.frames)
        for (const auto& p : f.persons)
          for (const auto& l : p.labels)
            if (seen.insert(l).second) labels.push_back(l);
  }
  if (labels.empty()) throw InputError("no labels to score against");

  const VideoManifest* video = &videos[0];
  if (!a.video.empty()) {
    video = nullptr;
    for (const auto& v : videos)
      if (v.video_id == a.video) video = &v;
    if (!video) throw InputError("no video '" + a.video + "' in " + a.manifests);
  }
  if (video->frames.empty()) throw InputError("video '" + video->video_id + "' has no frames");
  const std::size_t pos = a.frame.value_or(video->frames.size() / 2);
  if (pos >= video->frames.size())
    throw InputError("frame position " + std::to_string(pos) + " is past the end of '" + video->video_id + "'");

  const DetectorConfig dcfg = read_detector_config(store);
  const EncoderConfigs enc = read_configs(store);
  const LabelMode mode = read_label_mode(store);
  const fs::path base_dir = fs::path(a.manifests).parent_path();
  const auto clip = sample_clip(*video, pos, dcfg.t_frames, 1, base_dir);
  if (!clip) throw InputError("frame position " + std::to_string(pos) + " of '" + video->video_id + "' has no persons");
  std::vector<std::string> prompts;
  for (const auto& l : labels) prompts.push_back(class_prompt(l));
  const Tensor text = encode_text(prompts, store, read_vocabulary(store), enc.text);
  const ClipFeatures f = extract_features(*clip, store, enc.image);
  const InteractionOutput io = detector_forward(f, text, store, dcfg);
  const ClassScores scores = classify(io.person_out, io.label_out, dcfg.temperature, mode);

  const fs::path dir = prepare_out(a.common.out);
  const std::size_t b = clip->boxes.size(), grid = enc.image.grid(), n = enc.image.num_patches();
  json persons = json::array();
  for (std::size_t i = 0; i < b; ++i) {
    json sc = json::object();
    for (std::size_t c = 0; c < labels.size(); ++c) sc[labels[c]] = scores.scores.at(i, c);
    const Box& bx = clip->boxes[i];
    persons.push_back({{"box", {bx.x1, bx.y1, bx.x2, bx.y2}},
                       {"actor_id", clip->actor_ids[i]},
                       {"labels", clip->labels[i]},
                       {"scores", sc}});
  }
  json layers = json::array();
  for (std::size_t l = 0; l < io.layers.size(); ++l) {
    const LayerTrace& t = io.layers[l];
    json grids = json::array();
    for (std::size_t i = 0; i < b; ++i) {
      const auto row = t.importance.data().subspan((i) * (b + n) + b, n);
      const auto cells = importance_grid(row, grid);
      std::vector<std::uint8_t> big(grid * a.scale * grid * a.scale);
      for (std::size_t y = 0; y < grid * a.scale; ++y)
        for (std::size_t x = 0; x < grid * a.scale; ++x) big[y * grid * a.scale + x] = cells[(y / a.scale) * grid + x / a.scale];
      char name[48];
      std::snprintf(name, sizeof name, "importance_l%zu_p%zu.pgm", l, i);
      write_pgm(dir / name, grid * a.scale, grid * a.scale, big);
      rm.output(dir / name);
      grids.push_back(name);
    }
    json pca = json::array();
    if (!t.labels.empty()) {
      const Tensor rows = concat_rows(t.labels);
      const auto pts = pca_2d(rows);
      for (std::size_t r = 0; r < pts.size(); ++r)
        pca.push_back({{"label", labels[r % labels.size()]},
                       {"person", t.labels.size() == 1 ? json(nullptr) : json(r / labels.size())},
                       {"x", pts[r][0]},
                       {"y", pts[r][1]}});
    }
    layers.push_back({{"layer", l},
                      {"prompted", t.prompted},
                      {"interest_tokens", t.interest},
                      {"importance_grids", grids},
                      {"label_pca", pca}});
  }
  const json record{{"video_id", video->video_id},
                    {"frame_idx", clip->keyframe_idx},
                    {"labels", labels},
                    {"shared_prompting", io.shared},
                    {"grid", grid},
                    {"persons", persons},
                    {"layers", layers}};
  std::ofstream(dir / "introspect.json") << record.dump(2) << '\n';
  rm.output(dir / "introspect.json");
  rm.write(dir, {{"video", video->video_id}, {"frame", pos}, {"scale", a.scale}}, 0, 1);
  out << "introspected " << b << " persons over " << io.layers.size() << " layers of " << video->video_id << '\n';
  return 0;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Zero-shot spatio-temporal action detection toolkit", "stclip"};
  app.require_subcommand(1);
  app.allow_extras(false);

  PretrainArgs pre;
  Common synth;
  SplitsArgs splits;
  TrainArgs train;
  EvalArgs eval;
  IntrospectArgs intro;

  auto* p = app.add_subcommand("pretrain", "Contrastive pretraining of the image and text encoders");
  add_common(p, pre.common);
  auto* s = app.add_subcommand("synth", "Render a synthetic video dataset with manifests");
  add_common(s, synth);
  auto* sp = app.add_subcommand("splits", "Generate seen/unseen label splits");
  add_common(sp, splits.common);
  sp->add_option("--classes", splits.classes, "Class count, comma-separated names, or 'motion'");
  sp->add_option("--n", splits.n, "Number of splits");
  sp->add_option("--frac", splits.frac, "Fraction of classes held out per split");
  auto* t = app.add_subcommand("train", "Train the detector on the seen classes of a split");
  add_common(t, train.common);
  t->add_option("--pretrained", train.pretrained, "Pretrained encoder checkpoint");
  t->add_option("--manifests", train.manifests, "Training manifests (JSONL)");
  t->add_option("--split", train.split, "Split file");
  auto* e = app.add_subcommand("eval", "Frame-mAP of a checkpoint or a results file on unseen classes");
  add_common(e, eval.common);
  e->add_option("--checkpoint", eval.checkpoint, "Trained detector checkpoint");
  e->add_option("--manifests", eval.manifests, "Test manifests (JSONL)");
  e->add_option("--split", eval.split, "Split file");
  e->add_option("--results", eval.results, "Score an existing results file instead of running the detector");
  e->add_option("--mode", eval.mode, "single or multi (default: as trained)");
  e->add_option("--labels", eval.labels, "Label set: all (seen and unseen) or unseen");
  e->add_flag("--soft-vote", eval.soft_vote, "Average scores over each video");
  e->add_option("--detector-margin", eval.detector_margin, "Drop persons scoring this far below the frame's best");
  e->add_option("--iou", eval.iou, "IoU threshold");
  auto* in = app.add_subcommand("introspect", "Dump attention maps, interest tokens and label geometry");
  add_common(in, intro.common);
  in->add_option("--checkpoint", intro.checkpoint, "Trained detector checkpoint");
  in->add_option("--manifests", intro.manifests, "Manifests (JSONL)");
  in->add_option("--split", intro.split, "Split file naming the label set");
  in->add_option("--video", intro.video, "Video id (default: first)");
  in->add_option("--frame", intro.frame, "Frame position (default: middle)");
  in->add_option("--scale", intro.scale, "Pixels per grid cell in the PGM maps");

  std::vector<std::string> storage{"stclip"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : storage) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    std::string msg = ex.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    err << "ERR USAGE: " << msg << '\n';
    return 1;
  }

  const auto* chosen = app.get_subcommands().front();
  RunManifest rm(chosen->get_name(), args);
  try {
    if (chosen == p) return cmd_pretrain(pre, rm, out);
    if (chosen == s) return cmd_synth(synth, rm, out);
    if (chosen == sp) return cmd_splits(splits, rm, out);
    if (chosen == t) return cmd_train(train, rm, out);
    if (chosen == e) return cmd_eval(eval, rm, out);
    return cmd_introspect(intro, rm, out);
  } catch (const Error& ex) {
    err << "ERR " << ex.code() << ": " << ex.what() << '\n';
  } catch (const fs::filesystem_error& ex) {
    err << "ERR IO: " << ex.what() << '\n';
  } catch (const std::exception& ex) {
    err << "ERR INTERNAL: " << ex.what() << '\n';
  }
  return 1;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace stclip::cli
