#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "stclip/data.hpp"
#include "stclip/errors.hpp"
#include "stclip/rng.hpp"

namespace stclip {

namespace {

constexpr float kPi = std::numbers::pi_v<float>;

struct Rgb {
  float r, g, b;
};

struct NamedColor {
  const char* name;
  Rgb rgb;
};

constexpr std::array<NamedColor, 8> kPalette{{{"red", {230, 45, 45}},
                                              {"green", {45, 200, 70}},
                                              {"blue", {55, 90, 235}},
                                              {"yellow", {235, 220, 45}},
                                              {"cyan", {45, 215, 225}},
                                              {"magenta", {215, 55, 205}},
                                              {"orange", {245, 140, 35}},
                                              {"white", {235, 235, 235}}}};
constexpr std::array<const char*, 4> kShapes{"square", "circle", "triangle", "diamond"};
constexpr Rgb kBackground{18, 18, 26};
constexpr int kSuper = 4;  // supersampling factor per axis
constexpr int kTrail = 4;     // past poses blended into each rendered still
constexpr float kTrailGap = 3.0f;  // frames between consecutive trail poses

Rgb color_of(const std::string& name) {
  for (const auto& c : kPalette)
    if (name == c.name) return c.rgb;
  throw InputError("unknown actor color '" + name + "'");
}

// Triangle wave in [−1, 1] with unit period.
float tri(float x) {
  const float f = x - std::floor(x);
  return f < 0.5f ? 4.0f * f - 1.0f : 3.0f - 4.0f * f;
}

struct Geometry {
  bool circle = false;
  float cx = 0, cy = 0, r = 0;
  std::vector<std::array<float, 2>> poly;  // counter-clockwise in image coordinates
  float mx = 0, my = 0, mr = 0;           // orientation marker disc
};

Geometry geometry(const ActorSpec& a, const ActorState& s) {
  Geometry g;
  g.cx = s.cx;
  g.cy = s.cy;
  g.r = a.radius * s.scale;
  auto ring = [&](int n, float offset, float dist) {
    for (int k = 0; k < n; ++k) {
      const float ang = s.angle + offset + 2.0f * kPi * static_cast<float>(k) / static_cast<float>(n);
      g.poly.push_back({s.cx + dist * std::cos(ang), s.cy + dist * std::sin(ang)});
    }
  };
  if (a.shape == "circle") {
    g.circle = true;
  } else if (a.shape == "square") {
    ring(4, kPi / 4.0f, g.r * 1.2f);  // half side 0.85·r
  } else if (a.shape == "triangle") {
    ring(3, 0.0f, g.r * 1.15f);
  } else if (a.shape == "diamond") {
    ring(4, 0.0f, g.r);
  } else {
    throw InputError("unknown actor shape '" + a.shape + "'");
  }
  g.mx = s.cx + 0.5f * g.r * std::cos(s.angle);
  g.my = s.cy + 0.5f * g.r * std::sin(s.angle);
  g.mr = 0.3f * g.r;
  return g;
}

bool inside(const Geometry& g, float x, float y) {
  if (g.circle) return (x - g.cx) * (x - g.cx) + (y - g.cy) * (y - g.cy) <= g.r * g.r;
  const std::size_t n = g.poly.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = g.poly[i];
    const auto& q = g.poly[(i + 1) % n];
    if ((q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]) < 0) return false;
  }
  return true;
}

Box raw_box(const ActorSpec& a, float t) {
  const ActorState s = actor_state(a, t);
  const Geometry g = geometry(a, s);
  if (g.circle) return {g.cx - g.r, g.cy - g.r, g.cx + g.r, g.cy + g.r};
  Box b{1e9f, 1e9f, -1e9f, -1e9f};
  for (const auto& p : g.poly) {
    b.x1 = std::min(b.x1, p[0]);
    b.y1 = std::min(b.y1, p[1]);
    b.x2 = std::max(b.x2, p[0]);
    b.y2 = std::max(b.y2, p[1]);
  }
  return b;
}

// Shifts the actor so its whole trajectory over [t0, t1] stays on the canvas.
void fit_trajectory(ActorSpec& a, float t0, float t1, std::size_t w, std::size_t h) {
  Box ext{1e9f, 1e9f, -1e9f, -1e9f};
  for (float t = t0; t <= t1 + 1e-3f; t += 0.5f) {
    const Box b = raw_box(a, t);
    ext.x1 = std::min(ext.x1, b.x1);
    ext.y1 = std::min(ext.y1, b.y1);
    ext.x2 = std::max(ext.x2, b.x2);
    ext.y2 = std::max(ext.y2, b.y2);
  }
  auto shift = [](float lo, float hi, float limit) {
    const float margin = 0.5f;
    if (hi - lo > limit - 2 * margin) return 0.5f * limit - 0.5f * (lo + hi);
    if (lo < margin) return margin - lo;
    if (hi > limit - margin) return limit - margin - hi;
    return 0.0f;
  };
  a.x0 += shift(ext.x1, ext.x2, static_cast<float>(w));
  a.y0 += shift(ext.y1, ext.y2, static_cast<float>(h));
}

ActorSpec random_actor(RngStream& rng, const std::string& action, float cx, float cy, float unit) {
  ActorSpec a;
  a.action = action;
  a.color = kPalette[rng.below(kPalette.size())].name;
  a.shape = kShapes[rng.below(kShapes.size())];
  a.x0 = cx;
  a.y0 = cy;
  a.radius = rng.uniform(4.0f, 5.5f) * unit;
  a.angle0 = rng.uniform(0.0f, 2.0f * kPi);
  a.phase = rng.uniform(0.0f, 1.0f);
  return a;
}

}  // namespace

const std::vector<std::string>& motion_classes() {
  static const std::vector<std::string> classes{
      "move-right", "move-left", "bounce", "rotate",    "grow",       "shrink",
      "zigzag",     "orbit",     "flash",  "drift-up",  "drift-down", "spin-fast"};
  return classes;
}

ActorState actor_state(const ActorSpec& a, float t) {
  // Motion magnitudes are authored for a 32-pixel canvas and a radius near 5.
  const float u = a.radius / 5.0f;
  ActorState s{a.x0, a.y0, 1.0f, a.angle0, 1.0f};
  const std::string& m = a.action;
  if (m == "move-right") {
    s.cx += 1.5f * u * t;
  } else if (m == "move-left") {
    s.cx -= 1.5f * u * t;
  } else if (m == "bounce") {
    s.cy -= 5.0f * u * std::abs(std::sin(kPi * (t / 4.0f + a.phase)));
  } else if (m == "rotate") {
    s.angle += 0.3f * t;
  } else if (m == "spin-fast") {
    s.angle += 1.2f * t;
  } else if (m == "grow") {
    s.scale = 0.55f + 0.08f * t;
  } else if (m == "shrink") {
    s.scale = std::max(0.3f, 1.6f - 0.07f * t);
  } else if (m == "zigzag") {
    s.cx += 1.0f * u * t;
    s.cy += 3.0f * u * tri(t / 4.0f + a.phase);
  } else if (m == "orbit") {
    const float ang = 2.0f * kPi * (t / 8.0f + a.phase);
    s.cx += 4.0f * u * std::cos(ang);
    s.cy += 4.0f * u * std::sin(ang);
  } else if (m == "flash") {
    s.brightness = static_cast<long>(std::floor(t + 2.0f * a.phase)) % 2 == 0 ? 1.0f : 0.3f;
  } else if (m == "drift-up") {
    s.cy -= 1.0f * u * t;
  } else if (m == "drift-down") {
    s.cy += 1.0f * u * t;
  } else {
    throw InputError("unknown action '" + m + "'");
  }
  return s;
}

Box actor_box(const ActorSpec& a, float t, std::size_t width, std::size_t height) {
  Box b = raw_box(a, t);
  b.x1 = std::clamp(b.x1, 0.0f, static_cast<float>(width));
  b.x2 = std::clamp(b.x2, 0.0f, static_cast<float>(width));
  b.y1 = std::clamp(b.y1, 0.0f, static_cast<float>(height));
  b.y2 = std::clamp(b.y2, 0.0f, static_cast<float>(height));
  return b;
}

Image render_frame(std::span<const ActorSpec> actors, std::size_t width, std::size_t height, float t) {
  struct Prepared {
    Geometry g;
    Rgb body, marker;
  };
  // Each frame blends the scene at t, t−g, ..., t−(kTrail−1)g (g = kTrailGap)
  // with weights kTrail, ..., 1, so a single still shows which way every
  // actor moves.
  std::vector<std::vector<Prepared>> steps(kTrail);
  float weight[kTrail];
  float total = 0.0f;
  for (int k = 0; k < kTrail; ++k) {
    const float tk = t - kTrailGap * static_cast<float>(k);
    for (const auto& a : actors) {
      const ActorState s = actor_state(a, tk);
      const Rgb c = color_of(a.color);
      const Rgb body{c.r * s.brightness, c.g * s.brightness, c.b * s.brightness};
      steps[k].push_back({geometry(a, s), body, {body.r * 0.25f, body.g * 0.25f, body.b * 0.25f}});
    }
    weight[k] = static_cast<float>(kTrail - k);
    total += weight[k];
  }
  for (auto& w : weight) w /= total * kSuper * kSuper;
  Image img(width, height);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      float acc[3] = {0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const float px = static_cast<float>(x) + (static_cast<float>(sx) + 0.5f) / kSuper;
          const float py = static_cast<float>(y) + (static_cast<float>(sy) + 0.5f) / kSuper;
          for (int k = 0; k < kTrail; ++k) {
            Rgb c = kBackground;
            for (const auto& p : steps[k]) {
              if (!inside(p.g, px, py)) continue;
              const float dx = px - p.g.mx, dy = py - p.g.my;
              c = dx * dx + dy * dy <= p.g.mr * p.g.mr ? p.marker : p.body;
            }
            acc[0] += weight[k] * c.r;
            acc[1] += weight[k] * c.g;
            acc[2] += weight[k] * c.b;
          }
        }
      for (int ch = 0; ch < 3; ++ch)
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(acc[ch]), 0L, 255L));
    }
  return img;
}

Image load_frame(const VideoManifest& v, std::size_t pos, const std::filesystem::path& base_dir) {
  if (pos >= v.frames.size())
    throw InputError("video '" + v.video_id + "' has no frame at position " + std::to_string(pos));
  const auto& f = v.frames[pos];
  if (!f.image.empty()) return read_ppm(base_dir / f.image);
  if (v.actors.empty())
    throw InputError("video '" + v.video_id + "' frame " + std::to_string(f.frame_idx) +
                     " has neither an image nor actor specs");
  return render_frame(v.actors, v.width, v.height, static_cast<float>(f.frame_idx));
}

std::vector<VideoManifest> synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                                          const std::optional<std::filesystem::path>& out_dir) {
  if (cfg.image_size < 16) throw ConfigError("synthetic canvas must be at least 16 pixels");
  const std::size_t cells_per_side = cfg.image_size / 16;
  const std::size_t capacity = cells_per_side * cells_per_side;
  if (cfg.actors_min < 1 || cfg.actors_min > cfg.actors_max)
    throw ConfigError("actor range must satisfy 1 <= min <= max");
  if (cfg.actors_max > capacity)
    throw ConfigError(std::to_string(cfg.actors_max) + " actors exceed the canvas capacity of " +
                      std::to_string(capacity) + " at size " + std::to_string(cfg.image_size));
  if (cfg.classes.empty()) throw ConfigError("no classes to synthesize");
  if (cfg.actors_max > cfg.classes.size())
    throw ConfigError("more actors per video than distinct classes");
  for (const auto& c : cfg.classes) actor_state(ActorSpec{0, c, "white", "circle"}, 0.0f);
  if (cfg.frames_per_video < 1) throw ConfigError("videos need at least one frame");

  std::vector<std::string> order = cfg.classes;
  RngStream(seed, hash_name("synth-classes")).shuffle(order);
  const RngStream base(seed, hash_name("synth-videos"));
  const float unit = static_cast<float>(cfg.image_size) / 32.0f;
  const float cell = 16.0f;

  std::vector<VideoManifest> out;
  out.reserve(cfg.num_videos);
  for (std::size_t v = 0; v < cfg.num_videos; ++v) {
    RngStream rng = base.derive(v);
    VideoManifest m;
    char id[32];
    std::snprintf(id, sizeof id, "_%04zu", v);
    m.video_id = cfg.id_prefix + id;
    m.width = m.height = cfg.image_size;
    const std::size_t n_actors = cfg.actors_min + rng.below(cfg.actors_max - cfg.actors_min + 1);
    std::vector<std::size_t> cells(capacity);
    for (std::size_t i = 0; i < capacity; ++i) cells[i] = i;
    rng.shuffle(cells);
    for (std::size_t a = 0; a < n_actors; ++a) {
      // Offsets of n/actors_max keep co-actors distinct while every class
      // leads a video equally often.
      const std::size_t step = order.size() / cfg.actors_max;
      const auto& action = order[(v + a * step) % order.size()];
      float cx, cy;
      if (n_actors == 1) {
        cx = rng.uniform(0.3f, 0.7f) * static_cast<float>(cfg.image_size);
        cy = rng.uniform(0.3f, 0.7f) * static_cast<float>(cfg.image_size);
      } else {
        cx = (static_cast<float>(cells[a] % cells_per_side) + 0.5f) * cell + rng.uniform(-2.0f, 2.0f);
        cy = (static_cast<float>(cells[a] / cells_per_side) + 0.5f) * cell + rng.uniform(-2.0f, 2.0f);
      }
      ActorSpec spec = random_actor(rng, action, cx, cy, unit);
      spec.actor_id = static_cast<int>(a);
      fit_trajectory(spec, -kTrailGap * static_cast<float>(kTrail - 1), static_cast<float>(cfg.frames_per_video - 1),
                     m.width, m.height);
      m.actors.push_back(spec);
    }
    const RngStream scores = rng.derive("detector-scores");
    for (std::size_t f = 0; f < cfg.frames_per_video; ++f) {
      FrameAnnotation fa;
      fa.frame_idx = f;
      for (const auto& a : m.actors) {
        RngStream sr = scores.derive(f * 64 + static_cast<std::size_t>(a.actor_id));
        fa.persons.push_back({actor_box(a, static_cast<float>(f), m.width, m.height),
                              {a.action},
                              sr.uniform(0.75f, 1.0f),
                              a.actor_id});
      }
      m.frames.push_back(std::move(fa));
    }
    if (out_dir) {
      for (auto& fa : m.frames) {
        char name[32];
        std::snprintf(name, sizeof name, "%03zu.ppm", fa.frame_idx);
        const auto rel = std::filesystem::path("frames") / m.video_id / name;
        write_ppm(*out_dir / rel, render_frame(m.actors, m.width, m.height, static_cast<float>(fa.frame_idx)));
        fa.image = rel.generic_string();
      }
    }
    out.push_back(std::move(m));
  }
  if (out_dir) write_manifests(*out_dir / "manifests.jsonl", out);
  return out;
}

namespace {

constexpr std::array<const char*, 4> kTemplates{"a {color} {shape} that is {action}", "{action}",
                                                "a {shape} that is {action}",
                                                "something that is {action}"};

std::string fill(std::string t, const std::string& key, const std::string& value) {
  const auto at = t.find(key);
  if (at != std::string::npos) t.replace(at, key.size(), value);
  return t;
}

}  // namespace

std::string class_prompt(const std::string& class_name) {
  std::string s = class_name;
  std::replace(s.begin(), s.end(), '-', ' ');
  std::replace(s.begin(), s.end(), '_', ' ');
  return s;
}

std::vector<std::string> caption_vocabulary_texts(std::span<const std::string> classes) {
  std::vector<std::string> texts;
  for (const auto& t : kTemplates) texts.emplace_back(t);
  for (const auto& c : kPalette) texts.emplace_back(c.name);
  for (const auto& s : kShapes) texts.emplace_back(s);
  for (const auto& c : classes) texts.push_back(class_prompt(c));
  // Template placeholders are not words of the vocabulary.
  for (auto& t : texts)
    for (const char* key : {"{color}", "{shape}", "{action}"}) t = fill(t, key, "");
  return texts;
}

std::vector<CaptionedImage> caption_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
  const RngStream base(seed, hash_name("caption-corpus"));
  const float unit = static_cast<float>(cfg.image_size) / 32.0f;
  const float size = static_cast<float>(cfg.image_size);
  std::vector<CaptionedImage> out;
  for (std::size_t ci = 0; ci < cfg.classes.size(); ++ci) {
    const auto& action = cfg.classes[ci];
    for (std::size_t k = 0; k < cfg.per_class; ++k) {
      RngStream rng = base.derive(ci * 1000003 + k);
      ActorSpec a = random_actor(rng, action, rng.uniform(0.3f, 0.7f) * size,
                                 rng.uniform(0.3f, 0.7f) * size, unit);
      const float t = static_cast<float>(rng.below(8));
      fit_trajectory(a, t - kTrailGap * static_cast<float>(kTrail - 1), t, cfg.image_size, cfg.image_size);
      const Image frame = render_frame(std::span(&a, 1), cfg.image_size, cfg.image_size, t);
      // Half the items are person crops exactly as the detector sees them.
      const Box region = rng.below(2) == 0 ? actor_box(a, t, cfg.image_size, cfg.image_size)
                                           : Box{0, 0, size, size};
      Tensor image = crop_person(frame, region, cfg.image_size);
      const std::string tmpl = kTemplates[rng.below(kTemplates.size())];
      std::string caption = fill(fill(fill(tmpl, "{color}", a.color), "{shape}", a.shape), "{action}",
                                 class_prompt(action));
      out.push_back({std::move(image), std::move(caption), action});
    }
  }
  return out;
}

}  // namespace stclip
