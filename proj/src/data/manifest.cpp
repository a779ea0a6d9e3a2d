#include <fstream>
#include "json.hpp"
#include <set>

#include "stclip/data.hpp"
#include "stclip/errors.hpp"

namespace stclip {

using nlohmann::json;

void VideoManifest::validate(std::span<const std::string> classes) const {
  const std::set<std::string> known(classes.begin(), classes.end());
  auto fail = [&](const std::string& what) { throw InputError("video '" + video_id + "': " + what); };
  if (video_id.empty()) throw InputError("video without an id");
  if (width == 0 || height == 0) fail("missing frame size");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    if (i > 0 && f.frame_idx <= frames[i - 1].frame_idx) fail("frame_idx is not strictly increasing");
    for (const auto& p : f.persons) {
      const Box& b = p.box;
      if (!b.valid()) fail("degenerate box in frame " + std::to_string(f.frame_idx));
      if (b.x1 < 0 || b.y1 < 0 || b.x2 > static_cast<float>(width) || b.y2 > static_cast<float>(height))
        fail("box outside the image in frame " + std::to_string(f.frame_idx));
      if (p.detector_score && !(*p.detector_score >= 0.0f && *p.detector_score <= 1.0f))
        fail("detector score outside [0, 1] in frame " + std::to_string(f.frame_idx));
      if (!known.empty())
        for (const auto& l : p.labels)
          if (!known.count(l)) fail("label '" + l + "' is not a dataset class");
    }
  }
}

namespace {

json to_json(const VideoManifest& v) {
  json actors = json::array();
  for (const auto& a : v.actors)
    actors.push_back({{"actor_id", a.actor_id}, {"action", a.action}, {"color", a.color},
                      {"shape", a.shape}, {"x0", a.x0}, {"y0", a.y0}, {"radius", a.radius},
                      {"angle0", a.angle0}, {"phase", a.phase}});
  json frames = json::array();
  for (const auto& f : v.frames) {
    json persons = json::array();
    for (const auto& p : f.persons) {
      json pj{{"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}}, {"labels", p.labels}};
      if (p.detector_score) pj["detector_score"] = *p.detector_score;
      if (p.actor_id >= 0) pj["actor_id"] = p.actor_id;
      persons.push_back(std::move(pj));
    }
    json fj{{"frame_idx", f.frame_idx}, {"persons", std::move(persons)}};
    if (!f.image.empty()) fj["image"] = f.image;
    frames.push_back(std::move(fj));
  }
  json out{{"video_id", v.video_id}, {"width", v.width}, {"height", v.height}, {"frames", std::move(frames)}};
  if (!actors.empty()) out["actors"] = std::move(actors);
  return out;
}

VideoManifest from_json(const json& j) {
  VideoManifest v;
  v.video_id = j.at("video_id").get<std::string>();
  v.width = j.at("width").get<std::size_t>();
  v.height = j.at("height").get<std::size_t>();
  if (j.contains("actors"))
    for (const auto& a : j.at("actors"))
      v.actors.push_back({a.at("actor_id").get<int>(), a.at("action").get<std::string>(),
                          a.at("color").get<std::string>(), a.at("shape").get<std::string>(),
                          a.at("x0").get<float>(), a.at("y0").get<float>(), a.at("radius").get<float>(),
                          a.at("angle0").get<float>(), a.at("phase").get<float>()});
  for (const auto& fj : j.at("frames")) {
    FrameAnnotation f;
    f.frame_idx = fj.at("frame_idx").get<std::size_t>();
    if (fj.contains("image")) f.image = fj.at("image").get<std::string>();
    for (const auto& pj : fj.at("persons")) {
      PersonAnnotation p;
      const auto& b = pj.at("box");
      if (!b.is_array() || b.size() != 4) throw InputError("box must hold 4 numbers");
      p.box = {b[0].get<float>(), b[1].get<float>(), b[2].get<float>(), b[3].get<float>()};
      p.labels = pj.at("labels").get<std::vector<std::string>>();
      if (pj.contains("detector_score")) p.detector_score = pj.at("detector_score").get<float>();
      if (pj.contains("actor_id")) p.actor_id = pj.at("actor_id").get<int>();
      f.persons.push_back(std::move(p));
    }
    v.frames.push_back(std::move(f));
  }
  return v;
}

}  // namespace

std::vector<VideoManifest> read_manifests(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read manifests " + path.string());
  std::vector<VideoManifest> out;
  std::string line;
  std::size_t offset = 0, lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::size_t start = offset;
    offset += line.size() + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(lineno) + ": " + e.what(), start);
    } catch (const InputError& e) {
      throw FormatError(path.string() + " line " + std::to_string(lineno) + ": " + e.what(), start);
    }
    out.back().validate();
  }
  return out;
}

void write_manifests(const std::filesystem::path& path, std::span<const VideoManifest> videos) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write manifests " + path.string());
  for (const auto& v : videos) f << to_json(v).dump() << '\n';
  if (!f) throw InputError("failed writing manifests " + path.string());
}

void write_split(const std::filesystem::path& path, const LabelSplit& s) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write split " + path.string());
  f << json{{"split_id", s.split_id}, {"seen", s.seen}, {"unseen", s.unseen}}.dump(2) << '\n';
}

LabelSplit read_split(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot read split " + path.string());
  try {
    const json j = json::parse(f);
    LabelSplit s{j.at("split_id").get<std::string>(), j.at("seen").get<std::vector<std::string>>(),
                 j.at("unseen").get<std::vector<std::string>>()};
    const std::set<std::string> seen(s.seen.begin(), s.seen.end());
    for (const auto& u : s.unseen)
      if (seen.count(u)) throw InputError("split '" + s.split_id + "' lists '" + u + "' as seen and unseen");
    return s;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
}

}  // namespace stclip
