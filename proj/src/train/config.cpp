#include <set>
#include <string>

#include "stclip/errors.hpp"
#include "stclip/train.hpp"

namespace stclip {

using nlohmann::json;

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(base_lr >= 0.0)) throw ConfigError("base_lr must be non-negative");
  if (!(warmup_factor > 0.0 && warmup_factor <= 1.0)) throw ConfigError("warmup_factor must be in (0, 1]");
  if (warmup_iters > iterations) throw ConfigError("warmup_iters exceeds iterations");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (stride < 1) throw ConfigError("stride must be at least 1");
  detector().validate();
}

DetectorConfig TrainConfig::detector() const {
  DetectorConfig d;
  d.t_frames = t_frames;
  d.k_interest = k_interest;
  d.lora_rank = lora_rank;
  d.adapter = toggles.adapter;
  d.temporal_mhsa = toggles.temporal;
  d.prompt_every_layer = toggles.prompting_every_layer;
  d.interest_tokens = toggles.its;
  return d;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"iterations", c.iterations},
           {"batch_size", c.batch_size},
           {"base_lr", c.base_lr},
           {"warmup_iters", c.warmup_iters},
           {"warmup_factor", c.warmup_factor},
           {"mode", c.mode == LabelMode::Single ? "single" : "multi"},
           {"k_interest", c.k_interest},
           {"lora_rank", c.lora_rank},
           {"t_frames", c.t_frames},
           {"stride", c.stride},
           {"toggles",
            {{"adapter", c.toggles.adapter},
             {"temporal", c.toggles.temporal},
             {"prompting_every_layer", c.toggles.prompting_every_layer},
             {"its", c.toggles.its}}},
           {"momentum", c.momentum},
           {"seed", c.seed},
           {"checkpoint_every", c.checkpoint_every}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"iterations", "batch_size", "base_lr", "warmup_iters", "warmup_factor", "mode",
                  "k_interest", "lora_rank", "t_frames", "stride", "toggles", "momentum", "seed",
                  "checkpoint_every"},
                 "train config");
  try {
    read(j, "iterations", c.iterations);
    read(j, "batch_size", c.batch_size);
    read(j, "base_lr", c.base_lr);
    read(j, "warmup_iters", c.warmup_iters);
    read(j, "warmup_factor", c.warmup_factor);
    read(j, "k_interest", c.k_interest);
    read(j, "lora_rank", c.lora_rank);
    read(j, "t_frames", c.t_frames);
    read(j, "stride", c.stride);
    read(j, "momentum", c.momentum);
    read(j, "seed", c.seed);
    read(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("mode")) {
      const auto m = j.at("mode").get<std::string>();
      if (m == "single") c.mode = LabelMode::Single;
      else if (m == "multi") c.mode = LabelMode::Multi;
      else throw ConfigError("mode must be \"single\" or \"multi\", got \"" + m + "\"");
    }
    if (j.contains("toggles")) {
      const json& t = j.at("toggles");
      reject_unknown(t, {"adapter", "temporal", "prompting_every_layer", "its"}, "toggles");
      read(t, "adapter", c.toggles.adapter);
      read(t, "temporal", c.toggles.temporal);
      read(t, "prompting_every_layer", c.toggles.prompting_every_layer);
      read(t, "its", c.toggles.its);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

}  // namespace stclip
