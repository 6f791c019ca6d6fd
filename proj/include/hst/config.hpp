#pragma once

// Run configuration as a JSON document with sections backbone, hsn, bridge,
// toggles, train and data. Every default is written out by to_json, unknown
// keys are rejected with their dotted path.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "hst/data.hpp"
#include "hst/trainer.hpp"

namespace hst {

struct DataConfig {
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 20;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  /// Train and test splits drawn from one generator run.
  data::SyntheticSpec synthetic_spec() const {
    return {model.num_classes, data.train_per_class + data.test_per_class, model.backbone.image_size, data.noise_std,
            data.seed};
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  const auto& b = c.model.backbone;
  const auto& h = c.model.hsn;
  nlohmann::ordered_json j;
  j["seed"] = c.model.seed;
  j["backbone"] = {{"image_size", b.image_size},
                   {"patch_size", b.patch_size},
                   {"embed_dim", b.embed_dim},
                   {"depth", b.depth},
                   {"num_heads", b.num_heads},
                   {"mlp_ratio", b.mlp_ratio},
                   {"use_cls_token", b.use_cls_token},
                   {"num_meta_tokens", b.num_meta_tokens},
                   {"ln_eps", b.ln_eps}};
  j["hsn"] = {{"stage_dims", std::vector<std::size_t>(h.stage_dims.begin(), h.stage_dims.end())},
              {"ffn_ratio", h.ffn_ratio},
              {"attn_heads", h.attn_heads},
              {"attention", h.attention == AttentionKind::softmax ? "softmax" : "bilinear"},
              {"ln_eps", h.ln_eps}};
  j["bridge"] = {{"bias", c.model.bridge_bias}};
  j["toggles"] = {{"hsn_enabled", c.model.hsn_enabled},
                  {"ln_tuning", c.model.ln_tuning},
                  {"weight_sharing", c.model.weight_sharing},
                  {"global_t", h.global_t},
                  {"fg_injection", h.fg_injection}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"adam_eps", c.train.adam_eps},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"cosine_decay", c.train.cosine_decay},
                {"checkpoint_every", c.train.checkpoint_every},
                {"seed", c.train.seed}};
  j["data"] = {{"num_classes", c.model.num_classes},
               {"train_per_class", c.data.train_per_class},
               {"test_per_class", c.data.test_per_class},
               {"noise_std", c.data.noise_std},
               {"seed", c.data.seed},
               {"pixel_mean", c.model.pixel_mean},
               {"pixel_std", c.model.pixel_std}};
  return j;
}

namespace detail {

inline void reject_unknown(const nlohmann::ordered_json& given, const nlohmann::ordered_json& known,
                           const std::string& path) {
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!known.contains(it.key())) throw ConfigError("unknown configuration key '" + key + "'");
    const auto& k = known[it.key()];
    if (k.is_object()) {
      if (!it.value().is_object()) throw ConfigError("configuration key '" + key + "' must be an object");
      reject_unknown(it.value(), k, key);
    }
  }
}

template <class V>
void read(const nlohmann::ordered_json& j, const std::string& section, const std::string& key, V& out) {
  try {
    j.at(section).at(key).get_to(out);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("configuration key '" + section + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Defaults overlaid with `given`; unknown keys and bad types are errors.
inline RunConfig from_json(const nlohmann::ordered_json& given) {
  RunConfig c;
  auto j = to_json(c);
  if (!given.is_object()) throw ConfigError("configuration must be a JSON object");
  detail::reject_unknown(given, j, "");
  j.merge_patch(given);
  try {
    j.at("seed").get_to(c.model.seed);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("configuration key 'seed' has the wrong type");
  }
  auto& b = c.model.backbone;
  detail::read(j, "backbone", "image_size", b.image_size);
  detail::read(j, "backbone", "patch_size", b.patch_size);
  detail::read(j, "backbone", "embed_dim", b.embed_dim);
  detail::read(j, "backbone", "depth", b.depth);
  detail::read(j, "backbone", "num_heads", b.num_heads);
  detail::read(j, "backbone", "mlp_ratio", b.mlp_ratio);
  detail::read(j, "backbone", "use_cls_token", b.use_cls_token);
  detail::read(j, "backbone", "num_meta_tokens", b.num_meta_tokens);
  detail::read(j, "backbone", "ln_eps", b.ln_eps);
  auto& h = c.model.hsn;
  std::vector<std::size_t> dims;
  detail::read(j, "hsn", "stage_dims", dims);
  if (dims.size() != h.stage_dims.size()) throw ConfigError("hsn.stage_dims must list exactly 4 widths");
  std::copy(dims.begin(), dims.end(), h.stage_dims.begin());
  detail::read(j, "hsn", "ffn_ratio", h.ffn_ratio);
  detail::read(j, "hsn", "attn_heads", h.attn_heads);
  std::string attention;
  detail::read(j, "hsn", "attention", attention);
  if (attention == "softmax")
    h.attention = AttentionKind::softmax;
  else if (attention == "bilinear")
    h.attention = AttentionKind::bilinear;
  else
    throw ConfigError("hsn.attention must be \"softmax\" or \"bilinear\", got \"" + attention + "\"");
  detail::read(j, "hsn", "ln_eps", h.ln_eps);
  detail::read(j, "bridge", "bias", c.model.bridge_bias);
  detail::read(j, "toggles", "hsn_enabled", c.model.hsn_enabled);
  detail::read(j, "toggles", "ln_tuning", c.model.ln_tuning);
  detail::read(j, "toggles", "weight_sharing", c.model.weight_sharing);
  detail::read(j, "toggles", "global_t", h.global_t);
  detail::read(j, "toggles", "fg_injection", h.fg_injection);
  auto& t = c.train;
  detail::read(j, "train", "learning_rate", t.learning_rate);
  detail::read(j, "train", "weight_decay", t.weight_decay);
  detail::read(j, "train", "beta1", t.beta1);
  detail::read(j, "train", "beta2", t.beta2);
  detail::read(j, "train", "adam_eps", t.adam_eps);
  detail::read(j, "train", "batch_size", t.batch_size);
  detail::read(j, "train", "epochs", t.epochs);
  detail::read(j, "train", "cosine_decay", t.cosine_decay);
  detail::read(j, "train", "checkpoint_every", t.checkpoint_every);
  detail::read(j, "train", "seed", t.seed);
  detail::read(j, "data", "num_classes", c.model.num_classes);
  detail::read(j, "data", "train_per_class", c.data.train_per_class);
  detail::read(j, "data", "test_per_class", c.data.test_per_class);
  detail::read(j, "data", "noise_std", c.data.noise_std);
  detail::read(j, "data", "seed", c.data.seed);
  detail::read(j, "data", "pixel_mean", c.model.pixel_mean);
  detail::read(j, "data", "pixel_std", c.model.pixel_std);
  c.model.validate();
  t.validate();
  if (c.data.train_per_class == 0) throw ConfigError("data.train_per_class must be positive");
  return c;
}

/// Parses JSON text; syntax errors carry the parser's line and column.
inline RunConfig parse_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Hash of everything that fixes parameter names and shapes. Training and
/// data settings, and the seed, are excluded.
inline std::uint64_t config_hash(const RunConfig& c) {
  auto j = to_json(c);
  nlohmann::ordered_json arch;
  for (const char* s : {"backbone", "hsn", "bridge", "toggles"}) arch[s] = j[s];
  arch["num_classes"] = c.model.num_classes;
  const std::string text = arch.dump();
  return fnv1a(text.data(), text.size());
}

}  // namespace hst
