// SPDX-License-Identifier: Apache-2.0

#include "run_config.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include <json.hpp>

namespace dimlight::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

Json loss_json(const ObjectiveOptions& o) {
  Json w = Json::object();
  for (std::size_t i = 0; i < kLossTermNames.size(); ++i) w[kLossTermNames[i]] = o.weights.w[i];
  return Json{{"weights", w},
              {"hist_bins", o.hist_bins},
              {"kl", o.kl == KlDirection::kGtPred ? "gt_pred" : "pred_gt"},
              {"extractor_seed", o.extractor_seed}};
}

Json train_json(const TrainOptions& t) {
  return Json{{"steps", t.steps},
              {"lr", t.adam.lr},
              {"beta1", t.adam.beta1},
              {"beta2", t.adam.beta2},
              {"eps", t.adam.eps},
              {"milestones", t.milestones},
              {"lr_decay", t.lr_decay},
              {"crop", t.augment.crop},
              {"flips", t.augment.flips},
              {"seed", t.seed}};
}

void reject_unknown(const Json& j, const Json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const Json& j, const char* key, T& field, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "' in " + where);
  }
}

}  // namespace

std::string run_config_to_json(const RunConfig& c) {
  Json j;
  j["model"] = Json::parse(model_config_to_json(c.model));
  j["loss"] = loss_json(c.loss);
  j["train"] = train_json(c.train);
  j["holdout"] = c.holdout;
  j["paths"] = Json{{"manifest", c.paths.manifest}, {"checkpoint", c.paths.checkpoint}, {"history", c.paths.history}};
  return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  const Json defaults = Json::parse(run_config_to_json(c));
  reject_unknown(j, defaults, "config");

  if (j.contains("model")) {
    // Model keys are applied over the CLI default (the toy preset).
    reject_unknown(j["model"], defaults["model"], "model");
    Json merged = defaults["model"];
    for (const auto& [key, value] : j["model"].items()) merged[key] = value;
    if (j["model"].contains("depth") && !j["model"].contains("multipliers")) merged.erase("multipliers");
    try {
      c.model = model_config_from_json(merged.dump());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

  if (j.contains("loss")) {
    const Json& l = j["loss"];
    reject_unknown(l, defaults["loss"], "loss");
    if (l.contains("weights")) {
      reject_unknown(l["weights"], defaults["loss"]["weights"], "loss.weights");
      for (std::size_t i = 0; i < kLossTermNames.size(); ++i)
        read(l["weights"], kLossTermNames[i], c.loss.weights.w[i], "loss.weights");
    }
    read(l, "hist_bins", c.loss.hist_bins, "loss");
    read(l, "extractor_seed", c.loss.extractor_seed, "loss");
    if (l.contains("kl")) {
      std::string kl;
      read(l, "kl", kl, "loss");
      if (kl == "gt_pred") {
        c.loss.kl = KlDirection::kGtPred;
      } else if (kl == "pred_gt") {
        c.loss.kl = KlDirection::kPredGt;
      } else {
        throw ConfigError("loss.kl must be \"gt_pred\" or \"pred_gt\"");
      }
    }
    try {
      c.loss.weights.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (c.loss.hist_bins < 2) throw ConfigError("loss.hist_bins must be >= 2");
  }

  if (j.contains("train")) {
    const Json& t = j["train"];
    const std::string w = "train";
    reject_unknown(t, defaults["train"], w);
    read(t, "steps", c.train.steps, w);
    read(t, "lr", c.train.adam.lr, w);
    read(t, "beta1", c.train.adam.beta1, w);
    read(t, "beta2", c.train.adam.beta2, w);
    read(t, "eps", c.train.adam.eps, w);
    read(t, "milestones", c.train.milestones, w);
    read(t, "lr_decay", c.train.lr_decay, w);
    read(t, "crop", c.train.augment.crop, w);
    read(t, "flips", c.train.augment.flips, w);
    read(t, "seed", c.train.seed, w);
    if (c.train.steps < 0) throw ConfigError("train.steps must be >= 0");
    if (!(c.train.adam.lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(c.train.adam.beta1 >= 0.0 && c.train.adam.beta1 < 1.0)) throw ConfigError("train.beta1 must be in [0,1)");
    if (!(c.train.adam.beta2 >= 0.0 && c.train.adam.beta2 < 1.0)) throw ConfigError("train.beta2 must be in [0,1)");
    if (!(c.train.adam.eps > 0.0)) throw ConfigError("train.eps must be > 0");
    if (c.train.augment.crop < 0) throw ConfigError("train.crop must be >= 0");
    for (double m : c.train.milestones)
      if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("train.milestones must lie in [0,1]");
  }

  read(j, "holdout", c.holdout, "config");
  if (c.holdout < 0) throw ConfigError("holdout must be >= 0");

  if (j.contains("paths")) {
    const Json& p = j["paths"];
    reject_unknown(p, defaults["paths"], "paths");
    read(p, "manifest", c.paths.manifest, "paths");
    read(p, "checkpoint", c.paths.checkpoint, "paths");
    read(p, "history", c.paths.history, "paths");
  }
  c.train.objective = c.loss;
  return c;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

RunConfig load_run_config(const fs::path& path) { return run_config_from_json(read_text(path)); }

std::vector<ManifestEntry> load_manifest(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) throw ConfigError("manifest must be a JSON array of {low, high}");
  const fs::path base = path.parent_path();
  std::vector<ManifestEntry> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const Json& e = j[i];
    const std::string where = "manifest entry " + std::to_string(i);
    if (!e.is_object() || !e.contains("low") || !e.contains("high") || !e["low"].is_string() ||
        !e["high"].is_string()) {
      throw ConfigError(where + " needs string fields \"low\" and \"high\"");
    }
    for (const auto& [key, value] : e.items())
      if (key != "low" && key != "high") throw ConfigError("unknown key '" + key + "' in " + where);
    auto resolve = [&](const std::string& p) {
      const fs::path q(p);
      return q.is_absolute() ? q : base / q;
    };
    out.push_back({resolve(e["low"].get<std::string>()), resolve(e["high"].get<std::string>())});
  }
  return out;
}

std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries) {
  std::vector<ImagePair> out;
  out.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    ImagePair p{load_image(e.low), load_image(e.high)};
    if (p.low.width != p.high.width || p.low.height != p.high.height) {
      throw ImageError("pair " + e.low.string() + " / " + e.high.string() + " differ in size");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace dimlight::cli
