#pragma once

// Run configuration: one JSON document holding every module's settings.
// Unknown keys are rejected at every level.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "rio/ensemble.hpp"
#include "rio/error.hpp"
#include "rio/model.hpp"
#include "rio/trajmetrics.hpp"
#include "rio/training.hpp"
#include "rio/ttt.hpp"

namespace rio {

/// Scenario batch produced by `rio gen` when no spec file is given.
struct GenConfig {
  std::string preset = "walk_turns";
  std::size_t sequences = 10;
  double duration = 60.0;
  double heading_min_deg = 0.0;
  double heading_max_deg = 360.0;
};

struct EnsembleConfig {
  std::size_t members = 3;
  std::vector<std::uint64_t> seeds;  // empty: derived from the run seed
  VarianceReduction variance_reduction = VarianceReduction::Sum;
  DataSplit data_split = DataSplit::Shared;
};

/// File locations; each maps to one CLI flag.
struct PathsConfig {
  std::string data;      // directory of training sequences
  std::string val;       // directory of validation sequences
  std::string out;
  std::string spec;      // scenario JSON for `gen`
  std::string ensemble;  // ensemble directory for `ttt`
  std::vector<std::string> sequences;
  std::vector<std::string> estimates;
  std::vector<std::string> trajectories;
};

struct RunConfig {
  std::string experiment = "rio";
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  EnsembleConfig ensemble;
  TttConfig ttt;
  EvalOptions eval;
  GenConfig gen;
  PathsConfig paths;

  void validate() const {
    model.validate();
    train.validate();
    ttt.validate();
    if (ensemble.members < 2) throw Error(ErrorCode::InvalidConfig, "ensemble.members must be >= 2");
    if (!ensemble.seeds.empty() && ensemble.seeds.size() != ensemble.members)
      throw Error(ErrorCode::InvalidConfig, "ensemble.seeds must list one seed per member");
    if (!(eval.rte_interval > 0.0)) throw Error(ErrorCode::InvalidConfig, "eval.rte_interval must be positive");
    if (eval.window_stride == 0) throw Error(ErrorCode::InvalidConfig, "eval.window_stride must be positive");
    if (gen.sequences == 0) throw Error(ErrorCode::InvalidConfig, "gen.sequences must be positive");
    if (!(gen.duration > 0.0)) throw Error(ErrorCode::InvalidConfig, "gen.duration must be positive");
    if (!(gen.heading_min_deg <= gen.heading_max_deg))
      throw Error(ErrorCode::InvalidConfig, "gen heading range is empty");
  }

  std::vector<std::uint64_t> member_seed_list() const {
    return ensemble.seeds.empty() ? member_seeds(seed, ensemble.members) : ensemble.seeds;
  }
};

namespace config_detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return it.key() == k; }))
      throw Error(ErrorCode::InvalidConfig, "unknown key '" + where + "." + it.key() + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline std::string policy_name(AlignPolicy p) { return p == AlignPolicy::Aligned ? "aligned" : "umeyama"; }

inline AlignPolicy policy_from_string(const std::string& s) {
  if (s == "aligned") return AlignPolicy::Aligned;
  if (s == "umeyama") return AlignPolicy::Umeyama;
  throw Error(ErrorCode::InvalidConfig, "policy must be aligned|umeyama, got '" + s + "'");
}

inline std::string rte_style_name(RteStyle s) {
  return s == RteStyle::RelativeDisplacement ? "relative_displacement" : "window_realigned";
}

inline RteStyle rte_style_from_string(const std::string& s) {
  if (s == "relative_displacement") return RteStyle::RelativeDisplacement;
  if (s == "window_realigned") return RteStyle::WindowRealigned;
  throw Error(ErrorCode::InvalidConfig, "rte_style must be relative_displacement|window_realigned");
}

}  // namespace config_detail

inline nlohmann::json to_json(const RunConfig& c) {
  using namespace config_detail;
  nlohmann::json j;
  j["experiment"] = c.experiment;
  j["seed"] = c.seed;
  j["model"] = c.model;
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"lr", c.train.adam.lr},
                {"beta1", c.train.adam.beta1},
                {"beta2", c.train.adam.beta2},
                {"eps", c.train.adam.eps},
                {"aux_weight", c.train.aux_weight},
                {"window_stride", c.train.window_stride},
                {"speed_gate", c.train.equivariance.speed_gate},
                {"stop_gradient_on_rotated", c.train.equivariance.stop_gradient_on_rotated},
                {"gate_on_prediction", c.train.gate_on_prediction}};
  j["ensemble"] = {{"members", c.ensemble.members},
                   {"seeds", c.ensemble.seeds},
                   {"variance_reduction", to_string(c.ensemble.variance_reduction)},
                   {"data_split", to_string(c.ensemble.data_split)}};
  j["ttt"] = {{"batch_size", c.ttt.batch_size},
              {"sample_stride", c.ttt.sample_stride},
              {"angles_deg", c.ttt.angles_deg},
              {"max_updates_per_batch", c.ttt.max_updates_per_batch},
              {"stop_threshold", c.ttt.stop_threshold},
              {"restore_threshold", c.ttt.restore_threshold},
              {"ttt_lr", c.ttt.ttt_lr},
              {"mode", to_string(c.ttt.mode)},
              {"ttt_update", to_string(c.ttt.ttt_update)},
              {"predictor", to_string(c.ttt.predictor)},
              {"speed_gate", c.ttt.speed_gate},
              {"stop_gradient_on_rotated", c.ttt.stop_gradient_on_rotated}};
  j["eval"] = {{"policy", policy_name(c.eval.policy)},
               {"rte_interval", c.eval.rte_interval},
               {"rte_style", rte_style_name(c.eval.rte_style)},
               {"umeyama_scale", c.eval.umeyama_scale},
               {"window_stride", c.eval.window_stride}};
  j["gen"] = {{"preset", c.gen.preset},
              {"sequences", c.gen.sequences},
              {"duration", c.gen.duration},
              {"heading_min_deg", c.gen.heading_min_deg},
              {"heading_max_deg", c.gen.heading_max_deg}};
  j["paths"] = {{"data", c.paths.data},           {"val", c.paths.val},
                {"out", c.paths.out},             {"spec", c.paths.spec},
                {"ensemble", c.paths.ensemble},   {"sequences", c.paths.sequences},
                {"estimates", c.paths.estimates}, {"trajectories", c.paths.trajectories}};
  return j;
}

/// Overlays `j` on `base`; keys absent from `j` keep their value in `base`.
inline RunConfig merge_config(RunConfig c, const nlohmann::json& j) {
  using namespace config_detail;
  try {
    check_keys(j, "config", {"experiment", "seed", "model", "train", "ensemble", "ttt", "eval", "gen",
                              "paths"});
    read(j, "experiment", c.experiment);
    read(j, "seed", c.seed);
    if (j.contains("model")) {
      nlohmann::json m = c.model;
      m.update(j.at("model"));
      c.model = m.get<ModelConfig>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, "train", {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "aux_weight",
                              "window_stride", "speed_gate", "stop_gradient_on_rotated",
                              "gate_on_prediction"});
      read(t, "epochs", c.train.epochs);
      read(t, "batch_size", c.train.batch_size);
      read(t, "lr", c.train.adam.lr);
      read(t, "beta1", c.train.adam.beta1);
      read(t, "beta2", c.train.adam.beta2);
      read(t, "eps", c.train.adam.eps);
      read(t, "aux_weight", c.train.aux_weight);
      read(t, "window_stride", c.train.window_stride);
      read(t, "speed_gate", c.train.equivariance.speed_gate);
      read(t, "stop_gradient_on_rotated", c.train.equivariance.stop_gradient_on_rotated);
      read(t, "gate_on_prediction", c.train.gate_on_prediction);
    }
    if (j.contains("ensemble")) {
      const auto& e = j.at("ensemble");
      check_keys(e, "ensemble", {"members", "seeds", "variance_reduction", "data_split"});
      read(e, "members", c.ensemble.members);
      read(e, "seeds", c.ensemble.seeds);
      if (e.contains("variance_reduction"))
        c.ensemble.variance_reduction = variance_reduction_from_string(e.at("variance_reduction").get<std::string>());
      if (e.contains("data_split"))
        c.ensemble.data_split = data_split_from_string(e.at("data_split").get<std::string>());
    }
    if (j.contains("ttt")) {
      const auto& t = j.at("ttt");
      check_keys(t, "ttt", {"batch_size", "sample_stride", "angles_deg", "max_updates_per_batch",
                            "stop_threshold", "restore_threshold", "ttt_lr", "mode", "ttt_update",
                            "predictor", "speed_gate", "stop_gradient_on_rotated"});
      read(t, "batch_size", c.ttt.batch_size);
      read(t, "sample_stride", c.ttt.sample_stride);
      read(t, "angles_deg", c.ttt.angles_deg);
      read(t, "max_updates_per_batch", c.ttt.max_updates_per_batch);
      read(t, "stop_threshold", c.ttt.stop_threshold);
      read(t, "restore_threshold", c.ttt.restore_threshold);
      read(t, "ttt_lr", c.ttt.ttt_lr);
      if (t.contains("mode")) c.ttt.mode = ttt_mode_from_string(t.at("mode").get<std::string>());
      if (t.contains("ttt_update")) c.ttt.ttt_update = ttt_update_from_string(t.at("ttt_update").get<std::string>());
      if (t.contains("predictor")) c.ttt.predictor = predictor_from_string(t.at("predictor").get<std::string>());
      read(t, "speed_gate", c.ttt.speed_gate);
      read(t, "stop_gradient_on_rotated", c.ttt.stop_gradient_on_rotated);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      check_keys(e, "eval", {"policy", "rte_interval", "rte_style", "umeyama_scale", "window_stride"});
      if (e.contains("policy")) c.eval.policy = policy_from_string(e.at("policy").get<std::string>());
      read(e, "rte_interval", c.eval.rte_interval);
      if (e.contains("rte_style")) c.eval.rte_style = rte_style_from_string(e.at("rte_style").get<std::string>());
      read(e, "umeyama_scale", c.eval.umeyama_scale);
      read(e, "window_stride", c.eval.window_stride);
    }
    if (j.contains("gen")) {
      const auto& g = j.at("gen");
      check_keys(g, "gen", {"preset", "sequences", "duration", "heading_min_deg", "heading_max_deg"});
      read(g, "preset", c.gen.preset);
      read(g, "sequences", c.gen.sequences);
      read(g, "duration", c.gen.duration);
      read(g, "heading_min_deg", c.gen.heading_min_deg);
      read(g, "heading_max_deg", c.gen.heading_max_deg);
    }
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p, "paths", {"data", "val", "out", "spec", "ensemble", "sequences", "estimates",
                              "trajectories"});
      read(p, "data", c.paths.data);
      read(p, "val", c.paths.val);
      read(p, "out", c.paths.out);
      read(p, "spec", c.paths.spec);
      read(p, "ensemble", c.paths.ensemble);
      read(p, "sequences", c.paths.sequences);
      read(p, "estimates", c.paths.estimates);
      read(p, "trajectories", c.paths.trajectories);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  c.ttt.variance_reduction = c.ensemble.variance_reduction;
  c.validate();
  return c;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) { return merge_config(RunConfig{}, j); }

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

/// Applies a single override "section.key=value"; the value is parsed as
/// JSON, falling back to a plain string.
inline RunConfig apply_override(const RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw Error(ErrorCode::InvalidConfig, "override must look like key=value: '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json patch;
  nlohmann::json* cursor = &patch;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw Error(ErrorCode::InvalidConfig, "bad override key '" + path + "'");
    cursor = &(*cursor)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *cursor = value;
  return merge_config(c, patch);
}

}  // namespace rio
