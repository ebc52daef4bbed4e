#pragma once

// Deep ensembles: M independently trained members, predictive mean and
// population variance, pristine snapshots for restore.

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rio/diffcore.hpp"
#include "rio/error.hpp"
#include "rio/model.hpp"
#include "rio/parallel.hpp"
#include "rio/training.hpp"

namespace rio {

enum class VarianceReduction { Sum, Max, Norm };

inline std::string to_string(VarianceReduction r) {
  switch (r) {
    case VarianceReduction::Sum: return "sum";
    case VarianceReduction::Max: return "max";
    case VarianceReduction::Norm: return "norm";
  }
  return "sum";
}

inline VarianceReduction variance_reduction_from_string(const std::string& s) {
  if (s == "sum") return VarianceReduction::Sum;
  if (s == "max") return VarianceReduction::Max;
  if (s == "norm") return VarianceReduction::Norm;
  throw Error(ErrorCode::InvalidConfig, "variance_reduction must be sum|max|norm, got '" + s + "'");
}

inline double reduce_variance(const Vec3& var, VarianceReduction r) {
  switch (r) {
    case VarianceReduction::Sum: return var.sum();
    case VarianceReduction::Max: return var.maxCoeff();
    case VarianceReduction::Norm: return var.norm();
  }
  return var.sum();
}

class EnsembleState {
 public:
  std::vector<ModelParams> members;
  std::vector<diff::AdamState> member_adam;

  EnsembleState() = default;

  /// Takes the members as trained; their current values become the
  /// pristine snapshots.
  explicit EnsembleState(std::vector<ModelParams> trained)
      : members(std::move(trained)), member_adam(members.size()), pristine_(members) {
    for (std::size_t m = 1; m < members.size(); ++m) {
      if (!(members[m].config == members[0].config))
        throw Error(ErrorCode::InvalidConfig, "ensemble members must share one model config");
    }
  }

  std::size_t size() const { return members.size(); }
  const std::vector<ModelParams>& pristine() const { return pristine_; }

  /// Resets every member to its pristine snapshot and clears optimizer state.
  void restore() {
    members = pristine_;
    for (auto& a : member_adam) a.reset();
  }

 private:
  std::vector<ModelParams> pristine_;
};

struct EnsembleEstimate {
  Vec3 mean = Vec3::Zero();
  Vec3 variance = Vec3::Zero();  // per component, population (1/M)
  double scalar_variance = 0.0;  // reduction of `variance`
};

/// Mean and population variance of member outputs. Computed around the first
/// member so identical outputs give exactly zero variance.
inline std::vector<EnsembleEstimate> combine_predictions(
    const std::vector<std::vector<Vec3>>& per_member,
    VarianceReduction reduction = VarianceReduction::Sum) {
  if (per_member.empty()) return {};
  const std::size_t M = per_member.size(), n = per_member[0].size();
  for (const auto& p : per_member) {
    if (p.size() != n) throw Error(ErrorCode::ShapeMismatch, "member prediction counts differ");
  }
  std::vector<EnsembleEstimate> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 ref = per_member[0][i];
    Vec3 shift = Vec3::Zero();
    for (std::size_t m = 0; m < M; ++m) shift += per_member[m][i] - ref;
    out[i].mean = ref + shift / double(M);
    Vec3 var = Vec3::Zero();
    for (std::size_t m = 0; m < M; ++m) var += (per_member[m][i] - out[i].mean).cwiseAbs2();
    out[i].variance = var / double(M);
    out[i].scalar_variance = reduce_variance(out[i].variance, reduction);
  }
  return out;
}

inline std::vector<std::vector<Vec3>> member_predictions(const EnsembleState& state,
                                                         std::span<const ImuWindow> windows) {
  std::vector<std::vector<Vec3>> per(state.size());
  parallel_for(state.size(), [&](std::size_t m) { per[m] = predict_velocity(state.members[m], windows); });
  return per;
}

inline std::vector<EnsembleEstimate> ensemble_predict(
    const EnsembleState& state, std::span<const ImuWindow> windows,
    VarianceReduction reduction = VarianceReduction::Sum) {
  return combine_predictions(member_predictions(state, windows), reduction);
}

/// How training data is shared across members. Partitioned gives member m
/// the sequences with index i where i mod M == m.
enum class DataSplit { Shared, Partitioned };

inline std::string to_string(DataSplit d) { return d == DataSplit::Shared ? "shared" : "partitioned"; }

inline DataSplit data_split_from_string(const std::string& s) {
  if (s == "shared") return DataSplit::Shared;
  if (s == "partitioned") return DataSplit::Partitioned;
  throw Error(ErrorCode::InvalidConfig, "unknown data split '" + s + "'");
}

struct EnsembleTrainResult {
  EnsembleState state;
  std::vector<std::uint64_t> seeds;
  std::vector<TrainResult> members;  // stats; params also live in `state`
};

/// Trains M members, member m from init seed seeds[m] with shuffle and angle
/// streams also rooted at seeds[m].
inline EnsembleTrainResult train_ensemble(const ModelConfig& model_cfg, const WindowDataset& train,
                                          const WindowDataset& val, const TrainConfig& cfg,
                                          const std::vector<std::uint64_t>& seeds,
                                          const TrainHooks& hooks = {},
                                          DataSplit split = DataSplit::Shared) {
  if (seeds.size() < 2) throw Error(ErrorCode::InvalidConfig, "an ensemble needs at least 2 members");
  const std::size_t M = seeds.size();
  if (split == DataSplit::Partitioned && train.sequences().size() < M)
    throw Error(ErrorCode::InvalidConfig, "partitioned split needs at least one sequence per member");
  model_cfg.validate();
  EnsembleTrainResult out;
  out.seeds = seeds;
  out.members.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t m) {
    TrainConfig c = cfg;
    c.seed = seeds[m];
    const WindowDataset part =
        split == DataSplit::Shared
            ? train
            : train.subset_by_sequence([&](std::size_t i) { return i % M == m; });
    out.members[m] = joint_train(init_model(model_cfg, seeds[m]), part, val, c,
                                 thread_count() == 1 ? hooks : TrainHooks{});
  });
  std::vector<ModelParams> params;
  for (const auto& r : out.members) params.push_back(r.params);
  out.state = EnsembleState(std::move(params));
  return out;
}

/// Seeds for M members derived from one root seed.
inline std::vector<std::uint64_t> member_seeds(std::uint64_t root, std::size_t M) {
  std::vector<std::uint64_t> s;
  for (std::size_t m = 0; m < M; ++m) s.push_back(derive_seed(root, "member", m));
  return s;
}

// ---------------------------------------------------------------------------
// Ensemble checkpoint: DIR/ensemble.json + DIR/memberN.{json,bin}.

inline constexpr int kEnsembleFormatVersion = 1;

inline void save_ensemble(const std::vector<ModelParams>& members,
                          const std::vector<std::uint64_t>& seeds,
                          const std::filesystem::path& dir) {
  if (members.size() != seeds.size())
    throw Error(ErrorCode::LengthMismatch, "one seed per ensemble member required");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json manifest;
  manifest["format_version"] = kEnsembleFormatVersion;
  manifest["members"] = nlohmann::json::array();
  for (std::size_t m = 0; m < members.size(); ++m) {
    const std::string stem = "member" + std::to_string(m);
    save_checkpoint(members[m], dir / stem);
    manifest["members"].push_back({{"checkpoint", stem}, {"seed", seeds[m]}});
  }
  std::ofstream out(dir / "ensemble.json");
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / "ensemble.json").string());
  out << manifest.dump(2) << '\n';
}

struct LoadedEnsemble {
  EnsembleState state;
  std::vector<std::uint64_t> seeds;
};

inline LoadedEnsemble load_ensemble(const std::filesystem::path& dir) {
  const auto path = dir / "ensemble.json";
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + e.what());
  }
  if (!manifest.contains("format_version") || manifest["format_version"] != kEnsembleFormatVersion)
    throw Error(ErrorCode::VersionMismatch, path.string() + ": unsupported format_version");
  if (!manifest.contains("members") || !manifest["members"].is_array())
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": missing member list");
  std::vector<ModelParams> members;
  LoadedEnsemble out;
  try {
    for (const auto& m : manifest["members"]) {
      members.push_back(load_checkpoint(dir / m.at("checkpoint").get<std::string>()));
      out.seeds.push_back(m.at("seed").get<std::uint64_t>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": " + e.what());
  }
  if (members.size() < 2) throw Error(ErrorCode::CorruptCheckpoint, path.string() + ": fewer than 2 members");
  out.state = EnsembleState(std::move(members));
  return out;
}

}  // namespace rio
