// rio: synthetic data generation, training, test-time adaptation and
// evaluation for rotation-equivariant inertial odometry.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rio/config.hpp"
#include "rio/ensemble.hpp"
#include "rio/report.hpp"
#include "rio/runtime.hpp"
#include "rio/sequence_io.hpp"
#include "rio/synth.hpp"
#include "rio/training.hpp"
#include "rio/trajmetrics.hpp"
#include "rio/ttt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using rio::Error;
using rio::ErrorCode;

// ---------------------------------------------------------------------------
// Files

/// Expands directories to their files ending in `suffix` (sorted); plain
/// files pass through.
std::vector<fs::path> collect(const std::vector<std::string>& inputs, const std::string& suffix) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        const auto name = e.path().filename().string();
        if (e.is_regular_file() && name.size() >= suffix.size() &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
          found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else if (fs::is_regular_file(p)) {
      out.push_back(p);
    } else {
      throw Error(ErrorCode::IoError, "no such file or directory: " + in);
    }
  }
  return out;
}

std::vector<rio::ImuSequence> read_sequences(const std::string& dir) {
  std::vector<rio::ImuSequence> seqs;
  for (const auto& p : collect({dir}, ".csv")) seqs.push_back(rio::read_sequence_csv(p));
  return seqs;
}

fs::path out_dir(const rio::RunConfig& c) {
  if (c.paths.out.empty()) throw Error(ErrorCode::InvalidConfig, "--out is required");
  const fs::path dir(c.paths.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed: " + path.string());
}

std::string num_or_nan(double v) { return std::isfinite(v) ? rio::io_detail::fmt(v) : "nan"; }

void write_epoch_rows(std::ostream& out, const rio::TrainResult& r, bool aux,
                      const std::string& prefix) {
  out << prefix << "0,nan," << (aux ? "nan,nan," : "") << num_or_nan(r.initial_val_mse) << '\n';
  for (const auto& e : r.epochs) {
    out << prefix << e.epoch << ',' << num_or_nan(e.supervised_loss) << ',';
    if (aux) out << num_or_nan(e.aux_loss) << ',' << num_or_nan(e.gated_fraction) << ',';
    out << num_or_nan(e.val_mse) << '\n';
  }
}

std::string stats_header(bool aux, const std::string& prefix) {
  return prefix + "epoch,supervised_loss," + (aux ? "aux_loss,gated_fraction," : "") + "val_mse\n";
}

rio::TrainHooks progress(const std::string& label) {
  rio::TrainHooks h;
  h.on_epoch = [label](const rio::EpochStats& e) {
    std::fprintf(stderr, "%sepoch %zu sup %.5f aux %.5f val %.5f\n", label.c_str(), e.epoch,
                 e.supervised_loss, e.aux_loss, e.val_mse);
  };
  return h;
}

struct Datasets {
  rio::WindowDataset train, val;
};

Datasets load_datasets(const rio::RunConfig& c) {
  if (c.paths.data.empty()) throw Error(ErrorCode::InvalidConfig, "--data is required");
  Datasets d;
  auto train = read_sequences(c.paths.data);
  if (train.empty()) throw Error(ErrorCode::InvalidConfig, "no sequences in " + c.paths.data);
  d.train = rio::WindowDataset(std::move(train), c.train.window_stride);
  if (!c.paths.val.empty()) d.val = rio::WindowDataset(read_sequences(c.paths.val), c.train.window_stride);
  return d;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen(const rio::RunConfig& c) {
  const auto dir = out_dir(c);
  rio::Scenario base;
  if (!c.paths.spec.empty()) {
    std::ifstream in(c.paths.spec);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + c.paths.spec);
    try {
      base = json::parse(in).get<rio::Scenario>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidSpec, c.paths.spec + ": " + e.what());
    }
  }
  const rio::PresetOptions opt{c.gen.duration, c.gen.heading_min_deg, c.gen.heading_max_deg};
  for (std::size_t i = 0; i < c.gen.sequences; ++i) {
    const std::uint64_t seed = rio::derive_seed(c.seed, "sequence", i);
    const rio::Scenario sc = c.paths.spec.empty() ? rio::make_preset(c.gen.preset, seed, opt) : base;
    rio::ImuSequence seq = rio::generate(sc, seed);
    char idx[16];
    std::snprintf(idx, sizeof idx, "%03zu", i);
    seq.name = sc.preset + "_" + idx;
    rio::write_sequence_csv(dir / (seq.name + ".csv"), seq);
    const json sidecar = {{"preset", sc.preset}, {"index", i}, {"seed", seed},
                          {"root_seed", c.seed}, {"scenario", sc}};
    write_text(dir / (seq.name + ".json"), sidecar.dump(2) + "\n");
  }
  std::fprintf(stderr, "wrote %zu sequences to %s\n", c.gen.sequences, dir.string().c_str());
}

void cmd_train(const rio::RunConfig& c) {
  const auto d = load_datasets(c);
  const auto dir = out_dir(c);
  rio::TrainConfig tc = c.train;
  tc.seed = c.seed;
  std::fprintf(stderr, "train: %zu windows, val %zu\n", d.train.size(), d.val.size());
  const auto r = rio::joint_train(rio::init_model(c.model, c.seed), d.train, d.val, tc, progress(""));
  rio::save_checkpoint(r.params, dir / "model");
  const bool aux = tc.aux_weight > 0.0;
  std::ostringstream s;
  s << stats_header(aux, "");
  write_epoch_rows(s, r, aux, "");
  write_text(dir / "train_stats.csv", s.str());
  write_text(dir / "config.json", rio::to_json(c).dump(2) + "\n");
}

void cmd_ensemble(const rio::RunConfig& c) {
  const auto d = load_datasets(c);
  const auto dir = out_dir(c);
  const auto seeds = c.member_seed_list();
  std::fprintf(stderr, "ensemble: %zu members, %zu windows\n", seeds.size(), d.train.size());
  const auto r = rio::train_ensemble(c.model, d.train, d.val, c.train, seeds, progress("member: "),
                                     c.ensemble.data_split);
  rio::save_ensemble(r.state.members, r.seeds, dir);
  const bool aux = c.train.aux_weight > 0.0;
  std::ostringstream s;
  s << stats_header(aux, "member,");
  for (std::size_t m = 0; m < r.members.size(); ++m)
    write_epoch_rows(s, r.members[m], aux, std::to_string(m) + ",");
  write_text(dir / "train_stats.csv", s.str());
  write_text(dir / "config.json", rio::to_json(c).dump(2) + "\n");
}

void cmd_ttt(const rio::RunConfig& c) {
  if (c.paths.ensemble.empty()) throw Error(ErrorCode::InvalidConfig, "--ensemble is required");
  if (c.paths.sequences.empty()) throw Error(ErrorCode::InvalidConfig, "--sequence is required");
  auto loaded = rio::load_ensemble(c.paths.ensemble);
  const auto dir = out_dir(c);
  for (const auto& path : collect(c.paths.sequences, ".csv")) {
    const auto seq = rio::read_sequence_csv(path);
    loaded.state.restore();
    const auto r = rio::run_stream(loaded.state, seq, c.ttt);
    rio::write_velocity_csv(dir / (seq.name + "_vel.csv"), r.times, r.velocities);
    rio::write_events_csv(dir / (seq.name + "_events.csv"), r.events);
    std::ostringstream v;
    v << "t,variance\n";
    for (std::size_t i = 0; i < r.times.size(); ++i)
      v << rio::io_detail::fmt(r.times[i]) << ',' << num_or_nan(r.variances[i]) << '\n';
    write_text(dir / (seq.name + "_var.csv"), v.str());
    std::size_t updated = 0, restored = 0;
    for (const auto& e : r.events) {
      updated += e.action == rio::TttAction::Updated;
      restored += e.action == rio::TttAction::Restored;
    }
    std::fprintf(stderr, "%s: %zu batches, %zu updated, %zu restored\n", seq.name.c_str(),
                 r.events.size(), updated, restored);
  }
}

/// Velocity files name their sequence as "<name>_vel.csv".
std::string velocity_stem(const fs::path& p) {
  std::string s = p.stem().string();
  if (s.size() > 4 && s.compare(s.size() - 4, 4, "_vel") == 0) s.resize(s.size() - 4);
  return s;
}

void cmd_eval(const rio::RunConfig& c) {
  if (c.paths.estimates.empty()) throw Error(ErrorCode::InvalidConfig, "--est is required");
  if (c.paths.sequences.empty()) throw Error(ErrorCode::InvalidConfig, "--sequence is required");
  std::map<std::string, fs::path> by_name;
  for (const auto& p : collect(c.paths.sequences, ".csv")) by_name[p.stem().string()] = p;
  const auto dir = out_dir(c);
  fs::create_directories(dir / "traj");
  std::vector<rio::SequenceReport> rows;
  for (const auto& est_path : collect(c.paths.estimates, "_vel.csv")) {
    const std::string name = velocity_stem(est_path);
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorCode::IoError, "no sequence file for estimate " + name);
    const auto vel = rio::read_velocity_csv(est_path);
    const auto seq = rio::read_sequence_csv(it->second);
    rio::EvalOptions opt = c.eval;
    if (vel.times.size() >= 2)
      opt.window_stride = static_cast<std::size_t>(std::llround((vel.times[1] - vel.times[0]) * rio::kImuRateHz));
    if (opt.window_stride == 0) throw Error(ErrorCode::ParseError, est_path.string() + ": repeated timestamps");
    const auto tracks = rio::evaluate_tracks(vel.velocities, seq, opt);
    std::string scenario = rio::scenario_of(name);
    const auto sidecar = fs::path(it->second).replace_extension(".json");
    if (fs::exists(sidecar)) {
      std::ifstream in(sidecar);
      try {
        scenario = json::parse(in).value("preset", scenario);
      } catch (const json::exception& e) {
        throw Error(ErrorCode::ParseError, sidecar.string() + ": " + e.what());
      }
    }
    rows.push_back({name, scenario, tracks.metrics});
    rio::write_trajectory_csv(dir / "traj" / (name + ".csv"), tracks.estimate, tracks.ground_truth);
  }
  std::ostringstream csv;
  rio::write_metrics_csv(csv, rows);
  write_text(dir / "metrics.csv", csv.str());
  json summary = rio::metrics_summary(rows);
  summary["policy"] = rio::config_detail::policy_name(c.eval.policy);
  summary["rte_interval"] = c.eval.rte_interval;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << csv.str();
}

void cmd_plot(const rio::RunConfig& c) {
  if (c.paths.trajectories.empty()) throw Error(ErrorCode::InvalidConfig, "--traj is required");
  if (c.paths.out.empty()) throw Error(ErrorCode::InvalidConfig, "--out is required");
  std::vector<rio::TrajectoryPair> pairs;
  for (const auto& p : collect(c.paths.trajectories, ".csv")) pairs.push_back(rio::read_trajectory_csv(p));
  const fs::path out(c.paths.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, rio::render_svg(pairs));
}

// ---------------------------------------------------------------------------
// Flags: each one writes a single config key into a JSON patch.

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  json patch = json::object();
  std::vector<std::function<void()>> appliers;

  template <typename T>
  void bind(CLI::App* app, const std::string& name, const std::string& section, const std::string& key,
            const std::string& help) {
    auto value = std::make_shared<std::optional<T>>();
    app->add_option(name, *value, help + " [" + (section.empty() ? "" : section + ".") + key + "]");
    appliers.push_back([this, value, section, key] {
      if (!*value) return;
      if (section.empty()) {
        patch[key] = **value;
      } else {
        patch[section][key] = **value;
      }
    });
  }

  template <typename T>
  void bind_list(CLI::App* app, const std::string& name, const std::string& section,
                 const std::string& key, const std::string& help) {
    auto value = std::make_shared<std::vector<T>>();
    app->add_option(name, *value, help + " [" + section + "." + key + "]");
    appliers.push_back([this, value, section, key] {
      if (!value->empty()) patch[section][key] = *value;
    });
  }
};

void common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON run configuration");
  app->add_option("--set", f.sets, "override one config key, e.g. --set train.lr=0.001");
  f.bind<std::uint64_t>(app, "--seed", "", "seed", "root seed");
  f.bind<std::string>(app, "--out", "paths", "out", "output location");
}

void training_flags(CLI::App* app, Flags& f) {
  f.bind<std::string>(app, "--data", "paths", "data", "directory of training sequence CSVs");
  f.bind<std::string>(app, "--val", "paths", "val", "directory of validation sequence CSVs");
  f.bind<std::size_t>(app, "--epochs", "train", "epochs", "training epochs");
  f.bind<std::size_t>(app, "--batch-size", "train", "batch_size", "mini-batch size");
  f.bind<double>(app, "--lr", "train", "lr", "Adam learning rate");
  f.bind<double>(app, "--aux-weight", "train", "aux_weight", "auxiliary loss weight (0 = supervised only)");
  f.bind<std::size_t>(app, "--window-stride", "train", "window_stride", "frames between training windows");
}

rio::RunConfig resolve(const Flags& f) {
  rio::RunConfig c = f.config.empty() ? rio::RunConfig{} : rio::load_run_config(f.config);
  for (const auto& s : f.sets) c = rio::apply_override(c, s);
  return rio::merge_config(c, f.patch);
}

int fail(const std::string& code, const std::string& message, int status) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << std::endl;
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  rio::tune_allocator();
  CLI::App app{"rio: rotation-equivariant inertial odometry with test-time adaptation"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen", "generate synthetic sequences with ground truth");
  common(gen, f);
  f.bind<std::string>(gen, "--spec", "paths", "spec", "scenario JSON (preset, spec, shifts)");
  f.bind<std::string>(gen, "--preset", "gen", "preset", "named preset when no --spec is given");
  f.bind<std::size_t>(gen, "--sequences", "gen", "sequences", "number of sequences");
  f.bind<double>(gen, "--duration", "gen", "duration", "preset duration in seconds");
  f.bind<double>(gen, "--heading-min", "gen", "heading_min_deg", "lowest initial heading (deg)");
  f.bind<double>(gen, "--heading-max", "gen", "heading_max_deg", "highest initial heading (deg)");

  auto* train = app.add_subcommand("train", "train one model");
  common(train, f);
  training_flags(train, f);

  auto* ens = app.add_subcommand("ensemble", "train an ensemble");
  common(ens, f);
  training_flags(ens, f);
  f.bind<std::size_t>(ens, "-M,--members", "ensemble", "members", "ensemble size");
  f.bind_list<std::uint64_t>(ens, "--seeds", "ensemble", "seeds", "one seed per member");
  f.bind<std::string>(ens, "--data-split", "ensemble", "data_split", "shared or partitioned");

  auto* ttt = app.add_subcommand("ttt", "streaming inference with test-time training");
  common(ttt, f);
  f.bind<std::string>(ttt, "--ensemble", "paths", "ensemble", "ensemble directory");
  f.bind_list<std::string>(ttt, "--sequence", "paths", "sequences", "sequence CSVs or directories");
  f.bind<std::string>(ttt, "--mode", "ttt", "mode", "adaptive|naive|off");
  f.bind<std::size_t>(ttt, "--max-updates", "ttt", "max_updates_per_batch", "update cap per batch");
  f.bind<double>(ttt, "--ttt-lr", "ttt", "ttt_lr", "test-time learning rate");
  f.bind<std::size_t>(ttt, "--batch-size", "ttt", "batch_size", "windows per TTT batch");

  auto* eval = app.add_subcommand("eval", "trajectory metrics for velocity estimates");
  common(eval, f);
  f.bind_list<std::string>(eval, "--est", "paths", "estimates", "velocity CSVs or directories");
  f.bind_list<std::string>(eval, "--sequence", "paths", "sequences", "sequence CSVs or directories");
  f.bind<std::string>(eval, "--policy", "eval", "policy", "aligned|umeyama");
  f.bind<double>(eval, "--rte-interval", "eval", "rte_interval", "RTE interval in seconds");

  auto* plot = app.add_subcommand("plot", "SVG of estimated vs ground-truth trajectories");
  common(plot, f);
  f.bind_list<std::string>(plot, "--traj", "paths", "trajectories", "trajectory CSVs or directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what(), 2);
  }

  try {
    for (auto& a : f.appliers) a();
    const rio::RunConfig c = resolve(f);
    if (gen->parsed()) cmd_gen(c);
    if (train->parsed()) cmd_train(c);
    if (ens->parsed()) cmd_ensemble(c);
    if (ttt->parsed()) cmd_ttt(c);
    if (eval->parsed()) cmd_eval(c);
    if (plot->parsed()) cmd_plot(c);
  } catch (const rio::Error& e) {
    std::string msg = e.what();
    const std::string prefix = std::string(rio::to_string(e.code())) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
    return fail(std::string(rio::to_string(e.code())), msg, 1);
  } catch (const std::exception& e) {
    return fail("Internal", e.what(), 3);
  }
  return 0;
}
