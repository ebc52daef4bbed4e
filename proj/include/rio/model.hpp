#pragma once

// Velocity-regression network: residual stack of 1-D convolutions with
// group normalization, global average pooling over time, affine head to a
// 3-D velocity.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "rio/diffcore.hpp"
#include "rio/error.hpp"
#include "rio/imu.hpp"
#include "rio/rng.hpp"

namespace rio {

inline constexpr int kCheckpointFormatVersion = 1;

struct ModelConfig {
  // "resnet1d" is the regression backbone; "linear_mean" (time-averaged
  // input through one affine map) is a tiny baseline used for oracles.
  std::string architecture = "resnet1d";
  std::size_t block_count = 4;
  std::vector<std::size_t> channel_widths = {16, 32, 64, 128};
  std::size_t group_size = 8;  // channels per normalization group
  std::size_t kernel = 3;
  std::size_t input_channels = kInputChannels;
  std::size_t input_frames = kWindowFrames;
  std::size_t output_dim = 3;
  double head_init_scale = 0.01;  // 0 gives an all-zero head

  /// Groups used for a layer of `channels` channels.
  std::size_t groups_for(std::size_t channels) const {
    return channels <= group_size ? 1 : channels / group_size;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (architecture != "resnet1d" && architecture != "linear_mean")
      fail("unknown architecture '" + architecture + "'");
    if (block_count < 1) fail("block_count must be >= 1");
    if (channel_widths.size() != block_count) fail("channel_widths must list one width per block");
    for (std::size_t i = 0; i < channel_widths.size(); ++i) {
      if (channel_widths[i] == 0) fail("channel widths must be positive");
      if (i > 0 && channel_widths[i] < channel_widths[i - 1]) fail("channel widths must be nondecreasing");
      if (channel_widths[i] > group_size && channel_widths[i] % group_size != 0)
        fail("width " + std::to_string(channel_widths[i]) + " not divisible by group_size");
    }
    if (group_size == 0) fail("group_size must be positive");
    if (kernel == 0 || kernel % 2 == 0) fail("kernel must be odd");
    if (input_channels != kInputChannels) fail("input_channels must be 6");
    if (input_frames != kWindowFrames) fail("input_frames must be 200");
    if (output_dim != 3) fail("output_dim must be 3");
    if (head_init_scale < 0.0) fail("head_init_scale must be >= 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Compact preset used by the desk-scale experiments.
inline ModelConfig compact_model_config() {
  ModelConfig c;
  c.channel_widths = {8, 16, 16, 32};
  return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"architecture", c.architecture}, {"block_count", c.block_count},   {"channel_widths", c.channel_widths},
                     {"group_size", c.group_size},     {"kernel", c.kernel},
                     {"input_channels", c.input_channels}, {"input_frames", c.input_frames},
                     {"output_dim", c.output_dim},     {"head_init_scale", c.head_init_scale}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const char* keys[] = {"architecture", "block_count", "channel_widths", "group_size", "kernel",
                               "input_channels", "input_frames", "output_dim", "head_init_scale"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(keys), std::end(keys), [&](const char* k) { return it.key() == k; }) ==
        std::end(keys))
      throw Error(ErrorCode::InvalidConfig, "unknown model key '" + it.key() + "'");
  }
  c.architecture = j.value("architecture", c.architecture);
  c.block_count = j.value("block_count", c.block_count);
  c.channel_widths = j.value("channel_widths", c.channel_widths);
  c.group_size = j.value("group_size", c.group_size);
  c.kernel = j.value("kernel", c.kernel);
  c.input_channels = j.value("input_channels", c.input_channels);
  c.input_frames = j.value("input_frames", c.input_frames);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.head_init_scale = j.value("head_init_scale", c.head_init_scale);
}

struct ModelParams {
  ModelConfig config;
  std::vector<diff::ParamTensor> tensors;
  std::uint64_t seed = 0;

  bool operator==(const ModelParams& o) const {
    if (!(config == o.config) || seed != o.seed || tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& a = tensors[i];
      const auto& b = o.tensors[i];
      if (a.name != b.name || a.shape != b.shape || a.values.size() != b.values.size()) return false;
      if (std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) != 0)
        return false;
    }
    return true;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.values.size();
    return n;
  }
};

namespace model_detail {

struct TensorSpec {
  std::string name;
  diff::Shape shape;
};

inline bool needs_shortcut(std::size_t in, std::size_t out, std::size_t stride) {
  return in != out || stride != 1;
}

inline std::size_t block_stride(std::size_t block) { return block == 0 ? 1 : 2; }

}  // namespace model_detail

/// Ordered tensor names and shapes implied by a config.
inline std::vector<model_detail::TensorSpec> tensor_layout(const ModelConfig& cfg) {
  std::vector<model_detail::TensorSpec> specs;
  if (cfg.architecture == "linear_mean") {
    specs.push_back({"head.weight", {cfg.output_dim, cfg.input_channels}});
    specs.push_back({"head.bias", {cfg.output_dim}});
    return specs;
  }
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.block_count; ++b) {
    const std::size_t w = cfg.channel_widths[b];
    const std::string p = "block" + std::to_string(b) + ".";
    specs.push_back({p + "conv1.weight", {w, in, cfg.kernel}});
    specs.push_back({p + "conv1.bias", {w}});
    specs.push_back({p + "gn1.gamma", {w}});
    specs.push_back({p + "gn1.beta", {w}});
    specs.push_back({p + "conv2.weight", {w, w, cfg.kernel}});
    specs.push_back({p + "conv2.bias", {w}});
    specs.push_back({p + "gn2.gamma", {w}});
    specs.push_back({p + "gn2.beta", {w}});
    if (model_detail::needs_shortcut(in, w, model_detail::block_stride(b))) {
      specs.push_back({p + "shortcut.weight", {w, in, 1}});
      specs.push_back({p + "shortcut.bias", {w}});
    }
    in = w;
  }
  specs.push_back({"head.weight", {cfg.output_dim, in}});
  specs.push_back({"head.bias", {cfg.output_dim}});
  return specs;
}

inline ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams params{config, {}, seed};
  Rng rng = make_rng(seed, "init");
  for (auto& spec : tensor_layout(config)) {
    diff::ParamTensor t{spec.name, spec.shape, std::vector<float>(diff::numel(spec.shape), 0.0f)};
    const bool is_weight = spec.name.ends_with(".weight");
    if (spec.name.ends_with(".gamma")) {
      std::fill(t.values.begin(), t.values.end(), 1.0f);
    } else if (is_weight && spec.name.starts_with("head.") && config.architecture == "linear_mean") {
      for (auto& v : t.values) v = static_cast<float>(config.head_init_scale * standard_normal(rng));
    } else if (is_weight && spec.name.starts_with("head.")) {
      for (auto& v : t.values) v = static_cast<float>(config.head_init_scale * standard_normal(rng));
    } else if (is_weight) {
      const double fan_in = static_cast<double>(spec.shape[1] * spec.shape[2]);
      const double stdev = std::sqrt(2.0 / fan_in);
      for (auto& v : t.values) v = static_cast<float>(stdev * standard_normal(rng));
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

/// Network forward pass on input x: [B, 6, 200] -> [B, 3]. `p` must be the
/// tensors of `cfg` in layout order, bound on the same tape.
template <typename S>
diff::Var<S> forward(const ModelConfig& cfg, const std::vector<diff::Var<S>>& p, diff::Var<S> x) {
  std::size_t k = 0;
  auto next = [&]() -> diff::Var<S> {
    if (k >= p.size()) x.tape->shape_error("forward", "too few parameter tensors");
    return p[k++];
  };
  if (cfg.architecture == "linear_mean") {
    auto hw = next(), hb = next();
    return diff::affine(diff::mean_time(x), hw, hb);
  }
  const std::size_t pad = cfg.kernel / 2;
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.block_count; ++b) {
    const std::size_t w = cfg.channel_widths[b];
    const std::size_t stride = model_detail::block_stride(b);
    const std::size_t groups = cfg.groups_for(w);
    auto w1 = next(), b1 = next(), g1 = next(), be1 = next();
    auto w2 = next(), b2 = next(), g2 = next(), be2 = next();
    auto h = diff::conv1d(x, w1, b1, {stride, pad});
    h = diff::relu(diff::group_norm(h, g1, be1, groups));
    h = diff::conv1d(h, w2, b2, {1, pad});
    h = diff::group_norm(h, g2, be2, groups);
    diff::Var<S> shortcut = x;
    if (model_detail::needs_shortcut(in, w, stride)) {
      auto ws = next(), bs = next();
      shortcut = diff::conv1d(x, ws, bs, {stride, 0});
    }
    x = diff::relu(diff::add(h, shortcut));
    in = w;
  }
  auto pooled = diff::mean_time(x);
  auto hw = next(), hb = next();
  if (k != p.size()) x.tape->shape_error("forward", "unused parameter tensors");
  return diff::affine(pooled, hw, hb);
}

template <typename S>
std::vector<diff::ParamTensorT<S>> cast_tensors(const std::vector<diff::ParamTensor>& tensors) {
  std::vector<diff::ParamTensorT<S>> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors)
    out.push_back({t.name, t.shape, std::vector<S>(t.values.begin(), t.values.end())});
  return out;
}

/// Binds parameters as constants (no gradient bookkeeping).
template <typename S>
std::vector<diff::Var<S>> bind_constants(diff::Tape<S>& tape,
                                         const std::vector<diff::ParamTensorT<S>>& tensors) {
  std::vector<diff::Var<S>> vars;
  vars.reserve(tensors.size());
  for (const auto& t : tensors) vars.push_back(tape.constant(t.shape, t.values, "const:" + t.name));
  return vars;
}

template <typename S>
diff::Var<S> pack_batch(diff::Tape<S>& tape, std::span<const ImuWindow> windows) {
  const std::size_t per = kInputChannels * kWindowFrames;
  std::vector<S> data(windows.size() * per);
  for (std::size_t i = 0; i < windows.size(); ++i)
    pack_window<S>(windows[i], std::span<S>(data.data() + i * per, per));
  return tape.constant({windows.size(), kInputChannels, kWindowFrames}, std::move(data), "input");
}

inline std::vector<Vec3> to_vectors(std::span<const float> rows) {
  std::vector<Vec3> out(rows.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = Vec3(rows[3 * i], rows[3 * i + 1], rows[3 * i + 2]);
  return out;
}

inline constexpr std::size_t kPredictChunk = 256;

/// Velocity (m/s) for each window, in order. Windows are evaluated
/// independently, so results do not depend on batch composition.
inline std::vector<Vec3> predict_velocity(const ModelParams& params,
                                          std::span<const ImuWindow> windows) {
  std::vector<Vec3> out;
  out.reserve(windows.size());
  for (std::size_t start = 0; start < windows.size(); start += kPredictChunk) {
    const auto chunk = windows.subspan(start, std::min(kPredictChunk, windows.size() - start));
    diff::Tape<float> tape;
    auto vars = bind_constants(tape, params.tensors);
    auto y = forward(params.config, vars, pack_batch(tape, chunk));
    auto v = to_vectors(y.value());
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: NAME.json manifest + NAME.bin little-endian float32 payload.

namespace model_detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  return v;
}

inline std::filesystem::path with_ext(const std::filesystem::path& stem, const char* ext) {
  return std::filesystem::path(stem.string() + ext);
}

}  // namespace model_detail

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& stem) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = params.config;
  manifest["seed"] = params.seed;
  auto& list = manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : params.tensors) list.push_back({{"name", t.name}, {"shape", t.shape}});

  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream js(model_detail::with_ext(stem, ".json"));
  if (!js) throw Error(ErrorCode::IoError, "cannot write " + stem.string() + ".json");
  js << manifest.dump(2) << "\n";

  std::ofstream bin(model_detail::with_ext(stem, ".bin"), std::ios::binary);
  if (!bin) throw Error(ErrorCode::IoError, "cannot write " + stem.string() + ".bin");
  for (const auto& t : params.tensors)
    for (float v : t.values) {
      const std::uint32_t w = model_detail::to_le(std::bit_cast<std::uint32_t>(v));
      bin.write(reinterpret_cast<const char*>(&w), sizeof w);
    }
}

inline ModelParams load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream js(model_detail::with_ext(stem, ".json"));
  if (!js) throw Error(ErrorCode::IoError, "cannot read " + stem.string() + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("manifest: ") + e.what());
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw Error(ErrorCode::VersionMismatch,
                "checkpoint format " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointFormatVersion));
  }

  ModelParams params;
  try {
    params.config = manifest.at("config").get<ModelConfig>();
    params.seed = manifest.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("manifest: ") + e.what());
  }
  params.config.validate();

  const auto layout = tensor_layout(params.config);
  const auto& list = manifest.at("tensors");
  if (!list.is_array() || list.size() != layout.size()) {
    throw Error(ErrorCode::CorruptCheckpoint, "manifest lists " + std::to_string(list.size()) +
                                                  " tensors, config implies " +
                                                  std::to_string(layout.size()));
  }

  std::ifstream bin(model_detail::with_ext(stem, ".bin"), std::ios::binary | std::ios::ate);
  if (!bin) throw Error(ErrorCode::IoError, "cannot read " + stem.string() + ".bin");
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  bin.seekg(0);

  std::size_t expected = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::string name = list[i].value("name", std::string{});
    diff::Shape shape;
    try {
      shape = list[i].at("shape").get<diff::Shape>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::CorruptCheckpoint, "tensor '" + name + "' has no valid shape");
    }
    if (name != layout[i].name || shape != layout[i].shape) {
      throw Error(ErrorCode::CorruptCheckpoint,
                  "tensor '" + name + "' declared " + diff::shape_str(shape) + ", expected '" +
                      layout[i].name + "' " + diff::shape_str(layout[i].shape));
    }
    expected += diff::numel(shape) * sizeof(float);
  }
  if (bytes != expected) {
    throw Error(ErrorCode::CorruptCheckpoint, "payload has " + std::to_string(bytes) +
                                                  " bytes, manifest declares " +
                                                  std::to_string(expected));
  }

  for (const auto& spec : layout) {
    diff::ParamTensor t{spec.name, spec.shape, std::vector<float>(diff::numel(spec.shape))};
    for (auto& v : t.values) {
      std::uint32_t w = 0;
      bin.read(reinterpret_cast<char*>(&w), sizeof w);
      v = std::bit_cast<float>(model_detail::to_le(w));
      if (!std::isfinite(v))
        throw Error(ErrorCode::CorruptCheckpoint, "tensor '" + spec.name + "' holds non-finite values");
    }
    params.tensors.push_back(std::move(t));
  }
  return params;
}

}  // namespace rio
