#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "treednn/data.hpp"
#include "treednn/error.hpp"
#include "treednn/layers.hpp"
#include "treednn/model.hpp"
#include "treednn/runtime.hpp"
#include "treednn/training.hpp"

// Run configuration: JSON with // and /* */ comments allowed. The reference
// schema lives in configs/reference.jsonc.
namespace treednn::config {

using nlohmann::json;

struct SynthSource {
  std::size_t count = 0;
  std::size_t test_count = 0;
  double spread = 1.0;
  std::optional<std::uint64_t> seed;  // defaults to the run seed at load time
};

struct DataSource {
  std::optional<std::string> csv;       // resolved against the config directory
  std::optional<std::string> test_csv;
  std::optional<SynthSource> synth;
};

struct TaskConfig {
  std::string id;
  std::size_t num_classes = 0;
  std::optional<std::vector<LayerSpec>> branch;
  DepthHint depth_hint = DepthHint::kSmall;
  std::optional<float> weight;  // W_i; when absent on every task, train.branch_weights or 1/k
  DataSource data;
};

struct RunConfig {
  std::uint64_t seed = 0;
  Shape input_shape;
  std::vector<LayerSpec> trunk;
  std::vector<TaskConfig> tasks;
  TrainConfig train;
  CostModel simulator;
  std::string output_dir = "out";
};

namespace detail {

inline void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename V>
V get(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename V>
V get_or(const json& obj, const std::string& key, V fallback, const std::string& where) {
  return obj.contains(key) ? get<V>(obj, key, where) : fallback;
}

inline std::size_t get_size(const json& obj, const std::string& key, const std::string& where) {
  const json& v = obj.contains(key) ? obj.at(key) : json();
  if (!v.is_number_unsigned()) throw ConfigError(where + ": '" + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline std::size_t get_size_or(const json& obj, const std::string& key, std::size_t fallback,
                               const std::string& where) {
  return obj.contains(key) ? get_size(obj, key, where) : fallback;
}

}  // namespace detail

inline LayerSpec layer_from_json(const json& j, const std::string& where) {
  const auto type = detail::get<std::string>(j, "type", where);
  const auto kind = parse_layer_kind(type);
  if (!kind) throw ConfigError(where + ": unknown layer type '" + type + "'");
  using detail::get_size;
  using detail::get_size_or;
  switch (*kind) {
    case LayerKind::kConv2D:
      detail::check_keys(j, {"type", "in", "out", "kernel", "stride", "padding"}, where);
      return LayerSpec::conv2d(get_size(j, "in", where), get_size(j, "out", where), get_size(j, "kernel", where),
                               get_size_or(j, "stride", 1, where), get_size_or(j, "padding", 0, where));
    case LayerKind::kBatchNorm:
      detail::check_keys(j, {"type", "channels", "eps", "momentum"}, where);
      return LayerSpec::batchnorm(get_size(j, "channels", where), detail::get_or<double>(j, "eps", 1e-5, where),
                                  detail::get_or<double>(j, "momentum", 0.1, where));
    case LayerKind::kMaxPool:
      detail::check_keys(j, {"type", "kernel", "stride"}, where);
      return LayerSpec::max_pool(get_size(j, "kernel", where),
                                 get_size_or(j, "stride", get_size(j, "kernel", where), where));
    case LayerKind::kDense:
      detail::check_keys(j, {"type", "in", "out"}, where);
      return LayerSpec::dense(get_size(j, "in", where), get_size(j, "out", where));
    case LayerKind::kResidual: {
      detail::check_keys(j, {"type", "body"}, where);
      std::vector<LayerSpec> body;
      const auto& arr = j.at("body");
      if (!arr.is_array()) throw ConfigError(where + ": residual body must be an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        body.push_back(layer_from_json(arr[i], where + ".body[" + std::to_string(i) + "]"));
      }
      return LayerSpec::residual(std::move(body));
    }
    default:
      detail::check_keys(j, {"type"}, where);
      LayerSpec s;
      s.kind = *kind;
      return s;
  }
}

inline std::vector<LayerSpec> layers_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ConfigError(where + ": expected an array of layers");
  std::vector<LayerSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    out.push_back(layer_from_json(arr[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

inline RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir = ".") {
  json root;
  try {
    root = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  detail::check_keys(root, {"seed", "input_shape", "trunk", "tasks", "train", "simulator", "output"}, "config");
  RunConfig cfg;
  cfg.seed = detail::get_or<std::uint64_t>(root, "seed", 0, "config");
  cfg.input_shape = detail::get<std::vector<std::size_t>>(root, "input_shape", "config");
  if (cfg.input_shape.empty()) throw ConfigError("config.input_shape must not be empty");
  for (std::size_t d : cfg.input_shape)
    if (d == 0) throw ConfigError("config.input_shape extents must be positive");

  const json trunk = root.contains("trunk") ? root.at("trunk") : json("reference");
  if (trunk.is_string() && trunk.get<std::string>() == "reference") {
    if (cfg.input_shape.size() != 3) throw ConfigError("reference trunk needs a (C,H,W) input_shape");
    cfg.trunk = reference_trunk(cfg.input_shape[0]);
  } else {
    cfg.trunk = layers_from_json(trunk, "config.trunk");
  }

  const json& tasks = root.contains("tasks") ? root.at("tasks") : json();
  if (!tasks.is_array() || tasks.empty()) throw ConfigError("config.tasks must be a non-empty array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string where = "config.tasks[" + std::to_string(i) + "]";
    const json& t = tasks[i];
    detail::check_keys(t, {"id", "num_classes", "branch", "depth_hint", "weight", "data"}, where);
    TaskConfig tc;
    tc.id = detail::get<std::string>(t, "id", where);
    validate_task_id(tc.id);
    if (!ids.insert(tc.id).second) throw ConfigError(where + ": duplicate task id '" + tc.id + "'");
    tc.num_classes = detail::get_size(t, "num_classes", where);
    if (tc.num_classes < 2) throw ConfigError(where + ": num_classes must be >= 2");
    if (t.contains("branch")) tc.branch = layers_from_json(t.at("branch"), where + ".branch");
    tc.depth_hint = parse_depth_hint(detail::get_or<std::string>(t, "depth_hint", "small", where));
    if (t.contains("weight")) tc.weight = detail::get<float>(t, "weight", where);

    const json& d = t.contains("data") ? t.at("data") : json();
    detail::check_keys(d, {"csv", "test_csv", "synth"}, where + ".data");
    if (d.contains("csv") == d.contains("synth")) {
      throw ConfigError(where + ".data: exactly one of 'csv' or 'synth' is required");
    }
    if (d.contains("csv")) {
      tc.data.csv = (base_dir / detail::get<std::string>(d, "csv", where)).string();
      if (d.contains("test_csv")) tc.data.test_csv = (base_dir / detail::get<std::string>(d, "test_csv", where)).string();
    } else {
      const json& s = d.at("synth");
      const std::string sw = where + ".data.synth";
      detail::check_keys(s, {"count", "test_count", "spread", "seed"}, sw);
      SynthSource src;
      src.count = detail::get_size(s, "count", sw);
      src.test_count = detail::get_size_or(s, "test_count", 0, sw);
      src.spread = detail::get_or<double>(s, "spread", 1.0, sw);
      if (s.contains("seed")) src.seed = detail::get<std::uint64_t>(s, "seed", sw);
      tc.data.synth = src;
    }
    cfg.tasks.push_back(std::move(tc));
  }

  const json train = root.contains("train") ? root.at("train") : json::object();
  detail::check_keys(train,
                     {"batch_size", "epochs_general", "epochs_special", "lr_general", "lr_special", "momentum",
                      "branch_weights", "shuffle", "cache_trunk_features", "track_accuracy"},
                     "config.train");
  TrainConfig& tr = cfg.train;
  tr.batch_size = detail::get_size_or(train, "batch_size", tr.batch_size, "config.train");
  tr.epochs_general = detail::get_size_or(train, "epochs_general", tr.epochs_general, "config.train");
  tr.epochs_special = detail::get_size_or(train, "epochs_special", tr.epochs_special, "config.train");
  tr.lr_general = detail::get_or<float>(train, "lr_general", tr.lr_general, "config.train");
  tr.lr_special = detail::get_or<float>(train, "lr_special", tr.lr_special, "config.train");
  tr.momentum = detail::get_or<float>(train, "momentum", tr.momentum, "config.train");
  tr.branch_weights = detail::get_or<std::vector<float>>(train, "branch_weights", {}, "config.train");
  tr.shuffle = detail::get_or<bool>(train, "shuffle", tr.shuffle, "config.train");
  tr.cache_trunk_features = detail::get_or<bool>(train, "cache_trunk_features", false, "config.train");
  tr.track_accuracy = detail::get_or<bool>(train, "track_accuracy", true, "config.train");
  tr.seed = cfg.seed;
  const auto weighted = std::count_if(cfg.tasks.begin(), cfg.tasks.end(), [](const TaskConfig& t) { return t.weight.has_value(); });
  if (weighted > 0) {
    if (!tr.branch_weights.empty()) {
      throw ConfigError("branch weights given both per task and in config.train.branch_weights");
    }
    if (std::size_t(weighted) != cfg.tasks.size()) {
      throw ConfigError("a weight is given for " + std::to_string(weighted) + " of " +
                        std::to_string(cfg.tasks.size()) + " tasks; give all or none");
    }
    for (const auto& t : cfg.tasks) tr.branch_weights.push_back(*t.weight);
  }
  tr.validate(cfg.tasks.size());

  const json sim = root.contains("simulator") ? root.at("simulator") : json::object();
  detail::check_keys(sim, {"bandwidth_bytes_per_ms", "dispatch_ms"}, "config.simulator");
  cfg.simulator.bandwidth_bytes_per_ms =
      detail::get_or<double>(sim, "bandwidth_bytes_per_ms", cfg.simulator.bandwidth_bytes_per_ms, "config.simulator");
  cfg.simulator.dispatch_ms = detail::get_or<double>(sim, "dispatch_ms", cfg.simulator.dispatch_ms, "config.simulator");
  if (!(cfg.simulator.bandwidth_bytes_per_ms > 0) || !(cfg.simulator.dispatch_ms >= 0)) {
    throw ConfigError("config.simulator: bandwidth must be > 0 and dispatch_ms >= 0");
  }

  const json out = root.contains("output") ? root.at("output") : json::object();
  detail::check_keys(out, {"dir"}, "config.output");
  cfg.output_dir = (base_dir / detail::get_or<std::string>(out, "dir", "out", "config.output")).string();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), std::filesystem::path(path).parent_path());
}

// Every referenced dataset file must exist before any work starts.
inline void check_files(const RunConfig& cfg) {
  for (const auto& t : cfg.tasks) {
    for (const auto& p : {t.data.csv, t.data.test_csv}) {
      if (p && !std::filesystem::exists(*p)) {
        throw ConfigError("task '" + t.id + "': dataset file not found: " + *p);
      }
    }
  }
}

inline ModelSpec model_spec(const RunConfig& cfg) {
  ModelSpec spec{cfg.input_shape, cfg.trunk, {}};
  std::optional<Shape> trunk_out;
  for (const auto& t : cfg.tasks) {
    BranchSpec b{t.id, {}, t.num_classes};
    if (t.branch) {
      b.layers = *t.branch;
    } else {
      if (!trunk_out) {
        try {
          trunk_out = build_trunk(cfg.input_shape, cfg.trunk, 0).output_shape();
        } catch (const DimensionError& e) {
          throw ConstructionError(std::string("trunk does not accept its input shape: ") + e.what());
        }
      }
      b.layers = preset_branch(*trunk_out, t.num_classes, t.depth_hint);
    }
    spec.branches.push_back(std::move(b));
  }
  return spec;
}

struct TaskData {
  std::vector<TaskDataset> train;
  std::vector<std::optional<TaskDataset>> test;
};

inline TaskData load_task_data(const RunConfig& cfg) {
  TaskData out;
  for (const auto& t : cfg.tasks) {
    if (t.data.csv) {
      out.train.push_back(load_csv(*t.data.csv, t.id, t.num_classes, cfg.input_shape));
      if (t.data.test_csv) out.test.push_back(load_csv(*t.data.test_csv, t.id, t.num_classes, cfg.input_shape));
      else out.test.push_back(std::nullopt);
    } else {
      const auto& s = *t.data.synth;
      BlobSpec spec{t.id,     t.num_classes, s.count + s.test_count, cfg.input_shape,
                    s.spread, s.seed.value_or(cfg.seed)};
      auto [train, test] = split_dataset(synth_blobs(spec), s.count);
      out.train.push_back(std::move(train));
      if (s.test_count) out.test.push_back(std::move(test));
      else out.test.push_back(std::nullopt);
    }
  }
  return out;
}

}  // namespace treednn::config
