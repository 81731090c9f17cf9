// treednn: train, evaluate, export, and simulate TreeDNN container models.
//
// Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "treednn/config.hpp"
#include "treednn/treednn.hpp"

namespace fs = std::filesystem;
using namespace treednn;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Tags an error with the pipeline stage it came from.
struct StageError {
  std::string stage;
  std::string message;
  int code;
};

template <typename F>
auto run_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw StageError{stage, e.what(), kExitConfig};
  } catch (const ParseError& e) {
    throw StageError{stage, e.what(), kExitConfig};
  } catch (const LabelError& e) {
    throw StageError{stage, e.what(), kExitConfig};
  } catch (const LookupError& e) {
    throw StageError{stage, e.what(), kExitConfig};
  } catch (const ConstructionError& e) {
    throw StageError{stage, e.what(), kExitConfig};
  } catch (const std::exception& e) {
    throw StageError{stage, e.what(), kExitRuntime};
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string census_text(const ParamCensus& c) {
  std::ostringstream os;
  os << "census trunk params=" << c.trunk.params << " learnable=" << c.trunk.learnable << " bytes=" << c.trunk.bytes
     << '\n';
  for (const auto& b : c.branches) {
    os << "census branch." << b.name << " params=" << b.params << " learnable=" << b.learnable
       << " bytes=" << b.bytes << '\n';
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", c.trunk_fraction);
  os << "census total=" << c.total << " trunk_fraction=" << buf << '\n';
  return os.str();
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

int cmd_train(const TrainArgs& args) {
  auto cfg = run_stage("config", [&] {
    auto c = config::load_run_config(args.config);
    if (args.seed) {
      c.seed = *args.seed;
      c.train.seed = *args.seed;
    }
    if (args.out) c.output_dir = *args.out;
    config::check_files(c);
    return c;
  });
  auto data = run_stage("data", [&] { return config::load_task_data(cfg); });
  auto model = run_stage("build", [&] { return model_creation(config::model_spec(cfg), cfg.seed); });

  auto general = run_stage("general", [&] { return generalized_train(model, data.train, cfg.train); });
  auto special = run_stage("special", [&] { return specialized_train(model, data.train, cfg.train); });

  run_stage("export", [&] {
    fs::create_directories(cfg.output_dir);
    const fs::path dir(cfg.output_dir);
    bundle::serialize_split(model, (dir / "model.tdnn").string());
    write_text((dir / "general.report").string(), general.to_text());
    write_text((dir / "special.report").string(), special.to_text());
    for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
      if (data.test[i]) save_csv(*data.test[i], (dir / (cfg.tasks[i].id + ".test.csv")).string());
    }
    return 0;
  });

  const fs::path dir(cfg.output_dir);
  std::cout << "bundle " << (dir / "model.tdnn").string() << '\n';
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const auto& id = cfg.tasks[i].id;
    const auto train_eval = evaluate(model, data.train[i], id);
    std::cout << id << " train_accuracy=" << fmt4(train_eval.accuracy);
    if (data.test[i]) std::cout << " test_accuracy=" << fmt4(evaluate(model, *data.test[i], id).accuracy);
    std::cout << '\n';
  }
  return 0;
}

int cmd_eval(const std::string& bundle_path, const std::string& data_path, const std::string& task) {
  auto rt = run_stage("load", [&] { return SwapRuntime::load_trunk(bundle_path); });
  run_stage("load", [&] {
    rt.swap_branch(task);
    return 0;
  });
  const std::size_t classes = rt.branch()->num_classes();
  auto ds = run_stage("data", [&] {
    if (!fs::exists(data_path)) throw ConfigError("dataset file not found: " + data_path);
    return load_csv(data_path, task, classes, rt.trunk()->input_shape());
  });
  // Evaluate through the runtime so the bundle path is exercised end to end.
  const auto result = run_stage("eval", [&] {
    std::vector<Branch> branches;
    branches.push_back(rt.branch()->clone());
    TreeModel model(rt.trunk()->clone(), std::move(branches));
    return evaluate(model, ds, task);
  });
  std::cout << task << " accuracy=" << fmt4(result.accuracy) << " loss=" << fmt4(result.mean_loss)
            << " samples=" << result.count << '\n';
  return 0;
}

int cmd_export(const std::string& bundle_path, const std::string& out) {
  auto model = run_stage("load", [&] { return bundle::load_file(bundle_path); });
  const auto bytes = run_stage("export", [&] { return bundle::serialize_split(model, out); });
  std::cout << "wrote " << out << " bytes=" << bytes << '\n';
  return 0;
}

struct SimArgs {
  std::string bundle;
  std::optional<std::string> trace_file;
  std::size_t length = 100;
  std::string weights;
  std::uint64_t trace_seed = 0;
  std::string policy = "both";
  std::optional<std::string> config;
  std::optional<double> bandwidth;
  std::optional<double> dispatch_ms;
  std::optional<std::string> out;
};

int cmd_switch_sim(const SimArgs& args) {
  CostModel cost;
  if (args.config) cost = run_stage("config", [&] { return config::load_run_config(*args.config).simulator; });
  if (args.bandwidth) cost.bandwidth_bytes_per_ms = *args.bandwidth;
  if (args.dispatch_ms) cost.dispatch_ms = *args.dispatch_ms;

  const auto index = run_stage("load", [&] { return bundle::read_index(bundle::FileSource(args.bundle)); });
  const auto trace = run_stage("trace", [&] {
    if (args.trace_file) {
      std::ifstream in(*args.trace_file);
      if (!in) throw ConfigError("cannot open trace file: " + *args.trace_file);
      return parse_trace(in, index);
    }
    std::vector<double> weights;
    std::stringstream ss(args.weights);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        weights.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError("bad trace weight '" + tok + "'");
      }
    }
    return generate_trace(index.task_ids(), args.length, weights, args.trace_seed);
  });

  std::vector<Policy> policies;
  if (args.policy == "tree" || args.policy == "both") policies.push_back(Policy::kTree);
  if (args.policy == "dedicated" || args.policy == "both") policies.push_back(Policy::kDedicated);
  if (policies.empty()) throw StageError{"config", "--policy must be tree, dedicated or both", kExitConfig};

  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", cost.bandwidth_bytes_per_ms);
  os << "# switch-sim trace_length=" << trace.size() << " bandwidth_bytes_per_ms=" << buf;
  std::snprintf(buf, sizeof buf, "%.6g", cost.dispatch_ms);
  os << " dispatch_ms=" << buf << '\n';
  os << "# dedicated baseline: one standalone model (trunk + branch) per task, evicted on every switch\n";
  std::vector<SimReport> reports;
  for (Policy p : policies) {
    reports.push_back(run_stage("simulate", [&] { return switch_simulate(index, trace, p, cost); }));
    os << reports.back().to_text();
  }
  if (reports.size() == 2) {
    const double bytes_ratio = reports[1].cumulative_bytes
                                   ? double(reports[0].cumulative_bytes) / double(reports[1].cumulative_bytes)
                                   : 1.0;
    const double time_ratio = reports[1].total_ms > 0 ? reports[0].total_ms / reports[1].total_ms : 1.0;
    os << "ratio tree/dedicated bytes=" << fmt4(bytes_ratio) << " modeled_ms=" << fmt4(time_ratio) << '\n';
    os << "reference deployed 8-model case: memory 120 MB -> 68 MB (0.567), response 228 ms -> 120 ms (0.526)\n";
  }
  if (args.out) {
    run_stage("output", [&] {
      write_text(*args.out, os.str());
      return 0;
    });
  } else {
    std::cout << os.str();
  }
  return 0;
}

int cmd_report(const std::string& bundle_path) {
  auto model = run_stage("load", [&] { return bundle::load_file(bundle_path); });
  const auto storage = run_stage("load", [&] { return storage_report(bundle_path); });
  std::cout << census_text(param_census(model)) << storage.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TreeDNN: shared-trunk multi-task container networks"};
  app.require_subcommand(1);

  TrainArgs train_args;
  std::uint64_t seed_value = 0;
  std::string out_value;
  auto* train = app.add_subcommand("train", "build, train (two phases) and export a tree bundle");
  train->add_option("--config", train_args.config, "run configuration file")->required();
  auto* seed_opt = train->add_option("--seed", seed_value, "override the config seed");
  auto* out_opt = train->add_option("--out", out_value, "output directory (overrides config)");

  std::string bundle_path, data_path, task;
  auto* eval = app.add_subcommand("eval", "evaluate one task of a bundle on a CSV dataset");
  eval->add_option("--bundle", bundle_path, "tree bundle")->required();
  eval->add_option("--data", data_path, "CSV dataset (label,values...)")->required();
  eval->add_option("--task", task, "task id")->required();

  std::string export_out;
  auto* exp = app.add_subcommand("export", "re-serialize a bundle");
  exp->add_option("--bundle", bundle_path, "input bundle")->required();
  exp->add_option("--out", export_out, "output bundle path")->required();

  SimArgs sim;
  std::string trace_file, sim_config, sim_out;
  double bandwidth = 0, dispatch = 0;
  auto* sw = app.add_subcommand("switch-sim", "simulate task switching under tree and dedicated policies");
  sw->add_option("--bundle", sim.bundle, "tree bundle")->required();
  auto* trace_opt = sw->add_option("--trace", trace_file, "trace file, one task id per line");
  sw->add_option("--length", sim.length, "generated trace length")->excludes(trace_opt);
  sw->add_option("--weights", sim.weights, "comma-separated task frequencies for a generated trace")
      ->excludes(trace_opt);
  sw->add_option("--trace-seed,--seed", sim.trace_seed, "seed for a generated trace")->excludes(trace_opt);
  sw->add_option("--policy", sim.policy, "tree | dedicated | both")
      ->check(CLI::IsMember({"tree", "dedicated", "both"}));
  auto* sim_cfg_opt = sw->add_option("--config", sim_config, "read the cost model from a run config");
  auto* bw_opt = sw->add_option("--bandwidth", bandwidth, "load bandwidth, bytes per ms");
  auto* disp_opt = sw->add_option("--dispatch-ms", dispatch, "fixed cost per switch, ms");
  auto* sim_out_opt = sw->add_option("--out", sim_out, "write the report to a file");

  auto* report = app.add_subcommand("report", "parameter census and storage comparison");
  report->add_option("--bundle", bundle_path, "tree bundle")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) {
      if (*seed_opt) train_args.seed = seed_value;
      if (*out_opt) train_args.out = out_value;
      return cmd_train(train_args);
    }
    if (*eval) return cmd_eval(bundle_path, data_path, task);
    if (*exp) return cmd_export(bundle_path, export_out);
    if (*sw) {
      if (*trace_opt) sim.trace_file = trace_file;
      if (*sim_cfg_opt) sim.config = sim_config;
      if (*bw_opt) sim.bandwidth = bandwidth;
      if (*disp_opt) sim.dispatch_ms = dispatch;
      if (*sim_out_opt) sim.out = sim_out;
      return cmd_switch_sim(sim);
    }
    if (*report) return cmd_report(bundle_path);
  } catch (const StageError& e) {
    std::cerr << "error [" << e.stage << "]: " << e.message << '\n';
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
