#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "treednn/bundle.hpp"
#include "treednn/error.hpp"
#include "treednn/model.hpp"
#include "treednn/rng.hpp"

namespace treednn {

enum class Policy { kTree, kDedicated };

inline const char* policy_name(Policy p) { return p == Policy::kTree ? "tree" : "dedicated"; }

// Branch-swap inference runtime over a TreeBundle. Under the tree policy the
// trunk is loaded once and stays resident while branches are swapped; under
// the dedicated policy every cold switch loads a standalone model (trunk and
// branch sections) and evicts the previous one.
class SwapRuntime {
 public:
  static SwapRuntime load_trunk(const std::string& path) {
    return SwapRuntime(std::make_unique<bundle::FileSource>(path), Policy::kTree);
  }

  SwapRuntime(std::unique_ptr<bundle::Source> source, Policy policy)
      : source_(std::move(source)), index_(bundle::read_index(*source_)), policy_(policy) {
    if (policy_ == Policy::kTree) load_trunk_section();
  }

  // Makes `task` the resident branch. Swapping to the resident branch is free.
  void swap_branch(const std::string& task) {
    const auto& entry = index_.branch(task);
    if (branch_ && branch_->task_id() == task) return;
    const auto t0 = std::chrono::steady_clock::now();
    branch_.reset();
    branch_bytes_ = 0;
    if (policy_ == Policy::kDedicated) {
      trunk_.reset();
      trunk_bytes_ = 0;
      load_trunk_section();
    }
    branch_ = bundle::decode_branch(bundle::load_section(*source_, entry));
    const Shape out = layers_output_shape(branch_->layers(), trunk_->output_shape());
    if (out != Shape{branch_->num_classes()}) {
      branch_.reset();
      throw FormatError("branch '" + task + "' does not fit the bundle's trunk");
    }
    branch_bytes_ = entry.size;
    bytes_loaded_ += entry.size;
    ++loads_;
    high_water_ = std::max(high_water_, resident_bytes());
    swap_ms_.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }

  // Eval-mode forward through the resident trunk and branch.
  Tensor infer(const Tensor& x) const {
    if (!branch_ || !trunk_) throw StateError("infer() called with no branch resident");
    NoGradGuard no_grad;
    return branch_->forward(trunk_->forward(x, Mode::kEval), Mode::kEval);
  }

  Policy policy() const { return policy_; }
  std::size_t bytes_loaded_total() const { return bytes_loaded_; }
  std::size_t loads_performed() const { return loads_; }
  std::size_t resident_bytes() const { return trunk_bytes_ + branch_bytes_; }
  std::size_t resident_high_water() const { return high_water_; }
  const std::vector<double>& swap_times_ms() const { return swap_ms_; }
  std::optional<std::string> current_task() const {
    if (!branch_) return std::nullopt;
    return branch_->task_id();
  }
  std::vector<std::string> task_ids() const { return index_.task_ids(); }
  const bundle::Index& index() const { return index_; }
  std::uint64_t trunk_digest() const {
    if (!trunk_) throw StateError("no trunk resident");
    return digest(trunk_->parameters());
  }
  const Trunk* trunk() const { return trunk_ ? &*trunk_ : nullptr; }
  const Branch* branch() const { return branch_ ? &*branch_ : nullptr; }

 private:
  void load_trunk_section() {
    const auto& entry = index_.trunk();
    trunk_ = bundle::decode_trunk(bundle::load_section(*source_, entry));
    trunk_bytes_ = entry.size;
    bytes_loaded_ += entry.size;
    ++loads_;
    high_water_ = std::max(high_water_, resident_bytes());
  }

  std::unique_ptr<bundle::Source> source_;
  bundle::Index index_;
  Policy policy_;
  std::optional<Trunk> trunk_;
  std::optional<Branch> branch_;
  std::size_t trunk_bytes_ = 0;
  std::size_t branch_bytes_ = 0;
  std::size_t bytes_loaded_ = 0;
  std::size_t loads_ = 0;
  std::size_t high_water_ = 0;
  std::vector<double> swap_ms_;
};

// ---------------------------------------------------------------------------
// Storage accounting.

struct StorageReport {
  std::size_t k = 0;
  std::uint64_t trunk_params = 0;
  std::vector<std::pair<std::string, std::uint64_t>> branch_params;
  std::uint64_t tree_params = 0;       // trunk + sum of branches
  std::uint64_t dedicated_params = 0;  // k * trunk + sum of branches
  std::uint64_t tree_bytes = 0;
  std::uint64_t dedicated_bytes = 0;
  double ratio = 1.0;

  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    os << "storage tasks=" << k << '\n';
    os << "component trunk params=" << trunk_params << " bytes=" << 4 * trunk_params << '\n';
    for (const auto& [name, n] : branch_params) {
      os << "component branch." << name << " params=" << n << " bytes=" << 4 * n << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.6f", ratio);
    os << "tree_bytes=" << tree_bytes << " dedicated_bytes=" << dedicated_bytes << " ratio=" << buf << '\n';
    os << "reference deployed 8-model case: memory 120 MB -> 68 MB (ratio 0.567), "
          "response 228 ms -> 120 ms (not asserted)\n";
    return os.str();
  }
};

inline StorageReport storage_report(const bundle::Index& index) {
  StorageReport r;
  r.trunk_params = index.trunk().param_count;
  std::uint64_t branch_sum = 0;
  for (const auto& s : index.sections) {
    if (s.corrupt || s.role != bundle::Role::kBranch) continue;
    r.branch_params.emplace_back(s.name, s.param_count);
    branch_sum += s.param_count;
  }
  r.k = r.branch_params.size();
  r.tree_params = r.trunk_params + branch_sum;
  r.dedicated_params = r.k * r.trunk_params + branch_sum;
  r.tree_bytes = 4 * r.tree_params;
  r.dedicated_bytes = 4 * r.dedicated_params;
  r.ratio = r.dedicated_params ? double(r.tree_params) / double(r.dedicated_params) : 1.0;
  return r;
}

inline StorageReport storage_report(const std::string& path) {
  return storage_report(bundle::read_index(bundle::FileSource(path)));
}

// ---------------------------------------------------------------------------
// Task-switch simulation.

// Modeled response time of one switch = bytes / bandwidth + dispatch.
struct CostModel {
  double bandwidth_bytes_per_ms = 100000.0;  // 100 MB/s
  double dispatch_ms = 1.0;
};

struct SwitchEvent {
  std::size_t index = 0;
  std::string task;
  std::uint64_t bytes = 0;
  std::uint64_t cumulative = 0;
  double modeled_ms = 0;
};

struct SimReport {
  Policy policy = Policy::kTree;
  CostModel cost;
  std::vector<SwitchEvent> events;
  std::uint64_t cumulative_bytes = 0;
  std::size_t cold_loads = 0;
  std::uint64_t resident_high_water = 0;
  double total_ms = 0;

  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    os << "# policy=" << policy_name(policy) << '\n';
    os << "# index task policy bytes cumulative modeled_ms\n";
    for (const auto& e : events) {
      std::snprintf(buf, sizeof buf, "%.4f", e.modeled_ms);
      os << e.index << ' ' << e.task << ' ' << policy_name(policy) << ' ' << e.bytes << ' ' << e.cumulative << ' '
         << buf << '\n';
    }
    std::snprintf(buf, sizeof buf, "%.4f", total_ms);
    os << "summary policy=" << policy_name(policy) << " switches=" << events.size() << " cold_loads=" << cold_loads
       << " cumulative_bytes=" << cumulative_bytes << " resident_high_water=" << resident_high_water
       << " total_ms=" << buf;
    std::snprintf(buf, sizeof buf, "%.4f", events.empty() ? 0.0 : total_ms / double(events.size()));
    os << " mean_ms=" << buf << '\n';
    return os.str();
  }
};

inline void validate_trace(const bundle::Index& index, const std::vector<std::string>& trace) {
  const auto ids = index.task_ids();
  const std::set<std::string> known(ids.begin(), ids.end());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (!known.count(trace[i])) {
      throw LookupError("trace entry " + std::to_string(i + 1) + ": unknown task '" + trace[i] + "'");
    }
  }
}

// Byte accounting from section sizes alone; no parameters are read. A switch
// to the resident task costs no bytes under either policy.
inline SimReport switch_simulate(const bundle::Index& index, const std::vector<std::string>& trace, Policy policy,
                                 const CostModel& cost = {}) {
  validate_trace(index, trace);
  if (!(cost.bandwidth_bytes_per_ms > 0)) throw ConfigError("bandwidth must be > 0");
  SimReport r;
  r.policy = policy;
  r.cost = cost;
  const std::uint64_t trunk = index.trunk().size;
  bool trunk_resident = false;
  std::optional<std::string> resident;
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const std::string& task = trace[i];
    std::uint64_t bytes = 0;
    const std::uint64_t branch = index.branch(task).size;
    if (resident != task) {
      if (policy == Policy::kTree) {
        if (!trunk_resident) bytes += trunk;
        trunk_resident = true;
      } else {
        bytes += trunk;
      }
      bytes += branch;
      resident = task;
      ++r.cold_loads;
      r.resident_high_water = std::max<std::uint64_t>(r.resident_high_water, trunk + branch);
    }
    r.cumulative_bytes += bytes;
    const double ms = double(bytes) / cost.bandwidth_bytes_per_ms + cost.dispatch_ms;
    r.total_ms += ms;
    r.events.push_back({i, task, bytes, r.cumulative_bytes, ms});
  }
  return r;
}

// Reads one task id per line; blank lines and '#' comments are skipped.
inline std::vector<std::string> parse_trace(std::istream& in, const bundle::Index& index) {
  const auto ids = index.task_ids();
  const std::set<std::string> known(ids.begin(), ids.end());
  std::vector<std::string> trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string id, extra;
    if (!(ls >> id)) continue;
    if (ls >> extra) throw ParseError("trace line " + std::to_string(lineno) + ": expected one task id");
    if (!known.count(id)) {
      throw LookupError("trace line " + std::to_string(lineno) + ": unknown task '" + id + "'");
    }
    trace.push_back(id);
  }
  return trace;
}

// Random trace: each entry drawn independently with the given task weights
// (uniform when empty).
inline std::vector<std::string> generate_trace(const std::vector<std::string>& tasks, std::size_t length,
                                               std::vector<double> weights, std::uint64_t seed) {
  if (tasks.empty()) throw ConfigError("no tasks to draw a trace from");
  if (weights.empty()) weights.assign(tasks.size(), 1.0);
  if (weights.size() != tasks.size()) {
    throw ConfigError("trace weights have " + std::to_string(weights.size()) + " entries for " +
                      std::to_string(tasks.size()) + " tasks");
  }
  for (double w : weights)
    if (!(w >= 0)) throw ConfigError("trace weights must be >= 0");
  Xoshiro256 rng(derive_seed(seed, "trace"));
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  std::vector<std::string> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) out.push_back(tasks[pick(rng)]);
  return out;
}

}  // namespace treednn
