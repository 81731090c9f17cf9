#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/model.hpp"
#include "treednn/rng.hpp"

namespace treednn {

// Labeled samples for one task, stored flat (row i = inputs[i*D, (i+1)*D)).
struct TaskDataset {
  std::string task_id;
  Shape input_shape;
  std::size_t num_classes = 0;
  std::vector<float> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  std::size_t sample_dim() const { return shape_numel(input_shape); }

  std::span<const float> sample(std::size_t i) const {
    return std::span<const float>(inputs).subspan(i * sample_dim(), sample_dim());
  }

  // Stacks the selected samples into a [n, input_shape...] tensor.
  Tensor gather(std::span<const std::size_t> idx) const {
    const std::size_t d = sample_dim();
    std::vector<float> out(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(inputs.begin() + std::ptrdiff_t(idx[r] * d), d,
                  out.begin() + std::ptrdiff_t(r * d));
    }
    Shape shape{idx.size()};
    shape.insert(shape.end(), input_shape.begin(), input_shape.end());
    return Tensor(std::move(shape), std::move(out));
  }

  std::vector<std::size_t> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
    return out;
  }

  void validate() const {
    if (inputs.size() != labels.size() * sample_dim()) {
      throw DimensionError("dataset '" + task_id + "' has ragged storage");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= num_classes) {
        throw LabelError("dataset '" + task_id + "' sample " + std::to_string(i) + " has label " +
                         std::to_string(labels[i]) + " >= " + std::to_string(num_classes));
      }
    }
  }
};

// ---------------------------------------------------------------------------
// CSV: one sample per row, `label,v1,...,vD`, D = product(input_shape).

inline TaskDataset parse_csv(std::istream& in, std::string task_id, std::size_t num_classes,
                             Shape input_shape, const std::string& origin = "<stream>") {
  TaskDataset ds{std::move(task_id), std::move(input_shape), num_classes, {}, {}};
  const std::size_t d = ds.sample_dim();
  std::string line;
  std::size_t row = 0;
  auto fail = [&](const std::string& what) {
    throw ParseError(origin + ": row " + std::to_string(row) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t field = 0;
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = line.find(',', pos);
      const std::size_t end = comma == std::string::npos ? line.size() : comma;
      std::size_t b = pos, e = end;
      while (b < e && (line[b] == ' ' || line[b] == '\t')) ++b;
      while (e > b && (line[e - 1] == ' ' || line[e - 1] == '\t')) --e;
      const char* first = line.data() + b;
      const char* last = line.data() + e;
      if (field == 0) {
        std::size_t label = 0;
        auto [ptr, ec] = std::from_chars(first, last, label);
        if (ec != std::errc() || ptr != last || first == last) fail("label is not a non-negative integer");
        if (label >= num_classes) {
          fail("label " + std::to_string(label) + " >= num_classes " + std::to_string(num_classes));
        }
        ds.labels.push_back(label);
      } else {
        if (field > d) fail("expected " + std::to_string(d) + " values, found more");
        float v = 0;
        auto [ptr, ec] = std::from_chars(first, last, v);
        if (ec != std::errc() || ptr != last || first == last) fail("non-numeric field " + std::to_string(field + 1));
        if (!std::isfinite(v)) fail("non-finite value in field " + std::to_string(field + 1));
        ds.inputs.push_back(v);
      }
      ++field;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (field != d + 1) fail("expected " + std::to_string(d) + " values, found " + std::to_string(field - 1));
  }
  if (ds.empty()) throw ParseError(origin + ": empty dataset");
  return ds;
}

inline TaskDataset load_csv(const std::string& path, std::string task_id, std::size_t num_classes,
                            Shape input_shape) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file: " + path);
  return parse_csv(in, std::move(task_id), num_classes, std::move(input_shape), path);
}

// Floats written with 9 significant digits so they parse back bit-exactly.
inline void write_csv(const TaskDataset& ds, std::ostream& out) {
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (float v : ds.sample(i)) {
      std::snprintf(buf, sizeof buf, ",%.9g", double(v));
      out << buf;
    }
    out << '\n';
  }
}

inline void save_csv(const TaskDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset file: " + path);
  write_csv(ds, out);
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs.

struct BlobSpec {
  std::string task_id;
  std::size_t num_classes = 2;
  std::size_t count = 0;
  Shape input_shape;
  double spread = 1.0;
  std::uint64_t seed = 0;
};

// Class centers: one standard-normal draw per element, seeded by (seed, task).
inline std::vector<std::vector<float>> blob_centers(const BlobSpec& spec) {
  Xoshiro256 rng(derive_seed(spec.seed, "blobs.centers." + spec.task_id));
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t d = shape_numel(spec.input_shape);
  std::vector<std::vector<float>> centers(spec.num_classes, std::vector<float>(d));
  for (auto& c : centers)
    for (float& v : c) v = float(unit(rng));
  return centers;
}

// Sample i has label i mod K and value center[label] + spread * N(0, I).
inline TaskDataset synth_blobs(const BlobSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic blobs need K >= 2");
  if (spec.count < spec.num_classes) throw ConfigError("synthetic blobs need N >= K");
  if (spec.input_shape.empty() || shape_numel(spec.input_shape) == 0) {
    throw ConfigError("synthetic blobs need a non-empty input shape");
  }
  if (!(spec.spread >= 0)) throw ConfigError("spread must be >= 0");
  const auto centers = blob_centers(spec);
  Xoshiro256 rng(derive_seed(spec.seed, "blobs.samples." + spec.task_id));
  std::normal_distribution<double> unit(0.0, 1.0);
  TaskDataset ds{spec.task_id, spec.input_shape, spec.num_classes, {}, {}};
  const std::size_t d = shape_numel(spec.input_shape);
  ds.inputs.reserve(spec.count * d);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t label = i % spec.num_classes;
    for (std::size_t j = 0; j < d; ++j) {
      ds.inputs.push_back(centers[label][j] + float(spec.spread * unit(rng)));
    }
    ds.labels.push_back(label);
  }
  return ds;
}

// First `head` samples and the remainder.
inline std::pair<TaskDataset, TaskDataset> split_dataset(const TaskDataset& ds, std::size_t head) {
  if (head > ds.size()) throw ConfigError("split beyond dataset size");
  const std::size_t d = ds.sample_dim();
  TaskDataset a{ds.task_id, ds.input_shape, ds.num_classes, {}, {}};
  TaskDataset b = a;
  a.inputs.assign(ds.inputs.begin(), ds.inputs.begin() + std::ptrdiff_t(head * d));
  a.labels.assign(ds.labels.begin(), ds.labels.begin() + std::ptrdiff_t(head));
  b.inputs.assign(ds.inputs.begin() + std::ptrdiff_t(head * d), ds.inputs.end());
  b.labels.assign(ds.labels.begin() + std::ptrdiff_t(head), ds.labels.end());
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Federated minibatches.

// Permutation used for pass `pass` over task `task` within one epoch.
inline std::vector<std::size_t> pass_permutation(std::uint64_t epoch_seed, std::size_t task,
                                                 std::size_t pass, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Xoshiro256 rng(derive_seed(epoch_seed, "fedbatch.task" + std::to_string(task), pass));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

// The first `length` positions of a dataset's epoch order: successive passes
// over its n samples, each pass freshly permuted when a seed is given.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::size_t task, std::size_t length,
                                            std::optional<std::uint64_t> epoch_seed) {
  std::vector<std::size_t> order;
  order.reserve(length);
  for (std::size_t pass = 0; order.size() < length; ++pass) {
    std::vector<std::size_t> perm;
    if (epoch_seed) {
      perm = pass_permutation(*epoch_seed, task, pass, n);
    } else {
      perm.resize(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
    }
    for (std::size_t i = 0; i < n && order.size() < length; ++i) order.push_back(perm[i]);
  }
  return order;
}

struct SampleRef {
  std::size_t task = 0;
  std::size_t index = 0;
  friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

// One batch of size B: k contiguous slices of B/k samples, slice j drawn from
// dataset j.
struct FedBatch {
  std::size_t batch_index = 0;
  Tensor inputs;
  std::vector<std::vector<std::size_t>> labels;
  std::vector<std::pair<std::size_t, std::size_t>> slice_bounds;
  std::vector<SampleRef> provenance;
};

inline void validate_fed_batch_args(std::span<const TaskDataset> datasets, std::size_t batch_size) {
  if (datasets.empty()) throw ConfigError("federated batching needs at least one dataset");
  const std::size_t k = datasets.size();
  if (batch_size == 0 || batch_size % k != 0) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " is not a positive multiple of k=" +
                      std::to_string(k));
  }
  std::size_t n_max = 0;
  for (const auto& ds : datasets) {
    if (ds.empty()) throw ConfigError("dataset '" + ds.task_id + "' is empty");
    if (ds.input_shape != datasets[0].input_shape) {
      throw ConfigError("dataset '" + ds.task_id + "' input shape " + shape_str(ds.input_shape) +
                        " differs from " + shape_str(datasets[0].input_shape));
    }
    n_max = std::max(n_max, ds.size());
  }
  if (batch_size / k > n_max) {
    throw ConfigError("slice size B/k = " + std::to_string(batch_size / k) +
                      " exceeds the largest dataset (" + std::to_string(n_max) + ")");
  }
}

// Index plan: plan[i][j] lists the sample indices of dataset j in batch i.
// Batch count is floor(max_j N_j / (B/k)); shorter datasets wrap around.
inline std::vector<std::vector<std::vector<std::size_t>>> fed_batch_plan(
    std::span<const TaskDataset> datasets, std::size_t batch_size,
    std::optional<std::uint64_t> epoch_seed) {
  validate_fed_batch_args(datasets, batch_size);
  const std::size_t k = datasets.size(), slice = batch_size / k;
  std::size_t n_max = 0;
  for (const auto& ds : datasets) n_max = std::max(n_max, ds.size());
  const std::size_t batches = n_max / slice;
  std::vector<std::vector<std::vector<std::size_t>>> plan(batches,
                                                          std::vector<std::vector<std::size_t>>(k));
  for (std::size_t j = 0; j < k; ++j) {
    const auto order = epoch_order(datasets[j].size(), j, batches * slice, epoch_seed);
    for (std::size_t i = 0; i < batches; ++i) {
      plan[i][j].assign(order.begin() + std::ptrdiff_t(i * slice),
                        order.begin() + std::ptrdiff_t((i + 1) * slice));
    }
  }
  return plan;
}

inline FedBatch materialize_fed_batch(std::span<const TaskDataset> datasets,
                                      const std::vector<std::vector<std::size_t>>& slices,
                                      std::size_t batch_index) {
  FedBatch fb;
  fb.batch_index = batch_index;
  const std::size_t d = datasets[0].sample_dim();
  std::size_t total = 0;
  for (const auto& s : slices) total += s.size();
  std::vector<float> data(total * d);
  std::size_t row = 0;
  for (std::size_t j = 0; j < slices.size(); ++j) {
    fb.slice_bounds.emplace_back(row, row + slices[j].size());
    fb.labels.push_back(datasets[j].gather_labels(slices[j]));
    for (std::size_t idx : slices[j]) {
      auto src = datasets[j].sample(idx);
      std::copy(src.begin(), src.end(), data.begin() + std::ptrdiff_t(row * d));
      fb.provenance.push_back({j, idx});
      ++row;
    }
  }
  Shape shape{total};
  shape.insert(shape.end(), datasets[0].input_shape.begin(), datasets[0].input_shape.end());
  fb.inputs = Tensor(std::move(shape), std::move(data));
  return fb;
}

// All federated batches of one epoch. Without a seed, each dataset is read in
// load order.
inline std::vector<FedBatch> fed_batch_prepare(std::span<const TaskDataset> datasets,
                                               std::size_t batch_size,
                                               std::optional<std::uint64_t> epoch_seed) {
  const auto plan = fed_batch_plan(datasets, batch_size, epoch_seed);
  std::vector<FedBatch> out;
  out.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) out.push_back(materialize_fed_batch(datasets, plan[i], i));
  return out;
}

// Plain minibatches over one dataset: floor(N/B) batches of B (a single batch
// of all N when N < B).
inline std::vector<std::vector<std::size_t>> minibatch_plan(std::size_t n, std::size_t batch_size,
                                                            std::optional<std::uint64_t> seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  if (seed) {
    Xoshiro256 rng(*seed);
    std::shuffle(perm.begin(), perm.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  if (n == 0) return out;
  if (n < batch_size) {
    out.push_back(perm);
    return out;
  }
  for (std::size_t b = 0; b + batch_size <= n; b += batch_size) {
    out.emplace_back(perm.begin() + std::ptrdiff_t(b), perm.begin() + std::ptrdiff_t(b + batch_size));
  }
  return out;
}

}  // namespace treednn
