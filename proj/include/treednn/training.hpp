#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "treednn/data.hpp"
#include "treednn/error.hpp"
#include "treednn/model.hpp"
#include "treednn/optim.hpp"

namespace treednn {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs_general = 10;
  std::size_t epochs_special = 5;
  float lr_general = 0.05f;
  float lr_special = 0.05f;
  float momentum = 0.9f;
  std::vector<float> branch_weights;  // empty: 1/k each
  std::uint64_t seed = 0;
  bool shuffle = true;
  // Specialized phase: compute trunk features once per task instead of per batch.
  bool cache_trunk_features = false;
  // Evaluate every task on its training data at the end of each epoch.
  bool track_accuracy = true;

  std::vector<float> weights_for(std::size_t k) const {
    if (branch_weights.empty()) return std::vector<float>(k, 1.0f / float(k));
    return branch_weights;
  }

  void validate(std::size_t k) const {
    if (k == 0) throw ConfigError("no tasks configured");
    if (batch_size == 0 || batch_size % k != 0) {
      throw ConfigError("batch_size " + std::to_string(batch_size) +
                        " must be a positive multiple of the task count " + std::to_string(k));
    }
    if (!branch_weights.empty() && branch_weights.size() != k) {
      throw ConfigError("branch_weights has " + std::to_string(branch_weights.size()) +
                        " entries for " + std::to_string(k) + " tasks");
    }
    for (float w : branch_weights) {
      if (!(w > 0.0f)) throw ConfigError("branch weights must be > 0");
    }
    if (!(lr_general > 0.0f) || !(lr_special > 0.0f)) throw ConfigError("learning rates must be > 0");
    if (!(momentum >= 0.0f)) throw ConfigError("momentum must be >= 0");
  }
};

struct EpochRecord {
  std::string phase;  // "general" | "special"
  std::size_t epoch = 0;
  std::string task;   // "*" for the aggregated Net_Loss record
  double loss = 0;
  std::optional<double> accuracy;
  std::uint64_t trunk_digest = 0;
  std::optional<std::uint64_t> branch_digest;
};

// Digests of every component immediately before and after one task's loop.
struct TaskLoopDigests {
  std::string task;
  std::map<std::string, std::uint64_t> before;
  std::map<std::string, std::uint64_t> after;
};

struct PhaseReport {
  std::string phase;
  std::vector<EpochRecord> records;
  std::vector<TaskLoopDigests> task_loops;
  std::uint64_t trunk_before = 0;
  std::uint64_t trunk_after = 0;
  double wall_ms = 0;

  std::vector<double> net_losses() const {
    std::vector<double> out;
    for (const auto& r : records)
      if (r.task == "*") out.push_back(r.loss);
    return out;
  }

  // One line per record. Wall time is excluded so reports diff cleanly.
  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    for (const auto& r : records) {
      std::snprintf(buf, sizeof buf, "%.6f", r.loss);
      os << "phase=" << r.phase << " epoch=" << r.epoch << " task=" << r.task << " loss=" << buf;
      if (r.accuracy) {
        std::snprintf(buf, sizeof buf, "%.4f", *r.accuracy);
        os << " accuracy=" << buf;
      } else {
        os << " accuracy=-";
      }
      os << " trunk=" << digest_hex(r.trunk_digest)
         << " branch=" << (r.branch_digest ? digest_hex(*r.branch_digest) : std::string("-")) << '\n';
    }
    return os.str();
  }
};

// Component name -> digest, trunk first.
inline std::map<std::string, std::uint64_t> component_digests(const TreeModel& model) {
  std::map<std::string, std::uint64_t> out;
  out["trunk"] = digest(model.trunk().parameters());
  for (const auto& b : model.branches()) out["branch." + b.task_id()] = digest(b.parameters());
  return out;
}

inline void check_datasets_match(const TreeModel& model, std::span<const TaskDataset> datasets) {
  if (datasets.size() != model.k()) {
    throw ConfigError(std::to_string(datasets.size()) + " datasets for " + std::to_string(model.k()) +
                      " branches");
  }
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const Branch& b = model.branch(i);
    if (datasets[i].task_id != b.task_id()) {
      throw ConfigError("dataset " + std::to_string(i) + " is '" + datasets[i].task_id +
                        "' but branch " + std::to_string(i) + " is '" + b.task_id() + "'");
    }
    if (datasets[i].num_classes != b.num_classes()) {
      throw ConfigError("dataset '" + b.task_id() + "' has " + std::to_string(datasets[i].num_classes) +
                        " classes, branch expects " + std::to_string(b.num_classes()));
    }
    if (datasets[i].input_shape != model.trunk().input_shape()) {
      throw ConfigError("dataset '" + b.task_id() + "' input shape " +
                        shape_str(datasets[i].input_shape) + " does not match trunk input " +
                        shape_str(model.trunk().input_shape()));
    }
  }
}

// Net_Loss = sum_j W_j * losses[j], differentiable.
inline Tensor net_loss(std::span<const Tensor> losses, std::span<const float> weights) {
  if (losses.size() != weights.size() || losses.empty()) {
    throw DimensionError("net_loss: " + std::to_string(losses.size()) + " losses for " +
                         std::to_string(weights.size()) + " weights");
  }
  Tensor total = ops::scale(losses[0], weights[0]);
  for (std::size_t j = 1; j < losses.size(); ++j) total = ops::add(total, ops::scale(losses[j], weights[j]));
  return total;
}

struct StepResult {
  float net_loss = 0;
  std::vector<float> task_losses;
};

// Forward half of a generalized step: one trunk pass over the whole federated
// batch, then branch j scores slice j against its own labels.
inline std::vector<Tensor> branch_losses(const TreeModel& model, const FedBatch& batch, Mode mode) {
  if (batch.slice_bounds.size() != model.k()) {
    throw DimensionError("federated batch has " + std::to_string(batch.slice_bounds.size()) +
                         " slices for " + std::to_string(model.k()) + " branches");
  }
  const Tensor features = model.trunk_forward(batch.inputs, mode);
  std::vector<Tensor> losses;
  for (std::size_t j = 0; j < model.k(); ++j) {
    const auto [lo, hi] = batch.slice_bounds[j];
    const Tensor logits = model.branch(j).forward(ops::slice_rows(features, lo, hi), mode);
    losses.push_back(ops::cross_entropy(logits, std::span<const std::size_t>(batch.labels[j])));
  }
  return losses;
}

// Net_Loss backward through every branch and the trunk, then one SGD step on
// all parameters.
inline StepResult generalized_step(TreeModel& model, const FedBatch& batch,
                                   std::span<const float> weights, Sgd<float>& optimizer) {
  const auto losses = branch_losses(model, batch, Mode::kTrain);
  const Tensor total = net_loss(losses, weights);
  backward(total);
  optimizer.step(model.parameters());
  StepResult r{total.item(), {}};
  for (const auto& l : losses) r.task_losses.push_back(l.item());
  return r;
}

struct EvalResult {
  double accuracy = 0;
  double mean_loss = 0;
  std::size_t count = 0;
};

// Argmax accuracy and mean cross-entropy of M_task on `dataset`, eval mode.
inline EvalResult evaluate(const TreeModel& model, const TaskDataset& dataset, const std::string& task_id,
                           std::size_t chunk = 256) {
  const Branch& b = model.branch(task_id);
  if (dataset.empty()) throw ContractError("cannot evaluate '" + task_id + "' on an empty dataset");
  if (dataset.num_classes != b.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(dataset.num_classes) + " classes, branch '" + task_id +
                      "' has " + std::to_string(b.num_classes()));
  }
  NoGradGuard no_grad;
  std::size_t correct = 0;
  double loss_sum = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    const std::size_t end = std::min(dataset.size(), start + chunk);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Tensor logits = model.forward_full(task_id, dataset.gather(idx), Mode::kEval);
    const auto labels = dataset.gather_labels(idx);
    loss_sum += double(ops::cross_entropy(logits, std::span<const std::size_t>(labels)).item()) *
                double(labels.size());
    const std::size_t K = logits.dim(1);
    auto L = logits.data();
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const float* row = L.data() + r * K;
      const auto best = std::size_t(std::max_element(row, row + K) - row);
      if (best == labels[r]) ++correct;
    }
  }
  return {double(correct) / double(dataset.size()), loss_sum / double(dataset.size()), dataset.size()};
}

// Generalized phase: every epoch walks the federated batches of that epoch
// (epoch seed = seed + epoch) and takes one generalized step per batch.
inline PhaseReport generalized_train(TreeModel& model, std::span<const TaskDataset> datasets,
                                     const TrainConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate(model.k());
  check_datasets_match(model, datasets);
  const auto weights = config.weights_for(model.k());
  Sgd<float> optimizer(config.lr_general, config.momentum);

  PhaseReport report;
  report.phase = "general";
  report.trunk_before = digest(model.trunk().parameters());
  for (std::size_t epoch = 0; epoch < config.epochs_general; ++epoch) {
    std::optional<std::uint64_t> epoch_seed;
    if (config.shuffle) epoch_seed = config.seed + epoch;
    const auto plan = fed_batch_plan(datasets, config.batch_size, epoch_seed);
    double net_sum = 0;
    std::vector<double> task_sum(model.k(), 0.0);
    for (std::size_t i = 0; i < plan.size(); ++i) {
      const FedBatch batch = materialize_fed_batch(datasets, plan[i], i);
      const StepResult r = generalized_step(model, batch, weights, optimizer);
      net_sum += r.net_loss;
      for (std::size_t j = 0; j < model.k(); ++j) task_sum[j] += r.task_losses[j];
    }
    const double batches = double(std::max<std::size_t>(plan.size(), 1));
    const std::uint64_t trunk_digest = digest(model.trunk().parameters());
    report.records.push_back({"general", epoch + 1, "*", net_sum / batches, std::nullopt, trunk_digest,
                              std::nullopt});
    for (std::size_t j = 0; j < model.k(); ++j) {
      const Branch& b = model.branch(j);
      std::optional<double> acc;
      if (config.track_accuracy) acc = evaluate(model, datasets[j], b.task_id()).accuracy;
      report.records.push_back({"general", epoch + 1, b.task_id(), task_sum[j] / batches, acc,
                                trunk_digest, digest(b.parameters())});
    }
  }
  report.trunk_after = digest(model.trunk().parameters());
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Trunk parameters become non-trainable and trunk BatchNorm uses its running
// statistics from now on. Idempotent.
inline void freeze_trunk(TreeModel& model) { model.trunk().set_frozen(true); }

inline std::uint64_t special_epoch_seed(std::uint64_t seed, const std::string& task, std::size_t epoch) {
  return derive_seed(seed, "special." + task, epoch);
}

// Trunk features of all samples of `dataset`, eval mode, no graph.
inline Tensor trunk_features(const TreeModel& model, const TaskDataset& dataset, std::size_t chunk = 256) {
  NoGradGuard no_grad;
  std::vector<float> out;
  Shape shape{dataset.size()};
  shape.insert(shape.end(), model.trunk().output_shape().begin(), model.trunk().output_shape().end());
  out.reserve(shape_numel(shape));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    const std::size_t end = std::min(dataset.size(), start + chunk);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Tensor f = model.trunk_forward(dataset.gather(idx), Mode::kEval);
    out.insert(out.end(), f.data().begin(), f.data().end());
  }
  return Tensor(std::move(shape), std::move(out));
}

inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
  const std::size_t row = t.numel() / std::max<std::size_t>(t.dim(0), 1);
  std::vector<float> out(idx.size() * row);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.data().begin() + std::ptrdiff_t(idx[r] * row), row, out.begin() + std::ptrdiff_t(r * row));
  }
  Shape shape = t.shape();
  shape[0] = idx.size();
  return Tensor(std::move(shape), std::move(out));
}

// Specialized phase: freeze the trunk, then fine-tune each branch in task
// order on its own dataset with plain minibatches; only branch i moves during
// task i's loop.
inline PhaseReport specialized_train(TreeModel& model, std::span<const TaskDataset> datasets,
                                     const TrainConfig& config) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate(model.k());
  check_datasets_match(model, datasets);
  freeze_trunk(model);

  PhaseReport report;
  report.phase = "special";
  report.trunk_before = digest(model.trunk().parameters());
  for (std::size_t i = 0; i < model.k(); ++i) {
    const Branch& branch = model.branch(i);
    const TaskDataset& data = datasets[i];
    TaskLoopDigests loop{branch.task_id(), component_digests(model), {}};
    Sgd<float> optimizer(config.lr_special, config.momentum);
    const auto params = branch.parameters();
    std::optional<Tensor> cached;
    if (config.cache_trunk_features) cached = trunk_features(model, data);

    for (std::size_t epoch = 0; epoch < config.epochs_special; ++epoch) {
      std::optional<std::uint64_t> seed;
      if (config.shuffle) seed = special_epoch_seed(config.seed, branch.task_id(), epoch);
      const auto plan = minibatch_plan(data.size(), config.batch_size, seed);
      double loss_sum = 0;
      for (const auto& idx : plan) {
        const Tensor features =
            cached ? gather_rows(*cached, idx) : model.trunk_forward(data.gather(idx), Mode::kEval);
        const Tensor logits = branch.forward(features, Mode::kTrain);
        const auto labels = data.gather_labels(idx);
        const Tensor loss = ops::cross_entropy(logits, std::span<const std::size_t>(labels));
        backward(loss);
        optimizer.step(params);
        loss_sum += loss.item();
      }
      std::optional<double> acc;
      if (config.track_accuracy) acc = evaluate(model, data, branch.task_id()).accuracy;
      report.records.push_back({"special", epoch + 1, branch.task_id(),
                                loss_sum / double(std::max<std::size_t>(plan.size(), 1)), acc,
                                digest(model.trunk().parameters()), digest(params)});
    }
    loop.after = component_digests(model);
    report.task_loops.push_back(std::move(loop));
  }
  report.trunk_after = digest(model.trunk().parameters());
  report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace treednn
