#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/layers.hpp"
#include "treednn/rng.hpp"
#include "treednn/tensor.hpp"

namespace treednn {

using Tensor = BasicTensor<float>;
using Param = Parameter<float>;

enum class DepthHint { kSmall, kMedium, kLarge };

inline DepthHint parse_depth_hint(std::string_view s) {
  if (s == "small") return DepthHint::kSmall;
  if (s == "medium") return DepthHint::kMedium;
  if (s == "large") return DepthHint::kLarge;
  throw ConfigError("unknown depth_hint '" + std::string(s) + "' (small|medium|large)");
}

struct BranchSpec {
  std::string task_id;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
};

struct ModelSpec {
  Shape input_shape;  // per sample, e.g. (C,H,W)
  std::vector<LayerSpec> trunk;
  std::vector<BranchSpec> branches;
};

// Conv(C->8,3x3)-BN-ReLU-Conv(8->16,3x3,s2)-BN-ReLU-GlobalAvgPool, padding 1.
inline std::vector<LayerSpec> reference_trunk(std::size_t in_channels = 3) {
  return {LayerSpec::conv2d(in_channels, 8, 3, 1, 1), LayerSpec::batchnorm(8), LayerSpec::relu(),
          LayerSpec::conv2d(8, 16, 3, 2, 1),          LayerSpec::batchnorm(16), LayerSpec::relu(),
          LayerSpec::global_avg_pool()};
}

// Branch presets: small = 1 block + head, medium = 2, large = 3. On a flat
// trunk output a block is Dense(->hidden)-ReLU; on a (C,H,W) output it is
// Conv3x3-BN-ReLU, followed by GlobalAvgPool before the head.
inline std::vector<LayerSpec> preset_branch(const Shape& trunk_output, std::size_t num_classes,
                                            DepthHint hint, std::size_t hidden = 32) {
  const std::size_t blocks = hint == DepthHint::kSmall ? 1 : hint == DepthHint::kMedium ? 2 : 3;
  std::vector<LayerSpec> out;
  if (trunk_output.size() == 1) {
    std::size_t width = trunk_output[0];
    for (std::size_t b = 0; b < blocks; ++b) {
      out.push_back(LayerSpec::dense(width, hidden));
      out.push_back(LayerSpec::relu());
      width = hidden;
    }
    out.push_back(LayerSpec::dense(width, num_classes));
  } else if (trunk_output.size() == 3) {
    const std::size_t c = trunk_output[0];
    for (std::size_t b = 0; b < blocks; ++b) {
      out.push_back(LayerSpec::conv2d(c, c, 3, 1, 1));
      out.push_back(LayerSpec::batchnorm(c));
      out.push_back(LayerSpec::relu());
    }
    out.push_back(LayerSpec::global_avg_pool());
    out.push_back(LayerSpec::dense(c, num_classes));
  } else {
    throw ConfigError("no branch preset for trunk output " + shape_str(trunk_output));
  }
  return out;
}

namespace detail {

inline void check_batch_shape(const Tensor& x, const Shape& per_sample, const char* what) {
  Shape expect{x.rank() ? x.dim(0) : 0};
  expect.insert(expect.end(), per_sample.begin(), per_sample.end());
  if (x.rank() == 0 || x.shape() != expect) {
    throw DimensionError(std::string(what) + " expects [N]" + shape_str(per_sample) + ", got " +
                         shape_str(x.shape()));
  }
}

inline std::vector<Param*> collect(const std::vector<LayerPtr<float>>& layers) {
  std::vector<Param*> out;
  for (const auto& l : layers) l->collect_parameters(out);
  return out;
}

inline std::vector<LayerSpec> specs_of(const std::vector<LayerPtr<float>>& layers) {
  std::vector<LayerSpec> out;
  for (const auto& l : layers) out.push_back(l->spec());
  return out;
}

}  // namespace detail

class Trunk {
 public:
  Trunk() = default;
  Trunk(Shape input_shape, std::vector<LayerPtr<float>> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    output_shape_ = layers_output_shape(layers_, input_shape_);
  }

  Tensor forward(const Tensor& x, Mode mode) const {
    detail::check_batch_shape(x, input_shape_, "trunk");
    return forward_layers(layers_, x, mode);
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return output_shape_; }
  const std::vector<LayerPtr<float>>& layers() const { return layers_; }
  std::vector<Param*> parameters() const { return detail::collect(layers_); }
  std::vector<LayerSpec> specs() const { return detail::specs_of(layers_); }

  // Trunk parameters stop receiving gradients and its BatchNorm layers switch
  // to their running statistics permanently.
  void set_frozen(bool on) {
    frozen_ = on;
    for (Param* p : parameters()) p->set_trainable(!on);
    pin_batchnorm(layers_, on);
  }
  bool frozen() const { return frozen_; }

  Trunk clone() const {
    Trunk t(input_shape_, clone_layers(layers_));
    t.frozen_ = frozen_;
    return t;
  }

 private:
  Shape input_shape_;
  Shape output_shape_;
  std::vector<LayerPtr<float>> layers_;
  bool frozen_ = false;
};

class Branch {
 public:
  Branch() = default;
  Branch(std::string task_id, std::size_t num_classes, std::vector<LayerPtr<float>> layers)
      : task_id_(std::move(task_id)), num_classes_(num_classes), layers_(std::move(layers)) {}

  Tensor forward(const Tensor& features, Mode mode) const {
    return forward_layers(layers_, features, mode);
  }

  const std::string& task_id() const { return task_id_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<LayerPtr<float>>& layers() const { return layers_; }
  std::vector<Param*> parameters() const { return detail::collect(layers_); }
  std::vector<LayerSpec> specs() const { return detail::specs_of(layers_); }

  Branch clone() const { return Branch(task_id_, num_classes_, clone_layers(layers_)); }

 private:
  std::string task_id_;
  std::size_t num_classes_ = 0;
  std::vector<LayerPtr<float>> layers_;
};

inline std::string trunk_prefix(std::size_t layer) { return "trunk." + std::to_string(layer); }
inline std::string branch_prefix(const std::string& task, std::size_t layer) {
  return "branch." + task + "." + std::to_string(layer);
}

inline void validate_task_id(const std::string& id) {
  if (id.empty() || id.size() > 0xFFFF) throw ConfigError("task id must be 1..65535 bytes");
  for (char c : id) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == ',') {
      throw ConfigError("task id '" + id + "' contains whitespace or ','");
    }
  }
}

inline Trunk build_trunk(const Shape& input_shape, const std::vector<LayerSpec>& specs,
                         std::uint64_t seed) {
  std::vector<LayerPtr<float>> layers;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    layers.push_back(make_layer<float>(specs[i], trunk_prefix(i), seed));
  }
  return Trunk(input_shape, std::move(layers));
}

inline Branch build_branch(const BranchSpec& spec, std::uint64_t seed) {
  validate_task_id(spec.task_id);
  std::vector<LayerPtr<float>> layers;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    layers.push_back(make_layer<float>(spec.layers[i], branch_prefix(spec.task_id, i), seed));
  }
  return Branch(spec.task_id, spec.num_classes, std::move(layers));
}

// Trunk plus k task branches; M_i = trunk followed by branch i.
class TreeModel {
 public:
  TreeModel() = default;

  // Validates composition by static shape inference and a dry-run forward on
  // a zero input; failures name the offending branch.
  TreeModel(Trunk trunk, std::vector<Branch> branches)
      : trunk_(std::move(trunk)), branches_(std::move(branches)) {
    if (branches_.empty()) throw ConstructionError("a tree needs at least one branch");
    std::map<std::string, int> seen_names;
    for (Param* p : trunk_.parameters()) seen_names[p->name]++;
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (branches_[j].task_id() == branches_[i].task_id()) {
          throw ConstructionError("duplicate task id '" + branches_[i].task_id() + "'");
        }
      }
      for (Param* p : branches_[i].parameters()) seen_names[p->name]++;
    }
    for (const auto& [name, count] : seen_names) {
      if (count > 1) throw ConstructionError("duplicate parameter name '" + name + "'");
    }

    Shape probe{1};
    probe.insert(probe.end(), trunk_.input_shape().begin(), trunk_.input_shape().end());
    const Tensor features = trunk_.forward(Tensor::zeros(probe), Mode::kEval);
    for (const auto& b : branches_) {
      try {
        const Shape out = layers_output_shape(b.layers(), trunk_.output_shape());
        if (out != Shape{b.num_classes()}) {
          throw DimensionError("emits " + shape_str(out) + " but declares " +
                               std::to_string(b.num_classes()) + " classes");
        }
        (void)b.forward(features, Mode::kEval);
      } catch (const DimensionError& e) {
        throw ConstructionError("branch '" + b.task_id() + "' does not fit trunk output " +
                                shape_str(trunk_.output_shape()) + ": " + e.what());
      }
    }
  }

  std::size_t k() const { return branches_.size(); }
  Trunk& trunk() { return trunk_; }
  const Trunk& trunk() const { return trunk_; }
  const std::vector<Branch>& branches() const { return branches_; }

  std::size_t index_of(const std::string& task_id) const {
    for (std::size_t i = 0; i < branches_.size(); ++i) {
      if (branches_[i].task_id() == task_id) return i;
    }
    throw LookupError("unknown task id '" + task_id + "'");
  }
  const Branch& branch(const std::string& task_id) const { return branches_[index_of(task_id)]; }
  const Branch& branch(std::size_t i) const { return branches_.at(i); }

  Tensor trunk_forward(const Tensor& x, Mode mode) const { return trunk_.forward(x, mode); }

  Tensor branch_forward(const std::string& task_id, const Tensor& features, Mode mode) const {
    const Branch& b = branch(task_id);
    detail::check_batch_shape(features, trunk_.output_shape(), "branch");
    return b.forward(features, mode);
  }

  Tensor forward_full(const std::string& task_id, const Tensor& x, Mode mode) const {
    const Branch& b = branch(task_id);
    return b.forward(trunk_.forward(x, mode), mode);
  }

  std::vector<Param*> parameters() const {
    auto out = trunk_.parameters();
    for (const auto& b : branches_) {
      auto bp = b.parameters();
      out.insert(out.end(), bp.begin(), bp.end());
    }
    return out;
  }

  ModelSpec spec() const {
    ModelSpec s{trunk_.input_shape(), trunk_.specs(), {}};
    for (const auto& b : branches_) s.branches.push_back({b.task_id(), b.specs(), b.num_classes()});
    return s;
  }

  TreeModel clone() const {
    std::vector<Branch> bs;
    for (const auto& b : branches_) bs.push_back(b.clone());
    TreeModel m;
    m.trunk_ = trunk_.clone();
    m.branches_ = std::move(bs);
    return m;
  }

 private:
  Trunk trunk_;
  std::vector<Branch> branches_;
};

// Builds the tree from declarative specs; every parameter is initialized from
// its own stream derived from (seed, parameter name).
inline TreeModel model_creation(const ModelSpec& spec, std::uint64_t seed) {
  Trunk trunk;
  try {
    trunk = build_trunk(spec.input_shape, spec.trunk, seed);
  } catch (const DimensionError& e) {
    throw ConstructionError(std::string("trunk does not accept its input shape: ") + e.what());
  }
  std::vector<Branch> branches;
  for (const auto& b : spec.branches) branches.push_back(build_branch(b, seed));
  return TreeModel(std::move(trunk), std::move(branches));
}

// ---------------------------------------------------------------------------
// Digests and parameter counts.

inline std::size_t param_count(const std::vector<Param*>& params) {
  std::size_t n = 0;
  for (const Param* p : params) n += p->value.numel();
  return n;
}

// Parameters in byte-wise name order: the canonical storage order.
inline std::vector<Param*> sorted_by_name(std::vector<Param*> params) {
  std::sort(params.begin(), params.end(),
            [](const Param* a, const Param* b) { return a->name < b->name; });
  return params;
}

// FNV-1a over (name, raw float bytes) in canonical order.
inline std::uint64_t digest(const std::vector<Param*>& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Param* p : sorted_by_name(params)) {
    h = fnv1a64(p->name, h);
    auto d = p->value.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float)),
                h);
  }
  return h;
}

inline std::string digest_hex(std::uint64_t d) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(d));
  return buf;
}

struct ComponentCensus {
  std::string name;
  std::size_t params = 0;     // every stored float
  std::size_t learnable = 0;  // excludes BatchNorm running statistics
  std::size_t bytes = 0;      // 4 bytes per stored float
};

struct ParamCensus {
  ComponentCensus trunk;
  std::vector<ComponentCensus> branches;
  std::size_t total = 0;      // trunk + sum of branches
  std::size_t dedicated = 0;  // k * trunk + sum of branches
  double trunk_fraction = 0;  // trunk / total
  double storage_ratio = 0;   // total / dedicated
};

inline ComponentCensus census_of(std::string name, const std::vector<Param*>& params) {
  ComponentCensus c{std::move(name), 0, 0, 0};
  for (const Param* p : params) {
    c.params += p->value.numel();
    if (!p->buffer) c.learnable += p->value.numel();
  }
  c.bytes = 4 * c.params;
  return c;
}

inline ParamCensus param_census(const TreeModel& model) {
  ParamCensus r;
  r.trunk = census_of("trunk", model.trunk().parameters());
  std::size_t branch_sum = 0;
  for (const auto& b : model.branches()) {
    r.branches.push_back(census_of(b.task_id(), b.parameters()));
    branch_sum += r.branches.back().params;
  }
  r.total = r.trunk.params + branch_sum;
  r.dedicated = model.k() * r.trunk.params + branch_sum;
  r.trunk_fraction = r.total ? double(r.trunk.params) / double(r.total) : 0.0;
  r.storage_ratio = r.dedicated ? double(r.total) / double(r.dedicated) : 1.0;
  return r;
}

}  // namespace treednn
