#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/ops.hpp"
#include "treednn/rng.hpp"
#include "treednn/tensor.hpp"

namespace treednn {

using ops::Mode;

enum class LayerKind {
  kConv2D,
  kBatchNorm,
  kReLU,
  kMaxPool,
  kGlobalAvgPool,
  kFlatten,
  kDense,
  kResidual,
};

// Declarative description of one layer. `in`/`out` are channels for Conv2D,
// units for Dense; BatchNorm keeps its channel count in `in`.
struct LayerSpec {
  LayerKind kind = LayerKind::kReLU;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double eps = 1e-5;
  double momentum = 0.1;
  std::vector<LayerSpec> body;

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0) {
    LayerSpec s;
    s.kind = LayerKind::kConv2D;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
  }
  static LayerSpec batchnorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1) {
    LayerSpec s;
    s.kind = LayerKind::kBatchNorm;
    s.in = channels;
    s.eps = eps;
    s.momentum = momentum;
    return s;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec max_pool(std::size_t kernel, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::kMaxPool;
    s.kernel = kernel;
    s.stride = stride;
    return s;
  }
  static LayerSpec global_avg_pool() {
    LayerSpec s;
    s.kind = LayerKind::kGlobalAvgPool;
    return s;
  }
  static LayerSpec flatten() {
    LayerSpec s;
    s.kind = LayerKind::kFlatten;
    return s;
  }
  static LayerSpec dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::kDense;
    s.in = in;
    s.out = out;
    return s;
  }
  static LayerSpec residual(std::vector<LayerSpec> body) {
    LayerSpec s;
    s.kind = LayerKind::kResidual;
    s.body = std::move(body);
    return s;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// A named tensor owned by a layer. Buffers (BatchNorm running statistics) are
// persisted and counted like parameters but never receive gradients.
template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  bool trainable = true;
  bool buffer = false;

  void set_trainable(bool on) {
    trainable = on && !buffer;
    value.set_requires_grad(trainable);
    if (!trainable) value.zero_grad();
  }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) = 0;
  // Per-sample output shape (batch dimension excluded); throws DimensionError.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual LayerSpec spec() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual void collect_parameters(std::vector<Parameter<T>*>& out) { (void)out; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    collect_parameters(out);
    return out;
  }
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

namespace detail {

inline void expect(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

template <typename T>
Parameter<T> make_param(std::string name, Shape shape, T fill, bool buffer = false) {
  Parameter<T> p{std::move(name), BasicTensor<T>::full(std::move(shape), fill), !buffer, buffer};
  p.value.set_requires_grad(p.trainable);
  return p;
}

// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in), one stream per name.
template <typename T>
void kaiming_uniform(Parameter<T>& p, std::size_t fan_in, std::uint64_t seed) {
  Xoshiro256 rng(derive_seed(seed, p.name));
  const double bound = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (T& v : p.value.mutable_data()) v = T(dist(rng));
}

template <typename T>
Parameter<T> clone_param(const Parameter<T>& p) {
  Parameter<T> c{p.name, p.value.clone(), p.trainable, p.buffer};
  c.value.set_requires_grad(c.trainable);
  return c;
}

}  // namespace detail

template <typename T>
class Conv2D final : public Layer<T> {
 public:
  Conv2D(const LayerSpec& s, const std::string& prefix, std::uint64_t seed)
      : spec_(s),
        weight_(detail::make_param<T>(prefix + ".weight", {s.out, s.in, s.kernel, s.kernel}, T(0))),
        bias_(detail::make_param<T>(prefix + ".bias", {s.out}, T(0))) {
    if (s.in == 0 || s.out == 0 || s.kernel == 0 || s.stride == 0) {
      throw ConfigError("conv2d needs positive in/out/kernel/stride");
    }
    detail::kaiming_uniform(weight_, s.in * s.kernel * s.kernel, seed);
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::conv2d(x, weight_.value, std::optional<BasicTensor<T>>(bias_.value), spec_.stride,
                       spec_.padding);
  }

  Shape output_shape(const Shape& in) const override {
    detail::expect(in.size() == 3 && in[0] == spec_.in,
                   "conv2d expects (" + std::to_string(spec_.in) + ",H,W), got " + shape_str(in));
    detail::expect(in[1] + 2 * spec_.padding >= spec_.kernel &&
                       in[2] + 2 * spec_.padding >= spec_.kernel,
                   "conv2d kernel larger than padded input " + shape_str(in));
    return {spec_.out, (in[1] + 2 * spec_.padding - spec_.kernel) / spec_.stride + 1,
            (in[2] + 2 * spec_.padding - spec_.kernel) / spec_.stride + 1};
  }

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2D>(*this, 0); }
  void collect_parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Conv2D(const Conv2D& o, int)
      : spec_(o.spec_), weight_(detail::clone_param(o.weight_)), bias_(detail::clone_param(o.bias_)) {}

 private:
  LayerSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  BatchNorm(const LayerSpec& s, const std::string& prefix)
      : spec_(s),
        gamma_(detail::make_param<T>(prefix + ".gamma", {s.in}, T(1))),
        beta_(detail::make_param<T>(prefix + ".beta", {s.in}, T(0))),
        running_mean_(detail::make_param<T>(prefix + ".running_mean", {s.in}, T(0), true)),
        running_var_(detail::make_param<T>(prefix + ".running_var", {s.in}, T(1), true)) {
    if (s.in == 0) throw ConfigError("batchnorm needs a positive channel count");
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
    if (pinned_) mode = Mode::kEval;
    return ops::batchnorm(x, gamma_.value, beta_.value, running_mean_.value, running_var_.value,
                          T(spec_.eps), T(spec_.momentum), mode);
  }

  Shape output_shape(const Shape& in) const override {
    detail::expect(!in.empty() && in[0] == spec_.in,
                   "batchnorm expects " + std::to_string(spec_.in) + " channels, got " +
                       shape_str(in));
    return in;
  }

  // Pinned layers always use their running statistics, whatever the mode.
  void pin_statistics(bool on) { pinned_ = on; }
  bool pinned() const { return pinned_; }

  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this, 0); }
  void collect_parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

  BatchNorm(const BatchNorm& o, int)
      : spec_(o.spec_),
        gamma_(detail::clone_param(o.gamma_)),
        beta_(detail::clone_param(o.beta_)),
        running_mean_(detail::clone_param(o.running_mean_)),
        running_var_(detail::clone_param(o.running_var_)),
        pinned_(o.pinned_) {}

 private:
  LayerSpec spec_;
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Parameter<T> running_mean_;
  Parameter<T> running_var_;
  bool pinned_ = false;
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override { return ops::relu(x); }
  Shape output_shape(const Shape& in) const override { return in; }
  LayerSpec spec() const override { return LayerSpec::relu(); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(); }
};

template <typename T>
class MaxPool final : public Layer<T> {
 public:
  explicit MaxPool(const LayerSpec& s) : spec_(s) {
    if (s.kernel == 0 || s.stride == 0) throw ConfigError("maxpool needs positive kernel/stride");
  }
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::max_pool2d(x, spec_.kernel, spec_.stride);
  }
  Shape output_shape(const Shape& in) const override {
    detail::expect(in.size() == 3 && in[1] >= spec_.kernel && in[2] >= spec_.kernel,
                   "maxpool expects (C,H,W) at least kernel-sized, got " + shape_str(in));
    return {in[0], (in[1] - spec_.kernel) / spec_.stride + 1,
            (in[2] - spec_.kernel) / spec_.stride + 1};
  }
  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool>(spec_); }

 private:
  LayerSpec spec_;
};

template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::global_avg_pool(x);
  }
  Shape output_shape(const Shape& in) const override {
    detail::expect(in.size() == 3, "global average pool expects (C,H,W), got " + shape_str(in));
    return {in[0]};
  }
  LayerSpec spec() const override { return LayerSpec::global_avg_pool(); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(); }
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override { return ops::flatten(x); }
  Shape output_shape(const Shape& in) const override { return {shape_numel(in)}; }
  LayerSpec spec() const override { return LayerSpec::flatten(); }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(); }
};

// Fully connected: y = x·W + b with W stored as [in, out].
template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense(const LayerSpec& s, const std::string& prefix, std::uint64_t seed)
      : spec_(s),
        weight_(detail::make_param<T>(prefix + ".weight", {s.in, s.out}, T(0))),
        bias_(detail::make_param<T>(prefix + ".bias", {s.out}, T(0))) {
    if (s.in == 0 || s.out == 0) throw ConfigError("dense needs positive in/out");
    detail::kaiming_uniform(weight_, s.in, seed);
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode) override {
    return ops::add_bias(ops::matmul(x, weight_.value), bias_.value);
  }
  Shape output_shape(const Shape& in) const override {
    detail::expect(in.size() == 1 && in[0] == spec_.in,
                   "dense expects (" + std::to_string(spec_.in) + "), got " + shape_str(in));
    return {spec_.out};
  }
  LayerSpec spec() const override { return spec_; }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this, 0); }
  void collect_parameters(std::vector<Parameter<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Dense(const Dense& o, int)
      : spec_(o.spec_), weight_(detail::clone_param(o.weight_)), bias_(detail::clone_param(o.bias_)) {}

 private:
  LayerSpec spec_;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

template <typename T>
LayerPtr<T> make_layer(const LayerSpec& spec, const std::string& prefix, std::uint64_t seed);

template <typename T>
BasicTensor<T> forward_layers(const std::vector<LayerPtr<T>>& layers, BasicTensor<T> x, Mode mode) {
  for (const auto& layer : layers) x = layer->forward(x, mode);
  return x;
}

template <typename T>
Shape layers_output_shape(const std::vector<LayerPtr<T>>& layers, Shape shape) {
  for (const auto& layer : layers) shape = layer->output_shape(shape);
  return shape;
}

// y = x + body(x); body must preserve shape.
template <typename T>
class Residual final : public Layer<T> {
 public:
  Residual(const LayerSpec& s, const std::string& prefix, std::uint64_t seed) {
    for (std::size_t i = 0; i < s.body.size(); ++i) {
      body_.push_back(make_layer<T>(s.body[i], prefix + "." + std::to_string(i), seed));
    }
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) override {
    return ops::add(x, forward_layers(body_, x, mode));
  }
  Shape output_shape(const Shape& in) const override {
    Shape out = layers_output_shape(body_, in);
    detail::expect(out == in, "residual body maps " + shape_str(in) + " to " + shape_str(out));
    return in;
  }
  LayerSpec spec() const override {
    std::vector<LayerSpec> body;
    for (const auto& l : body_) body.push_back(l->spec());
    return LayerSpec::residual(std::move(body));
  }
  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::unique_ptr<Residual>(new Residual());
    for (const auto& l : body_) c->body_.push_back(l->clone());
    return c;
  }
  void collect_parameters(std::vector<Parameter<T>*>& out) override {
    for (auto& l : body_) l->collect_parameters(out);
  }
  const std::vector<LayerPtr<T>>& body() const { return body_; }

 private:
  Residual() = default;
  std::vector<LayerPtr<T>> body_;
};

template <typename T>
LayerPtr<T> make_layer(const LayerSpec& spec, const std::string& prefix, std::uint64_t seed) {
  switch (spec.kind) {
    case LayerKind::kConv2D: return std::make_unique<Conv2D<T>>(spec, prefix, seed);
    case LayerKind::kBatchNorm: return std::make_unique<BatchNorm<T>>(spec, prefix);
    case LayerKind::kReLU: return std::make_unique<ReLU<T>>();
    case LayerKind::kMaxPool: return std::make_unique<MaxPool<T>>(spec);
    case LayerKind::kGlobalAvgPool: return std::make_unique<GlobalAvgPool<T>>();
    case LayerKind::kFlatten: return std::make_unique<Flatten<T>>();
    case LayerKind::kDense: return std::make_unique<Dense<T>>(spec, prefix, seed);
    case LayerKind::kResidual: return std::make_unique<Residual<T>>(spec, prefix, seed);
  }
  throw ConfigError("unknown layer kind");
}

template <typename T>
std::vector<LayerPtr<T>> clone_layers(const std::vector<LayerPtr<T>>& layers) {
  std::vector<LayerPtr<T>> out;
  for (const auto& l : layers) out.push_back(l->clone());
  return out;
}

template <typename T>
void pin_batchnorm(const std::vector<LayerPtr<T>>& layers, bool on) {
  for (const auto& l : layers) {
    if (auto* bn = dynamic_cast<BatchNorm<T>*>(l.get())) bn->pin_statistics(on);
    if (auto* res = dynamic_cast<Residual<T>*>(l.get())) pin_batchnorm(res->body(), on);
  }
}

// ---------------------------------------------------------------------------
// Architecture text: one layer per line, `key=value` fields, residual bodies
// enclosed in `residual {` ... `}`.

inline std::string_view layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2D: return "conv2d";
    case LayerKind::kBatchNorm: return "batchnorm";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kGlobalAvgPool: return "gap";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDense: return "dense";
    case LayerKind::kResidual: return "residual";
  }
  return "?";
}

inline std::optional<LayerKind> parse_layer_kind(std::string_view name) {
  for (LayerKind k : {LayerKind::kConv2D, LayerKind::kBatchNorm, LayerKind::kReLU,
                      LayerKind::kMaxPool, LayerKind::kGlobalAvgPool, LayerKind::kFlatten,
                      LayerKind::kDense, LayerKind::kResidual}) {
    if (layer_kind_name(k) == name) return k;
  }
  return std::nullopt;
}

namespace detail {

inline void write_specs(std::ostream& os, const std::vector<LayerSpec>& specs, int depth) {
  const std::string indent(std::size_t(depth) * 2, ' ');
  for (const auto& s : specs) {
    os << indent << layer_kind_name(s.kind);
    switch (s.kind) {
      case LayerKind::kConv2D:
        os << " in=" << s.in << " out=" << s.out << " kernel=" << s.kernel
           << " stride=" << s.stride << " padding=" << s.padding;
        break;
      case LayerKind::kBatchNorm:
        os << " channels=" << s.in << std::setprecision(17) << " eps=" << s.eps
           << " momentum=" << s.momentum;
        break;
      case LayerKind::kMaxPool:
        os << " kernel=" << s.kernel << " stride=" << s.stride;
        break;
      case LayerKind::kDense:
        os << " in=" << s.in << " out=" << s.out;
        break;
      case LayerKind::kResidual:
        os << " {\n";
        write_specs(os, s.body, depth + 1);
        os << indent << "}";
        break;
      default:
        break;
    }
    os << '\n';
  }
}

}  // namespace detail

inline std::string specs_to_text(const std::vector<LayerSpec>& specs) {
  std::ostringstream os;
  detail::write_specs(os, specs, 0);
  return os.str();
}

namespace detail {

inline std::size_t parse_size(const std::string& v, const std::string& line) {
  std::size_t used = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-') {
    throw ParseError("bad integer '" + v + "' in layer line: " + line);
  }
  return std::size_t(out);
}

inline double parse_double(const std::string& v, const std::string& line) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) {
    throw ParseError("bad number '" + v + "' in layer line: " + line);
  }
  return out;
}

inline std::vector<LayerSpec> parse_specs(std::istream& is, bool nested) {
  std::vector<LayerSpec> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    if (word == "}") {
      if (!nested) throw ParseError("unbalanced '}' in layer text");
      return out;
    }
    auto kind = parse_layer_kind(word);
    if (!kind) throw ParseError("unknown layer kind '" + word + "'");
    LayerSpec s;
    s.kind = *kind;
    bool opened = false;
    std::set<std::string> seen;
    while (ls >> word) {
      if (word == "{") {
        opened = true;
        continue;
      }
      const auto eq = word.find('=');
      if (eq == std::string::npos) throw ParseError("expected key=value in layer line: " + line);
      const std::string key = word.substr(0, eq), val = word.substr(eq + 1);
      if (!seen.insert(key).second) throw ParseError("duplicate key '" + key + "' in layer line: " + line);
      if (key == "in" || key == "channels") s.in = parse_size(val, line);
      else if (key == "out") s.out = parse_size(val, line);
      else if (key == "kernel") s.kernel = parse_size(val, line);
      else if (key == "stride") s.stride = parse_size(val, line);
      else if (key == "padding") s.padding = parse_size(val, line);
      else if (key == "eps") s.eps = parse_double(val, line);
      else if (key == "momentum") s.momentum = parse_double(val, line);
      else throw ParseError("unknown key '" + key + "' in layer line: " + line);
    }
    std::vector<std::string> required;
    switch (s.kind) {
      case LayerKind::kConv2D: required = {"in", "out", "kernel"}; break;
      case LayerKind::kBatchNorm: required = {"channels"}; break;
      case LayerKind::kMaxPool: required = {"kernel"}; break;
      case LayerKind::kDense: required = {"in", "out"}; break;
      default: break;
    }
    for (const auto& key : required) {
      if (!seen.count(key)) throw ParseError("missing key '" + key + "' in layer line: " + line);
    }
    if (s.kind == LayerKind::kResidual) {
      if (!opened) throw ParseError("residual block without '{'");
      s.body = parse_specs(is, true);
    }
    out.push_back(std::move(s));
  }
  if (nested) throw ParseError("unterminated residual block");
  return out;
}

}  // namespace detail

inline std::vector<LayerSpec> specs_from_text(const std::string& text) {
  std::istringstream is(text);
  return detail::parse_specs(is, false);
}

}  // namespace treednn
