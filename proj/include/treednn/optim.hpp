#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/layers.hpp"

namespace treednn {

// SGD with heavy-ball momentum:  v <- momentum*v + grad;  w <- w - lr*v.
// Velocities are keyed by parameter name; parameters with trainable=false are
// skipped entirely, so their bytes never change. Gradients are cleared after
// each step.
template <typename T>
class Sgd {
 public:
  Sgd(T lr, T momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr > T(0))) throw ConfigError("learning rate must be > 0");
    if (!(momentum >= T(0))) throw ConfigError("momentum must be >= 0");
  }

  void step(std::span<Parameter<T>* const> params) {
    for (Parameter<T>* p : params) {
      if (!p->trainable) {
        p->value.zero_grad();
        continue;
      }
      auto value = p->value.mutable_data();
      auto grad = p->value.grad();
      auto& v = velocity_[p->name];
      if (v.empty()) v.assign(value.size(), T(0));
      for (std::size_t i = 0; i < value.size(); ++i) {
        const T g = grad.empty() ? T(0) : grad[i];
        v[i] = momentum_ * v[i] + g;
        value[i] -= lr_ * v[i];
      }
      p->value.zero_grad();
    }
  }

  void step(const std::vector<Parameter<T>*>& params) {
    step(std::span<Parameter<T>* const>(params.data(), params.size()));
  }

  T learning_rate() const { return lr_; }
  T momentum() const { return momentum_; }

 private:
  T lr_;
  T momentum_;
  std::map<std::string, std::vector<T>> velocity_;
};

template <typename T>
void zero_grads(const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->value.zero_grad();
}

}  // namespace treednn
