#pragma once

// Model and data fixtures shared by the unit and acceptance tests.

#include <random>
#include <string>
#include <vector>

#include "treednn/treednn.hpp"

namespace testmodels {

using namespace treednn;

// trunk = Dense(4->8)-ReLU; a = Dense(8->3), b = Dense(8->2): 40 + 27 + 18 params.
inline ModelSpec toy_spec() {
  return {{4},
          {LayerSpec::dense(4, 8), LayerSpec::relu()},
          {{"a", {LayerSpec::dense(8, 3)}, 3}, {"b", {LayerSpec::dense(8, 2)}, 2}}};
}

inline std::string task_name(std::size_t i) { return "t" + std::to_string(i); }

// Reference conv trunk on 3x8x8 inputs, k small branches of K classes.
inline ModelSpec reference_spec(std::size_t k, std::size_t K) {
  ModelSpec spec{{3, 8, 8}, reference_trunk(3), {}};
  for (std::size_t i = 0; i < k; ++i) {
    spec.branches.push_back({task_name(i), preset_branch({16}, K, DepthHint::kSmall), K});
  }
  return spec;
}

inline Tensor random_input(Shape shape, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(shape_numel(shape));
  for (float& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

// Random small architecture: either a dense trunk on a flat input or a conv
// trunk on an image input, with 1..4 branches of varying depth.
inline ModelSpec random_spec(std::uint64_t seed) {
  Xoshiro256 rng(derive_seed(seed, "random_spec"));
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  ModelSpec spec;
  std::size_t width = 0;
  if (pick(0, 1) == 0) {
    const std::size_t in = pick(2, 6);
    width = pick(3, 10);
    spec.input_shape = {in};
    spec.trunk = {LayerSpec::dense(in, width), LayerSpec::relu()};
    if (pick(0, 1)) {
      spec.trunk.push_back(LayerSpec::residual({LayerSpec::dense(width, width), LayerSpec::relu()}));
    }
  } else {
    const std::size_t c = pick(1, 3), hw = pick(4, 6);
    width = pick(2, 6);
    spec.input_shape = {c, hw, hw};
    spec.trunk = {LayerSpec::conv2d(c, width, 3, 1, 1), LayerSpec::batchnorm(width), LayerSpec::relu()};
    if (pick(0, 1)) spec.trunk.push_back(LayerSpec::max_pool(2, 2));
    spec.trunk.push_back(LayerSpec::global_avg_pool());
  }
  const std::size_t k = pick(1, 4);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t K = pick(2, 5);
    const auto hint = static_cast<DepthHint>(pick(0, 2));
    spec.branches.push_back({task_name(i), preset_branch({width}, K, hint, pick(3, 9)), K});
  }
  return spec;
}

inline TaskDataset blobs(const std::string& id, std::size_t K, std::size_t n, Shape shape, double spread,
                         std::uint64_t seed) {
  return synth_blobs(BlobSpec{id, K, n, std::move(shape), spread, seed});
}

}  // namespace testmodels
