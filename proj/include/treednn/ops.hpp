#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "treednn/error.hpp"
#include "treednn/tensor.hpp"

// Differentiable primitives. Every op allocates a fresh output and leaves its
// inputs untouched; the only exception is batchnorm's running statistics,
// which are buffers rather than operands.
namespace treednn::ops {

enum class Mode { kTrain, kEval };

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

// Output rows [lo, hi) for which in = o*stride - pad + k stays inside [0, extent).
inline std::pair<long, long> valid_range(long out_extent, long in_extent,
                                         long stride, long pad, long k) {
  long lo = 0;
  while (lo < out_extent && lo * stride - pad + k < 0) ++lo;
  long hi = out_extent;
  while (hi > lo && (hi - 1) * stride - pad + k >= in_extent) --hi;
  return {lo, hi};
}

}  // namespace detail

// C = A·B for A[m×n], B[n×p].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2,
                  "matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1), p = b.dim(1);
  detail::require(b.dim(0) == n, "matmul inner dimensions disagree: " +
                                     shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
  auto A = a.data();
  auto B = b.data();
  std::vector<T> c(m * p, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* row = c.data() + i * p;
    for (std::size_t k = 0; k < n; ++k) {
      const T aik = A[i * n + k];
      const T* brow = B.data() + k * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += aik * brow[j];
    }
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return BasicTensor<T>::make_result(
      {m, p}, std::move(c), {ai, bi}, [ai, bi, m, n, p](std::span<const T> g) {
        if (ai->requires_grad) {
          T* ga = ai->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t k = 0; k < n; ++k) {
              T acc = T(0);
              for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bi->data[k * p + j];
              ga[i * n + k] += acc;
            }
          }
        }
        if (bi->requires_grad) {
          T* gb = bi->grad_buffer();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t k = 0; k < n; ++k) {
              const T aik = ai->data[i * n + k];
              for (std::size_t j = 0; j < p; ++j) gb[k * p + j] += aik * g[i * p + j];
            }
          }
        }
      });
}

// x[N×F] + bias[F], broadcast over rows.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  detail::require(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
                  "add_bias shape mismatch: " + shape_str(x.shape()) + " + " +
                      shape_str(bias.shape()));
  const std::size_t n = x.dim(0), f = x.dim(1);
  std::vector<T> out(x.data().begin(), x.data().end());
  auto B = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) out[i * f + j] += B[j];
  auto xi = x.impl();
  auto bi = bias.impl();
  return BasicTensor<T>::make_result(
      x.shape(), std::move(out), {xi, bi}, [xi, bi, n, f](std::span<const T> g) {
        if (xi->requires_grad) {
          T* gx = xi->grad_buffer();
          for (std::size_t i = 0; i < n * f; ++i) gx[i] += g[i];
        }
        if (bi->requires_grad) {
          T* gb = bi->grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < f; ++j) gb[j] += g[i * f + j];
        }
      });
}

// Cross-correlation (no kernel flip) of input[N,C,H,W] with weight[F,C,kH,kW].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const std::optional<std::type_identity_t<BasicTensor<T>>>& bias, std::size_t stride,
                      std::size_t padding) {
  detail::require(input.rank() == 4 && weight.rank() == 4,
                  "conv2d expects input[N,C,H,W] and weight[F,C,kH,kW], got " +
                      shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  detail::require(stride >= 1, "conv2d stride must be >= 1");
  const long N = long(input.dim(0)), C = long(input.dim(1)), H = long(input.dim(2)),
             W = long(input.dim(3));
  const long F = long(weight.dim(0)), KH = long(weight.dim(2)), KW = long(weight.dim(3));
  const long S = long(stride), P = long(padding);
  detail::require(long(weight.dim(1)) == C,
                  "conv2d channel mismatch: input has " + std::to_string(C) +
                      " channels, weight expects " + std::to_string(weight.dim(1)));
  detail::require(H + 2 * P >= KH && W + 2 * P >= KW,
                  "conv2d kernel larger than padded input " + shape_str(input.shape()));
  if (bias) {
    detail::require(bias->rank() == 1 && long(bias->dim(0)) == F,
                    "conv2d bias must have shape (" + std::to_string(F) + ")");
  }
  const long OH = (H + 2 * P - KH) / S + 1, OW = (W + 2 * P - KW) / S + 1;

  auto X = input.data();
  auto Wt = weight.data();
  std::vector<T> out(std::size_t(N * F * OH * OW), T(0));
  for (long n = 0; n < N; ++n) {
    for (long f = 0; f < F; ++f) {
      T* plane = out.data() + (n * F + f) * OH * OW;
      if (bias) std::fill(plane, plane + OH * OW, bias->data()[std::size_t(f)]);
      for (long c = 0; c < C; ++c) {
        const T* xin = X.data() + (n * C + c) * H * W;
        for (long kh = 0; kh < KH; ++kh) {
          const auto [oh0, oh1] = detail::valid_range(OH, H, S, P, kh);
          for (long kw = 0; kw < KW; ++kw) {
            const auto [ow0, ow1] = detail::valid_range(OW, W, S, P, kw);
            const T wv = Wt[std::size_t(((f * C + c) * KH + kh) * KW + kw)];
            for (long oh = oh0; oh < oh1; ++oh) {
              const T* xrow = xin + (oh * S - P + kh) * W;
              T* orow = plane + oh * OW;
              for (long ow = ow0; ow < ow1; ++ow) orow[ow] += wv * xrow[ow * S - P + kw];
            }
          }
        }
      }
    }
  }

  auto xi = input.impl();
  auto wi = weight.impl();
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs{xi, wi};
  std::shared_ptr<TensorImpl<T>> bi;
  if (bias) {
    bi = bias->impl();
    inputs.push_back(bi);
  }
  return BasicTensor<T>::make_result(
      {std::size_t(N), std::size_t(F), std::size_t(OH), std::size_t(OW)}, std::move(out),
      std::move(inputs),
      [xi, wi, bi, N, C, H, W, F, KH, KW, S, P, OH, OW](std::span<const T> g) {
        T* gx = xi->requires_grad ? xi->grad_buffer() : nullptr;
        T* gw = wi->requires_grad ? wi->grad_buffer() : nullptr;
        for (long n = 0; n < N; ++n) {
          for (long f = 0; f < F; ++f) {
            const T* gplane = g.data() + (n * F + f) * OH * OW;
            for (long c = 0; c < C; ++c) {
              const T* xin = xi->data.data() + (n * C + c) * H * W;
              T* gxin = gx ? gx + (n * C + c) * H * W : nullptr;
              for (long kh = 0; kh < KH; ++kh) {
                const auto [oh0, oh1] = detail::valid_range(OH, H, S, P, kh);
                for (long kw = 0; kw < KW; ++kw) {
                  const auto [ow0, ow1] = detail::valid_range(OW, W, S, P, kw);
                  const std::size_t widx = std::size_t(((f * C + c) * KH + kh) * KW + kw);
                  const T wv = wi->data[widx];
                  T acc = T(0);
                  for (long oh = oh0; oh < oh1; ++oh) {
                    const long rowoff = (oh * S - P + kh) * W;
                    const T* grow = gplane + oh * OW;
                    for (long ow = ow0; ow < ow1; ++ow) {
                      const long at = rowoff + ow * S - P + kw;
                      acc += grow[ow] * xin[at];
                      if (gxin) gxin[at] += grow[ow] * wv;
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
        if (bi && bi->requires_grad) {
          T* gb = bi->grad_buffer();
          for (long n = 0; n < N; ++n)
            for (long f = 0; f < F; ++f) {
              const T* gplane = g.data() + (n * F + f) * OH * OW;
              for (long i = 0; i < OH * OW; ++i) gb[f] += gplane[i];
            }
        }
      });
}

// max(0, x); the subgradient at 0 is 0.
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  auto xi = x.impl();
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {xi},
                                     [xi](std::span<const T> g) {
                                       T* gx = xi->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                         if (xi->data[i] > T(0)) gx[i] += g[i];
                                     });
}

// Per-channel normalization of x[N,C,...]. Train mode normalizes with batch
// statistics (biased variance) and folds them into the running buffers with
// the given momentum (unbiased variance); eval mode reads the buffers only.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, BasicTensor<T>& running_mean,
                         BasicTensor<T>& running_var, T eps, T momentum, Mode mode) {
  detail::require(x.rank() >= 2, "batchnorm expects x[N,C,...], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.numel() / (N * C);
  for (const BasicTensor<T>* t : std::array<const BasicTensor<T>*, 4>{&gamma, &beta, &running_mean, &running_var}) {
    detail::require(t->rank() == 1 && t->dim(0) == C,
                    "batchnorm parameter shape " + shape_str(t->shape()) +
                        " does not match " + std::to_string(C) + " channels");
  }
  if (mode == Mode::kTrain && N < 2) {
    throw DegenerateBatchError("batchnorm in train mode needs N >= 2, got N = " +
                               std::to_string(N));
  }
  const std::size_t m = N * inner;
  auto X = x.data();
  std::vector<T> mean(C), invstd(C);
  if (mode == Mode::kTrain) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      T sum = T(0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) sum += X[(n * C + c) * inner + i];
      const T mu = sum / T(m);
      T sq = T(0);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = X[(n * C + c) * inner + i] - mu;
          sq += d * d;
        }
      const T var = sq / T(m);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + eps);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * (sq / T(m - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running_mean.data()[c];
      invstd[c] = T(1) / std::sqrt(running_var.data()[c] + eps);
    }
  }

  std::vector<T> xhat(x.numel()), out(x.numel());
  auto G = gamma.data();
  auto Bt = beta.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t at = (n * C + c) * inner + i;
        xhat[at] = (X[at] - mean[c]) * invstd[c];
        out[at] = G[c] * xhat[at] + Bt[c];
      }

  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  const bool batch_stats = mode == Mode::kTrain;
  return BasicTensor<T>::make_result(
      x.shape(), std::move(out), {xi, gi, bi},
      [xi, gi, bi, xhat = std::move(xhat), invstd = std::move(invstd), N, C, inner, m,
       batch_stats](std::span<const T> g) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t at = (n * C + c) * inner + i;
              sum_g += g[at];
              sum_gx += g[at] * xhat[at];
            }
          if (gi->requires_grad) gi->grad_buffer()[c] += sum_gx;
          if (bi->requires_grad) bi->grad_buffer()[c] += sum_g;
          if (!xi->requires_grad) continue;
          T* gx = xi->grad_buffer();
          const T gam = gi->data[c];
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t at = (n * C + c) * inner + i;
              if (batch_stats) {
                gx[at] += gam * invstd[c] / T(m) *
                          (T(m) * g[at] - sum_g - xhat[at] * sum_gx);
              } else {
                gx[at] += gam * invstd[c] * g[at];
              }
            }
        }
      });
}

// Max pooling over kernel×kernel windows, no padding; ties go to the first
// maximum in row-major window order.
template <typename T>
BasicTensor<T> max_pool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  detail::require(x.rank() == 4, "max_pool2d expects x[N,C,H,W], got " + shape_str(x.shape()));
  detail::require(kernel >= 1 && stride >= 1, "max_pool2d kernel and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(H >= kernel && W >= kernel,
                  "max_pool2d kernel larger than input " + shape_str(x.shape()));
  const std::size_t OH = (H - kernel) / stride + 1, OW = (W - kernel) / stride + 1;
  auto X = x.data();
  std::vector<T> out(N * C * OH * OW);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < OH; ++oh)
      for (std::size_t ow = 0; ow < OW; ++ow) {
        std::size_t best = nc * H * W + oh * stride * W + ow * stride;
        for (std::size_t kh = 0; kh < kernel; ++kh)
          for (std::size_t kw = 0; kw < kernel; ++kw) {
            const std::size_t at = nc * H * W + (oh * stride + kh) * W + ow * stride + kw;
            if (X[at] > X[best]) best = at;
          }
        const std::size_t o = (nc * OH + oh) * OW + ow;
        out[o] = X[best];
        argmax[o] = best;
      }
  auto xi = x.impl();
  return BasicTensor<T>::make_result({N, C, OH, OW}, std::move(out), {xi},
                                     [xi, argmax = std::move(argmax)](std::span<const T> g) {
                                       T* gx = xi->grad_buffer();
                                       for (std::size_t o = 0; o < g.size(); ++o)
                                         gx[argmax[o]] += g[o];
                                     });
}

// Mean over spatial positions: x[N,C,H,W] -> [N,C].
template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  detail::require(x.rank() == 4,
                  "global_avg_pool expects x[N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto X = x.data();
  std::vector<T> out(N * C);
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    T sum = T(0);
    for (std::size_t i = 0; i < HW; ++i) sum += X[nc * HW + i];
    out[nc] = sum / T(HW);
  }
  auto xi = x.impl();
  return BasicTensor<T>::make_result({N, C}, std::move(out), {xi},
                                     [xi, HW](std::span<const T> g) {
                                       T* gx = xi->grad_buffer();
                                       for (std::size_t nc = 0; nc < g.size(); ++nc) {
                                         const T share = g[nc] / T(HW);
                                         for (std::size_t i = 0; i < HW; ++i)
                                           gx[nc * HW + i] += share;
                                       }
                                     });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  detail::require(shape_numel(shape) == x.numel(), "cannot reshape " + shape_str(x.shape()) +
                                                       " to " + shape_str(shape));
  auto xi = x.impl();
  return BasicTensor<T>::make_result(std::move(shape),
                                     std::vector<T>(x.data().begin(), x.data().end()), {xi},
                                     [xi](std::span<const T> g) {
                                       T* gx = xi->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                     });
}

// [N, d1, d2, ...] -> [N, d1*d2*...]
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  detail::require(x.rank() >= 1, "flatten of a rank-0 tensor");
  return reshape(x, {x.dim(0), x.numel() / std::max<std::size_t>(x.dim(0), 1)});
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require(a.shape() == b.shape(),
                  "add shape mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return BasicTensor<T>::make_result(a.shape(), std::move(out), {ai, bi},
                                     [ai, bi](std::span<const T> g) {
                                       for (auto* in : {ai.get(), bi.get()}) {
                                         if (!in->requires_grad) continue;
                                         T* gi = in->grad_buffer();
                                         for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                                       }
                                     });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  auto xi = x.impl();
  return BasicTensor<T>::make_result(x.shape(), std::move(out), {xi},
                                     [xi, factor](std::span<const T> g) {
                                       T* gx = xi->grad_buffer();
                                       for (std::size_t i = 0; i < g.size(); ++i)
                                         gx[i] += g[i] * factor;
                                     });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto xi = x.impl();
  return BasicTensor<T>::make_result({1}, {total}, {xi}, [xi](std::span<const T> g) {
    T* gx = xi->grad_buffer();
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0];
  });
}

// Rows [begin, end) along dimension 0.
template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require(x.rank() >= 1 && begin <= end && end <= x.dim(0),
                  "slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") out of range for " + shape_str(x.shape()));
  const std::size_t row = x.numel() / std::max<std::size_t>(x.dim(0), 1);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<T> out(x.data().begin() + std::ptrdiff_t(begin * row),
                     x.data().begin() + std::ptrdiff_t(end * row));
  auto xi = x.impl();
  return BasicTensor<T>::make_result(std::move(shape), std::move(out), {xi},
                                     [xi, offset = begin * row](std::span<const T> g) {
                                       T* gx = xi->grad_buffer() + offset;
                                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                     });
}

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> labels) {
  detail::require(logits.rank() == 2, "cross_entropy expects logits[N,K], got " +
                                          shape_str(logits.shape()));
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  detail::require(labels.size() == N, "cross_entropy: " + std::to_string(labels.size()) +
                                          " labels for " + std::to_string(N) + " rows");
  detail::require(N > 0, "cross_entropy on an empty batch");
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] >= K) {
      throw LabelError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0," + std::to_string(K) + ")");
    }
  }
  auto L = logits.data();
  std::vector<T> softmax(N * K);
  T total = T(0);
  for (std::size_t i = 0; i < N; ++i) {
    const T* row = L.data() + i * K;
    const T mx = *std::max_element(row, row + K);
    T z = T(0);
    for (std::size_t j = 0; j < K; ++j) {
      softmax[i * K + j] = std::exp(row[j] - mx);
      z += softmax[i * K + j];
    }
    for (std::size_t j = 0; j < K; ++j) softmax[i * K + j] /= z;
    total += std::log(z) - (row[labels[i]] - mx);
  }
  const T loss = total / T(N);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy produced a non-finite loss");
  auto li = logits.impl();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return BasicTensor<T>::make_result(
      {1}, {loss}, {li},
      [li, softmax = std::move(softmax), lab = std::move(lab), N, K](std::span<const T> g) {
        T* gl = li->grad_buffer();
        const T s = g[0] / T(N);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < K; ++j) {
            const T p = softmax[i * K + j] - (j == lab[i] ? T(1) : T(0));
            gl[i * K + j] += p * s;
          }
      });
}

}  // namespace treednn::ops
