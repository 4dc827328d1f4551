/*
 * Copyright 2026 The SSOD Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Differentiable layer primitives.

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ssod/error.hpp"
#include "ssod/tensor.hpp"

namespace ssod {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
void check_rank(const BasicTensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got shape " + shape_str(t.shape()));
  }
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

/// 2-D convolution over NCHW input with square kernels, via im2col + GEMM.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                     std::size_t stride, std::size_t padding) {
  detail::check_rank(input, 4, "conv2d", "input");
  detail::check_rank(weight, 4, "conv2d", "weight");
  detail::check_rank(bias, 1, "conv2d", "bias");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw ConfigError("conv2d: input channel dimension " + std::to_string(cin) +
                      " does not match weight dimension 1 (" + std::to_string(weight.dim(1)) + ")");
  }
  if (weight.dim(3) != k) throw ConfigError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (bias.dim(0) != cout) {
    throw ConfigError("conv2d: bias length " + std::to_string(bias.dim(0)) +
                      " does not match output channels " + std::to_string(cout));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (h + 2 * padding < k) throw ConfigError("conv2d: height " + std::to_string(h) + " plus padding is smaller than kernel");
  if (w + 2 * padding < k) throw ConfigError("conv2d: width " + std::to_string(w) + " plus padding is smaller than kernel");

  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k;
  const std::size_t positions = ho * wo;
  const std::size_t cols_n = n * positions;

  // cols is patch x (n * positions), column-major: one contiguous column per output pixel.
  auto cols = std::make_shared<detail::ColMat<T>>(patch, cols_n);
  const T* x = input.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T* col = cols->data() + (b * positions + oy * wo + ox) * patch;
        std::size_t r = 0;
        for (std::size_t c = 0; c < cin; ++c) {
          const T* plane = x + (b * cin + c) * h * w;
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            for (std::size_t kx = 0; kx < k; ++kx, ++r) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                  ix < static_cast<std::ptrdiff_t>(w);
              col[r] = inside ? plane[iy * static_cast<std::ptrdiff_t>(w) + ix] : 0.0f;
            }
          }
        }
      }
    }
  }

  Eigen::Map<const detail::RowMat<T>> wmat(weight.data().data(), cout, patch);
  const detail::ColMat<T> result = wmat * (*cols);  // cout x cols_n

  std::vector<T> out(n * cout * positions);
  const T* bvec = bias.data().data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < positions; ++p) {
      const T* src = result.data() + (b * positions + p) * cout;
      for (std::size_t co = 0; co < cout; ++co) out[(b * cout + co) * positions + p] = src[co] + bvec[co];
    }
  }

  auto in_impl = input.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return detail::make_result<T>(
      {n, cout, ho, wo}, std::move(out), {input, weight, bias},
      [=](std::span<const T> g) {
        detail::ColMat<T> gm(cout, cols_n);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t p = 0; p < positions; ++p) {
            T* dst = gm.data() + (b * positions + p) * cout;
            for (std::size_t co = 0; co < cout; ++co) dst[co] = g[(b * cout + co) * positions + p];
          }
        }
        if (b_impl->requires_grad) {
          std::vector<T> db(cout);
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cols_n; ++j) acc += gm(co, j);
            db[co] = static_cast<T>(acc);
          }
          b_impl->accumulate(db);
        }
        if (w_impl->requires_grad) {
          const detail::RowMat<T> dw = gm * cols->transpose();
          w_impl->accumulate(std::span<const T>(dw.data(), static_cast<std::size_t>(dw.size())));
        }
        if (in_impl->requires_grad) {
          Eigen::Map<const detail::RowMat<T>> wm(w_impl->data.data(), cout, patch);
          const detail::ColMat<T> dcols = wm.transpose() * gm;
          std::vector<T> dx(n * cin * h * w, 0.0f);
          for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t oy = 0; oy < ho; ++oy) {
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const T* col = dcols.data() + (b * positions + oy * wo + ox) * patch;
                std::size_t r = 0;
                for (std::size_t c = 0; c < cin; ++c) {
                  T* plane = dx.data() + (b * cin + c) * h * w;
                  for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                    for (std::size_t kx = 0; kx < k; ++kx, ++r) {
                      const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                      if (iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                          ix < static_cast<std::ptrdiff_t>(w)) {
                        plane[iy * static_cast<std::ptrdiff_t>(w) + ix] += col[r];
                      }
                    }
                  }
                }
              }
            }
          }
          in_impl->accumulate(dx);
        }
      });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& t) {
  std::vector<T> out(t.size());
  const auto in = t.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  auto impl = t.impl();
  return detail::make_result<T>(t.shape(), std::move(out), {t}, [impl](std::span<const T> g) {
    std::vector<T> dx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = impl->data[i] > 0.0f ? g[i] : 0.0f;
    impl->accumulate(dx);
  });
}

/// Global average pooling: [N,C,H,W] -> [N,C].
template <typename T>
BasicTensor<T> gap(const BasicTensor<T>& t) {
  detail::check_rank(t, 4, "gap", "input");
  const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  std::vector<T> out(n * c);
  const auto in = t.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < hw; ++j) acc += in[i * hw + j];
    out[i] = static_cast<T>(acc / static_cast<double>(hw));
  }
  auto impl = t.impl();
  return detail::make_result<T>({n, c}, std::move(out), {t}, [impl, n, c, hw](std::span<const T> g) {
    std::vector<T> dx(n * c * hw);
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t i = 0; i < n * c; ++i) {
      for (std::size_t j = 0; j < hw; ++j) dx[i * hw + j] = g[i] * inv;
    }
    impl->accumulate(dx);
  });
}

/// Affine map [N,D] x [D,K] + [K] -> [N,K].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& t, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  detail::check_rank(t, 2, "linear", "input");
  detail::check_rank(weight, 2, "linear", "weight");
  detail::check_rank(bias, 1, "linear", "bias");
  const std::size_t n = t.dim(0), d = t.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d) {
    throw ConfigError("linear: input dimension " + std::to_string(d) + " does not match weight rows " +
                      std::to_string(weight.dim(0)));
  }
  if (bias.dim(0) != k) {
    throw ConfigError("linear: bias length " + std::to_string(bias.dim(0)) + " does not match weight columns " +
                      std::to_string(k));
  }
  Eigen::Map<const detail::RowMat<T>> xm(t.data().data(), n, d);
  Eigen::Map<const detail::RowMat<T>> wm(weight.data().data(), d, k);
  detail::RowMat<T> ym = xm * wm;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) ym(i, j) += bias.data()[j];
  }
  std::vector<T> out(ym.data(), ym.data() + ym.size());

  auto x_impl = t.impl();
  auto w_impl = weight.impl();
  auto b_impl = bias.impl();
  return detail::make_result<T>({n, k}, std::move(out), {t, weight, bias}, [=](std::span<const T> g) {
    Eigen::Map<const detail::RowMat<T>> gm(g.data(), n, k);
    if (x_impl->requires_grad) {
      Eigen::Map<const detail::RowMat<T>> w(w_impl->data.data(), d, k);
      const detail::RowMat<T> dx = gm * w.transpose();
      x_impl->accumulate(std::span<const T>(dx.data(), static_cast<std::size_t>(dx.size())));
    }
    if (w_impl->requires_grad) {
      Eigen::Map<const detail::RowMat<T>> x(x_impl->data.data(), n, d);
      const detail::RowMat<T> dw = x.transpose() * gm;
      w_impl->accumulate(std::span<const T>(dw.data(), static_cast<std::size_t>(dw.size())));
    }
    if (b_impl->requires_grad) {
      std::vector<T> db(k);
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += gm(i, j);
        db[j] = static_cast<T>(acc);
      }
      b_impl->accumulate(db);
    }
  });
}

/// Reorders [N,C,H,W] into per-location rows [N*H*W, C] so a linear head can
/// be applied at every spatial position with shared weights.
template <typename T>
BasicTensor<T> to_rows(const BasicTensor<T>& t) {
  detail::check_rank(t, 4, "to_rows", "input");
  const std::size_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  std::vector<T> out(t.size());
  const auto in = t.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + ch] = in[(b * c + ch) * hw + p];
    }
  }
  auto impl = t.impl();
  return detail::make_result<T>({n * hw, c}, std::move(out), {t}, [impl, n, c, hw](std::span<const T> g) {
    std::vector<T> dx(n * c * hw);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) dx[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
      }
    }
    impl->accumulate(dx);
  });
}

/// Same values under a new shape with the same element count.
template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& t, Shape shape) {
  if (numel(shape) != t.size()) {
    throw ConfigError("reshape: cannot view " + shape_str(t.shape()) + " as " + shape_str(shape));
  }
  auto impl = t.impl();
  return detail::make_result<T>(std::move(shape), std::vector<T>(t.data().begin(), t.data().end()), {t},
                             [impl](std::span<const T> g) { impl->accumulate(g); });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& t) {
  double acc = 0.0;
  for (T v : t.data()) acc += v;
  auto impl = t.impl();
  return detail::make_result<T>({}, {static_cast<T>(acc)}, {t}, [impl](std::span<const T> g) {
    impl->accumulate(std::vector<T>(impl->data.size(), g[0]));
  });
}

/// Elementwise a + b for tensors of identical shape.
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [ai, bi](std::span<const T> g) {
    detail::accumulate_if(ai, g);
    detail::accumulate_if(bi, g);
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& t, std::type_identity_t<T> factor) {
  std::vector<T> out(t.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.data()[i] * factor;
  auto impl = t.impl();
  return detail::make_result<T>(t.shape(), std::move(out), {t}, [impl, factor](std::span<const T> g) {
    std::vector<T> dx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * factor;
    impl->accumulate(dx);
  });
}

/// Row-wise softmax of an [N,M] matrix; not differentiable.
template <typename T>
std::vector<T> softmax_rows(std::span<const T> logits, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* z = logits.data() + i * cols;
    T mx = z[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < cols; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
    for (std::size_t j = 0; j < cols; ++j) {
      out[i * cols + j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - mx) / denom);
    }
  }
  return out;
}

/// Mean over the batch of -log softmax(logits)[target].
template <typename T>
BasicTensor<T> softmax_ce(const BasicTensor<T>& logits, std::span<const int> targets) {
  detail::check_rank(logits, 2, "softmax_ce", "logits");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (targets.size() != n) {
    throw ConfigError("softmax_ce: " + std::to_string(targets.size()) + " targets for batch of " + std::to_string(n));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= m) {
      throw ConfigError("softmax_ce: target " + std::to_string(t) + " outside [0, " + std::to_string(m) + ")");
    }
  }
  const auto probs = softmax_rows<T>(logits.data(), n, m);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.data().data() + i * m;
    T mx = z[0];
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, z[j]);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
    acc += std::log(denom) + mx - z[targets[i]];
  }
  const double loss = acc / static_cast<double>(n);
  auto impl = logits.impl();
  std::vector<int> tgt(targets.begin(), targets.end());
  return detail::make_result<T>({}, {static_cast<T>(loss)}, {logits},
                             [impl, probs, tgt, n, m](std::span<const T> g) {
                               std::vector<T> dz(n * m);
                               const T s = g[0] / static_cast<T>(n);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const T onehot = static_cast<int>(j) == tgt[i] ? T(1) : T(0);
                                   dz[i * m + j] = (probs[i * m + j] - onehot) * s;
                                 }
                               }
                               impl->accumulate(dz);
                             });
}

/// Sum over elements of weight_i * BCE(sigmoid(logit_i), target_i).
///
/// Uses the form softplus(z) - t*z, which is stable for any z.
template <typename T>
BasicTensor<T> weighted_bce_with_logits(const BasicTensor<T>& logits, std::span<const float> targets,
                                       std::span<const float> weights) {
  if (targets.size() != logits.size() || weights.size() != logits.size()) {
    throw ConfigError("weighted_bce_with_logits: " + std::to_string(logits.size()) + " logits, " +
                      std::to_string(targets.size()) + " targets, " + std::to_string(weights.size()) + " weights");
  }
  double acc = 0.0;
  const auto z = logits.data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (weights[i] == 0.0f) continue;
    acc += weights[i] * (detail::softplus(z[i]) - targets[i] * static_cast<double>(z[i]));
  }
  auto impl = logits.impl();
  std::vector<float> t(targets.begin(), targets.end());
  std::vector<float> w(weights.begin(), weights.end());
  return detail::make_result<T>({}, {static_cast<T>(acc)}, {logits}, [impl, t, w](std::span<const T> g) {
    std::vector<T> dz(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      dz[i] = w[i] == 0.0f ? 0.0f
                           : static_cast<T>(g[0] * w[i] * (detail::sigmoid(impl->data[i]) - t[i]));
    }
    impl->accumulate(dz);
  });
}

/// Mean binary cross-entropy of logits against {0,1} targets.
template <typename T>
BasicTensor<T> binary_ce_with_logit(const BasicTensor<T>& logits, std::span<const float> targets) {
  for (float t : targets) {
    if (t != 0.0f && t != 1.0f) throw ConfigError("binary_ce_with_logit: targets must be 0 or 1");
  }
  const std::vector<float> w(logits.size(), 1.0f / static_cast<float>(logits.size()));
  return weighted_bce_with_logits(logits, targets, w);
}

}  // namespace ssod
