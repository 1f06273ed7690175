// Copyright 2026 The KSM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ksm/tensor.hpp"

namespace ksm {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op<T>("add", a.shape(), std::move(out), {a, b},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (auto* sink : in) {
                        if (!sink) continue;
                        for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
                      }
                    });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      if (in[0])
                        for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                      if (in[1])
                        for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
                    });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b},
                    [a, b](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      if (in[0])
                        for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * b.data()[i];
                      if (in[1])
                        for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * a.data()[i];
                    });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_op<T>("scale", a.shape(), std::move(out), {a},
                    [factor](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * factor;
                    });
}

template <std::floating_point T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return make_op<T>("sum", Shape{}, {total}, {a},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (auto& v : *in[0]) v += g[0];
                    });
}

template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_op<T>("reshape", std::move(shape), a.values(), {a},
                    [](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
                    });
}

/// [B, ...] -> [B, prod(...)]
template <std::floating_point T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.rank() < 1) throw DimensionError("flatten: scalar input");
  return reshape(a, Shape{a.dim(0), a.numel() / std::max<std::size_t>(a.dim(0), 1)});
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  return make_op<T>("relu", a.shape(), std::move(out), {a},
                    [a](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      for (std::size_t i = 0; i < g.size(); ++i)
                        if (a.data()[i] > T(0)) (*in[0])[i] += g[i];
                    });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct Conv2dGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t positions() const { return out_h * out_w; }
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& weight, std::size_t stride,
                                      std::size_t pad) {
  detail::require_rank("conv2d input", input, 4);
  detail::require_rank("conv2d weight", weight, 4);
  if (input[1] != weight[1]) {
    throw DimensionError("conv2d: input channels " + std::to_string(input[1]) +
                         " != weight channels " + std::to_string(weight[1]));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
  if (weight[2] == 0 || weight[3] == 0) throw ContractError("conv2d: empty kernel");
  if (input[2] + 2 * pad < weight[2] || input[3] + 2 * pad < weight[3]) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  Conv2dGeometry g{input[0], input[1], input[2], input[3], weight[0], weight[2], weight[3],
                   stride,   pad,      0,        0};
  g.out_h = (g.height + 2 * pad - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel_w) / stride + 1;
  return g;
}

namespace detail {

// Writes one image into columns [col0, col0 + positions) of a row-major
// (Cin*kh*kw) x ld matrix.
template <class T>
void im2col(const T* image, const Conv2dGeometry& g, T* cols, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * ld + col0;
        // output columns whose input column lies inside the image
        const long shift = static_cast<long>(kx) - static_cast<long>(g.pad);
        const long st = static_cast<long>(g.stride);
        const long first = shift >= 0 ? 0 : (-shift + st - 1) / st;
        const long last_in = static_cast<long>(g.width) - 1 - shift;
        const long last = last_in < 0 ? -1 : std::min<long>(static_cast<long>(g.out_w) - 1, last_in / st);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* out = row + oy * g.out_w;
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height) || last < first) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          std::fill(out, out + first, T(0));
          if (g.stride == 1) {
            std::copy(src + (first + shift), src + (last + shift) + 1, out + first);
          } else {
            for (long ox = first; ox <= last; ++ox) out[ox] = src[ox * st + shift];
          }
          std::fill(out + last + 1, out + g.out_w, T(0));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const Conv2dGeometry& g, T* image, std::size_t ld, std::size_t col0) {
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = cols + ((c * g.kernel_h + ky) * g.kernel_w + kx) * ld + col0;
        const long shift = static_cast<long>(kx) - static_cast<long>(g.pad);
        const long st = static_cast<long>(g.stride);
        const long first = shift >= 0 ? 0 : (-shift + st - 1) / st;
        const long last_in = static_cast<long>(g.width) - 1 - shift;
        const long last = last_in < 0 ? -1 : std::min<long>(static_cast<long>(g.out_w) - 1, last_in / st);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const T* in = row + oy * g.out_w;
          for (long ox = first; ox <= last; ++ox) dst[ox * st + shift] += in[ox];
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation (no kernel flip). Weight layout is (Cout, Cin, kh, kw).
/// The whole batch is lowered to one (Cin*kh*kw) x (B*out_h*out_w) matrix.
template <std::floating_point T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride = 1,
                 std::size_t pad = 0) {
  const Conv2dGeometry g = conv2d_geometry(input.shape(), weight.shape(), stride, pad);
  const std::size_t patch = g.patch();
  const std::size_t positions = g.positions();
  const std::size_t ld = g.batch * positions;
  const std::size_t in_image = g.in_channels * g.height * g.width;
  const std::size_t out_image = g.out_channels * positions;

  auto cols = std::make_shared<std::vector<T>>(patch * ld);
  for (std::size_t b = 0; b < g.batch; ++b)
    detail::im2col(input.data().data() + b * in_image, g, cols->data(), ld, b * positions);
  std::vector<T> product(g.out_channels * ld);
  {
    detail::CMapMat<T> w(weight.data().data(), g.out_channels, patch);
    detail::CMapMat<T> c(cols->data(), patch, ld);
    detail::MapMat<T> o(product.data(), g.out_channels, ld);
    o.noalias() = w * c;
  }
  std::vector<T> out(g.batch * out_image);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      std::copy_n(product.data() + o * ld + b * positions, positions, out.data() + b * out_image + o * positions);
  if (!weight.requires_grad()) cols.reset();

  Shape shape{g.batch, g.out_channels, g.out_h, g.out_w};
  return make_op<T>(
      "conv2d", std::move(shape), std::move(out), {input, weight},
      [weight, g, cols](std::span<const T> grad, std::span<std::vector<T>* const> in) {
        const std::size_t patch = g.patch();
        const std::size_t positions = g.positions();
        const std::size_t ld = g.batch * positions;
        const std::size_t in_image = g.in_channels * g.height * g.width;
        const std::size_t out_image = g.out_channels * positions;
        std::vector<T> dout(g.out_channels * ld);
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t o = 0; o < g.out_channels; ++o)
            std::copy_n(grad.data() + b * out_image + o * positions, positions, dout.data() + o * ld + b * positions);
        detail::CMapMat<T> dy(dout.data(), g.out_channels, ld);
        if (in[1]) {
          detail::CMapMat<T> c(cols->data(), patch, ld);
          detail::MapMat<T> dw(in[1]->data(), g.out_channels, patch);
          dw.noalias() += dy * c.transpose();
        }
        if (in[0]) {
          std::vector<T> dcols(patch * ld);
          detail::MapMat<T> dc(dcols.data(), patch, ld);
          detail::CMapMat<T> w(weight.data().data(), g.out_channels, patch);
          dc.noalias() = w.transpose() * dy;
          for (std::size_t b = 0; b < g.batch; ++b)
            detail::col2im_add(dcols.data(), g, in[0]->data() + b * in_image, ld, b * positions);
        }
      });
}

/// Multiplies every (o, i) kernel of a (Cout, Cin, kh, kw) weight by mask[o, i].
template <std::floating_point T>
Tensor<T> kernel_scale(const Tensor<T>& weight, const Tensor<T>& mask) {
  detail::require_rank("kernel_scale weight", weight.shape(), 4);
  detail::require_rank("kernel_scale mask", mask.shape(), 2);
  if (mask.dim(0) != weight.dim(0) || mask.dim(1) != weight.dim(1)) {
    throw DimensionError("kernel_scale: mask " + shape_str(mask.shape()) +
                         " does not match kernels of " + shape_str(weight.shape()));
  }
  const std::size_t area = weight.dim(2) * weight.dim(3);
  std::vector<T> out(weight.numel());
  for (std::size_t k = 0; k < mask.numel(); ++k) {
    const T m = mask.data()[k];
    for (std::size_t j = 0; j < area; ++j) out[k * area + j] = weight.data()[k * area + j] * m;
  }
  return make_op<T>("kernel_scale", weight.shape(), std::move(out), {weight, mask},
                    [weight, mask, area](std::span<const T> g,
                                         std::span<std::vector<T>* const> in) {
                      for (std::size_t k = 0; k < mask.numel(); ++k) {
                        T acc = T(0);
                        for (std::size_t j = 0; j < area; ++j) {
                          const std::size_t idx = k * area + j;
                          if (in[0]) (*in[0])[idx] += g[idx] * mask.data()[k];
                          acc += g[idx] * weight.data()[idx];
                        }
                        if (in[1]) (*in[1])[k] += acc;
                      }
                    });
}

// ---------------------------------------------------------------------------
// Pooling, dense, normalization, loss
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> max_pool2d(const Tensor<T>& input, std::size_t size, std::size_t stride = 0) {
  detail::require_rank("max_pool2d", input.shape(), 4);
  if (stride == 0) stride = size;
  if (size == 0 || input.dim(2) < size || input.dim(3) < size) {
    throw DimensionError("max_pool2d: window " + std::to_string(size) + " does not fit " +
                         shape_str(input.shape()));
  }
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t oh = (H - size) / stride + 1, ow = (W - size) / stride + 1;
  std::vector<T> out(B * C * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto x = input.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * H * W;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = base + (oy * stride) * W + ox * stride;
        for (std::size_t ky = 0; ky < size; ++ky)
          for (std::size_t kx = 0; kx < size; ++kx) {
            const std::size_t idx = base + (oy * stride + ky) * W + ox * stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (bc * oh + oy) * ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  return make_op<T>("max_pool2d", Shape{B, C, oh, ow}, std::move(out), {input},
                    [argmax = std::move(argmax)](std::span<const T> g,
                                                 std::span<std::vector<T>* const> in) {
                      for (std::size_t o = 0; o < g.size(); ++o) (*in[0])[argmax[o]] += g[o];
                    });
}

/// x[B, In] * weight[Out, In]^T + bias[Out]. `bias` may be undefined.
template <std::floating_point T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank("dense input", input.shape(), 2);
  detail::require_rank("dense weight", weight.shape(), 2);
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("dense: input features " + std::to_string(input.dim(1)) +
                         " != weight columns " + std::to_string(weight.dim(1)));
  }
  const std::size_t B = input.dim(0), In = input.dim(1), Out = weight.dim(0);
  if (bias.defined() && bias.shape() != Shape{Out}) {
    throw DimensionError("dense: bias shape " + shape_str(bias.shape()));
  }
  std::vector<T> out(B * Out);
  detail::CMapMat<T> x(input.data().data(), B, In);
  detail::CMapMat<T> w(weight.data().data(), Out, In);
  detail::MapMat<T> y(out.data(), B, Out);
  y.noalias() = x * w.transpose();
  if (bias.defined()) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < Out; ++o) out[b * Out + o] += bias.data()[o];
  }
  std::vector<Tensor<T>> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op<T>(
      "dense", Shape{B, Out}, std::move(out), inputs,
      [input, weight, B, In, Out](std::span<const T> g, std::span<std::vector<T>* const> in) {
        detail::CMapMat<T> dy(g.data(), B, Out);
        if (in[0]) {
          detail::MapMat<T> dx(in[0]->data(), B, In);
          dx.noalias() += dy * detail::CMapMat<T>(weight.data().data(), Out, In);
        }
        if (in[1]) {
          detail::MapMat<T> dw(in[1]->data(), Out, In);
          dw.noalias() += dy.transpose() * detail::CMapMat<T>(input.data().data(), B, In);
        }
        if (in.size() > 2 && in[2]) {
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < Out; ++o) (*in[2])[o] += g[b * Out + o];
        }
      });
}

/// Affine parameters and running statistics of one 2-D batch norm.
template <std::floating_point T>
struct BatchNorm2d {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm2d make(std::size_t channels) {
    return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::full({channels}, T(0), true),
            Tensor<T>::full({channels}, T(0)), Tensor<T>::full({channels}, T(1))};
  }

  std::size_t channels() const { return gamma.numel(); }

  BatchNorm2d clone() const {
    return {gamma.clone(), beta.clone(), running_mean.clone(), running_var.clone(), momentum, eps};
  }
};

enum class Mode { kTrain, kEval };

/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running estimates (unbiased variance); eval mode uses the
/// running estimates.
template <std::floating_point T>
Tensor<T> batch_norm2d(const Tensor<T>& input, BatchNorm2d<T>& bn, Mode mode) {
  detail::require_rank("batch_norm2d", input.shape(), 4);
  const std::size_t B = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
  if (bn.channels() != C) {
    throw DimensionError("batch_norm2d: " + std::to_string(bn.channels()) +
                         " channels for input " + shape_str(input.shape()));
  }
  const std::size_t count = B * HW;
  const auto x = input.data();
  std::vector<T> mu(C), inv_std(C);
  if (mode == Mode::kTrain) {
    if (count < 2) throw ContractError("batch_norm2d: training needs more than one value per channel");
    for (std::size_t c = 0; c < C; ++c) {
      T s = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += x[(b * C + c) * HW + i];
      const T m = s / static_cast<T>(count);
      T ss = T(0);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = x[(b * C + c) * HW + i] - m;
          ss += d * d;
        }
      const T var = ss / static_cast<T>(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + bn.eps);
      auto rm = bn.running_mean.data();
      auto rv = bn.running_var.data();
      rm[c] = (T(1) - bn.momentum) * rm[c] + bn.momentum * m;
      rv[c] = (T(1) - bn.momentum) * rv[c] +
              bn.momentum * ss / static_cast<T>(count - 1);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = bn.running_mean.data()[c];
      inv_std[c] = T(1) / std::sqrt(bn.running_var.data()[c] + bn.eps);
    }
  }

  std::vector<T> xhat(input.numel()), out(input.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = (b * C + c) * HW + i;
        xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
        out[idx] = bn.gamma.data()[c] * xhat[idx] + bn.beta.data()[c];
      }

  Tensor<T> gamma = bn.gamma;
  return make_op<T>(
      "batch_norm2d", input.shape(), std::move(out), {input, bn.gamma, bn.beta},
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), B, C, HW, count,
       mode](std::span<const T> g, std::span<std::vector<T>* const> in) {
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (b * C + c) * HW + i;
              sum_g += g[idx];
              sum_gx += g[idx] * xhat[idx];
            }
          if (in[1]) (*in[1])[c] += sum_gx;
          if (in[2]) (*in[2])[c] += sum_g;
          if (!in[0]) continue;
          const T gm = gamma.data()[c];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t idx = (b * C + c) * HW + i;
              if (mode == Mode::kTrain) {
                (*in[0])[idx] += gm * inv_std[c] *
                                 (g[idx] - sum_g / static_cast<T>(count) -
                                  xhat[idx] * sum_gx / static_cast<T>(count));
              } else {
                (*in[0])[idx] += gm * inv_std[c] * g[idx];
              }
            }
        }
      });
}

/// Mean softmax cross-entropy of logits[B, C] against integer labels.
template <std::floating_point T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  detail::require_rank("softmax_cross_entropy", logits.shape(), 2);
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) throw DimensionError("softmax_cross_entropy: label count != batch");
  if (B == 0) throw ContractError("softmax_cross_entropy: empty batch");
  std::vector<T> probs(B * C);
  T loss = T(0);
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) {
      throw ContractError("softmax_cross_entropy: label out of range");
    }
    const T* row = logits.data().data() + b * C;
    const T mx = *std::max_element(row, row + C);
    T z = T(0);
    for (std::size_t c = 0; c < C; ++c) {
      probs[b * C + c] = std::exp(row[c] - mx);
      z += probs[b * C + c];
    }
    for (std::size_t c = 0; c < C; ++c) probs[b * C + c] /= z;
    loss += std::log(z) + mx - row[labels[b]];
  }
  loss /= static_cast<T>(B);
  std::vector<int> owned(labels.begin(), labels.end());
  return make_op<T>("softmax_cross_entropy", Shape{}, {loss}, {logits},
                    [probs = std::move(probs), owned = std::move(owned), B,
                     C](std::span<const T> g, std::span<std::vector<T>* const> in) {
                      const T s = g[0] / static_cast<T>(B);
                      for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t c = 0; c < C; ++c) {
                          const T target = static_cast<int>(c) == owned[b] ? T(1) : T(0);
                          (*in[0])[b * C + c] += s * (probs[b * C + c] - target);
                        }
                    });
}

}  // namespace ksm
