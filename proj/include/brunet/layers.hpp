#pragma once

// Differentiable primitives over rank-4 (T, H, W, C) tensors. Every layer comes as a
// forward function returning its output plus a tape, and a backward function that
// consumes that tape. All convolutions have stride 1.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "brunet/error.hpp"
#include "brunet/parallel.hpp"
#include "brunet/tensor.hpp"

namespace brunet {

enum class Padding { same, valid };

/// One 3D convolution over (T, H, W) with stride 1.
struct ConvSpec {
  std::array<std::size_t, 3> kernel{1, 1, 1};
  std::array<std::size_t, 3> dilation{1, 1, 1};
  Padding padding = Padding::same;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  bool bias = true;

  std::size_t taps() const noexcept { return kernel[0] * kernel[1] * kernel[2]; }
  std::size_t effective_extent(std::size_t axis) const { return (kernel.at(axis) - 1) * dilation.at(axis) + 1; }
  std::size_t weight_count() const noexcept { return taps() * in_channels * out_channels; }
  std::size_t param_count() const noexcept { return weight_count() + (bias ? out_channels : 0); }

  /// Weights are stored as (kt*kh*kw, Cin, Cout); the row-major layout equals (kt, kh, kw, Cin, Cout).
  Shape weight_shape() const { return Shape{taps(), in_channels, out_channels}; }
  Shape bias_shape() const { return Shape{out_channels}; }

  std::string kernel_label() const {
    return std::to_string(kernel[0]) + "x" + std::to_string(kernel[1]) + "x" + std::to_string(kernel[2]);
  }

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a)
      if (kernel[a] < 1 || dilation[a] < 1) throw InvalidArgument("conv kernel and dilation extents must be >= 1");
    if (in_channels < 1 || out_channels < 1) throw InvalidArgument("conv channel counts must be >= 1");
  }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

template <class T>
struct ConvParams {
  Tensor<T> weights;  // ConvSpec::weight_shape()
  Tensor<T> bias;     // (Cout), empty when the spec has no bias
};

/// Resolved output extents and leading pad for one input shape.
struct ConvGeometry {
  std::array<std::size_t, 3> in{};
  std::array<std::size_t, 3> out{};
  std::array<std::ptrdiff_t, 3> pad_before{};

  ConvGeometry(const Shape& x, const ConvSpec& spec) {
    if (x.rank() != 4) throw InvalidArgument("conv input must be rank 4 (T,H,W,C), got " + x.str());
    if (x[kChannel] != spec.in_channels)
      throw InvalidArgument("conv expects " + std::to_string(spec.in_channels) + " input channels, got " +
                            std::to_string(x[kChannel]));
    for (std::size_t a = 0; a < 3; ++a) {
      in[a] = x[a];
      const std::size_t eff = spec.effective_extent(a);
      if (spec.padding == Padding::same) {
        const std::size_t total = eff - 1;
        pad_before[a] = static_cast<std::ptrdiff_t>(total / 2);
        out[a] = in[a];
      } else {
        if (eff > in[a])
          throw InvalidShape("kernel effective extent " + std::to_string(eff) + " exceeds input extent " +
                             std::to_string(in[a]) + " under valid padding");
        pad_before[a] = 0;
        out[a] = in[a] - eff + 1;
      }
    }
  }

  Shape output_shape(std::size_t channels) const { return Shape{out[0], out[1], out[2], channels}; }
};

inline Shape conv_output_shape(const Shape& x, const ConvSpec& spec) {
  return ConvGeometry(x, spec).output_shape(spec.out_channels);
}

namespace detail {

// Index range [lo, hi) of output positions o with 0 <= o + shift < in_extent.
inline std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_range(std::ptrdiff_t shift, std::size_t in_extent,
                                                             std::size_t out_extent) {
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -shift);
  const std::ptrdiff_t hi =
      std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_extent), static_cast<std::ptrdiff_t>(in_extent) - shift);
  return {lo, std::max(lo, hi)};
}

}  // namespace detail

/// y = conv(x, w) + b. Summation order per output: bias, then taps in (t, h, w) order, then input channels.
template <class T>
Tensor<T> conv3d_apply(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>* bias, const ConvSpec& spec) {
  spec.validate();
  const ConvGeometry g(x.shape(), spec);
  if (!(weights.shape() == spec.weight_shape()))
    throw InvalidArgument("conv weights " + weights.shape().str() + " do not match spec " + spec.weight_shape().str());
  if (bias && bias->size() != spec.out_channels) throw InvalidArgument("conv bias length mismatch");

  const std::size_t ci_n = spec.in_channels;
  const std::size_t co_n = spec.out_channels;
  const auto [kt, kh, kw] = spec.kernel;
  const auto [dt, dh, dw] = spec.dilation;
  Tensor<T> y(g.output_shape(co_n));
  const std::size_t rows = g.out[0] * g.out[1];
  const T* w = weights.data();

  parallel_for(rows, g.out[2] * spec.weight_count(), [&](std::size_t row) {
    const auto ot = static_cast<std::ptrdiff_t>(row / g.out[1]);
    const auto oh = static_cast<std::ptrdiff_t>(row % g.out[1]);
    T* yrow = y.data() + row * g.out[2] * co_n;
    if (bias)
      for (std::size_t ow = 0; ow < g.out[2]; ++ow) std::copy(bias->data(), bias->data() + co_n, yrow + ow * co_n);
    for (std::size_t i = 0; i < kt; ++i) {
      const std::ptrdiff_t it = ot + static_cast<std::ptrdiff_t>(i * dt) - g.pad_before[0];
      if (it < 0 || it >= static_cast<std::ptrdiff_t>(g.in[0])) continue;
      for (std::size_t j = 0; j < kh; ++j) {
        const std::ptrdiff_t ih = oh + static_cast<std::ptrdiff_t>(j * dh) - g.pad_before[1];
        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in[1])) continue;
        const T* xrow = x.data() + (static_cast<std::size_t>(it) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2] * ci_n;
        for (std::size_t l = 0; l < kw; ++l) {
          const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(l * dw) - g.pad_before[2];
          const auto [lo, hi] = detail::valid_range(shift, g.in[2], g.out[2]);
          const T* wtap = w + ((i * kh + j) * kw + l) * ci_n * co_n;
          for (std::ptrdiff_t ow = lo; ow < hi; ++ow) {
            const T* xp = xrow + static_cast<std::size_t>(ow + shift) * ci_n;
            T* yp = yrow + static_cast<std::size_t>(ow) * co_n;
            for (std::size_t ci = 0; ci < ci_n; ++ci) {
              const T xv = xp[ci];
              const T* wv = wtap + ci * co_n;
              for (std::size_t co = 0; co < co_n; ++co) yp[co] += xv * wv[co];
            }
          }
        }
      }
    }
  });
  return y;
}

/// Gradient w.r.t. the conv input (gather form, one writer per input row).
template <class T>
Tensor<T> conv3d_backward_data(const Shape& x_shape, const Tensor<T>& weights, const Tensor<T>& grad_out,
                               const ConvSpec& spec) {
  const ConvGeometry g(x_shape, spec);
  if (!(grad_out.shape() == g.output_shape(spec.out_channels)))
    throw InvalidArgument("conv grad_out " + grad_out.shape().str() + " does not match forward output " +
                          g.output_shape(spec.out_channels).str());
  const std::size_t ci_n = spec.in_channels;
  const std::size_t co_n = spec.out_channels;
  const auto [kt, kh, kw] = spec.kernel;
  const auto [dt, dh, dw] = spec.dilation;
  Tensor<T> gx(x_shape);
  const T* w = weights.data();
  const std::size_t rows = g.in[0] * g.in[1];

  parallel_for(rows, g.in[2] * spec.weight_count(), [&](std::size_t row) {
    const auto t = static_cast<std::ptrdiff_t>(row / g.in[1]);
    const auto h = static_cast<std::ptrdiff_t>(row % g.in[1]);
    T* gxrow = gx.data() + row * g.in[2] * ci_n;
    for (std::size_t i = 0; i < kt; ++i) {
      const std::ptrdiff_t ot = t + g.pad_before[0] - static_cast<std::ptrdiff_t>(i * dt);
      if (ot < 0 || ot >= static_cast<std::ptrdiff_t>(g.out[0])) continue;
      for (std::size_t j = 0; j < kh; ++j) {
        const std::ptrdiff_t oh = h + g.pad_before[1] - static_cast<std::ptrdiff_t>(j * dh);
        if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(g.out[1])) continue;
        const T* grow = grad_out.data() + (static_cast<std::size_t>(ot) * g.out[1] + static_cast<std::size_t>(oh)) * g.out[2] * co_n;
        for (std::size_t l = 0; l < kw; ++l) {
          // input column iw reads output column ow = iw + shift
          const std::ptrdiff_t shift = g.pad_before[2] - static_cast<std::ptrdiff_t>(l * dw);
          const auto [lo, hi] = detail::valid_range(shift, g.out[2], g.in[2]);
          const T* wtap = w + ((i * kh + j) * kw + l) * ci_n * co_n;
          for (std::ptrdiff_t iw = lo; iw < hi; ++iw) {
            const T* gp = grow + static_cast<std::size_t>(iw + shift) * co_n;
            T* gxp = gxrow + static_cast<std::size_t>(iw) * ci_n;
            for (std::size_t ci = 0; ci < ci_n; ++ci) {
              const T* wv = wtap + ci * co_n;
              T s = 0;
              for (std::size_t co = 0; co < co_n; ++co) s += wv[co] * gp[co];
              gxp[ci] += s;
            }
          }
        }
      }
    }
  });
  return gx;
}

/// Accumulates weight (and bias) gradients into grad_w / grad_b. One writer per kernel tap.
template <class T>
void conv3d_backward_filter(const Tensor<T>& x, const Tensor<T>& grad_out, const ConvSpec& spec, Tensor<T>& grad_w,
                            Tensor<T>* grad_b) {
  const ConvGeometry g(x.shape(), spec);
  if (!(grad_out.shape() == g.output_shape(spec.out_channels)))
    throw InvalidArgument("conv grad_out shape does not match forward output");
  if (!(grad_w.shape() == spec.weight_shape())) throw InvalidArgument("conv grad_w shape mismatch");
  const std::size_t ci_n = spec.in_channels;
  const std::size_t co_n = spec.out_channels;
  const auto [kt, kh, kw] = spec.kernel;
  const auto [dt, dh, dw] = spec.dilation;

  parallel_for(spec.taps(), grad_out.size() * ci_n, [&](std::size_t tap) {
    const std::size_t i = tap / (kh * kw);
    const std::size_t j = (tap / kw) % kh;
    const std::size_t l = tap % kw;
    T* gw = grad_w.data() + tap * ci_n * co_n;
    const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(i * dt) - g.pad_before[0];
    const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(j * dh) - g.pad_before[1];
    const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(l * dw) - g.pad_before[2];
    const auto [t_lo, t_hi] = detail::valid_range(st, g.in[0], g.out[0]);
    const auto [h_lo, h_hi] = detail::valid_range(sh, g.in[1], g.out[1]);
    const auto [w_lo, w_hi] = detail::valid_range(sw, g.in[2], g.out[2]);
    for (std::ptrdiff_t ot = t_lo; ot < t_hi; ++ot)
      for (std::ptrdiff_t oh = h_lo; oh < h_hi; ++oh) {
        const T* grow = grad_out.data() + (static_cast<std::size_t>(ot) * g.out[1] + static_cast<std::size_t>(oh)) * g.out[2] * co_n;
        const T* xrow = x.data() + (static_cast<std::size_t>(ot + st) * g.in[1] + static_cast<std::size_t>(oh + sh)) * g.in[2] * ci_n;
        for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) {
          const T* gp = grow + static_cast<std::size_t>(ow) * co_n;
          const T* xp = xrow + static_cast<std::size_t>(ow + sw) * ci_n;
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T xv = xp[ci];
            T* gwv = gw + ci * co_n;
            for (std::size_t co = 0; co < co_n; ++co) gwv[co] += xv * gp[co];
          }
        }
      }
  });

  if (grad_b) {
    if (grad_b->size() != co_n) throw InvalidArgument("conv grad_b shape mismatch");
    const std::size_t positions = grad_out.size() / co_n;
    for (std::size_t p = 0; p < positions; ++p)
      for (std::size_t co = 0; co < co_n; ++co) (*grad_b)[co] += grad_out[p * co_n + co];
  }
}

// -- functional conv with tape ----------------------------------------------------

template <class T>
struct ConvTape {
  ConvSpec spec;
  Tensor<T> input;
  ConvParams<T> params;
};

template <class T>
struct ConvForward {
  Tensor<T> output;
  ConvTape<T> tape;
};

template <class T>
struct ConvGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_w;
  Tensor<T> grad_b;  // empty without bias
};

template <class T>
ConvForward<T> conv3d_forward(const Tensor<T>& x, const ConvParams<T>& params, const ConvSpec& spec) {
  if (spec.bias && params.bias.empty()) throw InvalidArgument("conv spec requires a bias vector");
  Tensor<T> y = conv3d_apply(x, params.weights, spec.bias ? &params.bias : nullptr, spec);
  return {std::move(y), ConvTape<T>{spec, x, params}};
}

template <class T>
ConvGrads<T> conv3d_backward(ConvTape<T>&& tape, const Tensor<T>& grad_out) {
  ConvGrads<T> g;
  g.grad_x = conv3d_backward_data(tape.input.shape(), tape.params.weights, grad_out, tape.spec);
  g.grad_w = Tensor<T>(tape.spec.weight_shape());
  if (tape.spec.bias) g.grad_b = Tensor<T>(tape.spec.bias_shape());
  conv3d_backward_filter(tape.input, grad_out, tape.spec, g.grad_w, tape.spec.bias ? &g.grad_b : nullptr);
  tape.input = Tensor<T>();
  return g;
}

/// He-style uniform init: weights in +-sqrt(6 / fan_in), fan_in = taps * Cin; biases zero.
template <class T, class Rng>
ConvParams<T> init_conv_params(const ConvSpec& spec, Rng& rng) {
  ConvParams<T> p;
  p.weights = Tensor<T>(spec.weight_shape());
  const double limit = std::sqrt(6.0 / static_cast<double>(spec.taps() * spec.in_channels));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : p.weights.values()) v = static_cast<T>(dist(rng));
  if (spec.bias) p.bias = Tensor<T>(spec.bias_shape());
  return p;
}

// -- factorization ------------------------------------------------------------------

/// Splits an N x N x N kernel into the chain 1x1xN, 1xNx1, Nx1x1. Only the last factor keeps the bias.
inline std::array<ConvSpec, 3> factorize_conv(const ConvSpec& spec) {
  const std::size_t n = spec.kernel[0];
  if (spec.kernel[1] != n || spec.kernel[2] != n)
    throw InvalidArgument("factorize_conv needs a cubic kernel, got " + spec.kernel_label());
  if (n <= 1) throw InvalidArgument("factorize_conv needs kernel extent > 1");
  std::array<ConvSpec, 3> out;
  for (std::size_t f = 0; f < 3; ++f) {
    const std::size_t axis = 2 - f;  // width, then height, then time
    ConvSpec s;
    s.kernel = {1, 1, 1};
    s.dilation = {1, 1, 1};
    s.kernel[axis] = n;
    s.dilation[axis] = spec.dilation[axis];
    s.padding = spec.padding;
    s.in_channels = f == 0 ? spec.in_channels : spec.out_channels;
    s.out_channels = spec.out_channels;
    s.bias = f == 2 && spec.bias;
    out[f] = s;
  }
  return out;
}

/// Axis-wise chain for an arbitrary (kt, kh, kw) kernel in the same width, height, time order,
/// omitting factors of extent 1. A cubic kernel yields exactly factorize_conv's chain.
inline std::vector<ConvSpec> factorize_kernel(const ConvSpec& spec) {
  std::vector<std::size_t> axes;
  for (std::size_t axis : {std::size_t{2}, std::size_t{1}, std::size_t{0}})
    if (spec.kernel[axis] > 1) axes.push_back(axis);
  if (axes.size() <= 1) return {spec};
  std::vector<ConvSpec> out;
  for (std::size_t f = 0; f < axes.size(); ++f) {
    ConvSpec s;
    s.kernel = {1, 1, 1};
    s.dilation = {1, 1, 1};
    s.kernel[axes[f]] = spec.kernel[axes[f]];
    s.dilation[axes[f]] = spec.dilation[axes[f]];
    s.padding = spec.padding;
    s.in_channels = f == 0 ? spec.in_channels : spec.out_channels;
    s.out_channels = spec.out_channels;
    s.bias = f + 1 == axes.size() && spec.bias;
    out.push_back(s);
  }
  return out;
}

// -- spatial max pooling (window and stride (1, 2, 2)) ---------------------------------

struct MaxPoolTape {
  Shape input_shape;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <class T>
struct MaxPoolForward {
  Tensor<T> output;
  MaxPoolTape tape;
};

inline Shape maxpool_output_shape(const Shape& x) {
  if (x.rank() != 4) throw InvalidArgument("maxpool input must be rank 4");
  if (x[kHeight] % 2 != 0 || x[kWidth] % 2 != 0)
    throw InvalidShape("maxpool needs even H and W, got " + x.str());
  return Shape{x[kTime], x[kHeight] / 2, x[kWidth] / 2, x[kChannel]};
}

template <class T>
MaxPoolForward<T> maxpool_spatial_forward(const Tensor<T>& x) {
  const Shape os = maxpool_output_shape(x.shape());
  Tensor<T> y(os);
  MaxPoolTape tape{x.shape(), std::vector<std::size_t>(os.numel())};
  const std::size_t C = os[kChannel];
  for (std::size_t t = 0; t < os[kTime]; ++t)
    for (std::size_t h = 0; h < os[kHeight]; ++h)
      for (std::size_t w = 0; w < os[kWidth]; ++w)
        for (std::size_t c = 0; c < C; ++c) {
          // row-major window order; strict comparison keeps the first maximum
          std::size_t best = x.offset(t, 2 * h, 2 * w, c);
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              const std::size_t idx = x.offset(t, 2 * h + a, 2 * w + b, c);
              if (x[idx] > x[best]) best = idx;
            }
          const std::size_t o = y.offset(t, h, w, c);
          y[o] = x[best];
          tape.argmax[o] = best;
        }
  return {std::move(y), std::move(tape)};
}

template <class T>
Tensor<T> maxpool_spatial_backward(MaxPoolTape&& tape, const Tensor<T>& grad_out) {
  if (grad_out.size() != tape.argmax.size()) throw InvalidArgument("maxpool grad_out shape does not match tape");
  Tensor<T> gx(tape.input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) gx[tape.argmax[o]] += grad_out[o];
  tape.argmax.clear();
  return gx;
}

// -- nearest-neighbour spatial upsampling (factor 2) -------------------------------------

inline Shape upsample_output_shape(const Shape& x) {
  if (x.rank() != 4) throw InvalidArgument("upsample input must be rank 4");
  return Shape{x[kTime], 2 * x[kHeight], 2 * x[kWidth], x[kChannel]};
}

template <class T>
Tensor<T> upsample_nearest_spatial(const Tensor<T>& x) {
  Tensor<T> y(upsample_output_shape(x.shape()));
  const std::size_t C = x.dim(kChannel);
  for (std::size_t t = 0; t < y.dim(kTime); ++t)
    for (std::size_t h = 0; h < y.dim(kHeight); ++h)
      for (std::size_t w = 0; w < y.dim(kWidth); ++w) {
        const T* src = &x.at(t, h / 2, w / 2, 0);
        std::copy(src, src + C, &y.at(t, h, w, 0));
      }
  return y;
}

template <class T>
Tensor<T> upsample_nearest_spatial_backward(const Tensor<T>& grad_out) {
  if (grad_out.rank() != 4 || grad_out.dim(kHeight) % 2 || grad_out.dim(kWidth) % 2)
    throw InvalidArgument("upsample grad_out must be rank 4 with even H and W");
  const Shape& gs = grad_out.shape();
  Tensor<T> gx(Shape{gs[kTime], gs[kHeight] / 2, gs[kWidth] / 2, gs[kChannel]});
  const std::size_t C = gs[kChannel];
  for (std::size_t t = 0; t < gx.dim(kTime); ++t)
    for (std::size_t h = 0; h < gx.dim(kHeight); ++h)
      for (std::size_t w = 0; w < gx.dim(kWidth); ++w)
        for (std::size_t c = 0; c < C; ++c)
          gx.at(t, h, w, c) = grad_out.at(t, 2 * h, 2 * w, c) + grad_out.at(t, 2 * h, 2 * w + 1, c) +
                              grad_out.at(t, 2 * h + 1, 2 * w, c) + grad_out.at(t, 2 * h + 1, 2 * w + 1, c);
  return gx;
}

// -- activations ------------------------------------------------------------------------

enum class Activation { relu, sigmoid, linear };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::linear: return "linear";
  }
  return "?";
}

template <class T>
T sigmoid(T v) {
  if (v >= 0) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <class T>
struct ActivationTape {
  Activation kind = Activation::linear;
  Tensor<T> output;  // relu and sigmoid derivatives are functions of the output
};

template <class T>
struct ActivationForward {
  Tensor<T> output;
  ActivationTape<T> tape;
};

template <class T>
Tensor<T> activation_apply(const Tensor<T>& x, Activation kind) {
  Tensor<T> y = x;
  switch (kind) {
    case Activation::relu:
      for (auto& v : y.values()) v = v > T(0) ? v : T(0);
      break;
    case Activation::sigmoid:
      for (auto& v : y.values()) v = sigmoid(v);
      break;
    case Activation::linear:
      break;
  }
  return y;
}

template <class T>
ActivationForward<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> y = activation_apply(x, kind);
  ActivationTape<T> tape{kind, kind == Activation::linear ? Tensor<T>() : y};
  return {std::move(y), std::move(tape)};
}

template <class T>
Tensor<T> activation_backward(ActivationTape<T>&& tape, const Tensor<T>& grad_out) {
  Tensor<T> gx = grad_out;
  if (tape.kind == Activation::linear) return gx;
  if (tape.output.size() != grad_out.size()) throw InvalidArgument("activation grad_out shape does not match tape");
  const auto& y = tape.output;
  if (tape.kind == Activation::relu) {
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (!(y[i] > T(0))) gx[i] = T(0);
  } else {
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= y[i] * (T(1) - y[i]);
  }
  tape.output = Tensor<T>();
  return gx;
}

// -- dropout ----------------------------------------------------------------------------

enum class Mode { train, infer };

template <class T>
struct DropoutTape {
  Tensor<T> mask;  // empty means identity
};

template <class T>
struct DropoutForward {
  Tensor<T> output;
  DropoutTape<T> tape;
};

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must be in [0, 1), got " + std::to_string(rate));
}

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) at train time, inference is the identity.
template <class T, class Rng>
DropoutForward<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  check_dropout_rate(rate);
  if (mode == Mode::infer || rate == 0.0) return {x, {}};
  Tensor<T> mask(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& m : mask.values()) m = u(rng) < rate ? T(0) : keep_scale;
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  return {std::move(y), DropoutTape<T>{std::move(mask)}};
}

template <class T>
Tensor<T> dropout_backward(DropoutTape<T>&& tape, const Tensor<T>& grad_out) {
  if (tape.mask.empty()) return grad_out;
  if (tape.mask.size() != grad_out.size()) throw InvalidArgument("dropout grad_out shape does not match tape");
  Tensor<T> gx = grad_out;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= tape.mask[i];
  tape.mask = Tensor<T>();
  return gx;
}

// -- image-level pooling (global spatial mean, broadcast back) ---------------------------

template <class T>
Tensor<T> image_level_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw InvalidArgument("image_level_pool input must be rank 4");
  const Tensor<T> mean = tensor_reduce(x, {kHeight, kWidth}, Reduce::mean);
  Tensor<T> y(x.shape());
  const std::size_t C = x.dim(kChannel);
  for (std::size_t t = 0; t < x.dim(kTime); ++t)
    for (std::size_t h = 0; h < x.dim(kHeight); ++h)
      for (std::size_t w = 0; w < x.dim(kWidth); ++w)
        std::copy(&mean.at(t, 0, 0, 0), &mean.at(t, 0, 0, 0) + C, &y.at(t, h, w, 0));
  return y;
}

// The operator is self-adjoint: each input receives the spatial mean of the output gradient.
template <class T>
Tensor<T> image_level_pool_backward(const Tensor<T>& grad_out) {
  return image_level_pool(grad_out);
}

}  // namespace brunet
