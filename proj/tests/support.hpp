#pragma once

// Independent reference implementations used as test oracles.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <type_traits>
#include <vector>

#include "brunet/layers.hpp"
#include "brunet/model.hpp"
#include "brunet/tensor.hpp"

namespace oracle {

using brunet::ConvSpec;
using brunet::Padding;
using brunet::Shape;
using brunet::Tensor;

template <class T = double>
Tensor<T> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

/// Direct sliding-window convolution. Weights are indexed (kt, kh, kw, ci, co).
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<std::type_identity_t<T>>* bias,
                 const ConvSpec& s) {
  const long in[3] = {long(x.dim(0)), long(x.dim(1)), long(x.dim(2))};
  long out[3], before[3];
  for (int a = 0; a < 3; ++a) {
    const long eff = long((s.kernel[a] - 1) * s.dilation[a]);
    if (s.padding == Padding::same) {
      out[a] = in[a];
      before[a] = eff / 2;
    } else {
      out[a] = in[a] - eff;
      before[a] = 0;
    }
  }
  const long ci_n = long(s.in_channels), co_n = long(s.out_channels);
  Tensor<T> y(Shape{std::size_t(out[0]), std::size_t(out[1]), std::size_t(out[2]), std::size_t(co_n)});
  for (long t = 0; t < out[0]; ++t)
    for (long h = 0; h < out[1]; ++h)
      for (long ww = 0; ww < out[2]; ++ww)
        for (long co = 0; co < co_n; ++co) {
          double acc = bias ? double((*bias)[std::size_t(co)]) : 0.0;
          for (long a = 0; a < long(s.kernel[0]); ++a)
            for (long b = 0; b < long(s.kernel[1]); ++b)
              for (long c = 0; c < long(s.kernel[2]); ++c) {
                const long it = t + a * long(s.dilation[0]) - before[0];
                const long ih = h + b * long(s.dilation[1]) - before[1];
                const long iw = ww + c * long(s.dilation[2]) - before[2];
                if (it < 0 || ih < 0 || iw < 0 || it >= in[0] || ih >= in[1] || iw >= in[2]) continue;
                for (long ci = 0; ci < ci_n; ++ci) {
                  const long widx = (((a * long(s.kernel[1]) + b) * long(s.kernel[2]) + c) * ci_n + ci) * co_n + co;
                  acc += double(w[std::size_t(widx)]) * double(x.at(std::size_t(it), std::size_t(ih), std::size_t(iw),
                                                                     std::size_t(ci)));
                }
              }
          y[((std::size_t(t) * out[1] + h) * out[2] + ww) * co_n + co] = T(acc);
        }
  return y;
}

/// Central-difference gradient of f at every coordinate of x.
inline std::vector<double> numeric_gradient(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                                            double step = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double hi = x[i];
    const double fp = f(x);
    x[i] = orig - step;
    const double lo = x[i];
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (hi - lo);
  }
  return g;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                            double floor = 1e-3) {
  double worst = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = std::abs(analytic[i] - numeric[i]);
    worst = std::max(worst, d / std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor}));
  }
  return worst;
}

// Closed-form count of one conv unit with nominal cubic extent n and temporal clamp te.
inline std::size_t unit_params(std::size_t n, std::size_t te, std::size_t cin, std::size_t cout, bool factorized) {
  const std::size_t kt = std::min(n, te);
  if (!factorized || n == 1) return kt * n * n * cin * cout + cout;
  std::vector<std::size_t> extents;
  for (std::size_t k : {n, n, kt})
    if (k > 1) extents.push_back(k);
  std::size_t total = cout;
  for (std::size_t i = 0; i < extents.size(); ++i) total += extents[i] * (i == 0 ? cin : cout) * cout;
  return total;
}

inline std::size_t block_params(std::size_t cin, std::size_t cout, bool factorized, std::size_t te) {
  std::size_t total = unit_params(3, te, cin, cout, factorized);
  for (std::size_t n : {1, 3, 5}) total += unit_params(n, te, cout, cout, factorized);
  total += 3 * cout * cout + cout;
  if (cin != cout) total += cin * cout + cout;
  return total;
}

// Hand-summed total over the architecture description.
inline std::size_t model_params(const brunet::ModelConfig& c) {
  const std::size_t T = c.lags, F = c.features;
  std::array<std::size_t, 5> P{};
  for (std::size_t l = 0; l < 5; ++l) P[l] = c.base_filters << l;
  auto plain_level = [](std::size_t cin, std::size_t cout, std::size_t te) {
    const std::size_t kt = std::min<std::size_t>(3, te);
    return (kt * 9 * cin * cout + cout) + (kt * 9 * cout * cout + cout);
  };
  const bool broad = c.arch == brunet::Arch::broad_unet;
  std::size_t total = 0;
  for (std::size_t l = 0; l < 5; ++l) {
    const std::size_t cin = l == 0 ? F : P[l - 1];
    total += broad ? block_params(cin, P[l], c.factorized, T) : plain_level(cin, P[l], T);
  }
  if (broad) {
    const std::size_t ch = P[4], k = c.aspp.spatial_kernel;
    std::size_t branches = c.aspp.dilation_rates.size() + 1;
    total += c.aspp.dilation_rates.size() * (k * k * ch * ch + ch);
    total += ch * ch + ch;  // image-level branch
    if (c.aspp.include_pointwise_branch) {
      total += ch * ch + ch;
      ++branches;
    }
    total += branches * ch * ch + ch;
  }
  for (std::size_t l = 0; l < 5; ++l) total += T * P[l] * P[l] + P[l];
  for (std::size_t d = 0; d < 4; ++d)
    total += broad ? block_params(P[d + 1] + P[d], P[d], c.factorized, 1) : plain_level(P[d + 1] + P[d], P[d], 1);
  total += P[0] * F + F;
  return total;
}

inline std::vector<double> as_vector(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

/// Max |a - b| / max(|a|, |b|, floor) over two tensors.
template <class T>
double max_rel_diff(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

}  // namespace oracle
