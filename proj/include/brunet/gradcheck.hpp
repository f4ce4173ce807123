#pragma once

// Finite-difference verification of backward passes. The probe loss is
// L = sum(r * forward(x)) for a fixed random r, so dL/dy = r and one backward
// call yields every analytic gradient. Forward passes run in train mode with a
// fixed dropout seed, which makes dropout a fixed linear mask.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "brunet/graph.hpp"
#include "brunet/model.hpp"

namespace brunet {

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-4;
  /// Relative errors use max(|analytic|, |numeric|, magnitude_floor) as the denominator.
  double magnitude_floor = 1e-3;
  /// Number of randomly chosen parameter coordinates; 0 checks every coordinate.
  std::size_t param_samples = 0;
  /// Number of randomly chosen input coordinates; 0 checks every coordinate.
  std::size_t input_samples = 0;
  bool check_input = true;
  /// A coordinate whose forward and backward one-sided slopes disagree by more than the
  /// tolerance sits on a kink (ReLU zero, max-pool tie) and is excluded.
  double max_kink_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;  // one per parameter tensor, plus "input"
  double tolerance = 0.0;
  bool passed = false;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;

  const GradCheckEntry& worst() const {
    return *std::max_element(entries.begin(), entries.end(),
                             [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
  }
  double max_rel_error() const { return entries.empty() ? 0.0 : worst().max_rel_error; }
};

namespace detail {

template <class T>
Tensor<T> uniform_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace detail

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Checks a layer's backward against central differences at input `x`.
inline GradCheckReport grad_check(const Layer<double>& layer, ParamStore<double>& params, const Tensor<double>& x,
                                  const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(opt.seed);
  const Shape out_shape = layer.output_shape(x.shape());
  const Tensor<double> probe = detail::uniform_tensor<double>(out_shape, rng);
  const std::uint64_t dropout_seed = mix_seed(opt.seed + 1);

  auto loss_at = [&](const Tensor<double>& input) {
    auto ctx = Context<double>::training(dropout_seed);
    ctx.record = false;
    const Tensor<double> y = layer.forward(input, params, ctx);
    long double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<long double>(probe[i]) * y[i];
    return static_cast<double>(s);
  };

  Grads<double> grads(params);
  auto ctx = Context<double>::training(dropout_seed);
  layer.forward(x, params, ctx);
  const Tensor<double> grad_x = layer.backward(probe, params, ctx, grads);
  if (!ctx.tape.empty()) throw std::logic_error("grad_check: tape not fully consumed");

  GradCheckReport rep;
  rep.tolerance = opt.tolerance;

  // Central difference at one coordinate; kink points are counted and excluded.
  auto check_coord = [&](double& coord, const Tensor<double>& input, double analytic, GradCheckEntry& e,
                         std::size_t index) {
    const double orig = coord;
    coord = orig + opt.step;
    const double hi_v = coord;
    const double l_plus = loss_at(input);
    coord = orig - opt.step;
    const double lo_v = coord;
    const double l_minus = loss_at(input);
    coord = orig;
    const double l_mid = loss_at(input);
    const double numeric = (l_plus - l_minus) / (hi_v - lo_v);
    const double fwd = (l_plus - l_mid) / (hi_v - orig);
    const double bwd = (l_mid - l_minus) / (orig - lo_v);
    if (relative_error(fwd, bwd, opt.magnitude_floor) > opt.tolerance) {
      ++e.skipped_kinks;
      return;
    }
    ++e.checked;
    const double err = relative_error(analytic, numeric, opt.magnitude_floor);
    if (err >= e.max_rel_error) {
      e.max_rel_error = err;
      e.worst_index = index;
      e.worst_analytic = analytic;
      e.worst_numeric = numeric;
    }
  };

  std::vector<GradCheckEntry> entries(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) entries[i].name = params.entry(i).name;
  if (opt.param_samples == 0) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<double>& p = params.mutable_value(i);
      for (std::size_t k = 0; k < p.size(); ++k) check_coord(p[k], x, grads[i][k], entries[i], k);
    }
  } else if (params.size() > 0) {
    std::size_t total = params.total_count();
    std::uniform_int_distribution<std::size_t> pick(0, total - 1);
    for (std::size_t s = 0; s < opt.param_samples; ++s) {
      std::size_t flat = pick(rng);
      std::size_t i = 0;
      while (flat >= params.entry(i).shape.numel()) flat -= params.entry(i++).shape.numel();
      check_coord(params.mutable_value(i)[flat], x, grads[i][flat], entries[i], flat);
    }
  }

  if (opt.check_input) {
    GradCheckEntry in{"input"};
    Tensor<double> xin = x;
    if (opt.input_samples == 0) {
      for (std::size_t k = 0; k < xin.size(); ++k) check_coord(xin[k], xin, grad_x[k], in, k);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, xin.size() - 1);
      for (std::size_t s = 0; s < opt.input_samples; ++s) {
        const std::size_t k = pick(rng);
        check_coord(xin[k], xin, grad_x[k], in, k);
      }
    }
    entries.push_back(in);
  }

  for (auto& e : entries) {
    if (e.checked + e.skipped_kinks == 0) continue;
    rep.checked += e.checked;
    rep.skipped_kinks += e.skipped_kinks;
    rep.entries.push_back(std::move(e));
  }
  const double kink_fraction =
      rep.checked + rep.skipped_kinks ? static_cast<double>(rep.skipped_kinks) / (rep.checked + rep.skipped_kinks) : 0.0;
  rep.passed = rep.checked > 0 && kink_fraction <= opt.max_kink_fraction && rep.max_rel_error() < opt.tolerance;
  return rep;
}

/// Random input of the given shape in [-1, 1].
inline GradCheckReport grad_check(const Layer<double>& layer, ParamStore<double>& params, const Shape& input_shape,
                                  const GradCheckOptions& opt = {}) {
  std::mt19937_64 rng(mix_seed(opt.seed ^ 0x5eed));
  return grad_check(layer, params, detail::uniform_tensor<double>(input_shape, rng), opt);
}

inline GradCheckReport grad_check(Model<double>& m, const GradCheckOptions& opt = {}) {
  return grad_check(m.graph(), m.params(), m.config().input_shape(), opt);
}

}  // namespace brunet
