#pragma once

// Dense rank-1..4 tensors in (T, H, W, C) axis order, row-major with the
// channel axis fastest. Rank-3 tensors are read as (H, W, C).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "brunet/error.hpp"

namespace brunet {

inline constexpr std::size_t kMaxRank = 4;

// Axis indices for rank-4 activations.
inline constexpr std::size_t kTime = 0;
inline constexpr std::size_t kHeight = 1;
inline constexpr std::size_t kWidth = 2;
inline constexpr std::size_t kChannel = 3;

class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<std::size_t> extents) { assign(extents.begin(), extents.end()); }

  explicit Shape(std::span<const std::size_t> extents) { assign(extents.begin(), extents.end()); }

  std::size_t rank() const noexcept { return rank_; }
  std::size_t operator[](std::size_t axis) const { return extents_.at(axis); }
  std::size_t& operator[](std::size_t axis) { return extents_.at(axis); }

  std::size_t numel() const noexcept {
    if (rank_ == 0) return 0;
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= extents_[i];
    return n;
  }

  std::span<const std::size_t> extents() const noexcept { return {extents_.data(), rank_}; }

  friend bool operator==(const Shape& a, const Shape& b) noexcept {
    if (a.rank_ != b.rank_) return false;
    for (std::size_t i = 0; i < a.rank_; ++i)
      if (a.extents_[i] != b.extents_[i]) return false;
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << extents_[i];
    os << ')';
    return os.str();
  }

 private:
  template <class It>
  void assign(It first, It last) {
    const auto n = static_cast<std::size_t>(std::distance(first, last));
    if (n < 1 || n > kMaxRank)
      throw InvalidShape("tensor rank must be in 1..4, got " + std::to_string(n));
    rank_ = n;
    std::size_t i = 0;
    for (auto it = first; it != last; ++it, ++i) {
      if (*it < 1) throw InvalidShape("tensor extents must be >= 1");
      extents_[i] = *it;
    }
  }

  std::array<std::size_t, kMaxRank> extents_{};
  std::size_t rank_ = 0;
};

template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor element type must be float or double");

 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(const Shape& shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {
    if (shape.rank() == 0) throw InvalidShape("tensor shape must have rank >= 1");
  }

  Tensor(const Shape& shape, std::vector<T> values) : shape_(shape), data_(std::move(values)) {
    if (shape.rank() == 0) throw InvalidShape("tensor shape must have rank >= 1");
    if (data_.size() != shape_.numel())
      throw InvalidShape("value count " + std::to_string(data_.size()) + " does not match shape " +
                         shape_.str());
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t dim(std::size_t axis) const { return shape_[axis]; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Rank-4 element access.
  std::size_t offset(std::size_t t, std::size_t h, std::size_t w, std::size_t c) const noexcept {
    return ((t * shape_[1] + h) * shape_[2] + w) * shape_[3] + c;
  }
  T& at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) { return data_[offset(t, h, w, c)]; }
  const T& at(std::size_t t, std::size_t h, std::size_t w, std::size_t c) const {
    return data_[offset(t, h, w, c)];
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(const Shape& shape) const {
    if (shape.numel() != shape_.numel())
      throw InvalidShape("cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(shape, data_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> tensor_create(std::initializer_list<std::size_t> extents, T fill) {
  for (auto e : extents)
    if (e == 0) throw InvalidShape("tensor extents must be >= 1");
  return Tensor<T>(Shape(extents), fill);
}

// -- padding and slicing ----------------------------------------------------

struct PadSpec {
  std::vector<std::pair<std::size_t, std::size_t>> axes;  // (before, after) per axis
  double fill = 0.0;
};

namespace detail {

inline std::array<std::size_t, kMaxRank> strides_of(const Shape& s) {
  std::array<std::size_t, kMaxRank> st{};
  std::size_t acc = 1;
  for (std::size_t i = s.rank(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Calls fn(flat_index, coords) for every element of `s` in row-major order.
template <class Fn>
void for_each_index(const Shape& s, Fn&& fn) {
  std::array<std::size_t, kMaxRank> idx{};
  const std::size_t n = s.numel();
  for (std::size_t flat = 0; flat < n; ++flat) {
    fn(flat, idx);
    for (std::size_t a = s.rank(); a-- > 0;) {
      if (++idx[a] < s[a]) break;
      idx[a] = 0;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> tensor_pad(const Tensor<T>& x, const PadSpec& p) {
  if (p.axes.size() != x.rank())
    throw InvalidArgument("pad spec has " + std::to_string(p.axes.size()) + " axes, tensor has rank " +
                          std::to_string(x.rank()));
  std::vector<std::size_t> ext(x.rank());
  for (std::size_t a = 0; a < x.rank(); ++a) ext[a] = x.dim(a) + p.axes[a].first + p.axes[a].second;
  Tensor<T> out(Shape(std::span<const std::size_t>(ext)), static_cast<T>(p.fill));
  const auto ost = detail::strides_of(out.shape());
  detail::for_each_index(x.shape(), [&](std::size_t flat, const auto& idx) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < x.rank(); ++a) o += (idx[a] + p.axes[a].first) * ost[a];
    out[o] = x[flat];
  });
  return out;
}

/// Copies the block starting at `begin` with extents `extents`.
template <class T>
Tensor<T> tensor_slice(const Tensor<T>& x, std::span<const std::size_t> begin, std::span<const std::size_t> extents) {
  if (begin.size() != x.rank() || extents.size() != x.rank())
    throw InvalidArgument("slice rank mismatch");
  for (std::size_t a = 0; a < x.rank(); ++a)
    if (begin[a] + extents[a] > x.dim(a)) throw InvalidArgument("slice exceeds tensor bounds");
  Tensor<T> out{Shape(extents)};
  const auto xst = detail::strides_of(x.shape());
  detail::for_each_index(out.shape(), [&](std::size_t flat, const auto& idx) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < x.rank(); ++a) o += (idx[a] + begin[a]) * xst[a];
    out[flat] = x[o];
  });
  return out;
}

// -- channel concatenation ----------------------------------------------------

template <class T>
Tensor<T> tensor_concat_channels(std::span<const Tensor<T>* const> xs) {
  if (xs.size() < 2) throw InvalidArgument("channel concat needs at least two inputs");
  const Shape& s0 = xs[0]->shape();
  const std::size_t r = s0.rank();
  std::size_t channels = 0;
  for (const auto* x : xs) {
    if (x->rank() != r) throw InvalidArgument("channel concat rank mismatch");
    for (std::size_t a = 0; a + 1 < r; ++a)
      if (x->dim(a) != s0[a])
        throw InvalidArgument("channel concat extent mismatch: " + x->shape().str() + " vs " + s0.str());
    channels += x->dim(r - 1);
  }
  Shape os = s0;
  os[r - 1] = channels;
  Tensor<T> out(os);
  const std::size_t pixels = s0.numel() / s0[r - 1];
  T* dst = out.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (const auto* x : xs) {
      const std::size_t c = x->dim(r - 1);
      const T* src = x->data() + p * c;
      dst = std::copy(src, src + c, dst);
    }
  }
  return out;
}

template <class T>
Tensor<T> tensor_concat_channels(std::initializer_list<const Tensor<T>*> xs) {
  return tensor_concat_channels<T>(std::span<const Tensor<T>* const>(xs.begin(), xs.size()));
}

/// Inverse of tensor_concat_channels: splits the last axis into blocks of the given widths.
template <class T>
std::vector<Tensor<T>> tensor_split_channels(const Tensor<T>& x, std::span<const std::size_t> widths) {
  const std::size_t r = x.rank();
  const std::size_t total = x.dim(r - 1);
  if (std::accumulate(widths.begin(), widths.end(), std::size_t{0}) != total)
    throw InvalidArgument("channel split widths do not sum to " + std::to_string(total));
  const std::size_t pixels = x.size() / total;
  std::vector<Tensor<T>> out;
  out.reserve(widths.size());
  std::size_t start = 0;
  for (std::size_t w : widths) {
    Shape s = x.shape();
    s[r - 1] = w;
    Tensor<T> part(s);
    for (std::size_t p = 0; p < pixels; ++p) {
      const T* src = x.data() + p * total + start;
      std::copy(src, src + w, part.data() + p * w);
    }
    out.push_back(std::move(part));
    start += w;
  }
  return out;
}

// -- reductions ----------------------------------------------------------------

enum class Reduce { mean, max, sum };

template <class T>
Tensor<T> tensor_reduce(const Tensor<T>& x, std::span<const std::size_t> axes, Reduce kind) {
  if (axes.empty()) throw InvalidArgument("reduce needs at least one axis");
  std::array<bool, kMaxRank> reduced{};
  for (auto a : axes) {
    if (a >= x.rank()) throw InvalidArgument("reduce axis " + std::to_string(a) + " invalid for rank " +
                                             std::to_string(x.rank()));
    reduced[a] = true;
  }
  Shape os = x.shape();
  std::size_t count = 1;
  for (std::size_t a = 0; a < x.rank(); ++a)
    if (reduced[a]) {
      count *= os[a];
      os[a] = 1;
    }
  const T init = kind == Reduce::max ? -std::numeric_limits<T>::infinity() : T(0);
  Tensor<T> out(os, init);
  const auto ost = detail::strides_of(os);
  detail::for_each_index(x.shape(), [&](std::size_t flat, const auto& idx) {
    std::size_t o = 0;
    for (std::size_t a = 0; a < x.rank(); ++a)
      if (!reduced[a]) o += idx[a] * ost[a];
    if (kind == Reduce::max)
      out[o] = std::max(out[o], x[flat]);
    else
      out[o] += x[flat];
  });
  if (kind == Reduce::mean)
    for (auto& v : out.values()) v /= static_cast<T>(count);
  return out;
}

template <class T>
Tensor<T> tensor_reduce(const Tensor<T>& x, std::initializer_list<std::size_t> axes, Reduce kind) {
  return tensor_reduce(x, std::span<const std::size_t>(axes.begin(), axes.size()), kind);
}

// -- elementwise ---------------------------------------------------------------

namespace detail {
template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw InvalidArgument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}
}  // namespace detail

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a) {
  Tensor<T> out = a;
  for (auto& v : out.values()) v *= s;
  return out;
}

template <class T>
void add_into(Tensor<T>& acc, const Tensor<T>& b) {
  detail::require_same_shape(acc, b, "add_into");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

template <class T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace brunet
