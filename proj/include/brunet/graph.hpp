#pragma once

// Layer graph: parameters live in a ParamStore owned by the model, layers are
// immutable descriptions that reference parameters by index, and per-call state
// (the tape, dropout streams and captured feature maps) lives in a Context. A
// built model can therefore run inference from several threads at once.

#include <any>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "brunet/error.hpp"
#include "brunet/layers.hpp"
#include "brunet/tensor.hpp"

namespace brunet {

template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    Tensor<T> value;  // empty when the store is shape-only
  };

  std::size_t add(std::string name, const Shape& shape, Tensor<T> value = {}) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    if (!value.empty() && !(value.shape() == shape)) throw InvalidArgument("parameter value does not match shape");
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), shape, std::move(value)});
    return entries_.size() - 1;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  const Tensor<T>& value(std::size_t i) const {
    const auto& e = entries_.at(i);
    if (e.value.empty()) throw InvalidArgument("parameter '" + e.name + "' is not materialized");
    return e.value;
  }
  Tensor<T>& mutable_value(std::size_t i) { return entries_.at(i).value; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool materialized() const {
    for (const auto& e : entries_)
      if (e.value.empty()) return false;
    return true;
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.shape.numel();
    return n;
  }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Gradient buffers aligned with a ParamStore.
template <class T>
class Grads {
 public:
  Grads() = default;
  explicit Grads(const ParamStore<T>& store) {
    buffers_.reserve(store.size());
    for (const auto& e : store) buffers_.emplace_back(e.shape);
  }

  Tensor<T>& operator[](std::size_t i) { return buffers_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return buffers_.at(i); }
  std::size_t size() const noexcept { return buffers_.size(); }

  void zero() {
    for (auto& b : buffers_)
      for (auto& v : b.values()) v = T(0);
  }

  void add(const Grads& other) {
    for (std::size_t i = 0; i < buffers_.size(); ++i) add_into(buffers_[i], other.buffers_[i]);
  }

  void scale(T s) {
    for (auto& b : buffers_)
      for (auto& v : b.values()) v *= s;
  }

 private:
  std::vector<Tensor<T>> buffers_;
};

/// LIFO record of forward state. Each record is popped exactly once by the matching backward.
class Tape {
 public:
  template <class R>
  void push(R record) {
    stack_.emplace_back(std::move(record));
  }

  template <class R>
  R pop() {
    if (stack_.empty()) throw std::logic_error("tape underflow: backward called without matching forward");
    R* r = std::any_cast<R>(&stack_.back());
    if (!r) throw std::logic_error("tape record type mismatch: backward does not match forward");
    R out = std::move(*r);
    stack_.pop_back();
    return out;
  }

  bool empty() const noexcept { return stack_.empty(); }
  std::size_t size() const noexcept { return stack_.size(); }
  void clear() { stack_.clear(); }

 private:
  std::vector<std::any> stack_;
};

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class T>
struct Context {
  Mode mode = Mode::infer;
  bool record = false;  // push tape records during forward (needed for backward)
  Tape tape;
  std::uint64_t dropout_seed = 0;
  std::uint64_t dropout_calls = 0;
  std::optional<double> dropout_rate;  // overrides every dropout layer's rate when set

  std::optional<int> capture_block;
  std::vector<std::pair<std::string, Tensor<T>>> captured;

  static Context training(std::uint64_t seed) {
    Context c;
    c.mode = Mode::train;
    c.record = true;
    c.dropout_seed = seed;
    return c;
  }

  static Context inference() { return Context{}; }

  std::mt19937_64 next_dropout_stream() { return std::mt19937_64(mix_seed(dropout_seed ^ mix_seed(dropout_calls++))); }
};

/// One row of the per-layer parameter table.
struct LayerRow {
  std::string name;
  std::string kind;
  std::string kernel;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Shape output_shape;
  std::size_t params = 0;
};

template <class T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const noexcept { return name_; }

  virtual Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& params, Context<T>& ctx) const = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out, const ParamStore<T>& params, Context<T>& ctx,
                             Grads<T>& grads) const = 0;
  /// Shape propagation without allocating activations. Appends table rows for parameterized layers.
  virtual Shape trace(const Shape& in, std::vector<LayerRow>& rows) const = 0;

  Shape output_shape(const Shape& in) const {
    std::vector<LayerRow> rows;
    return trace(in, rows);
  }

 private:
  std::string name_;
};

template <class T>
using LayerPtr = std::unique_ptr<Layer<T>>;

template <class T>
class ConvLayer final : public Layer<T> {
 public:
  ConvLayer(std::string name, const ConvSpec& spec, std::size_t weight_index, std::optional<std::size_t> bias_index)
      : Layer<T>(std::move(name)), spec_(spec), weight_(weight_index), bias_(bias_index) {
    spec_.validate();
  }

  const ConvSpec& spec() const noexcept { return spec_; }
  std::size_t weight_index() const noexcept { return weight_; }
  std::optional<std::size_t> bias_index() const noexcept { return bias_; }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& p, Context<T>& ctx) const override {
    Tensor<T> y = conv3d_apply(x, p.value(weight_), bias_ ? &p.value(*bias_) : nullptr, spec_);
    if (ctx.record) ctx.tape.push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>& p, Context<T>& ctx, Grads<T>& grads) const override {
    const auto x = ctx.tape.template pop<Tensor<T>>();
    conv3d_backward_filter(x, g, spec_, grads[weight_], bias_ ? &grads[*bias_] : nullptr);
    return conv3d_backward_data(x.shape(), p.value(weight_), g, spec_);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override {
    Shape out = conv_output_shape(in, spec_);
    rows.push_back({this->name(), "conv", spec_.kernel_label(), spec_.in_channels, spec_.out_channels, out,
                    spec_.param_count()});
    return out;
  }

 private:
  ConvSpec spec_;
  std::size_t weight_;
  std::optional<std::size_t> bias_;
};

/// Registers a conv's parameters in the store (initialized when `rng` is given) and returns the layer.
template <class T>
std::unique_ptr<ConvLayer<T>> make_conv(const std::string& name, const ConvSpec& spec, ParamStore<T>& store,
                                        std::mt19937_64* rng) {
  spec.validate();
  std::optional<std::size_t> bias;
  std::size_t weight;
  if (rng) {
    ConvParams<T> p = init_conv_params<T>(spec, *rng);
    weight = store.add(name + ".weight", spec.weight_shape(), std::move(p.weights));
    if (spec.bias) bias = store.add(name + ".bias", spec.bias_shape(), std::move(p.bias));
  } else {
    weight = store.add(name + ".weight", spec.weight_shape());
    if (spec.bias) bias = store.add(name + ".bias", spec.bias_shape());
  }
  return std::make_unique<ConvLayer<T>>(name, spec, weight, bias);
}

template <class T>
class ActivationLayer final : public Layer<T> {
 public:
  ActivationLayer(std::string name, Activation kind) : Layer<T>(std::move(name)), kind_(kind) {}

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>&, Context<T>& ctx) const override {
    if (!ctx.record) return activation_apply(x, kind_);
    auto r = activation(x, kind_);
    ctx.tape.push(std::move(r.tape));
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>&, Context<T>& ctx, Grads<T>&) const override {
    return activation_backward(ctx.tape.template pop<ActivationTape<T>>(), g);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>&) const override { return in; }

 private:
  Activation kind_;
};

template <class T>
class MaxPoolLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>&, Context<T>& ctx) const override {
    auto r = maxpool_spatial_forward(x);
    if (ctx.record) ctx.tape.push(std::move(r.tape));
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>&, Context<T>& ctx, Grads<T>&) const override {
    return maxpool_spatial_backward(ctx.tape.template pop<MaxPoolTape>(), g);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>&) const override { return maxpool_output_shape(in); }
};

template <class T>
class UpsampleLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>&, Context<T>&) const override {
    return upsample_nearest_spatial(x);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>&, Context<T>&, Grads<T>&) const override {
    return upsample_nearest_spatial_backward(g);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>&) const override { return upsample_output_shape(in); }
};

template <class T>
class DropoutLayer final : public Layer<T> {
 public:
  DropoutLayer(std::string name, double rate) : Layer<T>(std::move(name)), rate_(rate) { check_dropout_rate(rate); }

  double rate() const noexcept { return rate_; }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>&, Context<T>& ctx) const override {
    const double rate = ctx.dropout_rate.value_or(rate_);
    check_dropout_rate(rate);
    if (ctx.mode == Mode::infer) {
      if (ctx.record) ctx.tape.push(DropoutTape<T>{});
      return x;
    }
    auto rng = ctx.next_dropout_stream();
    auto r = dropout(x, rate, ctx.mode, rng);
    if (ctx.record) ctx.tape.push(std::move(r.tape));
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>&, Context<T>& ctx, Grads<T>&) const override {
    return dropout_backward(ctx.tape.template pop<DropoutTape<T>>(), g);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>&) const override { return in; }

 private:
  double rate_;
};

template <class T>
class ImagePoolLayer final : public Layer<T> {
 public:
  using Layer<T>::Layer;

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>&, Context<T>&) const override {
    return image_level_pool(x);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>&, Context<T>&, Grads<T>&) const override {
    return image_level_pool_backward(g);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>&) const override { return in; }
};

template <class T>
class Sequential final : public Layer<T> {
 public:
  explicit Sequential(std::string name) : Layer<T>(std::move(name)) {}

  Sequential& add(LayerPtr<T> layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  const Layer<T>& at(std::size_t i) const { return *layers_.at(i); }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& p, Context<T>& ctx) const override {
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->forward(h, p, ctx);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>& p, Context<T>& ctx, Grads<T>& grads) const override {
    Tensor<T> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d, p, ctx, grads);
    return d;
  }

  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override {
    Shape s = in;
    for (const auto& l : layers_) s = l->trace(s, rows);
    return s;
  }

 private:
  std::vector<LayerPtr<T>> layers_;
};

}  // namespace brunet
