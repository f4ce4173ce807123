#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "brunet/graph.hpp"

namespace brunet {

struct BlockConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  bool factorized = true;
  std::size_t time_extent = 1;  // temporal kernel extents are clamped to this

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw InvalidArgument("block channel counts must be >= 1");
    if (time_extent < 1) throw InvalidArgument("block time_extent must be >= 1");
  }
};

struct AsppConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::vector<std::size_t> dilation_rates{6, 12, 18};
  bool include_pointwise_branch = true;
  std::size_t spatial_kernel = 3;

  std::size_t branch_count() const { return dilation_rates.size() + 1 + (include_pointwise_branch ? 1 : 0); }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw InvalidArgument("ASPP channel counts must be >= 1");
    if (dilation_rates.empty()) throw InvalidArgument("ASPP needs at least one dilation rate");
    if (spatial_kernel < 1) throw InvalidArgument("ASPP spatial kernel must be >= 1");
    for (std::size_t i = 0; i < dilation_rates.size(); ++i) {
      if (dilation_rates[i] < 1) throw InvalidArgument("ASPP dilation rates must be >= 1");
      for (std::size_t j = 0; j < i; ++j)
        if (dilation_rates[i] == dilation_rates[j]) throw InvalidArgument("ASPP dilation rates must be distinct");
    }
  }
};

/// Nominal N x N x N kernel with the temporal extent clamped to `time_extent`.
inline ConvSpec block_kernel(std::size_t n, std::size_t time_extent, std::size_t cin, std::size_t cout) {
  ConvSpec s;
  s.kernel = {std::min(n, time_extent), n, n};
  s.in_channels = cin;
  s.out_channels = cout;
  return s;
}

/// A convolution followed by ReLU; a factorizable kernel becomes its factor chain with ReLU after every factor.
template <class T>
LayerPtr<T> make_conv_unit(const std::string& name, const ConvSpec& spec, bool factorized, ParamStore<T>& store,
                           std::mt19937_64* rng) {
  auto seq = std::make_unique<Sequential<T>>(name);
  const std::vector<ConvSpec> chain = factorized ? factorize_kernel(spec) : std::vector<ConvSpec>{spec};
  for (std::size_t f = 0; f < chain.size(); ++f) {
    const std::string n = chain.size() == 1 ? name : name + ".f" + std::to_string(f);
    seq->add(make_conv<T>(n, chain[f], store, rng));
    seq->add(std::make_unique<ActivationLayer<T>>(n + ".relu", Activation::relu));
  }
  return seq;
}

/// Initial conv, three parallel branches (1, 3, 5), channel concat, 1x1x1 merge, residual add, ReLU.
template <class T>
class MultiscaleBlock final : public Layer<T> {
 public:
  MultiscaleBlock(std::string name, const BlockConfig& cfg, ParamStore<T>& store, std::mt19937_64* rng, int index = -1)
      : Layer<T>(std::move(name)), cfg_(cfg), index_(index) {
    cfg.validate();
    const std::string& n = this->name();
    const std::size_t c = cfg.out_channels;
    init_ = make_conv_unit<T>(n + ".init", block_kernel(3, cfg.time_extent, cfg.in_channels, c), cfg.factorized, store,
                              rng);
    constexpr std::array<std::size_t, 3> sizes{1, 3, 5};
    for (std::size_t b = 0; b < 3; ++b) {
      const ConvSpec k = block_kernel(sizes[b], cfg.time_extent, c, c);
      labels_[b] = k.kernel_label();
      branches_[b] = make_conv_unit<T>(n + ".branch" + std::to_string(sizes[b]), k, cfg.factorized, store, rng);
    }
    merge_ = make_conv<T>(n + ".merge", block_kernel(1, 1, 3 * c, c), store, rng);
    if (cfg.in_channels != c) proj_ = make_conv<T>(n + ".residual", block_kernel(1, 1, cfg.in_channels, c), store, rng);
  }

  const BlockConfig& config() const noexcept { return cfg_; }
  int index() const noexcept { return index_; }
  const std::array<std::string, 3>& branch_labels() const noexcept { return labels_; }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& p, Context<T>& ctx) const override {
    const Tensor<T> h = init_->forward(x, p, ctx);
    std::array<Tensor<T>, 3> b;
    for (std::size_t i = 0; i < 3; ++i) b[i] = branches_[i]->forward(h, p, ctx);
    if (ctx.capture_block && *ctx.capture_block == index_)
      for (std::size_t i = 0; i < 3; ++i) ctx.captured.emplace_back("branch_" + labels_[i], b[i]);
    const Tensor<T> cat = tensor_concat_channels<T>({&b[0], &b[1], &b[2]});
    Tensor<T> s = merge_->forward(cat, p, ctx);
    add_into(s, proj_ ? proj_->forward(x, p, ctx) : x);
    if (!ctx.record) return activation_apply(s, Activation::relu);
    auto r = activation(s, Activation::relu);
    ctx.tape.push(std::move(r.tape));
    return std::move(r.output);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>& p, Context<T>& ctx, Grads<T>& grads) const override {
    const Tensor<T> gs = activation_backward(ctx.tape.template pop<ActivationTape<T>>(), g);
    Tensor<T> gx = proj_ ? proj_->backward(gs, p, ctx, grads) : gs;
    const Tensor<T> gcat = merge_->backward(gs, p, ctx, grads);
    const std::array<std::size_t, 3> widths{cfg_.out_channels, cfg_.out_channels, cfg_.out_channels};
    auto parts = tensor_split_channels(gcat, widths);
    Tensor<T> gh = branches_[2]->backward(parts[2], p, ctx, grads);
    add_into(gh, branches_[1]->backward(parts[1], p, ctx, grads));
    add_into(gh, branches_[0]->backward(parts[0], p, ctx, grads));
    add_into(gx, init_->backward(gh, p, ctx, grads));
    return gx;
  }

  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override {
    if (in.rank() != 4 || in[kChannel] != cfg_.in_channels)
      throw InvalidArgument(this->name() + ": expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                            in.str());
    const Shape h = init_->trace(in, rows);
    Shape b;
    for (const auto& br : branches_) b = br->trace(h, rows);
    Shape cat = b;
    cat[kChannel] = 3 * cfg_.out_channels;
    const Shape out = merge_->trace(cat, rows);
    if (proj_) proj_->trace(in, rows);
    return out;
  }

 private:
  BlockConfig cfg_;
  int index_;
  LayerPtr<T> init_;
  std::array<LayerPtr<T>, 3> branches_;
  std::array<std::string, 3> labels_;
  LayerPtr<T> merge_;
  LayerPtr<T> proj_;
};

template <class T>
std::unique_ptr<MultiscaleBlock<T>> build_multiscale_block(const std::string& name, const BlockConfig& cfg,
                                                           ParamStore<T>& store, std::mt19937_64* rng, int index = -1) {
  return std::make_unique<MultiscaleBlock<T>>(name, cfg, store, rng, index);
}

/// Atrous spatial pyramid pooling: optional pointwise branch, one 1xNxN dilated conv per rate,
/// and an image-level branch; concatenated and merged by a 1x1x1 conv. No temporal mixing.
template <class T>
class AsppBlock final : public Layer<T> {
 public:
  AsppBlock(std::string name, const AsppConfig& cfg, ParamStore<T>& store, std::mt19937_64* rng)
      : Layer<T>(std::move(name)), cfg_(cfg) {
    cfg.validate();
    const std::string& n = this->name();
    if (cfg.include_pointwise_branch)
      branches_.push_back(make_conv<T>(n + ".pointwise", block_kernel(1, 1, cfg.in_channels, cfg.out_channels), store, rng));
    for (std::size_t d : cfg.dilation_rates) {
      ConvSpec s = block_kernel(cfg.spatial_kernel, 1, cfg.in_channels, cfg.out_channels);
      s.dilation = {1, d, d};
      branches_.push_back(make_conv<T>(n + ".atrous" + std::to_string(d), s, store, rng));
    }
    auto image = std::make_unique<Sequential<T>>(n + ".image");
    image->add(std::make_unique<ImagePoolLayer<T>>(n + ".image.pool"));
    image->add(make_conv<T>(n + ".image.conv", block_kernel(1, 1, cfg.in_channels, cfg.out_channels), store, rng));
    branches_.push_back(std::move(image));
    merge_ = make_conv<T>(n + ".merge", block_kernel(1, 1, branches_.size() * cfg.out_channels, cfg.out_channels),
                          store, rng);
  }

  const AsppConfig& config() const noexcept { return cfg_; }
  std::size_t branch_count() const noexcept { return branches_.size(); }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& p, Context<T>& ctx) const override {
    std::vector<Tensor<T>> outs;
    outs.reserve(branches_.size());
    for (const auto& b : branches_) outs.push_back(b->forward(x, p, ctx));
    std::vector<const Tensor<T>*> ptrs;
    for (const auto& o : outs) ptrs.push_back(&o);
    return merge_->forward(tensor_concat_channels<T>(ptrs), p, ctx);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>& p, Context<T>& ctx, Grads<T>& grads) const override {
    const Tensor<T> gcat = merge_->backward(g, p, ctx, grads);
    const std::vector<std::size_t> widths(branches_.size(), cfg_.out_channels);
    auto parts = tensor_split_channels(gcat, widths);
    std::optional<Tensor<T>> gx;
    for (std::size_t i = branches_.size(); i-- > 0;) {
      Tensor<T> d = branches_[i]->backward(parts[i], p, ctx, grads);
      if (gx)
        add_into(*gx, d);
      else
        gx = std::move(d);
    }
    return std::move(*gx);
  }

  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override {
    Shape b;
    for (const auto& br : branches_) b = br->trace(in, rows);
    b[kChannel] = branches_.size() * cfg_.out_channels;
    return merge_->trace(b, rows);
  }

 private:
  AsppConfig cfg_;
  std::vector<LayerPtr<T>> branches_;
  LayerPtr<T> merge_;
};

template <class T>
std::unique_ptr<AsppBlock<T>> build_aspp(const std::string& name, const AsppConfig& cfg, ParamStore<T>& store,
                                         std::mt19937_64* rng) {
  return std::make_unique<AsppBlock<T>>(name, cfg, store, rng);
}

}  // namespace brunet
