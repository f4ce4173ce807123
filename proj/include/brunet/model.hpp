#pragma once

// Five-level encoder-decoder over (T, H, W, F) inputs. The encoder keeps the time
// axis; every skip and the bottleneck output are collapsed from T steps to one by a
// (T, 1, 1) valid conv, so the decoder works on (1, H, W, C) data.

#include <array>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "brunet/blocks.hpp"
#include "brunet/graph.hpp"

namespace brunet {

enum class Arch { broad_unet, plain_unet };
enum class Head { regression, binary };

inline std::string to_string(Arch a) { return a == Arch::broad_unet ? "broad-unet" : "plain-unet"; }
inline std::string to_string(Head h) { return h == Head::regression ? "regression" : "binary"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "broad-unet") return Arch::broad_unet;
  if (s == "plain-unet") return Arch::plain_unet;
  throw InvalidArgument("unknown architecture '" + s + "'");
}

inline Head parse_head(const std::string& s) {
  if (s == "regression") return Head::regression;
  if (s == "binary") return Head::binary;
  throw InvalidArgument("unknown head '" + s + "'");
}

struct ModelConfig {
  static constexpr std::size_t levels = 5;

  Arch arch = Arch::broad_unet;
  std::size_t lags = 12;
  std::size_t height = 288;
  std::size_t width = 288;
  std::size_t features = 1;
  std::size_t base_filters = 64;
  double dropout_rate = 0.5;
  bool factorized = true;
  Head head = Head::regression;
  AsppConfig aspp;  // channel counts are set from the plan at build time

  std::array<std::size_t, levels> channel_plan() const {
    std::array<std::size_t, levels> plan{};
    for (std::size_t l = 0; l < levels; ++l) plan[l] = base_filters << l;
    return plan;
  }

  Shape input_shape() const { return Shape{lags, height, width, features}; }
  Shape output_shape() const { return Shape{1, height, width, features}; }

  void validate() const {
    if (lags < 1 || features < 1 || base_filters < 1) throw InvalidArgument("lags, features and base_filters must be >= 1");
    if (height < 1 || width < 1) throw InvalidShape("height and width must be >= 1");
    constexpr std::size_t div = std::size_t{1} << (levels - 1);
    if (height % div != 0 || width % div != 0)
      throw InvalidShape("height and width must be divisible by " + std::to_string(div) + ", got " +
                         std::to_string(height) + "x" + std::to_string(width));
    check_dropout_rate(dropout_rate);
    AsppConfig a = aspp;
    a.in_channels = a.out_channels = 1;
    a.validate();
  }

  /// One key=value pair per line; the inverse is from_key_values.
  std::string to_key_values() const {
    std::ostringstream os;
    os.imbue(std::locale::classic());
    os.precision(17);
    os << "arch=" << to_string(arch) << '\n'
       << "lags=" << lags << '\n'
       << "height=" << height << '\n'
       << "width=" << width << '\n'
       << "features=" << features << '\n'
       << "base_filters=" << base_filters << '\n'
       << "dropout_rate=" << dropout_rate << '\n'
       << "factorized=" << (factorized ? 1 : 0) << '\n'
       << "head=" << to_string(head) << '\n'
       << "aspp_rates=";
    for (std::size_t i = 0; i < aspp.dilation_rates.size(); ++i) os << (i ? "," : "") << aspp.dilation_rates[i];
    os << '\n'
       << "aspp_pointwise=" << (aspp.include_pointwise_branch ? 1 : 0) << '\n'
       << "aspp_kernel=" << aspp.spatial_kernel << '\n';
    return os.str();
  }

  static ModelConfig from_key_values(const std::map<std::string, std::string>& kv) {
    auto get = [&](const std::string& k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw InvalidArgument("model manifest lacks key '" + k + "'");
      return it->second;
    };
    auto num = [&](const std::string& k) { return static_cast<std::size_t>(std::stoull(get(k))); };
    ModelConfig c;
    c.arch = parse_arch(get("arch"));
    c.lags = num("lags");
    c.height = num("height");
    c.width = num("width");
    c.features = num("features");
    c.base_filters = num("base_filters");
    c.dropout_rate = std::stod(get("dropout_rate"));
    c.factorized = get("factorized") == "1";
    c.head = parse_head(get("head"));
    c.aspp.dilation_rates.clear();
    std::stringstream rates(get("aspp_rates"));
    for (std::string r; std::getline(rates, r, ',');) c.aspp.dilation_rates.push_back(std::stoull(r));
    c.aspp.include_pointwise_branch = get("aspp_pointwise") == "1";
    c.aspp.spatial_kernel = num("aspp_kernel");
    return c;
  }
};

/// The whole encoder-decoder as one layer.
template <class T>
class UNetGraph final : public Layer<T> {
 public:
  static constexpr std::size_t L = ModelConfig::levels;

  UNetGraph(const ModelConfig& cfg, ParamStore<T>& store, std::mt19937_64* rng) : Layer<T>(to_string(cfg.arch)) {
    cfg.validate();
    plan_ = cfg.channel_plan();
    const bool broad = cfg.arch == Arch::broad_unet;
    int block_index = 0;

    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t cin = l == 0 ? cfg.features : plan_[l - 1];
      const std::string n = "enc" + std::to_string(l);
      if (broad)
        enc_[l] = build_multiscale_block<T>(n, {cin, plan_[l], cfg.factorized, cfg.lags}, store, rng, block_index++);
      else
        enc_[l] = plain_level(n, cin, plan_[l], cfg.lags, store, rng);
    }

    auto bottleneck = std::make_unique<Sequential<T>>("bottleneck");
    if (broad) {
      AsppConfig a = cfg.aspp;
      a.in_channels = a.out_channels = plan_[L - 1];
      bottleneck->add(build_aspp<T>("aspp", a, store, rng));
    }
    bottleneck->add(std::make_unique<DropoutLayer<T>>("bottleneck.dropout", cfg.dropout_rate));
    bottleneck_ = std::move(bottleneck);

    for (std::size_t l = 0; l < L; ++l) {
      ConvSpec s;
      s.kernel = {cfg.lags, 1, 1};
      s.padding = Padding::valid;
      s.in_channels = s.out_channels = plan_[l];
      reduce_[l] = make_conv<T>(l + 1 == L ? std::string("reduce_bottleneck") : "reduce_skip" + std::to_string(l), s,
                                store, rng);
    }

    for (std::size_t d = L - 1; d-- > 0;) {
      const std::size_t cin = plan_[d + 1] + plan_[d];
      const std::string n = "dec" + std::to_string(d);
      if (broad)
        dec_[d] = build_multiscale_block<T>(n, {cin, plan_[d], cfg.factorized, 1}, store, rng, block_index++);
      else
        dec_[d] = plain_level(n, cin, plan_[d], 1, store, rng);
    }

    auto head = std::make_unique<Sequential<T>>("head");
    head->add(make_conv<T>("head.conv", block_kernel(1, 1, plan_[0], cfg.features), store, rng));
    head->add(std::make_unique<ActivationLayer<T>>(
        "head.act", cfg.head == Head::binary ? Activation::sigmoid : Activation::linear));
    head_ = std::move(head);
  }

  Tensor<T> forward(const Tensor<T>& x, const ParamStore<T>& p, Context<T>& ctx) const override {
    std::array<Tensor<T>, L - 1> skips;
    Tensor<T> h = x;
    for (std::size_t l = 0; l + 1 < L; ++l) {
      skips[l] = enc_[l]->forward(h, p, ctx);
      h = pool_.forward(skips[l], p, ctx);
    }
    h = enc_[L - 1]->forward(h, p, ctx);
    h = bottleneck_->forward(h, p, ctx);
    h = reduce_[L - 1]->forward(h, p, ctx);
    for (std::size_t d = L - 1; d-- > 0;) {
      const Tensor<T> up = up_.forward(h, p, ctx);
      const Tensor<T> s = reduce_[d]->forward(skips[d], p, ctx);
      h = dec_[d]->forward(tensor_concat_channels<T>({&up, &s}), p, ctx);
    }
    return head_->forward(h, p, ctx);
  }

  Tensor<T> backward(const Tensor<T>& g, const ParamStore<T>& p, Context<T>& ctx, Grads<T>& grads) const override {
    std::array<Tensor<T>, L - 1> gskips;
    Tensor<T> d = head_->backward(g, p, ctx, grads);
    for (std::size_t lvl = 0; lvl + 1 < L; ++lvl) {
      d = dec_[lvl]->backward(d, p, ctx, grads);
      const std::array<std::size_t, 2> widths{plan_[lvl + 1], plan_[lvl]};
      auto parts = tensor_split_channels(d, widths);
      gskips[lvl] = reduce_[lvl]->backward(parts[1], p, ctx, grads);
      d = up_.backward(parts[0], p, ctx, grads);
    }
    d = reduce_[L - 1]->backward(d, p, ctx, grads);
    d = bottleneck_->backward(d, p, ctx, grads);
    d = enc_[L - 1]->backward(d, p, ctx, grads);
    for (std::size_t l = L - 1; l-- > 0;) {
      d = pool_.backward(d, p, ctx, grads);
      add_into(d, gskips[l]);
      d = enc_[l]->backward(d, p, ctx, grads);
    }
    return d;
  }

  Shape trace(const Shape& in, std::vector<LayerRow>& rows) const override {
    std::array<Shape, L - 1> skips;
    Shape h = in;
    for (std::size_t l = 0; l + 1 < L; ++l) {
      skips[l] = enc_[l]->trace(h, rows);
      h = pool_.trace(skips[l], rows);
    }
    h = enc_[L - 1]->trace(h, rows);
    h = bottleneck_->trace(h, rows);
    h = reduce_[L - 1]->trace(h, rows);
    for (std::size_t d = L - 1; d-- > 0;) {
      Shape up = up_.trace(h, rows);
      const Shape s = reduce_[d]->trace(skips[d], rows);
      for (std::size_t a = 0; a < 3; ++a)
        if (up[a] != s[a]) throw InvalidShape("decoder level " + std::to_string(d) + ": skip " + s.str() +
                                              " does not match upsampled " + up.str());
      up[kChannel] += s[kChannel];
      h = dec_[d]->trace(up, rows);
    }
    return head_->trace(h, rows);
  }

  /// Multi-scale blocks in forward order (encoder 0..4, then decoder from the bottom up).
  std::vector<const MultiscaleBlock<T>*> multiscale_blocks() const {
    std::vector<const MultiscaleBlock<T>*> out;
    for (const auto& e : enc_)
      if (auto* b = dynamic_cast<const MultiscaleBlock<T>*>(e.get())) out.push_back(b);
    for (std::size_t d = L - 1; d-- > 0;)
      if (auto* b = dynamic_cast<const MultiscaleBlock<T>*>(dec_[d].get())) out.push_back(b);
    return out;
  }

  const std::array<std::size_t, L>& channel_plan() const noexcept { return plan_; }

 private:
  static LayerPtr<T> plain_level(const std::string& name, std::size_t cin, std::size_t cout, std::size_t time_extent,
                                 ParamStore<T>& store, std::mt19937_64* rng) {
    auto seq = std::make_unique<Sequential<T>>(name);
    for (std::size_t i = 0; i < 2; ++i) {
      const std::string n = name + ".conv" + std::to_string(i);
      seq->add(make_conv<T>(n, block_kernel(3, time_extent, i == 0 ? cin : cout, cout), store, rng));
      seq->add(std::make_unique<ActivationLayer<T>>(n + ".relu", Activation::relu));
    }
    return seq;
  }

  std::array<std::size_t, L> plan_{};
  std::array<LayerPtr<T>, L> enc_;
  LayerPtr<T> bottleneck_;
  std::array<LayerPtr<T>, L> reduce_;
  std::array<LayerPtr<T>, L - 1> dec_;
  LayerPtr<T> head_;
  MaxPoolLayer<T> pool_{"pool"};
  UpsampleLayer<T> up_{"upsample"};
};

struct BuildOptions {
  std::uint64_t seed = 0;
  bool materialize = true;  // false: parameter shapes only, for accounting and shape tracing
};

template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, const BuildOptions& opt) : cfg_(cfg) {
    std::mt19937_64 rng(opt.seed);
    graph_ = std::make_unique<UNetGraph<T>>(cfg, params_, opt.materialize ? &rng : nullptr);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamStore<T>& params() const noexcept { return params_; }
  ParamStore<T>& params() noexcept { return params_; }
  const UNetGraph<T>& graph() const noexcept { return *graph_; }

  Tensor<T> forward(const Tensor<T>& x, Context<T>& ctx) const {
    check_input(x.shape());
    return graph_->forward(x, params_, ctx);
  }

  Tensor<T> backward(const Tensor<T>& grad_out, Context<T>& ctx, Grads<T>& grads) const {
    if (!(grad_out.shape() == cfg_.output_shape()))
      throw InvalidArgument("model grad_out " + grad_out.shape().str() + " does not match output " +
                            cfg_.output_shape().str());
    Tensor<T> gx = graph_->backward(grad_out, params_, ctx, grads);
    if (!ctx.tape.empty()) throw std::logic_error("tape not fully consumed by backward");
    return gx;
  }

  /// Per-layer table from symbolic shape propagation; allocates no activations.
  std::vector<LayerRow> layer_table() const {
    std::vector<LayerRow> rows;
    graph_->trace(cfg_.input_shape(), rows);
    return rows;
  }

  Shape traced_output_shape() const { return graph_->output_shape(cfg_.input_shape()); }

  void check_input(const Shape& s) const {
    if (!(s == cfg_.input_shape()))
      throw InvalidArgument("model expects input " + cfg_.input_shape().str() + ", got " + s.str());
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  std::unique_ptr<UNetGraph<T>> graph_;
};

template <class T>
Model<T> build_broad_unet(ModelConfig cfg, const BuildOptions& opt = {}) {
  cfg.arch = Arch::broad_unet;
  return Model<T>(cfg, opt);
}

template <class T>
Model<T> build_plain_unet(ModelConfig cfg, const BuildOptions& opt = {}) {
  cfg.arch = Arch::plain_unet;
  return Model<T>(cfg, opt);
}

template <class T>
Model<T> build_model(const ModelConfig& cfg, const BuildOptions& opt = {}) {
  return Model<T>(cfg, opt);
}

struct ParamCount {
  std::size_t total = 0;
  std::vector<LayerRow> layers;
};

template <class T>
ParamCount count_params(const Model<T>& m) {
  ParamCount pc;
  pc.total = m.params().total_count();
  for (auto& row : m.layer_table())
    if (row.params > 0) pc.layers.push_back(std::move(row));
  const std::size_t table_sum = std::accumulate(pc.layers.begin(), pc.layers.end(), std::size_t{0},
                                                [](std::size_t acc, const LayerRow& r) { return acc + r.params; });
  if (table_sum != pc.total)
    throw std::logic_error("per-layer parameter table sums to " + std::to_string(table_sum) + " but the store holds " +
                           std::to_string(pc.total));
  return pc;
}

/// Deterministic inference; regression outputs are clamped at zero.
template <class T>
Tensor<T> predict(const Model<T>& m, const Tensor<T>& x) {
  auto ctx = Context<T>::inference();
  Tensor<T> y = m.forward(x, ctx);
  if (m.config().head == Head::regression)
    for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return y;
}

/// Last observed frame as the forecast.
template <class T>
Tensor<T> persistence_predict(const Tensor<T>& x) {
  if (x.rank() != 4) throw InvalidArgument("persistence input must be rank 4 (T,H,W,F)");
  const std::array<std::size_t, 4> begin{x.dim(kTime) - 1, 0, 0, 0};
  const std::array<std::size_t, 4> ext{1, x.dim(kHeight), x.dim(kWidth), x.dim(kChannel)};
  return tensor_slice(x, begin, ext);
}

/// Branch outputs of one multi-scale block, labelled by branch kernel.
template <class T>
std::vector<std::pair<std::string, Tensor<T>>> dump_feature_maps(const Model<T>& m, const Tensor<T>& x, int block_index) {
  const auto blocks = m.graph().multiscale_blocks();
  if (block_index < 0 || static_cast<std::size_t>(block_index) >= blocks.size())
    throw InvalidArgument("block index " + std::to_string(block_index) + " out of range (model has " +
                          std::to_string(blocks.size()) + " multi-scale blocks)");
  auto ctx = Context<T>::inference();
  ctx.capture_block = block_index;
  m.forward(x, ctx);
  return std::move(ctx.captured);
}

}  // namespace brunet
