#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "erasenet/nn.hpp"
#include "erasenet/ops.hpp"
#include "erasenet/rng.hpp"
#include "erasenet/tensor.hpp"

namespace erasenet {

enum class Variant : std::uint8_t { EraseNet3 = 3, EraseNet4 = 4 };

inline std::string to_string(Variant v) { return v == Variant::EraseNet3 ? "EraseNet-3" : "EraseNet-4"; }

inline Variant variant_from_int(int v) {
  if (v == 3) return Variant::EraseNet3;
  if (v == 4) return Variant::EraseNet4;
  throw std::invalid_argument("unknown EraseNet variant " + std::to_string(v) + " (expected 3 or 4)");
}

/// Stacked Conv -> BatchNorm -> LeakyReLU layers with additive dense
/// connectivity.
struct ConvBlockSpec {
  std::size_t depth = 2;
  std::size_t filters = 64;
  std::size_t kernel = 3;

  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct DecoderStageSpec {
  std::size_t transpose_filters = 64;
  ConvBlockSpec block;
};

/// Layer schedule of an encoder-decoder. Encoder stage i is followed by a
/// residual capture and a transition; decoder stage i up-samples and then
/// concatenates the residual captured at the matching resolution.
struct ArchitectureSpec {
  std::vector<ConvBlockSpec> encoder;
  ConvBlockSpec bottleneck;
  std::vector<DecoderStageSpec> decoder;
  std::size_t head_kernel = 3;
  double dropout_rate = 0.3;
  double leaky_slope = 0.2;

  std::size_t down_samplings() const { return encoder.size(); }
  std::size_t required_multiple() const { return std::size_t{1} << encoder.size(); }
};

inline std::size_t scale_filters(std::size_t filters, double width_scale) {
  const auto v = static_cast<long>(std::lround(static_cast<double>(filters) * width_scale));
  return static_cast<std::size_t>(std::max(1L, v));
}

/// Filter and kernel schedule of EraseNet-4 (four down/up samplings) and
/// EraseNet-3 (deepest encoder stage dropped), with every filter count
/// multiplied by width_scale. A scale of 1 gives the full-size network.
inline ArchitectureSpec erasenet_architecture(Variant variant, double width_scale = 1.0) {
  if (!(width_scale > 0.0)) throw std::invalid_argument("width scale must be positive");
  auto f = [&](std::size_t n) { return scale_filters(n, width_scale); };
  ArchitectureSpec a;
  if (variant == Variant::EraseNet4) {
    a.encoder = {{2, f(64), 5}, {2, f(64), 5}, {3, f(128), 3}, {3, f(256), 3}};
    a.bottleneck = {4, f(512), 3};
    a.decoder = {{f(256), {3, f(256), 3}}, {f(128), {3, f(128), 3}}, {f(64), {3, f(64), 5}}, {f(64), {3, f(64), 5}}};
  } else if (variant == Variant::EraseNet3) {
    a.encoder = {{2, f(64), 5}, {2, f(64), 5}, {3, f(128), 3}};
    a.bottleneck = {3, f(256), 3};
    a.decoder = {{f(128), {3, f(128), 3}}, {f(64), {3, f(64), 5}}, {f(64), {3, f(64), 5}}};
  } else {
    throw std::invalid_argument("unknown EraseNet variant");
  }
  return a;
}

enum class LayerKind { ConvBlock, Residual, Transition, ConvTranspose, Concatenation, Convolution, Sigmoid };

struct LayerDesc {
  LayerKind kind;
  std::string label;    // e.g. "ConvBlock (3)"
  std::size_t index;    // block, residual slot, transpose or concat index
  std::size_t partner;  // Concatenation: residual slot consumed
};

struct TraceEntry {
  std::string label;
  Shape shape;
};

template <class T>
struct CompositeLayer {
  ConvWeights<T> conv;
  BatchNormState<T> bn;
};

template <class T>
struct ConvBlock {
  ConvBlockSpec spec;
  std::vector<CompositeLayer<T>> layers;
};

/// x_0 = input; layer l consumes the sum of all earlier activations whose
/// channel count equals `filters` (the first layer consumes x_0 alone and
/// projects it to `filters` channels). Returns the last activation.
template <class T>
Tensor<T> conv_block_forward(const Tensor<T>& x, ConvBlock<T>& block, Mode mode, T leaky_slope = T(0.2)) {
  if (x.shape().c < 1) throw ShapeError("conv_block_forward: empty channel axis");
  std::vector<Tensor<T>> acts{x};
  for (std::size_t l = 0; l < block.layers.size(); ++l) {
    Tensor<T> in;
    if (l == 0) {
      in = x;
    } else {
      std::vector<Tensor<T>> terms;
      for (const auto& a : acts)
        if (a.shape().c == block.spec.filters) terms.push_back(a);
      in = add_n(terms);
    }
    auto& layer = block.layers[l];
    acts.push_back(leaky_relu(batchnorm2d(conv2d(in, layer.conv), layer.bn, mode), leaky_slope));
  }
  return acts.back();
}

/// MaxPool 2x2 followed by dropout.
template <class T>
Tensor<T> transition_forward(const Tensor<T>& x, Mode mode, Rng* rng, double rate = 0.3) {
  const Tensor<T> pooled = maxpool2d(x, 2);
  if (mode == Mode::Infer || rate == 0.0) return pooled;
  if (rng == nullptr) throw std::invalid_argument("transition_forward: train mode needs a random source");
  return dropout(pooled, rate, mode, *rng);
}

/// The assembled encoder-decoder: layer list, parameters with stable dotted
/// names, and batch-norm running statistics.
template <class T>
class ModelGraph {
 public:
  ModelGraph(Variant variant, ArchitectureSpec arch, double width_scale, std::uint64_t init_seed)
      : variant_(variant), arch_(std::move(arch)), width_scale_(width_scale) {
    Rng rng(init_seed);
    build(rng);
  }

  ModelGraph(const ModelGraph&) = delete;
  ModelGraph& operator=(const ModelGraph&) = delete;
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  Variant variant() const { return variant_; }
  const ArchitectureSpec& architecture() const { return arch_; }
  double width_scale() const { return width_scale_; }
  const std::vector<LayerDesc>& layers() const { return layers_; }

  /// Parameters in registration order.
  const std::vector<std::pair<std::string, Tensor<T>>>& parameters() const { return params_; }

  std::optional<Tensor<T>> find_parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    return std::nullopt;
  }

  /// Batch-norm running statistics, named "<layer>.running_mean" / ".running_var".
  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (auto& [name, bn] : bn_index_) {
      out.emplace_back(name + ".running_mean", &bn->running_mean);
      out.emplace_back(name + ".running_var", &bn->running_var);
    }
    return out;
  }

  /// Batch-norm layers by name ("<block>.bn<l>").
  const std::vector<std::pair<std::string, BatchNormState<T>*>>& batchnorms() const { return bn_index_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  /// Full forward pass. `rng` drives dropout and is required in train mode.
  /// When `trace` is given, the output shape of every layer is appended.
  Tensor<T> forward(const Tensor<T>& x, Mode mode, Rng* rng = nullptr, std::vector<TraceEntry>* trace = nullptr) {
    const Shape xs = x.shape();
    if (xs.c != 1) throw ShapeError("forward: expected a single-channel input, got " + xs.str());
    const std::size_t m = arch_.required_multiple();
    if (xs.h % m != 0 || xs.w % m != 0) {
      throw ShapeError("forward: rows and cols must be a multiple of " + std::to_string(m) + " for " +
                       to_string(variant_) + ", got " + std::to_string(xs.h) + "x" + std::to_string(xs.w));
    }
    if (mode == Mode::Train && rng == nullptr && arch_.dropout_rate > 0.0) {
      throw std::invalid_argument("forward: train mode needs a random source for dropout");
    }
    std::vector<Tensor<T>> residuals(arch_.encoder.size());
    Tensor<T> cur = x;
    const T slope = static_cast<T>(arch_.leaky_slope);
    for (const auto& layer : layers_) {
      switch (layer.kind) {
        case LayerKind::ConvBlock:
          cur = conv_block_forward(cur, blocks_[layer.index], mode, slope);
          break;
        case LayerKind::Residual:
          residuals[layer.index] = cur;
          break;
        case LayerKind::Transition:
          cur = transition_forward(cur, mode, rng, arch_.dropout_rate);
          break;
        case LayerKind::ConvTranspose:
          cur = relu(conv_transpose2d(cur, ups_[layer.index]));
          break;
        case LayerKind::Concatenation:
          cur = concat_channels(residuals[layer.partner], cur);
          break;
        case LayerKind::Convolution:
          cur = conv2d(cur, head_);
          break;
        case LayerKind::Sigmoid:
          cur = sigmoid(cur);
          break;
      }
      if (trace) trace->push_back({layer.label, cur.shape()});
    }
    return cur;
  }

 private:
  void add_param(const std::string& name, const Tensor<T>& t) {
    for (const auto& [n, existing] : params_)
      if (n == name) throw std::logic_error("duplicate parameter name " + name);
    params_.emplace_back(name, t);
  }

  static Tensor<T> glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(shape.size());
    for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
    return Tensor<T>(shape, std::move(v), true);
  }

  ConvBlock<T> make_block(const std::string& prefix, ConvBlockSpec spec, std::size_t in_channels, Rng& rng) {
    if (spec.depth < 1) throw std::invalid_argument(prefix + ": block depth must be >= 1");
    if (spec.kernel % 2 == 0) throw std::invalid_argument(prefix + ": kernel must be odd");
    ConvBlock<T> block{spec, {}};
    block.layers.reserve(spec.depth);
    for (std::size_t l = 0; l < spec.depth; ++l) {
      const std::size_t cin = l == 0 ? in_channels : spec.filters;
      const std::size_t area = spec.kernel * spec.kernel;
      CompositeLayer<T> layer;
      layer.conv.kernel = glorot({spec.filters, cin, spec.kernel, spec.kernel}, cin * area, spec.filters * area, rng);
      layer.conv.bias = Tensor<T>::zeros({1, spec.filters, 1, 1}, true);
      layer.bn = BatchNormState<T>::make(spec.filters);
      block.layers.push_back(std::move(layer));
    }
    return block;
  }

  void register_block(const std::string& prefix, ConvBlock<T>& block) {
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      auto& layer = block.layers[l];
      const std::string conv = prefix + ".conv" + std::to_string(l);
      const std::string bn = prefix + ".bn" + std::to_string(l);
      add_param(conv + ".kernel", layer.conv.kernel);
      add_param(conv + ".bias", layer.conv.bias);
      add_param(bn + ".gamma", layer.bn.gamma);
      add_param(bn + ".beta", layer.bn.beta);
    }
  }

  void build(Rng& rng) {
    const std::size_t d = arch_.encoder.size();
    if (d == 0) throw std::invalid_argument("architecture needs at least one encoder stage");
    if (arch_.decoder.size() != d) throw std::invalid_argument("decoder stage count must match encoder");

    std::size_t channels = 1;
    std::size_t block_no = 0;
    auto label = [](const char* what, std::size_t i) { return std::string(what) + " (" + std::to_string(i) + ")"; };
    std::vector<std::size_t> residual_channels;
    for (std::size_t i = 0; i < d; ++i) {
      blocks_.push_back(make_block("enc.block" + std::to_string(i + 1), arch_.encoder[i], channels, rng));
      channels = arch_.encoder[i].filters;
      residual_channels.push_back(channels);
      layers_.push_back({LayerKind::ConvBlock, label("ConvBlock", block_no + 1), block_no, 0});
      ++block_no;
      layers_.push_back({LayerKind::Residual, label("Residual", i + 1), i, 0});
      layers_.push_back({LayerKind::Transition, label("Transition Layer", i + 1), i, 0});
    }
    blocks_.push_back(make_block("enc.block" + std::to_string(d + 1), arch_.bottleneck, channels, rng));
    channels = arch_.bottleneck.filters;
    layers_.push_back({LayerKind::ConvBlock, label("ConvBlock", block_no + 1), block_no, 0});
    ++block_no;

    for (std::size_t i = 0; i < d; ++i) {
      const auto& stage = arch_.decoder[i];
      const std::size_t slot = d - 1 - i;
      const std::size_t area = 9;
      ConvWeights<T> up;
      up.kernel = glorot({channels, stage.transpose_filters, 3, 3}, channels * area, stage.transpose_filters * area, rng);
      up.bias = Tensor<T>::zeros({1, stage.transpose_filters, 1, 1}, true);
      ups_.push_back(up);
      layers_.push_back({LayerKind::ConvTranspose, label("ConvTranspose", i + 1), i, 0});
      layers_.push_back({LayerKind::Concatenation, label("Concatenation", i + 1), i, slot});
      const std::size_t cat = residual_channels[slot] + stage.transpose_filters;
      blocks_.push_back(make_block("dec.block" + std::to_string(i + 1), stage.block, cat, rng));
      channels = stage.block.filters;
      layers_.push_back({LayerKind::ConvBlock, label("ConvBlock", block_no + 1), block_no, 0});
      ++block_no;
    }

    const std::size_t hk = arch_.head_kernel;
    head_.kernel = glorot({1, channels, hk, hk}, channels * hk * hk, hk * hk, rng);
    head_.bias = Tensor<T>::zeros({1, 1, 1, 1}, true);
    layers_.push_back({LayerKind::Convolution, "Convolution (1)", 0, 0});
    layers_.push_back({LayerKind::Sigmoid, "Sigmoid (1)", 0, 0});

    // registration order fixes checkpoint entry order
    for (std::size_t i = 0; i < d; ++i) register_block("enc.block" + std::to_string(i + 1), blocks_[i]);
    register_block("enc.block" + std::to_string(d + 1), blocks_[d]);
    for (std::size_t i = 0; i < d; ++i) {
      const std::string up = "dec.up" + std::to_string(i + 1);
      add_param(up + ".kernel", ups_[i].kernel);
      add_param(up + ".bias", ups_[i].bias);
      register_block("dec.block" + std::to_string(i + 1), blocks_[d + 1 + i]);
    }
    add_param("head.kernel", head_.kernel);
    add_param("head.bias", head_.bias);

    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string prefix = b <= d ? "enc.block" + std::to_string(b + 1) : "dec.block" + std::to_string(b - d);
      for (std::size_t l = 0; l < blocks_[b].layers.size(); ++l) {
        bn_index_.emplace_back(prefix + ".bn" + std::to_string(l), &blocks_[b].layers[l].bn);
      }
    }
  }

  Variant variant_;
  ArchitectureSpec arch_;
  double width_scale_;
  std::vector<LayerDesc> layers_;
  std::vector<ConvBlock<T>> blocks_;
  std::vector<ConvWeights<T>> ups_;
  ConvWeights<T> head_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::pair<std::string, BatchNormState<T>*>> bn_index_;
};

/// EraseNet-3 or EraseNet-4 at the given width.
template <class T = float>
ModelGraph<T> build_erasenet(Variant variant, double width_scale = 1.0, std::uint64_t init_seed = 0) {
  return ModelGraph<T>(variant, erasenet_architecture(variant, width_scale), width_scale, init_seed);
}

}  // namespace erasenet
