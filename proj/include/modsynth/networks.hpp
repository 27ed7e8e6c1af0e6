#pragma once

// Generator (per-modality shared encoders, Cat-Conv fusion, LAF pseudo-target,
// specific encoder, AdaIN decoder) and the conditional discriminator.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "modsynth/autograd.hpp"
#include "modsynth/core_blocks.hpp"
#include "modsynth/ops.hpp"
#include "modsynth/rng.hpp"
#include "modsynth/tensor.hpp"

namespace modsynth {

inline constexpr int kResidualBlocks = 4;
inline constexpr int kStyleCodeWidth = 8;
inline constexpr int kDiscriminatorBlocks = 5;
inline constexpr double kLeakySlope = 0.2;

struct GeneratorConfig {
  int modality_count = 2;
  int image_size = 256;
  int base_channels = 64;
  int feature_channels = 256;
  int laf_block_size = 128;
  double width_scale = 1.0;
  PadMode residual_padding = PadMode::Zero;
  /// One (mean, std) pair per decoder AdaIN layer instead of a shared pair.
  bool per_layer_style = false;

  int base() const { return scaled(base_channels); }
  int features() const { return scaled(feature_channels); }
  int style_pairs() const { return per_layer_style ? kResidualBlocks : 1; }

  int scaled(int width) const {
    return std::max(1, static_cast<int>(std::lround(width * width_scale)));
  }

  void validate() const {
    if (modality_count < 1 || modality_count > 4) {
      throw ContractError("modality_count must be in 1..4, got " + std::to_string(modality_count));
    }
    if (!(width_scale > 0.0)) throw ContractError("width_scale must be positive");
    if (image_size < 32 || image_size % 16 != 0) {
      // 4x in the shared encoder, 16x in the specific encoder, 32x in the discriminator.
      throw ContractError("image_size must be a multiple of 16 and at least 32, got " + std::to_string(image_size));
    }
    if (laf_block_size < 1 || image_size % laf_block_size != 0) {
      throw ContractError("image_size " + std::to_string(image_size) + " is not divisible by laf_block_size " +
                          std::to_string(laf_block_size));
    }
    if (base_channels < 1 || feature_channels < 1) throw ContractError("channel widths must be positive");
  }

  bool operator==(const GeneratorConfig&) const = default;
};

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.var.value().size();
  return n;
}

/// Convolution (or transposed convolution) with weight, optional bias and geometry.
template <typename T>
struct Conv {
  Var<T> weight;
  Var<T> bias;
  ConvOptions options;
  bool transposed = false;

  static Conv make(Rng& rng, int cin, int cout, int k, ConvOptions opt, bool transposed = false, bool with_bias = true) {
    Conv c;
    c.options = opt;
    c.transposed = transposed;
    const Shape ws = transposed ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
    const int fan_in = (transposed ? cout : cin) * k * k;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor<T> w(ws);
    for (auto& v : w.vec()) v = static_cast<T>(rng.uniform(-bound, bound));
    c.weight = Var<T>::parameter(std::move(w));
    if (with_bias) c.bias = Var<T>::parameter(Tensor<T>(cout, 1, 1, 1));
    return c;
  }

  Var<T> operator()(const Var<T>& x) const {
    return transposed ? conv_transpose2d(x, weight, bias, options) : conv2d(x, weight, bias, options);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

// ---------------------------------------------------------------------------
// Shared encoder
// ---------------------------------------------------------------------------

/// Conv-IN-ReLU stem (7x7), two stride-2 4x4 down-sampling blocks and four
/// residual blocks x + ReLU(IN(Conv(Pad(x)))).
template <typename T>
struct SharedEncoder {
  Conv<T> stem, down1, down2;
  std::vector<Conv<T>> res;

  static SharedEncoder make(Rng& rng, const GeneratorConfig& cfg) {
    const int b = cfg.base(), f = cfg.features();
    SharedEncoder e;
    e.stem = Conv<T>::make(rng, 1, b, 7, {1, 3});
    e.down1 = Conv<T>::make(rng, b, 2 * b, 4, {2, 1});
    e.down2 = Conv<T>::make(rng, 2 * b, f, 4, {2, 1});
    for (int i = 0; i < kResidualBlocks; ++i) e.res.push_back(Conv<T>::make(rng, f, f, 3, {1, 1, cfg.residual_padding}));
    return e;
  }

  static constexpr int layer_count() { return 3 + kResidualBlocks; }

  /// Runs layers [from, to): 0 stem, 1-2 down-sampling, 3.. residual.
  Var<T> run(Var<T> h, int from, int to) const {
    for (int i = from; i < to; ++i) {
      if (i < 3) {
        const Conv<T>& conv = i == 0 ? stem : (i == 1 ? down1 : down2);
        h = relu(instance_norm(conv(h)));
      } else {
        h = add(h, relu(instance_norm(res[i - 3](h))));
      }
    }
    return h;
  }

  Var<T> operator()(const Var<T>& x) const { return run(x, 0, layer_count()); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    stem.collect(out, prefix + ".stem");
    down1.collect(out, prefix + ".down1");
    down2.collect(out, prefix + ".down2");
    for (std::size_t i = 0; i < res.size(); ++i) res[i].collect(out, prefix + ".res" + std::to_string(i));
  }
};

// ---------------------------------------------------------------------------
// Specific encoder
// ---------------------------------------------------------------------------

/// Style statistics produced by the specific encoder, each (n, channels * pairs, 1, 1).
template <typename T>
struct StyleVars {
  Var<T> mean;
  Var<T> std;
};

/// Five Conv-ReLU modules (7x7 stem then four stride-2 4x4), global average
/// pooling, a 1x1 projection to the 8-wide style code and three linear layers
/// emitting (mean, std). No normalization layers.
template <typename T>
struct SpecificEncoder {
  std::vector<Conv<T>> convs;
  Conv<T> code;
  Conv<T> fc1, fc2, fc3;
  int channels = 0;
  int pairs = 1;

  static SpecificEncoder make(Rng& rng, const GeneratorConfig& cfg) {
    const int b = cfg.base(), f = cfg.features();
    SpecificEncoder e;
    e.channels = f;
    e.pairs = cfg.style_pairs();
    const int widths[5] = {b, 2 * b, f, f, f};
    e.convs.push_back(Conv<T>::make(rng, 1, widths[0], 7, {1, 3}));
    for (int i = 1; i < 5; ++i) e.convs.push_back(Conv<T>::make(rng, widths[i - 1], widths[i], 4, {2, 1}));
    e.code = Conv<T>::make(rng, f, kStyleCodeWidth, 1, {});
    e.fc1 = Conv<T>::make(rng, kStyleCodeWidth, f, 1, {});
    e.fc2 = Conv<T>::make(rng, f, f, 1, {});
    e.fc3 = Conv<T>::make(rng, f, 2 * f * e.pairs, 1, {});
    // Start near the identity AdaIN: std bias 1, mean bias 0.
    auto& bias = e.fc3.bias.mutable_value();
    for (int i = f * e.pairs; i < 2 * f * e.pairs; ++i) bias[i] = T(1);
    return e;
  }

  static constexpr int layer_count() { return 9; }

  /// Runs layers [from, to): 0-4 Conv-ReLU, 5 pooling + style code,
  /// 6-7 hidden linear layers, 8 output linear layer.
  Var<T> run(Var<T> h, int from, int to) const {
    for (int i = from; i < to; ++i) {
      if (i < 5) {
        h = relu(convs[i](h));
      } else if (i == 5) {
        h = code(global_avg_pool(h));
      } else if (i < 8) {
        h = relu((i == 6 ? fc1 : fc2)(h));
      } else {
        h = fc3(h);
      }
    }
    return h;
  }

  /// Style code of width 8 (before the linear head).
  Var<T> code_of(const Var<T>& x) const { return run(x, 0, 6); }

  /// Splits the head output into (mean, std).
  StyleVars<T> split(const Var<T>& head) const {
    const int width = channels * pairs;
    return {slice_channels(head, 0, width), slice_channels(head, width, width)};
  }

  StyleVars<T> operator()(const Var<T>& x) const { return split(run(x, 0, layer_count())); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < convs.size(); ++i) convs[i].collect(out, prefix + ".conv" + std::to_string(i));
    code.collect(out, prefix + ".code");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
    fc3.collect(out, prefix + ".fc3");
  }
};

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Four residual blocks x + ReLU(AdaIN(Conv(Pad(x)))), two stride-2 transposed
/// convolutions and a stride-1 7x7 transposed convolution with tanh output.
template <typename T>
struct Decoder {
  std::vector<Conv<T>> res;
  Conv<T> up1, up2, out;
  int channels = 0;

  static Decoder make(Rng& rng, const GeneratorConfig& cfg) {
    const int b = cfg.base(), f = cfg.features();
    Decoder d;
    d.channels = f;
    for (int i = 0; i < kResidualBlocks; ++i) d.res.push_back(Conv<T>::make(rng, f, f, 3, {1, 1, cfg.residual_padding}));
    d.up1 = Conv<T>::make(rng, f, 2 * b, 4, {2, 1}, true);
    d.up2 = Conv<T>::make(rng, 2 * b, b, 4, {2, 1}, true);
    d.out = Conv<T>::make(rng, b, 1, 7, {1, 3}, true);
    return d;
  }

  static constexpr int layer_count() { return kResidualBlocks + 3; }

  /// Runs layers [from, to): 0-3 AdaIN residual blocks, 4-5 up-sampling,
  /// 6 output block.
  Var<T> run(Var<T> h, const StyleVars<T>& style, int from, int to) const {
    const int pairs = style.mean.shape().c / channels;
    for (int i = from; i < to; ++i) {
      if (i < kResidualBlocks) {
        Var<T> mean = pairs == 1 ? style.mean : slice_channels(style.mean, i * channels, channels);
        Var<T> sd = pairs == 1 ? style.std : slice_channels(style.std, i * channels, channels);
        h = add(h, relu(adain(res[i](h), mean, sd)));
      } else if (i < kResidualBlocks + 2) {
        h = relu((i == kResidualBlocks ? up1 : up2)(h));
      } else {
        h = tanh(out(h));
      }
    }
    return h;
  }

  Var<T> operator()(const Var<T>& fused, const StyleVars<T>& style) const {
    return run(fused, style, 0, layer_count());
  }

  void collect(ParamList<T>& out_params, const std::string& prefix) const {
    for (std::size_t i = 0; i < res.size(); ++i) res[i].collect(out_params, prefix + ".res" + std::to_string(i));
    up1.collect(out_params, prefix + ".up1");
    up2.collect(out_params, prefix + ".up2");
    out.collect(out_params, prefix + ".out");
  }
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Everything a forward pass produces, for inspection and loss terms.
template <typename T>
struct GeneratorOutput {
  Var<T> synthesized;            // (n, 1, S, S) in [-1, 1]
  Var<T> pseudo_target;          // (n, 1, S, S)
  std::vector<Var<T>> shared;    // M x (n, F, S/4, S/4)
  Var<T> fused;                  // (n, F, S/4, S/4)
  StyleVars<T> style;
};

template <typename T>
class Generator {
 public:
  Generator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 1));
    for (int m = 0; m < cfg_.modality_count; ++m) shared_.push_back(SharedEncoder<T>::make(rng, cfg_));
    cat_conv_ = Conv<T>::make(rng, cfg_.features() * cfg_.modality_count, cfg_.features(), 3, {1, 1});
    const int cells = laf_cell_count(cfg_.image_size, cfg_.image_size, cfg_.laf_block_size);
    auto init = LafParams<T>::averaging(cells, cfg_.modality_count);
    laf_weight_ = Var<T>::parameter(init.weight);
    laf_bias_ = Var<T>::parameter(init.bias);
    specific_ = SpecificEncoder<T>::make(rng, cfg_);
    decoder_ = Decoder<T>::make(rng, cfg_);
  }

  const GeneratorConfig& config() const { return cfg_; }

  /// sources: (n, M, S, S), one channel per source modality.
  GeneratorOutput<T> forward(const Var<T>& sources) const {
    const Shape s = sources.shape();
    if (s.c != cfg_.modality_count) {
      throw ContractError("generator expects " + std::to_string(cfg_.modality_count) + " source modalities, got " +
                          std::to_string(s.c));
    }
    if (s.h != cfg_.image_size || s.w != cfg_.image_size) {
      throw ContractError("generator expects " + std::to_string(cfg_.image_size) + "x" +
                          std::to_string(cfg_.image_size) + " slices, got " + std::to_string(s.h) + "x" +
                          std::to_string(s.w));
    }
    GeneratorOutput<T> out;
    for (int m = 0; m < s.c; ++m) {
      out.shared.push_back(shared_[m](s.c == 1 ? sources : slice_channels(sources, m, 1)));
    }
    out.fused = cat_conv(out.shared, cat_conv_.weight, cat_conv_.bias);
    out.pseudo_target = laf(sources, laf_weight_, laf_bias_, cfg_.laf_block_size);
    out.style = specific_(out.pseudo_target);
    out.synthesized = decoder_(out.fused, out.style);
    return out;
  }

  const SharedEncoder<T>& shared_encoder(int k) const { return shared_.at(k); }
  const SpecificEncoder<T>& specific_encoder() const { return specific_; }
  const Decoder<T>& decoder() const { return decoder_; }
  const Conv<T>& cat_conv_layer() const { return cat_conv_; }
  const Var<T>& laf_weight() const { return laf_weight_; }
  const Var<T>& laf_bias() const { return laf_bias_; }

  /// Shared encoder k applied to a (n, 1, S, S) slice.
  Var<T> encode_shared(int k, const Var<T>& slice) const { return shared_.at(k)(check_slice(slice)); }

  StyleVars<T> encode_style(const Var<T>& pseudo) const { return specific_(check_slice(pseudo)); }

  Var<T> style_code(const Var<T>& pseudo) const { return specific_.code_of(check_slice(pseudo)); }

  LafParams<T> laf_params() const {
    return {cfg_.modality_count, laf_weight_.value(), laf_bias_.value()};
  }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (int m = 0; m < cfg_.modality_count; ++m) shared_[m].collect(out, "sre" + std::to_string(m));
    cat_conv_.collect(out, "catconv");
    out.push_back({"laf.weight", laf_weight_});
    out.push_back({"laf.bias", laf_bias_});
    specific_.collect(out, "spe");
    decoder_.collect(out, "dec");
    return out;
  }

  /// Parameters of shared encoder k only.
  ParamList<T> shared_encoder_parameters(int k) const {
    ParamList<T> out;
    shared_.at(k).collect(out, "sre" + std::to_string(k));
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() { return {}; }

 private:
  Var<T> check_slice(const Var<T>& x) const {
    const Shape s = x.shape();
    if (s.c != 1 || s.h != cfg_.image_size || s.w != cfg_.image_size) {
      throw ContractError("expected (n, 1, " + std::to_string(cfg_.image_size) + ", " +
                          std::to_string(cfg_.image_size) + ") slices, got " + s.str());
    }
    return x;
  }

  GeneratorConfig cfg_;
  std::vector<SharedEncoder<T>> shared_;
  Conv<T> cat_conv_;
  Var<T> laf_weight_, laf_bias_;
  SpecificEncoder<T> specific_;
  Decoder<T> decoder_;
};

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

/// Five stride-2 4x4 convolution blocks (64 channels after the first,
/// doubling after each, batch norm on interior blocks, LeakyReLU 0.2),
/// a 3x3 single-channel projection, sigmoid and spatial mean.
template <typename T>
class Discriminator {
 public:
  Discriminator(const GeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 2));
    int cin = cfg_.modality_count + 1;
    for (int i = 0; i < kDiscriminatorBlocks; ++i) {
      const int cout = cfg_.scaled(64) << i;
      blocks_.push_back(Conv<T>::make(rng, cin, cout, 4, {2, 1}));
      if (i > 0) {
        gamma_.push_back(Var<T>::parameter(Tensor<T>(cout, 1, 1, 1, T(1))));
        beta_.push_back(Var<T>::parameter(Tensor<T>(cout, 1, 1, 1, T(0))));
        stats_.push_back({Tensor<T>(cout, 1, 1, 1, T(0)), Tensor<T>(cout, 1, 1, 1, T(1)), T(0.1)});
      }
      cin = cout;
    }
    projection_ = Conv<T>::make(rng, cin, 1, 3, {1, 1});
  }

  const GeneratorConfig& config() const { return cfg_; }

  int block_count() const { return static_cast<int>(blocks_.size()); }
  int block_width(int i) const { return blocks_.at(i).weight.shape().n; }

  /// Returns (n, 1, 1, 1) probabilities that `target` is real given `sources`.
  /// `training` selects batch statistics; `update_stats` folds them into the
  /// running averages.
  Var<T> forward(const Var<T>& sources, const Var<T>& target, bool training = true, bool update_stats = false) {
    const Shape s = sources.shape(), t = target.shape();
    if (s.c != cfg_.modality_count || t.c != 1 || s.n != t.n || s.h != t.h || s.w != t.w) {
      throw ContractError("discriminator input mismatch: sources " + s.str() + ", target " + t.str() + " (expected " +
                          std::to_string(cfg_.modality_count) + " source channels)");
    }
    if (s.h != cfg_.image_size || s.w != cfg_.image_size) {
      throw ContractError("discriminator expects " + std::to_string(cfg_.image_size) + "-pixel slices, got " + s.str());
    }
    Var<T> h = concat_channels<T>({sources, target});
    for (int i = 0; i < block_count(); ++i) {
      h = blocks_[i](h);
      if (i > 0) h = batch_norm(h, gamma_[i - 1], beta_[i - 1], stats_[i - 1], training, update_stats);
      h = leaky_relu(h, T(kLeakySlope));
    }
    return spatial_mean(sigmoid(projection_(h)));
  }

  /// Projection head, exposed so tests can zero it.
  Conv<T>& projection() { return projection_; }

  ParamList<T> parameters() const {
    ParamList<T> out;
    for (int i = 0; i < block_count(); ++i) {
      blocks_[i].collect(out, "block" + std::to_string(i));
      if (i > 0) {
        out.push_back({"block" + std::to_string(i) + ".bn.gamma", gamma_[i - 1]});
        out.push_back({"block" + std::to_string(i) + ".bn.beta", beta_[i - 1]});
      }
    }
    projection_.collect(out, "projection");
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> out;
    for (std::size_t i = 0; i < stats_.size(); ++i) {
      const std::string p = "block" + std::to_string(i + 1) + ".bn.";
      out.push_back({p + "running_mean", &stats_[i].running_mean});
      out.push_back({p + "running_var", &stats_[i].running_var});
    }
    return out;
  }

 private:
  GeneratorConfig cfg_;
  std::vector<Conv<T>> blocks_;
  std::vector<Var<T>> gamma_, beta_;
  std::vector<BatchNormStats<T>> stats_;
  Conv<T> projection_;
};

/// Convenience: stacks M single-channel slices (1, 1, S, S) into (1, M, S, S)
/// and runs the generator without recording gradients.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> generator_forward(const Generator<T>& g, const std::vector<Tensor<T>>& modalities) {
  if (static_cast<int>(modalities.size()) != g.config().modality_count) {
    throw ContractError("generator configured for " + std::to_string(g.config().modality_count) +
                        " modalities, got " + std::to_string(modalities.size()));
  }
  NoGradGuard guard;
  auto out = g.forward(Var<T>(stack_modalities(modalities)));
  return {out.synthesized.value(), out.pseudo_target.value()};
}

}  // namespace modsynth
