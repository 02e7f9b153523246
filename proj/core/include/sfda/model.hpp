#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/ops.hpp"
#include "sfda/params.hpp"
#include "sfda/rng.hpp"

namespace sfda {

/// Small convolutional stack: per stage conv3x3 (stride 1, pad 1) ->
/// batch_norm -> relu -> 2x average pool. The feature map side halves per
/// stage.
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> conv_channels{16, 32, 64};
  std::size_t image_side = 32;

  std::size_t feature_side() const {
    return image_side >> conv_channels.size();
  }
  std::size_t feature_dim() const { return conv_channels.back(); }

  void validate() const {
    if (conv_channels.empty()) {
      throw ConfigError("backbone: conv_channels must be nonempty");
    }
    if (image_side % (std::size_t{1} << conv_channels.size()) != 0 ||
        feature_side() == 0) {
      throw ConfigError("backbone: image_side " + std::to_string(image_side) +
                        " not divisible by 2^" +
                        std::to_string(conv_channels.size()));
    }
  }
};

struct TransformerConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t embed_dim = 128;
  std::size_t mlp_hidden = 0;  // 0 -> 4 * embed_dim

  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t resolved_mlp_hidden() const {
    return mlp_hidden == 0 ? 4 * embed_dim : mlp_hidden;
  }

  void validate() const {
    if (num_layers == 0 || num_heads == 0 || embed_dim == 0) {
      throw ConfigError("transformer: layers, heads and embed_dim must be positive");
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("transformer: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " +
                        std::to_string(num_heads));
    }
  }
};

struct HeadConfig {
  std::size_t bottleneck_dim = 256;
  std::size_t num_classes = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("head: need at least 2 classes");
    if (bottleneck_dim < 1) throw ConfigError("head: bottleneck_dim must be >= 1");
  }
};

struct ModelConfig {
  BackboneConfig backbone;
  bool use_transformer = true;
  TransformerConfig transformer;
  HeadConfig head;
  bool positional_embedding = false;

  std::size_t sequence_len() const {
    const std::size_t side = backbone.feature_side();
    return side * side;
  }

  void validate() const {
    backbone.validate();
    head.validate();
    if (use_transformer) transformer.validate();
  }
};

template <class S>
struct ModelOutputs {
  Tensor<S> features;    // B x d, post-BN bottleneck output
  Tensor<S> logits;      // B x K
  std::vector<Tensor<S>> attention;  // per layer: B x heads x u x u
  Tensor<S> feature_map;             // B x dhat x h x w (backbone output)
};

namespace detail {

enum class InitKind { kFanInUniform, kZero, kOne };

struct ParamSpec {
  const char* group;
  std::string name;
  Shape shape;
  bool buffer;
  InitKind init;
  std::size_t fan_in;
};

/// Walks the full parameter list of a model in registration order; shared
/// by initialization and checkpoint validation.
inline void for_each_param(const ModelConfig& cfg,
                           const std::function<void(const ParamSpec&)>& fn) {
  std::size_t cin = cfg.backbone.in_channels;
  for (std::size_t i = 0; i < cfg.backbone.conv_channels.size(); ++i) {
    const std::size_t cout = cfg.backbone.conv_channels[i];
    const std::string p = "conv" + std::to_string(i);
    const std::string b = "bn" + std::to_string(i);
    fn({group::kBackbone, p + ".weight", {cout, cin, 3, 3}, false,
        InitKind::kFanInUniform, cin * 9});
    fn({group::kBackbone, p + ".bias", {cout}, false, InitKind::kZero, 0});
    fn({group::kBackbone, b + ".gamma", {cout}, false, InitKind::kOne, 0});
    fn({group::kBackbone, b + ".beta", {cout}, false, InitKind::kZero, 0});
    fn({group::kBackbone, b + ".running_mean", {cout}, true, InitKind::kZero, 0});
    fn({group::kBackbone, b + ".running_var", {cout}, true, InitKind::kOne, 0});
    cin = cout;
  }
  if (cfg.use_transformer) {
    const std::size_t dhat = cfg.backbone.feature_dim();
    const std::size_t dbar = cfg.transformer.embed_dim;
    const std::size_t hid = cfg.transformer.resolved_mlp_hidden();
    fn({group::kTransformer, "proj.weight", {dhat, dbar}, false,
        InitKind::kFanInUniform, dhat});
    fn({group::kTransformer, "proj.bias", {dbar}, false, InitKind::kZero, 0});
    if (cfg.positional_embedding) {
      fn({group::kTransformer, "pos_embedding", {cfg.sequence_len(), dbar},
          false, InitKind::kZero, 0});
    }
    for (std::size_t l = 0; l < cfg.transformer.num_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      fn({group::kTransformer, p + "ln1.gain", {dbar}, false, InitKind::kOne, 0});
      fn({group::kTransformer, p + "ln1.bias", {dbar}, false, InitKind::kZero, 0});
      for (const char* m : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
        fn({group::kTransformer, p + m + ".weight", {dbar, dbar}, false,
            InitKind::kFanInUniform, dbar});
      }
      fn({group::kTransformer, p + "ln2.gain", {dbar}, false, InitKind::kOne, 0});
      fn({group::kTransformer, p + "ln2.bias", {dbar}, false, InitKind::kZero, 0});
      fn({group::kTransformer, p + "mlp.fc1.weight", {dbar, hid}, false,
          InitKind::kFanInUniform, dbar});
      fn({group::kTransformer, p + "mlp.fc1.bias", {hid}, false, InitKind::kZero, 0});
      fn({group::kTransformer, p + "mlp.fc2.weight", {hid, dbar}, false,
          InitKind::kFanInUniform, hid});
      fn({group::kTransformer, p + "mlp.fc2.bias", {dbar}, false, InitKind::kZero, 0});
    }
  }
  const std::size_t pooled =
      cfg.use_transformer ? cfg.transformer.embed_dim : cfg.backbone.feature_dim();
  const std::size_t d = cfg.head.bottleneck_dim;
  fn({group::kBottleneck, "fc.weight", {pooled, d}, false,
      InitKind::kFanInUniform, pooled});
  fn({group::kBottleneck, "fc.bias", {d}, false, InitKind::kZero, 0});
  fn({group::kBottleneck, "bn.gamma", {d}, false, InitKind::kOne, 0});
  fn({group::kBottleneck, "bn.beta", {d}, false, InitKind::kZero, 0});
  fn({group::kBottleneck, "bn.running_mean", {d}, true, InitKind::kZero, 0});
  fn({group::kBottleneck, "bn.running_var", {d}, true, InitKind::kOne, 0});
  fn({group::kClassifier, "fc.weight", {d, cfg.head.num_classes}, false,
      InitKind::kFanInUniform, d});
  fn({group::kClassifier, "fc.bias", {cfg.head.num_classes}, false,
      InitKind::kZero, 0});
}

}  // namespace detail

/// Feature extractor (backbone -> optional transformer -> FC+BN bottleneck)
/// plus linear classifier. The bottleneck output is the d-dimensional
/// feature the pseudo-label machinery clusters; the classifier maps it to
/// class logits.
template <class S>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    detail::for_each_param(cfg_, [&](const detail::ParamSpec& spec) {
      Tensor<S> t = Tensor<S>::zeros(spec.shape);
      switch (spec.init) {
        case detail::InitKind::kZero:
          break;
        case detail::InitKind::kOne:
          std::fill(t.values().begin(), t.values().end(), S(1));
          break;
        case detail::InitKind::kFanInUniform: {
          const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
          for (auto& v : t.values()) {
            v = static_cast<S>(rng.uniform(-bound, bound));
          }
          break;
        }
      }
      params_.add(spec.group, spec.name, std::move(t), spec.buffer);
    });
  }

  Model(ModelConfig cfg, ModelParams<S> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    std::size_t expected = 0;
    detail::for_each_param(cfg_, [&](const detail::ParamSpec& spec) {
      ++expected;
      if (!params_.has(spec.group, spec.name)) {
        throw FormatError("model manifest: missing tensor " +
                          std::string(spec.group) + "/" + spec.name);
      }
      if (params_.at(spec.group, spec.name).shape() != spec.shape) {
        throw FormatError("model manifest: shape mismatch on " +
                          std::string(spec.group) + "/" + spec.name);
      }
    });
    if (expected != params_.entries().size()) {
      throw FormatError("model manifest: unexpected extra tensors");
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ModelParams<S>& params() { return params_; }
  const ModelParams<S>& params() const { return params_; }

  Model clone() const { return Model(cfg_, params_.clone()); }

  template <class U>
  Model<U> cast() const {
    return Model<U>(cfg_, params_.template cast<U>());
  }

  void freeze_classifier() { params_.freeze(group::kClassifier); }

  /// Marks every tensor gradient-free; used for the EMA teacher.
  void detach_all() {
    for (auto& e : params_.entries()) e.tensor.set_requires_grad(false);
  }

  /// images [B, C, S, S] -> feature map [B, dhat, h, w].
  Tensor<S> backbone_forward(const Tensor<S>& images, bool training) {
    check_initialized();
    const auto& bb = cfg_.backbone;
    if (images.rank() != 4 || images.dim(1) != bb.in_channels ||
        images.dim(2) != bb.image_side || images.dim(3) != bb.image_side) {
      throw ShapeError("backbone: expected [B," +
                       std::to_string(bb.in_channels) + "," +
                       std::to_string(bb.image_side) + "," +
                       std::to_string(bb.image_side) + "], got " +
                       shape_str(images.shape()));
    }
    Tensor<S> x = images;
    for (std::size_t i = 0; i < bb.conv_channels.size(); ++i) {
      const std::string p = "conv" + std::to_string(i);
      const std::string b = "bn" + std::to_string(i);
      x = conv2d(x, params_.at(group::kBackbone, p + ".weight"),
                 params_.at(group::kBackbone, p + ".bias"), 1, 1);
      x = batch_norm(x, params_.at(group::kBackbone, b + ".gamma"),
                     params_.at(group::kBackbone, b + ".beta"),
                     params_.at(group::kBackbone, b + ".running_mean"),
                     params_.at(group::kBackbone, b + ".running_var"),
                     training);
      x = relu(x);
      x = avg_pool2d(x, 2, 2);
    }
    return x;
  }

  /// One pre-norm multi-head self-attention block with residual:
  /// z + concat(head_1(LN(z)), ..., head_m(LN(z))) * W_out.
  /// attention_out, when given, receives the [B, m, u, u] softmax maps.
  Tensor<S> msa_layer(const Tensor<S>& z, std::size_t layer,
                      Tensor<S>* attention_out = nullptr) {
    check_initialized();
    const auto& tc = cfg_.transformer;
    if (z.rank() != 3 || z.dim(2) != tc.embed_dim) {
      throw ShapeError("msa: expected [B,u," + std::to_string(tc.embed_dim) +
                       "], got " + shape_str(z.shape()));
    }
    tc.validate();
    const std::size_t b = z.dim(0), u = z.dim(1), dbar = tc.embed_dim;
    const std::size_t m = tc.num_heads, hd = tc.head_dim();
    const std::string p = "l" + std::to_string(layer) + ".";

    Tensor<S> ln = layer_norm(z, params_.at(group::kTransformer, p + "ln1.gain"),
                              params_.at(group::kTransformer, p + "ln1.bias"));
    Tensor<S> flat = reshape(ln, {b * u, dbar});
    auto heads_of = [&](const char* which) {
      Tensor<S> proj =
          matmul(flat, params_.at(group::kTransformer, p + which));
      // [B*u, dbar] -> [B, u, m, hd] -> [B, m, u, hd] -> [B*m, u, hd]
      return reshape(transpose(reshape(proj, {b, u, m, hd}), {0, 2, 1, 3}),
                     {b * m, u, hd});
    };
    Tensor<S> q = heads_of("attn.q.weight");
    Tensor<S> k = heads_of("attn.k.weight");
    Tensor<S> v = heads_of("attn.v.weight");

    Tensor<S> scores =
        scale(batched_matmul(q, transpose(k, {0, 2, 1})),
              1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor<S> attn = softmax(scores, 2);  // rows over keys
    if (attention_out) *attention_out = reshape(attn, {b, m, u, u});

    Tensor<S> ctx = batched_matmul(attn, v);  // [B*m, u, hd]
    Tensor<S> merged = reshape(
        transpose(reshape(ctx, {b, m, u, hd}), {0, 2, 1, 3}), {b * u, m * hd});
    Tensor<S> out =
        matmul(merged, params_.at(group::kTransformer, p + "attn.out.weight"));
    return add(z, reshape(out, {b, u, dbar}));
  }

  /// MLP(LN(MSA(z))) + MSA(z)
  Tensor<S> transformer_layer(const Tensor<S>& z, std::size_t layer,
                              Tensor<S>* attention_out = nullptr) {
    const std::size_t b = z.dim(0), u = z.dim(1);
    const std::size_t dbar = cfg_.transformer.embed_dim;
    const std::size_t hid = cfg_.transformer.resolved_mlp_hidden();
    const std::string p = "l" + std::to_string(layer) + ".";

    Tensor<S> msa = msa_layer(z, layer, attention_out);
    Tensor<S> y = layer_norm(msa, params_.at(group::kTransformer, p + "ln2.gain"),
                             params_.at(group::kTransformer, p + "ln2.bias"));
    Tensor<S> h = bias_add(
        matmul(reshape(y, {b * u, dbar}),
               params_.at(group::kTransformer, p + "mlp.fc1.weight")),
        params_.at(group::kTransformer, p + "mlp.fc1.bias"));
    h = gelu(h);
    h = bias_add(matmul(h, params_.at(group::kTransformer, p + "mlp.fc2.weight")),
                 params_.at(group::kTransformer, p + "mlp.fc2.bias"));
    (void)hid;
    return add(reshape(h, {b, u, dbar}), msa);
  }

  /// Full forward pass. Returns post-BN bottleneck features, classifier
  /// logits, per-layer attention maps (empty for the CNN-only model) and
  /// the raw backbone feature map.
  ModelOutputs<S> extract_features(const Tensor<S>& images, bool training) {
    check_initialized();
    ModelOutputs<S> out;
    Tensor<S> fmap = backbone_forward(images, training);
    out.feature_map = fmap;
    const std::size_t b = fmap.dim(0);

    Tensor<S> pooled;
    if (cfg_.use_transformer) {
      const std::size_t u = cfg_.sequence_len();
      const std::size_t dhat = cfg_.backbone.feature_dim();
      const std::size_t dbar = cfg_.transformer.embed_dim;
      Tensor<S> seq = feature_map_to_sequence(fmap);
      Tensor<S> z = bias_add(matmul(reshape(seq, {b * u, dhat}),
                                    params_.at(group::kTransformer, "proj.weight")),
                             params_.at(group::kTransformer, "proj.bias"));
      z = reshape(z, {b, u, dbar});
      if (cfg_.positional_embedding) {
        // broadcast the [u, dbar] table over the batch
        Tensor<S> pos = params_.at(group::kTransformer, "pos_embedding");
        z = reshape(bias_add(reshape(z, {b, u * dbar}),
                             reshape(pos, {u * dbar})),
                    {b, u, dbar});
      }
      out.attention.reserve(cfg_.transformer.num_layers);
      for (std::size_t l = 0; l < cfg_.transformer.num_layers; ++l) {
        Tensor<S> attn;
        z = transformer_layer(z, l, &attn);
        out.attention.push_back(attn);
      }
      pooled = mean_axis(z, 1);  // average pool over the sequence
    } else {
      pooled = global_avg_pool(fmap);
    }

    Tensor<S> pre = bias_add(matmul(pooled, params_.at(group::kBottleneck, "fc.weight")),
                             params_.at(group::kBottleneck, "fc.bias"));
    out.features = batch_norm(pre, params_.at(group::kBottleneck, "bn.gamma"),
                              params_.at(group::kBottleneck, "bn.beta"),
                              params_.at(group::kBottleneck, "bn.running_mean"),
                              params_.at(group::kBottleneck, "bn.running_var"),
                              training);
    out.logits = bias_add(matmul(out.features, params_.at(group::kClassifier, "fc.weight")),
                          params_.at(group::kClassifier, "fc.bias"));
    return out;
  }

 private:
  void check_initialized() const {
    if (params_.entries().empty()) {
      throw ContractError("model: parameters not initialized");
    }
  }

  ModelConfig cfg_;
  ModelParams<S> params_;
};

/// [B, dhat, h, w] -> [B, h*w, dhat]; sequence row (i*w + j) is the feature
/// vector of grid cell (i, j). Inverse: transpose back.
template <class S>
Tensor<S> feature_map_to_sequence(const Tensor<S>& fmap) {
  if (fmap.rank() != 4) {
    throw ShapeError("to_sequence: expected 4-D feature map, got " +
                     shape_str(fmap.shape()));
  }
  const std::size_t b = fmap.dim(0), c = fmap.dim(1);
  const std::size_t u = fmap.dim(2) * fmap.dim(3);
  return reshape(transpose(fmap, {0, 2, 3, 1}), {b, u, c});
}

}  // namespace sfda
