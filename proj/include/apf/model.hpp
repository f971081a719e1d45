// Copyright 2026 The APF Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "apf/common.hpp"
#include "apf/rng.hpp"
#include "apf/tensor.hpp"

namespace apf {

/// Transformer geometry plus adapter hyperparameters. The frozen stack is
/// fixed by (layers, dim, heads, mlp_ratio, max_tokens); adapters add a
/// bottleneck of width adapter_dim scaled by adapter_scale on every block.
struct BackboneConfig {
  Index layers = 12;
  Index dim = 768;
  Index heads = 12;
  Index mlp_ratio = 4;
  Index adapter_dim = 64;
  float adapter_scale = 0.1f;
  bool use_pos_embed = true;
  Index max_tokens = 197;

  void validate() const {
    if (layers < 1) throw ConfigError("backbone needs at least one block");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("width " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (adapter_dim < 1 || adapter_dim >= dim)
      throw ConfigError("adapter width " + std::to_string(adapter_dim) +
                        " outside [1," + std::to_string(dim) + ")");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be positive");
    if (max_tokens < 2) throw ConfigError("max_tokens must allow at least one token plus cls");
  }

  /// Test-scale profile.
  static BackboneConfig tiny() {
    BackboneConfig c;
    c.layers = 4;
    c.dim = 64;
    c.heads = 4;
    c.adapter_dim = 8;
    return c;
  }

  /// ViT-Base geometry.
  static BackboneConfig vit_b() { return BackboneConfig{}; }
};

/// Shared per-point MLP (widths input -> 64 -> 128 -> dim) pooled by max
/// over each neighborhood. Frozen entirely in random-embedding mode.
template <typename Scalar>
struct PointEmbedNet {
  Tensor<Scalar> w1, b1, w2, b2, w3, b3;

  Index input_width() const { return w1.rows(); }
  Index output_width() const { return w3.cols(); }
  bool trainable() const { return w1.requires_grad(); }

  std::vector<std::pair<std::string, Tensor<Scalar>*>> named(const std::string& prefix) {
    return {{prefix + ".w1", &w1}, {prefix + ".b1", &b1}, {prefix + ".w2", &w2},
            {prefix + ".b2", &b2}, {prefix + ".w3", &w3}, {prefix + ".b3", &b3}};
  }
};

/// One frozen transformer block: pre-norm attention and MLP.
template <typename Scalar>
struct BlockWeights {
  Tensor<Scalar> ln1_gain, ln1_bias;
  Tensor<Scalar> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Scalar> ln2_gain, ln2_bias;
  Tensor<Scalar> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  std::vector<std::pair<std::string, Tensor<Scalar>*>> named(const std::string& prefix) {
    return {{prefix + ".ln1.gain", &ln1_gain}, {prefix + ".ln1.bias", &ln1_bias},
            {prefix + ".attn.wq", &wq},        {prefix + ".attn.bq", &bq},
            {prefix + ".attn.wk", &wk},        {prefix + ".attn.bk", &bk},
            {prefix + ".attn.wv", &wv},        {prefix + ".attn.bv", &bv},
            {prefix + ".attn.wo", &wo},        {prefix + ".attn.bo", &bo},
            {prefix + ".ln2.gain", &ln2_gain}, {prefix + ".ln2.bias", &ln2_bias},
            {prefix + ".mlp.w1", &mlp_w1},     {prefix + ".mlp.b1", &mlp_b1},
            {prefix + ".mlp.w2", &mlp_w2},     {prefix + ".mlp.b2", &mlp_b2}};
  }
};

/// Trainable bottleneck branch attached to one block. The up-projection
/// starts at zero so training begins exactly at the frozen model.
template <typename Scalar>
struct AdapterParams {
  Tensor<Scalar> ln_gain, ln_bias;
  Tensor<Scalar> enc;  // dim x adapter_dim
  Tensor<Scalar> dec;  // adapter_dim x dim

  std::vector<std::pair<std::string, Tensor<Scalar>*>> named(const std::string& prefix) {
    return {{prefix + ".ln.gain", &ln_gain},
            {prefix + ".ln.bias", &ln_bias},
            {prefix + ".enc", &enc},
            {prefix + ".dec", &dec}};
  }
};

/// The frozen stack with its class token, positional table, and per-block
/// adapters. `adapters` is empty when the adapter branch is disabled.
template <typename Scalar>
struct Backbone {
  BackboneConfig config;
  Tensor<Scalar> cls_token;  // 1 x dim
  Tensor<Scalar> pos_embed;  // max_tokens x dim
  std::vector<BlockWeights<Scalar>> blocks;
  std::vector<AdapterParams<Scalar>> adapters;

  bool adapters_enabled() const { return !adapters.empty(); }
};

template <typename Scalar>
struct ClassifierHead {
  Tensor<Scalar> weight;  // dim x num_classes
  Tensor<Scalar> bias;    // 1 x num_classes

  Index num_classes() const { return weight.cols(); }
};

/// Dense per-point head. Tap features from the listed blocks are fused per
/// centroid, spread to all points by nearest-centroid interpolation, joined
/// with the global token mean and raw coordinates, then classified per
/// point.
template <typename Scalar>
struct SegHead {
  std::vector<Index> tap_blocks;  // 1-based block indices, strictly increasing
  Tensor<Scalar> fuse_w, fuse_b;  // (taps*dim) x fuse -> fuse
  Tensor<Scalar> pp_w1, pp_b1;    // (fuse + dim + 3) x hidden
  Tensor<Scalar> pp_w2, pp_b2;    // hidden x num_parts

  Index num_parts() const { return pp_w2.cols(); }
};

template <typename Scalar>
struct Model {
  BackboneConfig config;
  PointEmbedNet<Scalar> embed;
  Backbone<Scalar> backbone;
  std::optional<ClassifierHead<Scalar>> classifier;
  std::optional<SegHead<Scalar>> seg;
};

// ---- initialization ---------------------------------------------------------

/// Embedding MLP with Kaiming-uniform weights and zero biases. Frozen when
/// `trainable` is false (the random-embedding ablation).
template <typename Scalar>
PointEmbedNet<Scalar> init_point_embed(std::uint64_t seed, Index input_width, Index dim,
                                       bool trainable) {
  if (input_width < 3) throw ConfigError("embedding input width must cover coordinates");
  if (dim < 1) throw ConfigError("embedding output width must be positive");
  Rng rng(derive_seed(seed, "embed"));
  PointEmbedNet<Scalar> net;
  net.w1 = Tensor<Scalar>::kaiming_uniform({input_width, 64}, input_width, rng);
  net.b1 = Tensor<Scalar>::zeros({Index(1), 64});
  net.w2 = Tensor<Scalar>::kaiming_uniform({Index(64), 128}, 64, rng);
  net.b2 = Tensor<Scalar>::zeros({Index(1), 128});
  net.w3 = Tensor<Scalar>::kaiming_uniform({Index(128), dim}, 128, rng);
  net.b3 = Tensor<Scalar>::zeros({Index(1), dim});
  for (auto& [name, t] : net.named("")) t->set_requires_grad(trainable);
  return net;
}

/// Frozen-random embedding variant.
template <typename Scalar>
PointEmbedNet<Scalar> init_random_frozen(std::uint64_t seed, Index input_width, Index dim) {
  return init_point_embed<Scalar>(seed, input_width, dim, false);
}

/// Frozen backbone drawn from a seeded generator at customary scales:
/// truncated normal (sigma 0.02) projections, unit/zero layer norms, and a
/// truncated-normal class token and positional table.
template <typename Scalar>
Backbone<Scalar> synth_pretrained(std::uint64_t seed, const BackboneConfig& config) {
  config.validate();
  Rng rng(derive_seed(seed, "backbone"));
  const Index d = config.dim;
  const Index h = config.mlp_ratio * d;
  Backbone<Scalar> bb;
  bb.config = config;
  bb.cls_token = Tensor<Scalar>::truncated_normal({Index(1), d}, 0.02, rng);
  bb.pos_embed = Tensor<Scalar>::truncated_normal({config.max_tokens, d}, 0.02, rng);
  bb.blocks.resize(static_cast<std::size_t>(config.layers));
  for (auto& blk : bb.blocks) {
    blk.ln1_gain = Tensor<Scalar>::ones({Index(1), d});
    blk.ln1_bias = Tensor<Scalar>::zeros({Index(1), d});
    blk.wq = Tensor<Scalar>::truncated_normal({d, d}, 0.02, rng);
    blk.bq = Tensor<Scalar>::zeros({Index(1), d});
    blk.wk = Tensor<Scalar>::truncated_normal({d, d}, 0.02, rng);
    blk.bk = Tensor<Scalar>::zeros({Index(1), d});
    blk.wv = Tensor<Scalar>::truncated_normal({d, d}, 0.02, rng);
    blk.bv = Tensor<Scalar>::zeros({Index(1), d});
    blk.wo = Tensor<Scalar>::truncated_normal({d, d}, 0.02, rng);
    blk.bo = Tensor<Scalar>::zeros({Index(1), d});
    blk.ln2_gain = Tensor<Scalar>::ones({Index(1), d});
    blk.ln2_bias = Tensor<Scalar>::zeros({Index(1), d});
    blk.mlp_w1 = Tensor<Scalar>::truncated_normal({d, h}, 0.02, rng);
    blk.mlp_b1 = Tensor<Scalar>::zeros({Index(1), h});
    blk.mlp_w2 = Tensor<Scalar>::truncated_normal({h, d}, 0.02, rng);
    blk.mlp_b2 = Tensor<Scalar>::zeros({Index(1), d});
  }
  return bb;
}

/// Fresh adapters: Kaiming-uniform down-projection, zero up-projection, own
/// unit/zero layer norm, everything trainable.
template <typename Scalar>
std::vector<AdapterParams<Scalar>> init_adapters(std::uint64_t seed,
                                                 const BackboneConfig& config) {
  config.validate();
  Rng rng(derive_seed(seed, "adapters"));
  std::vector<AdapterParams<Scalar>> out(static_cast<std::size_t>(config.layers));
  for (auto& a : out) {
    a.ln_gain = Tensor<Scalar>::ones({Index(1), config.dim});
    a.ln_bias = Tensor<Scalar>::zeros({Index(1), config.dim});
    a.enc = Tensor<Scalar>::kaiming_uniform({config.dim, config.adapter_dim}, config.dim, rng);
    a.dec = Tensor<Scalar>::zeros({config.adapter_dim, config.dim});
    for (auto& [name, t] : a.named("")) t->set_requires_grad(true);
  }
  return out;
}

template <typename Scalar>
ClassifierHead<Scalar> init_classifier(std::uint64_t seed, Index dim, Index num_classes) {
  if (num_classes < 2) throw ConfigError("classifier needs at least two classes");
  Rng rng(derive_seed(seed, "classifier"));
  ClassifierHead<Scalar> head;
  head.weight = Tensor<Scalar>::kaiming_uniform({dim, num_classes}, dim, rng);
  head.bias = Tensor<Scalar>::zeros({Index(1), num_classes});
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  return head;
}

/// Default taps at thirds of the stack depth: L/3, 2L/3, L (1-based,
/// deduplicated for very shallow stacks).
inline std::vector<Index> default_tap_blocks(Index layers) {
  std::vector<Index> taps;
  for (Index t : {(layers + 2) / 3, (2 * layers + 2) / 3, layers})
    if (taps.empty() || taps.back() < t) taps.push_back(t);
  return taps;
}

template <typename Scalar>
SegHead<Scalar> init_seg_head(std::uint64_t seed, const BackboneConfig& config,
                              Index num_parts, std::vector<Index> tap_blocks = {},
                              Index fuse_width = 0, Index hidden_width = 128) {
  config.validate();
  if (num_parts < 2) throw ConfigError("segmentation needs at least two part labels");
  if (tap_blocks.empty()) tap_blocks = default_tap_blocks(config.layers);
  for (std::size_t i = 0; i < tap_blocks.size(); ++i) {
    if (tap_blocks[i] < 1 || tap_blocks[i] > config.layers)
      throw ConfigError("tap block " + std::to_string(tap_blocks[i]) + " outside [1," +
                        std::to_string(config.layers) + "]");
    if (i > 0 && tap_blocks[i] <= tap_blocks[i - 1])
      throw ConfigError("tap blocks must be strictly increasing");
  }
  if (fuse_width < 1) fuse_width = config.dim;
  Rng rng(derive_seed(seed, "seg"));
  const Index tap_width = static_cast<Index>(tap_blocks.size()) * config.dim;
  const Index pp_in = fuse_width + config.dim + 3;
  SegHead<Scalar> head;
  head.tap_blocks = std::move(tap_blocks);
  head.fuse_w = Tensor<Scalar>::kaiming_uniform({tap_width, fuse_width}, tap_width, rng);
  head.fuse_b = Tensor<Scalar>::zeros({Index(1), fuse_width});
  head.pp_w1 = Tensor<Scalar>::kaiming_uniform({pp_in, hidden_width}, pp_in, rng);
  head.pp_b1 = Tensor<Scalar>::zeros({Index(1), hidden_width});
  head.pp_w2 = Tensor<Scalar>::kaiming_uniform({hidden_width, num_parts}, hidden_width, rng);
  head.pp_b2 = Tensor<Scalar>::zeros({Index(1), num_parts});
  for (Tensor<Scalar>* t : {&head.fuse_w, &head.fuse_b, &head.pp_w1, &head.pp_b1, &head.pp_w2,
                            &head.pp_b2})
    t->set_requires_grad(true);
  return head;
}

// ---- assembly ----------------------------------------------------------------

struct ModelOptions {
  Index num_classes = 0;       // classifier head when >= 2
  Index num_parts = 0;         // segmentation head when >= 2
  Index feature_width = 0;     // per-point input features C
  bool random_embedding = false;
  bool adapters = true;
};

template <typename Scalar>
Model<Scalar> make_model(std::uint64_t seed, const BackboneConfig& config,
                         const ModelOptions& opt) {
  config.validate();
  if (opt.num_classes < 2 && opt.num_parts < 2)
    throw ConfigError("model needs a classification or segmentation head");
  Model<Scalar> m;
  m.config = config;
  m.embed = init_point_embed<Scalar>(seed, 3 + opt.feature_width + 3, config.dim,
                                     !opt.random_embedding);
  m.backbone = synth_pretrained<Scalar>(seed, config);
  if (opt.adapters) m.backbone.adapters = init_adapters<Scalar>(seed, config);
  if (opt.num_classes >= 2)
    m.classifier = init_classifier<Scalar>(seed, config.dim, opt.num_classes);
  if (opt.num_parts >= 2) m.seg = init_seg_head<Scalar>(seed, config, opt.num_parts);
  return m;
}

/// Canonical (name, tensor) enumeration; the checkpoint writer, optimizer,
/// and audits all walk this order.
template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>*>> named_tensors(Model<Scalar>& m) {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> out = m.embed.named("embed");
  out.push_back({"backbone.cls_token", &m.backbone.cls_token});
  out.push_back({"backbone.pos_embed", &m.backbone.pos_embed});
  for (std::size_t i = 0; i < m.backbone.blocks.size(); ++i)
    for (auto& nt : m.backbone.blocks[i].named("backbone.blocks." + std::to_string(i)))
      out.push_back(nt);
  for (std::size_t i = 0; i < m.backbone.adapters.size(); ++i)
    for (auto& nt : m.backbone.adapters[i].named("backbone.adapters." + std::to_string(i)))
      out.push_back(nt);
  if (m.classifier) {
    out.push_back({"heads.classifier.weight", &m.classifier->weight});
    out.push_back({"heads.classifier.bias", &m.classifier->bias});
  }
  if (m.seg) {
    out.push_back({"heads.seg.fuse.weight", &m.seg->fuse_w});
    out.push_back({"heads.seg.fuse.bias", &m.seg->fuse_b});
    out.push_back({"heads.seg.point.w1", &m.seg->pp_w1});
    out.push_back({"heads.seg.point.b1", &m.seg->pp_b1});
    out.push_back({"heads.seg.point.w2", &m.seg->pp_w2});
    out.push_back({"heads.seg.point.b2", &m.seg->pp_b2});
  }
  return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, Tensor<Scalar>*>> trainable_tensors(Model<Scalar>& m) {
  std::vector<std::pair<std::string, Tensor<Scalar>*>> out;
  for (auto& nt : named_tensors(m))
    if (nt.second->requires_grad()) out.push_back(nt);
  return out;
}

}  // namespace apf
