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

#include <algorithm>
#include <cmath>
#include <vector>

#include "apf/geometry.hpp"
#include "apf/graph.hpp"
#include "apf/model.hpp"

namespace apf {

// ---- input featurization -----------------------------------------------------

/// Per-member embedding rows, one group after another: absolute
/// coordinates, input features, and the offset from the group centroid.
/// Row i*k+j describes member j of group i.
template <typename Scalar>
Tensor<Scalar> featurize_groups(const PointCloud& cloud, const GroupedPoints& grouped) {
  cloud.validate();
  const Index n_s = grouped.group_count();
  if (n_s == 0) throw InvalidArgument("featurize_groups: no groups");
  const Index k = static_cast<Index>(grouped.groups[0].size());
  const Index c = cloud.feature_width();
  Tensor<Scalar> out = Tensor<Scalar>::zeros({n_s * k, 3 + c + 3});
  for (Index i = 0; i < n_s; ++i) {
    const auto& group = grouped.groups[static_cast<std::size_t>(i)];
    if (static_cast<Index>(group.size()) != k)
      throw InvalidArgument("featurize_groups: ragged group sizes");
    const Index ctr = grouped.centroid_indices[static_cast<std::size_t>(i)];
    for (Index j = 0; j < k; ++j) {
      const Index m = group[static_cast<std::size_t>(j)];
      const Index row = i * k + j;
      for (Index a = 0; a < 3; ++a) {
        out.at(row, a) = static_cast<Scalar>(cloud.points(m, a));
        out.at(row, 3 + c + a) =
            static_cast<Scalar>(cloud.points(m, a)) - static_cast<Scalar>(cloud.points(ctr, a));
      }
      for (Index a = 0; a < c; ++a)
        out.at(row, 3 + a) = static_cast<Scalar>(cloud.features(m, a));
    }
  }
  return out;
}

/// Inverse-distance weights over the three nearest centroids of every
/// point (all centroids when fewer than three exist). Each row is
/// non-negative and sums to one; distance ties prefer the earlier
/// centroid.
template <typename Scalar>
Tensor<Scalar> build_interpolation(const PointCloud& cloud, const GroupedPoints& grouped) {
  const Index n = cloud.size();
  const Index n_s = grouped.group_count();
  if (n_s == 0) throw InvalidArgument("build_interpolation: no centroids");
  const Index use = std::min<Index>(3, n_s);
  Tensor<Scalar> w = Tensor<Scalar>::zeros({n, n_s});
  std::vector<std::pair<double, Index>> dist(static_cast<std::size_t>(n_s));
  for (Index p = 0; p < n; ++p) {
    for (Index i = 0; i < n_s; ++i) {
      const Index ctr = grouped.centroid_indices[static_cast<std::size_t>(i)];
      double d2 = 0.0;
      for (Index a = 0; a < 3; ++a) {
        const double diff =
            static_cast<double>(cloud.points(p, a)) - static_cast<double>(cloud.points(ctr, a));
        d2 += diff * diff;
      }
      dist[static_cast<std::size_t>(i)] = {d2, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + use, dist.end());
    double total = 0.0;
    for (Index j = 0; j < use; ++j) total += 1.0 / (dist[static_cast<std::size_t>(j)].first + 1e-8);
    for (Index j = 0; j < use; ++j) {
      const auto& [d2, idx] = dist[static_cast<std::size_t>(j)];
      w.at(p, idx) = static_cast<Scalar>((1.0 / (d2 + 1e-8)) / total);
    }
  }
  return w;
}

// ---- network builders ----------------------------------------------------------

/// Shared MLP over member rows followed by a max over each group:
/// one token per group, in centroid-list order.
template <typename Scalar>
typename Graph<Scalar>::Value point_embed_forward(Graph<Scalar>& g, PointEmbedNet<Scalar>& net,
                                                  typename Graph<Scalar>::Value member_rows,
                                                  Index group_count, Index group_size) {
  using V = typename Graph<Scalar>::Value;
  const V h1 = g.relu(g.add(g.matmul(member_rows, g.leaf(net.w1)), g.leaf(net.b1)));
  const V h2 = g.relu(g.add(g.matmul(h1, g.leaf(net.w2)), g.leaf(net.b2)));
  const V h3 = g.add(g.matmul(h2, g.leaf(net.w3)), g.leaf(net.b3));
  std::vector<V> tokens;
  tokens.reserve(static_cast<std::size_t>(group_count));
  std::vector<Index> rows(static_cast<std::size_t>(group_size));
  for (Index i = 0; i < group_count; ++i) {
    for (Index j = 0; j < group_size; ++j) rows[static_cast<std::size_t>(j)] = i * group_size + j;
    tokens.push_back(g.max_over_axis(g.embedding_lookup(h3, rows)));
  }
  return g.concat_rows(tokens);
}

/// Multi-head self-attention with a learned output projection. Scores are
/// scaled by 1/sqrt(head width) before the row softmax.
template <typename Scalar>
typename Graph<Scalar>::Value msa_forward(Graph<Scalar>& g, BlockWeights<Scalar>& w, Index heads,
                                          typename Graph<Scalar>::Value x) {
  using V = typename Graph<Scalar>::Value;
  const Index d = w.wq.cols();
  if (heads < 1 || d % heads != 0)
    throw InvalidArgument("attention width not divisible by head count");
  const Index dh = d / heads;
  const Scalar inv_scale = Scalar(1) / static_cast<Scalar>(std::sqrt(static_cast<double>(dh)));
  const V q = g.add(g.matmul(x, g.leaf(w.wq)), g.leaf(w.bq));
  const V k = g.add(g.matmul(x, g.leaf(w.wk)), g.leaf(w.bk));
  const V v = g.add(g.matmul(x, g.leaf(w.wv)), g.leaf(w.bv));
  std::vector<V> ctx;
  ctx.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    const V qh = g.slice_lastdim(q, h * dh, dh);
    const V kh = g.slice_lastdim(k, h * dh, dh);
    const V vh = g.slice_lastdim(v, h * dh, dh);
    const V scores = g.scalar_mul(g.matmul(qh, kh, false, true), inv_scale);
    ctx.push_back(g.matmul(g.row_softmax(scores), vh));
  }
  return g.add(g.matmul(g.concat_lastdim(ctx), g.leaf(w.wo)), g.leaf(w.bo));
}

/// Pre-norm transformer block: x~ = x + MSA(LN1(x)); out = x~ + MLP(LN2(x~)).
template <typename Scalar>
typename Graph<Scalar>::Value vanilla_block(Graph<Scalar>& g, BlockWeights<Scalar>& w,
                                            Index heads, typename Graph<Scalar>::Value x) {
  using V = typename Graph<Scalar>::Value;
  const V xt = g.add(x, msa_forward(g, w, heads, g.layer_norm(x, g.leaf(w.ln1_gain),
                                                              g.leaf(w.ln1_bias))));
  const V norm2 = g.layer_norm(xt, g.leaf(w.ln2_gain), g.leaf(w.ln2_bias));
  const V mlp = g.add(g.matmul(g.gelu(g.add(g.matmul(norm2, g.leaf(w.mlp_w1)), g.leaf(w.mlp_b1))),
                               g.leaf(w.mlp_w2)),
                      g.leaf(w.mlp_b2));
  return g.add(xt, mlp);
}

/// Adapter variant of the block. The bottleneck branch reads the
/// post-attention state through its own layer norm and joins the output
/// sum scaled by `scale`; with a zero up-projection the block computes
/// exactly what vanilla_block computes.
template <typename Scalar>
typename Graph<Scalar>::Value pointformer_block(Graph<Scalar>& g, BlockWeights<Scalar>& w,
                                                AdapterParams<Scalar>& a, Scalar scale,
                                                Index heads, typename Graph<Scalar>::Value x) {
  using V = typename Graph<Scalar>::Value;
  const V xt = g.add(x, msa_forward(g, w, heads, g.layer_norm(x, g.leaf(w.ln1_gain),
                                                              g.leaf(w.ln1_bias))));
  const V bottleneck = g.matmul(
      g.relu(g.matmul(g.layer_norm(xt, g.leaf(a.ln_gain), g.leaf(a.ln_bias)), g.leaf(a.enc))),
      g.leaf(a.dec));
  const V norm2 = g.layer_norm(xt, g.leaf(w.ln2_gain), g.leaf(w.ln2_bias));
  const V mlp = g.add(g.matmul(g.gelu(g.add(g.matmul(norm2, g.leaf(w.mlp_w1)), g.leaf(w.mlp_b1))),
                               g.leaf(w.mlp_w2)),
                      g.leaf(w.mlp_b2));
  return g.add(g.add(mlp, g.scalar_mul(bottleneck, scale)), xt);
}

template <typename Scalar>
struct EncodeOut {
  typename Graph<Scalar>::Value final_seq;
  std::vector<typename Graph<Scalar>::Value> block_seqs;
};

/// Full stack: prepend the class token, add positional rows 0..N, then run
/// every block (adapter form when adapters are present). Per-block outputs
/// are captured when `capture` is set.
template <typename Scalar>
EncodeOut<Scalar> encode(Graph<Scalar>& g, Backbone<Scalar>& bb,
                         typename Graph<Scalar>::Value tokens, Index token_count,
                         bool capture = false) {
  using V = typename Graph<Scalar>::Value;
  const Index total = token_count + 1;
  if (bb.config.use_pos_embed && total > bb.config.max_tokens)
    throw ConfigError("sequence of " + std::to_string(total) + " tokens exceeds positional table of " +
                      std::to_string(bb.config.max_tokens));
  V x = g.concat_rows({g.leaf(bb.cls_token), tokens});
  if (bb.config.use_pos_embed) {
    std::vector<Index> idx(static_cast<std::size_t>(total));
    for (Index i = 0; i < total; ++i) idx[static_cast<std::size_t>(i)] = i;
    x = g.add(x, g.embedding_lookup(g.leaf(bb.pos_embed), idx));
  }
  EncodeOut<Scalar> out;
  if (capture) out.block_seqs.reserve(bb.blocks.size());
  for (std::size_t i = 0; i < bb.blocks.size(); ++i) {
    if (bb.adapters_enabled())
      x = pointformer_block(g, bb.blocks[i], bb.adapters[i],
                            static_cast<Scalar>(bb.config.adapter_scale), bb.config.heads, x);
    else
      x = vanilla_block(g, bb.blocks[i], bb.config.heads, x);
    if (capture) out.block_seqs.push_back(x);
  }
  out.final_seq = x;
  return out;
}

template <typename Scalar>
typename Graph<Scalar>::Value classify_logits(Graph<Scalar>& g, ClassifierHead<Scalar>& head,
                                              typename Graph<Scalar>::Value cls_row) {
  return g.add(g.matmul(cls_row, g.leaf(head.weight)), g.leaf(head.bias));
}

// ---- whole-model forwards ------------------------------------------------------

/// Geometry-derived inputs for one cloud, computed once and reused across
/// epochs. `order` is the sequence permutation (identity when the
/// sequencer is disabled); `unperm` maps centroid list position to its row
/// in the encoded sequence (class token at row 0).
struct SampleInputs {
  Tensor<float> member_rows;         // (N_s*k) x (3+C+3)
  std::vector<Index> order;          // length N_s
  std::vector<Index> unperm;         // length N_s, values 1..N_s
  Index group_count = 0;
  Index group_size = 0;
};

inline SampleInputs prepare_inputs(const PointCloud& cloud, const GroupedPoints& grouped,
                                   bool sequencer_on) {
  SampleInputs s;
  s.member_rows = featurize_groups<float>(cloud, grouped);
  s.group_count = grouped.group_count();
  s.group_size = s.group_count > 0 ? static_cast<Index>(grouped.groups[0].size()) : 0;
  if (sequencer_on) {
    s.order = grouped.order;
  } else {
    s.order.resize(static_cast<std::size_t>(s.group_count));
    for (Index i = 0; i < s.group_count; ++i) s.order[static_cast<std::size_t>(i)] = i;
  }
  const std::vector<Index> inv = inverse_order(s.order);
  s.unperm.resize(inv.size());
  for (std::size_t i = 0; i < inv.size(); ++i) s.unperm[i] = inv[i] + 1;
  return s;
}

/// Tokens for one cloud: embed each group, then arrange tokens in sequence
/// order before the backbone sees them.
template <typename Scalar>
typename Graph<Scalar>::Value token_sequence(Graph<Scalar>& g, Model<Scalar>& m,
                                             const SampleInputs& inputs) {
  using V = typename Graph<Scalar>::Value;
  const V rows = g.constant(inputs.member_rows.template cast<Scalar>());
  const V tokens = point_embed_forward(g, m.embed, rows, inputs.group_count, inputs.group_size);
  return g.embedding_lookup(tokens, inputs.order);
}

/// Class logits for one cloud (1 x num_classes).
template <typename Scalar>
typename Graph<Scalar>::Value forward_classify(Graph<Scalar>& g, Model<Scalar>& m,
                                               const SampleInputs& inputs) {
  if (!m.classifier) throw ConfigError("model has no classification head");
  auto enc = encode(g, m.backbone, token_sequence(g, m, inputs), inputs.group_count);
  const auto cls_row = g.embedding_lookup(enc.final_seq, std::vector<Index>{0});
  return classify_logits(g, *m.classifier, cls_row);
}

/// Per-point part logits for one cloud (N x num_parts). Tap features are
/// restored to centroid-list order, fused, spread to every point through
/// the fixed interpolation matrix, and joined with the global token mean
/// and raw coordinates.
template <typename Scalar>
typename Graph<Scalar>::Value forward_segment(Graph<Scalar>& g, Model<Scalar>& m,
                                              const SampleInputs& inputs,
                                              const Tensor<float>& interpolation,
                                              const Tensor<float>& coords) {
  using V = typename Graph<Scalar>::Value;
  if (!m.seg) throw ConfigError("model has no segmentation head");
  SegHead<Scalar>& head = *m.seg;
  auto enc = encode(g, m.backbone, token_sequence(g, m, inputs), inputs.group_count, true);

  std::vector<V> taps;
  taps.reserve(head.tap_blocks.size());
  for (Index b : head.tap_blocks)
    taps.push_back(g.embedding_lookup(enc.block_seqs[static_cast<std::size_t>(b - 1)],
                                      inputs.unperm));
  const V fused = g.relu(g.add(g.matmul(g.concat_lastdim(taps), g.leaf(head.fuse_w)),
                               g.leaf(head.fuse_b)));
  const V spread = g.matmul(g.constant(interpolation.template cast<Scalar>()), fused);

  const Index n = coords.rows();
  const V global = g.mean_over_axis(enc.final_seq);
  const V broadcast = g.matmul(g.constant(Tensor<Scalar>::ones({n, Index(1)})), global);
  const V xyz = g.constant(coords.template cast<Scalar>());

  const V feat = g.concat_lastdim({spread, broadcast, xyz});
  const V hidden = g.relu(g.add(g.matmul(feat, g.leaf(head.pp_w1)), g.leaf(head.pp_b1)));
  return g.add(g.matmul(hidden, g.leaf(head.pp_w2)), g.leaf(head.pp_b2));
}

}  // namespace apf
