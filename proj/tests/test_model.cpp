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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "apf/forward.hpp"
#include "apf/gradcheck.hpp"
#include "apf/graph.hpp"
#include "apf/model.hpp"

using apf::BackboneConfig;
using apf::Index;
using apf::PointCloud;
using apf::Tensor;

namespace {

PointCloud random_cloud(apf::Rng& rng, Index n, Index c = 0) {
  PointCloud cloud;
  cloud.points.resize(n, 3);
  for (Index i = 0; i < n; ++i)
    for (Index a = 0; a < 3; ++a)
      cloud.points(i, a) = static_cast<float>(rng.uniform(-1.0, 1.0));
  if (c > 0) {
    cloud.features.resize(n, c);
    for (Index i = 0; i < n; ++i)
      for (Index a = 0; a < c; ++a)
        cloud.features(i, a) = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return cloud;
}

template <typename S>
apf::BlockWeights<S> random_block(apf::Rng& rng, Index d, Index mlp_ratio = 4) {
  apf::BlockWeights<S> w;
  const Index h = mlp_ratio * d;
  w.ln1_gain = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.ln1_bias = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.wq = Tensor<S>::truncated_normal({d, d}, 0.3, rng);
  w.bq = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.wk = Tensor<S>::truncated_normal({d, d}, 0.3, rng);
  w.bk = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.wv = Tensor<S>::truncated_normal({d, d}, 0.3, rng);
  w.bv = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.wo = Tensor<S>::truncated_normal({d, d}, 0.3, rng);
  w.bo = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.ln2_gain = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.ln2_bias = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  w.mlp_w1 = Tensor<S>::truncated_normal({d, h}, 0.3, rng);
  w.mlp_b1 = Tensor<S>::truncated_normal({Index(1), h}, 0.3, rng);
  w.mlp_w2 = Tensor<S>::truncated_normal({h, d}, 0.3, rng);
  w.mlp_b2 = Tensor<S>::truncated_normal({Index(1), d}, 0.3, rng);
  return w;
}

template <typename S>
bool same_bytes(const Tensor<S>& a, const Tensor<S>& b) {
  return a.same_shape(b) && a.storage() == b.storage();
}

}  // namespace

TEST_CASE("backbone configuration is validated") {
  BackboneConfig c = BackboneConfig::tiny();
  CHECK_NOTHROW(c.validate());
  c.heads = 5;  // 64 % 5 != 0
  CHECK_THROWS_AS(c.validate(), apf::ConfigError);
  c = BackboneConfig::tiny();
  c.adapter_dim = 64;  // must stay below dim
  CHECK_THROWS_AS(c.validate(), apf::ConfigError);
  c = BackboneConfig::tiny();
  c.adapter_dim = 0;
  CHECK_THROWS_AS(c.validate(), apf::ConfigError);
  c = BackboneConfig::tiny();
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), apf::ConfigError);
  CHECK(BackboneConfig::vit_b().dim == 768);
  CHECK(BackboneConfig::vit_b().layers == 12);
  CHECK(BackboneConfig::tiny().adapter_dim == 8);
}

TEST_CASE("seeded initialization is deterministic and frozen where promised") {
  const BackboneConfig cfg = BackboneConfig::tiny();

  auto bb1 = apf::synth_pretrained<float>(7, cfg);
  auto bb2 = apf::synth_pretrained<float>(7, cfg);
  auto bb3 = apf::synth_pretrained<float>(8, cfg);
  CHECK(same_bytes(bb1.cls_token, bb2.cls_token));
  CHECK(same_bytes(bb1.pos_embed, bb2.pos_embed));
  CHECK(same_bytes(bb1.blocks[2].wq, bb2.blocks[2].wq));
  CHECK_FALSE(same_bytes(bb1.blocks[0].wq, bb3.blocks[0].wq));
  CHECK_FALSE(bb1.cls_token.requires_grad());
  for (auto& blk : bb1.blocks)
    for (auto& [name, t] : blk.named("b")) CHECK_FALSE(t->requires_grad());
  CHECK(bb1.pos_embed.rows() == cfg.max_tokens);
  // Layer norms start as the identity transform.
  CHECK(bb1.blocks[0].ln1_gain.at(0, 3) == 1.0f);
  CHECK(bb1.blocks[0].ln2_bias.at(0, 3) == 0.0f);

  auto ad1 = apf::init_adapters<float>(7, cfg);
  auto ad2 = apf::init_adapters<float>(7, cfg);
  REQUIRE(ad1.size() == static_cast<std::size_t>(cfg.layers));
  CHECK(same_bytes(ad1[1].enc, ad2[1].enc));
  for (auto& a : ad1) {
    CHECK(a.enc.requires_grad());
    CHECK(a.dec.requires_grad());
    CHECK(a.ln_gain.requires_grad());
    for (Index i = 0; i < a.dec.numel(); ++i) CHECK(a.dec.at(i) == 0.0f);
    bool any_nonzero = false;
    for (Index i = 0; i < a.enc.numel(); ++i) any_nonzero |= a.enc.at(i) != 0.0f;
    CHECK(any_nonzero);
  }

  auto emb = apf::init_point_embed<float>(3, 6, cfg.dim, true);
  auto rpn1 = apf::init_random_frozen<float>(3, 6, cfg.dim);
  auto rpn2 = apf::init_random_frozen<float>(3, 6, cfg.dim);
  CHECK(emb.trainable());
  CHECK_FALSE(rpn1.trainable());
  CHECK(same_bytes(emb.w1, rpn1.w1));  // same seed, same draw, only the flag differs
  CHECK(same_bytes(rpn1.w2, rpn2.w2));
  CHECK_FALSE(same_bytes(rpn1.w1, apf::init_random_frozen<float>(4, 6, cfg.dim).w1));
  CHECK(emb.input_width() == 6);
  CHECK(emb.output_width() == cfg.dim);
  CHECK(emb.w2.rows() == 64);
  CHECK(emb.w2.cols() == 128);
}

TEST_CASE("named tensor registry is unique, complete, and exact about trainability") {
  const BackboneConfig cfg = BackboneConfig::tiny();
  apf::ModelOptions opt;
  opt.num_classes = 4;
  opt.feature_width = 0;
  auto model = apf::make_model<float>(11, cfg, opt);

  auto named = apf::named_tensors(model);
  std::set<std::string> names;
  for (auto& [name, t] : named) {
    CHECK(names.insert(name).second);
    CHECK(t->numel() > 0);
  }
  // embed(6) + cls/pos(2) + blocks(16 each) + adapters(4 each) + classifier(2)
  CHECK(static_cast<Index>(named.size()) == 6 + 2 + cfg.layers * 16 + cfg.layers * 4 + 2);

  std::set<std::string> trainable;
  for (auto& [name, t] : apf::trainable_tensors(model)) trainable.insert(name);
  std::set<std::string> expected;
  for (const char* s : {"w1", "b1", "w2", "b2", "w3", "b3"}) expected.insert(std::string("embed.") + s);
  for (Index i = 0; i < cfg.layers; ++i)
    for (const char* s : {"ln.gain", "ln.bias", "enc", "dec"})
      expected.insert("backbone.adapters." + std::to_string(i) + "." + s);
  expected.insert("heads.classifier.weight");
  expected.insert("heads.classifier.bias");
  CHECK(trainable == expected);

  // The random-embedding variant moves the embedding net out of the set.
  opt.random_embedding = true;
  auto rpn_model = apf::make_model<float>(11, cfg, opt);
  std::set<std::string> rpn_trainable;
  for (auto& [name, t] : apf::trainable_tensors(rpn_model)) rpn_trainable.insert(name);
  for (const char* s : {"w1", "b1", "w2", "b2", "w3", "b3"}) expected.erase(std::string("embed.") + s);
  CHECK(rpn_trainable == expected);

  // Disabling adapters leaves heads (and embed) only.
  opt.random_embedding = false;
  opt.adapters = false;
  auto plain = apf::make_model<float>(11, cfg, opt);
  for (auto& [name, t] : apf::trainable_tensors(plain)) {
    const bool is_embed = name.rfind("embed.", 0) == 0;
    const bool is_head = name.rfind("heads.", 0) == 0;
    CHECK((is_embed || is_head));
  }
}

TEST_CASE("parameter counts match their closed forms") {
  const BackboneConfig cfg = BackboneConfig::tiny();
  apf::ModelOptions opt;
  opt.num_classes = 4;
  auto model = apf::make_model<float>(5, cfg, opt);

  Index adapter_matrix = 0, frozen = 0;
  for (auto& [name, t] : apf::named_tensors(model)) {
    if (!t->requires_grad()) frozen += t->numel();
    if (name.find(".enc") != std::string::npos || name.find(".dec") != std::string::npos)
      adapter_matrix += t->numel();
  }
  CHECK(adapter_matrix == cfg.layers * 2 * cfg.dim * cfg.adapter_dim);
  CHECK(adapter_matrix == 4096);

  // Frozen stack: per block 12d^2+13d, plus class token and positional table.
  const Index d = cfg.dim;
  const Index expect_frozen = cfg.layers * (12 * d * d + 13 * d) + d + cfg.max_tokens * d;
  CHECK(frozen == expect_frozen);

  // ViT-Base adapter arithmetic, no allocation needed.
  const BackboneConfig vb = BackboneConfig::vit_b();
  CHECK(vb.layers * 2 * vb.dim * vb.adapter_dim == 1179648);
}

TEST_CASE("attention matches an independent per-head oracle") {
  using S = double;
  const Index t_count = 4, d = 8, heads = 2, dh = d / heads;
  apf::Rng rng(21);
  auto w = random_block<S>(rng, d);
  Tensor<S> x = Tensor<S>::truncated_normal({t_count, d}, 0.7, rng);

  apf::Graph<S> g;
  auto out = apf::msa_forward(g, w, heads, g.constant(x));
  const Tensor<S>& got = g.value(out);
  REQUIRE(got.rows() == t_count);
  REQUIRE(got.cols() == d);

  // Scalar-loop recomputation, one head at a time.
  auto proj = [&](const Tensor<S>& wm, const Tensor<S>& bv, Index r, Index c) {
    S acc = bv.at(0, c);
    for (Index i = 0; i < d; ++i) acc += x.at(r, i) * wm.at(i, c);
    return acc;
  };
  std::vector<std::vector<S>> ctx(static_cast<std::size_t>(t_count),
                                  std::vector<S>(static_cast<std::size_t>(d), 0));
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < t_count; ++i) {
      std::vector<S> score(static_cast<std::size_t>(t_count));
      for (Index j = 0; j < t_count; ++j) {
        S dot = 0;
        for (Index a = 0; a < dh; ++a)
          dot += proj(w.wq, w.bq, i, h * dh + a) * proj(w.wk, w.bk, j, h * dh + a);
        score[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<S>(dh));
      }
      S mx = *std::max_element(score.begin(), score.end());
      S norm = 0;
      for (auto& s : score) {
        s = std::exp(s - mx);
        norm += s;
      }
      for (Index j = 0; j < t_count; ++j)
        for (Index a = 0; a < dh; ++a)
          ctx[static_cast<std::size_t>(i)][static_cast<std::size_t>(h * dh + a)] +=
              score[static_cast<std::size_t>(j)] / norm * proj(w.wv, w.bv, j, h * dh + a);
    }
  }
  for (Index i = 0; i < t_count; ++i)
    for (Index c = 0; c < d; ++c) {
      S acc = w.bo.at(0, c);
      for (Index a = 0; a < d; ++a) acc += ctx[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] * w.wo.at(a, c);
      CHECK(std::abs(acc - got.at(i, c)) < 1e-9);
    }
}

TEST_CASE("attention degenerate inputs behave as closed forms predict") {
  using S = double;
  const Index d = 6;
  apf::Rng rng(22);
  auto w = random_block<S>(rng, d);

  // One token: softmax over a single score is exactly 1, so the output is
  // the projected value row.
  Tensor<S> single = Tensor<S>::truncated_normal({Index(1), d}, 0.5, rng);
  apf::Graph<S> g1;
  auto out1 = apf::msa_forward(g1, w, 2, g1.constant(single));
  for (Index c = 0; c < d; ++c) {
    S v = 0;
    for (Index a = 0; a < d; ++a) {
      S va = w.bv.at(0, a);
      for (Index i = 0; i < d; ++i) va += single.at(0, i) * w.wv.at(i, a);
      v += va * w.wo.at(a, c);
    }
    v += w.bo.at(0, c);
    CHECK(std::abs(v - g1.value(out1).at(0, c)) < 1e-12);
  }

  // Two identical tokens attend identically.
  Tensor<S> twin = Tensor<S>::zeros({Index(2), d});
  for (Index c = 0; c < d; ++c) {
    const S v = rng.uniform(-1.0, 1.0);
    twin.at(0, c) = v;
    twin.at(1, c) = v;
  }
  apf::Graph<S> g2;
  auto out2 = apf::msa_forward(g2, w, 3, g2.constant(twin));
  for (Index c = 0; c < d; ++c) CHECK(g2.value(out2).at(0, c) == g2.value(out2).at(1, c));

  apf::Graph<S> g3;
  CHECK_THROWS_AS(apf::msa_forward(g3, w, 4, g3.constant(single)), apf::InvalidArgument);
}

TEST_CASE("transformer blocks compose residuals exactly as written") {
  using S = float;
  const Index t_count = 5, d = 16, heads = 4;
  apf::Rng rng(31);
  auto w = random_block<S>(rng, d);
  Tensor<S> x = Tensor<S>::truncated_normal({t_count, d}, 0.6, rng);

  // Hand-composed op sequence must match the packaged block bit for bit.
  apf::Graph<S> g;
  auto blocked = apf::vanilla_block(g, w, heads, g.constant(x));
  {
    apf::Graph<S> h;
    auto xv = h.constant(x);
    auto xt = h.add(xv, apf::msa_forward(h, w, heads,
                                         h.layer_norm(xv, h.leaf(w.ln1_gain), h.leaf(w.ln1_bias))));
    auto n2 = h.layer_norm(xt, h.leaf(w.ln2_gain), h.leaf(w.ln2_bias));
    auto mlp = h.add(h.matmul(h.gelu(h.add(h.matmul(n2, h.leaf(w.mlp_w1)), h.leaf(w.mlp_b1))),
                              h.leaf(w.mlp_w2)),
                     h.leaf(w.mlp_b2));
    auto manual = h.add(xt, mlp);
    CHECK(same_bytes(g.value(blocked), h.value(manual)));
  }
  CHECK(g.value(blocked).rows() == t_count);
  CHECK(g.value(blocked).cols() == d);

  // Zeroed output projections collapse the block to the identity map.
  auto wz = random_block<S>(rng, d);
  wz.wo = Tensor<S>::zeros({d, d});
  wz.bo = Tensor<S>::zeros({Index(1), d});
  wz.mlp_w2 = Tensor<S>::zeros({4 * d, d});
  wz.mlp_b2 = Tensor<S>::zeros({Index(1), d});
  apf::Graph<S> gz;
  auto idout = apf::vanilla_block(gz, wz, heads, gz.constant(x));
  for (Index i = 0; i < t_count; ++i)
    for (Index c = 0; c < d; ++c) CHECK(gz.value(idout).at(i, c) == x.at(i, c));
}

TEST_CASE("adapter branch reproduces the scalar hand oracle") {
  using S = double;
  apf::Graph<S> g;
  // Token (3,-3) normalizes to approximately (1,-1).
  auto xt = g.constant(Tensor<S>::from_values({Index(1), Index(2)}, {3.0, -3.0}));
  auto gain = g.constant(Tensor<S>::ones({Index(1), Index(2)}));
  auto bias = g.constant(Tensor<S>::zeros({Index(1), Index(2)}));
  auto enc = g.constant(Tensor<S>::from_values({Index(2), Index(1)}, {1.0, -1.0}));
  auto dec = g.constant(Tensor<S>::from_values({Index(1), Index(2)}, {0.5, 0.25}));
  auto contribution =
      g.scalar_mul(g.matmul(g.relu(g.matmul(g.layer_norm(xt, gain, bias), enc)), dec), S(0.1));
  CHECK(g.value(contribution).at(0, 0) == doctest::Approx(0.100).epsilon(1e-4));
  CHECK(g.value(contribution).at(0, 1) == doctest::Approx(0.050).epsilon(1e-4));
}

TEST_CASE("zero or disabled adapters leave the block output bit-identical") {
  using S = float;
  const Index t_count = 6, d = 16, heads = 2;
  apf::Rng rng(41);
  auto w = random_block<S>(rng, d);
  Tensor<S> x = Tensor<S>::truncated_normal({t_count, d}, 0.6, rng);

  apf::AdapterParams<S> zero_dec;
  zero_dec.ln_gain = Tensor<S>::ones({Index(1), d});
  zero_dec.ln_bias = Tensor<S>::zeros({Index(1), d});
  zero_dec.enc = Tensor<S>::truncated_normal({d, Index(4)}, 0.4, rng);
  zero_dec.dec = Tensor<S>::zeros({Index(4), d});

  apf::Graph<S> gv, gp, gs;
  auto vanilla = apf::vanilla_block(gv, w, heads, gv.constant(x));
  auto adapted = apf::pointformer_block(gp, w, zero_dec, S(0.1), heads, gp.constant(x));
  CHECK(same_bytes(gv.value(vanilla), gp.value(adapted)));

  // Scale zero annihilates even a fully random adapter.
  apf::AdapterParams<S> live = zero_dec;
  live.dec = Tensor<S>::truncated_normal({Index(4), d}, 0.4, rng);
  auto scaled_off = apf::pointformer_block(gs, w, live, S(0), heads, gs.constant(x));
  CHECK(same_bytes(gv.value(vanilla), gs.value(scaled_off)));

  // A nonzero branch must move the output.
  apf::Graph<S> gl;
  auto moved = apf::pointformer_block(gl, w, live, S(0.1), heads, gl.constant(x));
  CHECK_FALSE(same_bytes(gv.value(vanilla), gl.value(moved)));
}

TEST_CASE("encode prepends the class token, applies positions, and captures taps") {
  using S = float;
  BackboneConfig cfg = BackboneConfig::tiny();
  cfg.layers = 2;
  cfg.max_tokens = 9;
  auto bb = apf::synth_pretrained<S>(13, cfg);
  bb.adapters = apf::init_adapters<S>(13, cfg);
  const Index n_s = 8;
  apf::Rng rng(14);
  Tensor<S> tokens = Tensor<S>::truncated_normal({n_s, cfg.dim}, 0.5, rng);

  apf::Graph<S> g;
  auto enc = apf::encode(g, bb, g.constant(tokens), n_s, true);
  CHECK(g.value(enc.final_seq).rows() == n_s + 1);
  CHECK(g.value(enc.final_seq).cols() == cfg.dim);
  REQUIRE(enc.block_seqs.size() == 2);
  CHECK(same_bytes(g.value(enc.block_seqs[1]), g.value(enc.final_seq)));

  // Capture must not change the numbers.
  apf::Graph<S> g2;
  auto plain = apf::encode(g2, bb, g2.constant(tokens), n_s, false);
  CHECK(plain.block_seqs.empty());
  CHECK(same_bytes(g.value(enc.final_seq), g2.value(plain.final_seq)));

  // One more token would exceed the positional table.
  apf::Graph<S> g3;
  Tensor<S> wide = Tensor<S>::truncated_normal({n_s + 1, cfg.dim}, 0.5, rng);
  CHECK_THROWS_AS(apf::encode(g3, bb, g3.constant(wide), n_s + 1), apf::ConfigError);

  // Without positions the same sequence is accepted and the result moves.
  auto no_pos = bb;
  no_pos.config.use_pos_embed = false;
  apf::Graph<S> g4;
  CHECK_NOTHROW(apf::encode(g4, no_pos, g4.constant(wide), n_s + 1));
  apf::Graph<S> g5;
  auto unpositioned = apf::encode(g5, no_pos, g5.constant(tokens), n_s);
  CHECK_FALSE(same_bytes(g.value(enc.final_seq), g5.value(unpositioned.final_seq)));

  // Single-block stack equals one block call around the cls/pos plumbing.
  BackboneConfig one = cfg;
  one.layers = 1;
  auto bb1 = apf::synth_pretrained<S>(13, one);
  bb1.adapters = apf::init_adapters<S>(13, one);
  apf::Graph<S> g6, g7;
  auto enc1 = apf::encode(g6, bb1, g6.constant(tokens), n_s);
  auto seq = g7.concat_rows({g7.leaf(bb1.cls_token), g7.constant(tokens)});
  std::vector<Index> idx;
  for (Index i = 0; i <= n_s; ++i) idx.push_back(i);
  seq = g7.add(seq, g7.embedding_lookup(g7.leaf(bb1.pos_embed), idx));
  auto manual = apf::pointformer_block(g7, bb1.blocks[0], bb1.adapters[0],
                                       static_cast<S>(one.adapter_scale), one.heads, seq);
  CHECK(same_bytes(g6.value(enc1.final_seq), g7.value(manual)));
}

TEST_CASE("classifier head computes calibrated logits") {
  using S = double;
  apf::Graph<S> g;

  // Zero weights give uniform class probabilities.
  apf::ClassifierHead<S> zero;
  zero.weight = Tensor<S>::zeros({Index(5), Index(4)});
  zero.bias = Tensor<S>::zeros({Index(1), Index(4)});
  auto cls = g.constant(Tensor<S>::from_values({Index(1), Index(5)}, {1, -2, 3, 0.5, -1}));
  auto probs = g.row_softmax(apf::classify_logits(g, zero, cls));
  for (Index c = 0; c < 4; ++c) CHECK(g.value(probs).at(0, c) == doctest::Approx(0.25).epsilon(1e-9));

  // Logits (ln 3, 0) put 3:1 odds on the first class.
  auto two = g.row_softmax(g.constant(Tensor<S>::from_values({Index(1), Index(2)}, {std::log(3.0), 0.0})));
  CHECK(g.value(two).at(0, 0) == doctest::Approx(0.75).epsilon(1e-6));
  CHECK(g.value(two).at(0, 1) == doctest::Approx(0.25).epsilon(1e-6));

  // Shifting every logit by a constant changes nothing.
  auto shifted = g.row_softmax(
      g.constant(Tensor<S>::from_values({Index(1), Index(2)}, {std::log(3.0) + 17.0, 17.0})));
  for (Index c = 0; c < 2; ++c)
    CHECK(g.value(two).at(0, c) == doctest::Approx(g.value(shifted).at(0, c)).epsilon(1e-9));

  // An identity weight block passes the token through plus bias.
  apf::ClassifierHead<S> ident;
  ident.weight = Tensor<S>::zeros({Index(5), Index(4)});
  for (Index i = 0; i < 4; ++i) ident.weight.at(i, i) = 1;
  ident.bias = Tensor<S>::from_values({Index(1), Index(4)}, {10, 20, 30, 40});
  auto logits = apf::classify_logits(g, ident, cls);
  CHECK(g.value(logits).at(0, 0) == doctest::Approx(11.0));
  CHECK(g.value(logits).at(0, 2) == doctest::Approx(33.0));
}

TEST_CASE("group featurization lists absolute, feature, and offset channels") {
  PointCloud cloud;
  cloud.points.resize(3, 3);
  cloud.points << 1, 2, 3, 4, 6, 8, 0, 0, 0;
  cloud.features.resize(3, 2);
  cloud.features << 10, 11, 20, 21, 30, 31;

  apf::GroupedPoints grouped;
  grouped.centroid_indices = {1};
  grouped.groups = {{1, 0}};
  grouped.morton_codes = {0};
  grouped.order = {0};

  auto rows = apf::featurize_groups<float>(cloud, grouped);
  REQUIRE(rows.rows() == 2);
  REQUIRE(rows.cols() == 8);
  // Member 1 is its own centroid: zero offset.
  for (Index a = 0; a < 3; ++a) {
    CHECK(rows.at(0, a) == cloud.points(1, a));
    CHECK(rows.at(0, 5 + a) == 0.0f);
  }
  CHECK(rows.at(0, 3) == 20.0f);
  CHECK(rows.at(0, 4) == 21.0f);
  // Member 0 offsets against centroid 1.
  CHECK(rows.at(1, 0) == 1.0f);
  CHECK(rows.at(1, 5) == doctest::Approx(-3.0f));
  CHECK(rows.at(1, 6) == doctest::Approx(-4.0f));
  CHECK(rows.at(1, 7) == doctest::Approx(-5.0f));
  CHECK(rows.at(1, 3) == 10.0f);
}

TEST_CASE("group tokens are invariant to member order inside a group") {
  using S = float;
  apf::Rng rng(51);
  PointCloud cloud = random_cloud(rng, 24);
  cloud = apf::normalize_unit_sphere(cloud);
  auto grouped = apf::group_and_order(cloud, 6, 4);

  auto net = apf::init_point_embed<S>(9, 6, 32, true);
  apf::Graph<S> g1;
  auto t1 = apf::point_embed_forward(g1, net, g1.constant(apf::featurize_groups<S>(cloud, grouped)),
                                     grouped.group_count(), 4);
  CHECK(g1.value(t1).rows() == 6);
  CHECK(g1.value(t1).cols() == 32);

  auto shuffled = grouped;
  for (auto& grp : shuffled.groups) std::reverse(grp.begin(), grp.end());
  apf::Graph<S> g2;
  auto t2 = apf::point_embed_forward(g2, net, g2.constant(apf::featurize_groups<S>(cloud, shuffled)),
                                     shuffled.group_count(), 4);
  CHECK(same_bytes(g1.value(t1), g2.value(t2)));
}

TEST_CASE("interpolation weights form a convex combination over near centroids") {
  apf::Rng rng(61);
  PointCloud cloud = random_cloud(rng, 40);
  cloud = apf::normalize_unit_sphere(cloud);
  auto grouped = apf::group_and_order(cloud, 8, 4);

  auto w = apf::build_interpolation<double>(cloud, grouped);
  REQUIRE(w.rows() == 40);
  REQUIRE(w.cols() == 8);
  for (Index p = 0; p < 40; ++p) {
    double sum = 0;
    Index nonzero = 0;
    for (Index i = 0; i < 8; ++i) {
      CHECK(w.at(p, i) >= 0.0);
      sum += w.at(p, i);
      if (w.at(p, i) > 0) ++nonzero;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(nonzero <= 3);
  }

  // Independent recomputation from raw distances.
  for (Index p = 0; p < 40; ++p) {
    std::vector<std::pair<double, Index>> d2(8);
    for (Index i = 0; i < 8; ++i) {
      const Index c = grouped.centroid_indices[static_cast<std::size_t>(i)];
      double acc = 0;
      for (Index a = 0; a < 3; ++a) {
        const double diff = static_cast<double>(cloud.points(p, a)) - cloud.points(c, a);
        acc += diff * diff;
      }
      d2[static_cast<std::size_t>(i)] = {acc, i};
    }
    std::sort(d2.begin(), d2.end());
    double total = 0;
    for (int j = 0; j < 3; ++j) total += 1.0 / (d2[static_cast<std::size_t>(j)].first + 1e-8);
    for (int j = 0; j < 3; ++j)
      CHECK(w.at(p, d2[static_cast<std::size_t>(j)].second) ==
            doctest::Approx((1.0 / (d2[static_cast<std::size_t>(j)].first + 1e-8)) / total)
                .epsilon(1e-5));
  }

  // Every point its own centroid: the self weight dominates completely.
  apf::GroupedPoints self;
  for (Index i = 0; i < cloud.size(); ++i) {
    self.centroid_indices.push_back(i);
    self.groups.push_back({i});
    self.morton_codes.push_back(0);
    self.order.push_back(i);
  }
  // The self weight is 1e8 against O(1) neighbor weights, so it dominates
  // to a few parts in a million.
  auto ws = apf::build_interpolation<double>(cloud, self);
  for (Index p = 0; p < cloud.size(); ++p) CHECK(ws.at(p, p) > 1.0 - 1e-4);

  // A constant centroid field propagates exactly (convexity).
  Tensor<float> wf = apf::build_interpolation<float>(cloud, grouped);
  apf::Graph<float> g;
  auto field = g.constant(Tensor<float>::full({Index(8), Index(5)}, 3.25f));
  auto spread = g.matmul(g.constant(wf), field);
  for (Index p = 0; p < 40; ++p)
    for (Index c = 0; c < 5; ++c)
      CHECK(g.value(spread).at(p, c) == doctest::Approx(3.25f).epsilon(1e-6));
}

TEST_CASE("whole-model classification is reproducible and zero-init transparent") {
  using S = float;
  BackboneConfig cfg = BackboneConfig::tiny();
  cfg.layers = 2;
  apf::ModelOptions opt;
  opt.num_classes = 4;

  apf::Rng rng(71);
  PointCloud cloud = apf::normalize_unit_sphere(random_cloud(rng, 48));
  auto grouped = apf::group_and_order(cloud, 12, 4);
  auto inputs = apf::prepare_inputs(cloud, grouped, true);

  auto model = apf::make_model<S>(23, cfg, opt);
  apf::Graph<S> g1, g2;
  auto l1 = apf::forward_classify(g1, model, inputs);
  auto l2 = apf::forward_classify(g2, model, inputs);
  REQUIRE(g1.value(l1).rows() == 1);
  REQUIRE(g1.value(l1).cols() == 4);
  CHECK(same_bytes(g1.value(l1), g2.value(l2)));

  // Fresh adapters start invisible: the adapted model equals the plain one.
  apf::ModelOptions no_adapt = opt;
  no_adapt.adapters = false;
  auto plain = apf::make_model<S>(23, cfg, no_adapt);
  apf::Graph<S> g3;
  auto l3 = apf::forward_classify(g3, plain, inputs);
  CHECK(same_bytes(g1.value(l1), g3.value(l3)));

  // Gradients reach every trainable tensor and no frozen one. The zero
  // up-projection blocks the chain into the encoder at exact init, so move
  // the model to a generic state first.
  apf::Rng dec_rng(apf::derive_seed(23, "generic"));
  for (auto& a : model.backbone.adapters) {
    a.dec = Tensor<S>::truncated_normal({a.dec.rows(), a.dec.cols()}, 0.05f, dec_rng);
    a.dec.set_requires_grad(true);
  }
  apf::Graph<S> g4;
  auto loss = g4.cross_entropy_with_logits(apf::forward_classify(g4, model, inputs),
                                           std::vector<Index>{2});
  for (auto& [name, t] : apf::named_tensors(model)) t->clear_grad();
  g4.backward(loss);
  for (auto& [name, t] : apf::named_tensors(model)) {
    if (t->requires_grad()) {
      REQUIRE_MESSAGE(t->has_grad(), name);
      S norm = 0;
      for (const auto& v : t->grad()) norm += v * v;
      CHECK_MESSAGE(norm > 0, name);
    } else {
      CHECK_MESSAGE(!t->has_grad(), name);
    }
  }

  // Random-embedding variant: the embedding net receives no gradient.
  apf::ModelOptions rpn = opt;
  rpn.random_embedding = true;
  auto rpn_model = apf::make_model<S>(23, cfg, rpn);
  apf::Graph<S> g5;
  auto rloss = g5.cross_entropy_with_logits(apf::forward_classify(g5, rpn_model, inputs),
                                            std::vector<Index>{1});
  g5.backward(rloss);
  CHECK_FALSE(rpn_model.embed.w1.has_grad());
  for (auto& a : rpn_model.backbone.adapters) CHECK(a.enc.has_grad());
}

TEST_CASE("segmentation head predicts every point and differentiates") {
  using S = float;
  BackboneConfig cfg = BackboneConfig::tiny();
  cfg.layers = 3;
  apf::ModelOptions opt;
  opt.num_parts = 4;

  apf::Rng rng(81);
  PointCloud cloud = apf::normalize_unit_sphere(random_cloud(rng, 40));
  auto grouped = apf::group_and_order(cloud, 8, 4);
  auto inputs = apf::prepare_inputs(cloud, grouped, true);
  auto interp = apf::build_interpolation<float>(cloud, grouped);
  Tensor<float> coords = Tensor<float>::zeros({cloud.size(), Index(3)});
  for (Index i = 0; i < cloud.size(); ++i)
    for (Index a = 0; a < 3; ++a) coords.at(i, a) = cloud.points(i, a);

  auto model = apf::make_model<S>(29, cfg, opt);
  REQUIRE(model.seg.has_value());
  CHECK(model.seg->tap_blocks == std::vector<Index>{1, 2, 3});

  apf::Graph<S> g;
  auto logits = apf::forward_segment(g, model, inputs, interp, coords);
  REQUIRE(g.value(logits).rows() == cloud.size());
  REQUIRE(g.value(logits).cols() == 4);
  for (Index i = 0; i < g.value(logits).numel(); ++i) CHECK(std::isfinite(g.value(logits).at(i)));

  std::vector<Index> labels(static_cast<std::size_t>(cloud.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<Index>(i % 4);
  auto loss = g.cross_entropy_with_logits(logits, labels);
  g.backward(loss);
  CHECK(model.seg->fuse_w.has_grad());
  CHECK(model.seg->pp_w2.has_grad());
  CHECK(model.embed.w1.has_grad());
  CHECK(model.backbone.adapters[0].enc.has_grad());
  CHECK_FALSE(model.backbone.blocks[0].wq.has_grad());
}

TEST_CASE("end-to-end classification gradients match finite differences") {
  using S = double;
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.adapter_dim = 4;
  cfg.max_tokens = 16;
  apf::ModelOptions opt;
  opt.num_classes = 3;

  apf::Rng rng(92);
  PointCloud cloud = apf::normalize_unit_sphere(random_cloud(rng, 24));
  auto grouped = apf::group_and_order(cloud, 6, 4);
  auto inputs = apf::prepare_inputs(cloud, grouped, true);

  // A generic up-projection exercises the encoder path; at exact zero its
  // gradient would vanish and the audit would compare zeros.
  auto model = apf::make_model<S>(37, cfg, opt);
  apf::Rng dec_rng(apf::derive_seed(37, "generic"));
  for (auto& a : model.backbone.adapters) {
    a.dec = Tensor<S>::truncated_normal({a.dec.rows(), a.dec.cols()}, 0.05, dec_rng);
    a.dec.set_requires_grad(true);
  }
  auto loss_fn = [&](bool with_grad) -> S {
    apf::Graph<S> g;
    auto loss = g.cross_entropy_with_logits(apf::forward_classify(g, model, inputs),
                                            std::vector<Index>{1});
    if (with_grad) g.backward(loss);
    return g.value(loss).at(0);
  };
  auto report = apf::finite_diff_check<S>(apf::named_tensors(model), loss_fn, 1e-4);
  CHECK_MESSAGE(report.within(1e-4), report.worst_name, " rel=", report.max_rel);
}

TEST_CASE("end-to-end segmentation gradients match finite differences") {
  using S = double;
  BackboneConfig cfg;
  cfg.layers = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.adapter_dim = 4;
  cfg.max_tokens = 8;

  apf::Rng rng(94);
  PointCloud cloud = apf::normalize_unit_sphere(random_cloud(rng, 16));
  auto grouped = apf::group_and_order(cloud, 4, 4);
  auto inputs = apf::prepare_inputs(cloud, grouped, true);
  auto interp = apf::build_interpolation<float>(cloud, grouped);
  Tensor<float> coords = Tensor<float>::zeros({cloud.size(), Index(3)});
  for (Index i = 0; i < cloud.size(); ++i)
    for (Index a = 0; a < 3; ++a) coords.at(i, a) = cloud.points(i, a);

  apf::Model<S> model;
  model.config = cfg;
  model.embed = apf::init_point_embed<S>(43, 6, cfg.dim, true);
  model.backbone = apf::synth_pretrained<S>(43, cfg);
  model.backbone.adapters = apf::init_adapters<S>(43, cfg);
  model.seg = apf::init_seg_head<S>(43, cfg, 3, {}, 8, 8);
  apf::Rng dec_rng(apf::derive_seed(43, "generic"));
  for (auto& a : model.backbone.adapters) {
    a.dec = Tensor<S>::truncated_normal({a.dec.rows(), a.dec.cols()}, 0.05, dec_rng);
    a.dec.set_requires_grad(true);
  }

  std::vector<Index> labels(static_cast<std::size_t>(cloud.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<Index>(i % 3);
  auto loss_fn = [&](bool with_grad) -> S {
    apf::Graph<S> g;
    auto loss = g.cross_entropy_with_logits(apf::forward_segment(g, model, inputs, interp, coords),
                                            labels);
    if (with_grad) g.backward(loss);
    return g.value(loss).at(0);
  };
  auto report = apf::finite_diff_check<S>(apf::named_tensors(model), loss_fn, 1e-4);
  CHECK_MESSAGE(report.within(1e-4), report.worst_name, " rel=", report.max_rel);
}

TEST_CASE("sequencer toggle changes token order but not the token set") {
  using S = float;
  apf::Rng rng(93);
  PointCloud cloud = apf::normalize_unit_sphere(random_cloud(rng, 32));
  auto grouped = apf::group_and_order(cloud, 8, 4);

  auto on = apf::prepare_inputs(cloud, grouped, true);
  auto off = apf::prepare_inputs(cloud, grouped, false);
  CHECK(on.order == grouped.order);
  for (Index i = 0; i < 8; ++i) CHECK(off.order[static_cast<std::size_t>(i)] == i);

  // unperm maps centroid list position to its sequence row (class token at 0).
  for (Index i = 0; i < 8; ++i) {
    CHECK(on.order[static_cast<std::size_t>(on.unperm[static_cast<std::size_t>(i)] - 1)] == i);
    CHECK(off.unperm[static_cast<std::size_t>(i)] == i + 1);
  }

  auto net = apf::init_point_embed<S>(9, 6, 32, true);
  apf::Graph<S> g;
  auto tokens = apf::point_embed_forward(g, net, g.constant(apf::featurize_groups<S>(cloud, grouped)),
                                         8, 4);
  auto seq_on = g.embedding_lookup(tokens, on.order);
  auto seq_off = g.embedding_lookup(tokens, off.order);
  // Same multiset of rows, possibly different arrangement.
  std::multiset<float> a, b;
  for (Index i = 0; i < g.value(seq_on).numel(); ++i) {
    a.insert(g.value(seq_on).at(i));
    b.insert(g.value(seq_off).at(i));
  }
  CHECK(a == b);
}
