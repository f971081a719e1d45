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

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "apf/common.hpp"
#include "apf/tensor.hpp"

namespace apf {

enum class OpKind : std::uint8_t {
  leaf,
  constant,
  matmul,
  add,
  scalar_mul,
  relu,
  gelu,
  row_softmax,
  layer_norm,
  concat_lastdim,
  concat_rows,
  slice_lastdim,
  max_over_axis,
  mean_over_axis,
  embedding_lookup,
  cross_entropy_with_logits,
};

inline const char* to_string(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::row_softmax: return "row_softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::concat_lastdim: return "concat_lastdim";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_lastdim: return "slice_lastdim";
    case OpKind::max_over_axis: return "max_over_axis";
    case OpKind::mean_over_axis: return "mean_over_axis";
    case OpKind::embedding_lookup: return "embedding_lookup";
    case OpKind::cross_entropy_with_logits: return "cross_entropy_with_logits";
  }
  return "unknown";
}

/// Per-op attributes. Only the fields relevant to the kind are read.
template <typename Scalar>
struct OpAttrs {
  bool transpose_a = false;
  bool transpose_b = false;
  Scalar scalar = Scalar(0);
  Index start = 0;
  Index count = 0;
  std::vector<Index> indices;  // embedding_lookup rows / cross-entropy labels
};

/// Reverse-mode tape over Tensor<Scalar>.
///
/// Nodes are appended in evaluation order, which is a topological order by
/// construction; backward() walks them in exact reverse. Leaves reference
/// tensors owned elsewhere (parameters, cached inputs); gradients flow
/// through every node on the path to the loss but are only stored on leaf
/// tensors with requires_grad set. All arithmetic is serial and
/// deterministic for a fixed scalar type.
template <typename ScalarT>
class Graph {
 public:
  using Scalar = ScalarT;
  using TensorT = Tensor<Scalar>;
  using Mat = typename TensorT::Mat;
  using Attrs = OpAttrs<Scalar>;

  struct Value {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
  };

  /// Registers an externally owned tensor (parameter or input). The tensor
  /// must outlive the graph. Gradients accumulate into t.grad() when
  /// t.requires_grad() is set.
  Value leaf(TensorT& t) {
    Node n;
    n.kind = OpKind::leaf;
    n.external = &t;
    n.needs_grad = t.requires_grad();
    return push(std::move(n));
  }

  /// Copies a tensor into the graph as a gradient-free input.
  Value constant(TensorT t) {
    Node n;
    n.kind = OpKind::constant;
    n.out = std::move(t);
    n.needs_grad = false;
    return push(std::move(n));
  }

  Value scalar_constant(Scalar v) { return constant(TensorT::scalar(v)); }

  // ---- named builders -----------------------------------------------------

  Value matmul(Value a, Value b, bool transpose_a = false, bool transpose_b = false) {
    Attrs at;
    at.transpose_a = transpose_a;
    at.transpose_b = transpose_b;
    return forward_op(OpKind::matmul, {a, b}, at);
  }

  Value add(Value a, Value b) { return forward_op(OpKind::add, {a, b}); }

  Value scalar_mul(Value a, Scalar c) {
    Attrs at;
    at.scalar = c;
    return forward_op(OpKind::scalar_mul, {a}, at);
  }

  Value relu(Value a) { return forward_op(OpKind::relu, {a}); }
  Value gelu(Value a) { return forward_op(OpKind::gelu, {a}); }
  Value row_softmax(Value a) { return forward_op(OpKind::row_softmax, {a}); }

  Value layer_norm(Value x, Value gain, Value bias) {
    return forward_op(OpKind::layer_norm, {x, gain, bias});
  }

  Value concat_lastdim(const std::vector<Value>& parts) {
    return forward_op(OpKind::concat_lastdim, parts);
  }

  Value concat_rows(const std::vector<Value>& parts) {
    return forward_op(OpKind::concat_rows, parts);
  }

  Value slice_lastdim(Value a, Index start, Index count) {
    Attrs at;
    at.start = start;
    at.count = count;
    return forward_op(OpKind::slice_lastdim, {a}, at);
  }

  /// Column-wise maximum over rows; output is 1 x cols.
  Value max_over_axis(Value a) { return forward_op(OpKind::max_over_axis, {a}); }

  /// Column-wise mean over rows; output is 1 x cols.
  Value mean_over_axis(Value a) { return forward_op(OpKind::mean_over_axis, {a}); }

  /// Gathers rows of the first input: out[i] = table[indices[i]].
  Value embedding_lookup(Value table, std::vector<Index> indices) {
    Attrs at;
    at.indices = std::move(indices);
    return forward_op(OpKind::embedding_lookup, {table}, at);
  }

  /// Mean of the stable per-row negative log softmax likelihoods. Scalar
  /// output; labels has one entry per logit row.
  Value cross_entropy_with_logits(Value logits, std::vector<Index> labels) {
    Attrs at;
    at.indices = std::move(labels);
    return forward_op(OpKind::cross_entropy_with_logits, {logits}, at);
  }

  // ---- generic dispatch ---------------------------------------------------

  Value forward_op(OpKind kind, const std::vector<Value>& inputs, const Attrs& attrs = {}) {
    for (Value v : inputs)
      if (!v.valid() || v.id >= static_cast<std::int32_t>(nodes_.size()))
        throw InvalidArgument("forward_op: invalid input value handle");

    Node n;
    n.kind = kind;
    n.attrs = attrs;
    n.inputs.reserve(inputs.size());
    for (Value v : inputs) n.inputs.push_back(v.id);
    n.needs_grad = false;
    for (Value v : inputs) n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;

    switch (kind) {
      case OpKind::matmul: fwd_matmul(n); break;
      case OpKind::add: fwd_add(n); break;
      case OpKind::scalar_mul: fwd_scalar_mul(n); break;
      case OpKind::relu: fwd_relu(n); break;
      case OpKind::gelu: fwd_gelu(n); break;
      case OpKind::row_softmax: fwd_row_softmax(n); break;
      case OpKind::layer_norm: fwd_layer_norm(n); break;
      case OpKind::concat_lastdim: fwd_concat_lastdim(n); break;
      case OpKind::concat_rows: fwd_concat_rows(n); break;
      case OpKind::slice_lastdim: fwd_slice_lastdim(n); break;
      case OpKind::max_over_axis: fwd_max_over_axis(n); break;
      case OpKind::mean_over_axis: fwd_mean_over_axis(n); break;
      case OpKind::embedding_lookup: fwd_embedding_lookup(n); break;
      case OpKind::cross_entropy_with_logits: fwd_cross_entropy(n); break;
      case OpKind::leaf:
      case OpKind::constant:
        throw InvalidArgument("forward_op: leaf/constant are not computed kinds");
    }
    return push(std::move(n));
  }

  const TensorT& value(Value v) const { return value_of(node(v.id)); }

  std::size_t size() const { return nodes_.size(); }

  /// Reverse accumulation from a scalar loss. Every tensor registered via
  /// leaf() with requires_grad set receives (accumulates) its gradient.
  void backward(Value loss) {
    const TensorT& lv = value(loss);
    if (lv.numel() != 1)
      throw InvalidArgument("backward: loss must be scalar, got shape " + lv.shape_string());
    grads_.assign(nodes_.size(), {});
    if (!node(loss.id).needs_grad) return;  // nothing trainable upstream
    grads_[loss.id].assign(1, Scalar(1));

    for (std::int32_t i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (grads_[i].empty()) continue;
      switch (n.kind) {
        case OpKind::leaf:
          if (n.external->requires_grad()) {
            n.external->ensure_grad();
            auto& g = n.external->grad();
            const auto& src = grads_[i];
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
          }
          break;
        case OpKind::constant: break;
        case OpKind::matmul: bwd_matmul(i); break;
        case OpKind::add: bwd_add(i); break;
        case OpKind::scalar_mul: bwd_scalar_mul(i); break;
        case OpKind::relu: bwd_relu(i); break;
        case OpKind::gelu: bwd_gelu(i); break;
        case OpKind::row_softmax: bwd_row_softmax(i); break;
        case OpKind::layer_norm: bwd_layer_norm(i); break;
        case OpKind::concat_lastdim: bwd_concat_lastdim(i); break;
        case OpKind::concat_rows: bwd_concat_rows(i); break;
        case OpKind::slice_lastdim: bwd_slice_lastdim(i); break;
        case OpKind::max_over_axis: bwd_max_over_axis(i); break;
        case OpKind::mean_over_axis: bwd_mean_over_axis(i); break;
        case OpKind::embedding_lookup: bwd_embedding_lookup(i); break;
        case OpKind::cross_entropy_with_logits: bwd_cross_entropy(i); break;
      }
    }
  }

  /// Gradient buffer of a node after backward (empty when off-path).
  /// Primarily for tests.
  const std::vector<Scalar>& node_grad(Value v) const {
    if (grads_.size() != nodes_.size())
      throw InternalError("node_grad: backward has not run");
    return grads_[v.id];
  }

 private:
  struct Node {
    OpKind kind = OpKind::constant;
    std::vector<std::int32_t> inputs;
    TensorT out;                  // unused for leaf
    TensorT* external = nullptr;  // leaf only
    Attrs attrs;
    std::vector<Scalar> saved;
    std::vector<Index> saved_idx;
    bool needs_grad = false;
  };

  Value push(Node n) {
    nodes_.push_back(std::move(n));
    return Value{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Node& node(std::int32_t id) { return nodes_[id]; }
  const Node& node(std::int32_t id) const { return nodes_[id]; }

  static const TensorT& value_of(const Node& n) {
    return n.kind == OpKind::leaf ? *n.external : n.out;
  }

  const TensorT& in_val(const Node& n, std::size_t slot) const {
    return value_of(nodes_[n.inputs[slot]]);
  }

  /// Gradient buffer for input slot `slot` of node `n`, or nullptr when the
  /// input needs no gradient (frozen subtree pruning).
  std::vector<Scalar>* in_grad(const Node& n, std::size_t slot) {
    std::int32_t id = n.inputs[slot];
    Node& src = nodes_[id];
    if (!src.needs_grad) return nullptr;
    auto& g = grads_[id];
    if (g.empty()) g.assign(static_cast<std::size_t>(value_of(src).numel()), Scalar(0));
    return &g;
  }

  using EMap = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;

  static CMap cmap(const TensorT& t) { return CMap(t.data(), t.rows(), t.cols()); }
  static EMap gmap(std::vector<Scalar>& buf, Index r, Index c) {
    return EMap(buf.data(), r, c);
  }

  [[noreturn]] static void shape_fail(OpKind kind, const std::string& detail) {
    throw ShapeError(std::string(to_string(kind)) + ": " + detail);
  }

  static void expect_inputs(const Node& n, std::size_t count) {
    if (n.inputs.size() != count)
      shape_fail(n.kind, "expected " + std::to_string(count) + " inputs, got " +
                             std::to_string(n.inputs.size()));
  }

  // ---- forward kernels ----------------------------------------------------

  void fwd_matmul(Node& n) {
    expect_inputs(n, 2);
    const TensorT& a = in_val(n, 0);
    const TensorT& b = in_val(n, 1);
    const Index ar = n.attrs.transpose_a ? a.cols() : a.rows();
    const Index ac = n.attrs.transpose_a ? a.rows() : a.cols();
    const Index br = n.attrs.transpose_b ? b.cols() : b.rows();
    const Index bc = n.attrs.transpose_b ? b.rows() : b.cols();
    if (ac != br)
      shape_fail(OpKind::matmul, "inner dimensions differ, " + a.shape_string() +
                                     (n.attrs.transpose_a ? "^T" : "") + " vs " +
                                     b.shape_string() + (n.attrs.transpose_b ? "^T" : ""));
    n.out = TensorT::zeros({ar, bc});
    auto o = n.out.mat();
    if (!n.attrs.transpose_a && !n.attrs.transpose_b)
      o.noalias() = cmap(a) * cmap(b);
    else if (!n.attrs.transpose_a && n.attrs.transpose_b)
      o.noalias() = cmap(a) * cmap(b).transpose();
    else if (n.attrs.transpose_a && !n.attrs.transpose_b)
      o.noalias() = cmap(a).transpose() * cmap(b);
    else
      o.noalias() = cmap(a).transpose() * cmap(b).transpose();
  }

  void fwd_add(Node& n) {
    expect_inputs(n, 2);
    const TensorT& a = in_val(n, 0);
    const TensorT& b = in_val(n, 1);
    const bool broadcast = !a.same_shape(b);
    if (broadcast && !(b.rows() == 1 && b.cols() == a.cols()))
      shape_fail(OpKind::add,
                 "shapes " + a.shape_string() + " vs " + b.shape_string() +
                     " (second operand must match or be a single row)");
    n.out = TensorT::zeros(a.shape());
    if (broadcast)
      n.out.mat() = cmap(a).rowwise() + cmap(b).row(0);
    else
      n.out.mat() = cmap(a) + cmap(b);
  }

  void fwd_scalar_mul(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    n.out = TensorT::zeros(a.shape());
    n.out.mat() = cmap(a) * n.attrs.scalar;
  }

  void fwd_relu(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    n.out = TensorT::zeros(a.shape());
    n.out.mat() = cmap(a).cwiseMax(Scalar(0));
  }

  void fwd_gelu(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    n.out = TensorT::zeros(a.shape());
    n.saved.resize(a.storage().size());
    const Scalar c0 = Scalar(std::sqrt(2.0 / M_PI));
    const Scalar c1 = Scalar(0.044715);
    const auto& x = a.storage();
    auto& y = n.out.storage();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const Scalar u = c0 * (x[i] + c1 * x[i] * x[i] * x[i]);
      const Scalar t = std::tanh(u);
      n.saved[i] = t;
      y[i] = Scalar(0.5) * x[i] * (Scalar(1) + t);
    }
  }

  void fwd_row_softmax(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    n.out = TensorT::zeros(a.shape());
    auto x = cmap(a);
    auto y = n.out.mat();
    for (Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      y.row(r) = (x.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
  }

  void fwd_layer_norm(Node& n) {
    expect_inputs(n, 3);
    const TensorT& x = in_val(n, 0);
    const TensorT& gain = in_val(n, 1);
    const TensorT& bias = in_val(n, 2);
    const Index c = x.cols();
    if (gain.numel() != c || bias.numel() != c)
      shape_fail(OpKind::layer_norm, "gain/bias " + gain.shape_string() + "/" +
                                         bias.shape_string() + " vs input " + x.shape_string());
    const Index r = x.rows();
    n.out = TensorT::zeros(x.shape());
    // saved: xhat (r*c) followed by per-row inverse stddev (r)
    n.saved.resize(static_cast<std::size_t>(r * c + r));
    auto xm = cmap(x);
    auto ym = n.out.mat();
    EMap xhat(n.saved.data(), r, c);
    Scalar* inv = n.saved.data() + r * c;
    const Scalar eps = Scalar(1e-5);
    for (Index i = 0; i < r; ++i) {
      const Scalar mu = xm.row(i).mean();
      const Scalar var = (xm.row(i).array() - mu).square().mean();
      inv[i] = Scalar(1) / std::sqrt(var + eps);
      xhat.row(i) = (xm.row(i).array() - mu) * inv[i];
      ym.row(i) = xhat.row(i).cwiseProduct(cmap(gain).row(0)) + cmap(bias).row(0);
    }
  }

  void fwd_concat_lastdim(Node& n) {
    if (n.inputs.empty()) shape_fail(OpKind::concat_lastdim, "no inputs");
    const Index r = in_val(n, 0).rows();
    Index c = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      if (in_val(n, s).rows() != r)
        shape_fail(OpKind::concat_lastdim, "row mismatch, " + in_val(n, 0).shape_string() +
                                               " vs " + in_val(n, s).shape_string());
      c += in_val(n, s).cols();
    }
    n.out = TensorT::zeros({r, c});
    auto o = n.out.mat();
    Index at = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const TensorT& p = in_val(n, s);
      o.middleCols(at, p.cols()) = cmap(p);
      at += p.cols();
    }
  }

  void fwd_concat_rows(Node& n) {
    if (n.inputs.empty()) shape_fail(OpKind::concat_rows, "no inputs");
    const Index c = in_val(n, 0).cols();
    Index r = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      if (in_val(n, s).cols() != c)
        shape_fail(OpKind::concat_rows, "column mismatch, " + in_val(n, 0).shape_string() +
                                            " vs " + in_val(n, s).shape_string());
      r += in_val(n, s).rows();
    }
    n.out = TensorT::zeros({r, c});
    auto o = n.out.mat();
    Index at = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const TensorT& p = in_val(n, s);
      o.middleRows(at, p.rows()) = cmap(p);
      at += p.rows();
    }
  }

  void fwd_slice_lastdim(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    if (n.attrs.start < 0 || n.attrs.count <= 0 || n.attrs.start + n.attrs.count > a.cols())
      shape_fail(OpKind::slice_lastdim,
                 "slice [" + std::to_string(n.attrs.start) + "," +
                     std::to_string(n.attrs.start + n.attrs.count) + ") of " + a.shape_string());
    n.out = TensorT::zeros({a.rows(), n.attrs.count});
    n.out.mat() = cmap(a).middleCols(n.attrs.start, n.attrs.count);
  }

  void fwd_max_over_axis(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    const Index r = a.rows(), c = a.cols();
    n.out = TensorT::zeros({Index(1), c});
    n.saved_idx.assign(static_cast<std::size_t>(c), 0);
    auto x = cmap(a);
    auto y = n.out.mat();
    for (Index j = 0; j < c; ++j) {
      Index best = 0;
      Scalar bv = x(0, j);
      for (Index i = 1; i < r; ++i) {
        if (x(i, j) > bv) {  // first maximum wins ties
          bv = x(i, j);
          best = i;
        }
      }
      y(0, j) = bv;
      n.saved_idx[static_cast<std::size_t>(j)] = best;
    }
  }

  void fwd_mean_over_axis(Node& n) {
    expect_inputs(n, 1);
    const TensorT& a = in_val(n, 0);
    n.out = TensorT::zeros({Index(1), a.cols()});
    n.out.mat().row(0) = cmap(a).colwise().mean();
  }

  void fwd_embedding_lookup(Node& n) {
    expect_inputs(n, 1);
    const TensorT& t = in_val(n, 0);
    const auto& idx = n.attrs.indices;
    if (idx.empty()) shape_fail(OpKind::embedding_lookup, "empty index list");
    for (Index i : idx)
      if (i < 0 || i >= t.rows())
        throw RangeError("embedding_lookup: row " + std::to_string(i) + " outside table " +
                         t.shape_string());
    n.out = TensorT::zeros({static_cast<Index>(idx.size()), t.cols()});
    auto o = n.out.mat();
    auto x = cmap(t);
    for (std::size_t i = 0; i < idx.size(); ++i) o.row(static_cast<Index>(i)) = x.row(idx[i]);
  }

  void fwd_cross_entropy(Node& n) {
    expect_inputs(n, 1);
    const TensorT& logits = in_val(n, 0);
    const auto& labels = n.attrs.indices;
    const Index b = logits.rows(), c = logits.cols();
    if (static_cast<Index>(labels.size()) != b)
      shape_fail(OpKind::cross_entropy_with_logits,
                 "label count " + std::to_string(labels.size()) + " vs logits " +
                     logits.shape_string());
    for (Index l : labels)
      if (l < 0 || l >= c)
        throw InvalidArgument("cross_entropy_with_logits: label " + std::to_string(l) +
                              " outside [0," + std::to_string(c) + ")");
    n.out = TensorT::scalar(Scalar(0));
    n.saved.resize(static_cast<std::size_t>(b * c));  // softmax probabilities
    EMap probs(n.saved.data(), b, c);
    auto x = cmap(logits);
    Scalar total = Scalar(0);
    for (Index r = 0; r < b; ++r) {
      const Scalar m = x.row(r).maxCoeff();
      probs.row(r) = (x.row(r).array() - m).exp();
      const Scalar z = probs.row(r).sum();
      probs.row(r) /= z;
      total += (m + std::log(z)) - x(r, labels[static_cast<std::size_t>(r)]);
    }
    n.out.at(0) = total / Scalar(b);
  }

  // ---- backward kernels ---------------------------------------------------

  void bwd_matmul(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    const TensorT& b = in_val(n, 1);
    CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
    const bool ta = n.attrs.transpose_a, tb = n.attrs.transpose_b;
    if (auto* da = in_grad(n, 0)) {
      EMap m(da->data(), a.rows(), a.cols());
      if (!ta && !tb) m.noalias() += g * cmap(b).transpose();
      else if (!ta && tb) m.noalias() += g * cmap(b);
      else if (ta && !tb) m.noalias() += cmap(b) * g.transpose();
      else m.noalias() += cmap(b).transpose() * g.transpose();
    }
    if (auto* db = in_grad(n, 1)) {
      EMap m(db->data(), b.rows(), b.cols());
      if (!ta && !tb) m.noalias() += cmap(a).transpose() * g;
      else if (!ta && tb) m.noalias() += g.transpose() * cmap(a);
      else if (ta && !tb) m.noalias() += cmap(a) * g;
      else m.noalias() += g.transpose() * cmap(a).transpose();
    }
  }

  void bwd_add(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    const TensorT& b = in_val(n, 1);
    CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
    if (auto* da = in_grad(n, 0)) gmap(*da, a.rows(), a.cols()) += g;
    if (auto* db = in_grad(n, 1)) {
      if (b.same_shape(n.out))
        gmap(*db, b.rows(), b.cols()) += g;
      else
        gmap(*db, b.rows(), b.cols()).row(0) += g.colwise().sum();
    }
  }

  void bwd_scalar_mul(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
      gmap(*da, a.rows(), a.cols()) += g * n.attrs.scalar;
    }
  }

  void bwd_relu(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      const auto& x = a.storage();
      const auto& g = grads_[id];
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > Scalar(0)) (*da)[i] += g[i];
    }
  }

  void bwd_gelu(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      const Scalar c0 = Scalar(std::sqrt(2.0 / M_PI));
      const Scalar c1 = Scalar(0.044715);
      const auto& x = a.storage();
      const auto& g = grads_[id];
      for (std::size_t i = 0; i < x.size(); ++i) {
        const Scalar t = n.saved[i];
        const Scalar du = c0 * (Scalar(1) + Scalar(3) * c1 * x[i] * x[i]);
        const Scalar d = Scalar(0.5) * (Scalar(1) + t) +
                         Scalar(0.5) * x[i] * (Scalar(1) - t * t) * du;
        (*da)[i] += g[i] * d;
      }
    }
  }

  void bwd_row_softmax(std::int32_t id) {
    Node& n = nodes_[id];
    if (auto* da = in_grad(n, 0)) {
      CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
      auto y = cmap(n.out);
      EMap m(da->data(), n.out.rows(), n.out.cols());
      for (Index r = 0; r < y.rows(); ++r) {
        const Scalar dot = g.row(r).cwiseProduct(y.row(r)).sum();
        m.row(r).array() += (g.row(r).array() - dot) * y.row(r).array();
      }
    }
  }

  void bwd_layer_norm(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& x = in_val(n, 0);
    const TensorT& gain = in_val(n, 1);
    const Index r = x.rows(), c = x.cols();
    CMap g(grads_[id].data(), r, c);
    CMap xhat(n.saved.data(), r, c);
    const Scalar* inv = n.saved.data() + r * c;
    if (auto* dg = in_grad(n, 1)) {
      EMap m(dg->data(), 1, c);
      m.row(0) += g.cwiseProduct(xhat).colwise().sum();
    }
    if (auto* db = in_grad(n, 2)) {
      EMap m(db->data(), 1, c);
      m.row(0) += g.colwise().sum();
    }
    if (auto* dx = in_grad(n, 0)) {
      EMap m(dx->data(), r, c);
      for (Index i = 0; i < r; ++i) {
        // dxhat = g .* gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat.*xhat))
        Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat =
            g.row(i).array() * cmap(gain).row(0).array();
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = (dxhat * xhat.row(i).array()).mean();
        m.row(i).array() += inv[i] * (dxhat - m1 - xhat.row(i).array() * m2);
      }
    }
  }

  void bwd_concat_lastdim(std::int32_t id) {
    Node& n = nodes_[id];
    CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
    Index at = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const TensorT& p = in_val(n, s);
      if (auto* dp = in_grad(n, s))
        gmap(*dp, p.rows(), p.cols()) += g.middleCols(at, p.cols());
      at += p.cols();
    }
  }

  void bwd_concat_rows(std::int32_t id) {
    Node& n = nodes_[id];
    CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
    Index at = 0;
    for (std::size_t s = 0; s < n.inputs.size(); ++s) {
      const TensorT& p = in_val(n, s);
      if (auto* dp = in_grad(n, s))
        gmap(*dp, p.rows(), p.cols()) += g.middleRows(at, p.rows());
      at += p.rows();
    }
  }

  void bwd_slice_lastdim(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
      gmap(*da, a.rows(), a.cols()).middleCols(n.attrs.start, n.attrs.count) += g;
    }
  }

  void bwd_max_over_axis(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      const auto& g = grads_[id];
      EMap m(da->data(), a.rows(), a.cols());
      for (Index j = 0; j < a.cols(); ++j)
        m(n.saved_idx[static_cast<std::size_t>(j)], j) += g[static_cast<std::size_t>(j)];
    }
  }

  void bwd_mean_over_axis(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& a = in_val(n, 0);
    if (auto* da = in_grad(n, 0)) {
      CMap g(grads_[id].data(), 1, n.out.cols());
      EMap m(da->data(), a.rows(), a.cols());
      m.rowwise() += g.row(0) / Scalar(a.rows());
    }
  }

  void bwd_embedding_lookup(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& t = in_val(n, 0);
    if (auto* dt = in_grad(n, 0)) {
      CMap g(grads_[id].data(), n.out.rows(), n.out.cols());
      EMap m(dt->data(), t.rows(), t.cols());
      const auto& idx = n.attrs.indices;
      for (std::size_t i = 0; i < idx.size(); ++i)
        m.row(idx[i]) += g.row(static_cast<Index>(i));
    }
  }

  void bwd_cross_entropy(std::int32_t id) {
    Node& n = nodes_[id];
    const TensorT& logits = in_val(n, 0);
    if (auto* dl = in_grad(n, 0)) {
      const Index b = logits.rows(), c = logits.cols();
      const Scalar gscale = grads_[id][0] / Scalar(b);
      CMap probs(n.saved.data(), b, c);
      EMap m(dl->data(), b, c);
      m += probs * gscale;
      for (Index r = 0; r < b; ++r)
        m(r, n.attrs.indices[static_cast<std::size_t>(r)]) -= gscale;
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<Scalar>> grads_;
};

}  // namespace apf
