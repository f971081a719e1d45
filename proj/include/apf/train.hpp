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
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "apf/data.hpp"
#include "apf/forward.hpp"
#include "apf/graph.hpp"
#include "apf/model.hpp"

namespace apf {

// ---- configuration -------------------------------------------------------------

struct TrainConfig {
  double lr_max = 5e-4;
  double lr_min = 0.0;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  Index epochs = 1;
  Index batch_size = 8;
  std::uint64_t seed = 0;
  bool deterministic = true;

  void validate() const {
    if (lr_min < 0 || lr_max < lr_min)
      throw ConfigError("learning rates must satisfy lr_max >= lr_min >= 0");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
      throw ConfigError("betas must lie in [0,1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (adam_epsilon <= 0) throw ConfigError("adam_epsilon must be positive");
  }
};

/// Geometry stage shared by training and evaluation: how many centroids,
/// how many neighbors, whether tokens are arranged along the space-filling
/// curve, and the quantization box.
struct PipelineConfig {
  Index n_s = 128;
  Index k = 32;
  bool sequencer = true;
  MortonConfig morton{};

  void validate() const {
    if (n_s < 1 || k < 1) throw ConfigError("n_s and k must be positive");
    morton.validate();
  }
};

// ---- learning-rate schedule ------------------------------------------------------

/// Cosine decay from lr_max (step 0) to lr_min (step total_steps). The
/// endpoints are returned exactly rather than through the cosine, whose
/// rounded pi would leave residue.
inline double cosine_lr(Index step, Index total_steps, double lr_max, double lr_min) {
  if (total_steps == 0) throw InvalidArgument("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw InvalidArgument("cosine_lr: step " + std::to_string(step) + " outside [0," +
                          std::to_string(total_steps) + "]");
  if (step == 0) return lr_max;
  if (step == total_steps) return lr_min;
  const double x = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * x)) / 2.0;
}

// ---- optimizer -------------------------------------------------------------------

/// Whether a named tensor receives decoupled weight decay: projection and
/// head matrices do; biases, layer-norm terms, and frozen tensors do not.
inline bool default_decay(const std::string& name) {
  for (const char* suffix : {".w1", ".w2", ".w3", ".enc", ".dec", ".weight"}) {
    const std::string s(suffix);
    if (name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0)
      return true;
  }
  return false;
}

/// AdamW over the requires_grad subset of a named tensor list. Decay is
/// decoupled: p <- p - lr*wd*p - lr*mhat/(sqrt(vhat)+eps), with the decay
/// term read from the pre-update parameter. A missing gradient is treated
/// as zero, so moments still decay and weight decay still applies.
template <typename Scalar>
class AdamW {
 public:
  AdamW(const std::vector<std::pair<std::string, Tensor<Scalar>*>>& named,
        const TrainConfig& cfg)
      : cfg_(cfg) {
    cfg.validate();
    for (const auto& [name, t] : named) {
      if (!t->requires_grad()) continue;
      Slot s;
      s.name = name;
      s.param = t;
      s.decay = default_decay(name);
      s.m.assign(static_cast<std::size_t>(t->numel()), Scalar(0));
      s.v.assign(static_cast<std::size_t>(t->numel()), Scalar(0));
      slots_.push_back(std::move(s));
    }
  }

  Index step_count() const { return t_; }
  std::size_t slot_count() const { return slots_.size(); }

  void zero_grads() {
    for (auto& s : slots_) s.param->zero_grad();
  }

  /// One update over all tracked tensors with the given learning rate.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& s : slots_) {
      Tensor<Scalar>& p = *s.param;
      if (p.numel() != static_cast<Index>(s.m.size()))
        throw InternalError("optimizer state for '" + s.name + "' no longer matches its tensor");
      const bool has_grad = p.has_grad();
      for (Index i = 0; i < p.numel(); ++i) {
        const std::size_t u = static_cast<std::size_t>(i);
        const double g = has_grad ? static_cast<double>(p.grad()[u]) : 0.0;
        const double m = cfg_.beta1 * static_cast<double>(s.m[u]) + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(s.v[u]) + (1.0 - cfg_.beta2) * g * g;
        s.m[u] = static_cast<Scalar>(m);
        s.v[u] = static_cast<Scalar>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double update = lr * mhat / (std::sqrt(vhat) + cfg_.adam_epsilon);
        if (s.decay) update += lr * cfg_.weight_decay * static_cast<double>(p.at(i));
        p.at(i) = static_cast<Scalar>(static_cast<double>(p.at(i)) - update);
      }
    }
  }

 private:
  struct Slot {
    std::string name;
    Tensor<Scalar>* param;
    std::vector<Scalar> m, v;
    bool decay = false;
  };

  TrainConfig cfg_;
  std::vector<Slot> slots_;
  Index t_ = 0;
};

// ---- prepared samples ------------------------------------------------------------

/// Geometry is deterministic per cloud, so it runs once up front; epochs
/// then reuse the featurized rows and permutations.
struct PreparedClassSample {
  SampleInputs inputs;
  Index label = -1;
};

struct PreparedSegSample {
  SampleInputs inputs;
  Tensor<float> interpolation;  // N x n_s convex weights
  Tensor<float> coords;         // N x 3 normalized coordinates
  std::vector<Index> labels;
};

inline std::vector<PreparedClassSample> prepare_classification(
    const ClassificationDataset& data, const PipelineConfig& pipe) {
  data.validate();
  pipe.validate();
  std::vector<PreparedClassSample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    PointCloud normalized = normalize_unit_sphere(s.cloud);
    GroupedPoints grouped = group_and_order(normalized, pipe.n_s, pipe.k, pipe.morton);
    PreparedClassSample p;
    p.inputs = prepare_inputs(normalized, grouped, pipe.sequencer);
    p.label = s.label;
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<PreparedSegSample> prepare_segmentation(const SegmentationDataset& data,
                                                           const PipelineConfig& pipe) {
  data.validate();
  pipe.validate();
  std::vector<PreparedSegSample> out;
  out.reserve(data.samples.size());
  for (const auto& s : data.samples) {
    PointCloud normalized = normalize_unit_sphere(s.cloud);
    GroupedPoints grouped = group_and_order(normalized, pipe.n_s, pipe.k, pipe.morton);
    PreparedSegSample p;
    p.inputs = prepare_inputs(normalized, grouped, pipe.sequencer);
    p.interpolation = build_interpolation<float>(normalized, grouped);
    p.coords = Tensor<float>::zeros({normalized.size(), Index(3)});
    for (Index i = 0; i < normalized.size(); ++i)
      for (Index a = 0; a < 3; ++a) p.coords.at(i, a) = normalized.points(i, a);
    p.labels = s.labels;
    out.push_back(std::move(p));
  }
  return out;
}

// ---- metrics ---------------------------------------------------------------------

template <typename Scalar>
Index argmax_row(const Tensor<Scalar>& t, Index row) {
  Index best = 0;
  for (Index c = 1; c < t.cols(); ++c)
    if (t.at(row, c) > t.at(row, best)) best = c;
  return best;
}

inline double accuracy_of(const std::vector<Index>& predicted, const std::vector<Index>& truth) {
  if (predicted.size() != truth.size() || truth.empty())
    throw InvalidArgument("accuracy_of: size mismatch or empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (predicted[i] == truth[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

struct SegMetrics {
  std::vector<double> class_iou;    // per part class; meaningful where present
  std::vector<bool> class_present;  // part seen in any truth or prediction
  double miou_class = 0;            // mean over present classes
  double miou_instance = 0;         // mean over instances of per-instance part means
};

/// Intersection-over-union per part. Instance averages skip parts absent
/// from both the truth and the prediction of that instance; class IoU
/// aggregates intersections and unions across all instances.
inline SegMetrics segmentation_metrics(const std::vector<std::vector<Index>>& predicted,
                                       const std::vector<std::vector<Index>>& truth,
                                       Index num_parts) {
  if (predicted.size() != truth.size() || truth.empty())
    throw InvalidArgument("segmentation_metrics: instance count mismatch or empty");
  if (num_parts < 2) throw InvalidArgument("segmentation_metrics: need at least two parts");
  std::vector<double> inter(static_cast<std::size_t>(num_parts), 0);
  std::vector<double> uni(static_cast<std::size_t>(num_parts), 0);
  double instance_sum = 0;
  for (std::size_t s = 0; s < truth.size(); ++s) {
    const auto& p = predicted[s];
    const auto& t = truth[s];
    if (p.size() != t.size() || t.empty())
      throw InvalidArgument("segmentation_metrics: instance " + std::to_string(s) +
                            " prediction/truth size mismatch");
    std::vector<double> pi(static_cast<std::size_t>(num_parts), 0);
    std::vector<double> pu(static_cast<std::size_t>(num_parts), 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const Index a = p[i], b = t[i];
      if (a < 0 || a >= num_parts || b < 0 || b >= num_parts)
        throw InvalidArgument("segmentation_metrics: part label outside [0," +
                              std::to_string(num_parts) + ")");
      if (a == b) {
        pi[static_cast<std::size_t>(a)] += 1;
        pu[static_cast<std::size_t>(a)] += 1;
      } else {
        pu[static_cast<std::size_t>(a)] += 1;
        pu[static_cast<std::size_t>(b)] += 1;
      }
    }
    double part_sum = 0;
    Index part_count = 0;
    for (Index c = 0; c < num_parts; ++c) {
      const std::size_t u = static_cast<std::size_t>(c);
      if (pu[u] == 0) continue;  // part absent from both sides of this instance
      part_sum += pi[u] / pu[u];
      ++part_count;
      inter[u] += pi[u];
      uni[u] += pu[u];
    }
    instance_sum += part_count > 0 ? part_sum / static_cast<double>(part_count) : 0.0;
  }
  SegMetrics out;
  out.class_iou.assign(static_cast<std::size_t>(num_parts), 0);
  out.class_present.assign(static_cast<std::size_t>(num_parts), false);
  double class_sum = 0;
  Index class_count = 0;
  for (Index c = 0; c < num_parts; ++c) {
    const std::size_t u = static_cast<std::size_t>(c);
    if (uni[u] == 0) continue;
    out.class_iou[u] = inter[u] / uni[u];
    out.class_present[u] = true;
    class_sum += out.class_iou[u];
    ++class_count;
  }
  out.miou_class = class_count > 0 ? class_sum / static_cast<double>(class_count) : 0.0;
  out.miou_instance = instance_sum / static_cast<double>(truth.size());
  return out;
}

// ---- evaluation ------------------------------------------------------------------

template <typename Scalar>
double evaluate_prepared(Model<Scalar>& model, const std::vector<PreparedClassSample>& samples) {
  if (samples.empty()) throw InvalidArgument("evaluate: no samples");
  std::vector<Index> pred, truth;
  pred.reserve(samples.size());
  truth.reserve(samples.size());
  for (const auto& s : samples) {
    Graph<Scalar> g;
    auto logits = forward_classify(g, model, s.inputs);
    pred.push_back(argmax_row(g.value(logits), 0));
    truth.push_back(s.label);
  }
  return accuracy_of(pred, truth);
}

template <typename Scalar>
double evaluate_classifier(Model<Scalar>& model, const ClassificationDataset& data,
                           const PipelineConfig& pipe) {
  return evaluate_prepared(model, prepare_classification(data, pipe));
}

template <typename Scalar>
SegMetrics evaluate_segmentation_prepared(Model<Scalar>& model,
                                          const std::vector<PreparedSegSample>& samples,
                                          Index num_parts) {
  if (samples.empty()) throw InvalidArgument("evaluate: no samples");
  std::vector<std::vector<Index>> pred, truth;
  for (const auto& s : samples) {
    Graph<Scalar> g;
    auto logits = forward_segment(g, model, s.inputs, s.interpolation, s.coords);
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(g.value(logits).rows()));
    for (Index r = 0; r < g.value(logits).rows(); ++r)
      rows.push_back(argmax_row(g.value(logits), r));
    pred.push_back(std::move(rows));
    truth.push_back(s.labels);
  }
  return segmentation_metrics(pred, truth, num_parts);
}

template <typename Scalar>
SegMetrics evaluate_segmentation(Model<Scalar>& model, const SegmentationDataset& data,
                                 const PipelineConfig& pipe) {
  return evaluate_segmentation_prepared(model, prepare_segmentation(data, pipe), data.num_parts);
}

// ---- training loop ---------------------------------------------------------------

struct HistoryRecord {
  Index epoch = 0;     // 1-based
  Index step = 0;      // cumulative optimizer steps at epoch end
  double loss = 0;     // mean over the epoch's samples
  double accuracy = 0; // training accuracy from the same forward passes
  double lr = 0;       // learning rate of the epoch's last step
};

/// Called after each epoch; return true to stop early (the history keeps
/// the epochs actually run).
using StopFn = std::function<bool(const HistoryRecord&)>;

/// Cross-entropy training over prepared samples. Per epoch: seeded
/// shuffle, fixed-order batches, mean-loss backward per batch, one AdamW
/// step at the cosine rate for that step index. Deterministic given the
/// config seed.
template <typename Scalar>
std::vector<HistoryRecord> train_prepared(Model<Scalar>& model,
                                          const std::vector<PreparedClassSample>& samples,
                                          const TrainConfig& cfg, const StopFn& stop = {}) {
  cfg.validate();
  if (samples.empty()) throw InvalidArgument("train: no samples");
  if (!model.classifier) throw ConfigError("train: model has no classification head");
  const Index n = static_cast<Index>(samples.size());
  const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const Index total_steps = cfg.epochs * steps_per_epoch;

  AdamW<Scalar> opt(named_tensors(model), cfg);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<Index> perm(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  std::vector<HistoryRecord> history;
  Index step = 0;
  for (Index epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(perm);
    double loss_sum = 0;
    Index hits = 0;
    double last_lr = 0;
    for (Index b = 0; b < steps_per_epoch; ++b) {
      const Index lo = b * cfg.batch_size;
      const Index hi = std::min(n, lo + cfg.batch_size);
      opt.zero_grads();
      for (Index i = lo; i < hi; ++i) {
        const PreparedClassSample& s = samples[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        Graph<Scalar> g;
        auto logits = forward_classify(g, model, s.inputs);
        if (argmax_row(g.value(logits), 0) == s.label) ++hits;
        auto loss = g.cross_entropy_with_logits(logits, std::vector<Index>{s.label});
        loss_sum += static_cast<double>(g.value(loss).at(0));
        g.backward(g.scalar_mul(loss, Scalar(1) / static_cast<Scalar>(hi - lo)));
      }
      last_lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min);
      opt.step(last_lr);
      ++step;
    }
    HistoryRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.accuracy = static_cast<double>(hits) / static_cast<double>(n);
    rec.lr = last_lr;
    history.push_back(rec);
    if (stop && stop(rec)) break;
  }
  return history;
}

template <typename Scalar>
std::vector<HistoryRecord> train_classifier(Model<Scalar>& model,
                                            const ClassificationDataset& data,
                                            const TrainConfig& cfg, const PipelineConfig& pipe,
                                            const StopFn& stop = {}) {
  return train_prepared(model, prepare_classification(data, pipe), cfg, stop);
}

// ---- few-shot episodes -----------------------------------------------------------

struct EpisodeSpec {
  Index n_way = 5;
  Index k_shot = 10;
  Index test_per_class = 20;
  Index repeats = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_way < 2) throw InvalidArgument("episode needs n_way >= 2");
    if (k_shot < 1) throw InvalidArgument("episode needs k_shot >= 1");
    if (test_per_class < 1) throw InvalidArgument("episode needs test samples");
    if (repeats < 1) throw InvalidArgument("episode needs repeats >= 1");
  }
};

/// One episode's splits. Labels are episode-local (0..n_way-1); `classes`
/// maps them back to dataset labels.
struct EpisodeSplit {
  ClassificationDataset train;
  ClassificationDataset test;
  std::vector<Index> classes;
};

inline EpisodeSplit sample_fewshot_episode(const ClassificationDataset& data,
                                           const EpisodeSpec& spec, Index episode_index) {
  spec.validate();
  data.validate();
  if (data.num_classes < spec.n_way)
    throw InvalidArgument("dataset has " + std::to_string(data.num_classes) +
                          " classes, episode wants " + std::to_string(spec.n_way));
  Rng rng(derive_seed(derive_seed(spec.seed, "episode"),
                      static_cast<std::uint64_t>(episode_index)));
  std::vector<Index> all_classes(static_cast<std::size_t>(data.num_classes));
  for (Index c = 0; c < data.num_classes; ++c) all_classes[static_cast<std::size_t>(c)] = c;
  rng.shuffle(all_classes);
  all_classes.resize(static_cast<std::size_t>(spec.n_way));

  const auto pools = data.by_class();
  EpisodeSplit out;
  out.classes = all_classes;
  out.train.num_classes = spec.n_way;
  out.test.num_classes = spec.n_way;
  for (Index local = 0; local < spec.n_way; ++local) {
    const Index cls = all_classes[static_cast<std::size_t>(local)];
    std::vector<Index> pool = pools[static_cast<std::size_t>(cls)];
    if (static_cast<Index>(pool.size()) < spec.k_shot + spec.test_per_class)
      throw InvalidArgument("class " + std::to_string(cls) + " has " +
                            std::to_string(pool.size()) + " samples, episode needs " +
                            std::to_string(spec.k_shot + spec.test_per_class));
    rng.shuffle(pool);
    for (Index i = 0; i < spec.k_shot; ++i)
      out.train.samples.push_back(
          {data.samples[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])].cloud, local});
    for (Index i = 0; i < spec.test_per_class; ++i)
      out.test.samples.push_back(
          {data.samples[static_cast<std::size_t>(pool[static_cast<std::size_t>(spec.k_shot + i)])]
               .cloud,
           local});
  }
  return out;
}

struct FewshotResult {
  double mean = 0;
  double stddev = 0;  // population standard deviation over repeats
  std::vector<double> accuracies;
};

inline FewshotResult aggregate_fewshot(std::vector<double> accuracies) {
  if (accuracies.empty()) throw InvalidArgument("aggregate_fewshot: no accuracies");
  FewshotResult out;
  out.accuracies = std::move(accuracies);
  for (double a : out.accuracies) out.mean += a;
  out.mean /= static_cast<double>(out.accuracies.size());
  double var = 0;
  for (double a : out.accuracies) var += (a - out.mean) * (a - out.mean);
  out.stddev = std::sqrt(var / static_cast<double>(out.accuracies.size()));
  return out;
}

/// Few-shot protocol: per episode, a caller-built fresh model (the frozen
/// backbone is shared across episodes; trainable parts are re-initialized)
/// trains on the episode's support set and is scored on its query set.
template <typename Scalar, typename BuildFn>
FewshotResult run_fewshot(BuildFn&& build_model, const ClassificationDataset& data,
                          const EpisodeSpec& spec, const TrainConfig& cfg,
                          const PipelineConfig& pipe) {
  spec.validate();
  std::vector<double> accuracies;
  accuracies.reserve(static_cast<std::size_t>(spec.repeats));
  for (Index e = 0; e < spec.repeats; ++e) {
    EpisodeSplit split = sample_fewshot_episode(data, spec, e);
    Model<Scalar> model = build_model(e, spec.n_way);
    train_classifier(model, split.train, cfg, pipe);
    accuracies.push_back(evaluate_classifier(model, split.test, pipe));
  }
  return aggregate_fewshot(std::move(accuracies));
}

}  // namespace apf
