#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/model.hpp"
#include "metricforge/sampler.hpp"
#include "metricforge/synthdata.hpp"

namespace metricforge {

/// Which terms of the combined objective drive the update. The single-term
/// modes zero the other term's contribution (loss value and gradient alike).
enum class TrainMode { combined, lin_only, softmax_only };

struct TrainConfig {
  double base_lr = 0.01;
  int warmup_epochs = 10;
  int total_epochs = 120;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  LossConfig loss;
  int batch_p = 16;
  int batch_k = 4;
  TrainMode mode = TrainMode::combined;
  FeatureTap feature_tap = FeatureTap::post_bn;
  std::vector<int> hidden_sizes = {64};
  int embed_dim = 32;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigInvalid("base_lr must be > 0");
    if (warmup_epochs < 0 || total_epochs < 0 ||
        warmup_epochs > total_epochs) {
      throw ConfigInvalid("need 0 <= warmup_epochs <= total_epochs");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigInvalid("momentum must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) throw ConfigInvalid("weight_decay must be >= 0");
    loss.validate();
    if (batch_p < 1 || batch_k < 1) {
      throw ConfigInvalid("batch_p and batch_k must be >= 1");
    }
    if (mode != TrainMode::softmax_only && (batch_p < 2 || batch_k < 2)) {
      throw ConfigInvalid(
          "ranking modes need batch_p >= 2 and batch_k >= 2 so every anchor "
          "has positives and negatives");
    }
    for (int h : hidden_sizes) {
      if (h < 1) throw ConfigInvalid("hidden sizes must be positive");
    }
    if (embed_dim < 2) throw ConfigInvalid("embed_dim must be >= 2");
  }

  std::vector<int> layer_sizes(int input_dim) const {
    std::vector<int> sizes;
    sizes.push_back(input_dim);
    sizes.insert(sizes.end(), hidden_sizes.begin(), hidden_sizes.end());
    sizes.push_back(embed_dim);
    return sizes;
  }
};

/// Linear warmup to base_lr, then a tenfold drop at 60% and again at 85% of
/// the total epoch budget.
inline double warmup_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ConfigInvalid("epoch must be >= 0");
  if (epoch < cfg.warmup_epochs) {
    return cfg.base_lr * static_cast<double>(epoch + 1) /
           static_cast<double>(cfg.warmup_epochs);
  }
  const int first_drop = static_cast<int>(0.60 * cfg.total_epochs);
  const int second_drop = static_cast<int>(0.85 * cfg.total_epochs);
  double lr = cfg.base_lr;
  if (epoch >= first_drop) lr *= 0.1;
  if (epoch >= second_drop) lr *= 0.1;
  return lr;
}

/// SGD momentum buffers, one per trainable tensor.
struct SgdState {
  std::vector<Matrix> encoder_weights;
  std::vector<std::vector<double>> encoder_biases;
  std::vector<double> bn_scale;
  Matrix fc_weights;

  explicit SgdState(const ModelParams& params) {
    for (const Matrix& w : params.encoder_weights) {
      encoder_weights.emplace_back(w.rows, w.cols);
    }
    for (const std::vector<double>& b : params.encoder_biases) {
      encoder_biases.emplace_back(b.size(), 0.0);
    }
    bn_scale.assign(params.bn_scale.size(), 0.0);
    fc_weights = Matrix(params.fc_weights.rows, params.fc_weights.cols);
  }
};

namespace detail {

inline void sgd_update(double* param, double* velocity, const double* grad,
                       std::size_t n, double lr, double momentum,
                       double weight_decay) {
  for (std::size_t i = 0; i < n; ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

}  // namespace detail

/// One SGD step on one batch. Returns the loss breakdown evaluated before
/// the update. Weight decay applies to every tensor except the batch-norm
/// scale. Running statistics from the forward pass are committed here.
inline LossBreakdown train_step(ModelParams& params, SgdState& opt,
                                const Matrix& inputs,
                                const std::vector<int>& labels,
                                const TrainConfig& cfg, double lr) {
  const ForwardTrace trace = forward(params, inputs, RunMode::train);
  const std::size_t b = inputs.rows;
  const std::size_t d = static_cast<std::size_t>(params.embed_dim());
  const std::size_t c = static_cast<std::size_t>(params.n_classes());

  Matrix lin_features = cfg.feature_tap == FeatureTap::post_bn
                            ? trace.post_bn_normalized
                            : l2_normalize_rows(trace.pre_bn());
  EmbeddingBatch emb{std::move(lin_features), labels, {}};

  LossBreakdown breakdown;
  GradPacket grad{Matrix(b, d), Matrix(b, c)};
  switch (cfg.mode) {
    case TrainMode::combined: {
      breakdown = m_loss(emb, trace.logits, cfg.loss);
      grad = m_loss_grad(emb, trace.logits, cfg.loss);
      break;
    }
    case TrainMode::lin_only: {
      const DistanceMatrix dist = pairwise_distances(emb);
      const detail::LinTotals totals =
          detail::lin_components(emb, dist, cfg.loss);
      breakdown.lp = totals.lp_mean;
      breakdown.ln = totals.ln_mean;
      breakdown.lin = breakdown.lp + breakdown.ln;
      breakdown.softmax_ls = 0.0;
      breakdown.m_loss = breakdown.softmax_ls + cfg.loss.lin_weight * breakdown.lin;
      grad.d_embeddings = detail::lin_grad_embeddings(emb, dist, cfg.loss);
      for (double& v : grad.d_embeddings.data) v *= cfg.loss.lin_weight;
      break;
    }
    case TrainMode::softmax_only: {
      breakdown.softmax_ls =
          softmax_ls(trace.logits, labels, cfg.loss.epsilon_ls);
      breakdown.m_loss = breakdown.softmax_ls;
      grad.d_logits =
          detail::softmax_ls_grad(trace.logits, labels, cfg.loss.epsilon_ls);
      break;
    }
  }
  if (!std::isfinite(breakdown.m_loss) || !std::isfinite(breakdown.lin) ||
      !std::isfinite(breakdown.softmax_ls)) {
    throw NonFiniteLoss("training step produced a non-finite loss");
  }

  const ParamGrads grads = backward(params, trace, grad, cfg.feature_tap);

  for (std::size_t l = 0; l < params.encoder_weights.size(); ++l) {
    detail::sgd_update(params.encoder_weights[l].data.data(),
                       opt.encoder_weights[l].data.data(),
                       grads.encoder_weights[l].data.data(),
                       params.encoder_weights[l].data.size(), lr, cfg.momentum,
                       cfg.weight_decay);
    detail::sgd_update(params.encoder_biases[l].data(),
                       opt.encoder_biases[l].data(),
                       grads.encoder_biases[l].data(),
                       params.encoder_biases[l].size(), lr, cfg.momentum,
                       cfg.weight_decay);
  }
  // no weight decay on the scale: decaying it would fight the neck's job
  detail::sgd_update(params.bn_scale.data(), opt.bn_scale.data(),
                     grads.bn_scale.data(), params.bn_scale.size(), lr,
                     cfg.momentum, 0.0);
  detail::sgd_update(params.fc_weights.data.data(), opt.fc_weights.data.data(),
                     grads.fc_weights.data.data(),
                     params.fc_weights.data.size(), lr, cfg.momentum,
                     cfg.weight_decay);

  params.bn_running_mean = trace.new_running_mean;
  params.bn_running_var = trace.new_running_var;
  return breakdown;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double m_loss = 0.0;
  double lp = 0.0;
  double ln = 0.0;
  double softmax_ls = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  std::string to_jsonl() const {
    std::string out;
    char buf[256];
    for (const EpochRecord& r : records) {
      std::snprintf(buf, sizeof(buf),
                    "{\"epoch\":%d,\"lr\":%.17g,\"m_loss\":%.17g,"
                    "\"lp\":%.17g,\"ln\":%.17g,\"softmax_ls\":%.17g}\n",
                    r.epoch, r.lr, r.m_loss, r.lp, r.ln, r.softmax_ls);
      out += buf;
    }
    return out;
  }

  void write_jsonl(const std::string& path) const {
    std::ofstream file(path, std::ios::binary);
    if (!file) throw Error("cannot open log file for writing: " + path);
    const std::string text = to_jsonl();
    file.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!file) throw Error("failed writing log: " + path);
  }
};

struct FitResult {
  ModelParams params;
  TrainLog log;
};

/// Full training loop: seeded init, one identity-balanced epoch plan per
/// epoch, per-epoch mean losses in the log. Deterministic given (seed,
/// dataset, config).
inline FitResult fit(const SyntheticDataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.rows.empty()) throw Error("fit: dataset is empty");

  // map raw class ids onto [0, C) for the classifier
  std::map<int, int> class_to_index;
  for (const SampleRow& row : dataset.rows) {
    class_to_index.emplace(row.class_id, 0);
  }
  int next = 0;
  for (auto& [cls, index] : class_to_index) index = next++;
  if (next < 2) throw TooFewClasses("fit needs at least 2 classes");
  std::vector<int> mapped_labels;
  mapped_labels.reserve(dataset.rows.size());
  for (const SampleRow& row : dataset.rows) {
    mapped_labels.push_back(class_to_index.at(row.class_id));
  }

  FitResult result;
  result.params = init_params(cfg.layer_sizes(dataset.dim), next, cfg.seed);
  SgdState opt(result.params);

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const double lr = warmup_lr(epoch, cfg);
    const std::vector<BatchPlan> plans =
        epoch_plan(mapped_labels, cfg.batch_p, cfg.batch_k,
                   Rng::derive(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    if (plans.empty()) {
      throw Error("fit: epoch plan is empty; batch_p/batch_k too large "
                  "for this dataset");
    }
    EpochRecord record;
    record.epoch = epoch;
    record.lr = lr;
    for (const BatchPlan& plan : plans) {
      const Matrix inputs = dataset.inputs_for(plan.sample_indices);
      std::vector<int> labels;
      labels.reserve(plan.sample_indices.size());
      for (std::size_t idx : plan.sample_indices) {
        labels.push_back(mapped_labels[idx]);
      }
      const LossBreakdown bd =
          train_step(result.params, opt, inputs, labels, cfg, lr);
      record.m_loss += bd.m_loss;
      record.lp += bd.lp;
      record.ln += bd.ln;
      record.softmax_ls += bd.softmax_ls;
    }
    const double inv_n = 1.0 / static_cast<double>(plans.size());
    record.m_loss *= inv_n;
    record.lp *= inv_n;
    record.ln *= inv_n;
    record.softmax_ls *= inv_n;
    result.log.records.push_back(record);
  }
  return result;
}

}  // namespace metricforge
