#pragma once

// Finite-difference verification of the analytic gradients. Two loss
// surfaces are checked per trial: the combined loss as a function of the
// embedding/logit matrices, and the same loss through the full model as a
// function of every trainable parameter tensor.
//
// detach_weights needs care here. With it on (the default), the backward
// pass treats the normalized negative weights as constants, so the analytic
// gradient is not the derivative of the plain loss value. Each trial is
// therefore run twice: once with detach_weights=false against the true
// loss, and once with detach_weights=true against a surrogate that reuses
// the weights captured at the base point.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/matrix.hpp"
#include "metricforge/model.hpp"
#include "metricforge/rng.hpp"

namespace metricforge {

struct GradCheckOptions {
  std::uint64_t seed = 7;
  std::size_t trials = 100;
  double step = 1e-5;       // central-difference half step
  double tolerance = 1e-4;  // max allowed relative error
  // Instances are redrawn until every pair distance clears the hinge
  // boundaries by this much, so the difference stencil cannot straddle a
  // kink when wiggling features directly.
  double boundary_margin = 1e-3;
  // Redraw margins for the model surface: ReLU pre-activations must sit at
  // least relu_margin from zero and every pre-BN column needs this much
  // batch standard deviation (a near-constant column makes 1/sigma huge and
  // finite differences ill-conditioned).
  double relu_margin = 1e-4;
  double min_column_std = 0.1;
  // Relative-error denominator floor: coordinates with tiny gradients are
  // effectively held to an absolute tolerance of tolerance * floor.
  double denominator_floor = 1e-3;
  bool check_model_surface = true;

  void validate() const {
    if (trials == 0) throw ConfigInvalid("gradcheck needs at least one trial");
    if (!(step > 0.0) || !(tolerance > 0.0)) {
      throw ConfigInvalid("gradcheck step and tolerance must be positive");
    }
  }
};

struct GradCheckReport {
  std::size_t trials_run = 0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;  // stencil straddled a kink; see signature
  double max_rel_err = 0.0;
  double max_rel_err_embeddings = 0.0;
  double max_rel_err_logits = 0.0;
  double max_rel_err_params = 0.0;
  std::string worst_coordinate;

  bool passed(double tolerance) const {
    return coords_checked > 0 && max_rel_err < tolerance;
  }
};

namespace detail {

inline double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / denom;
}

/// Normalized negative weights per anchor, partners in ascending index
/// order; the frozen-weight surrogate consumes them positionally.
inline std::vector<std::vector<double>> capture_negative_weights(
    const EmbeddingBatch& batch, const DistanceMatrix& dist,
    const LossConfig& cfg) {
  const std::size_t b = batch.size();
  std::vector<std::vector<double>> weights(b);
  std::vector<double> log_w;
  for (std::size_t i = 0; i < b; ++i) {
    log_w.clear();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i || batch.class_ids[j] == batch.class_ids[i]) continue;
      log_w.push_back(-(1.0 + cfg.temperature) * dist.values.at(i, j) +
                      cfg.temperature * LossConfig::max_dist);
    }
    if (log_w.empty()) {
      throw NoNegatives("anchor " + std::to_string(i) +
                        " has no negative pair in the batch");
    }
    const double mx = *std::max_element(log_w.begin(), log_w.end());
    double sum_exp = 0.0;
    for (double lw : log_w) sum_exp += std::exp(lw - mx);
    const double lse = mx + std::log(sum_exp);
    weights[i].reserve(log_w.size());
    for (double lw : log_w) weights[i].push_back(std::exp(lw - lse));
  }
  return weights;
}

/// Ranking loss with externally supplied negative weights. This is the
/// function whose true derivative the detached backward pass computes.
inline double lin_loss_frozen(const EmbeddingBatch& batch,
                              const DistanceMatrix& dist, const LossConfig& cfg,
                              const std::vector<std::vector<double>>& frozen) {
  const std::size_t b = batch.size();
  double lp_sum = 0.0;
  double ln_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    lp_sum += positive_loss(i, batch, dist, cfg);
    double ln_i = 0.0;
    std::size_t t = 0;
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i || batch.class_ids[j] == batch.class_ids[i]) continue;
      ln_i += frozen[i][t] * pairwise_loss(dist.values.at(i, j), false, cfg);
      ++t;
    }
    ln_sum += ln_i;
  }
  return lp_sum / static_cast<double>(b) + ln_sum / static_cast<double>(b);
}

/// Loss value for finite differencing over features/logits. frozen == null
/// means the live loss, otherwise the frozen-weight surrogate.
inline double combined_loss_value(
    const EmbeddingBatch& batch, const Matrix& logits, const LossConfig& cfg,
    const std::vector<std::vector<double>>* frozen) {
  const DistanceMatrix dist = pairwise_distances(batch);
  double lin;
  if (frozen != nullptr) {
    lin = lin_loss_frozen(batch, dist, cfg, *frozen);
  } else {
    const LinTotals totals = lin_components(batch, dist, cfg);
    lin = totals.lp_mean + totals.ln_mean;
  }
  return softmax_ls(logits, batch.class_ids, cfg.epsilon_ls) +
         cfg.lin_weight * lin;
}

/// Which side of each kink an evaluation landed on: ReLU signs plus
/// positive-hinge activations. A finite-difference pair whose signatures
/// disagree straddles a non-smooth point and is skipped.
struct ActivationSignature {
  std::vector<char> bits;
  bool operator==(const ActivationSignature&) const = default;
};

struct PipelineEval {
  double loss = 0.0;
  ActivationSignature signature;
};

inline PipelineEval pipeline_loss(
    const ModelParams& params, const Matrix& inputs,
    const std::vector<int>& labels, const LossConfig& cfg,
    const std::vector<std::vector<double>>* frozen) {
  const ForwardTrace trace = forward(params, inputs, RunMode::train);
  EmbeddingBatch batch;
  batch.features = trace.post_bn_normalized;
  batch.class_ids = labels;
  const DistanceMatrix dist = pairwise_distances(batch);
  double lin;
  if (frozen != nullptr) {
    lin = lin_loss_frozen(batch, dist, cfg, *frozen);
  } else {
    const LinTotals totals = lin_components(batch, dist, cfg);
    lin = totals.lp_mean + totals.ln_mean;
  }
  PipelineEval out;
  out.loss =
      softmax_ls(trace.logits, labels, cfg.epsilon_ls) + cfg.lin_weight * lin;
  const std::size_t n_layers = params.encoder_weights.size();
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    for (double v : trace.pre_activations[l].data) {
      out.signature.bits.push_back(v > 0.0 ? 1 : 0);
    }
  }
  const std::size_t b = batch.size();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      if (batch.class_ids[i] != batch.class_ids[j]) continue;
      out.signature.bits.push_back(dist.values.at(i, j) > cfg.radius ? 1 : 0);
    }
  }
  return out;
}

struct LossInstance {
  LossConfig cfg;
  EmbeddingBatch batch;
  Matrix logits;
};

inline std::vector<int> round_robin_labels(std::size_t b, int c, Rng& rng) {
  std::vector<int> labels(b);
  for (std::size_t i = 0; i < b; ++i) labels[i] = static_cast<int>(i % c);
  rng.shuffle(labels);
  return labels;
}

inline Matrix normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal();
  return m;
}

inline LossConfig random_loss_config(Rng& rng) {
  static constexpr double kRadii[] = {0.6, 0.7, 0.8};
  static constexpr double kTemps[] = {0.5, 1.0, 5.0};
  static constexpr double kWeights[] = {0.2, 0.4, 0.6};
  LossConfig cfg;
  cfg.radius = kRadii[rng.below(3)];
  cfg.temperature = kTemps[rng.below(3)];
  cfg.lin_weight = kWeights[rng.below(3)];
  cfg.epsilon_ls = rng.below(2) == 0 ? 0.1 : 0.0;
  return cfg;
}

/// True when no pair distance sits close to a hinge boundary or to zero.
inline bool distances_clear(const EmbeddingBatch& batch,
                            const LossConfig& cfg, double margin) {
  const DistanceMatrix dist = pairwise_distances(batch);
  const std::size_t b = batch.size();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      const double d = dist.values.at(i, j);
      if (d < 1e-2) return false;
      if (batch.class_ids[i] == batch.class_ids[j]) {
        if (std::fabs(d - cfg.radius) < margin) return false;
      } else {
        if (LossConfig::max_dist - d < margin) return false;
      }
    }
  }
  return true;
}

inline LossInstance make_loss_instance(Rng& rng,
                                       const GradCheckOptions& opts) {
  LossInstance inst;
  inst.cfg = random_loss_config(rng);
  const std::size_t b = rng.below(2) == 0 ? 8 : 16;
  const int c = rng.below(2) == 0 ? 2 : 4;
  static constexpr std::size_t kDims[] = {4, 8, 16, 32};
  const std::size_t d = kDims[rng.below(4)];
  inst.batch.class_ids = round_robin_labels(b, c, rng);
  for (int attempt = 0; attempt < 200; ++attempt) {
    inst.batch.features = l2_normalize_rows(normal_matrix(b, d, rng));
    if (distances_clear(inst.batch, inst.cfg, opts.boundary_margin)) {
      inst.logits = normal_matrix(b, static_cast<std::size_t>(c), rng);
      return inst;
    }
  }
  throw Error("gradcheck: could not draw features clear of hinge boundaries");
}

struct ModelInstance {
  LossConfig cfg;
  ModelParams params;
  Matrix inputs;
  std::vector<int> labels;
};

inline bool model_instance_clear(const ModelInstance& inst,
                                 const GradCheckOptions& opts) {
  const ForwardTrace trace =
      forward(inst.params, inst.inputs, RunMode::train);
  const std::size_t n_layers = inst.params.encoder_weights.size();
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    for (double v : trace.pre_activations[l].data) {
      if (std::fabs(v) < opts.relu_margin) return false;
    }
  }
  const Matrix& pre_bn = trace.activations.back();
  const std::size_t b = pre_bn.rows;
  for (std::size_t j = 0; j < pre_bn.cols; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) mean += pre_bn.at(i, j);
    mean /= static_cast<double>(b);
    double var = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double cdiff = pre_bn.at(i, j) - mean;
      var += cdiff * cdiff;
    }
    var /= static_cast<double>(b);
    if (std::sqrt(var) < opts.min_column_std) return false;
  }
  EmbeddingBatch batch;
  batch.features = trace.post_bn_normalized;
  batch.class_ids = inst.labels;
  return distances_clear(batch, inst.cfg, opts.boundary_margin);
}

inline ModelInstance make_model_instance(Rng& rng,
                                         const GradCheckOptions& opts) {
  ModelInstance inst;
  inst.cfg = random_loss_config(rng);
  const std::size_t b = rng.below(2) == 0 ? 8 : 16;
  const int c = rng.below(2) == 0 ? 2 : 4;
  const int input_dim = rng.below(2) == 0 ? 3 : 6;
  const int embed_dim = rng.below(2) == 0 ? 4 : 8;
  std::vector<int> layers;
  if (rng.below(2) == 0) {
    layers = {input_dim, 7, embed_dim};
  } else {
    layers = {input_dim, 9, 5, embed_dim};
  }
  inst.labels = round_robin_labels(b, c, rng);
  for (int attempt = 0; attempt < 200; ++attempt) {
    inst.params = init_params(layers, c, rng.next_u64());
    inst.inputs = normal_matrix(b, static_cast<std::size_t>(input_dim), rng);
    if (model_instance_clear(inst, opts)) return inst;
  }
  throw Error("gradcheck: could not draw a model clear of kinks");
}

struct CoordRecorder {
  const GradCheckOptions& opts;
  GradCheckReport& report;
  double* surface_max = nullptr;

  void record(double analytic, double fd, const std::string& where) {
    const double rel = relative_error(analytic, fd, opts.denominator_floor);
    ++report.coords_checked;
    if (surface_max != nullptr && rel > *surface_max) *surface_max = rel;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_coordinate = where;
    }
  }
};

/// Pointer-and-name view over every trainable tensor, in checkpoint order.
struct TensorView {
  std::string name;
  double* values;
  const double* grads;
  std::size_t size;
};

inline std::vector<TensorView> tensor_views(ModelParams& params,
                                            const ParamGrads& grads) {
  std::vector<TensorView> views;
  for (std::size_t l = 0; l < params.encoder_weights.size(); ++l) {
    views.push_back({"encoder.w" + std::to_string(l),
                     params.encoder_weights[l].data.data(),
                     grads.encoder_weights[l].data.data(),
                     params.encoder_weights[l].data.size()});
    views.push_back({"encoder.b" + std::to_string(l),
                     params.encoder_biases[l].data(),
                     grads.encoder_biases[l].data(),
                     params.encoder_biases[l].size()});
  }
  views.push_back({"bn.scale", params.bn_scale.data(), grads.bn_scale.data(),
                   params.bn_scale.size()});
  views.push_back({"fc.weight", params.fc_weights.data.data(),
                   grads.fc_weights.data.data(),
                   params.fc_weights.data.size()});
  return views;
}

inline void check_loss_surface(LossInstance inst, bool detach,
                               std::size_t trial, CoordRecorder& rec,
                               GradCheckReport& report,
                               const GradCheckOptions& opts) {
  inst.cfg.detach_weights = detach;
  const GradPacket packet = m_loss_grad(inst.batch, inst.logits, inst.cfg);
  std::vector<std::vector<double>> frozen;
  const std::vector<std::vector<double>>* frozen_ptr = nullptr;
  if (detach) {
    frozen = capture_negative_weights(
        inst.batch, pairwise_distances(inst.batch), inst.cfg);
    frozen_ptr = &frozen;
  }
  const double h = opts.step;
  const std::string tag =
      "trial " + std::to_string(trial) + (detach ? " detached " : " attached ");

  rec.surface_max = &report.max_rel_err_embeddings;
  for (std::size_t i = 0; i < inst.batch.features.rows; ++i) {
    for (std::size_t k = 0; k < inst.batch.features.cols; ++k) {
      double& coord = inst.batch.features.at(i, k);
      const double saved = coord;
      coord = saved + h;
      const double up =
          combined_loss_value(inst.batch, inst.logits, inst.cfg, frozen_ptr);
      coord = saved - h;
      const double down =
          combined_loss_value(inst.batch, inst.logits, inst.cfg, frozen_ptr);
      coord = saved;
      rec.record(packet.d_embeddings.at(i, k), (up - down) / (2.0 * h),
                 tag + "features[" + std::to_string(i) + "," +
                     std::to_string(k) + "]");
    }
  }

  rec.surface_max = &report.max_rel_err_logits;
  for (std::size_t i = 0; i < inst.logits.rows; ++i) {
    for (std::size_t k = 0; k < inst.logits.cols; ++k) {
      double& coord = inst.logits.at(i, k);
      const double saved = coord;
      coord = saved + h;
      const double up =
          combined_loss_value(inst.batch, inst.logits, inst.cfg, frozen_ptr);
      coord = saved - h;
      const double down =
          combined_loss_value(inst.batch, inst.logits, inst.cfg, frozen_ptr);
      coord = saved;
      rec.record(packet.d_logits.at(i, k), (up - down) / (2.0 * h),
                 tag + "logits[" + std::to_string(i) + "," +
                     std::to_string(k) + "]");
    }
  }
}

inline void check_model_surface(ModelInstance inst, bool detach,
                                std::size_t trial, CoordRecorder& rec,
                                GradCheckReport& report,
                                const GradCheckOptions& opts) {
  inst.cfg.detach_weights = detach;
  const ForwardTrace trace =
      forward(inst.params, inst.inputs, RunMode::train);
  EmbeddingBatch batch;
  batch.features = trace.post_bn_normalized;
  batch.class_ids = inst.labels;
  const GradPacket packet = m_loss_grad(batch, trace.logits, inst.cfg);
  const ParamGrads grads =
      backward(inst.params, trace, packet, FeatureTap::post_bn);

  std::vector<std::vector<double>> frozen;
  const std::vector<std::vector<double>>* frozen_ptr = nullptr;
  if (detach) {
    frozen = capture_negative_weights(batch, pairwise_distances(batch),
                                      inst.cfg);
    frozen_ptr = &frozen;
  }
  const PipelineEval base =
      pipeline_loss(inst.params, inst.inputs, inst.labels, inst.cfg,
                    frozen_ptr);
  const double h = opts.step;
  const std::string tag =
      "trial " + std::to_string(trial) + (detach ? " detached " : " attached ");

  rec.surface_max = &report.max_rel_err_params;
  for (TensorView& view : tensor_views(inst.params, grads)) {
    for (std::size_t t = 0; t < view.size; ++t) {
      const double saved = view.values[t];
      view.values[t] = saved + h;
      const PipelineEval up = pipeline_loss(inst.params, inst.inputs,
                                            inst.labels, inst.cfg, frozen_ptr);
      view.values[t] = saved - h;
      const PipelineEval down = pipeline_loss(
          inst.params, inst.inputs, inst.labels, inst.cfg, frozen_ptr);
      view.values[t] = saved;
      if (!(up.signature == base.signature) ||
          !(down.signature == base.signature)) {
        ++report.coords_skipped;
        continue;
      }
      rec.record(view.grads[t], (up.loss - down.loss) / (2.0 * h),
                 tag + view.name + "[" + std::to_string(t) + "]");
    }
  }
}

}  // namespace detail

/// Runs the full battery and reports the worst coordinate seen. The caller
/// decides pass/fail via report.passed(opts.tolerance).
inline GradCheckReport run_gradient_checks(const GradCheckOptions& opts = {}) {
  opts.validate();
  GradCheckReport report;
  detail::CoordRecorder rec{opts, report};
  for (std::size_t trial = 0; trial < opts.trials; ++trial) {
    Rng rng(Rng::derive(opts.seed, trial));
    const detail::LossInstance loss_inst =
        detail::make_loss_instance(rng, opts);
    detail::check_loss_surface(loss_inst, false, trial, rec, report, opts);
    detail::check_loss_surface(loss_inst, true, trial, rec, report, opts);
    if (opts.check_model_surface) {
      const detail::ModelInstance model_inst =
          detail::make_model_instance(rng, opts);
      detail::check_model_surface(model_inst, false, trial, rec, report, opts);
      detail::check_model_surface(model_inst, true, trial, rec, report, opts);
    }
    ++report.trials_run;
  }
  return report;
}

}  // namespace metricforge
