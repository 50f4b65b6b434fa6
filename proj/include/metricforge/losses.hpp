#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/matrix.hpp"

namespace metricforge {

/// Hyperparameters of the combined ranking-plus-classification objective.
struct LossConfig {
  double radius = 0.7;         // positives are pulled inside this hypersphere
  double temperature = 1.0;    // sharpness of the negative-example weighting
  double lin_weight = 0.4;     // weight of the intraclass term in the total
  double epsilon_ls = 0.1;     // label-smoothing coefficient
  bool detach_weights = true;  // treat negative weights as constants in the
                               // backward pass (see m_loss_grad)

  /// Unit-norm features can be at most this far apart.
  static constexpr double max_dist = 2.0;

  void validate() const {
    if (!(radius > 0.0 && radius < max_dist)) {
      throw ConfigInvalid("radius must lie in (0, 2)");
    }
    if (!(temperature >= 0.0)) {
      throw ConfigInvalid("temperature must be >= 0");
    }
    if (!(lin_weight >= 0.0)) {
      throw ConfigInvalid("lin_weight must be >= 0");
    }
    if (!(epsilon_ls >= 0.0 && epsilon_ls < 1.0)) {
      throw ConfigInvalid("epsilon_ls must lie in [0, 1)");
    }
  }
};

struct LossBreakdown {
  double lp = 0.0;          // mean positive-pair hinge over anchors
  double ln = 0.0;          // mean weighted negative-pair hinge over anchors
  double lin = 0.0;         // lp + ln
  double softmax_ls = 0.0;  // label-smoothed cross-entropy
  double m_loss = 0.0;      // softmax_ls + lin_weight * lin
};

struct GradPacket {
  Matrix d_embeddings;  // B x D, gradient of m_loss w.r.t. the features
  Matrix d_logits;      // B x C, gradient of m_loss w.r.t. the logits
};

/// Hinge for one pair: positives pay for leaving the target radius,
/// negatives for being closer than the maximum attainable distance.
inline double pairwise_loss(double d, bool same_class, const LossConfig& cfg) {
  return same_class ? std::max(d - cfg.radius, 0.0)
                    : std::max(LossConfig::max_dist - d, 0.0);
}

/// Unnormalized weight of a negative pair; closer negatives weigh more.
inline double negative_weight(double d, const LossConfig& cfg) {
  return std::exp(-d) * std::exp(cfg.temperature * (LossConfig::max_dist - d));
}

/// Mean hinge over the anchor's positive partners.
inline double positive_loss(std::size_t anchor, const EmbeddingBatch& batch,
                            const DistanceMatrix& dist, const LossConfig& cfg) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (j == anchor || batch.class_ids[j] != batch.class_ids[anchor]) continue;
    sum += pairwise_loss(dist.values.at(anchor, j), true, cfg);
    ++count;
  }
  if (count == 0) {
    throw NoPositives("anchor " + std::to_string(anchor) +
                      " has no positive pair in the batch");
  }
  return sum / static_cast<double>(count);
}

/// Weight-normalized hinge over the anchor's negative partners. The weights
/// are normalized in log space so large temperatures cannot overflow.
inline double negative_loss(std::size_t anchor, const EmbeddingBatch& batch,
                            const DistanceMatrix& dist, const LossConfig& cfg) {
  std::vector<double> log_w;
  std::vector<double> hinge;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    if (j == anchor || batch.class_ids[j] == batch.class_ids[anchor]) continue;
    const double d = dist.values.at(anchor, j);
    // log of exp(-d) * exp(T * (2 - d))
    log_w.push_back(-(1.0 + cfg.temperature) * d +
                    cfg.temperature * LossConfig::max_dist);
    hinge.push_back(pairwise_loss(d, false, cfg));
  }
  if (log_w.empty()) {
    throw NoNegatives("anchor " + std::to_string(anchor) +
                      " has no negative pair in the batch");
  }
  const double mx = *std::max_element(log_w.begin(), log_w.end());
  double sum_exp = 0.0;
  for (double lw : log_w) sum_exp += std::exp(lw - mx);
  const double lse = mx + std::log(sum_exp);
  double loss = 0.0;
  for (std::size_t t = 0; t < log_w.size(); ++t) {
    loss += std::exp(log_w[t] - lse) * hinge[t];
  }
  return loss;
}

namespace detail {

struct LinTotals {
  double lp_mean = 0.0;
  double ln_mean = 0.0;
};

inline LinTotals lin_components(const EmbeddingBatch& batch,
                                const DistanceMatrix& dist,
                                const LossConfig& cfg) {
  const std::size_t b = batch.size();
  double lp_sum = 0.0;
  double ln_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    lp_sum += positive_loss(i, batch, dist, cfg);
    ln_sum += negative_loss(i, batch, dist, cfg);
  }
  return {lp_sum / static_cast<double>(b), ln_sum / static_cast<double>(b)};
}

}  // namespace detail

/// Ranking objective over the whole batch: mean over anchors of the positive
/// and weighted negative hinges.
inline double lin_loss(const EmbeddingBatch& batch, const LossConfig& cfg) {
  batch.validate();
  cfg.validate();
  const DistanceMatrix dist = pairwise_distances(batch);
  const detail::LinTotals totals = detail::lin_components(batch, dist, cfg);
  return totals.lp_mean + totals.ln_mean;
}

/// Label-smoothed softmax cross-entropy, mean over rows, computed with the
/// log-sum-exp shift so large logits stay finite.
inline double softmax_ls(const Matrix& logits, const std::vector<int>& class_ids,
                         double epsilon_ls) {
  const std::size_t b = logits.rows;
  const std::size_t c = logits.cols;
  if (b == 0 || c < 2) {
    throw ConfigInvalid("softmax_ls needs at least one row and two classes");
  }
  if (class_ids.size() != b) {
    throw Error("softmax_ls: label count does not match logits rows");
  }
  double total = 0.0;
  const double uniform_q = epsilon_ls / static_cast<double>(c);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.row(i);
    const int y = class_ids[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("softmax_ls: label " + std::to_string(y) +
                  " out of range for " + std::to_string(c) + " classes");
    }
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum_exp = 0.0;
    for (double v : row) sum_exp += std::exp(v - mx);
    const double lse = mx + std::log(sum_exp);
    // targets sum to one, so the row loss is lse - sum_k q_k * logit_k
    double q_dot_logits = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double q =
          uniform_q + (static_cast<int>(k) == y ? 1.0 - epsilon_ls : 0.0);
      q_dot_logits += q * row[k];
    }
    total += lse - q_dot_logits;
  }
  return total / static_cast<double>(b);
}

/// Combined objective. lin is reported as lp + ln and m_loss as
/// softmax_ls + lin_weight * lin, composed exactly in that order so the
/// breakdown identities hold to the last bit.
inline LossBreakdown m_loss(const EmbeddingBatch& batch, const Matrix& logits,
                            const LossConfig& cfg) {
  batch.validate();
  cfg.validate();
  if (logits.rows != batch.size()) {
    throw Error("m_loss: logits row count does not match batch size");
  }
  const DistanceMatrix dist = pairwise_distances(batch);
  const detail::LinTotals totals = detail::lin_components(batch, dist, cfg);
  LossBreakdown out;
  out.lp = totals.lp_mean;
  out.ln = totals.ln_mean;
  out.lin = out.lp + out.ln;
  out.softmax_ls = softmax_ls(logits, batch.class_ids, cfg.epsilon_ls);
  out.m_loss = out.softmax_ls + cfg.lin_weight * out.lin;
  return out;
}

namespace detail {

/// Gradient of softmax_ls w.r.t. the logits: (p - q) / B per row.
inline Matrix softmax_ls_grad(const Matrix& logits,
                              const std::vector<int>& class_ids,
                              double epsilon_ls) {
  const std::size_t b = logits.rows;
  const std::size_t c = logits.cols;
  Matrix grad(b, c);
  const double uniform_q = epsilon_ls / static_cast<double>(c);
  for (std::size_t i = 0; i < b; ++i) {
    const auto row = logits.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum_exp = 0.0;
    for (double v : row) sum_exp += std::exp(v - mx);
    for (std::size_t k = 0; k < c; ++k) {
      const double p = std::exp(row[k] - mx) / sum_exp;
      const double q =
          uniform_q +
          (static_cast<int>(k) == class_ids[i] ? 1.0 - epsilon_ls : 0.0);
      grad.at(i, k) = (p - q) / static_cast<double>(b);
    }
  }
  return grad;
}

/// Gradient of the batch-mean ranking objective w.r.t. the features (without
/// the lin_weight factor). Hinge subgradients are zero exactly at their
/// boundaries. With detach_weights the normalized negative weights are held
/// constant; otherwise their dependence on the distances is differentiated
/// too, which adds (1 + T) * (Ln_i - hinge_j) per negative.
inline Matrix lin_grad_embeddings(const EmbeddingBatch& batch,
                                  const DistanceMatrix& dist,
                                  const LossConfig& cfg) {
  const std::size_t b = batch.size();
  const std::size_t d_dim = batch.dim();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      if (dist.values.at(i, j) < 1e-9) {
        throw DegenerateDistance("samples " + std::to_string(i) + " and " +
                                 std::to_string(j) +
                                 " are closer than 1e-9 apart");
      }
    }
  }
  Matrix grad(b, d_dim);
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
  std::vector<double> log_w;
  std::vector<double> w_hat;
  std::vector<double> hinge;
  for (std::size_t i = 0; i < b; ++i) {
    positives.clear();
    negatives.clear();
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      (batch.class_ids[j] == batch.class_ids[i] ? positives : negatives)
          .push_back(j);
    }
    if (positives.empty()) {
      throw NoPositives("anchor " + std::to_string(i) +
                        " has no positive pair in the batch");
    }
    if (negatives.empty()) {
      throw NoNegatives("anchor " + std::to_string(i) +
                        " has no negative pair in the batch");
    }

    const double inv_np = 1.0 / static_cast<double>(positives.size());
    for (std::size_t j : positives) {
      const double d = dist.values.at(i, j);
      if (d <= cfg.radius) continue;
      const double coeff = inv_b * inv_np / d;
      for (std::size_t k = 0; k < d_dim; ++k) {
        const double diff = batch.features.at(i, k) - batch.features.at(j, k);
        grad.at(i, k) += coeff * diff;
        grad.at(j, k) -= coeff * diff;
      }
    }

    log_w.clear();
    w_hat.clear();
    hinge.clear();
    for (std::size_t j : negatives) {
      const double d = dist.values.at(i, j);
      log_w.push_back(-(1.0 + cfg.temperature) * d +
                      cfg.temperature * LossConfig::max_dist);
      hinge.push_back(pairwise_loss(d, false, cfg));
    }
    const double mx = *std::max_element(log_w.begin(), log_w.end());
    double sum_exp = 0.0;
    for (double lw : log_w) sum_exp += std::exp(lw - mx);
    const double lse = mx + std::log(sum_exp);
    double ln_i = 0.0;
    for (std::size_t t = 0; t < negatives.size(); ++t) {
      w_hat.push_back(std::exp(log_w[t] - lse));
      ln_i += w_hat[t] * hinge[t];
    }
    for (std::size_t t = 0; t < negatives.size(); ++t) {
      const std::size_t j = negatives[t];
      const double d = dist.values.at(i, j);
      const double hinge_slope = d < LossConfig::max_dist ? -1.0 : 0.0;
      double dloss_dd = w_hat[t] * hinge_slope;
      if (!cfg.detach_weights) {
        dloss_dd +=
            w_hat[t] * (1.0 + cfg.temperature) * (ln_i - hinge[t]);
      }
      if (dloss_dd == 0.0) continue;
      const double coeff = inv_b * dloss_dd / d;
      for (std::size_t k = 0; k < d_dim; ++k) {
        const double diff = batch.features.at(i, k) - batch.features.at(j, k);
        grad.at(i, k) += coeff * diff;
        grad.at(j, k) -= coeff * diff;
      }
    }
  }
  return grad;
}

}  // namespace detail

/// Analytic gradient of m_loss. d_embeddings carries lin_weight times the
/// ranking-term gradient; d_logits carries the softmax term.
inline GradPacket m_loss_grad(const EmbeddingBatch& batch, const Matrix& logits,
                              const LossConfig& cfg) {
  batch.validate();
  cfg.validate();
  if (logits.rows != batch.size()) {
    throw Error("m_loss_grad: logits row count does not match batch size");
  }
  for (int y : batch.class_ids) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols) {
      throw Error("m_loss_grad: label " + std::to_string(y) +
                  " out of range for " + std::to_string(logits.cols) +
                  " classes");
    }
  }
  const DistanceMatrix dist = pairwise_distances(batch);
  GradPacket packet;
  packet.d_embeddings = detail::lin_grad_embeddings(batch, dist, cfg);
  for (double& v : packet.d_embeddings.data) v *= cfg.lin_weight;
  packet.d_logits =
      detail::softmax_ls_grad(logits, batch.class_ids, cfg.epsilon_ls);
  if (!packet.d_embeddings.all_finite() || !packet.d_logits.all_finite()) {
    throw NonFiniteLoss("m_loss_grad produced a non-finite gradient");
  }
  return packet;
}

}  // namespace metricforge
