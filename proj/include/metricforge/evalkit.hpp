#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/matrix.hpp"
#include "metricforge/model.hpp"
#include "metricforge/rng.hpp"
#include "metricforge/synthdata.hpp"

namespace metricforge {

/// Query and gallery batches. Depending on context the features are either
/// raw inputs (fed to evaluate, which embeds them) or embeddings (fed to the
/// metric functions directly).
struct EvalSplit {
  EmbeddingBatch query;
  EmbeddingBatch gallery;
};

struct RankingMetrics {
  std::vector<double> cmc;  // cmc[k-1] = fraction matched within rank k
  double map = 0.0;
  int n_queries_used = 0;

  double rank1() const { return cmc.empty() ? 0.0 : cmc.front(); }
};

struct RerankConfig {
  int k1 = 20;
  int k2 = 6;
  double lambda = 0.3;

  void validate() const {
    if (k1 < 1) throw ConfigInvalid("k1 must be >= 1");
    if (k2 < 1 || k2 > k1) throw ConfigInvalid("k2 must lie in [1, k1]");
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
      throw ConfigInvalid("lambda must lie in [0, 1]");
    }
  }
};

struct EvalReport {
  std::vector<double> cmc;
  double map = 0.0;
  int n_queries_used = 0;
  std::optional<RankingMetrics> reranked;
};

namespace detail {

/// Gallery order for one query: ascending distance, ties by gallery index,
/// junk entries removed. Junk = same class AND same camera as the query,
/// with camera ids of -1 never matching anything.
inline std::vector<std::size_t> filtered_ranking(const EvalSplit& split,
                                                 const Matrix& dist,
                                                 std::size_t q) {
  const std::size_t g_count = split.gallery.size();
  std::vector<std::size_t> order;
  order.reserve(g_count);
  const int q_class = split.query.class_ids[q];
  const int q_cam = split.query.camera(q);
  for (std::size_t g = 0; g < g_count; ++g) {
    const bool junk = split.gallery.class_ids[g] == q_class && q_cam >= 0 &&
                      split.gallery.camera(g) == q_cam;
    if (!junk) order.push_back(g);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     const double da = dist.at(q, a);
                     const double db = dist.at(q, b);
                     return da < db || (da == db && a < b);
                   });
  return order;
}

}  // namespace detail

/// Shared ranked-retrieval pass: cumulative match curve over k = 1..gallery
/// size and mean average precision, both averaged over the queries that keep
/// at least one positive after junk filtering.
inline RankingMetrics ranking_metrics(const EvalSplit& split,
                                      const Matrix& dist) {
  split.query.validate();
  split.gallery.validate();
  if (split.gallery.size() == 0) throw EmptyGallery("gallery is empty");
  if (dist.rows != split.query.size() || dist.cols != split.gallery.size()) {
    throw Error("ranking_metrics: distance shape does not match the split");
  }

  const std::size_t g_count = split.gallery.size();
  std::vector<double> first_hit_counts(g_count, 0.0);
  double ap_sum = 0.0;
  int used = 0;

  for (std::size_t q = 0; q < split.query.size(); ++q) {
    const std::vector<std::size_t> order =
        detail::filtered_ranking(split, dist, q);
    std::size_t n_pos = 0;
    for (std::size_t g : order) {
      if (split.gallery.class_ids[g] == split.query.class_ids[q]) ++n_pos;
    }
    if (n_pos == 0) continue;  // skipped, not counted
    ++used;

    std::size_t hits = 0;
    std::size_t first_hit = 0;
    double ap = 0.0;
    for (std::size_t rank = 1; rank <= order.size(); ++rank) {
      if (split.gallery.class_ids[order[rank - 1]] ==
          split.query.class_ids[q]) {
        ++hits;
        if (hits == 1) first_hit = rank;
        ap += static_cast<double>(hits) / static_cast<double>(rank);
      }
    }
    ap_sum += ap / static_cast<double>(n_pos);
    first_hit_counts[first_hit - 1] += 1.0;
  }

  RankingMetrics out;
  out.n_queries_used = used;
  out.cmc.assign(g_count, 0.0);
  if (used > 0) {
    double cumulative = 0.0;
    for (std::size_t k = 0; k < g_count; ++k) {
      cumulative += first_hit_counts[k];
      out.cmc[k] = cumulative / static_cast<double>(used);
    }
    out.map = ap_sum / static_cast<double>(used);
  }
  return out;
}

inline std::vector<double> cmc_curve(const EvalSplit& split,
                                     const Matrix& dist) {
  return ranking_metrics(split, dist).cmc;
}

inline double mean_average_precision(const EvalSplit& split,
                                     const Matrix& dist) {
  return ranking_metrics(split, dist).map;
}

namespace detail {

/// Per-row neighborhood radii: the distance of the m-th closest point
/// (1-based, the point itself counts). Neighborhoods are closed under ties,
/// so identical points are always included or excluded together.
inline std::vector<double> knn_radii(const Matrix& joint,
                                     const std::vector<std::vector<std::size_t>>& order,
                                     std::size_t m) {
  std::vector<double> radii(joint.rows);
  for (std::size_t i = 0; i < joint.rows; ++i) {
    radii[i] = joint.at(i, order[i][m - 1]);
  }
  return radii;
}

/// Members of the closed neighborhood of i (a prefix of the sorted order).
inline std::vector<std::size_t> closed_neighbors(
    const Matrix& joint, const std::vector<std::size_t>& order_i,
    std::size_t i, double radius) {
  std::vector<std::size_t> out;
  for (std::size_t x : order_i) {
    if (joint.at(i, x) <= radius) {
      out.push_back(x);
    } else {
      break;
    }
  }
  return out;
}

/// k-reciprocal set of i at the given radii: neighbors of i that also count
/// i among their own neighbors.
inline std::vector<std::size_t> reciprocal_set(
    const Matrix& joint, const std::vector<std::vector<std::size_t>>& order,
    const std::vector<double>& radii, std::size_t i) {
  std::vector<std::size_t> out;
  for (std::size_t x : closed_neighbors(joint, order[i], i, radii[i])) {
    if (joint.at(x, i) <= radii[x]) out.push_back(x);
  }
  return out;
}

}  // namespace detail

/// Re-scores a joint (query + gallery) distance matrix with k-reciprocal
/// encoding: reciprocal neighbor sets expanded by strongly-overlapping
/// half-k1 sets, Gaussian-kernel membership weights exp(-d), local query
/// expansion over the k2 nearest neighbors, and a Jaccard distance blended
/// with the original one by lambda. Returns the query x gallery block.
inline Matrix k_reciprocal_rerank_joint(const Matrix& joint,
                                        std::size_t n_query,
                                        const RerankConfig& cfg) {
  cfg.validate();
  const std::size_t n = joint.rows;
  if (joint.cols != n) throw Error("rerank: joint matrix must be square");
  if (n_query == 0 || n_query >= n) {
    throw ConfigInvalid("rerank: n_query must leave a non-empty gallery");
  }
  if (static_cast<std::size_t>(cfg.k1) >= n) {
    throw ConfigInvalid("rerank: k1 must be smaller than the joint set");
  }

  std::vector<std::vector<std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[i].resize(n);
    std::iota(order[i].begin(), order[i].end(), std::size_t{0});
    std::stable_sort(order[i].begin(), order[i].end(),
                     [&](std::size_t a, std::size_t b) {
                       const double da = joint.at(i, a);
                       const double db = joint.at(i, b);
                       return da < db || (da == db && a < b);
                     });
  }

  const std::size_t half_k1 = std::max<std::size_t>(
      1, static_cast<std::size_t>(cfg.k1) / 2);
  const std::vector<double> radii_main =
      detail::knn_radii(joint, order, static_cast<std::size_t>(cfg.k1) + 1);
  const std::vector<double> radii_half =
      detail::knn_radii(joint, order, half_k1 + 1);

  Matrix encoding(n, n);
  std::vector<char> in_base(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<std::size_t> base =
        detail::reciprocal_set(joint, order, radii_main, i);
    for (std::size_t x : base) in_base[x] = 1;
    std::vector<std::size_t> expanded = base;
    for (std::size_t c : base) {
      const std::vector<std::size_t> candidate =
          detail::reciprocal_set(joint, order, radii_half, c);
      std::size_t overlap = 0;
      for (std::size_t x : candidate) overlap += in_base[x];
      if (3 * overlap > 2 * candidate.size()) {
        expanded.insert(expanded.end(), candidate.begin(), candidate.end());
      }
    }
    for (std::size_t x : base) in_base[x] = 0;
    std::sort(expanded.begin(), expanded.end());
    expanded.erase(std::unique(expanded.begin(), expanded.end()),
                   expanded.end());

    double total = 0.0;
    for (std::size_t x : expanded) total += std::exp(-joint.at(i, x));
    for (std::size_t x : expanded) {
      encoding.at(i, x) = std::exp(-joint.at(i, x)) / total;
    }
  }

  if (cfg.k2 > 1) {
    const std::vector<double> radii_qe =
        detail::knn_radii(joint, order, static_cast<std::size_t>(cfg.k2));
    Matrix expanded_encoding(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<std::size_t> members =
          detail::closed_neighbors(joint, order[i], i, radii_qe[i]);
      const double inv = 1.0 / static_cast<double>(members.size());
      for (std::size_t x : members) {
        for (std::size_t j = 0; j < n; ++j) {
          expanded_encoding.at(i, j) += inv * encoding.at(x, j);
        }
      }
    }
    encoding = std::move(expanded_encoding);
  }

  Matrix out(n_query, n - n_query);
  for (std::size_t q = 0; q < n_query; ++q) {
    for (std::size_t g = n_query; g < n; ++g) {
      double min_sum = 0.0;
      double max_sum = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        min_sum += std::min(encoding.at(q, t), encoding.at(g, t));
        max_sum += std::max(encoding.at(q, t), encoding.at(g, t));
      }
      const double jaccard = 1.0 - min_sum / max_sum;
      out.at(q, g - n_query) =
          (1.0 - cfg.lambda) * jaccard + cfg.lambda * joint.at(q, g);
    }
  }
  return out;
}

/// Convenience wrapper over embedded query/gallery batches: builds the joint
/// matrix from the features, keeping the supplied query x gallery block as
/// the original distances for the final blend.
inline Matrix k_reciprocal_rerank(const EvalSplit& split, const Matrix& dist,
                                  const RerankConfig& cfg) {
  split.query.validate();
  split.gallery.validate();
  const std::size_t nq = split.query.size();
  const std::size_t ng = split.gallery.size();
  if (dist.rows != nq || dist.cols != ng) {
    throw Error("rerank: distance shape does not match the split");
  }
  const std::size_t n = nq + ng;
  Matrix joint(n, n);
  const EmbeddingBatch& q = split.query;
  const EmbeddingBatch& g = split.gallery;
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = i + 1; j < nq; ++j) {
      const double d = euclidean(q.features.row(i), q.features.row(j));
      joint.at(i, j) = d;
      joint.at(j, i) = d;
    }
  }
  for (std::size_t i = 0; i < ng; ++i) {
    for (std::size_t j = i + 1; j < ng; ++j) {
      const double d = euclidean(g.features.row(i), g.features.row(j));
      joint.at(nq + i, nq + j) = d;
      joint.at(nq + j, nq + i) = d;
    }
  }
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < ng; ++j) {
      joint.at(i, nq + j) = dist.at(i, j);
      joint.at(nq + j, i) = dist.at(i, j);
    }
  }
  return k_reciprocal_rerank_joint(joint, nq, cfg);
}

/// Embeds both sides of a raw split in infer mode (unit-normalized post-neck
/// features) and scores retrieval, optionally adding re-ranked metrics.
inline EvalReport evaluate(const EvalSplit& raw_split, const ModelParams& params,
                           const std::optional<RerankConfig>& rerank = {}) {
  raw_split.query.validate();
  raw_split.gallery.validate();
  if (raw_split.gallery.size() == 0) throw EmptyGallery("gallery is empty");

  EvalSplit embedded;
  embedded.query.features =
      forward(params, raw_split.query.features, RunMode::infer)
          .post_bn_normalized;
  embedded.query.class_ids = raw_split.query.class_ids;
  embedded.query.camera_ids = raw_split.query.camera_ids;
  embedded.gallery.features =
      forward(params, raw_split.gallery.features, RunMode::infer)
          .post_bn_normalized;
  embedded.gallery.class_ids = raw_split.gallery.class_ids;
  embedded.gallery.camera_ids = raw_split.gallery.camera_ids;

  const Matrix dist =
      cross_distances(embedded.query.features, embedded.gallery.features);
  const RankingMetrics base = ranking_metrics(embedded, dist);

  EvalReport report;
  report.cmc = base.cmc;
  report.map = base.map;
  report.n_queries_used = base.n_queries_used;
  if (rerank) {
    const Matrix reranked_dist = k_reciprocal_rerank(embedded, dist, *rerank);
    report.reranked = ranking_metrics(embedded, reranked_dist);
  }
  return report;
}

/// Seeded query/gallery split of a dataset: per class, `queries_per_class`
/// rows become queries and the rest gallery.
inline EvalSplit make_eval_split(const SyntheticDataset& ds,
                                 int queries_per_class, std::uint64_t seed) {
  if (queries_per_class < 1) {
    throw ConfigInvalid("queries_per_class must be >= 1");
  }
  std::map<int, std::vector<std::size_t>> per_class;
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    per_class[ds.rows[i].class_id].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> query_idx;
  std::vector<std::size_t> gallery_idx;
  for (auto& [cls, indices] : per_class) {
    if (indices.size() < static_cast<std::size_t>(queries_per_class) + 1) {
      throw ConfigInvalid("class " + std::to_string(cls) +
                          " is too small for " +
                          std::to_string(queries_per_class) + " queries");
    }
    std::vector<std::size_t> order = indices;
    rng.shuffle(order);
    for (std::size_t t = 0; t < order.size(); ++t) {
      (t < static_cast<std::size_t>(queries_per_class) ? query_idx
                                                       : gallery_idx)
          .push_back(order[t]);
    }
  }
  std::sort(query_idx.begin(), query_idx.end());
  std::sort(gallery_idx.begin(), gallery_idx.end());
  return EvalSplit{ds.as_batch(query_idx), ds.as_batch(gallery_idx)};
}

}  // namespace metricforge
