#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace oracles {

using metricforge::Matrix;

RankedMetrics ranking_by_enumeration(const Matrix& dist,
                                     const std::vector<int>& query_classes,
                                     const std::vector<int>& query_cameras,
                                     const std::vector<int>& gallery_classes,
                                     const std::vector<int>& gallery_cameras) {
  const std::size_t n_query = dist.rows;
  const std::size_t n_gallery = dist.cols;
  RankedMetrics out;
  out.cmc.assign(n_gallery, 0.0);
  std::vector<double> first_hits(n_gallery, 0.0);
  double ap_sum = 0.0;

  for (std::size_t q = 0; q < n_query; ++q) {
    const int q_class = query_classes[q];
    const int q_cam = q < query_cameras.size() ? query_cameras[q] : -1;

    std::vector<std::size_t> remaining;
    std::size_t n_pos = 0;
    for (std::size_t g = 0; g < n_gallery; ++g) {
      const int g_cam = g < gallery_cameras.size() ? gallery_cameras[g] : -1;
      if (gallery_classes[g] == q_class && q_cam >= 0 && g_cam == q_cam) {
        continue;  // junk
      }
      remaining.push_back(g);
      if (gallery_classes[g] == q_class) ++n_pos;
    }
    if (n_pos == 0) continue;
    ++out.used;

    std::size_t rank = 0;
    std::size_t hits = 0;
    double ap = 0.0;
    while (!remaining.empty()) {
      std::size_t best = 0;
      for (std::size_t t = 1; t < remaining.size(); ++t) {
        const double d_best = dist.at(q, remaining[best]);
        const double d_t = dist.at(q, remaining[t]);
        if (d_t < d_best || (d_t == d_best && remaining[t] < remaining[best])) {
          best = t;
        }
      }
      const std::size_t g = remaining[best];
      remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
      ++rank;
      if (gallery_classes[g] == q_class) {
        ++hits;
        if (hits == 1) first_hits[rank - 1] += 1.0;
        ap += static_cast<double>(hits) / static_cast<double>(rank);
      }
    }
    ap_sum += ap / static_cast<double>(n_pos);
  }

  if (out.used > 0) {
    double cumulative = 0.0;
    for (std::size_t k = 0; k < n_gallery; ++k) {
      cumulative += first_hits[k];
      out.cmc[k] = cumulative / static_cast<double>(out.used);
    }
    out.map = ap_sum / static_cast<double>(out.used);
  }
  return out;
}

namespace {

/// Closed neighborhood of p: every point whose distance to p is at most the
/// m-th smallest entry of p's row (1-based; the point itself counts).
std::set<std::size_t> closed_knn(const Matrix& joint, std::size_t p,
                                 std::size_t m) {
  std::vector<double> row(joint.row(p).begin(), joint.row(p).end());
  std::sort(row.begin(), row.end());
  const double radius = row[std::min(m, row.size()) - 1];
  std::set<std::size_t> members;
  for (std::size_t x = 0; x < joint.cols; ++x) {
    if (joint.at(p, x) <= radius) members.insert(x);
  }
  return members;
}

std::set<std::size_t> reciprocal_neighbors(
    const std::vector<std::set<std::size_t>>& knn, std::size_t p) {
  std::set<std::size_t> result;
  for (std::size_t x : knn[p]) {
    if (knn[x].count(p) > 0) result.insert(x);
  }
  return result;
}

}  // namespace

Matrix rerank_by_sets(const Matrix& joint, std::size_t n_query, int k1,
                      int k2, double lambda) {
  const std::size_t n = joint.rows;
  if (joint.cols != n || n_query == 0 || n_query >= n) {
    throw std::invalid_argument("rerank_by_sets: bad inputs");
  }
  const std::size_t uk1 = static_cast<std::size_t>(k1);
  const std::size_t half = std::max<std::size_t>(1, uk1 / 2);

  std::vector<std::set<std::size_t>> knn_main(n);
  std::vector<std::set<std::size_t>> knn_half(n);
  for (std::size_t p = 0; p < n; ++p) {
    knn_main[p] = closed_knn(joint, p, uk1 + 1);
    knn_half[p] = closed_knn(joint, p, half + 1);
  }

  std::vector<std::vector<double>> encoding(n, std::vector<double>(n, 0.0));
  for (std::size_t p = 0; p < n; ++p) {
    const std::set<std::size_t> base = reciprocal_neighbors(knn_main, p);
    std::set<std::size_t> expanded = base;
    for (std::size_t c : base) {
      std::set<std::size_t> candidate;
      for (std::size_t x : knn_half[c]) {
        if (knn_half[x].count(c) > 0) candidate.insert(x);
      }
      std::size_t overlap = 0;
      for (std::size_t x : candidate) overlap += base.count(x);
      if (3 * overlap > 2 * candidate.size()) {
        expanded.insert(candidate.begin(), candidate.end());
      }
    }
    double total = 0.0;
    for (std::size_t x : expanded) total += std::exp(-joint.at(p, x));
    for (std::size_t x : expanded) {
      encoding[p][x] = std::exp(-joint.at(p, x)) / total;
    }
  }

  if (k2 > 1) {
    std::vector<std::vector<double>> blended(n, std::vector<double>(n, 0.0));
    for (std::size_t p = 0; p < n; ++p) {
      const std::set<std::size_t> members =
          closed_knn(joint, p, static_cast<std::size_t>(k2));
      for (std::size_t j = 0; j < n; ++j) {
        double sum = 0.0;
        for (std::size_t x : members) sum += encoding[x][j];
        blended[p][j] = sum / static_cast<double>(members.size());
      }
    }
    encoding = std::move(blended);
  }

  Matrix out(n_query, n - n_query);
  for (std::size_t q = 0; q < n_query; ++q) {
    for (std::size_t g = n_query; g < n; ++g) {
      double min_sum = 0.0;
      double max_sum = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        min_sum += std::min(encoding[q][t], encoding[g][t]);
        max_sum += std::max(encoding[q][t], encoding[g][t]);
      }
      out.at(q, g - n_query) = (1.0 - lambda) * (1.0 - min_sum / max_sum) +
                               lambda * joint.at(q, g);
    }
  }
  return out;
}

}  // namespace oracles
