#pragma once

#include <string>
#include <vector>

#include "metricforge/errors.hpp"
#include "metricforge/matrix.hpp"

namespace metricforge {

/// A batch of D-dimensional feature rows with identity and camera labels.
/// camera_ids may be empty (or hold -1 entries) when the source has no
/// camera structure; metrics then skip camera-based filtering.
struct EmbeddingBatch {
  Matrix features;             // B x D
  std::vector<int> class_ids;  // B
  std::vector<int> camera_ids; // B or empty

  std::size_t size() const { return features.rows; }
  std::size_t dim() const { return features.cols; }

  int camera(std::size_t i) const {
    return camera_ids.empty() ? -1 : camera_ids[i];
  }

  void validate() const {
    if (features.rows == 0 || features.cols == 0) {
      throw Error("EmbeddingBatch: batch must be at least 1x1");
    }
    if (!features.all_finite()) {
      throw Error("EmbeddingBatch: non-finite feature entry");
    }
    if (class_ids.size() != features.rows) {
      throw Error("EmbeddingBatch: class_ids length does not match rows");
    }
    if (!camera_ids.empty() && camera_ids.size() != features.rows) {
      throw Error("EmbeddingBatch: camera_ids length does not match rows");
    }
  }
};

/// Symmetric matrix of Euclidean distances with a zero diagonal.
struct DistanceMatrix {
  Matrix values;
};

inline Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double n = norm(m.row(i));
    if (n <= 1e-12) {
      throw NormalizeZeroVector("row " + std::to_string(i) +
                                " has norm below 1e-12");
    }
    for (std::size_t j = 0; j < m.cols; ++j) out.at(i, j) = m.at(i, j) / n;
  }
  return out;
}

inline EmbeddingBatch l2_normalize(const EmbeddingBatch& batch) {
  batch.validate();
  EmbeddingBatch out = batch;
  out.features = l2_normalize_rows(batch.features);
  return out;
}

/// Distances are taken as the norm of the row difference, in double
/// precision. The inner-product identity d^2 = 2 - 2<f_i, f_j> for unit-norm
/// rows is left to the tests, where it serves as an independent cross-check.
inline DistanceMatrix pairwise_distances(const EmbeddingBatch& batch) {
  batch.validate();
  const std::size_t b = batch.size();
  DistanceMatrix dist{Matrix(b, b)};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      const double d = euclidean(batch.features.row(i), batch.features.row(j));
      dist.values.at(i, j) = d;
      dist.values.at(j, i) = d;
    }
  }
  return dist;
}

/// Rectangular distance block between two row sets (queries x gallery).
inline Matrix cross_distances(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) {
      out.at(i, j) = euclidean(a.row(i), b.row(j));
    }
  }
  return out;
}

}  // namespace metricforge
