#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/matrix.hpp"
#include "metricforge/rng.hpp"

namespace metricforge {

/// Transform applied to the class prototypes of the second dataset of a
/// cross-domain pair: a seeded random rotation plus a fixed offset.
struct DomainShift {
  std::vector<double> offset;  // empty means zero offset
  std::uint64_t rotation_seed = 1;
};

struct SynthSpec {
  int n_classes = 10;
  int per_class = 50;
  int dim = 16;
  double noise_sigma = 0.3;
  int n_cameras = 4;
  std::uint64_t seed = 0;
  std::optional<DomainShift> domain_shift;

  void validate() const {
    if (n_classes < 2) throw ConfigInvalid("n_classes must be >= 2");
    if (per_class < 2) throw ConfigInvalid("per_class must be >= 2");
    if (dim < 2) throw ConfigInvalid("dim must be >= 2");
    if (!(noise_sigma >= 0.0)) throw ConfigInvalid("noise_sigma must be >= 0");
    if (n_cameras < 1) throw ConfigInvalid("n_cameras must be >= 1");
    if (domain_shift && !domain_shift->offset.empty() &&
        domain_shift->offset.size() != static_cast<std::size_t>(dim)) {
      throw ConfigInvalid("domain_shift offset length must match dim");
    }
  }
};

struct SampleRow {
  int sample_id = 0;
  int class_id = 0;
  int camera_id = 0;
  std::vector<double> features;
};

struct SyntheticDataset {
  int dim = 0;
  int n_classes = 0;
  int n_cameras = 0;
  std::vector<SampleRow> rows;

  std::size_t size() const { return rows.size(); }

  std::vector<int> class_ids() const {
    std::vector<int> out;
    out.reserve(rows.size());
    for (const SampleRow& r : rows) out.push_back(r.class_id);
    return out;
  }

  Matrix inputs_for(const std::vector<std::size_t>& indices) const {
    Matrix out(indices.size(), static_cast<std::size_t>(dim));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const std::vector<double>& f = rows[indices[i]].features;
      for (std::size_t j = 0; j < f.size(); ++j) out.at(i, j) = f[j];
    }
    return out;
  }

  std::vector<int> labels_for(const std::vector<std::size_t>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) out.push_back(rows[idx].class_id);
    return out;
  }

  std::vector<int> cameras_for(const std::vector<std::size_t>& indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t idx : indices) out.push_back(rows[idx].camera_id);
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> out(rows.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }

  /// The raw feature rows with their labels, e.g. as evaluation input.
  EmbeddingBatch as_batch(const std::vector<std::size_t>& indices) const {
    return EmbeddingBatch{inputs_for(indices), labels_for(indices),
                          cameras_for(indices)};
  }

  SyntheticDataset subset(const std::vector<std::size_t>& indices) const {
    SyntheticDataset out;
    out.dim = dim;
    out.n_cameras = n_cameras;
    std::set<int> classes;
    for (std::size_t idx : indices) {
      out.rows.push_back(rows[idx]);
      classes.insert(rows[idx].class_id);
    }
    out.n_classes = static_cast<int>(classes.size());
    return out;
  }
};

namespace detail {

/// Class prototypes drawn uniformly on the unit hypersphere (normalized
/// Gaussians). Factored out so a cross-domain pair can reuse them.
inline std::vector<std::vector<double>> make_prototypes(const SynthSpec& spec,
                                                        Rng& rng) {
  std::vector<std::vector<double>> protos;
  for (int c = 0; c < spec.n_classes; ++c) {
    std::vector<double> p(static_cast<std::size_t>(spec.dim));
    double n = 0.0;
    while (n <= 1e-9) {
      for (double& v : p) v = rng.normal();
      n = 0.0;
      for (double v : p) n += v * v;
      n = std::sqrt(n);
    }
    for (double& v : p) v /= n;
    protos.push_back(std::move(p));
  }
  return protos;
}

inline SyntheticDataset sample_around(
    const SynthSpec& spec, const std::vector<std::vector<double>>& prototypes,
    Rng& noise_rng) {
  SyntheticDataset ds;
  ds.dim = spec.dim;
  ds.n_classes = spec.n_classes;
  ds.n_cameras = spec.n_cameras;
  // noise_sigma scales the noise vector, not each coordinate: the expected
  // perturbation norm is ~noise_sigma regardless of dim, so a given sigma
  // means the same cluster spread relative to the unit prototypes at any
  // dimension. (Per-coordinate sigma at dim 16 would swamp the ~sqrt(2)
  // prototype separation and make the default benchmark unlearnable.)
  const double coord_sigma =
      spec.noise_sigma / std::sqrt(static_cast<double>(spec.dim));
  int next_id = 0;
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int s = 0; s < spec.per_class; ++s) {
      SampleRow row;
      row.sample_id = next_id;
      row.class_id = c;
      row.camera_id = next_id % spec.n_cameras;
      row.features.resize(static_cast<std::size_t>(spec.dim));
      for (std::size_t j = 0; j < row.features.size(); ++j) {
        row.features[j] = prototypes[static_cast<std::size_t>(c)][j] +
                          coord_sigma * noise_rng.normal();
      }
      ds.rows.push_back(std::move(row));
      ++next_id;
    }
  }
  return ds;
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian square matrix.
inline Matrix random_orthogonal(int dim, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(dim);
  Matrix q(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (;;) {
      for (std::size_t j = 0; j < n; ++j) q.at(i, j) = rng.normal();
      for (std::size_t prev = 0; prev < i; ++prev) {
        const double proj = dot(q.row(i), q.row(prev));
        for (std::size_t j = 0; j < n; ++j) {
          q.at(i, j) -= proj * q.at(prev, j);
        }
      }
      const double len = norm(q.row(i));
      if (len > 1e-6) {
        for (std::size_t j = 0; j < n; ++j) q.at(i, j) /= len;
        break;
      }
    }
  }
  return q;
}

}  // namespace detail

/// Samples are class prototypes plus isotropic Gaussian noise, deliberately
/// left unnormalized; cameras are assigned round-robin by sample index.
inline SyntheticDataset generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto prototypes = detail::make_prototypes(spec, rng);
  return detail::sample_around(spec, prototypes, rng);
}

/// Two datasets over the same identities: the second one's prototypes are
/// rotated by a seeded orthogonal transform and shifted by the configured
/// offset, with freshly drawn noise. Stand-in for a camera-network change.
inline std::pair<SyntheticDataset, SyntheticDataset> generate_domain_pair(
    const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto prototypes = detail::make_prototypes(spec, rng);
  SyntheticDataset domain_a = detail::sample_around(spec, prototypes, rng);

  DomainShift shift;
  if (spec.domain_shift) {
    shift = *spec.domain_shift;
  } else {
    shift.rotation_seed = Rng::derive(spec.seed, 17);
  }
  const Matrix rotation = detail::random_orthogonal(spec.dim, shift.rotation_seed);
  std::vector<std::vector<double>> shifted;
  for (const std::vector<double>& p : prototypes) {
    std::vector<double> out(static_cast<std::size_t>(spec.dim), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = dot(rotation.row(i), std::span<const double>(p));
      if (!shift.offset.empty()) out[i] += shift.offset[i];
    }
    shifted.push_back(std::move(out));
  }
  Rng noise_rng(Rng::derive(spec.seed, 0xB));
  SyntheticDataset domain_b = detail::sample_around(spec, shifted, noise_rng);
  return {std::move(domain_a), std::move(domain_b)};
}

/// Per-class train/held-out split by row order: the last `holdout_per_class`
/// rows of every class are held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>>
split_train_holdout(const SyntheticDataset& ds, int holdout_per_class) {
  std::map<int, std::vector<std::size_t>> per_class;
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    per_class[ds.rows[i].class_id].push_back(i);
  }
  std::vector<std::size_t> train;
  std::vector<std::size_t> holdout;
  for (const auto& [cls, indices] : per_class) {
    if (indices.size() <= static_cast<std::size_t>(holdout_per_class)) {
      throw ConfigInvalid("class " + std::to_string(cls) +
                          " has too few samples to hold out " +
                          std::to_string(holdout_per_class));
    }
    const std::size_t cut = indices.size() -
                            static_cast<std::size_t>(holdout_per_class);
    for (std::size_t t = 0; t < indices.size(); ++t) {
      (t < cut ? train : holdout).push_back(indices[t]);
    }
  }
  return {std::move(train), std::move(holdout)};
}

inline std::string dataset_to_string(const SyntheticDataset& ds) {
  char buf[40];
  std::string out = std::to_string(ds.dim) + "," + std::to_string(ds.size()) +
                    "," + std::to_string(ds.n_classes) + "," +
                    std::to_string(ds.n_cameras) + "\n";
  for (const SampleRow& row : ds.rows) {
    out += std::to_string(row.sample_id) + "," + std::to_string(row.class_id) +
           "," + std::to_string(row.camera_id);
    for (double v : row.features) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline void save_dataset(const SyntheticDataset& ds, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open dataset file for writing: " + path);
  const std::string text = dataset_to_string(ds);
  file.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!file) throw Error("failed writing dataset: " + path);
}

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline long parse_int_field(const std::string& tok, int line_no,
                            const char* what) {
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (end == tok.c_str() || *end != '\0') {
    throw ParseError("line " + std::to_string(line_no) + ": bad " + what +
                     " '" + tok + "'");
  }
  return v;
}

inline double parse_double_field(const std::string& tok, int line_no) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw ParseError("line " + std::to_string(line_no) + ": bad value '" +
                     tok + "'");
  }
  return v;
}

}  // namespace detail

inline SyntheticDataset load_dataset(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open dataset file: " + path);
  std::string line;
  int line_no = 0;
  if (!std::getline(file, line)) {
    throw ParseError("line 1: empty dataset file");
  }
  ++line_no;
  const auto header = detail::split_csv(line);
  if (header.size() != 4) {
    throw ParseError("line 1: header must be dim,n_samples,n_classes,n_cameras");
  }
  SyntheticDataset ds;
  ds.dim = static_cast<int>(detail::parse_int_field(header[0], 1, "dim"));
  const long n_samples = detail::parse_int_field(header[1], 1, "n_samples");
  ds.n_classes =
      static_cast<int>(detail::parse_int_field(header[2], 1, "n_classes"));
  ds.n_cameras =
      static_cast<int>(detail::parse_int_field(header[3], 1, "n_cameras"));
  if (ds.dim < 1 || n_samples < 1 || ds.n_classes < 1 || ds.n_cameras < 1) {
    throw ParseError("line 1: header fields must be positive");
  }
  std::set<int> classes;
  while (std::getline(file, line)) {
    ++line_no;
    if (line.empty()) {
      throw ParseError("line " + std::to_string(line_no) + ": empty row");
    }
    const auto fields = detail::split_csv(line);
    if (fields.size() != static_cast<std::size_t>(3 + ds.dim)) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(3 + ds.dim) + " fields, got " +
                       std::to_string(fields.size()));
    }
    SampleRow row;
    row.sample_id =
        static_cast<int>(detail::parse_int_field(fields[0], line_no, "sample_id"));
    row.class_id =
        static_cast<int>(detail::parse_int_field(fields[1], line_no, "class_id"));
    row.camera_id =
        static_cast<int>(detail::parse_int_field(fields[2], line_no, "camera_id"));
    row.features.reserve(static_cast<std::size_t>(ds.dim));
    for (int j = 0; j < ds.dim; ++j) {
      row.features.push_back(detail::parse_double_field(
          fields[static_cast<std::size_t>(3 + j)], line_no));
    }
    classes.insert(row.class_id);
    ds.rows.push_back(std::move(row));
  }
  if (ds.rows.size() != static_cast<std::size_t>(n_samples)) {
    throw ParseError("line " + std::to_string(line_no) + ": header promises " +
                     std::to_string(n_samples) + " samples, file has " +
                     std::to_string(ds.rows.size()));
  }
  if (static_cast<int>(classes.size()) != ds.n_classes) {
    throw ParseError("line " + std::to_string(line_no) + ": header promises " +
                     std::to_string(ds.n_classes) + " classes, file has " +
                     std::to_string(classes.size()));
  }
  return ds;
}

}  // namespace metricforge
