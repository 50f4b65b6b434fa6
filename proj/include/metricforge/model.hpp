#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metricforge/embedding.hpp"
#include "metricforge/errors.hpp"
#include "metricforge/losses.hpp"
#include "metricforge/matrix.hpp"
#include "metricforge/rng.hpp"

namespace metricforge {

enum class RunMode { train, infer };

/// Which feature the ranking loss trains on: the batch-normalized embedding
/// (the default) or the raw encoder output ahead of the neck.
enum class FeatureTap { post_bn, pre_bn };

/// Encoder MLP followed by a batch-norm neck that carries a scale vector
/// only, and a linear classifier without bias. The missing shift and bias
/// terms are deliberate: inference features are centered by the neck and
/// compared by angle, so neither offset would survive.
struct ModelParams {
  std::vector<int> layer_sizes;  // input dim, hidden sizes..., embedding dim
  std::vector<Matrix> encoder_weights;              // [l]: sizes[l+1] x sizes[l]
  std::vector<std::vector<double>> encoder_biases;  // [l]: sizes[l+1]
  std::vector<double> bn_scale;
  std::vector<double> bn_running_mean;
  std::vector<double> bn_running_var;
  Matrix fc_weights;  // C x D
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  int input_dim() const { return layer_sizes.front(); }
  int embed_dim() const { return layer_sizes.back(); }
  int n_classes() const { return static_cast<int>(fc_weights.rows); }

  void validate() const {
    if (layer_sizes.size() < 2) {
      throw ConfigInvalid("model needs at least input and embedding sizes");
    }
    for (int s : layer_sizes) {
      if (s < 1) throw ConfigInvalid("layer sizes must be positive");
    }
    const std::size_t n_layers = layer_sizes.size() - 1;
    if (encoder_weights.size() != n_layers ||
        encoder_biases.size() != n_layers) {
      throw ConfigInvalid("encoder tensor count does not match layer_sizes");
    }
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (encoder_weights[l].rows != static_cast<std::size_t>(layer_sizes[l + 1]) ||
          encoder_weights[l].cols != static_cast<std::size_t>(layer_sizes[l]) ||
          encoder_biases[l].size() != static_cast<std::size_t>(layer_sizes[l + 1])) {
        throw ConfigInvalid("encoder tensor shape mismatch at layer " +
                            std::to_string(l));
      }
    }
    const std::size_t d = static_cast<std::size_t>(layer_sizes.back());
    if (bn_scale.size() != d || bn_running_mean.size() != d ||
        bn_running_var.size() != d) {
      throw ConfigInvalid("batch-norm vector length mismatch");
    }
    for (double v : bn_running_var) {
      if (!(v > 0.0)) throw ConfigInvalid("running variance must stay positive");
    }
    if (fc_weights.cols != d || fc_weights.rows < 2) {
      throw ConfigInvalid("classifier weight shape mismatch");
    }
    if (!(bn_eps > 0.0) || !(bn_momentum > 0.0 && bn_momentum <= 1.0)) {
      throw ConfigInvalid("bn_eps must be > 0 and bn_momentum in (0, 1]");
    }
  }
};

/// Everything the forward pass computed, kept for the backward pass.
/// forward() is pure: updated running statistics are reported here and
/// committed by the caller (the trainer does so after each step).
struct ForwardTrace {
  std::vector<Matrix> activations;      // [0] = inputs, then layer outputs
  std::vector<Matrix> pre_activations;  // affine outputs before ReLU
  std::vector<double> batch_mean;
  std::vector<double> batch_inv_std;
  Matrix x_hat;      // normalized pre-bn features
  Matrix post_bn;    // x_hat scaled by bn_scale
  Matrix post_bn_normalized;
  Matrix logits;
  std::vector<double> new_running_mean;
  std::vector<double> new_running_var;
  RunMode mode = RunMode::train;

  const Matrix& pre_bn() const { return activations.back(); }
};

inline ForwardTrace forward(const ModelParams& params, const Matrix& inputs,
                            RunMode mode) {
  params.validate();
  if (inputs.cols != static_cast<std::size_t>(params.input_dim())) {
    throw Error("forward: input dim " + std::to_string(inputs.cols) +
                " does not match model input dim " +
                std::to_string(params.input_dim()));
  }
  if (inputs.rows == 0 || !inputs.all_finite()) {
    throw Error("forward: inputs must be non-empty and finite");
  }
  if (mode == RunMode::train && inputs.rows < 2) {
    throw BatchTooSmall("train mode needs at least 2 samples for batch stats");
  }

  ForwardTrace trace;
  trace.mode = mode;
  trace.activations.push_back(inputs);
  const std::size_t n_layers = params.encoder_weights.size();
  for (std::size_t l = 0; l < n_layers; ++l) {
    Matrix a = matmul_nt(trace.activations.back(), params.encoder_weights[l]);
    for (std::size_t i = 0; i < a.rows; ++i) {
      for (std::size_t j = 0; j < a.cols; ++j) {
        a.at(i, j) += params.encoder_biases[l][j];
      }
    }
    trace.pre_activations.push_back(a);
    if (l + 1 < n_layers) {
      for (double& v : a.data) v = v > 0.0 ? v : 0.0;
    }
    trace.activations.push_back(std::move(a));
  }

  const Matrix& pre_bn = trace.pre_bn();
  const std::size_t b = pre_bn.rows;
  const std::size_t d = pre_bn.cols;
  trace.batch_mean.resize(d);
  trace.batch_inv_std.resize(d);
  trace.new_running_mean = params.bn_running_mean;
  trace.new_running_var = params.bn_running_var;
  if (mode == RunMode::train) {
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < b; ++i) mean += pre_bn.at(i, j);
      mean /= static_cast<double>(b);
      double var = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double c = pre_bn.at(i, j) - mean;
        var += c * c;
      }
      var /= static_cast<double>(b);
      trace.batch_mean[j] = mean;
      trace.batch_inv_std[j] = 1.0 / std::sqrt(var + params.bn_eps);
      const double m = params.bn_momentum;
      trace.new_running_mean[j] =
          (1.0 - m) * params.bn_running_mean[j] + m * mean;
      trace.new_running_var[j] =
          (1.0 - m) * params.bn_running_var[j] + m * var;
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      trace.batch_mean[j] = params.bn_running_mean[j];
      trace.batch_inv_std[j] =
          1.0 / std::sqrt(params.bn_running_var[j] + params.bn_eps);
    }
  }

  trace.x_hat = Matrix(b, d);
  trace.post_bn = Matrix(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double xh =
          (pre_bn.at(i, j) - trace.batch_mean[j]) * trace.batch_inv_std[j];
      trace.x_hat.at(i, j) = xh;
      trace.post_bn.at(i, j) = params.bn_scale[j] * xh;
    }
  }
  trace.post_bn_normalized = l2_normalize_rows(trace.post_bn);
  trace.logits = matmul_nt(trace.post_bn, params.fc_weights);
  return trace;
}

/// Gradients in the same shapes as the trainable tensors. Running statistics
/// are not trained and have no slot here.
struct ParamGrads {
  std::vector<Matrix> encoder_weights;
  std::vector<std::vector<double>> encoder_biases;
  std::vector<double> bn_scale;
  Matrix fc_weights;
};

namespace detail {

/// Backward through row-wise unit normalization: with g = f / |f| and
/// upstream u, df = (u - (u . g) g) / |f|.
inline Matrix normalize_rows_backward(const Matrix& upstream,
                                      const Matrix& pre_normalized) {
  Matrix out(upstream.rows, upstream.cols);
  for (std::size_t i = 0; i < upstream.rows; ++i) {
    const double n = norm(pre_normalized.row(i));
    double u_dot_g = 0.0;
    for (std::size_t j = 0; j < upstream.cols; ++j) {
      u_dot_g += upstream.at(i, j) * pre_normalized.at(i, j) / n;
    }
    for (std::size_t j = 0; j < upstream.cols; ++j) {
      const double g = pre_normalized.at(i, j) / n;
      out.at(i, j) = (upstream.at(i, j) - u_dot_g * g) / n;
    }
  }
  return out;
}

}  // namespace detail

/// Backward pass for a train-mode trace. The ranking gradient enters at the
/// configured feature tap, the classification gradient at the logits; batch
/// statistics are differentiated in full.
inline ParamGrads backward(const ModelParams& params, const ForwardTrace& trace,
                           const GradPacket& grad,
                           FeatureTap tap = FeatureTap::post_bn) {
  if (trace.mode != RunMode::train) {
    throw Error("backward needs a train-mode trace");
  }
  const std::size_t b = trace.post_bn.rows;
  const std::size_t d = trace.post_bn.cols;
  if (grad.d_embeddings.rows != b || grad.d_embeddings.cols != d ||
      grad.d_logits.rows != b ||
      grad.d_logits.cols != params.fc_weights.rows) {
    throw Error("backward: gradient shapes do not match the trace");
  }

  ParamGrads grads;
  grads.fc_weights = matmul_tn(grad.d_logits, trace.post_bn);
  Matrix d_post_bn = matmul_nn(grad.d_logits, params.fc_weights);

  Matrix d_pre_bn_direct;
  if (tap == FeatureTap::post_bn) {
    const Matrix through_norm =
        detail::normalize_rows_backward(grad.d_embeddings, trace.post_bn);
    for (std::size_t i = 0; i < d_post_bn.data.size(); ++i) {
      d_post_bn.data[i] += through_norm.data[i];
    }
  } else {
    d_pre_bn_direct =
        detail::normalize_rows_backward(grad.d_embeddings, trace.pre_bn());
  }

  grads.bn_scale.assign(d, 0.0);
  Matrix d_pre_bn(b, d);
  for (std::size_t j = 0; j < d; ++j) {
    const double gamma = params.bn_scale[j];
    const double inv_std = trace.batch_inv_std[j];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double dy = d_post_bn.at(i, j);
      grads.bn_scale[j] += dy * trace.x_hat.at(i, j);
      const double dxhat = dy * gamma;
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * trace.x_hat.at(i, j);
    }
    const double inv_b = 1.0 / static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      const double dxhat = d_post_bn.at(i, j) * gamma;
      double dx = inv_std * inv_b *
                  (static_cast<double>(b) * dxhat - sum_dxhat -
                   trace.x_hat.at(i, j) * sum_dxhat_xhat);
      if (tap == FeatureTap::pre_bn) dx += d_pre_bn_direct.at(i, j);
      d_pre_bn.at(i, j) = dx;
    }
  }

  const std::size_t n_layers = params.encoder_weights.size();
  grads.encoder_weights.resize(n_layers);
  grads.encoder_biases.resize(n_layers);
  Matrix d_h = std::move(d_pre_bn);
  for (std::size_t l = n_layers; l-- > 0;) {
    Matrix d_a = std::move(d_h);
    if (l + 1 < n_layers) {
      for (std::size_t i = 0; i < d_a.data.size(); ++i) {
        if (trace.pre_activations[l].data[i] <= 0.0) d_a.data[i] = 0.0;
      }
    }
    grads.encoder_weights[l] = matmul_tn(d_a, trace.activations[l]);
    grads.encoder_biases[l].assign(d_a.cols, 0.0);
    for (std::size_t i = 0; i < d_a.rows; ++i) {
      for (std::size_t j = 0; j < d_a.cols; ++j) {
        grads.encoder_biases[l][j] += d_a.at(i, j);
      }
    }
    if (l > 0) d_h = matmul_nn(d_a, params.encoder_weights[l]);
  }
  return grads;
}

/// Seeded initialization: encoder and classifier weights uniform in
/// +-sqrt(6 / (fan_in + fan_out)), biases zero, scale one, running stats at
/// the identity transform.
inline ModelParams init_params(const std::vector<int>& layer_sizes,
                               int n_classes, std::uint64_t seed) {
  if (layer_sizes.size() < 2) {
    throw ConfigInvalid("init_params needs at least input and embedding sizes");
  }
  for (int s : layer_sizes) {
    if (s < 1) throw ConfigInvalid("layer sizes must be positive");
  }
  if (n_classes < 2) throw ConfigInvalid("init_params needs n_classes >= 2");

  Rng rng(seed);
  ModelParams params;
  params.layer_sizes = layer_sizes;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const int fan_in = layer_sizes[l];
    const int fan_out = layer_sizes[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(static_cast<std::size_t>(fan_out), static_cast<std::size_t>(fan_in));
    for (double& v : w.data) v = rng.uniform(-bound, bound);
    params.encoder_weights.push_back(std::move(w));
    params.encoder_biases.emplace_back(static_cast<std::size_t>(fan_out), 0.0);
  }
  const std::size_t d = static_cast<std::size_t>(layer_sizes.back());
  params.bn_scale.assign(d, 1.0);
  params.bn_running_mean.assign(d, 0.0);
  params.bn_running_var.assign(d, 1.0);
  const double fc_bound =
      std::sqrt(6.0 / static_cast<double>(layer_sizes.back() + n_classes));
  params.fc_weights = Matrix(static_cast<std::size_t>(n_classes), d);
  for (double& v : params.fc_weights.data) v = rng.uniform(-fc_bound, fc_bound);
  return params;
}

namespace detail {

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void append_tensor(std::string& out, const std::string& name,
                          std::size_t rows, std::size_t cols,
                          const double* values) {
  out += "tensor " + name + " " + std::to_string(rows) + " " +
         std::to_string(cols) + "\n";
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (j > 0) out += ' ';
      out += format_value(values[i * cols + j]);
    }
    out += '\n';
  }
}

}  // namespace detail

/// Tensor names as they appear in a checkpoint, in file order. There is by
/// design no bias or shift tensor for the neck or the classifier.
inline std::vector<std::string> checkpoint_tensor_names(const ModelParams& params) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < params.encoder_weights.size(); ++l) {
    names.push_back("encoder.w" + std::to_string(l));
    names.push_back("encoder.b" + std::to_string(l));
  }
  names.push_back("bn.scale");
  names.push_back("bn.running_mean");
  names.push_back("bn.running_var");
  names.push_back("fc.weight");
  return names;
}

inline std::string checkpoint_to_string(const ModelParams& params) {
  params.validate();
  std::string out = "metricforge-checkpoint 1\n";
  out += "layer_sizes";
  for (int s : params.layer_sizes) out += " " + std::to_string(s);
  out += "\nclasses " + std::to_string(params.n_classes());
  out += "\nbn_eps " + detail::format_value(params.bn_eps);
  out += "\nbn_momentum " + detail::format_value(params.bn_momentum);
  out += "\n";
  for (std::size_t l = 0; l < params.encoder_weights.size(); ++l) {
    const Matrix& w = params.encoder_weights[l];
    detail::append_tensor(out, "encoder.w" + std::to_string(l), w.rows, w.cols,
                          w.data.data());
    detail::append_tensor(out, "encoder.b" + std::to_string(l), 1,
                          params.encoder_biases[l].size(),
                          params.encoder_biases[l].data());
  }
  const std::size_t d = params.bn_scale.size();
  detail::append_tensor(out, "bn.scale", 1, d, params.bn_scale.data());
  detail::append_tensor(out, "bn.running_mean", 1, d,
                        params.bn_running_mean.data());
  detail::append_tensor(out, "bn.running_var", 1, d,
                        params.bn_running_var.data());
  detail::append_tensor(out, "fc.weight", params.fc_weights.rows,
                        params.fc_weights.cols, params.fc_weights.data.data());
  out += "end\n";
  return out;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open checkpoint file for writing: " + path);
  const std::string text = checkpoint_to_string(params);
  file.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!file) throw Error("failed writing checkpoint: " + path);
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::string next(const std::string& context) {
    std::string line;
    if (!std::getline(in_, line)) {
      throw ParseError("line " + std::to_string(line_no_ + 1) +
                       ": unexpected end of file while reading " + context);
    }
    ++line_no_;
    return line;
  }

  int line_no() const { return line_no_; }

 private:
  std::istream& in_;
  int line_no_ = 0;
};

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline double parse_double(const std::string& tok, int line_no) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw ParseError("line " + std::to_string(line_no) + ": bad number '" +
                     tok + "'");
  }
  return v;
}

inline std::vector<double> parse_tensor_block(LineReader& reader,
                                              const std::string& name,
                                              std::size_t rows,
                                              std::size_t cols) {
  std::vector<double> values;
  values.reserve(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::string line = reader.next("tensor " + name);
    const std::vector<std::string> toks = split_ws(line);
    if (toks.size() != cols) {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected " + std::to_string(cols) +
                       " values for " + name + ", got " +
                       std::to_string(toks.size()));
    }
    for (const std::string& tok : toks) {
      values.push_back(parse_double(tok, reader.line_no()));
    }
  }
  return values;
}

}  // namespace detail

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("cannot open checkpoint file: " + path);
  detail::LineReader reader(file);

  if (reader.next("header") != "metricforge-checkpoint 1") {
    throw ParseError("line 1: not a metricforge-checkpoint version 1 file");
  }
  ModelParams params;
  {
    const auto toks = detail::split_ws(reader.next("layer_sizes"));
    if (toks.size() < 3 || toks[0] != "layer_sizes") {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected layer_sizes with at least two entries");
    }
    for (std::size_t i = 1; i < toks.size(); ++i) {
      params.layer_sizes.push_back(
          static_cast<int>(detail::parse_double(toks[i], reader.line_no())));
    }
  }
  int n_classes = 0;
  {
    const auto toks = detail::split_ws(reader.next("classes"));
    if (toks.size() != 2 || toks[0] != "classes") {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected classes <count>");
    }
    n_classes = static_cast<int>(detail::parse_double(toks[1], reader.line_no()));
  }
  {
    const auto toks = detail::split_ws(reader.next("bn_eps"));
    if (toks.size() != 2 || toks[0] != "bn_eps") {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected bn_eps <value>");
    }
    params.bn_eps = detail::parse_double(toks[1], reader.line_no());
  }
  {
    const auto toks = detail::split_ws(reader.next("bn_momentum"));
    if (toks.size() != 2 || toks[0] != "bn_momentum") {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected bn_momentum <value>");
    }
    params.bn_momentum = detail::parse_double(toks[1], reader.line_no());
  }

  const std::size_t n_layers = params.layer_sizes.size() - 1;
  const std::size_t d = static_cast<std::size_t>(params.layer_sizes.back());
  struct ExpectedTensor {
    std::string name;
    std::size_t rows;
    std::size_t cols;
  };
  std::vector<ExpectedTensor> expected;
  for (std::size_t l = 0; l < n_layers; ++l) {
    expected.push_back({"encoder.w" + std::to_string(l),
                        static_cast<std::size_t>(params.layer_sizes[l + 1]),
                        static_cast<std::size_t>(params.layer_sizes[l])});
    expected.push_back({"encoder.b" + std::to_string(l), 1,
                        static_cast<std::size_t>(params.layer_sizes[l + 1])});
  }
  expected.push_back({"bn.scale", 1, d});
  expected.push_back({"bn.running_mean", 1, d});
  expected.push_back({"bn.running_var", 1, d});
  expected.push_back({"fc.weight", static_cast<std::size_t>(n_classes), d});

  for (const ExpectedTensor& exp : expected) {
    const auto toks = detail::split_ws(reader.next("tensor header"));
    if (toks.size() != 4 || toks[0] != "tensor" || toks[1] != exp.name ||
        toks[2] != std::to_string(exp.rows) ||
        toks[3] != std::to_string(exp.cols)) {
      throw ParseError("line " + std::to_string(reader.line_no()) +
                       ": expected 'tensor " + exp.name + " " +
                       std::to_string(exp.rows) + " " +
                       std::to_string(exp.cols) + "'");
    }
    std::vector<double> values =
        detail::parse_tensor_block(reader, exp.name, exp.rows, exp.cols);
    if (exp.name.rfind("encoder.w", 0) == 0) {
      Matrix w(exp.rows, exp.cols);
      w.data = std::move(values);
      params.encoder_weights.push_back(std::move(w));
    } else if (exp.name.rfind("encoder.b", 0) == 0) {
      params.encoder_biases.push_back(std::move(values));
    } else if (exp.name == "bn.scale") {
      params.bn_scale = std::move(values);
    } else if (exp.name == "bn.running_mean") {
      params.bn_running_mean = std::move(values);
    } else if (exp.name == "bn.running_var") {
      params.bn_running_var = std::move(values);
    } else {
      params.fc_weights = Matrix(exp.rows, exp.cols);
      params.fc_weights.data = std::move(values);
    }
  }
  if (reader.next("trailer") != "end") {
    throw ParseError("line " + std::to_string(reader.line_no()) +
                     ": expected 'end'");
  }
  params.validate();
  return params;
}

}  // namespace metricforge
