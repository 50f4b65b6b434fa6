// Acceptance gate. Runs every release criterion at its stated tolerance and
// prints one [PASS]/[FAIL] line per criterion with the measured numbers.
// Exit status is the number of failed criteria (0 = releasable).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "metricforge/metricforge.hpp"
#include "support/oracles.hpp"

namespace mf = metricforge;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double secs_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* pattern, ...) {
  char buf[768];
  va_list args;
  va_start(args, pattern);
  std::vsnprintf(buf, sizeof(buf), pattern, args);
  va_end(args);
  return std::string(buf);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// shared benchmark: the convergence dataset and its held-out split, reused by
// the ablation and direction criteria

struct Benchmark {
  mf::SyntheticDataset dataset;
  mf::SyntheticDataset train_set;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> holdout_idx;
  mf::EvalSplit split;  // held-out queries against the training gallery
};

Benchmark make_benchmark() {
  mf::SynthSpec spec;  // 10 classes x 50 samples, dim 16, noise 0.3
  spec.seed = 0;
  Benchmark b;
  b.dataset = mf::generate(spec);
  auto [train, holdout] = mf::split_train_holdout(b.dataset, 10);
  b.train_idx = std::move(train);
  b.holdout_idx = std::move(holdout);
  b.train_set = b.dataset.subset(b.train_idx);
  b.split = mf::EvalSplit{b.dataset.as_batch(b.holdout_idx),
                          b.dataset.as_batch(b.train_idx)};
  return b;
}

// Loss defaults are the shipped ones (w=0.4, r=0.7, T=1.0); the batch width
// is the one knob adapted to the data, since the benchmark has 10 identities
// and the sampler requires batch_p of at most that.
mf::TrainConfig benchmark_config(mf::TrainMode mode, mf::FeatureTap tap,
                                 std::uint64_t seed) {
  mf::TrainConfig cfg;
  cfg.batch_p = 10;
  cfg.mode = mode;
  cfg.feature_tap = tap;
  cfg.seed = seed;
  return cfg;
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference oracle over the full loss-through-model
// surface

Outcome gradient_oracle() {
  mf::GradCheckOptions opts;  // 100 seeded trials, h=1e-5, tolerance 1e-4
  const auto t0 = Clock::now();
  const mf::GradCheckReport report = mf::run_gradient_checks(opts);
  const double elapsed = secs_since(t0);

  Outcome o;
  o.pass = report.passed(opts.tolerance) && elapsed < 120.0;
  o.detail = fmt(
      "max rel err %.3g (tol %.0e) over %zu coordinates, %zu skipped, "
      "%zu trials, %.1fs (limit 120s)",
      report.max_rel_err, opts.tolerance, report.coords_checked,
      report.coords_skipped, report.trials_run, elapsed);
  if (!report.passed(opts.tolerance)) {
    o.detail += ", worst at " + report.worst_coordinate;
  }
  return o;
}

// ---------------------------------------------------------------------------
// criterion 2: convergence on the benchmark dataset with default settings

Outcome synthetic_convergence(const Benchmark& b) {
  const auto t0 = Clock::now();
  const mf::FitResult result = mf::fit(
      b.train_set,
      benchmark_config(mf::TrainMode::combined, mf::FeatureTap::post_bn, 0));
  const mf::EvalReport report = mf::evaluate(b.split, result.params);

  // fraction of held-out same-class pairs inside the target radius + 0.1
  const mf::Matrix embedded =
      mf::forward(result.params, b.split.query.features, mf::RunMode::infer)
          .post_bn_normalized;
  const mf::LossConfig loss;
  const double radius_bound = loss.radius + 0.1;
  std::size_t pairs = 0;
  std::size_t within = 0;
  for (std::size_t i = 0; i < embedded.rows; ++i) {
    for (std::size_t j = i + 1; j < embedded.rows; ++j) {
      if (b.split.query.class_ids[i] != b.split.query.class_ids[j]) continue;
      ++pairs;
      within += mf::euclidean(embedded.row(i), embedded.row(j)) <= radius_bound;
    }
  }
  const double frac =
      pairs == 0 ? 0.0 : static_cast<double>(within) / static_cast<double>(pairs);
  const double elapsed = secs_since(t0);

  Outcome o;
  const double rank1 = report.cmc.empty() ? 0.0 : report.cmc[0];
  o.pass = rank1 >= 0.98 && report.map >= 0.95 && frac >= 0.90 &&
           elapsed < 300.0;
  o.detail = fmt(
      "rank-1 %.4f (need >= 0.98), mAP %.4f (need >= 0.95), %.1f%% of "
      "intra-class pairs within %.1f (need >= 90%%), %d queries, 120 epochs, "
      "%.1fs (limit 300s)",
      rank1, report.map, 100.0 * frac, radius_bound, report.n_queries_used,
      elapsed);
  return o;
}

// ---------------------------------------------------------------------------
// criteria 3 and 4 share one table of seed-averaged mAPs

struct AblationTable {
  double combined = 0.0;
  double softmax_only = 0.0;
  double lin_post = 0.0;
  double lin_pre = 0.0;
  double seconds = 0.0;
};

AblationTable make_ablation_table(const Benchmark& b) {
  const auto t0 = Clock::now();
  const auto mean_map = [&](mf::TrainMode mode, mf::FeatureTap tap) {
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const mf::FitResult result =
          mf::fit(b.train_set, benchmark_config(mode, tap, seed));
      sum += mf::evaluate(b.split, result.params).map;
    }
    return sum / 5.0;
  };
  AblationTable tab;
  tab.combined = mean_map(mf::TrainMode::combined, mf::FeatureTap::post_bn);
  tab.softmax_only =
      mean_map(mf::TrainMode::softmax_only, mf::FeatureTap::post_bn);
  tab.lin_post = mean_map(mf::TrainMode::lin_only, mf::FeatureTap::post_bn);
  tab.lin_pre = mean_map(mf::TrainMode::lin_only, mf::FeatureTap::pre_bn);
  tab.seconds = secs_since(t0);
  return tab;
}

Outcome ablation_direction(const AblationTable& tab) {
  Outcome o;
  o.pass = tab.combined >= tab.softmax_only - 0.01 &&
           tab.softmax_only >= tab.lin_post - 0.01;
  o.detail = fmt(
      "mAP over 5 seeds: combined %.4f >= softmax_only %.4f >= lin_only "
      "%.4f (slack 0.01), 15 of 20 trainings, %.1fs",
      tab.combined, tab.softmax_only, tab.lin_post, tab.seconds);
  return o;
}

Outcome bn_feature_direction(const AblationTable& tab) {
  Outcome o;
  o.pass = tab.lin_post >= tab.lin_pre - 0.01;
  o.detail = fmt(
      "lin_only mAP over 5 seeds: post-BN features %.4f >= pre-BN %.4f - "
      "0.01 (shares criterion-3 trainings)",
      tab.lin_post, tab.lin_pre);
  return o;
}

// ---------------------------------------------------------------------------
// criterion 5: re-ranking, exactness against the set-based reference plus
// the direction on a noisy split

Outcome reranking(const mf::SynthSpec& base_spec) {
  const auto t0 = Clock::now();

  mf::Rng rng(505);
  double worst = 0.0;
  std::string worst_at;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + rng.below(16);  // 5..20 samples
    const std::size_t n_query = 1 + rng.below(n - 2);
    mf::RerankConfig cfg;
    cfg.k1 = static_cast<int>(1 + rng.below(n - 1));
    cfg.k2 = static_cast<int>(1 + rng.below(static_cast<std::uint64_t>(cfg.k1)));
    const double lambdas[3] = {0.0, 0.3, 1.0};
    cfg.lambda = lambdas[trial % 3];

    mf::Matrix points(n, 3);
    for (double& v : points.data) v = rng.normal();
    if (trial % 5 == 0) {
      // coincident points exercise the tie-inclusive neighborhood rule
      for (std::size_t j = 0; j < 3; ++j) points.at(1, j) = points.at(0, j);
    }
    mf::Matrix joint(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double d = mf::euclidean(points.row(i), points.row(j));
        joint.at(i, j) = d;
        joint.at(j, i) = d;
      }
    }
    const mf::Matrix lib = mf::k_reciprocal_rerank_joint(joint, n_query, cfg);
    const mf::Matrix ref =
        oracles::rerank_by_sets(joint, n_query, cfg.k1, cfg.k2, cfg.lambda);
    for (std::size_t i = 0; i < lib.data.size(); ++i) {
      const double diff = std::abs(lib.data[i] - ref.data[i]);
      if (diff > worst) {
        worst = diff;
        worst_at = fmt("trial %d (n=%zu k1=%d k2=%d lambda=%.1f)", trial, n,
                       cfg.k1, cfg.k2, cfg.lambda);
      }
    }
  }
  const bool exact_ok = worst <= 1e-10;

  // direction on a noisy split, default re-ranking settings
  mf::SynthSpec noisy = base_spec;
  noisy.noise_sigma = 0.6;
  noisy.seed = 1;
  const mf::SyntheticDataset ds = mf::generate(noisy);
  const auto [train_idx, holdout_idx] = mf::split_train_holdout(ds, 10);
  const mf::FitResult result = mf::fit(
      ds.subset(train_idx),
      benchmark_config(mf::TrainMode::combined, mf::FeatureTap::post_bn, 0));
  const mf::EvalSplit split{ds.as_batch(holdout_idx), ds.as_batch(train_idx)};
  const mf::EvalReport report =
      mf::evaluate(split, result.params, mf::RerankConfig{});
  const double base_map = report.map;
  const double rr_map = report.reranked->map;
  const bool direction_ok = rr_map >= base_map - 0.005;

  Outcome o;
  o.pass = exact_ok && direction_ok;
  o.detail = fmt(
      "50 instances vs set-based reference: max abs diff %.2e (tol 1e-10)%s%s; "
      "noise-0.6 split: mAP %.4f baseline -> %.4f reranked (slack 0.005), "
      "%.1fs",
      worst, exact_ok ? "" : " at ", exact_ok ? "" : worst_at.c_str(), base_map,
      rr_map, secs_since(t0));
  return o;
}

// ---------------------------------------------------------------------------
// criterion 6: the distilled invariants of every module, timed as one sweep

using Check = std::pair<const char*, std::function<std::string()>>;

mf::EmbeddingBatch sweep_batch(std::size_t b, std::size_t d, int classes,
                               mf::Rng& rng, bool normalize) {
  mf::EmbeddingBatch batch;
  batch.features = mf::Matrix(b, d);
  for (double& v : batch.features.data) v = rng.normal();
  if (normalize) batch.features = mf::l2_normalize_rows(batch.features);
  for (std::size_t i = 0; i < b; ++i) {
    batch.class_ids.push_back(static_cast<int>(i % classes));
  }
  return batch;
}

std::string check_normalization_idempotence() {
  mf::Rng rng(1);
  const mf::EmbeddingBatch batch = sweep_batch(8, 5, 2, rng, false);
  const mf::EmbeddingBatch once = mf::l2_normalize(batch);
  const mf::EmbeddingBatch twice = mf::l2_normalize(once);
  for (std::size_t i = 0; i < once.features.data.size(); ++i) {
    if (std::abs(once.features.data[i] - twice.features.data[i]) > 1e-12) {
      return "renormalizing moved an entry by more than 1e-12";
    }
  }
  return "";
}

std::string check_metric_axioms() {
  mf::Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const mf::EmbeddingBatch batch = sweep_batch(9, 4, 3, rng, false);
    const mf::DistanceMatrix dist = mf::pairwise_distances(batch);
    const std::size_t b = batch.size();
    for (std::size_t i = 0; i < b; ++i) {
      if (dist.values.at(i, i) != 0.0) return "nonzero diagonal";
      for (std::size_t j = 0; j < b; ++j) {
        if (dist.values.at(i, j) != dist.values.at(j, i)) {
          return "asymmetric distance";
        }
        for (std::size_t k = 0; k < b; ++k) {
          if (dist.values.at(i, k) >
              dist.values.at(i, j) + dist.values.at(j, k) + 1e-9) {
            return "triangle inequality violated beyond 1e-9";
          }
        }
      }
    }
  }
  return "";
}

std::string check_unit_norm_identity() {
  mf::Rng rng(3);
  const mf::EmbeddingBatch batch = sweep_batch(10, 6, 2, rng, true);
  const mf::DistanceMatrix dist = mf::pairwise_distances(batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (std::size_t j = 0; j < batch.size(); ++j) {
      const double d2 = dist.values.at(i, j) * dist.values.at(i, j);
      const double ip = 2.0 - 2.0 * mf::dot(batch.features.row(i),
                                            batch.features.row(j));
      if (std::abs(d2 - ip) > 1e-9) {
        return "d^2 disagrees with 2 - 2<f_i,f_j> beyond 1e-9";
      }
    }
  }
  return "";
}

std::string check_loss_non_negativity() {
  mf::Rng rng(4);
  const mf::LossConfig cfg;
  for (int t = 0; t < 10; ++t) {
    const mf::EmbeddingBatch batch = sweep_batch(8, 5, 2 + t % 3, rng, true);
    mf::Matrix logits(8, 4);
    for (double& v : logits.data) v = rng.normal();
    const mf::LossBreakdown bd = mf::m_loss(batch, logits, cfg);
    if (bd.lp < 0.0 || bd.ln < 0.0 || bd.lin < 0.0 || bd.softmax_ls < 0.0 ||
        bd.m_loss < 0.0) {
      return "a loss component went negative";
    }
  }
  return "";
}

std::string check_ranking_loss_zero_iff_inactive() {
  // positives inside the radius, negatives at or beyond the maximum distance
  mf::EmbeddingBatch batch;
  batch.features = mf::Matrix(4, 1);
  batch.features.at(0, 0) = 0.0;
  batch.features.at(1, 0) = 0.05;
  batch.features.at(2, 0) = 2.2;
  batch.features.at(3, 0) = 2.3;
  batch.class_ids = {0, 0, 1, 1};
  const mf::LossConfig cfg;
  if (mf::lin_loss(batch, cfg) != 0.0) {
    return "inactive hinges still produced a nonzero ranking loss";
  }
  batch.features.at(2, 0) = 1.0;  // negative pulled inside the margin
  if (!(mf::lin_loss(batch, cfg) > 0.0)) {
    return "an active negative hinge produced a zero loss";
  }
  return "";
}

std::string check_weights_normalized() {
  mf::Rng rng(5);
  const mf::LossConfig cfg;
  for (int t = 0; t < 5; ++t) {
    const mf::EmbeddingBatch batch = sweep_batch(10, 4, 3, rng, true);
    const auto weights = mf::detail::capture_negative_weights(
        batch, mf::pairwise_distances(batch), cfg);
    for (const std::vector<double>& per_anchor : weights) {
      double sum = 0.0;
      for (double w : per_anchor) sum += w;
      if (std::abs(sum - 1.0) > 1e-12) {
        return "negative weights do not sum to 1 within 1e-12";
      }
    }
  }
  return "";
}

std::string check_weight_monotonicity() {
  mf::Rng rng(6);
  for (double temperature : {0.0, 0.5, 1.0, 5.0}) {
    mf::LossConfig cfg;
    cfg.temperature = temperature;
    for (int t = 0; t < 50; ++t) {
      const double d1 = rng.uniform(0.0, 2.0);
      const double d2 = d1 + rng.uniform(1e-6, 2.0 - d1 + 1e-6);
      if (!(mf::negative_weight(d1, cfg) > mf::negative_weight(d2, cfg))) {
        return fmt("weight not strictly decreasing at T=%.1f", temperature);
      }
    }
  }
  return "";
}

std::string check_monotone_in_lin_weight() {
  mf::Rng rng(7);
  const mf::EmbeddingBatch batch = sweep_batch(8, 5, 2, rng, true);
  mf::Matrix logits(8, 3);
  for (double& v : logits.data) v = rng.normal();
  double previous = -1.0;
  for (double w : {0.0, 0.2, 0.4, 0.9, 2.0}) {
    mf::LossConfig cfg;
    cfg.lin_weight = w;
    const double value = mf::m_loss(batch, logits, cfg).m_loss;
    if (value < previous - 1e-12) {
      return "m_loss decreased when the ranking weight grew";
    }
    previous = value;
  }
  return "";
}

std::string check_loss_permutation_invariance() {
  mf::Rng rng(8);
  const mf::LossConfig cfg;
  const mf::EmbeddingBatch batch = sweep_batch(9, 5, 3, rng, true);
  mf::Matrix logits(9, 3);
  for (double& v : logits.data) v = rng.normal();
  const mf::LossBreakdown base = mf::m_loss(batch, logits, cfg);

  std::vector<std::size_t> perm(batch.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  mf::EmbeddingBatch shuffled;
  shuffled.features = mf::Matrix(batch.size(), batch.dim());
  mf::Matrix shuffled_logits(batch.size(), logits.cols);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled.class_ids.push_back(batch.class_ids[perm[i]]);
    for (std::size_t j = 0; j < batch.dim(); ++j) {
      shuffled.features.at(i, j) = batch.features.at(perm[i], j);
    }
    for (std::size_t j = 0; j < logits.cols; ++j) {
      shuffled_logits.at(i, j) = logits.at(perm[i], j);
    }
  }
  const mf::LossBreakdown moved = mf::m_loss(shuffled, shuffled_logits, cfg);
  if (std::abs(moved.m_loss - base.m_loss) > 1e-12 ||
      std::abs(moved.lin - base.lin) > 1e-12 ||
      std::abs(moved.softmax_ls - base.softmax_ls) > 1e-12) {
    return "permuting the batch moved a loss value beyond 1e-12";
  }
  return "";
}

std::string check_post_bn_statistics() {
  mf::ModelParams params = mf::init_params({4, 4}, 2, 0);
  params.encoder_weights[0] = mf::Matrix(4, 4);
  for (std::size_t i = 0; i < 4; ++i) params.encoder_weights[0].at(i, i) = 1.0;
  params.encoder_biases[0].assign(4, 0.0);
  params.bn_scale = {1.0, 0.5, 2.0, 1.3};

  mf::Rng rng(9);
  mf::Matrix inputs(32, 4);
  for (double& v : inputs.data) v = 2.0 * rng.normal();
  const mf::ForwardTrace trace =
      mf::forward(params, inputs, mf::RunMode::train);
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 32; ++i) mean += trace.post_bn.at(i, j);
    mean /= 32.0;
    double var = 0.0;
    for (std::size_t i = 0; i < 32; ++i) {
      const double c = trace.post_bn.at(i, j) - mean;
      var += c * c;
    }
    var /= 32.0;
    if (std::abs(mean) >= 1e-6) return "post-BN column mean exceeds 1e-6";
    const double gamma = params.bn_scale[j];
    if (std::abs(var - gamma * gamma) >= 1e-4) {
      return "post-BN column variance is not gamma^2 within 1e-4";
    }
  }
  return "";
}

std::string check_no_bias_parameters() {
  const mf::ModelParams params = mf::init_params({5, 6, 4}, 3, 0);
  for (const std::string& name : mf::checkpoint_tensor_names(params)) {
    if (name.find("bias") != std::string::npos &&
        name.find("encoder") == std::string::npos) {
      return "head exposes a bias tensor: " + name;
    }
    if (name.find("shift") != std::string::npos) {
      return "head exposes a shift tensor: " + name;
    }
  }
  return "";
}

std::string check_infer_composition_independent() {
  // single linear encoder layer: a hidden ReLU could zero out a whole row
  // at a fresh random init, and the normalizer rejects zero embeddings
  const mf::ModelParams params = mf::init_params({5, 4}, 3, 11);
  mf::Rng rng(10);
  mf::Matrix inputs(6, 5);
  for (double& v : inputs.data) v = rng.normal();
  const mf::ForwardTrace joint =
      mf::forward(params, inputs, mf::RunMode::infer);
  for (std::size_t i = 0; i < inputs.rows; ++i) {
    mf::Matrix one(1, 5);
    for (std::size_t j = 0; j < 5; ++j) one.at(0, j) = inputs.at(i, j);
    const mf::ForwardTrace single =
        mf::forward(params, one, mf::RunMode::infer);
    for (std::size_t j = 0; j < joint.post_bn_normalized.cols; ++j) {
      if (std::abs(single.post_bn_normalized.at(0, j) -
                   joint.post_bn_normalized.at(i, j)) > 1e-9) {
        return "inference depends on batch composition beyond 1e-9";
      }
    }
  }
  return "";
}

std::string check_sampler_contract() {
  mf::Rng rng(12);
  for (int t = 0; t < 6; ++t) {
    const int classes = 3 + static_cast<int>(rng.below(4));
    const int per_class = 5 + static_cast<int>(rng.below(5));
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c) {
      for (int s = 0; s < per_class; ++s) labels.push_back(c);
    }
    const int p = 2 + static_cast<int>(rng.below(2));
    const int k = 2 + static_cast<int>(rng.below(2));
    for (const mf::BatchPlan& plan :
         mf::epoch_plan(labels, p, k, rng.next_u64())) {
      std::map<int, int> counts;
      for (std::size_t idx : plan.sample_indices) ++counts[labels[idx]];
      if (static_cast<int>(counts.size()) != p) {
        return "batch does not span exactly p classes";
      }
      for (const auto& [cls, count] : counts) {
        if (count != k) return "a class does not fill exactly k slots";
      }
    }
  }
  return "";
}

std::string check_sampler_determinism() {
  std::vector<int> labels;
  for (int c = 0; c < 6; ++c) {
    for (int s = 0; s < 8; ++s) labels.push_back(c);
  }
  const auto a = mf::epoch_plan(labels, 3, 4, 99);
  const auto b = mf::epoch_plan(labels, 3, 4, 99);
  if (a.size() != b.size()) return "epoch plans differ in length";
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].sample_indices != b[i].sample_indices) {
      return "equal seeds produced different batches";
    }
  }
  return "";
}

mf::SyntheticDataset sweep_dataset(std::uint64_t seed) {
  mf::SynthSpec spec;
  spec.n_classes = 4;
  spec.per_class = 6;
  spec.dim = 5;
  spec.noise_sigma = 0.2;
  spec.seed = seed;
  return mf::generate(spec);
}

std::string check_training_determinism() {
  const mf::SyntheticDataset ds = sweep_dataset(31);
  mf::TrainConfig cfg;
  cfg.total_epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.batch_p = 2;
  cfg.batch_k = 2;
  cfg.hidden_sizes = {8};
  cfg.embed_dim = 8;
  const std::string a = mf::checkpoint_to_string(mf::fit(ds, cfg).params);
  const std::string b = mf::checkpoint_to_string(mf::fit(ds, cfg).params);
  if (a != b) return "two identical fits differ byte-for-byte";
  return "";
}

std::string check_small_step_descent() {
  const mf::SyntheticDataset ds = sweep_dataset(32);
  const auto plans = mf::epoch_plan(ds.class_ids(), 2, 2, 7);
  const mf::BatchPlan& plan = plans.front();
  const mf::Matrix inputs = ds.inputs_for(plan.sample_indices);
  const std::vector<int> labels = ds.labels_for(plan.sample_indices);

  mf::ModelParams params = mf::init_params({5, 8}, 4, 3);
  mf::SgdState opt(params);
  mf::TrainConfig cfg;
  cfg.batch_p = 2;
  cfg.batch_k = 2;
  double previous = 1e300;
  for (int step = 0; step < 10; ++step) {
    const double value =
        mf::train_step(params, opt, inputs, labels, cfg, 1e-4).m_loss;
    if (value > previous + 1e-6) {
      return fmt("m_loss rose by more than 1e-6 at step %d", step);
    }
    previous = value;
  }
  return "";
}

std::string check_warmup_shape() {
  mf::TrainConfig cfg;
  for (int e = 0; e + 1 < cfg.warmup_epochs; ++e) {
    if (mf::warmup_lr(e + 1, cfg) < mf::warmup_lr(e, cfg)) {
      return "learning rate fell during warmup";
    }
  }
  for (int e = cfg.warmup_epochs; e + 1 < cfg.total_epochs; ++e) {
    if (mf::warmup_lr(e + 1, cfg) > mf::warmup_lr(e, cfg)) {
      return "learning rate rose after warmup";
    }
  }
  return "";
}

struct SweepRetrieval {
  mf::EvalSplit split;
  mf::Matrix dist{0, 0};
};

SweepRetrieval sweep_retrieval(mf::Rng& rng, std::size_t nq, std::size_t ng) {
  SweepRetrieval r;
  r.split.query.features = mf::Matrix(nq, 3);
  for (double& v : r.split.query.features.data) v = rng.normal();
  r.split.gallery.features = mf::Matrix(ng, 3);
  for (double& v : r.split.gallery.features.data) v = rng.normal();
  for (std::size_t i = 0; i < nq; ++i) {
    r.split.query.class_ids.push_back(static_cast<int>(rng.below(3)));
  }
  for (std::size_t g = 0; g < ng; ++g) {
    r.split.gallery.class_ids.push_back(static_cast<int>(rng.below(3)));
  }
  for (std::size_t g = 0; g < 3 && g < ng; ++g) {
    r.split.gallery.class_ids[g] = static_cast<int>(g);  // positives exist
  }
  r.dist = mf::cross_distances(r.split.query.features,
                               r.split.gallery.features);
  return r;
}

std::string check_cmc_shape_and_map_range() {
  mf::Rng rng(13);
  for (int t = 0; t < 10; ++t) {
    const SweepRetrieval r = sweep_retrieval(rng, 4, 8);
    const mf::RankingMetrics m = mf::ranking_metrics(r.split, r.dist);
    if (m.map < 0.0 || m.map > 1.0) return "map left [0, 1]";
    for (std::size_t k = 1; k < m.cmc.size(); ++k) {
      if (m.cmc[k] < m.cmc[k - 1]) return "cmc decreased in k";
    }
    if (m.n_queries_used > 0 && m.cmc.back() != 1.0) {
      return "cmc does not reach 1 although every used query has a match";
    }
  }
  return "";
}

std::string check_metric_permutation_invariance() {
  mf::Rng rng(14);
  const SweepRetrieval r = sweep_retrieval(rng, 5, 7);
  const mf::RankingMetrics base = mf::ranking_metrics(r.split, r.dist);

  SweepRetrieval rotated = r;
  const std::size_t ng = r.split.gallery.size();
  for (std::size_t j = 0; j < ng; ++j) {
    const std::size_t src = (j + 2) % ng;
    rotated.split.gallery.class_ids[j] = r.split.gallery.class_ids[src];
    for (std::size_t d = 0; d < 3; ++d) {
      rotated.split.gallery.features.at(j, d) =
          r.split.gallery.features.at(src, d);
    }
    for (std::size_t q = 0; q < r.split.query.size(); ++q) {
      rotated.dist.at(q, j) = r.dist.at(q, src);
    }
  }
  const mf::RankingMetrics moved =
      mf::ranking_metrics(rotated.split, rotated.dist);
  if (moved.map != base.map || moved.cmc != base.cmc) {
    return "permuting the gallery changed the metrics";
  }
  return "";
}

std::string check_perfect_ranking_equivalence() {
  mf::Rng rng(15);
  for (int t = 0; t < 10; ++t) {
    SweepRetrieval r = sweep_retrieval(rng, 3, 6);
    if (t % 2 == 0) {
      // planted perfect geometry
      for (std::size_t i = 0; i < 3; ++i) {
        r.split.query.features.at(i, 0) =
            10.0 * r.split.query.class_ids[i];
      }
      for (std::size_t g = 0; g < 6; ++g) {
        r.split.gallery.features.at(g, 0) =
            10.0 * r.split.gallery.class_ids[g];
      }
      r.dist = mf::cross_distances(r.split.query.features,
                                   r.split.gallery.features);
    }
    bool all_lead = true;
    for (std::size_t q = 0; q < 3; ++q) {
      double worst_pos = 0.0;
      double best_neg = 1e300;
      for (std::size_t g = 0; g < 6; ++g) {
        const bool pos =
            r.split.gallery.class_ids[g] == r.split.query.class_ids[q];
        if (pos) worst_pos = std::max(worst_pos, r.dist.at(q, g));
        if (!pos) best_neg = std::min(best_neg, r.dist.at(q, g));
      }
      if (worst_pos > best_neg) all_lead = false;
    }
    const mf::RankingMetrics m = mf::ranking_metrics(r.split, r.dist);
    if ((m.map == 1.0) != all_lead) {
      return "map hit 1 without positives leading (or the reverse)";
    }
  }
  return "";
}

std::string check_identity_blend_preserves_order() {
  mf::Rng rng(16);
  mf::Matrix points(10, 3);
  for (double& v : points.data) v = rng.normal();
  mf::Matrix joint(10, 10);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t j = i + 1; j < 10; ++j) {
      const double d = mf::euclidean(points.row(i), points.row(j));
      joint.at(i, j) = d;
      joint.at(j, i) = d;
    }
  }
  mf::RerankConfig cfg;
  cfg.k1 = 4;
  cfg.k2 = 2;
  cfg.lambda = 1.0;
  const mf::Matrix out = mf::k_reciprocal_rerank_joint(joint, 3, cfg);
  const auto argsort = [](const mf::Matrix& m, std::size_t row) {
    std::vector<std::size_t> order(m.cols);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       const double da = m.at(row, a);
                       const double db = m.at(row, b);
                       return da < db || (da == db && a < b);
                     });
    return order;
  };
  mf::Matrix original(3, 7);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t g = 0; g < 7; ++g) original.at(q, g) = joint.at(q, 3 + g);
  }
  for (std::size_t q = 0; q < 3; ++q) {
    if (argsort(out, q) != argsort(original, q)) {
      return "lambda=1 changed a ranking order";
    }
  }
  return "";
}

std::string check_prototype_norms() {
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    mf::SynthSpec spec;
    spec.n_classes = 5;
    spec.per_class = 2;
    spec.dim = 8;
    spec.noise_sigma = 0.0;
    spec.seed = seed;
    const mf::SyntheticDataset ds = mf::generate(spec);
    for (const mf::SampleRow& row : ds.rows) {
      double norm_sq = 0.0;
      for (double v : row.features) norm_sq += v * v;
      if (std::abs(std::sqrt(norm_sq) - 1.0) > 1e-9) {
        return "a noise-free sample (prototype) is not unit norm within 1e-9";
      }
    }
  }
  return "";
}

std::string check_noise_monotonicity() {
  const auto mean_intra = [](double sigma, std::uint64_t seed) {
    mf::SynthSpec spec;
    spec.n_classes = 5;
    spec.per_class = 8;
    spec.dim = 8;
    spec.noise_sigma = sigma;
    spec.seed = seed;
    const mf::SyntheticDataset ds = mf::generate(spec);
    const mf::EmbeddingBatch batch = ds.as_batch(ds.all_indices());
    const mf::DistanceMatrix dist = mf::pairwise_distances(batch);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t j = i + 1; j < batch.size(); ++j) {
        if (batch.class_ids[i] != batch.class_ids[j]) continue;
        total += dist.values.at(i, j);
        ++pairs;
      }
    }
    return total / static_cast<double>(pairs);
  };
  for (std::uint64_t seed : {4ULL, 5ULL, 6ULL}) {
    if (!(mean_intra(0.5, seed) > mean_intra(0.1, seed))) {
      return "intra-class spread did not grow with the noise level";
    }
  }
  return "";
}

std::string check_cli_idempotence() {
  const fs::path dir = fs::temp_directory_path() / "mf_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cli = METRICFORGE_CLI_PATH;
  const auto gen = [&](const std::string& name) -> std::string {
    const std::string out = (dir / name).string();
    const std::string cmd = cli +
                            " gen --classes 3 --per-class 4 --dim 4 "
                            "--noise 0.2 --seed 8 --out " +
                            out + " > /dev/null";
    const int status = std::system(cmd.c_str());
    if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      return "";
    }
    std::ifstream file(out, std::ios::binary);
    std::ostringstream text;
    text << file.rdbuf();
    return text.str();
  };
  const std::string a = gen("a.csv");
  const std::string b = gen("b.csv");
  if (a.empty() || b.empty()) return "generation command failed";
  if (a != b) return "two identical generation commands differ";
  return "";
}

Outcome invariant_sweep() {
  const std::vector<Check> checks = {
      {"normalization idempotence", check_normalization_idempotence},
      {"distance metric axioms", check_metric_axioms},
      {"unit-norm inner-product identity", check_unit_norm_identity},
      {"loss non-negativity", check_loss_non_negativity},
      {"ranking loss zero iff hinges inactive",
       check_ranking_loss_zero_iff_inactive},
      {"negative weights sum to one", check_weights_normalized},
      {"closer negatives weigh more", check_weight_monotonicity},
      {"objective monotone in ranking weight", check_monotone_in_lin_weight},
      {"loss permutation invariance", check_loss_permutation_invariance},
      {"post-BN column statistics", check_post_bn_statistics},
      {"no bias or shift tensors in the head", check_no_bias_parameters},
      {"inference ignores batch composition",
       check_infer_composition_independent},
      {"sampler batch contract", check_sampler_contract},
      {"sampler determinism", check_sampler_determinism},
      {"training determinism", check_training_determinism},
      {"small-step descent", check_small_step_descent},
      {"warmup schedule shape", check_warmup_shape},
      {"cmc cumulative and map bounded", check_cmc_shape_and_map_range},
      {"metric permutation invariance", check_metric_permutation_invariance},
      {"perfect ranking equivalence", check_perfect_ranking_equivalence},
      {"identity blend preserves order", check_identity_blend_preserves_order},
      {"prototype unit norms", check_prototype_norms},
      {"noise widens clusters", check_noise_monotonicity},
      {"command-line determinism", check_cli_idempotence},
  };

  const auto t0 = Clock::now();
  std::size_t passed = 0;
  std::string first_failure;
  for (const Check& check : checks) {
    std::string failure;
    try {
      failure = check.second();
    } catch (const std::exception& e) {
      failure = std::string("exception: ") + e.what();
    }
    if (failure.empty()) {
      ++passed;
    } else if (first_failure.empty()) {
      first_failure = std::string(check.first) + ": " + failure;
    }
  }
  const double elapsed = secs_since(t0);

  Outcome o;
  o.pass = passed == checks.size() && elapsed < 60.0;
  o.detail = fmt("%zu of %zu invariant checks passed, %.1fs (limit 60s)",
                 passed, checks.size(), elapsed);
  if (!first_failure.empty()) o.detail += ", first failure: " + first_failure;
  return o;
}

// ---------------------------------------------------------------------------
// criterion 7: retrieval metrics against brute-force enumeration

Outcome protocol_oracles() {
  const auto t0 = Clock::now();
  mf::Rng rng(707);
  int exact = 0;
  std::string first_failure;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + rng.below(5);
    const std::size_t ng = 2 + rng.below(11 - nq);  // nq + ng <= 12

    mf::EvalSplit split;
    split.query.features = mf::Matrix(nq, 3);
    for (double& v : split.query.features.data) v = rng.normal();
    split.gallery.features = mf::Matrix(ng, 3);
    for (double& v : split.gallery.features.data) v = rng.normal();
    const bool with_cameras = trial % 4 != 0;
    for (std::size_t i = 0; i < nq; ++i) {
      split.query.class_ids.push_back(static_cast<int>(rng.below(3)));
      if (with_cameras) {
        split.query.camera_ids.push_back(static_cast<int>(rng.below(3)));
      }
    }
    for (std::size_t g = 0; g < ng; ++g) {
      split.gallery.class_ids.push_back(static_cast<int>(rng.below(3)));
      if (with_cameras) {
        split.gallery.camera_ids.push_back(static_cast<int>(rng.below(3)));
      }
    }
    if (trial % 7 == 0 && ng >= 2) {
      // duplicated gallery rows force distance ties through the tie-break
      for (std::size_t j = 0; j < 3; ++j) {
        split.gallery.features.at(1, j) = split.gallery.features.at(0, j);
      }
    }
    const mf::Matrix dist = mf::cross_distances(split.query.features,
                                                split.gallery.features);
    const mf::RankingMetrics lib = mf::ranking_metrics(split, dist);
    const oracles::RankedMetrics ref = oracles::ranking_by_enumeration(
        dist, split.query.class_ids,
        with_cameras ? split.query.camera_ids : std::vector<int>(nq, -1),
        split.gallery.class_ids,
        with_cameras ? split.gallery.camera_ids : std::vector<int>(ng, -1));
    const bool same = lib.n_queries_used == ref.used && lib.map == ref.map &&
                      lib.cmc == ref.cmc;
    if (same) {
      ++exact;
    } else if (first_failure.empty()) {
      first_failure = fmt("trial %d (nq=%zu ng=%zu): map %.17g vs %.17g",
                          trial, nq, ng, lib.map, ref.map);
    }
  }
  Outcome o;
  o.pass = exact == 100;
  o.detail = fmt("%d of 100 seeded splits agree exactly with enumeration, "
                 "%.2fs",
                 exact, secs_since(t0));
  if (!first_failure.empty()) o.detail += ", first mismatch: " + first_failure;
  return o;
}

int judge(int index, const char* name, const std::function<Outcome()>& fn) {
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("unhandled exception: ") + e.what();
  }
  std::printf("[%s] criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", index,
              name, o.detail.c_str());
  std::fflush(stdout);
  return o.pass ? 0 : 1;
}

}  // namespace

int main() {
  int failures = 0;

  failures += judge(1, "gradient oracle", gradient_oracle);

  std::optional<Benchmark> bench;
  try {
    bench = make_benchmark();
  } catch (const std::exception& e) {
    std::printf("benchmark dataset unavailable: %s\n", e.what());
  }
  const auto with_bench = [&](const std::function<Outcome(const Benchmark&)>& fn) {
    return [&, fn]() -> Outcome {
      if (!bench) return {false, "benchmark dataset unavailable"};
      return fn(*bench);
    };
  };

  failures += judge(2, "synthetic convergence", with_bench(synthetic_convergence));

  std::optional<AblationTable> table;
  const auto with_table = [&](Outcome (*fn)(const AblationTable&)) {
    return [&, fn]() -> Outcome {
      if (!bench) return {false, "benchmark dataset unavailable"};
      if (!table) table = make_ablation_table(*bench);
      return fn(*table);
    };
  };
  failures += judge(3, "ablation direction", with_table(ablation_direction));
  failures += judge(4, "feature-tap direction", with_table(bn_feature_direction));

  failures += judge(5, "re-ranking", [] {
    mf::SynthSpec base;  // reshaped inside for the noisy split
    return reranking(base);
  });
  failures += judge(6, "invariant sweep", invariant_sweep);
  failures += judge(7, "protocol oracles", protocol_oracles);

  if (failures == 0) {
    std::printf("acceptance: all 7 criteria passed\n");
  } else {
    std::printf("acceptance: %d of 7 criteria FAILED\n", failures);
  }
  return failures == 0 ? 0 : 1;
}
