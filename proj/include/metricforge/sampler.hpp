#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metricforge/errors.hpp"
#include "metricforge/rng.hpp"

namespace metricforge {

/// One identity-balanced batch: exactly p distinct classes, k samples each.
struct BatchPlan {
  std::vector<std::size_t> sample_indices;
  int p = 0;
  int k = 0;
};

/// Identity-balanced batching. Each epoch every class is cut into shuffled
/// chunks of k samples (floor(n/k) chunks when a class has n >= k samples;
/// a single chunk covering every sample at least once, topped up with
/// replacement, when n < k). Batches then repeatedly draw p distinct
/// not-yet-exhausted classes, preferring those with the most chunks left so
/// an epoch visits each class about floor(n/k) times.
class PKSampler {
 public:
  PKSampler(const std::vector<int>& class_ids, int p, int k,
            std::uint64_t seed)
      : p_(p), k_(k), rng_(seed) {
    if (p < 1 || k < 1) {
      throw ConfigInvalid("sampler needs p >= 1 and k >= 1");
    }
    std::map<int, std::vector<std::size_t>> grouped;
    for (std::size_t i = 0; i < class_ids.size(); ++i) {
      grouped[class_ids[i]].push_back(i);
    }
    for (auto& [cls, indices] : grouped) {
      pools_.push_back(Pool{cls, std::move(indices), {}});
    }
    if (pools_.size() < static_cast<std::size_t>(p)) {
      throw TooFewClasses("need at least " + std::to_string(p) +
                          " distinct classes, dataset has " +
                          std::to_string(pools_.size()));
    }
    begin_epoch();
  }

  /// Next batch, starting a fresh epoch when the current one is exhausted.
  BatchPlan next_batch() {
    std::optional<BatchPlan> plan = next_in_epoch();
    if (!plan) {
      begin_epoch();
      plan = next_in_epoch();
    }
    return std::move(*plan);
  }

  /// Next batch of the current epoch, or nothing if fewer than p classes
  /// still hold an unused chunk.
  std::optional<BatchPlan> next_in_epoch() {
    std::vector<std::size_t> available;
    for (std::size_t c = 0; c < pools_.size(); ++c) {
      if (!pools_[c].chunks.empty()) available.push_back(c);
    }
    if (available.size() < static_cast<std::size_t>(p_)) return std::nullopt;
    // favor the classes with the most chunks left, random within ties
    rng_.shuffle(available);
    std::stable_sort(available.begin(), available.end(),
                     [this](std::size_t a, std::size_t b) {
                       return pools_[a].chunks.size() > pools_[b].chunks.size();
                     });
    BatchPlan plan;
    plan.p = p_;
    plan.k = k_;
    plan.sample_indices.reserve(static_cast<std::size_t>(p_) * k_);
    for (int t = 0; t < p_; ++t) {
      Pool& pool = pools_[available[static_cast<std::size_t>(t)]];
      const std::vector<std::size_t>& chunk = pool.chunks.back();
      plan.sample_indices.insert(plan.sample_indices.end(), chunk.begin(),
                                 chunk.end());
      pool.chunks.pop_back();
    }
    return plan;
  }

  void begin_epoch() {
    for (Pool& pool : pools_) {
      std::vector<std::size_t> order = pool.samples;
      rng_.shuffle(order);
      pool.chunks.clear();
      const std::size_t n = order.size();
      const std::size_t k = static_cast<std::size_t>(k_);
      if (n >= k) {
        for (std::size_t start = 0; start + k <= n; start += k) {
          pool.chunks.emplace_back(order.begin() + start,
                                   order.begin() + start + k);
        }
      } else {
        // every sample at least once, the rest drawn with replacement
        std::vector<std::size_t> chunk = order;
        while (chunk.size() < k) {
          chunk.push_back(pool.samples[rng_.below(pool.samples.size())]);
        }
        rng_.shuffle(chunk);
        pool.chunks.push_back(std::move(chunk));
      }
      rng_.shuffle(pool.chunks);
    }
  }

 private:
  struct Pool {
    int class_id = 0;
    std::vector<std::size_t> samples;
    std::vector<std::vector<std::size_t>> chunks;
  };

  int p_ = 0;
  int k_ = 0;
  Rng rng_;
  std::vector<Pool> pools_;
};

/// All batches of one epoch. Deterministic given the seed.
inline std::vector<BatchPlan> epoch_plan(const std::vector<int>& class_ids,
                                         int p, int k, std::uint64_t seed) {
  PKSampler sampler(class_ids, p, k, seed);
  std::vector<BatchPlan> plans;
  while (std::optional<BatchPlan> plan = sampler.next_in_epoch()) {
    plans.push_back(std::move(*plan));
  }
  return plans;
}

}  // namespace metricforge
