// SPDX-License-Identifier: Apache-2.0
/**
 * @file   long_term_memory.hpp
 * @brief  Prototype store: selection, potentiation and LFU-bounded commit.
 */
#pragma once

#include "xmem/affinity.hpp"
#include "xmem/core_types.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace xmem {

struct ConsolidationReport {
  std::size_t prototype_count = 0;
  std::size_t evicted_count = 0;
  std::size_t candidate_elements = 0;

  double compression_ratio() const {
    return prototype_count == 0 ? 0.0
                                : static_cast<double>(candidate_elements) /
                                      static_cast<double>(prototype_count);
  }
};

struct Prototypes {
  KeyBlock keys;
  ShrinkageVector shrinkage;
  ValueBlock values;
};

/// Top-p candidates by normalized usage, ties toward the lower index, sorted ascending.
inline IndexList select_prototypes(const KeyBlock &candidate_keys, const Vector &normalized_usage,
                                   std::size_t p) {
  if (normalized_usage.size() != candidate_keys.size())
    throw ShapeError("select_prototypes: " + std::to_string(normalized_usage.size()) +
                     " usage entries for " + std::to_string(candidate_keys.size()) +
                     " candidates");
  const auto n = static_cast<std::size_t>(normalized_usage.size());
  const std::size_t take = std::min(p, n);
  IndexList idx(n);
  std::iota(idx.begin(), idx.end(), Index{0});
  auto by_usage = [&](Index a, Index b) {
    if (normalized_usage(a) != normalized_usage(b))
      return normalized_usage(a) > normalized_usage(b);
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                    by_usage);
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Uniformly random p distinct candidates, sorted ascending.
inline IndexList select_prototypes_random(Index candidate_count, std::size_t p,
                                          std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(candidate_count);
  IndexList idx(n);
  std::iota(idx.begin(), idx.end(), Index{0});
  std::mt19937_64 rng(seed);
  const std::size_t take = std::min(p, n);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/**
 * Lloyd's k-means on the candidate keys, then each centroid is snapped to its
 * nearest still-unused candidate. Seeded from distinct random candidates.
 */
inline IndexList select_prototypes_kmeans(const KeyBlock &candidate_keys, std::size_t p,
                                          std::uint64_t seed, int iterations = 10) {
  const Matrix &X = candidate_keys.data();
  const Index n = X.cols();
  const auto k = static_cast<Index>(std::min<std::size_t>(p, static_cast<std::size_t>(n)));
  if (k == 0)
    return {};

  Matrix centroids = X(Eigen::all, select_prototypes_random(n, static_cast<std::size_t>(k), seed));
  std::vector<Index> assign(static_cast<std::size_t>(n), 0);

  auto nearest = [&](const Matrix &c, Index i) {
    Index best = 0;
    float best_d = std::numeric_limits<float>::infinity();
    for (Index m = 0; m < c.cols(); ++m) {
      const float d = (c.col(m) - X.col(i)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = m;
      }
    }
    return best;
  };

  for (int it = 0; it < iterations; ++it) {
    for (Index i = 0; i < n; ++i)
      assign[static_cast<std::size_t>(i)] = nearest(centroids, i);
    Matrix sums = Matrix::Zero(X.rows(), k);
    Vector counts = Vector::Zero(k);
    for (Index i = 0; i < n; ++i) {
      sums.col(assign[static_cast<std::size_t>(i)]) += X.col(i);
      counts(assign[static_cast<std::size_t>(i)]) += 1.0f;
    }
    for (Index m = 0; m < k; ++m)
      if (counts(m) > 0.0f) // empty clusters keep their previous centroid
        centroids.col(m) = sums.col(m) / counts(m);
  }

  std::vector<bool> used(static_cast<std::size_t>(n), false);
  IndexList out;
  out.reserve(static_cast<std::size_t>(k));
  for (Index m = 0; m < k; ++m) {
    Index best = -1;
    float best_d = std::numeric_limits<float>::infinity();
    for (Index i = 0; i < n; ++i) {
      if (used[static_cast<std::size_t>(i)])
        continue;
      const float d = (centroids.col(m) - X.col(i)).squaredNorm();
      if (best < 0 || d < best_d) {
        best_d = d;
        best = i;
      }
    }
    used[static_cast<std::size_t>(best)] = true;
    out.push_back(best);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/**
 * Prototype keys are copied from the candidates; prototype values and
 * shrinkage are affinity-weighted averages over all candidates, with the
 * prototypes acting as queries under unit selection.
 */
inline Prototypes potentiate(const KeyBlock &candidate_keys,
                             const ShrinkageVector &candidate_shrinkage,
                             const ValueBlock &candidate_values, const IndexList &prototype_indices,
                             std::size_t top_k) {
  const Index n = candidate_keys.size();
  if (candidate_shrinkage.size() != n || candidate_values.size() != n)
    throw ShapeError("potentiate: candidate keys/shrinkage/values disagree in count");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (Index i : prototype_indices) {
    if (i < 0 || i >= n)
      throw ValidationError("potentiate: prototype index " + std::to_string(i) + " out of range");
    if (seen[static_cast<std::size_t>(i)])
      throw ValidationError("potentiate: duplicate prototype index " + std::to_string(i));
    seen[static_cast<std::size_t>(i)] = true;
  }
  if (prototype_indices.empty())
    return Prototypes{KeyBlock(candidate_keys.channels()), ShrinkageVector(),
                      ValueBlock(candidate_values.channels())};

  KeyBlock proto_keys = candidate_keys.columns(prototype_indices);
  const Matrix unit = Matrix::Ones(proto_keys.channels(), proto_keys.size());
  const auto sim = similarity(candidate_keys.data(), candidate_shrinkage.data(),
                              proto_keys.data(), unit);
  const auto w = affinity(sim, top_k);
  Matrix values = readout(candidate_values.data(), w);
  Vector shrinkage = (candidate_shrinkage.data().transpose() * w.data()).transpose();
  // A convex combination of values >= 1 can round a hair below 1.
  shrinkage = shrinkage.cwiseMax(1.0f);
  return Prototypes{std::move(proto_keys), ShrinkageVector(std::move(shrinkage)),
                    ValueBlock(std::move(values))};
}

/// Flat prototype store capped at l_max elements with LFU eviction.
class LongTermMemory {
public:
  LongTermMemory(FeatureDims dims, std::size_t l_max)
      : dims_(dims), l_max_(l_max), keys_(static_cast<Index>(dims.c_k)),
        values_(static_cast<Index>(dims.c_v)) {
    dims_.validate();
  }

  std::size_t size() const { return static_cast<std::size_t>(keys_.size()); }
  std::size_t l_max() const { return l_max_; }
  const KeyBlock &keys() const { return keys_; }
  const ShrinkageVector &shrinkage() const { return shrinkage_; }
  const ValueBlock &values() const { return values_; }
  const Vector &usage() const { return usage_; }

  /**
   * Evicts the least-used elements (ties toward the lower index) until the new
   * prototypes fit, then appends them with zero usage (or `initial_usage`).
   * Returns the number of evicted elements.
   */
  std::size_t commit(Prototypes protos, const Vector *initial_usage = nullptr) {
    const auto incoming = static_cast<std::size_t>(protos.keys.size());
    if (protos.shrinkage.size() != protos.keys.size() ||
        protos.values.size() != protos.keys.size())
      throw ShapeError("LongTermMemory::commit: prototype keys/shrinkage/values disagree");
    if (incoming > 0) {
      detail::require_shape("LongTermMemory::commit keys", protos.keys.channels(),
                            protos.keys.size(), static_cast<Index>(dims_.c_k),
                            protos.keys.size());
      detail::require_shape("LongTermMemory::commit values", protos.values.channels(),
                            protos.values.size(), static_cast<Index>(dims_.c_v),
                            protos.values.size());
    }
    if (incoming > l_max_)
      throw ConfigError("LongTermMemory::commit: " + std::to_string(incoming) +
                        " prototypes exceed l_max=" + std::to_string(l_max_));
    if (initial_usage && initial_usage->size() != protos.keys.size())
      throw ShapeError("LongTermMemory::commit: initial usage length mismatch");

    std::size_t evicted = 0;
    if (size() + incoming > l_max_) {
      evicted = size() + incoming - l_max_;
      keep_columns(survivors(evicted));
    }

    keys_.append(protos.keys);
    shrinkage_.append(protos.shrinkage);
    values_.append(protos.values);
    const Index old = usage_.size();
    usage_.conservativeResize(old + static_cast<Index>(incoming));
    if (initial_usage)
      usage_.tail(static_cast<Index>(incoming)) = *initial_usage;
    else
      usage_.tail(static_cast<Index>(incoming)).setZero();
    return evicted;
  }

  template <typename Derived> void accumulate_usage(const Eigen::MatrixBase<Derived> &mass) {
    if (mass.size() != usage_.size())
      throw ShapeError("LongTermMemory::accumulate_usage: got " + std::to_string(mass.size()) +
                       " entries for " + std::to_string(usage_.size()) + " elements");
    usage_ += mass;
  }

  /// Indices (ascending) that remain after evicting `evict` least-used elements.
  IndexList survivors(std::size_t evict) const {
    const auto n = static_cast<std::size_t>(usage_.size());
    IndexList order(n);
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Index a, Index b) { return usage_(a) < usage_(b); });
    IndexList keep(order.begin() + static_cast<std::ptrdiff_t>(std::min(evict, n)), order.end());
    std::sort(keep.begin(), keep.end());
    return keep;
  }

  /// Copies the store into the leading columns starting at `offset`.
  void write_combined(Matrix &keys, Vector &shrinkage, Matrix &values, Index offset) const {
    const Index n = keys_.size();
    if (n == 0)
      return;
    keys.middleCols(offset, n) = keys_.data();
    shrinkage.segment(offset, n) = shrinkage_.data();
    values.middleCols(offset, n) = values_.data();
  }

private:
  void keep_columns(const IndexList &keep) {
    keys_ = keys_.columns(keep);
    shrinkage_ = shrinkage_.elements(keep);
    values_ = values_.columns(keep);
    Vector u = usage_(keep);
    usage_ = std::move(u);
  }

  FeatureDims dims_;
  std::size_t l_max_;
  KeyBlock keys_;
  ShrinkageVector shrinkage_;
  ValueBlock values_;
  Vector usage_;
};

} // namespace xmem
