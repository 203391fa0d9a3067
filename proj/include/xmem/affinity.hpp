// SPDX-License-Identifier: Apache-2.0
/**
 * @file   affinity.hpp
 * @brief  Anisotropic L2 similarity, top-k softmax affinity and readout.
 *
 * The similarity between memory element i and query position j is
 *
 *   S_ij = -s_i * sum_c e_cj * (k_ci - q_cj)^2
 *
 * evaluated without the triple loop as
 *
 *   S = diag(s) * ( -(k.k)^T e + 2 k^T (e.q) - 1^T (e.q.q) )
 *
 * which is two GEMMs plus broadcasts.
 */
#pragma once

#include "xmem/core_types.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace xmem {

/// n x hw similarity between memory elements (rows) and query positions.
class SimilarityMatrix {
public:
  SimilarityMatrix() = default;
  explicit SimilarityMatrix(Matrix data) : data_(std::move(data)) {
    if (!detail::all_finite(data_))
      throw ValidationError("SimilarityMatrix: non-finite entry");
  }

  const Matrix &data() const { return data_; }
  Index elements() const { return data_.rows(); }
  Index positions() const { return data_.cols(); }

private:
  Matrix data_;
};

/// Column-stochastic n x hw weights. Filtered entries are exactly 0.
class AffinityMatrix {
public:
  AffinityMatrix(Matrix data, std::size_t k_used)
      : data_(std::move(data)), k_used_(k_used) {}

  const Matrix &data() const { return data_; }
  std::size_t k_used() const { return k_used_; }
  Index elements() const { return data_.rows(); }
  Index positions() const { return data_.cols(); }

private:
  Matrix data_;
  std::size_t k_used_;
};

/// Column sums of an affinity matrix: probability mass per memory element.
struct UsageMass {
  Vector per_element;
};

/// Disables top-k filtering.
inline constexpr std::size_t kNoTopK = std::numeric_limits<std::size_t>::max();

inline SimilarityMatrix similarity(const Matrix &keys, const Vector &shrinkage,
                                   const Matrix &query, const Matrix &selection) {
  if (keys.cols() != shrinkage.size())
    throw ShapeError("similarity: " + std::to_string(keys.cols()) + " keys but " +
                     std::to_string(shrinkage.size()) + " shrinkage entries");
  detail::require_shape("similarity: selection", selection.rows(), selection.cols(),
                        query.rows(), query.cols());
  if (keys.cols() > 0 && keys.rows() != query.rows())
    throw ShapeError("similarity: key channels " + std::to_string(keys.rows()) +
                     " != query channels " + std::to_string(query.rows()));

  const Index n = keys.cols();
  const Index hw = query.cols();
  if (n == 0)
    return SimilarityMatrix(Matrix(0, hw));

  const Index ck = query.rows();
  // stacked as [k*k; -2k]^T [e; e*q], one product for both key terms
  Matrix lhs(2 * ck, n), rhs(2 * ck, hw);
  lhs.topRows(ck) = keys.cwiseAbs2();
  lhs.bottomRows(ck) = -2.0f * keys;
  rhs.topRows(ck) = selection;
  rhs.bottomRows(ck) = selection.cwiseProduct(query);
  const RowVector q_term = rhs.bottomRows(ck).cwiseProduct(query).colwise().sum();

  Matrix s(n, hw);
  s.noalias() = lhs.transpose() * rhs;
  // The bracket is a weighted squared distance; cancellation can push it a
  // few ulps below zero.
  for (Index j = 0; j < hw; ++j)
    s.col(j) = -(shrinkage.array() * (s.col(j).array() + q_term(j)).cwiseMax(0.0f)).matrix();
  return SimilarityMatrix(std::move(s));
}

inline SimilarityMatrix similarity(const KeyBlock &k, const ShrinkageVector &s,
                                   const QueryBlock &q, const SelectionBlock &e) {
  return similarity(k.data(), s.data(), q.data(), e.data());
}

/**
 * Per query column: keep the top_k largest similarities (ties keep the lower
 * element index), softmax over the kept entries with max subtraction, zero
 * everywhere else. With n <= top_k this is a plain column softmax.
 */
inline AffinityMatrix affinity(const SimilarityMatrix &sim, std::size_t top_k) {
  if (top_k < 1)
    throw ValidationError("affinity: top_k must be >= 1");
  const Matrix &S = sim.data();
  const Index n = S.rows();
  const Index hw = S.cols();
  if (n == 0)
    throw ContractError("affinity: cannot read from an empty memory");

  Matrix W = Matrix::Zero(n, hw);
  const bool filter = top_k < static_cast<std::size_t>(n);
  const Index k = filter ? static_cast<Index>(top_k) : n;

  // heap front is the weakest kept entry; equal values evict the higher index first
  using Entry = std::pair<float, Index>;
  auto ranks_higher = [](const Entry &a, const Entry &b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::vector<Entry> heap;
  heap.reserve(static_cast<std::size_t>(k));
  std::vector<Index> kept;
  kept.reserve(static_cast<std::size_t>(k));

  for (Index j = 0; j < hw; ++j) {
    const auto col = S.col(j);
    kept.clear();
    if (!filter) {
      for (Index i = 0; i < n; ++i)
        kept.push_back(i);
    } else {
      heap.clear();
      for (Index i = 0; i < k; ++i)
        heap.emplace_back(col(i), i);
      std::make_heap(heap.begin(), heap.end(), ranks_higher);
      for (Index i = k; i < n; ++i) {
        const float v = col(i);
        if (v > heap.front().first) {
          std::pop_heap(heap.begin(), heap.end(), ranks_higher);
          heap.back() = {v, i};
          std::push_heap(heap.begin(), heap.end(), ranks_higher);
        }
      }
      for (const auto &e : heap)
        kept.push_back(e.second);
    }

    float mx = -std::numeric_limits<float>::infinity();
    for (Index i : kept)
      mx = std::max(mx, col(i));
    float sum = 0.0f;
    for (Index i : kept) {
      const float e = std::exp(col(i) - mx);
      W(i, j) = e;
      sum += e;
    }
    const float inv = 1.0f / sum;
    for (Index i : kept)
      W(i, j) *= inv;
  }
  return AffinityMatrix(std::move(W), top_k);
}

/// F = v W; zero affinity entries are skipped.
inline Matrix readout(const Matrix &values, const AffinityMatrix &w) {
  if (values.cols() != w.elements())
    throw ShapeError("readout: " + std::to_string(values.cols()) + " values but " +
                     std::to_string(w.elements()) + " affinity rows");
  const Matrix &W = w.data();
  Matrix F = Matrix::Zero(values.rows(), W.cols());
  for (Index j = 0; j < W.cols(); ++j) {
    auto out = F.col(j);
    for (Index i = 0; i < W.rows(); ++i) {
      const float a = W(i, j);
      if (a != 0.0f)
        out.noalias() += a * values.col(i);
    }
  }
  return F;
}

inline Matrix readout(const ValueBlock &v, const AffinityMatrix &w) {
  return readout(v.data(), w);
}

inline UsageMass usage_mass(const AffinityMatrix &w) {
  return UsageMass{w.data().rowwise().sum()};
}

} // namespace xmem
