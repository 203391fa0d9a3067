// SPDX-License-Identifier: Apache-2.0

#include "xmem/long_term_memory.hpp"

#include "oracle/reference_oracle.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

using namespace xmem;

namespace {

Matrix uniform(std::mt19937 &rng, Index rows, Index cols, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i)
    m.data()[i] = u(rng);
  return m;
}

Vector vec(std::initializer_list<float> xs) {
  Vector v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (float x : xs)
    v(i++) = x;
  return v;
}

Prototypes protos_with_tag(Index count, float tag, Index ck = 2, Index cv = 2) {
  return Prototypes{KeyBlock(Matrix::Constant(ck, count, tag)),
                    ShrinkageVector(Vector::Ones(count)),
                    ValueBlock(Matrix::Constant(cv, count, tag))};
}

} // namespace

TEST(SelectPrototypes, TopByUsage) {
  const KeyBlock k(Matrix::Zero(2, 3));
  EXPECT_EQ(select_prototypes(k, vec({0.5f, 0.1f, 0.9f}), 2), (IndexList{0, 2}));
}

TEST(SelectPrototypes, TiesTowardLowerIndex) {
  const KeyBlock k(Matrix::Zero(2, 5));
  EXPECT_EQ(select_prototypes(k, Vector::Constant(5, 0.3f), 3), (IndexList{0, 1, 2}));
}

TEST(SelectPrototypes, MatchesFullSortOracle) {
  std::mt19937 rng(31);
  const Index hw = 64;
  const KeyBlock k(Matrix::Zero(4, 5 * hw));
  const Vector usage = uniform(rng, 5 * hw, 1, 0, 1);
  const auto got = select_prototypes(k, usage, 128);
  const auto ref = oracle::top_p(oracle::to_vec(usage), 128);
  ASSERT_EQ(got.size(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i)
    EXPECT_EQ(static_cast<std::size_t>(got[i]), ref[i]);
}

TEST(SelectPrototypes, EmptyAndShortCandidates) {
  EXPECT_TRUE(select_prototypes(KeyBlock(static_cast<Index>(4)), Vector(0), 128).empty());
  EXPECT_EQ(select_prototypes(KeyBlock(Matrix::Zero(1, 3)), vec({1, 2, 3}), 128).size(), 3u);
  EXPECT_THROW(select_prototypes(KeyBlock(Matrix::Zero(1, 3)), vec({1, 2}), 2), ShapeError);
}

TEST(SelectPrototypes, RandomIsSeededDistinctSorted) {
  const auto a = select_prototypes_random(50, 10, 7);
  const auto b = select_prototypes_random(50, 10, 7);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<Index>(a.begin(), a.end()).size(), 10u);
  EXPECT_NE(a, select_prototypes_random(50, 10, 8));
}

TEST(SelectPrototypes, KMeansFindsOneMemberPerCluster) {
  // Three tight, well separated clusters of 10 points each.
  std::mt19937 rng(5);
  Matrix x(2, 30);
  const float centers[3][2] = {{-5, -5}, {0, 6}, {7, 0}};
  std::normal_distribution<float> jitter(0.0f, 0.05f);
  for (Index i = 0; i < 30; ++i) {
    x(0, i) = centers[i / 10][0] + jitter(rng);
    x(1, i) = centers[i / 10][1] + jitter(rng);
  }
  // Seeds overlap with clusters unevenly for some seeds; Lloyd still converges here.
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto picked = select_prototypes_kmeans(KeyBlock(x), 3, seed);
    ASSERT_EQ(picked.size(), 3u);
    EXPECT_TRUE(std::is_sorted(picked.begin(), picked.end()));
    EXPECT_EQ(std::set<Index>(picked.begin(), picked.end()).size(), 3u);
    EXPECT_EQ(picked, select_prototypes_kmeans(KeyBlock(x), 3, seed));
  }
}

TEST(Potentiate, SingletonReproducesCandidate) {
  const KeyBlock k(Matrix::Constant(3, 1, 0.25f));
  const ShrinkageVector s(vec({2.5f}));
  const ValueBlock v(Matrix::Constant(4, 1, -1.5f));
  const auto p = potentiate(k, s, v, {0}, 30);
  EXPECT_EQ(p.keys.data(), k.data());
  EXPECT_EQ(p.values.data(), v.data());
  EXPECT_EQ(p.shrinkage.data(), s.data());
}

TEST(Potentiate, IdenticalKeysAverageValues) {
  const KeyBlock k(Matrix::Constant(3, 2, 0.5f));
  const ShrinkageVector s(Vector::Ones(2));
  Matrix v(1, 2);
  v << 2.0f, 6.0f;
  const auto p = potentiate(k, s, ValueBlock(v), {1}, 30);
  EXPECT_FLOAT_EQ(p.values.data()(0, 0), 4.0f);
}

TEST(Potentiate, RandomInstanceWithinCandidateHull) {
  std::mt19937 rng(41);
  const Index n = 40;
  const KeyBlock k(uniform(rng, 6, n, -1, 1));
  const ShrinkageVector s(Vector(uniform(rng, n, 1, 1, 5)));
  const ValueBlock v(uniform(rng, 5, n, -3, 3));
  const IndexList idx{1, 4, 9, 22, 39};
  const auto p = potentiate(k, s, v, idx, 30);

  // Loop oracle of the same aggregation: prototypes as queries, unit selection.
  const auto kg = oracle::to_grid(k.data());
  oracle::Grid qg(6, std::vector<double>(idx.size()));
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t j = 0; j < idx.size(); ++j)
      qg[c][j] = kg[c][static_cast<std::size_t>(idx[j])];
  const oracle::Grid ones(6, std::vector<double>(idx.size(), 1.0));
  const auto w = oracle::affinity(oracle::similarity(kg, oracle::to_vec(s.data()), qg, ones), 30);
  const auto ref = oracle::matmul(oracle::to_grid(v.data()), w);

  for (Index c = 0; c < 5; ++c) {
    const float lo = v.data().row(c).minCoeff(), hi = v.data().row(c).maxCoeff();
    for (Index j = 0; j < static_cast<Index>(idx.size()); ++j) {
      EXPECT_GE(p.values.data()(c, j), lo - 1e-5f);
      EXPECT_LE(p.values.data()(c, j), hi + 1e-5f);
      EXPECT_NEAR(p.values.data()(c, j), ref[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)], 1e-4);
    }
  }
  for (std::size_t j = 0; j < idx.size(); ++j)
    EXPECT_EQ(p.keys.data().col(static_cast<Index>(j)), k.data().col(idx[j]));
  EXPECT_GE(p.shrinkage.data().minCoeff(), 1.0f);
}

TEST(Potentiate, RejectsBadIndices) {
  const KeyBlock k(Matrix::Zero(2, 3));
  const ShrinkageVector s(Vector::Ones(3));
  const ValueBlock v(Matrix::Zero(2, 3));
  EXPECT_THROW(potentiate(k, s, v, {0, 0}, 30), ValidationError);
  EXPECT_THROW(potentiate(k, s, v, {3}, 30), ValidationError);
  EXPECT_EQ(potentiate(k, s, v, {}, 30).keys.size(), 0);
}

TEST(LongTermMemory, LfuEvictionExample) {
  LongTermMemory lt(FeatureDims{2, 2, 1, 1, 1}, 3);
  lt.commit(protos_with_tag(3, 1.0f));
  lt.accumulate_usage(vec({5, 1, 3}));
  const auto evicted = lt.commit(protos_with_tag(2, 2.0f));
  EXPECT_EQ(evicted, 2u);
  ASSERT_EQ(lt.size(), 3u);
  EXPECT_EQ(lt.usage(), vec({5, 0, 0}));
  EXPECT_EQ(lt.keys().data()(0, 0), 1.0f);
  EXPECT_EQ(lt.keys().data()(0, 1), 2.0f);
}

TEST(LongTermMemory, NoEvictionWhenItFits) {
  LongTermMemory lt(FeatureDims{2, 2, 1, 1, 1}, 10);
  EXPECT_EQ(lt.commit(protos_with_tag(4, 1.0f)), 0u);
  EXPECT_EQ(lt.commit(protos_with_tag(6, 1.0f)), 0u);
  EXPECT_EQ(lt.size(), 10u);
}

TEST(LongTermMemory, OversizedCommitIsConfigError) {
  LongTermMemory lt(FeatureDims{2, 2, 1, 1, 1}, 3);
  EXPECT_THROW(lt.commit(protos_with_tag(4, 1.0f)), ConfigError);
}

TEST(LongTermMemory, UsageAccumulation) {
  LongTermMemory lt(FeatureDims{2, 2, 1, 1, 1}, 10);
  lt.commit(protos_with_tag(3, 1.0f));
  lt.accumulate_usage(Vector::Zero(3));
  EXPECT_EQ(lt.usage().sum(), 0.0f);
  const Index hw = 16;
  Matrix w = Matrix::Zero(3, hw);
  w.row(1).setOnes(); // element 1 receives every column's mass
  lt.accumulate_usage(usage_mass(AffinityMatrix(w, 30)).per_element);
  EXPECT_EQ(lt.usage()(1), static_cast<float>(hw));
  EXPECT_THROW(lt.accumulate_usage(Vector::Zero(2)), ShapeError);
}

TEST(LongTermMemory, UsageMatchesOracleColumnSums) {
  std::mt19937 rng(12);
  LongTermMemory lt(FeatureDims{2, 2, 1, 1, 1}, 100);
  lt.commit(protos_with_tag(20, 0.0f));
  std::vector<double> expected(20, 0.0);
  for (int read = 0; read < 5; ++read) {
    const Matrix s = uniform(rng, 20, 9, -6, 0);
    lt.accumulate_usage(usage_mass(affinity(SimilarityMatrix(s), 4)).per_element);
    const auto w = oracle::affinity(oracle::to_grid(s), 4);
    for (std::size_t i = 0; i < 20; ++i)
      for (double x : w[i])
        expected[i] += x;
  }
  for (Index i = 0; i < 20; ++i)
    EXPECT_NEAR(lt.usage()(i), expected[static_cast<std::size_t>(i)], 1e-4);
}

// Property: random commit sequences never exceed l_max and always evict
// exactly the sort-and-truncate loser set.
TEST(LongTermMemory, RandomCommitSequences) {
  std::mt19937 rng(77);
  std::uniform_int_distribution<int> lmax_d(1, 60);
  for (int trial = 0; trial < 100; ++trial) {
    const auto l_max = static_cast<std::size_t>(lmax_d(rng));
    LongTermMemory lt(FeatureDims{1, 1, 1, 1, 1}, l_max);
    float tag = 0.0f;
    for (int step = 0; step < 30; ++step) {
      std::uniform_int_distribution<int> count_d(0, static_cast<int>(l_max));
      const Index count = count_d(rng);
      // Survivor set predicted by sorting (usage, index) and truncating.
      const std::size_t evict = lt.size() + static_cast<std::size_t>(count) > l_max
                                    ? lt.size() + static_cast<std::size_t>(count) - l_max
                                    : 0;
      std::vector<std::pair<float, Index>> order;
      for (Index i = 0; i < static_cast<Index>(lt.size()); ++i)
        order.emplace_back(lt.usage()(i), i);
      std::sort(order.begin(), order.end());
      std::set<float> predicted;
      for (std::size_t t = evict; t < order.size(); ++t)
        predicted.insert(lt.keys().data()(0, order[t].second));

      Prototypes p{KeyBlock(Matrix(1, count)), ShrinkageVector(Vector::Ones(count)),
                   ValueBlock(Matrix::Zero(1, count))};
      Matrix keys(1, count);
      for (Index i = 0; i < count; ++i)
        keys(0, i) = tag++;
      p.keys = KeyBlock(keys);
      EXPECT_EQ(lt.commit(std::move(p)), evict);
      ASSERT_LE(lt.size(), l_max);

      std::set<float> survivors;
      for (Index i = 0; i < static_cast<Index>(lt.size()) - count; ++i)
        survivors.insert(lt.keys().data()(0, i));
      EXPECT_EQ(survivors, predicted);

      lt.accumulate_usage(Vector(uniform(rng, static_cast<Index>(lt.size()), 1, 0, 3)));
    }
  }
}
