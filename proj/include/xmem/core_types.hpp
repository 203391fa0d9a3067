// SPDX-License-Identifier: Apache-2.0
/**
 * @file   core_types.hpp
 * @brief  Shared value types for the feature memory stores.
 *
 * Every block stores one memory element per column (column-major), so a
 * frame append or a working/long-term concatenation is a contiguous block
 * copy. The engine works in single precision throughout.
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xmem {

using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using Vector = Eigen::Matrix<float, Eigen::Dynamic, 1>;
using RowVector = Eigen::Matrix<float, 1, Eigen::Dynamic>;
using Index = Eigen::Index;
using IndexList = std::vector<Index>;

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Matrix or vector dimensions disagree at a store boundary.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Input values violate a range or finiteness requirement.
class ValidationError : public Error {
public:
  using Error::Error;
};

/// A bounded store was asked to grow past its capacity.
class CapacityError : public Error {
public:
  using Error::Error;
};

/// An operation was invoked in a state its contract forbids.
class ContractError : public Error {
public:
  using Error::Error;
};

/// Invalid configuration parameters.
class ConfigError : public Error {
public:
  using Error::Error;
};

namespace detail {

inline std::string shape_str(Index rows, Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived> &m) {
  return m.allFinite();
}

inline void require_shape(const char *what, Index rows, Index cols,
                          Index want_rows, Index want_cols) {
  if (rows != want_rows || cols != want_cols)
    throw ShapeError(std::string(what) + ": expected " +
                     shape_str(want_rows, want_cols) + ", got " +
                     shape_str(rows, cols));
}

} // namespace detail

/// Channel and spatial dimensions shared by all stores.
struct FeatureDims {
  std::size_t c_k = 64;
  std::size_t c_v = 512;
  std::size_t c_h = 64;
  std::size_t h = 30;
  std::size_t w = 54;

  std::size_t hw() const { return h * w; }

  void validate() const {
    if (c_k < 1 || c_v < 1 || c_h < 1 || h < 1 || w < 1)
      throw ConfigError("FeatureDims: all dimensions must be >= 1");
  }

  friend bool operator==(const FeatureDims &, const FeatureDims &) = default;
};

/**
 * Column block of memory elements with a per-type invariant. The invariant is
 * checked on construction and on every append.
 */
template <typename Traits> class ColumnBlock {
public:
  ColumnBlock() = default;

  /// Empty block with a fixed channel count.
  explicit ColumnBlock(Index channels) : data_(channels, 0) {}

  explicit ColumnBlock(Matrix data) : data_(std::move(data)) {
    Traits::validate(data_);
  }

  const Matrix &data() const { return data_; }
  Index channels() const { return data_.rows(); }
  Index size() const { return data_.cols(); }
  bool empty() const { return data_.cols() == 0; }

  void append(const ColumnBlock &other) {
    if (other.empty())
      return;
    if (data_.rows() != other.channels() && !(data_.size() == 0 && data_.rows() == 0))
      throw ShapeError(std::string(Traits::name) + "::append: channel mismatch " +
                       std::to_string(data_.rows()) + " vs " +
                       std::to_string(other.channels()));
    const Index old = data_.cols();
    data_.conservativeResize(other.channels(), old + other.size());
    data_.rightCols(other.size()) = other.data();
  }

  ColumnBlock columns(const IndexList &idx) const {
    ColumnBlock out(channels());
    out.data_ = data_(Eigen::all, idx);
    return out;
  }

private:
  Matrix data_;
};

namespace traits {

struct Key {
  static constexpr const char *name = "KeyBlock";
  static void validate(const Matrix &m) {
    if (!detail::all_finite(m))
      throw ValidationError("KeyBlock: non-finite entry");
  }
};

struct Value {
  static constexpr const char *name = "ValueBlock";
  static void validate(const Matrix &m) {
    if (!detail::all_finite(m))
      throw ValidationError("ValueBlock: non-finite entry");
  }
};

struct Query {
  static constexpr const char *name = "QueryBlock";
  static void validate(const Matrix &m) {
    if (!detail::all_finite(m))
      throw ValidationError("QueryBlock: non-finite entry");
  }
};

struct Selection {
  static constexpr const char *name = "SelectionBlock";
  static void validate(const Matrix &m) {
    if (!detail::all_finite(m) || (m.size() > 0 && (m.minCoeff() < 0.0f || m.maxCoeff() > 1.0f)))
      throw ValidationError("SelectionBlock: entries must lie in [0, 1]");
  }
};

} // namespace traits

using KeyBlock = ColumnBlock<traits::Key>;
using ValueBlock = ColumnBlock<traits::Value>;
using QueryBlock = ColumnBlock<traits::Query>;
using SelectionBlock = ColumnBlock<traits::Selection>;

/// Per-element shrinkage, every entry in [1, inf).
class ShrinkageVector {
public:
  ShrinkageVector() = default;

  explicit ShrinkageVector(Vector data) : data_(std::move(data)) {
    if (!detail::all_finite(data_) || (data_.size() > 0 && data_.minCoeff() < 1.0f))
      throw ValidationError("ShrinkageVector: entries must be finite and >= 1");
  }

  const Vector &data() const { return data_; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  void append(const ShrinkageVector &other) {
    const Index old = data_.size();
    data_.conservativeResize(old + other.size());
    data_.tail(other.size()) = other.data();
  }

  ShrinkageVector elements(const IndexList &idx) const {
    ShrinkageVector out;
    out.data_ = data_(idx);
    return out;
  }

private:
  Vector data_;
};

/// Maps raw shrinkage logits into [1, inf) via x^2 + 1.
inline ShrinkageVector map_shrinkage(const Vector &raw) {
  if (!detail::all_finite(raw))
    throw ValidationError("map_shrinkage: non-finite input");
  return ShrinkageVector(Vector(raw.array().square() + 1.0f));
}

inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

/// Maps raw selection logits into (0, 1) with an elementwise sigmoid.
inline SelectionBlock map_selection(const Matrix &raw) {
  if (!detail::all_finite(raw))
    throw ValidationError("map_selection: non-finite input");
  return SelectionBlock(Matrix(raw.unaryExpr([](float x) { return sigmoid(x); })));
}

} // namespace xmem
