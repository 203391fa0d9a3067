// SPDX-License-Identifier: Apache-2.0
/**
 * @file   working_memory.hpp
 * @brief  Bounded buffer of recent full-resolution memory frames.
 */
#pragma once

#include "xmem/core_types.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace xmem {

using FrameIndex = std::int64_t;

struct FrameRecord {
  KeyBlock keys;
  ShrinkageVector shrinkage;
  ValueBlock values;
  Vector usage;
  FrameIndex inserted_at = 0;
  bool is_reference = false;
};

/// Candidate elements flattened in frame order, ready for consolidation.
struct CandidateSet {
  KeyBlock keys;
  ShrinkageVector shrinkage;
  ValueBlock values;
  Vector usage;            // raw cumulative usage
  Vector normalized_usage; // usage / duration in working memory

  Index size() const { return keys.size(); }
};

struct ConsolidationSplit {
  std::vector<FrameRecord> retained;
  std::vector<FrameRecord> candidates;
};

class WorkingMemory {
public:
  /// Unlimited capacity, for the unbounded (no consolidation) mode.
  static constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

  WorkingMemory(FeatureDims dims, std::size_t t_min, std::size_t t_max)
      : dims_(dims), t_min_(t_min), t_max_(t_max) {
    dims_.validate();
    if (t_min_ < 2)
      throw ConfigError("WorkingMemory: t_min must be >= 2");
    if (t_max_ <= t_min_)
      throw ConfigError("WorkingMemory: t_max must exceed t_min");
  }

  const FeatureDims &dims() const { return dims_; }
  std::size_t t_min() const { return t_min_; }
  std::size_t t_max() const { return t_max_; }
  std::size_t frame_count() const { return frames_.size(); }
  std::size_t element_count() const { return frames_.size() * dims_.hw(); }
  bool full() const { return frames_.size() >= t_max_; }
  const std::vector<FrameRecord> &frames() const { return frames_; }

  void append_frame(KeyBlock keys, ShrinkageVector shrinkage, ValueBlock values,
                    FrameIndex frame_idx) {
    const auto hw = static_cast<Index>(dims_.hw());
    if (frames_.size() >= t_max_)
      throw CapacityError("WorkingMemory: append at capacity t_max=" +
                          std::to_string(t_max_));
    detail::require_shape("WorkingMemory::append_frame keys", keys.channels(), keys.size(),
                          static_cast<Index>(dims_.c_k), hw);
    detail::require_shape("WorkingMemory::append_frame values", values.channels(),
                          values.size(), static_cast<Index>(dims_.c_v), hw);
    if (shrinkage.size() != hw)
      throw ShapeError("WorkingMemory::append_frame: shrinkage has " +
                       std::to_string(shrinkage.size()) + " entries, expected " +
                       std::to_string(hw));
    if (!frames_.empty() && frame_idx <= frames_.back().inserted_at)
      throw ContractError("WorkingMemory::append_frame: frame index must increase");

    frames_.push_back(FrameRecord{std::move(keys), std::move(shrinkage), std::move(values),
                                  Vector::Zero(hw), frame_idx, frames_.empty()});
  }

  /// Adds one read's probability mass; `mass` covers all elements in frame order.
  template <typename Derived> void accumulate_usage(const Eigen::MatrixBase<Derived> &mass) {
    if (static_cast<std::size_t>(mass.size()) != element_count())
      throw ShapeError("WorkingMemory::accumulate_usage: got " + std::to_string(mass.size()) +
                       " entries for " + std::to_string(element_count()) + " elements");
    const auto hw = static_cast<Index>(dims_.hw());
    for (std::size_t f = 0; f < frames_.size(); ++f)
      frames_[f].usage += mass.segment(static_cast<Index>(f) * hw, hw);
  }

  /// Usage divided by the number of frames processed since insertion (min 1).
  Vector normalized_usage(FrameIndex current_frame) const {
    Vector out(static_cast<Index>(element_count()));
    const auto hw = static_cast<Index>(dims_.hw());
    for (std::size_t f = 0; f < frames_.size(); ++f)
      out.segment(static_cast<Index>(f) * hw, hw) =
          frames_[f].usage / duration(frames_[f], current_frame);
    return out;
  }

  /**
   * Keeps the reference frame plus the t_min - 1 most recent frames; the
   * t_max - t_min frames in between become candidates.
   */
  ConsolidationSplit split_for_consolidation() const {
    if (frames_.size() != t_max_)
      throw ContractError("WorkingMemory::split_for_consolidation: needs " +
                          std::to_string(t_max_) + " frames, have " +
                          std::to_string(frames_.size()));
    ConsolidationSplit split;
    const std::size_t first_recent = frames_.size() - (t_min_ - 1);
    split.retained.push_back(frames_.front());
    for (std::size_t f = 1; f < first_recent; ++f)
      split.candidates.push_back(frames_[f]);
    for (std::size_t f = first_recent; f < frames_.size(); ++f)
      split.retained.push_back(frames_[f]);
    return split;
  }

  CandidateSet gather_candidates(const std::vector<FrameRecord> &candidates,
                                 FrameIndex current_frame) const {
    CandidateSet set{KeyBlock(static_cast<Index>(dims_.c_k)), ShrinkageVector(),
                     ValueBlock(static_cast<Index>(dims_.c_v)), Vector(), Vector()};
    const auto hw = static_cast<Index>(dims_.hw());
    const auto total = static_cast<Index>(candidates.size()) * hw;
    set.usage.resize(total);
    set.normalized_usage.resize(total);
    for (std::size_t f = 0; f < candidates.size(); ++f) {
      const auto &rec = candidates[f];
      set.keys.append(rec.keys);
      set.shrinkage.append(rec.shrinkage);
      set.values.append(rec.values);
      set.usage.segment(static_cast<Index>(f) * hw, hw) = rec.usage;
      set.normalized_usage.segment(static_cast<Index>(f) * hw, hw) =
          rec.usage / duration(rec, current_frame);
    }
    return set;
  }

  /// Replaces the frame list with the retained part of a split.
  void keep(std::vector<FrameRecord> retained) {
    if (retained.empty() || !retained.front().is_reference)
      throw ContractError("WorkingMemory::keep: the reference frame must be retained");
    frames_ = std::move(retained);
  }

  /// Copies keys, shrinkage and values of all frames into the leading columns.
  void write_combined(Matrix &keys, Vector &shrinkage, Matrix &values) const {
    const auto hw = static_cast<Index>(dims_.hw());
    for (std::size_t f = 0; f < frames_.size(); ++f) {
      const Index off = static_cast<Index>(f) * hw;
      keys.middleCols(off, hw) = frames_[f].keys.data();
      shrinkage.segment(off, hw) = frames_[f].shrinkage.data();
      values.middleCols(off, hw) = frames_[f].values.data();
    }
  }

private:
  static float duration(const FrameRecord &rec, FrameIndex current_frame) {
    return static_cast<float>(std::max<FrameIndex>(1, current_frame - rec.inserted_at));
  }

  FeatureDims dims_;
  std::size_t t_min_;
  std::size_t t_max_;
  std::vector<FrameRecord> frames_;
};

} // namespace xmem
