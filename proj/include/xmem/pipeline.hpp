// SPDX-License-Identifier: Apache-2.0
/**
 * @file   pipeline.hpp
 * @brief  Per-frame loop over the sensory, working and long-term stores.
 *
 * Frame 0 seeds every object's working memory and is not read. Each later
 * frame, per object:
 *   1. concatenate working and long-term keys/shrinkage/values
 *   2. similarity -> top-k affinity -> readout
 *   3. route the affinity mass back to both stores as usage
 *   4. sensory GRU step
 *   5. on insertion frames, copy the query in as a new key (plus deep update)
 *   6. at t_max frames, consolidate into long-term memory
 */
#pragma once

#include "xmem/affinity.hpp"
#include "xmem/core_types.hpp"
#include "xmem/long_term_memory.hpp"
#include "xmem/sensory_memory.hpp"
#include "xmem/working_memory.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace xmem {

enum class DeepUpdateMode { every_rth, every_frame, never };
enum class PrototypeStrategy { usage, random, kmeans };

struct PipelineConfig {
  FeatureDims dims{};
  std::size_t sensory_input_channels = 16;
  std::size_t r = 5;
  std::size_t t_min = 5;
  std::size_t t_max = 10;
  std::size_t p = 128;
  std::size_t top_k = 30;
  std::size_t l_max = 10000;
  std::size_t insert_offset = 0; // insertion phase: frame % r == insert_offset
  DeepUpdateMode deep_update = DeepUpdateMode::every_rth;
  PrototypeStrategy strategy = PrototypeStrategy::usage;
  bool consolidation = true;     // false: unbounded working memory, no long-term store
  std::size_t potentiation_top_k = 30; // kNoTopK: softmax over all candidates
  bool inherit_usage = false;    // seed long-term usage with the candidates' raw usage
  std::size_t gru_kernel = 1;
  std::uint64_t seed = 0;

  void validate() const {
    dims.validate();
    if (sensory_input_channels < 1)
      throw ConfigError("PipelineConfig: sensory_input_channels must be >= 1");
    if (r < 1)
      throw ConfigError("PipelineConfig: r must be >= 1");
    if (t_min < 2)
      throw ConfigError("PipelineConfig: t_min must be >= 2");
    if (t_max <= t_min)
      throw ConfigError("PipelineConfig: t_max (" + std::to_string(t_max) +
                        ") must exceed t_min (" + std::to_string(t_min) + ")");
    if (p < 1)
      throw ConfigError("PipelineConfig: p must be >= 1");
    if (top_k < 1 || potentiation_top_k < 1)
      throw ConfigError("PipelineConfig: top_k must be >= 1");
    if (l_max < p)
      throw ConfigError("PipelineConfig: l_max (" + std::to_string(l_max) +
                        ") must be >= p (" + std::to_string(p) + ")");
    if (insert_offset >= r)
      throw ConfigError("PipelineConfig: insert_offset must be < r");
    if (gru_kernel % 2 == 0)
      throw ConfigError("PipelineConfig: gru_kernel must be odd");
  }
};

/// Encoder-side features of one object in one frame; raw terms are pre-mapping.
struct ObjectFeatures {
  Matrix query;         // c_k x hw
  Vector raw_shrinkage; // hw
  Matrix raw_selection; // c_k x hw
  Matrix values;        // c_v x hw
  Matrix sensory_input; // c_in x hw
};

struct ObjectTrack {
  std::size_t object_id;
  WorkingMemory working;
  LongTermMemory long_term;
  SensoryState sensory;

  std::size_t total_elements() const { return working.element_count() + long_term.size(); }
};

struct FrameEvents {
  bool inserted = false;
  bool consolidated = false;
  bool deep_updated = false;
  std::size_t prototypes = 0;
  std::size_t evicted = 0;
};

struct FrameOutput {
  Matrix readout;            // c_v x hw
  Vector probabilities;      // per-position foreground probability from the probe
  FrameEvents events;
  std::optional<ConsolidationReport> report;
  std::int64_t read_duration_ns = 0;
  Vector working_mass;       // usage routed to working memory by this read
  Vector long_term_mass;     // usage routed to long-term memory by this read
};

struct StepResult {
  std::vector<FrameOutput> objects;
  Matrix fused_probabilities; // (objects + 1) x hw, row 0 is background
};

/**
 * Odds-normalized fusion: column j becomes [1, o_1..o_M] / (1 + sum o_m) with
 * o_m = p_m / (1 - p_m). Probabilities are clamped to [1e-7, 1 - 1e-7].
 */
inline Matrix soft_aggregate(const Matrix &per_object_probs) {
  constexpr double eps = 1e-7;
  const Index m = per_object_probs.rows();
  Matrix out(m + 1, per_object_probs.cols());
  for (Index j = 0; j < per_object_probs.cols(); ++j) {
    double total = 1.0;
    out(0, j) = 1.0f;
    for (Index o = 0; o < m; ++o) {
      const double p = std::clamp(static_cast<double>(per_object_probs(o, j)), eps, 1.0 - eps);
      const double odds = p / (1.0 - p);
      out(o + 1, j) = static_cast<float>(odds);
      total += odds;
    }
    for (Index o = 0; o <= m; ++o)
      out(o, j) = static_cast<float>(static_cast<double>(out(o, j)) / total);
  }
  return out;
}

/// One line of the bookkeeping event log (counts only, no feature values).
inline std::string format_event_line(FrameIndex frame, const FrameEvents &ev, std::size_t wm_frames,
                                     std::size_t lt_elements) {
  char buf[192];
  std::snprintf(buf, sizeof buf,
                "frame=%lld inserted=%d consolidated=%d prototypes=%zu evicted=%zu wm_frames=%zu "
                "lt=%zu\n",
                static_cast<long long>(frame), ev.inserted ? 1 : 0, ev.consolidated ? 1 : 0,
                ev.prototypes, ev.evicted, wm_frames, lt_elements);
  return buf;
}

class Pipeline {
public:
  explicit Pipeline(PipelineConfig config) : config_(config) {
    config_.validate();
    const auto &d = config_.dims;
    gru_ = GruWeights::random(config_.sensory_input_channels, d.c_h, config_.gru_kernel,
                              mix(config_.seed, 1));
    deep_gru_ = GruWeights::random(d.c_v, d.c_h, config_.gru_kernel, mix(config_.seed, 2));
    std::mt19937_64 rng(mix(config_.seed, 3));
    std::normal_distribution<float> normal(0.0f, 1.0f);
    probe_w_.resize(static_cast<Index>(d.c_v));
    for (Index i = 0; i < probe_w_.size(); ++i)
      probe_w_(i) = normal(rng) / std::sqrt(static_cast<float>(d.c_v));
    probe_b_ = 0.0f;
  }

  Pipeline(PipelineConfig config, GruWeights gru, GruWeights deep_gru) : Pipeline(config) {
    gru.validate();
    deep_gru.validate();
    if (gru.input_channels != config_.sensory_input_channels ||
        gru.hidden_channels != config_.dims.c_h || deep_gru.input_channels != config_.dims.c_v ||
        deep_gru.hidden_channels != config_.dims.c_h)
      throw ShapeError("Pipeline: injected GRU weights do not match the configured dims");
    gru_ = std::move(gru);
    deep_gru_ = std::move(deep_gru);
  }

  const PipelineConfig &config() const { return config_; }
  const std::vector<ObjectTrack> &tracks() const { return tracks_; }
  bool initialized() const { return !tracks_.empty(); }

  /// Seeds working memory with the annotated first frame of every object.
  void init(const std::vector<ObjectFeatures> &first, FrameIndex frame_idx = 0) {
    if (first.empty())
      throw ConfigError("Pipeline::init: at least one object is required");
    if (initialized())
      throw ContractError("Pipeline::init: already initialized");
    const auto &d = config_.dims;
    const std::size_t wm_cap = config_.consolidation ? config_.t_max : WorkingMemory::kUnbounded;
    tracks_.reserve(first.size());
    for (std::size_t o = 0; o < first.size(); ++o) {
      check_features(first[o]);
      ObjectTrack track{o, WorkingMemory(d, config_.t_min, wm_cap),
                        LongTermMemory(d, config_.l_max), SensoryState(d.c_h, d.h, d.w)};
      track.working.append_frame(KeyBlock(first[o].query), map_shrinkage(first[o].raw_shrinkage),
                                 ValueBlock(first[o].values), frame_idx);
      tracks_.push_back(std::move(track));
    }
    last_frame_ = frame_idx;
  }

  bool is_insertion_frame(FrameIndex frame_idx) const {
    return frame_idx % static_cast<FrameIndex>(config_.r) ==
           static_cast<FrameIndex>(config_.insert_offset);
  }

  StepResult step(const std::vector<ObjectFeatures> &frame, FrameIndex frame_idx) {
    if (!initialized())
      throw ContractError("Pipeline::step: init must run first");
    if (frame_idx <= last_frame_)
      throw ContractError("Pipeline::step: frame index must strictly increase");
    if (frame.size() != tracks_.size())
      throw ShapeError("Pipeline::step: got " + std::to_string(frame.size()) + " objects, tracking " +
                       std::to_string(tracks_.size()));
    last_frame_ = frame_idx;

    StepResult result;
    const auto hw = static_cast<Index>(config_.dims.hw());
    Matrix probs(static_cast<Index>(tracks_.size()), hw);
    for (std::size_t o = 0; o < tracks_.size(); ++o) {
      check_features(frame[o]);
      result.objects.push_back(step_object(tracks_[o], frame[o], frame_idx));
      probs.row(static_cast<Index>(o)) = result.objects.back().probabilities.transpose();
    }
    result.fused_probabilities = soft_aggregate(probs);
    return result;
  }

private:
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  void check_features(const ObjectFeatures &f) const {
    const auto &d = config_.dims;
    const auto hw = static_cast<Index>(d.hw());
    detail::require_shape("ObjectFeatures query", f.query.rows(), f.query.cols(),
                          static_cast<Index>(d.c_k), hw);
    detail::require_shape("ObjectFeatures raw_shrinkage", f.raw_shrinkage.rows(), 1, hw, 1);
    detail::require_shape("ObjectFeatures raw_selection", f.raw_selection.rows(),
                          f.raw_selection.cols(), static_cast<Index>(d.c_k), hw);
    detail::require_shape("ObjectFeatures values", f.values.rows(), f.values.cols(),
                          static_cast<Index>(d.c_v), hw);
    detail::require_shape("ObjectFeatures sensory_input", f.sensory_input.rows(),
                          f.sensory_input.cols(),
                          static_cast<Index>(config_.sensory_input_channels), hw);
  }

  FrameOutput step_object(ObjectTrack &track, const ObjectFeatures &f, FrameIndex frame_idx) {
    const auto &d = config_.dims;
    FrameOutput out;

    const Index wm_n = static_cast<Index>(track.working.element_count());
    const Index lt_n = static_cast<Index>(track.long_term.size());
    const Index n = wm_n + lt_n;
    Matrix keys(static_cast<Index>(d.c_k), n);
    Vector shrink(n);
    Matrix values(static_cast<Index>(d.c_v), n);
    track.working.write_combined(keys, shrink, values);
    track.long_term.write_combined(keys, shrink, values, wm_n);

    const SelectionBlock selection = map_selection(f.raw_selection);

    const auto t0 = std::chrono::steady_clock::now();
    const auto sim = similarity(keys, shrink, f.query, selection.data());
    const auto w = affinity(sim, config_.top_k);
    out.readout = readout(values, w);
    const auto t1 = std::chrono::steady_clock::now();
    out.read_duration_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();

    const UsageMass mass = usage_mass(w);
    out.working_mass = mass.per_element.head(wm_n);
    out.long_term_mass = mass.per_element.tail(lt_n);
    track.working.accumulate_usage(out.working_mass);
    track.long_term.accumulate_usage(out.long_term_mass);

    out.probabilities = ((probe_w_.transpose() * out.readout).array() + probe_b_)
                            .unaryExpr([](float v) { return sigmoid(v); })
                            .transpose();

    track.sensory = gru_step(track.sensory, f.sensory_input, gru_);

    if (is_insertion_frame(frame_idx)) {
      track.working.append_frame(KeyBlock(f.query), map_shrinkage(f.raw_shrinkage),
                                 ValueBlock(f.values), frame_idx);
      out.events.inserted = true;
    }
    const bool deep = config_.deep_update == DeepUpdateMode::every_frame ||
                      (config_.deep_update == DeepUpdateMode::every_rth && out.events.inserted);
    if (deep) {
      track.sensory = deep_update(track.sensory, f.values, deep_gru_);
      out.events.deep_updated = true;
    }

    if (config_.consolidation && track.working.full()) {
      out.report = consolidate(track, frame_idx);
      out.events.consolidated = true;
      out.events.prototypes = out.report->prototype_count;
      out.events.evicted = out.report->evicted_count;
    }
    return out;
  }

  ConsolidationReport consolidate(ObjectTrack &track, FrameIndex frame_idx) {
    ConsolidationSplit split = track.working.split_for_consolidation();
    const CandidateSet cands = track.working.gather_candidates(split.candidates, frame_idx);
    const std::uint64_t seed = mix(config_.seed ^ (track.object_id << 32), 100 + consolidations_);

    IndexList picked;
    switch (config_.strategy) {
    case PrototypeStrategy::usage:
      picked = select_prototypes(cands.keys, cands.normalized_usage, config_.p);
      break;
    case PrototypeStrategy::random:
      picked = select_prototypes_random(cands.size(), config_.p, seed);
      break;
    case PrototypeStrategy::kmeans:
      picked = select_prototypes_kmeans(cands.keys, config_.p, seed);
      break;
    }
    ++consolidations_;

    Prototypes protos =
        potentiate(cands.keys, cands.shrinkage, cands.values, picked, config_.potentiation_top_k);
    ConsolidationReport report;
    report.candidate_elements = static_cast<std::size_t>(cands.size());
    report.prototype_count = picked.size();
    if (config_.inherit_usage) {
      const Vector inherited = cands.usage(picked);
      report.evicted_count = track.long_term.commit(std::move(protos), &inherited);
    } else {
      report.evicted_count = track.long_term.commit(std::move(protos));
    }
    track.working.keep(std::move(split.retained));
    return report;
  }

  PipelineConfig config_;
  GruWeights gru_;
  GruWeights deep_gru_;
  Vector probe_w_;
  float probe_b_ = 0.0f;
  std::vector<ObjectTrack> tracks_;
  FrameIndex last_frame_ = -1;
  std::uint64_t consolidations_ = 0;
};

} // namespace xmem
