// SPDX-License-Identifier: Apache-2.0
/**
 * @file   harness.hpp
 * @brief  Drives a pipeline over a frame source and records per-frame metrics.
 */
#pragma once

#include "xmem/pipeline.hpp"
#include "xmem/stream_format.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace xmem {

/// Element counts are summed over objects; wm_frames is shared by all tracks.
struct MetricsRow {
  FrameIndex frame_idx = 0;
  std::size_t wm_frames = 0;
  std::size_t wm_elements = 0;
  std::size_t lt_elements = 0;
  std::size_t total_elements = 0;
  std::int64_t read_duration_ns = 0;
  bool consolidation_flag = false;
  std::size_t evicted_count = 0;
};

inline constexpr const char *kMetricsHeader =
    "frame_idx,wm_frames,wm_elements,lt_elements,total_elements,read_duration_ns,"
    "consolidation_flag,evicted_count\n";

inline void write_metrics_row(std::ostream &os, const MetricsRow &r) {
  os << r.frame_idx << ',' << r.wm_frames << ',' << r.wm_elements << ',' << r.lt_elements << ','
     << r.total_elements << ',' << r.read_duration_ns << ',' << (r.consolidation_flag ? 1 : 0)
     << ',' << r.evicted_count << '\n';
}

struct DriveOptions {
  bool timing = true;        // false writes read_duration_ns = 0
  bool keep_events = true;   // collect the bookkeeping event log
  bool keep_reports = true;
};

struct DriveResult {
  std::vector<MetricsRow> rows;
  std::string event_log;
  std::vector<ConsolidationReport> reports;
};

namespace detail {

inline MetricsRow snapshot_row(const Pipeline &pipe, FrameIndex frame) {
  MetricsRow row;
  row.frame_idx = frame;
  row.wm_frames = pipe.tracks().front().working.frame_count();
  for (const auto &t : pipe.tracks()) {
    row.wm_elements += t.working.element_count();
    row.lt_elements += t.long_term.size();
  }
  row.total_elements = row.wm_elements + row.lt_elements;
  return row;
}

} // namespace detail

/// Runs the whole source through `pipe`; frame 0 initializes.
inline DriveResult drive(Pipeline &pipe, FrameSource &source, const DriveOptions &opts = {}) {
  DriveResult result;
  std::vector<ObjectFeatures> frame;
  FrameIndex idx = 0;
  while (source.next(frame)) {
    FrameEvents agg;
    std::int64_t read_ns = 0;
    if (idx == 0) {
      pipe.init(frame, 0);
      agg.inserted = true;
    } else {
      const StepResult step = pipe.step(frame, idx);
      for (const auto &o : step.objects) {
        read_ns += o.read_duration_ns;
        if (o.report && opts.keep_reports)
          result.reports.push_back(*o.report);
      }
      // all tracks share one schedule, so the first track's events stand for the frame
      agg = step.objects.front().events;
      agg.evicted = 0;
      for (const auto &o : step.objects)
        agg.evicted += o.events.evicted;
    }
    MetricsRow row = detail::snapshot_row(pipe, idx);
    row.read_duration_ns = opts.timing ? read_ns : 0;
    row.consolidation_flag = agg.consolidated;
    row.evicted_count = agg.evicted;
    if (opts.keep_events)
      result.event_log += format_event_line(idx, agg, row.wm_frames, row.lt_elements);
    result.rows.push_back(row);
    ++idx;
  }
  return result;
}

struct HarnessOptions {
  PipelineConfig config;
  std::optional<std::filesystem::path> input; // replay; otherwise synthetic
  std::size_t frames = 100;
  std::size_t objects = 1;
  std::uint64_t seed = 0;
  float drift = 0.05f;
  std::filesystem::path metrics_out;
  std::optional<std::filesystem::path> snapshot_out;
  std::optional<std::filesystem::path> stream_out; // write the synthetic stream
  std::optional<std::filesystem::path> events_out;
  bool timing = true;
};

/// Exit status: 0 ok, 1 runtime failure, 2 configuration error.
inline int run(const HarnessOptions &opts, std::ostream &err) {
  try {
    PipelineConfig cfg = opts.config;
    std::unique_ptr<FrameSource> source;
    if (opts.input) {
      auto reader = std::make_unique<StreamReader>(*opts.input);
      const auto &h = reader->header();
      cfg.dims.c_k = h.c_k;
      cfg.dims.c_v = h.c_v;
      cfg.dims.h = h.h;
      cfg.dims.w = h.w;
      cfg.sensory_input_channels = h.c_in;
      source = std::move(reader);
    } else {
      StreamHeader h;
      h.c_k = static_cast<std::uint32_t>(cfg.dims.c_k);
      h.c_v = static_cast<std::uint32_t>(cfg.dims.c_v);
      h.c_in = static_cast<std::uint32_t>(cfg.sensory_input_channels);
      h.h = static_cast<std::uint32_t>(cfg.dims.h);
      h.w = static_cast<std::uint32_t>(cfg.dims.w);
      h.frame_count = static_cast<std::uint32_t>(opts.frames);
      h.object_count = static_cast<std::uint32_t>(opts.objects);
      if (opts.stream_out)
        generate_synthetic(*opts.stream_out, opts.seed, h, opts.drift);
      source = std::make_unique<SyntheticSource>(opts.seed, h, opts.drift);
    }

    try {
      cfg.validate();
    } catch (const ConfigError &e) {
      err << "config error: " << e.what() << '\n';
      return 2;
    }

    Pipeline pipe(cfg);
    DriveOptions dopts;
    dopts.timing = opts.timing;
    dopts.keep_events = opts.events_out.has_value();
    const DriveResult res = drive(pipe, *source, dopts);

    std::ofstream csv(opts.metrics_out, std::ios::binary);
    if (!csv)
      throw Error("cannot create metrics file " + opts.metrics_out.string());
    csv << kMetricsHeader;
    for (const auto &r : res.rows)
      write_metrics_row(csv, r);
    csv.close();

    if (opts.events_out) {
      std::ofstream ev(*opts.events_out, std::ios::binary);
      ev << res.event_log;
    }
    if (opts.snapshot_out && pipe.initialized())
      write_long_term_snapshot(*opts.snapshot_out, pipe.tracks(), cfg.dims);
    return 0;
  } catch (const StreamFormatError &e) {
    err << e.what() << '\n';
    return 1;
  } catch (const ConfigError &e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

} // namespace xmem
