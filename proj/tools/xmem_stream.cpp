// SPDX-License-Identifier: Apache-2.0
/**
 * @file   xmem_stream.cpp
 * @brief  Replays or generates feature streams through the memory pipeline
 *         and writes per-frame memory/latency metrics as CSV.
 */

#include "xmem/harness.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

namespace {

int usage_error(const CLI::App &app, const std::string &msg) {
  std::cerr << msg << "\n\n" << app.help();
  return 2;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"xmem_stream: drive the streaming memory pipeline over a feature stream"};

  xmem::HarnessOptions opts;
  xmem::PipelineConfig &cfg = opts.config;
  cfg.dims = xmem::FeatureDims{64, 512, 64, 30, 54};

  std::string input;
  std::string metrics_out;
  std::string snapshot_out;
  std::string stream_out;
  std::string events_out;
  std::string deep_update = "rth";
  std::string strategy = "usage";
  bool synthetic = false;
  bool small = false;
  bool no_timing = false;
  bool no_consolidation = false;

  auto *opt_input = app.add_option("--input", input, "Replay a stream file");
  auto *opt_synth = app.add_flag("--synthetic", synthetic, "Generate a synthetic random-walk stream");
  opt_input->excludes(opt_synth);
  opt_synth->excludes(opt_input);
  app.add_option("--frames", opts.frames, "Synthetic frame count")->capture_default_str();
  app.add_option("--seed", opts.seed, "Seed for the stream, GRU weights and probe")->capture_default_str();
  app.add_option("--drift", opts.drift, "Synthetic per-frame random-walk step")->capture_default_str();
  app.add_option("--objects", opts.objects, "Synthetic object count")->capture_default_str();
  app.add_option("--height", cfg.dims.h, "Feature grid rows")->capture_default_str();
  app.add_option("--width", cfg.dims.w, "Feature grid columns")->capture_default_str();
  app.add_flag("--small", small, "8x8 feature grid preset");
  app.add_option("--ck", cfg.dims.c_k, "Key channels")->capture_default_str();
  app.add_option("--cv", cfg.dims.c_v, "Value channels")->capture_default_str();
  app.add_option("--ch", cfg.dims.c_h, "Sensory hidden channels")->capture_default_str();
  app.add_option("--cin", cfg.sensory_input_channels, "Sensory input channels (synthetic)")
      ->capture_default_str();
  app.add_option("--r", cfg.r, "Working memory insertion period")->capture_default_str();
  app.add_option("--tmin", cfg.t_min, "Frames kept after consolidation")->capture_default_str();
  app.add_option("--tmax", cfg.t_max, "Frames that trigger consolidation")->capture_default_str();
  app.add_option("--proto-p", cfg.p, "Prototypes per consolidation")->capture_default_str();
  app.add_option("--topk", cfg.top_k, "Top-k filter for memory reads")->capture_default_str();
  app.add_option("--lt-max", cfg.l_max, "Long-term memory capacity")->capture_default_str();
  app.add_option("--insert-offset", cfg.insert_offset, "Insertion phase in [0, r)")->capture_default_str();
  app.add_option("--deep-update", deep_update, "Deep update schedule")
      ->check(CLI::IsMember({"rth", "every", "never"}))
      ->capture_default_str();
  app.add_option("--strategy", strategy, "Prototype selection strategy")
      ->check(CLI::IsMember({"usage", "random", "kmeans"}))
      ->capture_default_str();
  app.add_flag("--no-consolidation", no_consolidation, "Unbounded working memory, no long-term store");
  app.add_flag("--no-timing", no_timing, "Write read_duration_ns as 0");
  app.add_option("--metrics-out", metrics_out, "Metrics CSV path")->required();
  app.add_option("--snapshot-out", snapshot_out, "Long-term memory snapshot path");
  app.add_option("--stream-out", stream_out, "Also write the synthetic stream to this path");
  app.add_option("--events-out", events_out, "Bookkeeping event log path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    return usage_error(app, e.what());
  }

  if (!synthetic && input.empty())
    return usage_error(app, "one of --input or --synthetic is required");
  if (small)
    cfg.dims.h = cfg.dims.w = 8;

  if (cfg.t_min >= cfg.t_max)
    return usage_error(app, "--tmin (" + std::to_string(cfg.t_min) + ") must be less than --tmax (" +
                                std::to_string(cfg.t_max) + ")");
  if (cfg.t_min < 2)
    return usage_error(app, "--tmin must be >= 2");
  if (cfg.r < 1)
    return usage_error(app, "--r must be >= 1");
  if (cfg.l_max < cfg.p)
    return usage_error(app, "--lt-max (" + std::to_string(cfg.l_max) + ") must be >= --proto-p (" +
                                std::to_string(cfg.p) + ")");
  if (cfg.insert_offset >= cfg.r)
    return usage_error(app, "--insert-offset must be less than --r");
  if (cfg.top_k < 1)
    return usage_error(app, "--topk must be >= 1");
  if (cfg.p < 1)
    return usage_error(app, "--proto-p must be >= 1");
  if (opts.objects < 1)
    return usage_error(app, "--objects must be >= 1");
  if (opts.drift < 0.0f)
    return usage_error(app, "--drift must be >= 0");

  static const std::map<std::string, xmem::DeepUpdateMode> deep_modes = {
      {"rth", xmem::DeepUpdateMode::every_rth},
      {"every", xmem::DeepUpdateMode::every_frame},
      {"never", xmem::DeepUpdateMode::never}};
  static const std::map<std::string, xmem::PrototypeStrategy> strategies = {
      {"usage", xmem::PrototypeStrategy::usage},
      {"random", xmem::PrototypeStrategy::random},
      {"kmeans", xmem::PrototypeStrategy::kmeans}};
  cfg.deep_update = deep_modes.at(deep_update);
  cfg.strategy = strategies.at(strategy);
  cfg.consolidation = !no_consolidation;
  cfg.potentiation_top_k = cfg.top_k;
  cfg.seed = opts.seed;

  if (!input.empty())
    opts.input = input;
  opts.metrics_out = metrics_out;
  if (!snapshot_out.empty())
    opts.snapshot_out = snapshot_out;
  if (!stream_out.empty())
    opts.stream_out = stream_out;
  if (!events_out.empty())
    opts.events_out = events_out;
  opts.timing = !no_timing;

  return xmem::run(opts, std::cerr);
}
