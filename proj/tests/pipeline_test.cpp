// SPDX-License-Identifier: Apache-2.0

#include "xmem/harness.hpp"
#include "xmem/pipeline.hpp"
#include "xmem/stream_format.hpp"

#include "oracle/reference_oracle.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace xmem;

namespace {

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.dims = FeatureDims{4, 6, 3, 2, 3};
  cfg.sensory_input_channels = 2;
  cfg.r = 2;
  cfg.t_min = 3;
  cfg.t_max = 5;
  cfg.p = 4;
  cfg.top_k = 5;
  cfg.potentiation_top_k = 5;
  cfg.l_max = 10;
  cfg.seed = 42;
  return cfg;
}

StreamHeader header_for(const PipelineConfig &cfg, std::uint32_t frames, std::uint32_t objects = 1) {
  StreamHeader h;
  h.c_k = static_cast<std::uint32_t>(cfg.dims.c_k);
  h.c_v = static_cast<std::uint32_t>(cfg.dims.c_v);
  h.c_in = static_cast<std::uint32_t>(cfg.sensory_input_channels);
  h.h = static_cast<std::uint32_t>(cfg.dims.h);
  h.w = static_cast<std::uint32_t>(cfg.dims.w);
  h.frame_count = frames;
  h.object_count = objects;
  return h;
}

std::vector<ObjectFeatures> first_frame(const PipelineConfig &cfg, std::uint32_t objects) {
  SyntheticSource src(1, header_for(cfg, 1, objects), 0.1f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  return f;
}

} // namespace

TEST(PipelineInit, OneObject) {
  const auto cfg = small_config();
  Pipeline pipe(cfg);
  pipe.init(first_frame(cfg, 1));
  const auto &t = pipe.tracks().at(0);
  EXPECT_EQ(t.total_elements(), cfg.dims.hw());
  EXPECT_EQ(t.long_term.size(), 0u);
  EXPECT_TRUE(t.working.frames().front().is_reference);
  EXPECT_EQ(t.sensory.hidden().cwiseAbs().maxCoeff(), 0.0f);
}

TEST(PipelineInit, ThreeIndependentTracks) {
  const auto cfg = small_config();
  Pipeline pipe(cfg);
  pipe.init(first_frame(cfg, 3));
  ASSERT_EQ(pipe.tracks().size(), 3u);
  for (const auto &t : pipe.tracks())
    EXPECT_EQ(t.total_elements(), cfg.dims.hw());
  EXPECT_NE(pipe.tracks()[0].working.frames()[0].keys.data(),
            pipe.tracks()[1].working.frames()[0].keys.data());
}

TEST(PipelineInit, ZeroObjectsIsConfigError) {
  Pipeline pipe(small_config());
  EXPECT_THROW(pipe.init({}), ConfigError);
}

TEST(PipelineConfig, Validation) {
  auto cfg = small_config();
  EXPECT_NO_THROW(cfg.validate());
  auto bad = cfg;
  bad.t_min = 6;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.r = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.l_max = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.insert_offset = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
  const PipelineConfig defaults;
  EXPECT_EQ(defaults.t_min, 5u);
  EXPECT_EQ(defaults.t_max, 10u);
  EXPECT_EQ(defaults.p, 128u);
  EXPECT_EQ(defaults.top_k, 30u);
  EXPECT_EQ(defaults.l_max, 10000u);
}

TEST(PipelineStep, ContractErrors) {
  const auto cfg = small_config();
  Pipeline pipe(cfg);
  const auto f = first_frame(cfg, 1);
  EXPECT_THROW(pipe.step(f, 1), ContractError);
  pipe.init(f);
  EXPECT_THROW(pipe.step(f, 0), ContractError);
  pipe.step(f, 3);
  EXPECT_THROW(pipe.step(f, 3), ContractError);
  EXPECT_THROW(pipe.step(first_frame(cfg, 2), 4), ShapeError);
}

TEST(PipelineStep, InsertionScheduleEveryRthFrame) {
  auto cfg = small_config();
  cfg.r = 5;
  cfg.t_max = 50;
  cfg.l_max = 1000;
  Pipeline pipe(cfg);
  SyntheticSource src(3, header_for(cfg, 31), 0.05f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  pipe.init(f);
  for (FrameIndex t = 1; src.next(f); ++t) {
    const auto res = pipe.step(f, t);
    EXPECT_EQ(res.objects[0].events.inserted, t % 5 == 0) << "frame " << t;
    EXPECT_EQ(res.objects[0].events.deep_updated, t % 5 == 0);
  }
}

TEST(PipelineStep, InsertOffsetShiftsPhase) {
  auto cfg = small_config();
  cfg.r = 4;
  cfg.insert_offset = 3;
  Pipeline pipe(cfg);
  EXPECT_FALSE(pipe.is_insertion_frame(4));
  EXPECT_TRUE(pipe.is_insertion_frame(3));
  EXPECT_TRUE(pipe.is_insertion_frame(7));
}

TEST(PipelineStep, DeepUpdateModes) {
  for (auto mode : {DeepUpdateMode::every_frame, DeepUpdateMode::never}) {
    auto cfg = small_config();
    cfg.deep_update = mode;
    Pipeline pipe(cfg);
    SyntheticSource src(3, header_for(cfg, 12), 0.05f);
    std::vector<ObjectFeatures> f;
    src.next(f);
    pipe.init(f);
    for (FrameIndex t = 1; src.next(f); ++t)
      EXPECT_EQ(pipe.step(f, t).objects[0].events.deep_updated, mode == DeepUpdateMode::every_frame);
  }
}

TEST(PipelineStep, ConsolidationTransitionsTmaxToTmin) {
  auto cfg = small_config();
  cfg.r = 1;
  cfg.t_min = 5;
  cfg.t_max = 10;
  cfg.p = 8;
  cfg.l_max = 100;
  Pipeline pipe(cfg);
  SyntheticSource src(5, header_for(cfg, 30), 0.1f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  pipe.init(f);
  std::size_t consolidations = 0;
  for (FrameIndex t = 1; src.next(f); ++t) {
    const std::size_t lt_before = pipe.tracks()[0].long_term.size();
    const auto res = pipe.step(f, t);
    const auto &track = pipe.tracks()[0];
    if (res.objects[0].events.consolidated) {
      ++consolidations;
      EXPECT_EQ(track.working.frame_count(), 5u);
      EXPECT_EQ(track.long_term.size(), lt_before + std::min<std::size_t>(8, 5 * cfg.dims.hw()));
      ASSERT_TRUE(res.objects[0].report.has_value());
      EXPECT_EQ(res.objects[0].report->candidate_elements, 5 * cfg.dims.hw());
    } else {
      EXPECT_LT(track.working.frame_count(), 10u);
    }
  }
  EXPECT_EQ(consolidations, 5u); // frames 9, 14, 19, 24, 29
}

TEST(PipelineStep, UsageConservationPerRead) {
  auto cfg = small_config();
  Pipeline pipe(cfg);
  SyntheticSource src(8, header_for(cfg, 60, 2), 0.2f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  pipe.init(f);
  for (FrameIndex t = 1; src.next(f); ++t) {
    const auto res = pipe.step(f, t);
    for (const auto &o : res.objects) {
      const double total = o.working_mass.cast<double>().sum() + o.long_term_mass.cast<double>().sum();
      EXPECT_NEAR(total, static_cast<double>(cfg.dims.hw()), 1e-3);
    }
    for (Index j = 0; j < res.fused_probabilities.cols(); ++j)
      EXPECT_NEAR(res.fused_probabilities.col(j).cast<double>().sum(), 1.0, 1e-5);
  }
}

TEST(PipelineStep, MemoryBoundOverLongStream) {
  auto cfg = small_config();
  cfg.r = 1;
  Pipeline pipe(cfg);
  SyntheticSource src(9, header_for(cfg, 1000), 0.05f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  pipe.init(f);
  for (FrameIndex t = 1; src.next(f); ++t) {
    pipe.step(f, t);
    const auto &tr = pipe.tracks()[0];
    ASSERT_LE(tr.total_elements(), cfg.t_max * cfg.dims.hw() + cfg.l_max);
    ASSERT_LE(tr.long_term.size(), cfg.l_max);
    ASSERT_LT(tr.working.frame_count(), cfg.t_max);
    if (t > 10) {
      ASSERT_GE(tr.working.frame_count(), cfg.t_min);
    }
  }
}

TEST(PipelineStep, UnboundedModeGrowsLinearly) {
  auto cfg = small_config();
  cfg.consolidation = false;
  cfg.r = 3;
  Pipeline pipe(cfg);
  SyntheticSource src(2, header_for(cfg, 40), 0.05f);
  std::vector<ObjectFeatures> f;
  src.next(f);
  pipe.init(f);
  for (FrameIndex t = 1; src.next(f); ++t) {
    pipe.step(f, t);
    const std::size_t frames = 1 + static_cast<std::size_t>(t / 3);
    EXPECT_EQ(pipe.tracks()[0].working.element_count(), frames * cfg.dims.hw());
    EXPECT_EQ(pipe.tracks()[0].long_term.size(), 0u);
  }
}

TEST(PipelineStep, DeterministicForEqualSeeds) {
  auto run_once = [] {
    auto cfg = small_config();
    cfg.strategy = PrototypeStrategy::kmeans;
    Pipeline pipe(cfg);
    SyntheticSource src(4, header_for(cfg, 80), 0.1f);
    DriveOptions opts;
    opts.timing = false;
    auto res = drive(pipe, src, opts);
    return std::make_pair(res.event_log, pipe.tracks()[0].long_term.values().data());
  };
  const auto a = run_once();
  const auto b = run_once();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(PipelineStep, PrototypeStrategiesAllRespectBounds) {
  for (auto strategy : {PrototypeStrategy::usage, PrototypeStrategy::random, PrototypeStrategy::kmeans}) {
    auto cfg = small_config();
    cfg.strategy = strategy;
    Pipeline pipe(cfg);
    SyntheticSource src(6, header_for(cfg, 120), 0.1f);
    const auto res = drive(pipe, src);
    EXPECT_EQ(res.event_log, oracle::bookkeeping(cfg, 120));
    for (const auto &row : res.rows)
      EXPECT_LE(row.lt_elements, cfg.l_max);
  }
}

TEST(PipelineStep, FirstConsolidationAtDefaultSchedule) {
  // t_min=5, t_max=10 with r=10: working memory reaches 10 frames at frame 90.
  auto cfg = small_config();
  cfg.r = 10;
  cfg.t_min = 5;
  cfg.t_max = 10;
  cfg.p = 128;
  cfg.l_max = 10000;
  cfg.dims.h = 4;
  cfg.dims.w = 16; // hw = 64
  Pipeline pipe(cfg);
  SyntheticSource src(6, header_for(cfg, 91), 0.1f);
  const auto res = drive(pipe, src);
  for (std::size_t t = 0; t < 90; ++t)
    EXPECT_FALSE(res.rows[t].consolidation_flag);
  EXPECT_TRUE(res.rows[90].consolidation_flag);
  EXPECT_EQ(res.rows[90].wm_frames, 5u);
  EXPECT_EQ(res.rows[90].lt_elements, 128u);
}

TEST(SoftAggregate, SingleObjectIdentity) {
  Matrix p(1, 1);
  p << 0.7f;
  const Matrix out = soft_aggregate(p);
  EXPECT_NEAR(out(0, 0), 0.3f, 1e-6f);
  EXPECT_NEAR(out(1, 0), 0.7f, 1e-6f);
}

TEST(SoftAggregate, EqualOdds) {
  Matrix p(2, 1);
  p << 0.5f, 0.5f;
  const Matrix out = soft_aggregate(p);
  for (Index i = 0; i < 3; ++i)
    EXPECT_NEAR(out(i, 0), 1.0f / 3.0f, 1e-6f);
}

TEST(SoftAggregate, ClampsSaturatedProbabilities) {
  Matrix p(2, 1);
  p << 0.0f, 1.0f;
  const Matrix out = soft_aggregate(p);
  EXPECT_TRUE(out.allFinite());
  EXPECT_NEAR(out.col(0).sum(), 1.0f, 1e-5f);
  EXPECT_GT(out(2, 0), 0.99f);
}

TEST(SoftAggregate, PreservesObjectArgmax) {
  std::mt19937 rng(10);
  std::uniform_real_distribution<float> u(0.001f, 0.999f);
  Matrix p(4, 500);
  for (Index i = 0; i < p.size(); ++i)
    p.data()[i] = u(rng);
  const Matrix out = soft_aggregate(p);
  for (Index j = 0; j < p.cols(); ++j) {
    Index raw_arg = 0, fused_arg = 0;
    p.col(j).maxCoeff(&raw_arg);
    out.col(j).tail(4).maxCoeff(&fused_arg);
    EXPECT_EQ(raw_arg, fused_arg);
    EXPECT_NEAR(out.col(j).cast<double>().sum(), 1.0, 1e-5);
  }
}
