#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "rfion/harness.hpp"

using namespace rfion;

namespace {

EventTimeline pairs(std::initializer_list<std::pair<double, double>> ps) {
  EventTimeline tl;
  for (auto [a, b] : ps) {
    tl.events.push_back({a, Transition::background_ionize});
    if (std::isfinite(b)) tl.events.push_back({b, Transition::reset});
  }
  return tl;
}

constexpr double kOpen = std::numeric_limits<double>::infinity();

struct Setup {
  PulseSchedule schedule;
  TraceConfig trace;
  LaserTransient transient;
  FitModel model;
  SignalGeometry geometry;
};

Setup quiet_setup(bool transient) {
  Setup s;
  s.trace.noise = {};
  s.transient.enabled = transient;
  s.transient.amplitude_jitter = 0.0;
  s.model = FitModel::from_configs(s.trace, s.transient, s.schedule);
  s.geometry = SignalGeometry::from_config(s.trace);
  return s;
}

}  // namespace

TEST(FindEvents, FlatNoisyTracesGiveNoCandidates) {
  auto cfg = preset("er2").resolved();
  cfg.transient.enabled = false;
  const auto g = SignalGeometry::from_config(cfg.trace);
  std::size_t candidates = 0;
  for (std::uint64_t k = 0; k < 10000; ++k) {
    const auto tr = synthesize_trace({}, cfg.schedule, cfg.trace, cfg.transient, seed_fanout(31, Stage::noise, k));
    candidates += find_events(tr, with_pre_trigger_baseline(g, tr), cfg.detector).size();
  }
  EXPECT_EQ(candidates, 0u);
}

// The smoothed detector statistic has sigma_s = sigma_raw * sqrt(gain) with
// the gain of the moving average applied after the filter; the threshold sits
// many sigma out.
TEST(FindEvents, SmoothedThresholdIsFarInTheTail) {
  auto cfg = preset("er2").resolved();
  const auto g = SignalGeometry::from_config(cfg.trace);
  const auto tr = synthesize_stationary(ChargeState::neutral, cfg.trace, 2'000'000, 17);
  auto x = g.deviation(tr);
  const auto sm = detail::centred_moving_average(
      x, static_cast<std::size_t>(std::llround(cfg.detector.smoothing_s / cfg.trace.dt_s())));
  double var = 0.0;
  for (double v : sm) var += v * v / sm.size();
  const double z = cfg.detector.threshold_fraction * std::abs(cfg.trace.contrast_v()) / std::sqrt(var);
  EXPECT_GT(z, 5.0);
  // Independent-window bound on the false-event rate per 10 us trace.
  const double windows = 10e-6 / cfg.detector.smoothing_s;
  EXPECT_LT(windows * oracle::normal_tail(z) * 1e4, 0.1);
}

TEST(FindEvents, CleanStepGivesOneInterval) {
  auto s = quiet_setup(false);
  s.trace.record_start_s = 0.0;
  s.trace.record_length_s = 100e-6;
  const auto tr = synthesize_trace(pairs({{1.8e-6, 60e-6}}), s.schedule, s.trace, s.transient, 1);
  const auto c = find_events(tr, s.geometry, 0.5);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_NEAR(c[0].start_s, 1.8e-6, 0.2e-6);
  EXPECT_NEAR(c[0].end_s, 60e-6, 0.2e-6);
  EXPECT_TRUE(c[0].closed);
}

TEST(FindEvents, TwoPairsInOrder) {
  auto cfg = preset("er2");
  cfg.mode = RunMode::cw;
  cfg.schedule.cycle_length_s = 300e-6;
  cfg = cfg.resolved();
  const auto tl = pairs({{40e-6, 52e-6}, {150e-6, 230e-6}});
  const auto tr = synthesize_trace(tl, cfg.schedule, cfg.trace, cfg.transient, 9);
  const auto c = find_events(tr, SignalGeometry::from_config(cfg.trace), cfg.detector);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_NEAR(c[0].start_s, 40e-6, 0.5e-6);
  EXPECT_NEAR(c[0].end_s, 52e-6, 0.5e-6);
  EXPECT_NEAR(c[1].start_s, 150e-6, 0.5e-6);
  EXPECT_NEAR(c[1].end_s, 230e-6, 0.5e-6);
}

TEST(FindEvents, OpenIntervalAtRecordEnd) {
  auto s = quiet_setup(false);
  const auto tr = synthesize_trace(pairs({{1e-6, kOpen}}), s.schedule, s.trace, s.transient, 1);
  const auto c = find_events(tr, s.geometry, 0.5);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_FALSE(c[0].closed);
  SignalGeometry flat = s.geometry;
  flat.contrast_v = 0.0;
  EXPECT_THROW(find_events(tr, flat, 0.5), DomainError);
}

TEST(Fit, NoiselessRecoversIonizationTime) {
  for (bool transient : {false, true}) {
    const auto s = quiet_setup(transient);
    for (double t : {1.8e-6, 0.6e-6, 2.345678e-6}) {
      const auto tr = synthesize_trace(pairs({{t, kOpen}}), s.schedule, s.trace, s.transient, 1);
      const auto found = detect_events(tr, s.geometry, DetectorConfig{}, s.model);
      ASSERT_EQ(found.size(), 1u);
      EXPECT_TRUE(found[0].detected);
      EXPECT_NEAR(found[0].t_ion_s, t, 1e-9) << transient;
      EXPECT_NEAR(found[0].amplitude_v, s.trace.contrast_v(), 1e-6);
    }
  }
}

TEST(Fit, NoiselessRecoversReset) {
  const auto s = quiet_setup(false);
  const auto tr = synthesize_trace(pairs({{1.0e-6, 1.6e-6}}), s.schedule, s.trace, s.transient, 1);
  const auto found = detect_events(tr, s.geometry, DetectorConfig{}, s.model);
  ASSERT_EQ(found.size(), 1u);
  EXPECT_TRUE(found[0].reset_observed);
  EXPECT_NEAR(found[0].t_reset_s, 1.6e-6, 1e-9);
  EXPECT_NEAR(found[0].duration_s, 0.6e-6, 2e-9);
}

TEST(Fit, ResultInvariants) {
  auto cfg = preset("er2").resolved();
  const auto g = SignalGeometry::from_config(cfg.trace);
  const auto m = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
  std::size_t detected = 0;
  for (std::uint64_t k = 0; k < 200; ++k) {
    const double t = 0.2e-6 + 0.02e-6 * static_cast<double>(k % 100);
    const double reset = k % 2 ? t + 1e-6 : kOpen;
    const auto tr = synthesize_trace(pairs({{t, reset}}), cfg.schedule, cfg.trace, cfg.transient, k);
    for (const auto& r : detect_events(tr, with_pre_trigger_baseline(g, tr), cfg.detector, m)) {
      if (!r.detected) continue;
      ++detected;
      EXPECT_GT(r.sigma_t_s, 0.0);
      EXPECT_LT(r.amplitude_v, 0.0);
      if (r.reset_observed) EXPECT_GT(r.duration_s, 0.0);
    }
  }
  EXPECT_GE(detected, 198u);
}

TEST(Fit, DegenerateWindowThrows) {
  const auto s = quiet_setup(false);
  const auto tr = synthesize_trace(pairs({{1e-6, kOpen}}), s.schedule, s.trace, s.transient, 1);
  FitWindow w{1e-6, 1.05e-6, 1e-6, 1.1e-6, std::nullopt};
  EXPECT_THROW(fit_ionization_time(tr, s.geometry, w, s.model), DomainError);
}

TEST(Fit, WrongSignIsNotDetected) {
  auto s = quiet_setup(false);
  const auto tr = synthesize_trace(pairs({{1e-6, kOpen}}), s.schedule, s.trace, s.transient, 1);
  FitModel flipped = s.model;
  flipped.contrast_v = -flipped.contrast_v;
  FitWindow w{0.6e-6, 1.4e-6, 0.0, 4e-6, std::nullopt};
  const auto r = fit_ionization_time(tr, s.geometry, w, flipped);
  EXPECT_FALSE(r.detected);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(Fit, TimeTranslationEquivariance) {
  auto cfg = preset("er2").resolved();
  cfg.transient.enabled = false;
  const auto g = SignalGeometry::from_config(cfg.trace);
  const auto m = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
  for (std::uint64_t k = 0; k < 20; ++k) {
    const auto tr = synthesize_trace(pairs({{2e-6 + 0.013e-6 * k, kOpen}}), cfg.schedule, cfg.trace, cfg.transient, k);
    const auto a = detect_events(tr, g, cfg.detector, m);
    for (double shift : {0.37e-6, 1.0e-6}) {
      IQTrace moved = tr;
      moved.start_s += shift;
      const auto b = detect_events(moved, g, cfg.detector, m);
      ASSERT_EQ(a.size(), b.size());
      ASSERT_FALSE(a.empty());
      EXPECT_NEAR(b[0].t_ion_s - a[0].t_ion_s, shift, cfg.trace.dt_s());
    }
  }
}

TEST(Fit, AmplitudeScaleInvariance) {
  auto cfg = preset("er2").resolved();
  auto big = cfg;
  const double k = 3.0;
  big.trace.level_neutral_v *= k;
  big.trace.level_ionized_v *= k;
  big.trace.noise.white_sigma_v *= k;
  big.trace.noise.telegraph_amplitude_v *= k;
  big.transient.jump_amplitude_v *= k;
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto tl = pairs({{0.6e-6 + 0.05e-6 * s, kOpen}});
    auto fit = [&](const ExperimentConfig& c) {
      const auto tr = synthesize_trace(tl, c.schedule, c.trace, c.transient, s);
      const auto g = with_pre_trigger_baseline(SignalGeometry::from_config(c.trace), tr);
      return detail::first_detection(
          detect_events(tr, g, c.detector, FitModel::from_configs(c.trace, c.transient, c.schedule)));
    };
    const auto a = fit(cfg), b = fit(big);
    ASSERT_EQ(a.detected, b.detected);
    if (a.detected) EXPECT_NEAR(a.t_ion_s, b.t_ion_s, 1e-11);
  }
}

TEST(Resolution, NoiselessFloorBelowOneNanosecond) {
  auto cfg = preset("er2").resolved();
  cfg.trace.noise = {};
  cfg.transient.enabled = false;
  ResolutionSetup setup{cfg.schedule, cfg.trace, cfg.transient};
  for (const auto& p : time_resolution_curve({0.1e-6, 0.5e-6, 1.5e-6, 3e-6}, setup, 20, 1, 1)) {
    EXPECT_LT(p.rms_error_s, 1e-9);
    EXPECT_EQ(p.failed, 0u);
  }
}

TEST(Resolution, NoisyCurveAboveFloorAndInflatedAtTransientOverlap) {
  auto cfg = preset("er2").resolved();
  ResolutionSetup setup{cfg.schedule, cfg.trace, cfg.transient};
  const auto noisy = time_resolution_curve({0.35e-6, 2e-6}, setup, 400, 3, 0);
  auto quiet = setup;
  quiet.trace.noise = {};
  quiet.transient.amplitude_jitter = 0.0;
  const auto floor = time_resolution_curve({0.35e-6, 2e-6}, quiet, 20, 3, 0);
  for (std::size_t k = 0; k < noisy.size(); ++k) EXPECT_GE(noisy[k].rms_error_s, floor[k].rms_error_s);
  const double combined = std::hypot(noisy[0].rms_error_sigma_s, noisy[1].rms_error_sigma_s);
  EXPECT_GT(noisy[0].rms_error_s - noisy[1].rms_error_s, 3.0 * combined);
}

TEST(DetectionCsv, HeaderAndRecord) {
  std::ostringstream os;
  write_detection_header(os);
  DetectionResult r;
  r.detected = true;
  r.t_ion_s = 1e-6;
  r.sigma_t_s = 2e-8;
  r.amplitude_v = -0.012;
  write_detection_record(os, 42, r);
  const auto s = os.str();
  EXPECT_EQ(s.substr(0, s.find('\n')), "cycle_id,detected,t_ion_s,sigma_t_s,duration_s,amplitude_V,residual");
  std::istringstream row(s.substr(s.find('\n') + 1));
  std::string id, det, t;
  std::getline(row, id, ',');
  std::getline(row, det, ',');
  std::getline(row, t, ',');
  EXPECT_EQ(id, "42");
  EXPECT_EQ(det, "1");
  EXPECT_EQ(std::stod(t), 1e-6);
}
