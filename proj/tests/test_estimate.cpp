#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "rfion/figures.hpp"

using namespace rfion;

namespace {

std::vector<double> exponential_times(std::size_t n, double offset, double tau, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> e(1.0 / tau);
  std::vector<double> t(n);
  for (auto& v : t) v = offset + e(rng);
  return t;
}

std::vector<IQPoint> cloud(std::size_t n, IQPoint centre, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  std::vector<IQPoint> out(n);
  for (auto& p : out) p = {centre.i + g(rng), centre.q + g(rng)};
  return out;
}

// Trapezoidal E[f(d)] for d ~ Exp(tau) with f piecewise linear through
// (0, 1) and the points, held constant beyond the last.
double expected_infidelity_numeric(const std::vector<InfidelityPoint>& pts, double tau) {
  auto f = [&](double d) {
    double x0 = 0.0, y0 = 1.0;
    for (const auto& p : pts) {
      if (d <= p.duration_s) return y0 + (p.infidelity - y0) * (d - x0) / (p.duration_s - x0);
      x0 = p.duration_s;
      y0 = p.infidelity;
    }
    return y0;
  };
  const double top = 40.0 * tau;
  const int n = 4'000'000;
  const double h = top / n;
  double s = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double d = k * h;
    const double w = (k == 0 || k == n) ? 0.5 : 1.0;
    s += w * f(d) * std::exp(-d / tau) / tau;
  }
  return s * h;
}

}  // namespace

TEST(BackgroundThreshold, MaximumOfControlTimes) {
  EXPECT_DOUBLE_EQ(background_threshold({100e-9}), 100e-9);
  EXPECT_DOUBLE_EQ(background_threshold({50e-9, 343e-9, 120e-9}), 343e-9);
  EXPECT_THROW(background_threshold({}), EstimationError);
}

TEST(BackgroundThreshold, SimulatedControlRunEndsShortlyAfterPulse) {
  auto cfg = preset("control");
  cfg.cycles = 20000;
  cfg.targets.background_probability = 6e-3;
  cfg.storage.keep_event_traces = false;
  cfg.storage.keep_empty_traces = 0;
  cfg = cfg.resolved();
  const auto run = run_pulsed_campaign(cfg, 77, 0);
  const auto t = run.detected_times();
  ASSERT_GT(t.size(), 60u);
  const double t_min = background_threshold(t);
  EXPECT_GT(t_min, cfg.schedule.pulse_start_s);
  EXPECT_LT(t_min, cfg.schedule.pulse_end_s() + 0.4e-6);
}

TEST(FitLifetime, MaximumLikelihoodIsMeanExcess) {
  const double t_min = 343e-9;
  const auto t = exponential_times(819, t_min, 492e-9, 1);
  const auto fit = fit_lifetime(t, t_min, LifetimeMethod::maximum_likelihood);
  double mean = 0.0;
  for (double v : t) mean += (v - t_min) / t.size();
  EXPECT_NEAR(fit.tau_s, mean, 1e-18);
  EXPECT_NEAR(fit.sigma_s, mean / std::sqrt(819.0), 1e-18);
  EXPECT_EQ(fit.n_selected, 819u);
  EXPECT_NEAR(fit.tau_s, 492e-9, 3 * 492e-9 / std::sqrt(819.0));
}

TEST(FitLifetime, UnbiasedOverRepeats) {
  double sum = 0.0;
  const int reps = 400;
  for (int r = 0; r < reps; ++r)
    sum += fit_lifetime(exponential_times(200, 0.0, 492e-9, 100 + r), 0.0, LifetimeMethod::maximum_likelihood).tau_s;
  EXPECT_NEAR(sum / reps, 492e-9, 3 * 492e-9 / std::sqrt(200.0 * reps));
}

TEST(FitLifetime, SelectionInvariance) {
  const double t_min = 343e-9;
  const auto base = exponential_times(600, t_min, 492e-9, 2);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> early(0.0, t_min);
  for (auto method : {LifetimeMethod::maximum_likelihood, LifetimeMethod::least_squares}) {
    const auto a = fit_lifetime(base, t_min, method);
    auto more = base;
    for (int k = 0; k < 300; ++k) more.insert(more.begin() + (k * 7) % more.size(), early(rng));
    more.push_back(t_min);
    const auto b = fit_lifetime(more, t_min, method);
    EXPECT_EQ(a.tau_s, b.tau_s);
    EXPECT_EQ(a.sigma_s, b.sigma_s);
    EXPECT_EQ(a.n_selected, b.n_selected);
    EXPECT_EQ(b.n_total, base.size() + 301);
  }
}

TEST(FitLifetime, MethodsAgreeOnLargeSamples) {
  for (std::uint64_t seed : {4, 5, 6}) {
    const auto t = exponential_times(1000, 0.25e-6, 492e-9, seed);
    const auto mle = fit_lifetime(t, 0.25e-6, LifetimeMethod::maximum_likelihood);
    const auto ls = fit_lifetime(t, 0.25e-6, LifetimeMethod::least_squares);
    EXPECT_GT(ls.sigma_s, 0.0);
    EXPECT_LT(std::abs(mle.tau_s - ls.tau_s), 2.0 * std::hypot(mle.sigma_s, ls.sigma_s));
  }
}

TEST(FitLifetime, TooFewEvents) {
  const auto t = exponential_times(19, 0.0, 492e-9, 7);
  try {
    fit_lifetime(t, 0.0, LifetimeMethod::maximum_likelihood);
    FAIL();
  } catch (const EstimationError& e) {
    EXPECT_NE(std::string(e.what()).find("19"), std::string::npos);
  }
  LifetimeOptions o;
  o.min_events = 10;
  EXPECT_NO_THROW(fit_lifetime(t, 0.0, LifetimeMethod::maximum_likelihood, o));
}

TEST(FitLifetime, MethodNames) {
  EXPECT_EQ(parse_lifetime_method("mle"), LifetimeMethod::maximum_likelihood);
  EXPECT_EQ(parse_lifetime_method(to_string(LifetimeMethod::least_squares)), LifetimeMethod::least_squares);
  EXPECT_THROW(parse_lifetime_method("median"), ConfigError);
}

TEST(ComputeSnr, DeltaClustersAreUnbounded) {
  const std::vector<IQPoint> a(5, {0.1, 0.2}), b(5, {0.1, 0.19});
  const auto r = compute_snr(a, b);
  EXPECT_TRUE(r.unbounded);
  EXPECT_TRUE(std::isinf(r.snr));
}

TEST(ComputeSnr, IdenticalClustersGiveZero) {
  const auto a = cloud(100, {0.1, 0.2}, 1e-3, 1);
  const auto r = compute_snr(a, a);
  EXPECT_EQ(r.snr, 0.0);
  EXPECT_FALSE(r.unbounded);
}

TEST(ComputeSnr, SinglePointClusterIsUndefined) {
  EXPECT_THROW(compute_snr({{0.0, 0.0}}, cloud(10, {1, 1}, 0.1, 2)), EstimationError);
}

TEST(ComputeSnr, MatchesDefinition) {
  const auto a = cloud(20000, {0.0, 0.0}, 1e-3, 3), b = cloud(20000, {6e-3, 8e-3}, 1e-3, 4);
  EXPECT_NEAR(compute_snr(a, b).snr, 10.0, 0.15);
}

TEST(ComputeSnr, RotationAndTranslationInvariant) {
  const auto a = cloud(500, {0.15, 0.02}, 2e-3, 5), b = cloud(500, {0.14, 0.03}, 3e-3, 6);
  const double ref = compute_snr(a, b).snr;
  for (double angle : {0.4, 1.3, -2.2, 3.0}) {
    const double c = std::cos(angle), s = std::sin(angle);
    auto move = [&](std::vector<IQPoint> v) {
      for (auto& p : v) p = {c * p.i - s * p.q + 0.7, s * p.i + c * p.q - 0.3};
      return v;
    };
    EXPECT_NEAR(compute_snr(move(a), move(b)).snr, ref, 1e-9 * ref);
  }
}

TEST(SnrLaw, RoundTripsExactPoints) {
  std::vector<SnrPoint> pts;
  for (double t : default_snr_integration_times()) pts.push_back({t, 9.6 * std::sqrt((0.5e-6 + t) / 1e-6)});
  const auto fit = fit_snr_scaling(pts);
  EXPECT_NEAR(fit.snr_1us, 9.6, 1e-9);
  EXPECT_NEAR(fit.t0_s, 0.5e-6, 1e-15);
  EXPECT_NEAR(fit.predict(1.5e-6), 9.6 * std::sqrt(2.0), 1e-9);
  EXPECT_NEAR(fit.predict(1.5e-6), 13.6, 0.05);
  double prev = 0.0;
  for (double t = 0.1e-6; t < 10e-6; t += 0.1e-6) {
    EXPECT_GT(fit.predict(t), prev);
    prev = fit.predict(t);
  }
}

TEST(SnrLaw, RejectsDegenerateDesigns) {
  EXPECT_THROW(fit_snr_scaling({{1e-6, 9.6}, {2e-6, 12.0}}), EstimationError);
  EXPECT_THROW(fit_snr_scaling({{1e-6, 9.6}, {1e-6, 9.7}, {1e-6, 9.5}}), EstimationError);
}

TEST(SnrLaw, CalibratedSystemRecoversLaw) {
  const auto cfg = preset("calibrated-noise").resolved();
  const auto pts = measure_snr_curve(cfg.trace, default_snr_integration_times(), 10000, 9);
  const auto fit = fit_snr_scaling(pts);
  EXPECT_NEAR(fit.snr_1us, 9.6, 0.05 * 9.6);
  EXPECT_NEAR(fit.t0_s, 0.5e-6, 0.15 * 0.5e-6);
  // t_int = 0.5 us sits at SNR = SNR_1us when t0 = 0.5 us.
  EXPECT_NEAR(pts[1].snr, 9.6, 0.05 * 9.6);
}

TEST(Infidelity, BoundedMonotoneAndLimits) {
  const auto curve = infidelity_vs_reset({0.01e-6, 0.1e-6, 0.17e-6, 0.3e-6, 1e-6, 5e-6},
                                         detail::fidelity_setup(), 1000, 12, 0);
  ASSERT_EQ(curve.points.size(), 6u);
  for (const auto& p : curve.points) {
    EXPECT_GE(p.infidelity, 0.0);
    EXPECT_LE(p.infidelity, 1.0);
  }
  for (std::size_t k = 1; k < curve.points.size(); ++k)
    EXPECT_LE(curve.points[k].infidelity,
              curve.points[k - 1].infidelity + 2 * std::hypot(curve.points[k].sigma, curve.points[k - 1].sigma));
  EXPECT_GT(curve.points[0].infidelity, 0.8);
  EXPECT_LT(curve.points[2].infidelity, 0.03);
  EXPECT_EQ(curve.points.back().misses, 0u);
  EXPECT_EQ(curve.empty_trials, 1000u);
}

TEST(OverallFidelity, PerfectCurve) {
  std::vector<InfidelityPoint> pts{{1e-12, 0.0, 0, 0, 1}, {1e-6, 0.0, 0, 0, 1}};
  EXPECT_NEAR(overall_fidelity(pts, 70.9e-6), 1.0, 1e-7);
}

TEST(OverallFidelity, MatchesNumericIntegral) {
  std::vector<InfidelityPoint> pts{{0.05e-6, 0.9, 0, 0, 1}, {0.17e-6, 0.01, 0, 0, 1}, {0.3e-6, 1e-3, 0, 0, 1},
                                   {2e-6, 1e-4, 0, 0, 1}};
  for (double tau : {70.9e-6, 1e-6}) {
    EXPECT_NEAR(1.0 - overall_fidelity(pts, tau), expected_infidelity_numeric(pts, tau), 1e-8);
  }
}

TEST(OverallFidelity, MonotoneInInfidelity) {
  std::vector<InfidelityPoint> pts{{0.1e-6, 0.5, 0, 0, 1}, {0.2e-6, 0.05, 0, 0, 1}, {1e-6, 1e-3, 0, 0, 1}};
  const double base = overall_fidelity(pts, 70.9e-6);
  for (std::size_t k = 0; k < pts.size(); ++k) {
    auto worse = pts;
    worse[k].infidelity = std::min(1.0, worse[k].infidelity * 1.5);
    EXPECT_LE(overall_fidelity(worse, 70.9e-6), base);
  }
  auto bad = pts;
  bad[1].infidelity = 1.5;
  EXPECT_THROW(overall_fidelity(bad, 70.9e-6), EstimationError);
  EXPECT_THROW(overall_fidelity(std::vector<InfidelityPoint>{}, 70.9e-6), EstimationError);
}

TEST(ShortEvents, ExpectedFraction) {
  EXPECT_NEAR(expected_short_fraction(0.5e-6, 70.9e-6), 1.0 - std::exp(-0.5 / 70.9), 1e-15);
  EXPECT_NEAR(expected_short_fraction(0.5e-6, 70.9e-6), 0.0070, 0.00005);
}

TEST(ShortEvents, SampledFraction) {
  const auto d = exponential_times(100000, 0.0, 70.9e-6, 8);
  const auto f = short_event_fraction(d, 0.5e-6);
  const double p = expected_short_fraction(0.5e-6, 70.9e-6);
  EXPECT_NEAR(f.value, p, 3 * std::sqrt(p * (1 - p) / d.size()));
  EXPECT_THROW(short_event_fraction({}, 0.5e-6), EstimationError);
}

TEST(BackgroundContamination, ErOneEstimate) {
  const double control_p = 294.0 / 4.9e6;
  const auto b = background_contamination(control_p, 990000, 594);
  EXPECT_NEAR(b.expected_background, 59.4, 1e-9);
  EXPECT_NEAR(b.ion_fraction, 0.9, 1e-9);
  EXPECT_THROW(background_contamination(1.5, 10, 1), DomainError);
}
