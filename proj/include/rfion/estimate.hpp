#ifndef RFION_ESTIMATE_HPP
#define RFION_ESTIMATE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "rfion/detect.hpp"
#include "rfion/error.hpp"
#include "rfion/parallel.hpp"
#include "rfion/rng.hpp"
#include "rfion/signal.hpp"
#include "rfion/snr_law.hpp"

namespace rfion {

// ---------------------------------------------------------------------------
// Background threshold and lifetime

/// Latest ionization time seen in the control (non-resonant) experiment.
inline double background_threshold(const std::vector<double>& control_t_ion_s) {
  if (control_t_ion_s.empty()) throw EstimationError("background_threshold: no control events");
  return *std::max_element(control_t_ion_s.begin(), control_t_ion_s.end());
}

enum class LifetimeMethod { least_squares, maximum_likelihood };

inline std::string_view to_string(LifetimeMethod m) {
  return m == LifetimeMethod::least_squares ? "least_squares" : "maximum_likelihood";
}

inline LifetimeMethod parse_lifetime_method(std::string_view s) {
  if (s == "least_squares" || s == "ls") return LifetimeMethod::least_squares;
  if (s == "maximum_likelihood" || s == "mle") return LifetimeMethod::maximum_likelihood;
  throw ConfigError("unknown lifetime method '" + std::string(s) + "'");
}

struct LifetimeFit {
  double tau_s = 0.0;
  double sigma_s = 0.0;
  std::size_t n_selected = 0;
  std::size_t n_total = 0;
  double t_min_s = 0.0;
  LifetimeMethod method = LifetimeMethod::maximum_likelihood;
};

struct LifetimeOptions {
  std::size_t min_events = 20;
  double grid_step_s = 10e-9;       // least squares: spacing of the N(t) grid
  std::size_t min_count = 10;       // least squares: stop the grid when N(t) drops below
  std::size_t bootstrap = 200;      // least squares: resamples for the uncertainty
  std::uint64_t seed = 0x5eed;
};

namespace detail {

/// Weighted fit of log N(t) = c - (t - t_min)/tau on a uniform grid;
/// weights N(t) (Poisson variance of log N). Returns tau.
inline double log_count_slope_fit(std::vector<double> excess, const LifetimeOptions& o) {
  std::sort(excess.begin(), excess.end());
  double sw = 0, st = 0, sy = 0, stt = 0, sty = 0;
  std::size_t points = 0;
  for (std::size_t k = 0;; ++k) {
    const double t = static_cast<double>(k) * o.grid_step_s;
    const auto n = static_cast<std::size_t>(excess.end() - std::upper_bound(excess.begin(), excess.end(), t));
    if (n < o.min_count) break;
    const double w = static_cast<double>(n);
    const double y = std::log(w);
    sw += w;
    st += w * t;
    sy += w * y;
    stt += w * t * t;
    sty += w * t * y;
    ++points;
  }
  if (points < 3) throw EstimationError("least-squares lifetime fit: fewer than 3 grid points above the count floor");
  const double slope = (sw * sty - st * sy) / (sw * stt - st * st);
  if (!(slope < 0.0)) throw EstimationError("least-squares lifetime fit: survival curve is not decaying");
  return -1.0 / slope;
}

}  // namespace detail

/// Excited-state lifetime from ionization times later than `t_min_s`.
inline LifetimeFit fit_lifetime(const std::vector<double>& t_ion_s, double t_min_s, LifetimeMethod method,
                                const LifetimeOptions& o = {}) {
  std::vector<double> excess;
  for (double t : t_ion_s)
    if (t > t_min_s) excess.push_back(t - t_min_s);
  if (excess.size() < o.min_events)
    throw EstimationError("fit_lifetime: " + std::to_string(excess.size()) + " events above t_min, need at least " +
                          std::to_string(o.min_events));

  LifetimeFit fit;
  fit.method = method;
  fit.n_selected = excess.size();
  fit.n_total = t_ion_s.size();
  fit.t_min_s = t_min_s;
  const double n = static_cast<double>(excess.size());

  if (method == LifetimeMethod::maximum_likelihood) {
    fit.tau_s = std::accumulate(excess.begin(), excess.end(), 0.0) / n;
    fit.sigma_s = fit.tau_s / std::sqrt(n);
    return fit;
  }

  fit.tau_s = detail::log_count_slope_fit(excess, o);
  // N(t) points share events, so the regression's own error is optimistic.
  Rng rng(o.seed);
  std::uniform_int_distribution<std::size_t> pick(0, excess.size() - 1);
  std::vector<double> resample(excess.size());
  double s1 = 0.0, s2 = 0.0;
  std::size_t ok = 0;
  for (std::size_t b = 0; b < o.bootstrap; ++b) {
    for (auto& v : resample) v = excess[pick(rng)];
    try {
      const double tau = detail::log_count_slope_fit(resample, o);
      s1 += tau;
      s2 += tau * tau;
      ++ok;
    } catch (const EstimationError&) {
    }
  }
  if (ok > 1) fit.sigma_s = std::sqrt(std::max(0.0, (s2 - s1 * s1 / ok) / (ok - 1.0)));
  return fit;
}

// ---------------------------------------------------------------------------
// SNR

struct IQPoint {
  double i;
  double q;
};

struct SnrResult {
  double snr = 0.0;
  bool unbounded = false;  // both clusters have zero spread
  double separation_v = 0.0;
  double sigma_v = 0.0;
};

namespace detail {

inline double cluster_sigma(const std::vector<IQPoint>& c, IQPoint& mean) {
  const double n = static_cast<double>(c.size());
  double mi = 0, mq = 0;
  for (const auto& p : c) {
    mi += p.i;
    mq += p.q;
  }
  mi /= n;
  mq /= n;
  double v = 0;
  for (const auto& p : c) v += (p.i - mi) * (p.i - mi) + (p.q - mq) * (p.q - mq);
  mean = {mi, mq};
  // Per-axis standard deviation: sqrt of half the covariance trace.
  return std::sqrt(v / (n - 1.0) / 2.0);
}

}  // namespace detail

/// Centre-to-centre distance of the two clusters over the mean of their
/// standard deviations.
inline SnrResult compute_snr(const std::vector<IQPoint>& neutral, const std::vector<IQPoint>& ionized) {
  if (neutral.size() < 2 || ionized.size() < 2)
    throw EstimationError("compute_snr: each cluster needs at least 2 points");
  IQPoint m0{}, m1{};
  const double s0 = detail::cluster_sigma(neutral, m0);
  const double s1 = detail::cluster_sigma(ionized, m1);
  SnrResult r;
  r.separation_v = std::hypot(m1.i - m0.i, m1.q - m0.q);
  r.sigma_v = 0.5 * (s0 + s1);
  if (r.separation_v == 0.0) return r;
  if (r.sigma_v == 0.0) {
    r.snr = std::numeric_limits<double>::infinity();
    r.unbounded = true;
    return r;
  }
  r.snr = r.separation_v / r.sigma_v;
  return r;
}

/// Boxcar means over non-overlapping windows of `width` samples.
inline std::vector<IQPoint> window_means(const IQTrace& tr, std::size_t width) {
  std::vector<IQPoint> out;
  if (width == 0) return out;
  for (std::size_t n = 0; n + width <= tr.size(); n += width) {
    double si = 0, sq = 0;
    for (std::size_t k = n; k < n + width; ++k) {
      si += tr.i[k];
      sq += tr.q[k];
    }
    out.push_back({si / width, sq / width});
  }
  return out;
}

/// Measured SNR at each integration time from `windows` independent boxcar
/// windows per charge state.
inline std::vector<SnrPoint> measure_snr_curve(const TraceConfig& cfg, const std::vector<double>& t_int_s,
                                               std::size_t windows, std::uint64_t seed) {
  std::vector<SnrPoint> out;
  for (std::size_t k = 0; k < t_int_s.size(); ++k) {
    const auto width = static_cast<std::size_t>(std::max<long long>(1, std::llround(t_int_s[k] / cfg.dt_s())));
    const auto n0 = synthesize_stationary(ChargeState::neutral, cfg, width * windows,
                                          seed_fanout(seed, Stage::noise, 2 * k));
    const auto n1 = synthesize_stationary(ChargeState::ionized, cfg, width * windows,
                                          seed_fanout(seed, Stage::noise, 2 * k + 1));
    out.push_back({t_int_s[k], compute_snr(window_means(n0, width), window_means(n1, width)).snr});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection fidelity

struct FidelitySetup {
  TraceConfig trace;
  DetectorConfig detector;
  double event_start_s = 1e-6;
  double settle_s = 2e-6;     // record kept after the longest reset
  double pre_trigger_s = 2e-6;
  double match_margin_s = 0.5e-6;
};

struct InfidelityPoint {
  double duration_s;
  double infidelity;
  double sigma;
  std::size_t misses;
  std::size_t trials;
};

struct InfidelityCurve {
  std::vector<InfidelityPoint> points;
  double false_positive_rate = 0.0;  // detections per event-free trace
  double false_positive_sigma = 0.0;
  std::size_t empty_trials = 0;
};

/// Probability that find_events + fit misses an ionization/reset pair of
/// each duration. Every duration reuses the same noise realisations (common
/// random numbers), and the same realisations without an event give the
/// false-positive rate.
inline InfidelityCurve infidelity_vs_reset(const std::vector<double>& durations_s, const FidelitySetup& setup,
                                           std::size_t n_mc, std::uint64_t seed, unsigned threads = 0) {
  if (n_mc < 1) throw DomainError("infidelity_vs_reset needs at least one trial");
  for (double d : durations_s) detail::require_positive(d, "event duration");
  const double d_max = durations_s.empty() ? 0.0 : *std::max_element(durations_s.begin(), durations_s.end());

  TraceConfig cfg = setup.trace;
  cfg.record_start_s = -setup.pre_trigger_s;
  cfg.record_length_s = setup.pre_trigger_s + setup.event_start_s + d_max + setup.settle_s;
  LaserTransient no_transient;
  no_transient.enabled = false;
  PulseSchedule schedule;
  const auto geometry = SignalGeometry::from_config(cfg);
  auto model = FitModel::from_configs(cfg, no_transient, schedule);
  model.fit_start_s = -std::numeric_limits<double>::infinity();
  const double dt = cfg.dt_s();

  const std::size_t nd = durations_s.size();
  std::vector<unsigned char> missed(nd * n_mc, 0);
  std::vector<std::size_t> false_hits(n_mc, 0);

  parallel_for(n_mc, threads, [&](std::size_t k) {
    Rng rng(seed_fanout(seed, Stage::fidelity, k));
    const double t1 = setup.event_start_s + uniform01(rng) * dt;
    const std::uint64_t noise_seed = seed_fanout(seed, Stage::noise, k);

    auto detections = [&](const EventTimeline& tl) {
      const auto tr = synthesize_trace(tl, schedule, cfg, no_transient, noise_seed);
      return detect_events(tr, with_pre_trigger_baseline(geometry, tr), setup.detector, model);
    };
    for (const auto& r : detections(EventTimeline{}))
      if (r.detected) ++false_hits[k];

    for (std::size_t j = 0; j < nd; ++j) {
      const double t2 = t1 + durations_s[j];
      EventTimeline tl;
      tl.events = {{t1 * (1.0 - 1e-9), Transition::excite}, {t1, Transition::relax_ionize}, {t2, Transition::reset}};
      bool hit = false;
      for (const auto& r : detections(tl))
        if (r.detected && r.t_ion_s >= t1 - setup.match_margin_s && r.t_ion_s <= t2 + setup.match_margin_s) hit = true;
      missed[j * n_mc + k] = hit ? 0 : 1;
    }
  });

  InfidelityCurve curve;
  const double n = static_cast<double>(n_mc);
  for (std::size_t j = 0; j < nd; ++j) {
    const auto m = static_cast<std::size_t>(std::count(missed.begin() + j * n_mc, missed.begin() + (j + 1) * n_mc, 1));
    const double p = static_cast<double>(m) / n;
    curve.points.push_back({durations_s[j], p, std::sqrt(p * (1.0 - p) / n), m, n_mc});
  }
  const double fp = static_cast<double>(std::accumulate(false_hits.begin(), false_hits.end(), std::size_t{0}));
  curve.empty_trials = n_mc;
  curve.false_positive_rate = fp / n;
  curve.false_positive_sigma = std::sqrt(std::max(fp, 1.0)) / n;
  return curve;
}

/// 1 - E[infidelity(d)] for reset durations d ~ Exp(tau_reset). The curve
/// is interpolated linearly from (0, 1) through the points and held at its
/// last value beyond; each segment is integrated in closed form.
inline double overall_fidelity(const std::vector<InfidelityPoint>& curve, double tau_reset_s) {
  detail::require_positive(tau_reset_s, "reset time constant");
  if (curve.empty()) throw EstimationError("overall_fidelity: empty infidelity curve");
  std::vector<std::pair<double, double>> pts{{0.0, 1.0}};
  for (const auto& p : curve) {
    if (!std::isfinite(p.duration_s) || !std::isfinite(p.infidelity) || p.infidelity < 0.0 || p.infidelity > 1.0)
      throw EstimationError("overall_fidelity: infidelity points must be finite and within [0, 1]");
    if (!(p.duration_s > pts.back().first))
      throw EstimationError("overall_fidelity: durations must be positive and increasing");
    pts.push_back({p.duration_s, p.infidelity});
  }
  const double tau = tau_reset_s;
  auto e = [&](double d) { return std::exp(-d / tau); };
  double loss = 0.0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const auto [a, fa] = pts[k];
    const auto [b, fb] = pts[k + 1];
    const double beta = (fb - fa) / (b - a);
    const double alpha = fa - beta * a;
    loss += alpha * (e(a) - e(b)) + beta * ((a + tau) * e(a) - (b + tau) * e(b));
  }
  loss += pts.back().second * e(pts.back().first);
  return 1.0 - loss;
}

inline double overall_fidelity(const InfidelityCurve& curve, double tau_reset_s) {
  return overall_fidelity(curve.points, tau_reset_s);
}

// ---------------------------------------------------------------------------
// Reporting utilities

struct Fraction {
  double value = 0.0;
  double sigma = 0.0;
  std::size_t hits = 0;
  std::size_t total = 0;
};

/// Fraction of durations below `threshold_s`, with binomial error.
inline Fraction short_event_fraction(const std::vector<double>& durations_s, double threshold_s) {
  if (durations_s.empty()) throw EstimationError("short_event_fraction: no durations");
  Fraction f;
  f.total = durations_s.size();
  f.hits = static_cast<std::size_t>(
      std::count_if(durations_s.begin(), durations_s.end(), [&](double d) { return d < threshold_s; }));
  const double n = static_cast<double>(f.total);
  f.value = static_cast<double>(f.hits) / n;
  f.sigma = std::sqrt(f.value * (1.0 - f.value) / n);
  return f;
}

inline double expected_short_fraction(double threshold_s, double tau_reset_s) {
  detail::require_positive(tau_reset_s, "reset time constant");
  return -std::expm1(-threshold_s / tau_reset_s);
}

struct BackgroundContamination {
  double expected_background = 0.0;
  double expected_background_sigma = 0.0;
  double ion_fraction = 0.0;  // share of observed events not explained by background
};

/// Expected background in a resonant run from the control probability.
inline BackgroundContamination background_contamination(double control_probability, std::uint64_t cycles,
                                                        std::size_t observed_events) {
  if (!(control_probability >= 0.0 && control_probability <= 1.0))
    throw DomainError("control probability must lie in [0, 1]");
  BackgroundContamination b;
  b.expected_background = control_probability * static_cast<double>(cycles);
  b.expected_background_sigma = std::sqrt(b.expected_background * (1.0 - control_probability));
  if (observed_events > 0)
    b.ion_fraction = std::clamp(1.0 - b.expected_background / static_cast<double>(observed_events), 0.0, 1.0);
  return b;
}

}  // namespace rfion

#endif  // RFION_ESTIMATE_HPP
