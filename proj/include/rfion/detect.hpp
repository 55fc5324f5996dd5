#ifndef RFION_DETECT_HPP
#define RFION_DETECT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <boost/math/tools/minima.hpp>

#include "rfion/dynamics.hpp"
#include "rfion/error.hpp"
#include "rfion/filter.hpp"
#include "rfion/parallel.hpp"
#include "rfion/rng.hpp"
#include "rfion/signal.hpp"

namespace rfion {

struct DetectorConfig {
  double threshold_fraction = 0.5;
  double release_fraction = 0.3;
  double smoothing_s = 0.0;  // centred moving average before thresholding; 0 = raw bandwidth

  void validate() const {
    if (!(threshold_fraction > 0.0 && threshold_fraction < 1.0))
      throw ConfigError("threshold fraction must lie in (0, 1)");
    if (!(release_fraction >= 0.0 && release_fraction <= threshold_fraction))
      throw ConfigError("release fraction must lie in [0, threshold fraction]");
    detail::require_non_negative(smoothing_s, "detector smoothing");
  }
};

/// Where the signal lives in the IQ plane: deviation along `angle_rad` from
/// the neutral baseline, with `contrast_v` the expected ionized deviation.
struct SignalGeometry {
  double angle_rad = 0.0;
  double baseline_v = 0.0;
  double contrast_v = 0.0;

  static SignalGeometry from_config(const TraceConfig& cfg) {
    return {cfg.iq_angle_rad, cfg.level_neutral_v, cfg.contrast_v()};
  }

  std::vector<double> deviation(const IQTrace& tr) const {
    auto p = tr.projection(angle_rad);
    for (auto& v : p) v -= baseline_v;
    return p;
  }
};

/// Replaces the baseline with the mean projection over the last `window_s`
/// before the trigger (t < 0). Unchanged if the trace has no such samples.
inline SignalGeometry with_pre_trigger_baseline(SignalGeometry g, const IQTrace& tr, double window_s = 5e-6) {
  const auto p = tr.projection(g.angle_rad);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < tr.size(); ++k) {
    const double t = tr.time(k);
    if (t < 0.0 && t >= -window_s) {
      sum += p[k];
      ++n;
    }
  }
  if (n > 0) g.baseline_v = sum / static_cast<double>(n);
  return g;
}

/// Interval during which the trace sat at the ionized level. `closed` is
/// false when the trace ended before the level was released.
struct CandidateInterval {
  double start_s;
  double end_s;
  bool closed;
};

namespace detail {

inline std::vector<double> centred_moving_average(const std::vector<double>& x, std::size_t width) {
  if (width <= 1 || x.empty()) return x;
  const std::size_t half = width / 2;
  std::vector<double> prefix(x.size() + 1, 0.0);
  std::partial_sum(x.begin(), x.end(), prefix.begin() + 1);
  std::vector<double> out(x.size());
  for (std::size_t n = 0; n < x.size(); ++n) {
    const std::size_t lo = n >= half ? n - half : 0;
    const std::size_t hi = std::min(x.size(), n + half + 1);
    out[n] = (prefix[hi] - prefix[lo]) / static_cast<double>(hi - lo);
  }
  return out;
}

}  // namespace detail

/// Two-level discrimination with hysteresis on the deviation normalised to
/// the contrast: enter the ionized level above `threshold_fraction`, leave it
/// below `release_fraction`. Times are the first sample past each crossing.
inline std::vector<CandidateInterval> find_events(const IQTrace& tr, const SignalGeometry& g,
                                                  const DetectorConfig& dc = {}) {
  dc.validate();
  if (g.contrast_v == 0.0) throw DomainError("find_events: contrast must be non-zero");
  auto x = g.deviation(tr);
  for (auto& v : x) v /= g.contrast_v;
  if (dc.smoothing_s > 0.0)
    x = detail::centred_moving_average(
        x, static_cast<std::size_t>(std::max<long long>(1, std::llround(dc.smoothing_s / tr.dt_s))));

  std::vector<CandidateInterval> out;
  bool high = false;
  double start = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    if (!high && x[n] > dc.threshold_fraction) {
      high = true;
      start = tr.time(n);
    } else if (high && x[n] < dc.release_fraction) {
      high = false;
      out.push_back({start, tr.time(n), true});
    }
  }
  if (high) out.push_back({start, tr.time(x.size() - 1), false});
  return out;
}

inline std::vector<CandidateInterval> find_events(const IQTrace& tr, const SignalGeometry& g,
                                                  double threshold_fraction) {
  DetectorConfig dc;
  dc.threshold_fraction = threshold_fraction;
  dc.release_fraction = std::min(dc.release_fraction, threshold_fraction);
  return find_events(tr, g, dc);
}

/// Template for the ionization-time fit: filtered (transient + steps).
/// The transient is pinned; the step amplitude is free unless pinned to
/// `contrast_v`.
struct FitModel {
  double contrast_v = -0.012;
  bool amplitude_pinned = false;
  double transient_amplitude_v = 0.0;
  double transient_onset_s = 0.0;
  double transient_decay_s = 150e-9;
  double filter_cutoff_hz = 2e6;
  int filter_order = 1;
  bool fit_reset = true;
  double fit_start_s = -std::numeric_limits<double>::infinity();
  double lookback_s = 0.4e-6;  // t_ion search before the threshold crossing
  double lookahead_s = 0.3e-6;
  double data_lookback_s = 2e-6;  // samples fitted before the crossing

  double rise_time_s() const { return 0.35 / filter_cutoff_hz; }

  static FitModel from_configs(const TraceConfig& cfg, const LaserTransient& lt, const PulseSchedule& s) {
    FitModel m;
    m.contrast_v = cfg.contrast_v();
    m.transient_amplitude_v = lt.nominal_amplitude(s);
    m.transient_onset_s = lt.onset_s(s);
    m.transient_decay_s = lt.decay_time_s;
    m.filter_cutoff_hz = cfg.filter_cutoff_hz;
    m.filter_order = cfg.filter_order;
    m.fit_start_s = 0.0;
    return m;
  }
};

/// Search ranges for t_ion (and t_reset) and the span of samples fitted.
struct FitWindow {
  double search_lo_s;
  double search_hi_s;
  double data_lo_s;
  double data_hi_s;
  std::optional<std::pair<double, double>> reset_search;
  double reset_guess_s = 0.0;  // starting point of the alternating search
};

struct DetectionResult {
  bool detected = false;
  double t_ion_s = std::numeric_limits<double>::quiet_NaN();
  double sigma_t_s = std::numeric_limits<double>::quiet_NaN();
  bool reset_observed = false;
  double t_reset_s = std::numeric_limits<double>::quiet_NaN();
  double duration_s = std::numeric_limits<double>::quiet_NaN();
  double amplitude_v = 0.0;
  double residual = std::numeric_limits<double>::quiet_NaN();
  std::string diagnostic;
};

/// Fit window around a candidate; `next_start_s` bounds the data so a
/// following event does not leak into the fit.
inline FitWindow window_for(const CandidateInterval& c, const IQTrace& tr, const FitModel& m,
                            double next_start_s = std::numeric_limits<double>::infinity()) {
  const double t_first = tr.time(0), t_last = tr.time(tr.size() - 1);
  FitWindow w;
  w.data_lo_s = std::max({t_first, m.fit_start_s, c.start_s - m.data_lookback_s});
  w.search_lo_s = std::max(w.data_lo_s, c.start_s - m.lookback_s);
  w.search_hi_s = std::min(t_last, c.closed ? std::min(c.end_s, c.start_s + m.lookahead_s) : c.start_s + m.lookahead_s);
  w.data_hi_s = std::min(t_last, next_start_s - m.lookback_s);  // stop before the next event
  if (c.closed && m.fit_reset) {
    w.reset_search = std::pair{std::max(c.start_s, c.end_s - m.lookback_s), std::min(w.data_hi_s, c.end_s + m.lookahead_s)};
    w.reset_guess_s = std::clamp(c.end_s - 0.5 * m.rise_time_s(), w.reset_search->first, w.reset_search->second);
  } else if (c.closed) {
    w.data_hi_s = std::min(w.data_hi_s, c.end_s - m.lookback_s);
  }
  w.data_hi_s = std::max(w.data_hi_s, std::min(t_last, c.end_s));
  return w;
}

namespace detail {

class StepFitter {
 public:
  StepFitter(const IQTrace& tr, const SignalGeometry& g, const FitModel& m, const FitWindow& w)
      : tr_(tr), m_(m), dt_(tr.dt_s) {
    n0_ = tr.index_at(w.data_lo_s);
    n1_ = std::min(tr.size(), tr.index_at(w.data_hi_s) + 1);
    const auto dev = g.deviation(tr);
    z_.assign(dev.begin() + static_cast<std::ptrdiff_t>(n0_), dev.begin() + static_cast<std::ptrdiff_t>(n1_));
    if (m.transient_amplitude_v != 0.0) {
      LowPassFilter f(m.filter_cutoff_hz, 1.0 / dt_, m.filter_order);
      f.reset(0.0);
      for (std::size_t n = 0; n < n1_; ++n) {
        const double v = f.step(transient_input(tr.time(n), dt_, m.transient_onset_s, m.transient_decay_s,
                                                m.transient_amplitude_v));
        if (n >= n0_) z_[n - n0_] -= v;
      }
    }
    s_.resize(z_.size());
  }

  std::size_t samples() const { return z_.size(); }
  double data_start() const { return tr_.time(n0_); }

  /// Residual sum of squares at (t_ion, t_reset); fills `amplitude`.
  double cost(double t_ion, std::optional<double> t_reset, double* amplitude = nullptr) {
    LowPassFilter f(m_.filter_cutoff_hz, 1.0 / dt_, m_.filter_order);
    f.reset(0.0);
    double ss = 0.0, sz = 0.0, zz = 0.0;
    for (std::size_t k = 0; k < z_.size(); ++k) {
      const double t = tr_.time(n0_ + k);
      double x = fraction_after(t, dt_, t_ion);
      if (t_reset) x -= fraction_after(t, dt_, *t_reset);
      s_[k] = f.step(x);
      ss += s_[k] * s_[k];
      sz += s_[k] * z_[k];
      zz += z_[k] * z_[k];
    }
    double a = m_.amplitude_pinned ? m_.contrast_v : (ss > 0.0 ? sz / ss : 0.0);
    if (amplitude) *amplitude = a;
    return zz - 2.0 * a * sz + a * a * ss;
  }

 private:
  const IQTrace& tr_;
  const FitModel& m_;
  double dt_;
  std::size_t n0_ = 0, n1_ = 0;
  std::vector<double> z_;
  std::vector<double> s_;
};

/// Grid scan at one-sample spacing followed by Brent refinement.
template <typename Cost>
std::pair<double, double> minimise_1d(Cost&& cost, double lo, double hi, double step) {
  double best_x = lo, best_c = std::numeric_limits<double>::infinity();
  const auto n = static_cast<std::size_t>(std::ceil((hi - lo) / step));
  for (std::size_t k = 0; k <= n; ++k) {
    const double x = std::min(hi, lo + static_cast<double>(k) * step);
    const double c = cost(x);
    if (c < best_c) {
      best_c = c;
      best_x = x;
    }
  }
  const double a = std::max(lo, best_x - step), b = std::min(hi, best_x + step);
  if (!(b > a)) return {best_x, best_c};
  // Brent's tolerance has an absolute floor, so search in units of `step`.
  std::uintmax_t iters = 200;
  const auto r = boost::math::tools::brent_find_minima([&](double u) { return cost(a + u * step); }, 0.0,
                                                       (b - a) / step, 40, iters);
  if (r.second <= best_c) return {a + r.first * step, r.second};
  return {best_x, best_c};
}

}  // namespace detail

/// Separable least-squares fit of the ionization time (and reset time when
/// the window has a reset search range).
inline DetectionResult fit_ionization_time(const IQTrace& tr, const SignalGeometry& g, const FitWindow& w,
                                           const FitModel& m) {
  if (tr.size() < 2) throw DomainError("fit_ionization_time: trace too short");
  if (!(w.search_hi_s > w.search_lo_s) || !(w.data_hi_s - w.data_lo_s >= m.rise_time_s()))
    throw DomainError("fit_ionization_time: window shorter than the filter rise time");

  DetectionResult r;
  detail::StepFitter fitter(tr, g, m, w);
  const double dt = tr.dt_s;
  const double lo = std::max(w.search_lo_s, fitter.data_start() - dt);

  std::optional<double> t_reset;
  if (w.reset_search) t_reset = w.reset_guess_s;
  double t_ion = lo;
  double best = 0.0;
  const int rounds = w.reset_search ? 3 : 1;
  for (int round = 0; round < rounds; ++round) {
    const double hi = t_reset ? std::min(w.search_hi_s, *t_reset - dt) : w.search_hi_s;
    if (!(hi > lo)) break;
    std::tie(t_ion, best) = detail::minimise_1d([&](double t) { return fitter.cost(t, t_reset); }, lo, hi, dt);
    if (w.reset_search) {
      const double rlo = std::max(w.reset_search->first, t_ion + dt);
      const double rhi = w.reset_search->second;
      if (rhi > rlo) {
        double tr_best;
        std::tie(tr_best, best) =
            detail::minimise_1d([&](double t) { return fitter.cost(t_ion, t); }, rlo, rhi, dt);
        t_reset = tr_best;
      }
    }
  }

  double amplitude = 0.0;
  best = fitter.cost(t_ion, t_reset, &amplitude);
  r.t_ion_s = t_ion;
  r.amplitude_v = amplitude;
  r.residual = std::sqrt(std::max(best, 0.0));
  if (t_reset) {
    r.reset_observed = true;
    r.t_reset_s = *t_reset;
    r.duration_s = *t_reset - t_ion;
  }

  if (!std::isfinite(best) || !std::isfinite(t_ion)) {
    r.diagnostic = "fit did not converge";
    return r;
  }
  if (amplitude == 0.0 || std::signbit(amplitude) != std::signbit(m.contrast_v)) {
    r.diagnostic = "fitted step has the wrong sign";
    return r;
  }

  const int k = 1 + (m.amplitude_pinned ? 0 : 1) + (t_reset ? 1 : 0);
  const double dof = static_cast<double>(fitter.samples()) - k;
  const double s2 = dof > 0 ? best / dof : best;
  double curvature = 0.0;
  for (double h : {dt / 4.0, dt}) {
    curvature = (fitter.cost(t_ion + h, t_reset) - 2.0 * best + fitter.cost(t_ion - h, t_reset)) / (h * h);
    if (curvature > 0.0) break;
  }
  r.sigma_t_s = curvature > 0.0 && s2 > 0.0 ? std::sqrt(2.0 * s2 / curvature) : dt;
  if (!(r.sigma_t_s > 0.0)) r.sigma_t_s = std::numeric_limits<double>::min();
  r.detected = true;
  return r;
}

inline DetectionResult fit_ionization_time(const IQTrace& tr, const SignalGeometry& g, const CandidateInterval& c,
                                           const FitModel& m) {
  return fit_ionization_time(tr, g, window_for(c, tr, m), m);
}

/// Copy of the trace with the model's nominal filtered transient removed
/// along the signal direction.
inline IQTrace remove_nominal_transient(const IQTrace& tr, const SignalGeometry& g, const FitModel& m) {
  IQTrace out = tr;
  if (m.transient_amplitude_v == 0.0) return out;
  LowPassFilter f(m.filter_cutoff_hz, 1.0 / tr.dt_s, m.filter_order);
  f.reset(0.0);
  const double c = std::cos(g.angle_rad), s = std::sin(g.angle_rad);
  for (std::size_t n = 0; n < tr.size(); ++n) {
    const double v =
        f.step(transient_input(tr.time(n), tr.dt_s, m.transient_onset_s, m.transient_decay_s, m.transient_amplitude_v));
    out.i[n] -= v * c;
    out.q[n] -= v * s;
  }
  return out;
}

/// find_events (on the trace with the nominal transient removed) followed by
/// a fit of every candidate.
inline std::vector<DetectionResult> detect_events(const IQTrace& tr, const SignalGeometry& g,
                                                  const DetectorConfig& dc, const FitModel& m) {
  const auto cands = find_events(remove_nominal_transient(tr, g, m), g, dc);
  std::vector<DetectionResult> out;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const double next =
        k + 1 < cands.size() ? cands[k + 1].start_s : std::numeric_limits<double>::infinity();
    try {
      out.push_back(fit_ionization_time(tr, g, window_for(cands[k], tr, m, next), m));
    } catch (const DomainError& e) {
      DetectionResult r;
      r.diagnostic = e.what();
      out.push_back(r);
    }
  }
  return out;
}

inline void write_detection_header(std::ostream& os) {
  os << "cycle_id,detected,t_ion_s,sigma_t_s,duration_s,amplitude_V,residual\n";
}

inline void write_detection_record(std::ostream& os, std::uint64_t cycle_id, const DetectionResult& r) {
  const auto old = os.precision(17);
  os << cycle_id << ',' << (r.detected ? 1 : 0) << ',' << r.t_ion_s << ',' << r.sigma_t_s << ','
     << r.duration_s << ',' << r.amplitude_v << ',' << r.residual << '\n';
  os.precision(old);
}

// ---------------------------------------------------------------------------
// Time resolution

struct ResolutionSetup {
  PulseSchedule schedule;
  TraceConfig trace;
  LaserTransient transient;
  double search_lo_s = 0.0;
  double search_margin_s = 0.5e-6;  // search stops this far before the record end
};

struct ResolutionPoint {
  double t_ion_s;
  double rms_error_s;
  double rms_error_sigma_s;   // bootstrap
  double median_sigma_t_s;    // per-fit curvature estimate, for comparison
  std::size_t fits;
  std::size_t failed;
};

/// Monte Carlo RMS of (fitted - true) t_ion for events injected at each grid
/// time (plus a uniform sub-sample offset), with bootstrap errors.
inline std::vector<ResolutionPoint> time_resolution_curve(const std::vector<double>& grid_s,
                                                          const ResolutionSetup& setup, std::size_t n_mc,
                                                          std::uint64_t seed, unsigned threads = 0,
                                                          std::size_t bootstrap = 200) {
  if (n_mc < 2) throw DomainError("time_resolution_curve needs at least 2 Monte Carlo fits");
  const auto geometry = SignalGeometry::from_config(setup.trace);
  const auto model = FitModel::from_configs(setup.trace, setup.transient, setup.schedule);
  const double dt = setup.trace.dt_s();
  const double record_end = setup.trace.record_start_s + setup.trace.record_length_s;

  std::vector<ResolutionPoint> out(grid_s.size());
  for (std::size_t gi = 0; gi < grid_s.size(); ++gi) {
    std::vector<double> err(n_mc, std::numeric_limits<double>::quiet_NaN());
    std::vector<double> sig(n_mc, std::numeric_limits<double>::quiet_NaN());
    parallel_for(n_mc, threads, [&](std::size_t k) {
      const std::uint64_t id = gi * n_mc + k;
      Rng rng(seed_fanout(seed, Stage::resolution, id));
      const double t_true = grid_s[gi] + uniform01(rng) * dt;
      EventTimeline tl;
      tl.events = {{t_true * (1.0 - 1e-9), Transition::excite}, {t_true, Transition::relax_ionize}};
      const auto tr = synthesize_trace(tl, setup.schedule, setup.trace, setup.transient,
                                       seed_fanout(seed, Stage::noise, id));
      const auto g = with_pre_trigger_baseline(geometry, tr);
      FitWindow w{setup.search_lo_s, record_end - setup.search_margin_s, setup.search_lo_s, record_end, std::nullopt};
      const auto r = fit_ionization_time(tr, g, w, model);
      if (r.detected) {
        err[k] = r.t_ion_s - t_true;
        sig[k] = r.sigma_t_s;
      }
    });

    std::vector<double> e2, sg;
    for (std::size_t k = 0; k < n_mc; ++k)
      if (std::isfinite(err[k])) {
        e2.push_back(err[k] * err[k]);
        sg.push_back(sig[k]);
      }
    ResolutionPoint p{grid_s[gi], std::numeric_limits<double>::quiet_NaN(), 0.0,
                      std::numeric_limits<double>::quiet_NaN(), e2.size(), n_mc - e2.size()};
    if (!e2.empty()) {
      const double mean = std::accumulate(e2.begin(), e2.end(), 0.0) / static_cast<double>(e2.size());
      p.rms_error_s = std::sqrt(mean);
      std::nth_element(sg.begin(), sg.begin() + static_cast<std::ptrdiff_t>(sg.size() / 2), sg.end());
      p.median_sigma_t_s = sg[sg.size() / 2];
      Rng brng(seed_fanout(seed, Stage::bootstrap, gi));
      std::uniform_int_distribution<std::size_t> pick(0, e2.size() - 1);
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < bootstrap; ++b) {
        double m = 0.0;
        for (std::size_t j = 0; j < e2.size(); ++j) m += e2[pick(brng)];
        const double rms = std::sqrt(m / static_cast<double>(e2.size()));
        s1 += rms;
        s2 += rms * rms;
      }
      const double bn = static_cast<double>(bootstrap);
      p.rms_error_sigma_s = bootstrap > 1 ? std::sqrt(std::max(0.0, (s2 - s1 * s1 / bn) / (bn - 1.0))) : 0.0;
    }
    out[gi] = p;
  }
  return out;
}

}  // namespace rfion

#endif  // RFION_DETECT_HPP
