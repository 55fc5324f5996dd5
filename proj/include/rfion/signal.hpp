#ifndef RFION_SIGNAL_HPP
#define RFION_SIGNAL_HPP

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "rfion/circuit.hpp"
#include "rfion/dynamics.hpp"
#include "rfion/error.hpp"
#include "rfion/filter.hpp"
#include "rfion/rng.hpp"
#include "rfion/snr_law.hpp"

namespace rfion {

/// Additive readout noise, injected before the analog low-pass.
///
/// White Gaussian noise per sample plus an optional symmetric random
/// telegraph term (+/- amplitude) whose autocorrelation decays with
/// `telegraph_correlation_s`; both act independently on I and Q.
struct NoiseModel {
  double white_sigma_v = 0.0;
  double telegraph_amplitude_v = 0.0;
  double telegraph_correlation_s = 1e-6;

  bool silent() const { return white_sigma_v == 0.0 && telegraph_amplitude_v == 0.0; }
};

struct TraceConfig {
  double sample_rate_hz = 50e6;
  double filter_cutoff_hz = 2e6;
  int filter_order = 1;
  NoiseModel noise;
  double level_neutral_v = 0.150;
  double level_ionized_v = 0.138;
  double iq_angle_rad = 0.6;
  double record_start_s = -5e-6;
  double record_length_s = 10e-6;

  double dt_s() const { return 1.0 / sample_rate_hz; }
  double contrast_v() const { return level_ionized_v - level_neutral_v; }
  std::size_t sample_count() const {
    return static_cast<std::size_t>(std::llround(record_length_s * sample_rate_hz));
  }
  LowPassFilter make_filter() const { return {filter_cutoff_hz, sample_rate_hz, filter_order}; }

  void validate() const {
    detail::require_positive(sample_rate_hz, "sample rate");
    detail::require_positive(filter_cutoff_hz, "filter cutoff");
    if (!(sample_rate_hz > 2.0 * filter_cutoff_hz))
      throw ConfigError("sample rate must exceed twice the filter cutoff");
    if (filter_order < 1) throw ConfigError("filter order must be >= 1");
    detail::require_non_negative(noise.white_sigma_v, "white noise sigma");
    detail::require_non_negative(noise.telegraph_amplitude_v, "telegraph noise amplitude");
    detail::require_positive(noise.telegraph_correlation_s, "telegraph correlation time");
    detail::require_positive(record_length_s, "record length");
  }
};

/// Frequency-independent artifact caused by the light pulse.
///
/// Instant rise at `pulse arrival + onset_delay_s`, exponential decay. The
/// nominal amplitude scales linearly with pulse energy relative to the
/// reference pulse; each cycle draws a relative amplitude error with standard
/// deviation `amplitude_jitter`.
struct LaserTransient {
  bool enabled = true;
  double jump_amplitude_v = 0.012;
  double reference_energy_mw_s = 7.6 * 100e-9;
  double onset_delay_s = 0.3e-6;
  double decay_time_s = 150e-9;
  double impact_window_s = 1.0e-6;
  double amplitude_jitter = 0.25;

  double nominal_amplitude(const PulseSchedule& s) const {
    if (!enabled || s.power_mw == 0.0) return 0.0;
    return jump_amplitude_v * s.pulse_energy_mw_s() / reference_energy_mw_s;
  }
  double onset_s(const PulseSchedule& s) const { return s.pulse_start_s + onset_delay_s; }
  double impact_end_s(const PulseSchedule& s) const { return s.pulse_start_s + impact_window_s; }

  void validate(const PulseSchedule& s) const {
    detail::require_positive(decay_time_s, "transient decay time");
    detail::require_positive(reference_energy_mw_s, "transient reference energy");
    detail::require_non_negative(onset_delay_s, "transient onset delay");
    detail::require_non_negative(amplitude_jitter, "transient amplitude jitter");
    if (impact_window_s < s.pulse_length_s)
      throw DomainError("laser impact window must cover the pulse");
  }
};

struct TraceMetadata {
  std::uint64_t cycle_id = 0;
  std::uint64_t seed = 0;
  std::string note;
  bool operator==(const TraceMetadata&) const = default;
};

/// Uniformly sampled demodulated record. Sample n is taken at
/// start_s + n dt_s and reflects the input averaged over the preceding dt.
struct IQTrace {
  double start_s = 0.0;
  double dt_s = 0.0;
  std::vector<double> i;
  std::vector<double> q;
  TraceMetadata metadata;

  std::size_t size() const { return i.size(); }
  double time(std::size_t n) const { return start_s + static_cast<double>(n) * dt_s; }
  double magnitude(std::size_t n) const { return std::hypot(i[n], q[n]); }

  /// Projection of each sample onto the unit vector at `angle_rad`.
  std::vector<double> projection(double angle_rad) const {
    const double c = std::cos(angle_rad), s = std::sin(angle_rad);
    std::vector<double> out(size());
    for (std::size_t n = 0; n < size(); ++n) out[n] = c * i[n] + s * q[n];
    return out;
  }

  /// Index of the first sample at or after time t (clamped to [0, size]).
  std::size_t index_at(double t) const {
    const double x = std::ceil((t - start_s) / dt_s - 1e-9);
    if (x <= 0.0) return 0;
    return std::min(size(), static_cast<std::size_t>(x));
  }

  bool operator==(const IQTrace&) const = default;
};

namespace detail {

/// Fraction of the sample interval (t_n - dt, t_n] lying after t0.
inline double fraction_after(double t_n, double dt, double t0) {
  return std::clamp((t_n - t0) / dt, 0.0, 1.0);
}

/// Mean over (t_n - dt, t_n] of exp(-(t - onset)/tau) for t >= onset.
inline double box_average_exponential(double t_n, double dt, double onset, double tau) {
  const double lo = std::max(t_n - dt, onset);
  if (!(t_n > lo)) return 0.0;
  return tau * (std::exp(-(lo - onset) / tau) - std::exp(-(t_n - onset) / tau)) / dt;
}

/// Mean over the sample interval of the ionized-state indicator.
inline double ionized_fraction(double t_n, double dt, std::span<const IonizedInterval> intervals) {
  double f = 0.0;
  for (const auto& iv : intervals) {
    if (iv.start_s >= t_n) break;
    f += fraction_after(t_n, dt, iv.start_s) - fraction_after(t_n, dt, iv.end_s);
  }
  return f;
}

/// Symmetric random telegraph chain sampled every dt.
class TelegraphNoise {
 public:
  TelegraphNoise(double amplitude, double correlation_s, double dt, Rng& rng)
      : amplitude_(amplitude),
        flip_probability_(0.5 * -std::expm1(-dt / correlation_s)),
        sign_(uniform01(rng) < 0.5 ? -1.0 : 1.0) {}

  double next(Rng& rng) {
    if (uniform01(rng) < flip_probability_) sign_ = -sign_;
    return sign_ * amplitude_;
  }

 private:
  double amplitude_;
  double flip_probability_;
  double sign_;
};

}  // namespace detail

/// Noise-free, unfiltered deviation (volts, along the signal direction) of
/// the transient for one sample interval.
inline double transient_input(double t_n, double dt, double onset_s, double decay_s, double amplitude) {
  if (amplitude == 0.0) return 0.0;
  return amplitude * detail::box_average_exponential(t_n, dt, onset_s, decay_s);
}

/// Builds the readout record of one cycle: charge-state levels and laser
/// transient along the response direction, plus noise, then low-pass filtered.
inline IQTrace synthesize_trace(const EventTimeline& tl, const PulseSchedule& s, const TraceConfig& cfg,
                                const LaserTransient& lt, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double dt = cfg.dt_s();
  const std::size_t n_samples = cfg.sample_count();

  double transient_amp = lt.nominal_amplitude(s);
  if (transient_amp != 0.0 && lt.amplitude_jitter > 0.0)
    transient_amp *= 1.0 + lt.amplitude_jitter * std::normal_distribution<double>()(rng);
  const double onset = lt.onset_s(s);

  const auto intervals = tl.ionized_intervals();
  const double c = std::cos(cfg.iq_angle_rad), sn = std::sin(cfg.iq_angle_rad);

  IQTrace tr;
  tr.start_s = cfg.record_start_s;
  tr.dt_s = dt;
  tr.metadata.seed = seed;
  tr.i.resize(n_samples);
  tr.q.resize(n_samples);

  std::normal_distribution<double> white(0.0, 1.0);
  const NoiseModel& nm = cfg.noise;
  std::optional<detail::TelegraphNoise> tel_i, tel_q;
  if (nm.telegraph_amplitude_v > 0.0) {
    tel_i.emplace(nm.telegraph_amplitude_v, nm.telegraph_correlation_s, dt, rng);
    tel_q.emplace(nm.telegraph_amplitude_v, nm.telegraph_correlation_s, dt, rng);
  }

  for (std::size_t n = 0; n < n_samples; ++n) {
    const double t = tr.time(n);
    const double level = cfg.level_neutral_v +
                         cfg.contrast_v() * detail::ionized_fraction(t, dt, intervals) +
                         transient_input(t, dt, onset, lt.decay_time_s, transient_amp);
    double ni = 0.0, nq = 0.0;
    if (nm.white_sigma_v > 0.0) {
      ni += nm.white_sigma_v * white(rng);
      nq += nm.white_sigma_v * white(rng);
    }
    if (tel_i) {
      ni += tel_i->next(rng);
      nq += tel_q->next(rng);
    }
    tr.i[n] = level * c + ni;
    tr.q[n] = level * sn + nq;
  }

  auto filter = cfg.make_filter();
  // Start from the noiseless neutral level so the record opens in steady state.
  filter.reset(cfg.level_neutral_v * c);
  for (auto& v : tr.i) v = filter.step(v);
  filter.reset(cfg.level_neutral_v * sn);
  for (auto& v : tr.q) v = filter.step(v);
  return tr;
}

/// Long filtered record at a fixed charge state, for SNR measurements. The
/// noise is run through the filter for `burn_in` samples before recording so
/// the output is stationary from the first sample.
inline IQTrace synthesize_stationary(ChargeState level, const TraceConfig& cfg, std::size_t n_samples,
                                     std::uint64_t seed, std::size_t burn_in = 200) {
  cfg.validate();
  Rng rng(seed);
  const double dt = cfg.dt_s();
  const double v = level == ChargeState::ionized ? cfg.level_ionized_v : cfg.level_neutral_v;
  const double c = std::cos(cfg.iq_angle_rad), sn = std::sin(cfg.iq_angle_rad);
  const NoiseModel& nm = cfg.noise;
  std::normal_distribution<double> white(0.0, 1.0);
  detail::TelegraphNoise tel_i(nm.telegraph_amplitude_v, nm.telegraph_correlation_s, dt, rng);
  detail::TelegraphNoise tel_q(nm.telegraph_amplitude_v, nm.telegraph_correlation_s, dt, rng);
  auto fi = cfg.make_filter(), fq = cfg.make_filter();
  fi.reset(v * c);
  fq.reset(v * sn);

  IQTrace tr;
  tr.dt_s = dt;
  tr.metadata.seed = seed;
  tr.i.resize(n_samples);
  tr.q.resize(n_samples);
  for (std::size_t n = 0; n < burn_in + n_samples; ++n) {
    const double ni = nm.white_sigma_v * white(rng) + tel_i.next(rng);
    const double nq = nm.white_sigma_v * white(rng) + tel_q.next(rng);
    const double yi = fi.step(v * c + ni);
    const double yq = fq.step(v * sn + nq);
    if (n >= burn_in) {
      tr.i[n - burn_in] = yi;
      tr.q[n - burn_in] = yq;
    }
  }
  return tr;
}

/// Low-pass filters I and Q independently; the filter starts in steady state
/// at the first sample.
inline IQTrace lowpass(const IQTrace& in, double cutoff_hz, int order) {
  LowPassFilter filter(cutoff_hz, 1.0 / in.dt_s, order);
  IQTrace out = in;
  out.i = filter.apply(in.i);
  out.q = filter.apply(in.q);
  return out;
}

// ---------------------------------------------------------------------------
// DC comparison channel

struct DcChannelConfig {
  double bandwidth_hz = 2e3;
  double sample_rate_hz = 1e6;
  double current_neutral_a = 100e-12;
  double current_ionized_a = 80e-12;
  double record_start_s = 0.0;
  double record_length_s = 2e-3;
};

struct DcTrace {
  double start_s = 0.0;
  double dt_s = 0.0;
  std::vector<double> current_a;
  double time(std::size_t n) const { return start_s + static_cast<double>(n) * dt_s; }
};

/// Charge-state current record through a first-order filter at `bandwidth_hz`.
inline DcTrace dc_channel(const EventTimeline& tl, const DcChannelConfig& cfg) {
  detail::require_positive(cfg.bandwidth_hz, "DC bandwidth");
  LowPassFilter filter(cfg.bandwidth_hz, cfg.sample_rate_hz, 1);
  DcTrace out;
  out.start_s = cfg.record_start_s;
  out.dt_s = 1.0 / cfg.sample_rate_hz;
  const auto n = static_cast<std::size_t>(std::llround(cfg.record_length_s * cfg.sample_rate_hz));
  const auto intervals = tl.ionized_intervals();
  out.current_a.resize(n);
  filter.reset(cfg.current_neutral_a);
  for (std::size_t k = 0; k < n; ++k) {
    const double f = detail::ionized_fraction(out.time(k), out.dt_s, intervals);
    out.current_a[k] = filter.step(cfg.current_neutral_a + (cfg.current_ionized_a - cfg.current_neutral_a) * f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Noise calibration

inline const std::vector<double>& default_snr_integration_times() {
  static const std::vector<double> t{0.25e-6, 0.5e-6, 1e-6, 2e-6, 4e-6};
  return t;
}

/// Target of the SNR scaling law. Without `t0_s` only the white level is
/// calibrated and t0 is whatever the filter produces.
struct SnrTarget {
  double snr_1us = 9.6;
  std::optional<double> t0_s = 0.5e-6;
};

struct NoiseCalibration {
  NoiseModel noise;
  SnrFit predicted;  // law fitted to the calibrated model's expected SNR
};

namespace detail {

enum class UnitNoise { white, telegraph };

/// Variance of boxcar means of unit-amplitude noise after the trace filter,
/// for each integration time. Non-overlapping windows on one long stream.
inline std::vector<double> unit_window_variances(const TraceConfig& cfg, UnitNoise kind,
                                                 const std::vector<double>& t_int,
                                                 std::size_t min_windows, std::uint64_t seed) {
  const double dt = cfg.dt_s();
  std::vector<std::size_t> width;
  std::size_t longest = 0;
  for (double t : t_int) {
    const auto w = static_cast<std::size_t>(std::max<long long>(1, std::llround(t / dt)));
    width.push_back(w);
    longest = std::max(longest, w);
  }
  const std::size_t total = longest * min_windows;

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  TelegraphNoise tel(1.0, cfg.noise.telegraph_correlation_s, dt, rng);
  auto filter = cfg.make_filter();
  filter.reset(0.0);
  // Settle the filter (and telegraph chain) before measuring.
  for (int k = 0; k < 2000; ++k) filter.step(kind == UnitNoise::white ? gauss(rng) : tel.next(rng));

  const std::size_t m = width.size();
  std::vector<double> acc(m, 0.0), sum(m, 0.0), sum2(m, 0.0);
  std::vector<std::size_t> fill(m, 0), count(m, 0);
  for (std::size_t n = 0; n < total; ++n) {
    const double y = filter.step(kind == UnitNoise::white ? gauss(rng) : tel.next(rng));
    for (std::size_t k = 0; k < m; ++k) {
      acc[k] += y;
      if (++fill[k] == width[k]) {
        const double mean = acc[k] / static_cast<double>(width[k]);
        sum[k] += mean;
        sum2[k] += mean * mean;
        ++count[k];
        acc[k] = 0.0;
        fill[k] = 0;
      }
    }
  }
  std::vector<double> var(m);
  for (std::size_t k = 0; k < m; ++k) {
    const double c = static_cast<double>(count[k]);
    var[k] = (sum2[k] - sum[k] * sum[k] / c) / (c - 1.0);
  }
  return var;
}

}  // namespace detail

/// Noise amplitudes that make boxcar-averaged SNR follow the target law.
///
/// Unit-amplitude white and telegraph noise are pushed through the trace
/// filter by Monte Carlo (>= `min_windows` windows at every integration
/// time); since both are independent and additive, the calibrated variance is
/// w * var_white + r * var_telegraph, and (w, r) solve a 2x2 least-squares
/// problem on the relative variance error. With no t0 target only w is set.
inline NoiseCalibration calibrate_noise(const SnrTarget& target, double contrast_v,
                                        const TraceConfig& cfg, std::uint64_t seed,
                                        std::size_t min_windows = 100000) {
  cfg.validate();
  detail::require_positive(std::abs(contrast_v), "contrast");
  if (!(target.snr_1us > 0.0)) throw DomainError("target SNR must be positive");
  NoiseCalibration out;
  out.noise = cfg.noise;
  out.noise.white_sigma_v = 0.0;
  out.noise.telegraph_amplitude_v = 0.0;
  const double contrast = std::abs(contrast_v);
  const auto& t_int = default_snr_integration_times();

  if (std::isinf(target.snr_1us)) {
    out.predicted.snr_1us = std::numeric_limits<double>::infinity();
    out.predicted.t0_s = target.t0_s.value_or(0.0);
    return out;
  }

  const auto vw = detail::unit_window_variances(cfg, detail::UnitNoise::white, t_int, min_windows,
                                                seed_fanout(seed, Stage::calibration, 0));
  std::vector<double> vr;

  auto law_points = [&](double w, double r) {
    std::vector<SnrPoint> pts;
    for (std::size_t k = 0; k < t_int.size(); ++k)
      pts.push_back({t_int[k], contrast / std::sqrt(w * vw[k] + (vr.empty() ? 0.0 : r * vr[k]))});
    return pts;
  };

  if (!target.t0_s) {
    const auto unit = fit_snr_scaling(law_points(1.0, 0.0));
    const double sigma = unit.snr_1us / target.snr_1us;
    out.noise.white_sigma_v = sigma;
    out.predicted = fit_snr_scaling(law_points(sigma * sigma, 0.0));
    return out;
  }

  const double t0 = *target.t0_s;
  detail::require_non_negative(t0, "target t0");
  vr = detail::unit_window_variances(cfg, detail::UnitNoise::telegraph, t_int, min_windows,
                                     seed_fanout(seed, Stage::calibration, 1));
  // Minimise sum_k (w a_k + r b_k - 1)^2 with a_k, b_k the unit variances
  // relative to the target variance at t_int[k].
  double aa = 0, ab = 0, bb = 0, a1 = 0, b1 = 0;
  for (std::size_t k = 0; k < t_int.size(); ++k) {
    const double v_target =
        contrast * contrast * kOneMicrosecond / (target.snr_1us * target.snr_1us * (t0 + t_int[k]));
    const double a = vw[k] / v_target, b = vr[k] / v_target;
    aa += a * a;
    ab += a * b;
    bb += b * b;
    a1 += a;
    b1 += b;
  }
  const double det = aa * bb - ab * ab;
  const double w = (bb * a1 - ab * b1) / det;
  const double r = (aa * b1 - ab * a1) / det;
  if (!(w > 0.0) || !(r >= 0.0))
    throw DomainError("SNR target unreachable: t0 is incompatible with the filter response");
  out.noise.white_sigma_v = std::sqrt(w);
  out.noise.telegraph_amplitude_v = std::sqrt(r);
  out.predicted = fit_snr_scaling(law_points(w, r));
  return out;
}

// ---------------------------------------------------------------------------
// Trace I/O

inline void write_trace_csv(std::ostream& os, const IQTrace& tr) {
  const auto old = os.precision(17);
  os << "time_s,I_V,Q_V\n";
  for (std::size_t n = 0; n < tr.size(); ++n) os << tr.time(n) << ',' << tr.i[n] << ',' << tr.q[n] << '\n';
  os.precision(old);
}

/// Reads a trace CSV; dt is recovered from the first two time stamps.
inline IQTrace read_trace_csv(std::istream& is) {
  IQTrace tr;
  std::string line;
  std::vector<double> times;
  while (std::getline(is, line)) {
    if (line.empty() || line.rfind("time_s", 0) == 0) continue;
    std::istringstream ls(line);
    std::string a, b, c;
    if (!std::getline(ls, a, ',') || !std::getline(ls, b, ',') || !std::getline(ls, c))
      throw ConfigError("malformed trace CSV line: " + line);
    times.push_back(std::stod(a));
    tr.i.push_back(std::stod(b));
    tr.q.push_back(std::stod(c));
  }
  if (times.size() < 2) throw ConfigError("trace CSV needs at least two samples");
  tr.start_s = times.front();
  tr.dt_s = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  return tr;
}

namespace detail {

inline constexpr char kTraceMagic[4] = {'R', 'F', 'I', 'Q'};
inline constexpr std::uint32_t kTraceVersion = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ConfigError("truncated binary trace");
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline std::string encode_metadata(const TraceMetadata& m) {
  std::ostringstream os;
  os << m.cycle_id << '\n' << m.seed << '\n' << m.note;
  return os.str();
}

inline TraceMetadata decode_metadata(const std::string& s) {
  TraceMetadata m;
  std::istringstream is(s);
  std::string a, b;
  std::getline(is, a);
  std::getline(is, b);
  m.cycle_id = a.empty() ? 0 : std::stoull(a);
  m.seed = b.empty() ? 0 : std::stoull(b);
  std::ostringstream rest;
  rest << is.rdbuf();
  m.note = rest.str();
  return m;
}

}  // namespace detail

/// Binary record, little-endian:
///   "RFIQ" | u32 version | f64 dt | f64 start | u64 n | u32 meta_len |
///   meta bytes | n x f64 I | n x f64 Q
inline void write_trace_binary(std::ostream& os, const IQTrace& tr) {
  os.write(detail::kTraceMagic, 4);
  detail::put_le<std::uint32_t>(os, detail::kTraceVersion);
  detail::put_le<double>(os, tr.dt_s);
  detail::put_le<double>(os, tr.start_s);
  detail::put_le<std::uint64_t>(os, tr.size());
  const auto meta = detail::encode_metadata(tr.metadata);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (double v : tr.i) detail::put_le<double>(os, v);
  for (double v : tr.q) detail::put_le<double>(os, v);
}

inline IQTrace read_trace_binary(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, detail::kTraceMagic, 4) != 0)
    throw ConfigError("not an RFIQ trace record");
  if (detail::get_le<std::uint32_t>(is) != detail::kTraceVersion)
    throw ConfigError("unsupported RFIQ version");
  IQTrace tr;
  tr.dt_s = detail::get_le<double>(is);
  tr.start_s = detail::get_le<double>(is);
  const auto n = detail::get_le<std::uint64_t>(is);
  const auto meta_len = detail::get_le<std::uint32_t>(is);
  std::string meta(meta_len, '\0');
  if (!is.read(meta.data(), meta_len)) throw ConfigError("truncated binary trace metadata");
  tr.metadata = detail::decode_metadata(meta);
  tr.i.resize(n);
  tr.q.resize(n);
  for (auto& v : tr.i) v = detail::get_le<double>(is);
  for (auto& v : tr.q) v = detail::get_le<double>(is);
  return tr;
}

}  // namespace rfion

#endif  // RFION_SIGNAL_HPP
