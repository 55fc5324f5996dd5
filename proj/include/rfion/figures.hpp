#ifndef RFION_FIGURES_HPP
#define RFION_FIGURES_HPP

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "rfion/harness.hpp"

namespace rfion {

inline const std::vector<std::string>& figure_tags() {
  static const std::vector<std::string> tags{"fig1b", "fig2b", "fig3a", "fig3b", "fig3c", "fig4b", "fig4c"};
  return tags;
}

struct FigureOptions {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = ".";
  unsigned threads = 0;
  double scale = 1.0;  // multiplies Monte Carlo sizes and cycle counts
};

struct FigureResult {
  std::string tag;
  std::vector<std::filesystem::path> files;
  Json summary;
};

namespace detail {

inline std::size_t scaled(std::size_t n, double scale, std::size_t floor = 1) {
  return std::max(floor, static_cast<std::size_t>(std::llround(static_cast<double>(n) * scale)));
}

struct CsvFile {
  explicit CsvFile(const std::filesystem::path& p) : os(open_out(p)) { os.precision(17); }
  std::ofstream os;
};

inline FigureResult fig1b(const FigureOptions& o) {
  FigureResult r{"fig1b", {}, {}};
  const ResonatorParams p;
  const double f_r = resonant_frequency(p);
  const auto neutral = reflection_sweep(p, p.device_resistance_neutral_ohm, 0.75 * f_r, 1.25 * f_r, 2001);
  const auto ionized = reflection_sweep(p, p.device_resistance_ionized_ohm, 0.75 * f_r, 1.25 * f_r, 2001);
  const auto path = o.out_dir / "fig1b.csv";
  CsvFile f(path);
  f.os << "frequency_hz,gamma_neutral,gamma_ionized\n";
  std::size_t dip = 0;
  for (std::size_t k = 0; k < neutral.size(); ++k) {
    f.os << neutral[k].frequency_hz << ',' << neutral[k].gamma_magnitude << ',' << ionized[k].gamma_magnitude << '\n';
    if (neutral[k].gamma_magnitude < neutral[dip].gamma_magnitude) dip = k;
  }
  r.files.push_back(path);
  r.summary = {{"resonant_frequency_hz", f_r},
               {"bandwidth_hz", resonator_bandwidth(f_r, p.loaded_q)},
               {"dip_frequency_hz", neutral[dip].frequency_hz},
               {"dip_gamma", neutral[dip].gamma_magnitude}};
  return r;
}

inline FigureResult fig2b(const FigureOptions& o) {
  FigureResult r{"fig2b", {}, {}};
  auto cfg = preset("er2").resolved();
  cfg.mode = RunMode::cw;
  cfg.schedule.cycle_length_s = 400e-6;
  // CW power giving roughly one ionization per 60 us.
  cfg.schedule.power_mw =
      1.0 / (60e-6 * cfg.photophysics.excitation_rate_per_mw * cfg.photophysics.ionization_branching);
  cfg = cfg.resolved();
  cfg.targets = {};

  // First seed whose cycle shows two complete ionization/reset pairs.
  EventTimeline tl;
  std::uint64_t id = 0;
  for (;; ++id) {
    tl = simulate_cycle(cfg.schedule, cfg.photophysics, seed_fanout(o.seed, Stage::dynamics, id));
    const auto iv = tl.ionized_intervals();
    if (iv.size() >= 2 && iv[1].reset_observed()) break;
  }
  const auto tr = synthesize_trace(tl, cfg.schedule, cfg.trace, cfg.transient, seed_fanout(o.seed, Stage::noise, id));
  const auto geometry = SignalGeometry::from_config(cfg.trace);
  const auto dev = geometry.deviation(tr);
  DcChannelConfig dcc;
  dcc.record_length_s = cfg.schedule.cycle_length_s;
  const auto dc = dc_channel(tl, dcc);

  const auto rf_path = o.out_dir / "fig2b_rf.csv";
  const auto dc_path = o.out_dir / "fig2b_dc.csv";
  {
    CsvFile f(rf_path);
    f.os << "time_s,delta_v\n";
    for (std::size_t n = 0; n < tr.size(); ++n) f.os << tr.time(n) << ',' << dev[n] << '\n';
  }
  {
    CsvFile f(dc_path);
    f.os << "time_s,current_a\n";
    for (std::size_t n = 0; n < dc.current_a.size(); ++n) f.os << dc.time(n) << ',' << dc.current_a[n] << '\n';
  }
  auto model = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
  model.fit_start_s = -std::numeric_limits<double>::infinity();
  const auto found = detect_events(tr, geometry, cfg.detector, model);
  Json events = Json::array();
  for (const auto& iv : tl.ionized_intervals()) events.push_back({{"ionization_s", iv.start_s}, {"reset_s", iv.end_s}});
  Json fits = Json::array();
  for (const auto& d : found)
    if (d.detected) fits.push_back({{"t_ion_s", d.t_ion_s}, {"t_reset_s", d.t_reset_s}});
  r.files = {rf_path, dc_path};
  r.summary = {{"cycle_id", id}, {"cw_power_mw", cfg.schedule.power_mw}, {"true_pairs", events}, {"fitted", fits}};
  return r;
}

inline FigureResult fig3a(const FigureOptions& o) {
  FigureResult r{"fig3a", {}, {}};
  const auto cfg = preset("er2").resolved();
  const auto geometry = SignalGeometry::from_config(cfg.trace);
  const auto model = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
  std::vector<IQTrace> traces;
  std::vector<double> truth;
  std::vector<DetectionResult> fits;
  for (std::uint64_t id = 0; traces.size() < 3; ++id) {
    const auto tl = simulate_cycle(cfg.schedule, cfg.photophysics, seed_fanout(o.seed, Stage::dynamics, id));
    const auto t = tl.first_ionization_s();
    if (!t) continue;
    auto tr = synthesize_trace(tl, cfg.schedule, cfg.trace, cfg.transient, seed_fanout(o.seed, Stage::noise, id));
    const auto g = with_pre_trigger_baseline(geometry, tr);
    fits.push_back(first_detection(detect_events(tr, g, cfg.detector, model)));
    truth.push_back(*t);
    traces.push_back(std::move(tr));
  }
  const auto tr_path = o.out_dir / "fig3a_traces.csv";
  const auto fit_path = o.out_dir / "fig3a_fits.csv";
  {
    CsvFile f(tr_path);
    f.os << "time_s,delta_v_0,delta_v_1,delta_v_2\n";
    std::vector<std::vector<double>> dev;
    for (const auto& tr : traces) dev.push_back(with_pre_trigger_baseline(geometry, tr).deviation(tr));
    for (std::size_t n = 0; n < traces[0].size(); ++n)
      f.os << traces[0].time(n) << ',' << dev[0][n] << ',' << dev[1][n] << ',' << dev[2][n] << '\n';
  }
  {
    CsvFile f(fit_path);
    f.os << "trace,t_true_s,detected,t_ion_s,sigma_t_s\n";
    for (std::size_t k = 0; k < fits.size(); ++k)
      f.os << k << ',' << truth[k] << ',' << (fits[k].detected ? 1 : 0) << ',' << fits[k].t_ion_s << ','
           << fits[k].sigma_t_s << '\n';
  }
  r.files = {tr_path, fit_path};
  r.summary = {{"transient_onset_s", cfg.transient.onset_s(cfg.schedule)},
               {"impact_window_end_s", cfg.transient.impact_end_s(cfg.schedule)}};
  return r;
}

inline const std::vector<double>& resolution_grid() {
  static const std::vector<double> g{0.05e-6, 0.1e-6, 0.2e-6, 0.3e-6, 0.4e-6, 0.5e-6, 0.6e-6,
                                     0.7e-6,  0.8e-6, 1.0e-6, 1.5e-6, 2.0e-6, 3.0e-6};
  return g;
}

inline FigureResult fig3b(const FigureOptions& o) {
  FigureResult r{"fig3b", {}, {}};
  const auto cfg = preset("er2").resolved();
  ResolutionSetup setup{cfg.schedule, cfg.trace, cfg.transient};
  const auto curve = time_resolution_curve(resolution_grid(), setup, scaled(1000, o.scale, 2), o.seed, o.threads);
  const auto path = o.out_dir / "fig3b.csv";
  CsvFile f(path);
  f.os << "t_ion_s,rms_error_s,rms_error_sigma_s,median_sigma_t_s\n";
  double plateau = 0.0, hump = 0.0, hump_t = 0.0;
  std::size_t n_plateau = 0;
  for (const auto& p : curve) {
    f.os << p.t_ion_s << ',' << p.rms_error_s << ',' << p.rms_error_sigma_s << ',' << p.median_sigma_t_s << '\n';
    if (p.t_ion_s >= 1.0e-6) {
      plateau += p.rms_error_s;
      ++n_plateau;
    }
    if (p.t_ion_s >= 0.3e-6 && p.t_ion_s <= 0.7e-6 && p.rms_error_s > hump) {
      hump = p.rms_error_s;
      hump_t = p.t_ion_s;
    }
  }
  r.files.push_back(path);
  r.summary = {{"plateau_rms_s", plateau / static_cast<double>(std::max<std::size_t>(n_plateau, 1))},
               {"hump_rms_s", hump},
               {"hump_t_ion_s", hump_t}};
  return r;
}

inline FigureResult fig3c(const FigureOptions& o) {
  FigureResult r{"fig3c", {}, {}};
  auto campaign = [&](const char* name, std::uint64_t salt) {
    auto cfg = preset(name).resolved();
    cfg.cycles = scaled(cfg.cycles, o.scale);
    cfg.storage.keep_event_traces = false;
    cfg.storage.keep_empty_traces = 0;
    return run_pulsed_campaign(cfg, seed_fanout(o.seed, Stage::sampling, salt), o.threads).detected_times();
  };
  const auto er2 = campaign("er2", 2);
  const auto er1 = campaign("er1", 1);
  const auto ctl = campaign("control", 3);
  std::vector<double> grid;
  for (int k = 0; k <= 300; ++k) grid.push_back(k * 10e-9);
  const auto n2 = survival_counts(er2, grid);
  const auto n1 = survival_counts(er1, grid);
  const auto nc = survival_counts(ctl, grid);

  Json summary;
  summary["events"] = {{"er1", er1.size()}, {"er2", er2.size()}, {"control", ctl.size()}};
  std::optional<LifetimeFit> fit;
  if (!ctl.empty()) {
    const double t_min = background_threshold(ctl);
    summary["t_min_s"] = t_min;
    try {
      fit = fit_lifetime(er2, t_min, LifetimeMethod::maximum_likelihood);
      summary["er2_lifetime"] = lifetime_json(*fit);
    } catch (const EstimationError& e) {
      summary["er2_lifetime"] = {{"error", e.what()}};
    }
  }
  const auto path = o.out_dir / "fig3c.csv";
  CsvFile f(path);
  f.os << "t_s,n_er1,n_er2,n_control,n_er2_fit\n";
  for (std::size_t k = 0; k < grid.size(); ++k) {
    double model = std::numeric_limits<double>::quiet_NaN();
    if (fit && grid[k] >= fit->t_min_s)
      model = static_cast<double>(fit->n_selected) * std::exp(-(grid[k] - fit->t_min_s) / fit->tau_s);
    f.os << grid[k] << ',' << (n1.empty() ? 0 : n1[k]) << ',' << (n2.empty() ? 0 : n2[k]) << ','
         << (nc.empty() ? 0 : nc[k]) << ',' << model << '\n';
  }
  r.files.push_back(path);
  r.summary = summary;
  return r;
}

inline FigureResult fig4b(const FigureOptions& o) {
  FigureResult r{"fig4b", {}, {}};
  TraceConfig cfg = preset("calibrated-noise").resolved().trace;
  const auto points = measure_snr_curve(cfg, default_snr_integration_times(), scaled(10000, o.scale, 100), o.seed);
  const auto fit = fit_snr_scaling(points);
  const auto path = o.out_dir / "fig4b.csv";
  CsvFile f(path);
  f.os << "t_int_s,snr,snr_fit\n";
  for (const auto& p : points) f.os << p.integration_time_s << ',' << p.snr << ',' << fit.predict(p.integration_time_s) << '\n';
  r.files.push_back(path);
  r.summary = {{"snr_1us", fit.snr_1us},
               {"snr_1us_sigma", fit.snr_1us_sigma},
               {"t0_s", fit.t0_s},
               {"t0_sigma_s", fit.t0_sigma_s}};
  return r;
}

inline const std::vector<double>& fidelity_grid() {
  static const std::vector<double> g{0.02e-6, 0.05e-6, 0.1e-6, 0.15e-6, 0.17e-6, 0.2e-6,
                                     0.3e-6,  0.5e-6,  1e-6,   2e-6,    5e-6};
  return g;
}

/// Raw-bandwidth detector used for the fidelity curve.
inline FidelitySetup fidelity_setup() {
  FidelitySetup s;
  const auto cfg = preset("calibrated-noise").resolved();
  s.trace = cfg.trace;
  s.detector = DetectorConfig{};
  return s;
}

inline FigureResult fig4c(const FigureOptions& o) {
  FigureResult r{"fig4c", {}, {}};
  const auto curve = infidelity_vs_reset(fidelity_grid(), fidelity_setup(), scaled(4000, o.scale, 10), o.seed, o.threads);
  const auto path = o.out_dir / "fig4c.csv";
  CsvFile f(path);
  f.os << "duration_s,infidelity,sigma,misses,trials\n";
  for (const auto& p : curve.points)
    f.os << p.duration_s << ',' << p.infidelity << ',' << p.sigma << ',' << p.misses << ',' << p.trials << '\n';
  r.files.push_back(path);
  const double tau = PhotophysicsParams{}.reset_time_s;
  r.summary = {{"overall_fidelity", overall_fidelity(curve, tau)},
               {"false_positive_per_trace", curve.false_positive_rate},
               {"short_event_fraction_expected", expected_short_fraction(0.5e-6, tau)}};
  return r;
}

}  // namespace detail

/// Plot-ready CSV tables for one figure, written under `out_dir`.
inline FigureResult reproduce_figure(std::string_view tag, const FigureOptions& o = {}) {
  std::filesystem::create_directories(o.out_dir);
  if (tag == "fig1b") return detail::fig1b(o);
  if (tag == "fig2b") return detail::fig2b(o);
  if (tag == "fig3a") return detail::fig3a(o);
  if (tag == "fig3b") return detail::fig3b(o);
  if (tag == "fig3c") return detail::fig3c(o);
  if (tag == "fig4b") return detail::fig4b(o);
  if (tag == "fig4c") return detail::fig4c(o);
  std::string known;
  for (const auto& t : figure_tags()) known += (known.empty() ? "" : ", ") + t;
  throw ConfigError("unknown figure tag '" + std::string(tag) + "' (known: " + known + ")");
}

}  // namespace rfion

#endif  // RFION_FIGURES_HPP
