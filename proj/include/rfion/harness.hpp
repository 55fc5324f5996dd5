#ifndef RFION_HARNESS_HPP
#define RFION_HARNESS_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "rfion/circuit.hpp"
#include "rfion/detect.hpp"
#include "rfion/dynamics.hpp"
#include "rfion/error.hpp"
#include "rfion/estimate.hpp"
#include "rfion/parallel.hpp"
#include "rfion/rng.hpp"
#include "rfion/signal.hpp"

namespace rfion {

inline constexpr std::string_view kVersion = "0.1.0";

using Json = nlohmann::ordered_json;

/// Failure inside a pipeline stage; `stage()` names it for CLI messages.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

enum class RunMode { cw, pulsed, control };

inline std::string_view to_string(RunMode m) {
  switch (m) {
    case RunMode::cw: return "cw";
    case RunMode::pulsed: return "pulsed";
    case RunMode::control: return "control";
  }
  return "?";
}

inline RunMode parse_run_mode(std::string_view s) {
  for (auto m : {RunMode::cw, RunMode::pulsed, RunMode::control})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected cw, pulsed or control)");
}

/// Per-cycle probabilities from which rates are derived when the config is
/// resolved; absent fields leave the explicit rates untouched.
struct RateTargets {
  std::optional<double> background_probability;
  std::optional<double> total_probability;
};

struct AnalysisConfig {
  std::uint64_t control_cycles = 0;  // embedded control run deriving t_min (pulsed mode)
  std::optional<double> t_min_s;     // fixed threshold; skips the control run
  std::size_t min_events = 20;
};

struct StorageConfig {
  bool keep_event_traces = true;
  std::size_t keep_empty_traces = 100;
};

struct ExperimentConfig {
  RunMode mode = RunMode::pulsed;
  std::uint64_t cycles = 1;
  std::uint64_t seed = 1;
  std::string output_dir = "run";
  unsigned threads = 0;
  PulseSchedule schedule;
  PhotophysicsParams photophysics;
  RateTargets targets;
  ResonatorParams resonator;
  SensorTransfer sensor;
  TraceConfig trace;
  LaserTransient transient;
  DetectorConfig detector;
  AnalysisConfig analysis;
  StorageConfig storage;

  /// Copy with derived quantities filled in: rates from targets, trace levels
  /// from the sensor transfer, control mode forced non-resonant, CW light
  /// spanning the cycle and a record covering it.
  ExperimentConfig resolved() const {
    ExperimentConfig c = *this;
    if (c.mode == RunMode::control) c.schedule.resonant = false;
    if (c.mode == RunMode::cw) {
      c.schedule.pulse_start_s = 0.0;
      c.schedule.pulse_length_s = c.schedule.cycle_length_s;
      c.trace.record_start_s = 0.0;
      c.trace.record_length_s = c.schedule.cycle_length_s;
      c.transient.enabled = false;
    }
    c.trace.level_neutral_v = sensor_level(ChargeState::neutral, c.sensor.operating_point_v, c.sensor);
    c.trace.level_ionized_v = sensor_level(ChargeState::ionized, c.sensor.operating_point_v, c.sensor);
    if (c.targets.background_probability) {
      PulseSchedule ref = c.schedule;
      c.photophysics.background_rate_per_mw = background_rate_for_probability(ref, *c.targets.background_probability);
    }
    if (c.targets.total_probability) {
      c.photophysics.excitation_rate_per_mw =
          excitation_rate_for_probability(c.schedule, c.photophysics, *c.targets.total_probability);
    }
    return c;
  }

  void validate() const {
    if (cycles < 1) throw ConfigError("cycle count must be >= 1");
    schedule.validate();
    photophysics.validate();
    resonator.validate();
    sensor.validate();
    trace.validate();
    transient.validate(schedule);
    detector.validate();
    if (mode == RunMode::control && schedule.resonant) throw ConfigError("control mode requires non-resonant light");
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void check_keys(const Json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
void read(const Json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

template <typename T>
Json opt(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["mode"] = to_string(c.mode);
  j["cycles"] = c.cycles;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["schedule"] = {{"pulse_start_s", c.schedule.pulse_start_s},
                   {"pulse_length_s", c.schedule.pulse_length_s},
                   {"power_mw", c.schedule.power_mw},
                   {"resonant", c.schedule.resonant},
                   {"cycle_length_s", c.schedule.cycle_length_s}};
  j["photophysics"] = {{"excitation_rate_per_mw", c.photophysics.excitation_rate_per_mw},
                       {"excited_lifetime_s", c.photophysics.excited_lifetime_s},
                       {"ionization_branching", c.photophysics.ionization_branching},
                       {"background_rate_per_mw", c.photophysics.background_rate_per_mw},
                       {"reset_time_s", c.photophysics.reset_time_s}};
  j["targets"] = {{"background_probability", detail::opt(c.targets.background_probability)},
                  {"total_probability", detail::opt(c.targets.total_probability)}};
  j["resonator"] = {{"inductance_h", c.resonator.inductance_h},
                    {"parasitic_capacitance_f", c.resonator.parasitic_capacitance_f},
                    {"loaded_q", c.resonator.loaded_q},
                    {"line_impedance_ohm", c.resonator.line_impedance_ohm},
                    {"device_resistance_neutral_ohm", c.resonator.device_resistance_neutral_ohm},
                    {"device_resistance_ionized_ohm", c.resonator.device_resistance_ionized_ohm}};
  j["sensor"] = {{"peak_center_v", c.sensor.peak_center_v},     {"peak_width_v", c.sensor.peak_width_v},
                 {"level_neutral_v", c.sensor.level_neutral_v}, {"level_ionized_v", c.sensor.level_ionized_v},
                 {"charge_shift_v", c.sensor.charge_shift_v},   {"operating_point_v", c.sensor.operating_point_v}};
  j["trace"] = {{"sample_rate_hz", c.trace.sample_rate_hz},
                {"filter_cutoff_hz", c.trace.filter_cutoff_hz},
                {"filter_order", c.trace.filter_order},
                {"iq_angle_rad", c.trace.iq_angle_rad},
                {"record_start_s", c.trace.record_start_s},
                {"record_length_s", c.trace.record_length_s},
                {"noise",
                 {{"white_sigma_v", c.trace.noise.white_sigma_v},
                  {"telegraph_amplitude_v", c.trace.noise.telegraph_amplitude_v},
                  {"telegraph_correlation_s", c.trace.noise.telegraph_correlation_s}}}};
  j["transient"] = {{"enabled", c.transient.enabled},
                    {"jump_amplitude_v", c.transient.jump_amplitude_v},
                    {"reference_energy_mw_s", c.transient.reference_energy_mw_s},
                    {"onset_delay_s", c.transient.onset_delay_s},
                    {"decay_time_s", c.transient.decay_time_s},
                    {"impact_window_s", c.transient.impact_window_s},
                    {"amplitude_jitter", c.transient.amplitude_jitter}};
  j["detector"] = {{"threshold_fraction", c.detector.threshold_fraction},
                   {"release_fraction", c.detector.release_fraction},
                   {"smoothing_s", c.detector.smoothing_s}};
  j["analysis"] = {{"control_cycles", c.analysis.control_cycles},
                   {"t_min_s", detail::opt(c.analysis.t_min_s)},
                   {"min_events", c.analysis.min_events}};
  j["storage"] = {{"keep_event_traces", c.storage.keep_event_traces},
                  {"keep_empty_traces", c.storage.keep_empty_traces}};
  return j;
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ExperimentConfig config_from_json(const Json& j) {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  check_keys(j, "config", {"mode", "cycles", "seed", "output_dir", "threads", "schedule", "photophysics", "targets",
                           "resonator", "sensor", "trace", "transient", "detector", "analysis", "storage"});
  if (j.contains("mode")) c.mode = parse_run_mode(j.at("mode").get<std::string>());
  read(j, "cycles", c.cycles);
  read(j, "seed", c.seed);
  read(j, "output_dir", c.output_dir);
  read(j, "threads", c.threads);
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    check_keys(s, "schedule", {"pulse_start_s", "pulse_length_s", "power_mw", "resonant", "cycle_length_s"});
    read(s, "pulse_start_s", c.schedule.pulse_start_s);
    read(s, "pulse_length_s", c.schedule.pulse_length_s);
    read(s, "power_mw", c.schedule.power_mw);
    read(s, "resonant", c.schedule.resonant);
    read(s, "cycle_length_s", c.schedule.cycle_length_s);
  }
  if (j.contains("photophysics")) {
    const auto& p = j.at("photophysics");
    check_keys(p, "photophysics", {"excitation_rate_per_mw", "excited_lifetime_s", "ionization_branching",
                                   "background_rate_per_mw", "reset_time_s"});
    read(p, "excitation_rate_per_mw", c.photophysics.excitation_rate_per_mw);
    read(p, "excited_lifetime_s", c.photophysics.excited_lifetime_s);
    read(p, "ionization_branching", c.photophysics.ionization_branching);
    read(p, "background_rate_per_mw", c.photophysics.background_rate_per_mw);
    read(p, "reset_time_s", c.photophysics.reset_time_s);
  }
  if (j.contains("targets")) {
    const auto& t = j.at("targets");
    check_keys(t, "targets", {"background_probability", "total_probability"});
    read(t, "background_probability", c.targets.background_probability);
    read(t, "total_probability", c.targets.total_probability);
  }
  if (j.contains("resonator")) {
    const auto& r = j.at("resonator");
    check_keys(r, "resonator", {"inductance_h", "parasitic_capacitance_f", "loaded_q", "line_impedance_ohm",
                                "device_resistance_neutral_ohm", "device_resistance_ionized_ohm"});
    read(r, "inductance_h", c.resonator.inductance_h);
    read(r, "parasitic_capacitance_f", c.resonator.parasitic_capacitance_f);
    read(r, "loaded_q", c.resonator.loaded_q);
    read(r, "line_impedance_ohm", c.resonator.line_impedance_ohm);
    read(r, "device_resistance_neutral_ohm", c.resonator.device_resistance_neutral_ohm);
    read(r, "device_resistance_ionized_ohm", c.resonator.device_resistance_ionized_ohm);
  }
  if (j.contains("sensor")) {
    const auto& s = j.at("sensor");
    check_keys(s, "sensor", {"peak_center_v", "peak_width_v", "level_neutral_v", "level_ionized_v", "charge_shift_v",
                             "operating_point_v"});
    read(s, "peak_center_v", c.sensor.peak_center_v);
    read(s, "peak_width_v", c.sensor.peak_width_v);
    read(s, "level_neutral_v", c.sensor.level_neutral_v);
    read(s, "level_ionized_v", c.sensor.level_ionized_v);
    read(s, "charge_shift_v", c.sensor.charge_shift_v);
    read(s, "operating_point_v", c.sensor.operating_point_v);
  }
  if (j.contains("trace")) {
    const auto& t = j.at("trace");
    check_keys(t, "trace", {"sample_rate_hz", "filter_cutoff_hz", "filter_order", "iq_angle_rad", "record_start_s",
                            "record_length_s", "noise"});
    read(t, "sample_rate_hz", c.trace.sample_rate_hz);
    read(t, "filter_cutoff_hz", c.trace.filter_cutoff_hz);
    read(t, "filter_order", c.trace.filter_order);
    read(t, "iq_angle_rad", c.trace.iq_angle_rad);
    read(t, "record_start_s", c.trace.record_start_s);
    read(t, "record_length_s", c.trace.record_length_s);
    if (t.contains("noise")) {
      const auto& n = t.at("noise");
      check_keys(n, "trace.noise", {"white_sigma_v", "telegraph_amplitude_v", "telegraph_correlation_s"});
      read(n, "white_sigma_v", c.trace.noise.white_sigma_v);
      read(n, "telegraph_amplitude_v", c.trace.noise.telegraph_amplitude_v);
      read(n, "telegraph_correlation_s", c.trace.noise.telegraph_correlation_s);
    }
  }
  if (j.contains("transient")) {
    const auto& t = j.at("transient");
    check_keys(t, "transient", {"enabled", "jump_amplitude_v", "reference_energy_mw_s", "onset_delay_s",
                                "decay_time_s", "impact_window_s", "amplitude_jitter"});
    read(t, "enabled", c.transient.enabled);
    read(t, "jump_amplitude_v", c.transient.jump_amplitude_v);
    read(t, "reference_energy_mw_s", c.transient.reference_energy_mw_s);
    read(t, "onset_delay_s", c.transient.onset_delay_s);
    read(t, "decay_time_s", c.transient.decay_time_s);
    read(t, "impact_window_s", c.transient.impact_window_s);
    read(t, "amplitude_jitter", c.transient.amplitude_jitter);
  }
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    check_keys(d, "detector", {"threshold_fraction", "release_fraction", "smoothing_s"});
    read(d, "threshold_fraction", c.detector.threshold_fraction);
    read(d, "release_fraction", c.detector.release_fraction);
    read(d, "smoothing_s", c.detector.smoothing_s);
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    check_keys(a, "analysis", {"control_cycles", "t_min_s", "min_events"});
    read(a, "control_cycles", c.analysis.control_cycles);
    read(a, "t_min_s", c.analysis.t_min_s);
    read(a, "min_events", c.analysis.min_events);
  }
  if (j.contains("storage")) {
    const auto& s = j.at("storage");
    check_keys(s, "storage", {"keep_event_traces", "keep_empty_traces"});
    read(s, "keep_event_traces", c.storage.keep_event_traces);
    read(s, "keep_empty_traces", c.storage.keep_empty_traces);
  }
  return c;
}

inline std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ExperimentConfig parse_config(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Hash of everything that affects results (output location and thread
/// count excluded).
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  return hex64(fnv1a64(j.dump()));
}

// ---------------------------------------------------------------------------
// Presets

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"er1", "er2", "control", "calibrated-noise"};
  return names;
}

/// Noise amplitudes from calibrate_noise for SNR_1us = 9.6, t0 = 0.5 us at
/// the default trace settings (seed 1, 1e5 windows).
inline NoiseModel calibrated_noise() {
  NoiseModel n;
  n.white_sigma_v = 5.56878e-3;
  n.telegraph_amplitude_v = 7.46865e-4;
  n.telegraph_correlation_s = 1e-6;
  return n;
}

inline ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  c.trace.noise = calibrated_noise();
  c.detector.smoothing_s = 0.6e-6;
  c.targets.background_probability = 6e-5;
  if (name == "calibrated-noise") {
    c.mode = RunMode::pulsed;
    c.cycles = 10000;
    c.targets.total_probability = 3e-4;
    c.output_dir = "runs/calibrated-noise";
    return c;
  }
  if (name == "er2") {
    c.mode = RunMode::pulsed;
    c.cycles = 7600000;
    c.targets.total_probability = 3e-4;
    c.analysis.control_cycles = 4900000;
    c.output_dir = "runs/er2";
    return c;
  }
  if (name == "er1") {
    c.mode = RunMode::pulsed;
    c.cycles = 990000;
    c.photophysics.excited_lifetime_s = 30e-9;
    c.targets.total_probability = 6e-4;
    c.analysis.control_cycles = 4900000;
    c.output_dir = "runs/er1";
    return c;
  }
  if (name == "control") {
    c.mode = RunMode::control;
    c.cycles = 4900000;
    c.schedule.resonant = false;
    c.output_dir = "runs/control";
    return c;
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + std::string(name) + "' (known: " + known + ")");
}

// ---------------------------------------------------------------------------
// Campaigns

struct CycleRecord {
  std::uint64_t cycle_id;
  EventTimeline timeline;
};

/// Gillespie simulation of every cycle; only cycles with at least one
/// transition are returned, in cycle order.
inline std::vector<CycleRecord> simulate_cycles(const PulseSchedule& s, const PhotophysicsParams& p,
                                                std::uint64_t cycles, std::uint64_t master, unsigned threads) {
  constexpr std::uint64_t chunk = 1 << 16;
  const std::uint64_t n_chunks = (cycles + chunk - 1) / chunk;
  std::vector<std::vector<CycleRecord>> parts(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t k) {
    const std::uint64_t end = std::min<std::uint64_t>(cycles, (k + 1) * chunk);
    for (std::uint64_t id = k * chunk; id < end; ++id) {
      auto tl = simulate_cycle(s, p, seed_fanout(master, Stage::dynamics, id));
      if (!tl.empty()) parts[k].push_back({id, std::move(tl)});
    }
  });
  std::vector<CycleRecord> out;
  for (auto& part : parts)
    for (auto& r : part) out.push_back(std::move(r));
  return out;
}

struct CycleDetection {
  std::uint64_t cycle_id;
  DetectionResult result;
};

/// Outcome of one pulsed or control campaign.
struct CampaignResult {
  std::vector<CycleRecord> records;          // cycles with any transition
  std::vector<CycleDetection> detections;    // first detection of each ionizing cycle
  std::vector<std::pair<std::uint64_t, IQTrace>> kept_traces;
  std::size_t ionizing_cycles = 0;

  std::vector<double> detected_times() const {
    std::vector<double> t;
    for (const auto& d : detections)
      if (d.result.detected) t.push_back(d.result.t_ion_s);
    return t;
  }
};

namespace detail {

/// First detected ionization at or after the trigger, or an undetected
/// record carrying the reason.
inline DetectionResult first_detection(const std::vector<DetectionResult>& found) {
  for (const auto& r : found)
    if (r.detected && r.t_ion_s >= 0.0) return r;
  DetectionResult miss;
  miss.diagnostic = found.empty() ? "no candidate" : "no accepted fit";
  return miss;
}

}  // namespace detail

/// Pulsed (or control) campaign. Traces are only synthesised for cycles that
/// ionize, plus `keep_empty_traces` randomly chosen empty cycles; the readout
/// of a cycle without a charge change is not needed for any estimate.
inline CampaignResult run_pulsed_campaign(const ExperimentConfig& cfg, std::uint64_t master, unsigned threads) {
  CampaignResult out;
  out.records = simulate_cycles(cfg.schedule, cfg.photophysics, cfg.cycles, master, threads);

  std::vector<std::size_t> ionizing;
  for (std::size_t k = 0; k < out.records.size(); ++k)
    if (out.records[k].timeline.ionization_count() > 0) ionizing.push_back(k);
  out.ionizing_cycles = ionizing.size();

  const auto geometry = SignalGeometry::from_config(cfg.trace);
  const auto model = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
  std::vector<DetectionResult> results(ionizing.size());
  std::vector<IQTrace> traces(cfg.storage.keep_event_traces ? ionizing.size() : 0);
  parallel_for(ionizing.size(), threads, [&](std::size_t k) {
    const auto& rec = out.records[ionizing[k]];
    auto tr = synthesize_trace(rec.timeline, cfg.schedule, cfg.trace, cfg.transient,
                               seed_fanout(master, Stage::noise, rec.cycle_id));
    tr.metadata.cycle_id = rec.cycle_id;
    results[k] = detail::first_detection(
        detect_events(tr, with_pre_trigger_baseline(geometry, tr), cfg.detector, model));
    if (cfg.storage.keep_event_traces) traces[k] = std::move(tr);
  });
  for (std::size_t k = 0; k < ionizing.size(); ++k) {
    out.detections.push_back({out.records[ionizing[k]].cycle_id, results[k]});
    if (cfg.storage.keep_event_traces) out.kept_traces.push_back({out.records[ionizing[k]].cycle_id, std::move(traces[k])});
  }

  // Random event-free cycles for reference.
  std::set<std::uint64_t> busy;
  for (auto k : ionizing) busy.insert(out.records[k].cycle_id);
  std::set<std::uint64_t> chosen;
  const std::size_t want = std::min<std::uint64_t>(cfg.storage.keep_empty_traces, cfg.cycles - busy.size());
  Rng pick(seed_fanout(master, Stage::sampling, 0));
  std::uniform_int_distribution<std::uint64_t> any(0, cfg.cycles - 1);
  while (chosen.size() < want) {
    const auto id = any(pick);
    if (!busy.count(id)) chosen.insert(id);
  }
  for (auto id : chosen) {
    auto tr = synthesize_trace(EventTimeline{}, cfg.schedule, cfg.trace, cfg.transient,
                               seed_fanout(master, Stage::noise, id));
    tr.metadata.cycle_id = id;
    tr.metadata.note = "empty";
    out.kept_traces.push_back({id, std::move(tr)});
  }
  return out;
}

struct RunManifest {
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::uint64_t> stage_seeds;  // stage -> master of its seed stream
  std::map<std::string, std::string> artifacts;
  std::string version{kVersion};
  std::map<std::string, double> timings_s;
  Json summary;

  Json to_json() const {
    Json j;
    j["config_hash"] = config_hash;
    j["master_seed"] = master_seed;
    j["stage_seeds"] = stage_seeds;
    j["artifacts"] = artifacts;
    j["version"] = version;
    j["timings_s"] = timings_s;
    return j;
  }
};

namespace detail {

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw StageError("io", "cannot write " + p.string());
  return os;
}

inline void write_events(const std::filesystem::path& p, const std::vector<CycleRecord>& records) {
  auto os = open_out(p);
  write_timeline_header(os);
  for (const auto& r : records) write_timeline_records(os, r.cycle_id, r.timeline);
}

inline void write_detections(const std::filesystem::path& p, const std::vector<CycleDetection>& ds) {
  auto os = open_out(p);
  write_detection_header(os);
  for (const auto& d : ds) write_detection_record(os, d.cycle_id, d.result);
}

inline void write_traces(const std::filesystem::path& p, const std::vector<std::pair<std::uint64_t, IQTrace>>& ts) {
  auto os = open_out(p);
  for (const auto& [_, tr] : ts) write_trace_binary(os, tr);
}

inline Json lifetime_json(const LifetimeFit& f) {
  return {{"method", to_string(f.method)}, {"tau_s", f.tau_s},           {"sigma_s", f.sigma_s},
          {"n_selected", f.n_selected},    {"n_total", f.n_total},       {"t_min_s", f.t_min_s}};
}

inline void write_json(const std::filesystem::path& p, const Json& j) {
  auto os = open_out(p);
  os << j.dump(2) << '\n';
}

template <typename Fn>
auto staged(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace detail

/// Executes the pipeline dynamics -> signal -> detect -> estimate and writes
/// events.csv, detections.csv, traces.bin, summary.json and manifest.json
/// under `output_dir`.
inline RunManifest run_experiment(const ExperimentConfig& input) {
  const auto cfg = detail::staged("config", [&] {
    auto c = input.resolved();
    c.validate();
    return c;
  });
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  detail::staged("io", [&] {
    fs::create_directories(dir);
    return 0;
  });

  RunManifest m;
  m.config_hash = config_hash(input);
  m.master_seed = cfg.seed;
  const std::uint64_t control_master = seed_fanout(cfg.seed, Stage::control, 0);
  m.stage_seeds = {{"dynamics", cfg.seed}, {"noise", cfg.seed}, {"sampling", cfg.seed}, {"control", control_master}};
  detail::Stopwatch clock;
  Json summary;
  summary["mode"] = to_string(cfg.mode);
  summary["cycles"] = cfg.cycles;
  summary["config_hash"] = m.config_hash;
  summary["analytic_probability"] = ionization_probability(cfg.schedule, cfg.photophysics);

  if (cfg.mode == RunMode::cw) {
    const auto records = detail::staged("dynamics", [&] {
      return simulate_cycles(cfg.schedule, cfg.photophysics, cfg.cycles, cfg.seed, cfg.threads);
    });
    m.timings_s["dynamics"] = clock.lap();
    const auto geometry = SignalGeometry::from_config(cfg.trace);
    auto model = FitModel::from_configs(cfg.trace, cfg.transient, cfg.schedule);
    model.fit_start_s = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<DetectionResult>> found(records.size());
    std::vector<IQTrace> traces(records.size());
    detail::staged("detect", [&] {
      parallel_for(records.size(), cfg.threads, [&](std::size_t k) {
        traces[k] = synthesize_trace(records[k].timeline, cfg.schedule, cfg.trace, cfg.transient,
                                     seed_fanout(cfg.seed, Stage::noise, records[k].cycle_id));
        traces[k].metadata.cycle_id = records[k].cycle_id;
        found[k] = detect_events(traces[k], geometry, cfg.detector, model);
      });
      return 0;
    });
    m.timings_s["signal+detect"] = clock.lap();
    std::vector<CycleDetection> ds;
    std::size_t true_events = 0, detected = 0;
    std::vector<double> durations;
    for (std::size_t k = 0; k < records.size(); ++k) {
      true_events += records[k].timeline.ionization_count();
      for (const auto& r : found[k]) {
        ds.push_back({records[k].cycle_id, r});
        if (r.detected) {
          ++detected;
          if (r.reset_observed) durations.push_back(r.duration_s);
        }
      }
    }
    detail::staged("io", [&] {
      detail::write_events(dir / "events.csv", records);
      detail::write_detections(dir / "detections.csv", ds);
      std::vector<std::pair<std::uint64_t, IQTrace>> kept;
      if (cfg.storage.keep_event_traces)
        for (std::size_t k = 0; k < records.size(); ++k) kept.push_back({records[k].cycle_id, traces[k]});
      detail::write_traces(dir / "traces.bin", kept);
      return 0;
    });
    summary["true_ionizations"] = true_events;
    summary["detected_events"] = detected;
    summary["observed_durations"] = durations.size();
    m.artifacts = {{"events", "events.csv"}, {"detections", "detections.csv"}, {"traces", "traces.bin"}};
  } else {
    const auto main = detail::staged("dynamics", [&] { return run_pulsed_campaign(cfg, cfg.seed, cfg.threads); });
    m.timings_s["campaign"] = clock.lap();
    const auto times = main.detected_times();
    summary["ionizing_cycles"] = main.ionizing_cycles;
    summary["detected_events"] = times.size();
    summary["observed_probability"] = static_cast<double>(main.ionizing_cycles) / static_cast<double>(cfg.cycles);

    std::optional<double> t_min = cfg.analysis.t_min_s;
    std::string t_min_source = t_min ? "config" : "none";
    std::optional<double> control_probability;
    if (cfg.mode == RunMode::control) {
      if (!times.empty()) {
        t_min = background_threshold(times);
        t_min_source = "this run";
      }
      control_probability = summary["observed_probability"].get<double>();
    } else if (!t_min && cfg.analysis.control_cycles > 0) {
      ExperimentConfig control = cfg;
      control.mode = RunMode::control;
      control.schedule.resonant = false;
      control.cycles = cfg.analysis.control_cycles;
      control.storage.keep_event_traces = false;
      control.storage.keep_empty_traces = 0;
      const auto ctl = detail::staged("control", [&] { return run_pulsed_campaign(control, control_master, cfg.threads); });
      m.timings_s["control"] = clock.lap();
      const auto ct = ctl.detected_times();
      control_probability = static_cast<double>(ctl.ionizing_cycles) / static_cast<double>(control.cycles);
      summary["control"] = {{"cycles", control.cycles},
                            {"ionizing_cycles", ctl.ionizing_cycles},
                            {"detected_events", ct.size()},
                            {"probability", *control_probability}};
      if (!ct.empty()) {
        t_min = background_threshold(ct);
        t_min_source = "control run";
      }
      detail::staged("io", [&] {
        detail::write_events(dir / "control_events.csv", ctl.records);
        detail::write_detections(dir / "control_detections.csv", ctl.detections);
        return 0;
      });
      m.artifacts["control_events"] = "control_events.csv";
      m.artifacts["control_detections"] = "control_detections.csv";
    }
    summary["t_min_s"] = detail::opt(t_min);
    summary["t_min_source"] = t_min_source;

    if (cfg.mode == RunMode::pulsed) {
      LifetimeOptions lo;
      lo.min_events = cfg.analysis.min_events;
      lo.seed = seed_fanout(cfg.seed, Stage::bootstrap, 0);
      for (auto method : {LifetimeMethod::maximum_likelihood, LifetimeMethod::least_squares}) {
        const std::string key(to_string(method));
        try {
          if (!t_min) throw EstimationError("no t_min available (no control events and none configured)");
          summary["lifetime"][key] = detail::lifetime_json(fit_lifetime(times, *t_min, method, lo));
        } catch (const EstimationError& e) {
          summary["lifetime"][key] = {{"error", e.what()}};
        }
      }
      if (control_probability) {
        const auto bc = background_contamination(*control_probability, cfg.cycles, times.size());
        summary["background"] = {{"expected_events", bc.expected_background},
                                 {"expected_events_sigma", bc.expected_background_sigma},
                                 {"ion_fraction", bc.ion_fraction}};
      }
    }
    m.timings_s["estimate"] = clock.lap();
    detail::staged("io", [&] {
      detail::write_events(dir / "events.csv", main.records);
      detail::write_detections(dir / "detections.csv", main.detections);
      detail::write_traces(dir / "traces.bin", main.kept_traces);
      return 0;
    });
    m.artifacts["events"] = "events.csv";
    m.artifacts["detections"] = "detections.csv";
    m.artifacts["traces"] = "traces.bin";
  }

  m.summary = summary;
  m.artifacts["summary"] = "summary.json";
  m.artifacts["manifest"] = "manifest.json";
  m.artifacts["config"] = "config.json";
  m.timings_s["io"] = clock.lap();
  detail::staged("io", [&] {
    detail::write_json(dir / "summary.json", summary);
    std::ofstream(dir / "config.json") << dump_config(input);
    detail::write_json(dir / "manifest.json", m.to_json());
    return 0;
  });
  return m;
}

// ---------------------------------------------------------------------------
// Offline analysis

/// Ionization times read from a timeline CSV (first ionization of each cycle)
/// or a detections CSV (detected rows only).
inline std::vector<double> read_event_times(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw StageError("io", "cannot read " + path.string());
  std::string header;
  if (!std::getline(is, header)) throw StageError("io", path.string() + " is empty");
  std::vector<double> t;
  if (header.rfind("cycle_id,time_s,transition", 0) == 0) {
    is.seekg(0);
    for (const auto& [_, tl] : read_timeline_records(is))
      if (auto first = tl.first_ionization_s()) t.push_back(*first);
    return t;
  }
  if (header.rfind("cycle_id,detected,t_ion_s", 0) != 0)
    throw StageError("io", path.string() + ": unrecognised header '" + header + "'");
  std::string line;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string id, detected, value;
    if (!std::getline(ls, id, ',') || !std::getline(ls, detected, ',') || !std::getline(ls, value, ','))
      throw StageError("io", path.string() + ":" + std::to_string(row) + ": malformed row");
    if (detected == "1") t.push_back(std::stod(value));
  }
  return t;
}

struct AnalysisRequest {
  std::vector<double> t_ion_s;
  std::optional<std::vector<double>> control_t_ion_s;
  std::optional<double> t_min_s;
  LifetimeOptions options;
};

/// Lifetime estimates (both methods) as JSON; estimator failures are reported
/// per method, missing threshold information raises.
inline Json analyze_events(const AnalysisRequest& r) {
  Json j;
  j["events"] = r.t_ion_s.size();
  double t_min = 0.0;
  if (r.t_min_s) {
    t_min = *r.t_min_s;
    j["t_min_source"] = "given";
  } else if (r.control_t_ion_s) {
    t_min = detail::staged("estimate", [&] { return background_threshold(*r.control_t_ion_s); });
    j["t_min_source"] = "control";
    j["control_events"] = r.control_t_ion_s->size();
  } else {
    throw StageError("estimate", "t_min needs a control CSV or an explicit value");
  }
  j["t_min_s"] = t_min;
  for (auto method : {LifetimeMethod::maximum_likelihood, LifetimeMethod::least_squares}) {
    const std::string key(to_string(method));
    try {
      j["lifetime"][key] = detail::lifetime_json(fit_lifetime(r.t_ion_s, t_min, method, r.options));
    } catch (const EstimationError& e) {
      j["lifetime"][key] = {{"error", e.what()}};
    }
  }
  return j;
}

}  // namespace rfion

#endif  // RFION_HARNESS_HPP
