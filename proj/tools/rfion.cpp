#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rfion/figures.hpp"

namespace fs = std::filesystem;
using namespace rfion;

namespace {

ExperimentConfig config_or_preset(const std::string& arg) {
  if (fs::exists(arg)) return load_config(arg);
  for (const auto& n : preset_names())
    if (n == arg) return preset(arg);
  throw StageError("config", "no such config file or preset: " + arg);
}

template <typename Fn>
int tagged(const char* stage, Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const StageError& e) {
    std::cerr << "rfion: " << e.what() << '\n';
  } catch (const ConfigError& e) {
    std::cerr << "rfion: [config] " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "rfion: [" << stage << "] " << e.what() << '\n';
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photoionization readout simulator"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed, cycles;
  std::optional<unsigned> threads;
  std::optional<std::string> out;
  auto common = [&](CLI::App* s) {
    s->add_option("--seed", seed, "master seed");
    s->add_option("--threads", threads, "worker threads (0 = all cores)");
    s->add_option("--out", out, "output location");
  };

  std::string sim_config;
  std::optional<std::size_t> keep_traces;
  auto* sim = app.add_subcommand("simulate", "run a campaign from a config file or preset name");
  sim->add_option("config", sim_config)->required();
  sim->add_option("--cycles", cycles, "number of cycles");
  sim->add_option("--keep-traces", keep_traces, "event-free traces to store");
  common(sim);

  std::string events_csv;
  std::optional<std::string> control_csv;
  std::optional<double> t_min;
  std::string method = "both";
  auto* ana = app.add_subcommand("analyze", "lifetime fit of an events or detections CSV");
  ana->add_option("events", events_csv)->required();
  ana->add_option("--control", control_csv, "control-run CSV giving t_min");
  ana->add_option("--t-min", t_min, "selection threshold in seconds");
  common(ana);

  std::string tag;
  double scale = 1.0;
  auto* rep = app.add_subcommand("reproduce", "write the CSV tables behind one figure");
  rep->add_option("tag", tag)->required();
  rep->add_option("--scale", scale, "Monte Carlo size multiplier")->check(CLI::PositiveNumber);
  common(rep);

  std::string cal_config;
  SnrTarget target;
  double t0 = *target.t0_s;
  std::size_t windows = 100000;
  auto* cal = app.add_subcommand("calibrate-noise", "fit noise amplitudes to an SNR law");
  cal->add_option("config", cal_config)->required();
  cal->add_option("--snr-1us", target.snr_1us, "target SNR at 1 us");
  cal->add_option("--t0", t0, "target intrinsic integration time in seconds (0 for white noise only)");
  cal->add_option("--windows", windows, "Monte Carlo windows");
  common(cal);

  std::string preset_name;
  auto* pre = app.add_subcommand("preset", "print a preset config");
  pre->add_option("name", preset_name)->required();

  CLI11_PARSE(app, argc, argv);

  if (*sim) {
    return tagged("simulate", [&] {
      auto cfg = config_or_preset(sim_config);
      if (seed) cfg.seed = *seed;
      if (cycles) cfg.cycles = *cycles;
      if (threads) cfg.threads = *threads;
      if (out) cfg.output_dir = *out;
      if (keep_traces) cfg.storage.keep_empty_traces = *keep_traces;
      const auto m = run_experiment(cfg);
      Json j = m.to_json();
      j["summary"] = m.summary;
      std::cout << j.dump(2) << '\n';
    });
  }
  if (*ana) {
    return tagged("analyze", [&] {
      AnalysisRequest r;
      r.t_ion_s = read_event_times(events_csv);
      if (control_csv) r.control_t_ion_s = read_event_times(*control_csv);
      r.t_min_s = t_min;
      if (seed) r.options.seed = *seed;
      const auto j = analyze_events(r);
      if (out) {
        std::ofstream os(*out);
        if (!os) throw StageError("io", "cannot write " + *out);
        os << j.dump(2) << '\n';
      }
      std::cout << j.dump(2) << '\n';
    });
  }
  if (*rep) {
    return tagged("reproduce", [&] {
      FigureOptions o;
      if (seed) o.seed = *seed;
      if (threads) o.threads = *threads;
      o.out_dir = out ? *out : "figures";
      o.scale = scale;
      const auto r = reproduce_figure(tag, o);
      Json j;
      j["tag"] = r.tag;
      j["files"] = Json::array();
      for (const auto& f : r.files) j["files"].push_back(f.string());
      j["summary"] = r.summary;
      std::cout << j.dump(2) << '\n';
    });
  }
  if (*cal) {
    return tagged("calibrate-noise", [&] {
      auto cfg = config_or_preset(cal_config).resolved();
      if (t0 > 0.0)
        target.t0_s = t0;
      else
        target.t0_s.reset();
      const auto c = calibrate_noise(target, cfg.trace.contrast_v(), cfg.trace, seed.value_or(cfg.seed), windows);
      Json j = {{"white_sigma_v", c.noise.white_sigma_v},
                {"telegraph_amplitude_v", c.noise.telegraph_amplitude_v},
                {"telegraph_correlation_s", c.noise.telegraph_correlation_s},
                {"predicted_snr_1us", c.predicted.snr_1us},
                {"predicted_t0_s", c.predicted.t0_s}};
      if (out) {
        auto updated = config_or_preset(cal_config);
        updated.trace.noise = c.noise;
        std::ofstream os(*out);
        if (!os) throw StageError("io", "cannot write " + *out);
        os << dump_config(updated);
      }
      std::cout << j.dump(2) << '\n';
    });
  }
  if (*pre) {
    return tagged("preset", [&] { std::cout << dump_config(preset(preset_name)); });
  }
  return 0;
}
