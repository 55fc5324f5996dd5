#ifndef RFION_DYNAMICS_HPP
#define RFION_DYNAMICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rfion/error.hpp"
#include "rfion/rng.hpp"

namespace rfion {

/// Rate constants of the (Er ion, trap) system.
///
/// Excitation is a single-photon process linear in power and only runs under
/// resonant light; background ionization runs under any light.
struct PhotophysicsParams {
  double excitation_rate_per_mw = 0.0;  // 1/(s mW)
  double excited_lifetime_s = 492e-9;
  double ionization_branching = 0.2;
  double background_rate_per_mw = 0.0;  // 1/(s mW)
  double reset_time_s = 70.9e-6;

  void validate() const {
    detail::require_non_negative(excitation_rate_per_mw, "excitation rate");
    detail::require_non_negative(background_rate_per_mw, "background rate");
    detail::require_positive(excited_lifetime_s, "excited-state lifetime");
    detail::require_positive(reset_time_s, "reset time constant");
    if (!(ionization_branching >= 0.0 && ionization_branching <= 1.0))
      throw DomainError("ionization branching must lie in [0, 1]");
  }
};

/// One measurement cycle; times are trigger-referenced, `pulse_start_s` is the
/// arrival of light at the device.
struct PulseSchedule {
  double pulse_start_s = 30e-9;
  double pulse_length_s = 100e-9;
  double power_mw = 7.6;
  bool resonant = true;
  double cycle_length_s = 200e-6;

  double pulse_end_s() const { return pulse_start_s + pulse_length_s; }
  double pulse_energy_mw_s() const { return power_mw * pulse_length_s; }

  void validate() const {
    detail::require_non_negative(pulse_start_s, "pulse start");
    detail::require_non_negative(pulse_length_s, "pulse length");
    detail::require_non_negative(power_mw, "laser power");
    detail::require_positive(cycle_length_s, "cycle length");
    if (pulse_end_s() > cycle_length_s) throw DomainError("pulse does not fit within the cycle");
  }
};

enum class Transition : std::uint8_t { excite, relax_benign, relax_ionize, background_ionize, reset };

inline std::string_view to_string(Transition t) {
  switch (t) {
    case Transition::excite: return "excite";
    case Transition::relax_benign: return "relax_benign";
    case Transition::relax_ionize: return "relax_ionize";
    case Transition::background_ionize: return "background_ionize";
    case Transition::reset: return "reset";
  }
  return "?";
}

inline Transition parse_transition(std::string_view s) {
  for (auto t : {Transition::excite, Transition::relax_benign, Transition::relax_ionize,
                 Transition::background_ionize, Transition::reset})
    if (to_string(t) == s) return t;
  throw ConfigError("unknown transition '" + std::string(s) + "'");
}

inline bool is_ionization(Transition t) {
  return t == Transition::relax_ionize || t == Transition::background_ionize;
}

struct Event {
  double time_s;
  Transition transition;
  bool operator==(const Event&) const = default;
};

/// Time interval during which the trap is ionized; `end_s` is +inf when the
/// trap has not reset by the end of the cycle.
struct IonizedInterval {
  double start_s;
  double end_s;
  bool reset_observed() const { return std::isfinite(end_s); }
  double duration_s() const { return end_s - start_s; }
};

/// Ordered transitions of one cycle, starting from (ground, neutral).
struct EventTimeline {
  std::vector<Event> events;

  bool empty() const { return events.empty(); }

  std::optional<double> first_ionization_s() const {
    for (const auto& e : events)
      if (is_ionization(e.transition)) return e.time_s;
    return std::nullopt;
  }

  std::size_t ionization_count() const {
    return static_cast<std::size_t>(std::count_if(
        events.begin(), events.end(), [](const Event& e) { return is_ionization(e.transition); }));
  }

  std::vector<IonizedInterval> ionized_intervals() const {
    std::vector<IonizedInterval> out;
    std::optional<double> open;
    for (const auto& e : events) {
      if (is_ionization(e.transition)) {
        open = e.time_s;
      } else if (e.transition == Transition::reset && open) {
        out.push_back({*open, e.time_s});
        open.reset();
      }
    }
    if (open) out.push_back({*open, std::numeric_limits<double>::infinity()});
    return out;
  }

  /// Replays the timeline through the state machine; false on any illegal step.
  bool is_legal() const {
    bool excited = false;
    bool ionized = false;
    double last = -std::numeric_limits<double>::infinity();
    for (const auto& e : events) {
      if (!(e.time_s > last)) return false;
      last = e.time_s;
      switch (e.transition) {
        case Transition::excite:
          if (excited) return false;
          excited = true;
          break;
        case Transition::relax_benign:
          if (!excited) return false;
          excited = false;
          break;
        case Transition::relax_ionize:
          if (!excited || ionized) return false;
          excited = false;
          ionized = true;
          break;
        case Transition::background_ionize:
          if (ionized) return false;
          ionized = true;
          break;
        case Transition::reset:
          if (!ionized) return false;
          ionized = false;
          break;
      }
    }
    return true;
  }
};

namespace detail {

struct LightSegment {
  double begin;
  double end;
  double power_mw;
};

inline std::array<LightSegment, 3> light_segments(const PulseSchedule& s) {
  return {LightSegment{0.0, s.pulse_start_s, 0.0},
          LightSegment{s.pulse_start_s, s.pulse_end_s(), s.power_mw},
          LightSegment{s.pulse_end_s(), s.cycle_length_s, 0.0}};
}

}  // namespace detail

/// Exact stochastic simulation of one cycle (direct-method Gillespie with
/// piecewise-constant light). Deterministic for a given seed.
inline EventTimeline simulate_cycle(const PulseSchedule& schedule, const PhotophysicsParams& p,
                                    std::uint64_t seed) {
  EventTimeline tl;
  if (schedule.power_mw == 0.0 || schedule.pulse_length_s == 0.0) return tl;

  Rng rng(seed);
  bool excited = false;
  bool ionized = false;
  const double relax_rate = 1.0 / p.excited_lifetime_s;
  const double reset_rate = 1.0 / p.reset_time_s;

  for (const auto& seg : detail::light_segments(schedule)) {
    const double k_ex = schedule.resonant ? p.excitation_rate_per_mw * seg.power_mw : 0.0;
    const double k_bg = p.background_rate_per_mw * seg.power_mw;
    double t = seg.begin;
    while (true) {
      const double r_excite = excited ? 0.0 : k_ex;
      const double r_relax = excited ? relax_rate : 0.0;
      const double r_background = ionized ? 0.0 : k_bg;
      const double r_reset = ionized ? reset_rate : 0.0;
      const double total = r_excite + r_relax + r_background + r_reset;
      if (total <= 0.0) break;
      t += exponential_draw(rng, total);
      if (!(t < seg.end)) break;

      double u = uniform01(rng) * total;
      if (u < r_excite) {
        excited = true;
        tl.events.push_back({t, Transition::excite});
      } else if ((u -= r_excite) < r_relax) {
        excited = false;
        const bool ionizes = !ionized && uniform01(rng) < p.ionization_branching;
        if (ionizes) ionized = true;
        tl.events.push_back({t, ionizes ? Transition::relax_ionize : Transition::relax_benign});
      } else if ((u -= r_relax) < r_background) {
        ionized = true;
        tl.events.push_back({t, Transition::background_ionize});
      } else {
        ionized = false;
        tl.events.push_back({t, Transition::reset});
      }
    }
  }
  return tl;
}

namespace detail {

using Mat2 = std::array<double, 4>;  // row-major

/// exp(M t) for a real 2x2 matrix with real eigenvalues, closed form.
inline Mat2 expm2(const Mat2& m, double t) {
  const double a = m[0] * t, b = m[1] * t, c = m[2] * t, d = m[3] * t;
  const double mean = 0.5 * (a + d);
  const double half = 0.5 * (a - d);
  const double disc = half * half + b * c;
  double ch, sh_over;  // cosh(delta), sinh(delta)/delta
  if (disc >= 0.0) {
    const double delta = std::sqrt(disc);
    ch = std::cosh(delta);
    sh_over = delta < 1e-8 ? 1.0 + delta * delta / 6.0 : std::sinh(delta) / delta;
  } else {
    const double delta = std::sqrt(-disc);
    ch = std::cos(delta);
    sh_over = delta < 1e-8 ? 1.0 - delta * delta / 6.0 : std::sin(delta) / delta;
  }
  const double e = std::exp(mean);
  return {e * (ch + sh_over * half), e * sh_over * b, e * sh_over * c, e * (ch - sh_over * half)};
}

}  // namespace detail

/// Closed-form probability of at least one ionization within a cycle.
///
/// The trap-neutral sub-chain {ground, excited} is propagated through the
/// pulse with its 2x2 generator (ionization is absorbing); after the pulse an
/// excited ion still ionizes with probability eta if it relaxes in the cycle.
inline double ionization_probability(const PulseSchedule& s, const PhotophysicsParams& p) {
  s.validate();
  p.validate();
  if (s.power_mw == 0.0 || s.pulse_length_s == 0.0) return 0.0;
  const double k_ex = s.resonant ? p.excitation_rate_per_mw * s.power_mw : 0.0;
  const double k_bg = p.background_rate_per_mw * s.power_mw;
  if (k_ex == 0.0 && k_bg == 0.0) return 0.0;
  const double k_relax = 1.0 / p.excited_lifetime_s;
  const double eta = p.ionization_branching;

  // d/dt (g, e) = M (g, e)
  const detail::Mat2 m{-(k_ex + k_bg), (1.0 - eta) * k_relax, k_ex, -(k_relax + k_bg)};
  const auto prop = detail::expm2(m, s.pulse_length_s);
  const double g = prop[0];
  const double e = prop[2];
  const double remaining = s.cycle_length_s - s.pulse_end_s();
  const double late_ionize = eta * -std::expm1(-remaining * k_relax);
  const double survive = g + e * (1.0 - late_ionize);
  return std::clamp(1.0 - survive, 0.0, 1.0);
}

/// Background rate giving per-cycle ionization probability `target` for a
/// light pulse of the schedule's energy (Poisson process).
inline double background_rate_for_probability(const PulseSchedule& s, double target) {
  if (!(target >= 0.0 && target < 1.0)) throw DomainError("target probability must lie in [0, 1)");
  detail::require_positive(s.power_mw * s.pulse_length_s, "pulse energy");
  return -std::log1p(-target) / (s.power_mw * s.pulse_length_s);
}

/// Excitation rate per mW such that the total per-cycle ionization
/// probability (ion-driven plus background) equals `target`. Bisection on the
/// monotone closed form.
inline double excitation_rate_for_probability(const PulseSchedule& s, PhotophysicsParams p,
                                              double target) {
  PulseSchedule resonant = s;
  resonant.resonant = true;
  p.excitation_rate_per_mw = 0.0;
  const double floor = ionization_probability(resonant, p);
  if (!(target >= floor)) throw DomainError("target probability is below the background floor");
  double lo = 0.0;
  double hi = 1.0;
  auto prob = [&](double k) {
    p.excitation_rate_per_mw = k;
    return ionization_probability(resonant, p);
  };
  while (prob(hi) < target) {
    hi *= 2.0;
    if (hi > 1e30) throw DomainError("target probability unreachable");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (prob(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// N(t): number of samples whose first ionization is later than t.
inline std::vector<std::size_t> survival_counts(std::vector<double> first_ionization_s,
                                                const std::vector<double>& grid_s) {
  std::vector<std::size_t> out;
  if (first_ionization_s.empty()) return out;
  std::sort(first_ionization_s.begin(), first_ionization_s.end());
  out.reserve(grid_s.size());
  for (double t : grid_s) {
    const auto it = std::upper_bound(first_ionization_s.begin(), first_ionization_s.end(), t);
    out.push_back(static_cast<std::size_t>(first_ionization_s.end() - it));
  }
  return out;
}

inline std::vector<std::size_t> survival_counts(const std::vector<EventTimeline>& timelines,
                                                const std::vector<double>& grid_s) {
  std::vector<double> firsts;
  firsts.reserve(timelines.size());
  for (const auto& tl : timelines) {
    const auto t = tl.first_ionization_s();
    if (!t) throw EstimationError("survival_counts: timeline without an ionization");
    firsts.push_back(*t);
  }
  return survival_counts(std::move(firsts), grid_s);
}

// Line-oriented archival format: "cycle_id,time_s,transition".

inline void write_timeline_header(std::ostream& os) { os << "cycle_id,time_s,transition\n"; }

inline void write_timeline_records(std::ostream& os, std::uint64_t cycle_id, const EventTimeline& tl) {
  const auto old = os.precision(17);
  for (const auto& e : tl.events) os << cycle_id << ',' << e.time_s << ',' << to_string(e.transition) << '\n';
  os.precision(old);
}

/// Parses records back into (cycle_id, timeline) pairs, in file order.
inline std::vector<std::pair<std::uint64_t, EventTimeline>> read_timeline_records(std::istream& is) {
  std::vector<std::pair<std::uint64_t, EventTimeline>> out;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("cycle_id", 0) == 0) continue;
    }
    std::istringstream ls(line);
    std::string id, time, name;
    if (!std::getline(ls, id, ',') || !std::getline(ls, time, ',') || !std::getline(ls, name))
      throw ConfigError("malformed timeline record: " + line);
    const std::uint64_t cycle = std::stoull(id);
    if (out.empty() || out.back().first != cycle) out.push_back({cycle, {}});
    out.back().second.events.push_back({std::stod(time), parse_transition(name)});
  }
  return out;
}

}  // namespace rfion

#endif  // RFION_DYNAMICS_HPP
