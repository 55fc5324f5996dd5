#ifndef RFION_CIRCUIT_HPP
#define RFION_CIRCUIT_HPP

#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>
#include <vector>

#include "rfion/error.hpp"

namespace rfion {

/// Lumped-element constants of the reflectometry tank circuit.
///
/// Topology: a series inductor feeding the device resistance in parallel with
/// the parasitic capacitance, probed through a line of impedance Z0.
struct ResonatorParams {
  double inductance_h = 470e-9;
  double parasitic_capacitance_f = 490.1e-15;
  double loaded_q = 65.0;
  double line_impedance_ohm = 50.0;
  double device_resistance_neutral_ohm = 19.18e3;
  double device_resistance_ionized_ohm = 20.5e3;

  void validate() const {
    detail::require_positive(inductance_h, "inductance");
    detail::require_positive(parasitic_capacitance_f, "parasitic capacitance");
    detail::require_positive(line_impedance_ohm, "line impedance");
    detail::require_positive(device_resistance_neutral_ohm, "neutral device resistance");
    detail::require_positive(device_resistance_ionized_ohm, "ionized device resistance");
    if (!(loaded_q > 1.0)) throw DomainError("loaded quality factor must exceed 1");
    if (!std::isfinite(device_resistance_neutral_ohm) ||
        !std::isfinite(device_resistance_ionized_ohm))
      throw DomainError("device resistances must be finite");
    if (device_resistance_neutral_ohm == device_resistance_ionized_ohm)
      throw DomainError("device resistance must differ between charge states");
  }
};

inline double resonant_frequency(double inductance_h, double capacitance_f) {
  detail::require_positive(inductance_h, "inductance");
  detail::require_positive(capacitance_f, "capacitance");
  return 1.0 / (2.0 * std::numbers::pi * std::sqrt(inductance_h * capacitance_f));
}

inline double resonant_frequency(const ResonatorParams& p) {
  return resonant_frequency(p.inductance_h, p.parasitic_capacitance_f);
}

inline double resonator_bandwidth(double resonant_frequency_hz, double loaded_q) {
  detail::require_positive(resonant_frequency_hz, "resonant frequency");
  detail::require_positive(loaded_q, "quality factor");
  return resonant_frequency_hz / loaded_q;
}

/// Input impedance seen from the line: jwL + (R || 1/jwC).
inline std::complex<double> input_impedance(double frequency_hz, const ResonatorParams& p,
                                            double device_resistance_ohm) {
  detail::require_positive(frequency_hz, "frequency");
  detail::require_non_negative(device_resistance_ohm, "device resistance");
  const double w = 2.0 * std::numbers::pi * frequency_hz;
  const std::complex<double> j(0.0, 1.0);
  const std::complex<double> z_l = j * w * p.inductance_h;
  if (std::isinf(device_resistance_ohm)) return z_l + 1.0 / (j * w * p.parasitic_capacitance_f);
  const std::complex<double> z_rc =
      device_resistance_ohm / (1.0 + j * w * device_resistance_ohm * p.parasitic_capacitance_f);
  return z_l + z_rc;
}

inline double reflection_magnitude(double frequency_hz, const ResonatorParams& p,
                                   double device_resistance_ohm) {
  const auto z = input_impedance(frequency_hz, p, device_resistance_ohm);
  return std::abs((z - p.line_impedance_ohm) / (z + p.line_impedance_ohm));
}

/// Device resistance and frequency at which the tank presents exactly Z0.
struct MatchingPoint {
  double resistance_ohm;
  double frequency_hz;
};

inline MatchingPoint matching_point(const ResonatorParams& p) {
  const double r = p.inductance_h / (p.parasitic_capacitance_f * p.line_impedance_ohm);
  const double qp2 = r / p.line_impedance_ohm - 1.0;
  if (!(qp2 > 0.0)) throw DomainError("circuit cannot be matched: L/(C Z0) <= Z0");
  const double w = std::sqrt(qp2) / (r * p.parasitic_capacitance_f);
  return {r, w / (2.0 * std::numbers::pi)};
}

struct SweepPoint {
  double frequency_hz;
  double gamma_magnitude;
};

inline std::vector<SweepPoint> reflection_sweep(const ResonatorParams& p, double device_resistance_ohm,
                                                double f_start_hz, double f_stop_hz,
                                                std::size_t points) {
  detail::require_positive(f_start_hz, "sweep start");
  if (!(f_stop_hz > f_start_hz) || points < 2) throw DomainError("invalid sweep range");
  std::vector<SweepPoint> out;
  out.reserve(points);
  for (std::size_t k = 0; k < points; ++k) {
    const double f = f_start_hz + (f_stop_hz - f_start_hz) * static_cast<double>(k) /
                                      static_cast<double>(points - 1);
    out.push_back({f, reflection_magnitude(f, p, device_resistance_ohm)});
  }
  return out;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepPoint>& sweep) {
  os << "frequency_hz,gamma_magnitude\n";
  os.precision(17);
  for (const auto& s : sweep) os << s.frequency_hz << ',' << s.gamma_magnitude << '\n';
}

enum class ChargeState { neutral, ionized };

/// Charge-sensor transfer: reflected amplitude versus gate voltage.
///
/// The Coulomb peak is a thermally broadened sech^2 profile. Its baseline and
/// height are solved so that the two charge states give exactly
/// `level_neutral_v` and `level_ionized_v` at the operating point; the ionized
/// curve is the neutral one shifted by `charge_shift_v` along the gate axis.
struct SensorTransfer {
  double peak_center_v = 0.520;
  double peak_width_v = 2e-3;
  double level_neutral_v = 0.150;
  double level_ionized_v = 0.138;
  double charge_shift_v = 1e-3;
  double operating_point_v = 0.518;

  double contrast() const { return level_ionized_v - level_neutral_v; }

  void validate() const {
    detail::require_positive(peak_width_v, "peak width");
    if (level_neutral_v == level_ionized_v)
      throw DomainError("charge-state levels must differ at the operating point");
    if (charge_shift_v == 0.0) throw DomainError("zero charge shift cannot produce contrast");
  }
};

namespace detail {

inline double sech2(double u) {
  const double c = std::cosh(u);
  return 1.0 / (c * c);
}

struct Lineshape {
  double base;
  double height;
};

inline Lineshape solve_lineshape(const SensorTransfer& s) {
  const double g0 = sech2((s.operating_point_v - s.peak_center_v) / s.peak_width_v);
  const double g1 =
      sech2((s.operating_point_v - s.peak_center_v - s.charge_shift_v) / s.peak_width_v);
  // Degenerate geometry (no shift, or V_m symmetric about the two peaks): both
  // charge states read the same value, so anchor the curve on the neutral level.
  if (g0 == g1) return {0.0, s.level_neutral_v / g0};
  const double height = (s.level_neutral_v - s.level_ionized_v) / (g0 - g1);
  return {s.level_neutral_v - height * g0, height};
}

}  // namespace detail

inline double sensor_level(ChargeState charge, double gate_v, const SensorTransfer& s) {
  const auto shape = detail::solve_lineshape(s);
  const double center = s.peak_center_v + (charge == ChargeState::ionized ? s.charge_shift_v : 0.0);
  return shape.base + shape.height * detail::sech2((gate_v - center) / s.peak_width_v);
}

}  // namespace rfion

#endif  // RFION_CIRCUIT_HPP
