#ifndef RFION_TESTS_ORACLES_HPP
#define RFION_TESTS_ORACLES_HPP

// Reference computations that share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

namespace oracle {

inline double two_pi() { return 2.0 * std::numbers::pi; }

/// Kolmogorov distribution tail P(K > x).
inline double kolmogorov_tail(double x) {
  if (x < 0.2) return 1.0;
  double s = 0.0;
  for (int k = 1; k < 200; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * x * x);
    s += term;
    if (std::abs(term) < 1e-16) break;
  }
  return std::clamp(s, 0.0, 1.0);
}

/// One-sample KS p-value against Exp(mean), with the finite-n correction of
/// Stephens (1970).
inline double ks_exponential_pvalue(std::vector<double> x, double mean) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double f = 1.0 - std::exp(-x[k] / mean);
    d = std::max({d, f - static_cast<double>(k) / n, static_cast<double>(k + 1) / n - f});
  }
  const double sn = std::sqrt(n);
  return kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
}

/// Per-cycle ionization probability by RK4 integration of the three-state
/// master equation (ground, excited, ionized-absorbing) over the light-on
/// interval and the dark remainder.
inline double ionization_probability_rk4(double excite_rate, double tau_ex, double eta, double bg_rate,
                                         double pulse_s, double dark_s) {
  using S = std::array<double, 3>;
  auto rhs = [&](const S& p, bool light) {
    const double ex = light ? excite_rate : 0.0;
    const double bg = light ? bg_rate : 0.0;
    const double relax = 1.0 / tau_ex;
    S d{};
    d[0] = -(ex + bg) * p[0] + (1.0 - eta) * relax * p[1];
    d[1] = ex * p[0] - (relax + bg) * p[1];
    d[2] = bg * (p[0] + p[1]) + eta * relax * p[1];
    return d;
  };
  auto integrate = [&](S p, double T, bool light) {
    const int steps = 20000;
    const double h = T / steps;
    for (int k = 0; k < steps; ++k) {
      auto add = [](const S& a, const S& b, double w) {
        return S{a[0] + w * b[0], a[1] + w * b[1], a[2] + w * b[2]};
      };
      const S k1 = rhs(p, light);
      const S k2 = rhs(add(p, k1, h / 2), light);
      const S k3 = rhs(add(p, k2, h / 2), light);
      const S k4 = rhs(add(p, k3, h), light);
      for (int j = 0; j < 3; ++j) p[j] += h / 6 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
    }
    return p;
  };
  S p{1.0, 0.0, 0.0};
  if (pulse_s > 0) p = integrate(p, pulse_s, true);
  // Excited population decays in the dark; only the branching share ionizes.
  if (dark_s > 0) p[2] += eta * p[1] * (1.0 - std::exp(-dark_s / tau_ex));
  return p[2];
}

/// 10-90 % rise time of a continuous first-order low-pass.
inline double first_order_rise_time(double cutoff_hz) { return std::log(9.0) / (two_pi() * cutoff_hz); }

/// Output/input variance ratio of y[n] = a y[n-1] + (1-a) x[n], by summing h^2.
inline double first_order_noise_gain(double pole) {
  double s = 0.0, h = 1.0 - pole;
  for (int n = 0; n < 100000; ++n, h *= pole) s += h * h;
  return s;
}

/// Peak of a continuous first-order response to a rectangular pulse.
inline double rectangular_pulse_peak(double cutoff_hz, double width_s) {
  return 1.0 - std::exp(-two_pi() * cutoff_hz * width_s);
}

/// Standard normal upper tail.
inline double normal_tail(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

}  // namespace oracle

#endif  // RFION_TESTS_ORACLES_HPP
