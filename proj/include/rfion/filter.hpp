#ifndef RFION_FILTER_HPP
#define RFION_FILTER_HPP

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rfion/error.hpp"

namespace rfion {

/// Causal discrete low-pass: `order` identical first-order sections.
///
/// Each section is the exact sampled RC response, y += (1 - a)(x - y) with
/// a = exp(-2 pi f_s dt). For order > 1 the section cutoff is raised so the
/// cascade is -3 dB at `cutoff_hz`. A constant input is reproduced exactly.
class LowPassFilter {
 public:
  LowPassFilter(double cutoff_hz, double sample_rate_hz, int order = 1)
      : cutoff_hz_(cutoff_hz), sample_rate_hz_(sample_rate_hz), order_(order) {
    detail::require_positive(cutoff_hz, "filter cutoff");
    detail::require_positive(sample_rate_hz, "sample rate");
    if (order < 1) throw ConfigError("filter order must be >= 1");
    if (!(cutoff_hz < 0.5 * sample_rate_hz))
      throw ConfigError("filter cutoff " + std::to_string(cutoff_hz) + " Hz is not below Nyquist");
    const double section_cutoff =
        order == 1 ? cutoff_hz : cutoff_hz / std::sqrt(std::pow(2.0, 1.0 / order) - 1.0);
    pole_ = std::exp(-2.0 * std::numbers::pi * section_cutoff / sample_rate_hz);
    state_.assign(static_cast<std::size_t>(order), 0.0);
  }

  double cutoff_hz() const { return cutoff_hz_; }
  double sample_rate_hz() const { return sample_rate_hz_; }
  int order() const { return order_; }
  double pole() const { return pole_; }

  /// Puts every section in steady state for a constant input `x`.
  void reset(double x = 0.0) { state_.assign(state_.size(), x); }

  double step(double x) {
    const double gain = 1.0 - pole_;
    for (double& s : state_) {
      s += gain * (x - s);
      x = s;
    }
    return x;
  }

  /// Filters `in` into a new vector, starting in steady state at in[0].
  std::vector<double> apply(std::span<const double> in) {
    std::vector<double> out(in.size());
    if (in.empty()) return out;
    reset(in.front());
    for (std::size_t n = 0; n < in.size(); ++n) out[n] = step(in[n]);
    return out;
  }

  /// Output/input variance ratio for white input: sum of h[n]^2.
  double noise_gain() const {
    if (order_ == 1) return (1.0 - pole_) / (1.0 + pole_);
    LowPassFilter probe(*this);
    probe.reset(0.0);
    double sum = 0.0;
    double y = probe.step(1.0);
    sum += y * y;
    for (int n = 0; n < 200000; ++n) {
      y = probe.step(0.0);
      sum += y * y;
      if (n > 16 && y * y < 1e-18 * sum) break;
    }
    return sum;
  }

 private:
  double cutoff_hz_;
  double sample_rate_hz_;
  int order_;
  double pole_ = 0.0;
  std::vector<double> state_;
};

}  // namespace rfion

#endif  // RFION_FILTER_HPP
