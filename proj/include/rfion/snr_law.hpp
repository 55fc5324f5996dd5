#ifndef RFION_SNR_LAW_HPP
#define RFION_SNR_LAW_HPP

#include <algorithm>
#include <cmath>
#include <vector>

#include "rfion/error.hpp"

namespace rfion {

inline constexpr double kOneMicrosecond = 1e-6;

struct SnrPoint {
  double integration_time_s;
  double snr;
};

/// SNR(t_int) = snr_1us * sqrt((t0 + t_int) / 1 us)
struct SnrFit {
  double snr_1us = 0.0;
  double snr_1us_sigma = 0.0;
  double t0_s = 0.0;
  double t0_sigma_s = 0.0;
  std::vector<SnrPoint> points;

  double predict(double integration_time_s) const {
    return snr_1us * std::sqrt((t0_s + integration_time_s) / kOneMicrosecond);
  }
};

/// Least-squares fit of the integration-time scaling law. A linear fit of
/// SNR^2 against t_int seeds a Gauss-Newton refinement on the SNR residuals.
inline SnrFit fit_snr_scaling(const std::vector<SnrPoint>& points) {
  if (points.size() < 3) throw EstimationError("SNR scaling fit needs at least 3 points");
  const auto [lo, hi] = std::minmax_element(points.begin(), points.end(), [](auto& a, auto& b) {
    return a.integration_time_s < b.integration_time_s;
  });
  if (!(hi->integration_time_s > lo->integration_time_s))
    throw EstimationError("SNR scaling fit: all integration times are equal");
  for (const auto& p : points)
    if (!(p.snr > 0.0) || !std::isfinite(p.snr) || !(p.integration_time_s > 0.0))
      throw EstimationError("SNR scaling fit: points must have positive finite SNR and t_int");

  // SNR^2 = a + b t  (t in microseconds)
  const double n = static_cast<double>(points.size());
  double st = 0, sy = 0, stt = 0, sty = 0;
  for (const auto& p : points) {
    const double t = p.integration_time_s / kOneMicrosecond;
    const double y = p.snr * p.snr;
    st += t;
    sy += y;
    stt += t * t;
    sty += t * y;
  }
  const double b = (n * sty - st * sy) / (n * stt - st * st);
  const double a = (sy - b * st) / n;
  double s1 = std::sqrt(std::max(b, 1e-300));
  double t0 = std::max(a / b, 0.0);

  // Gauss-Newton in (s1, t0[us]).
  double jtj[3] = {0, 0, 0};
  double rss = 0.0;
  for (int it = 0; it < 100; ++it) {
    double g0 = 0, g1 = 0;
    jtj[0] = jtj[1] = jtj[2] = 0;
    rss = 0;
    for (const auto& p : points) {
      const double t = p.integration_time_s / kOneMicrosecond;
      const double root = std::sqrt(t0 + t);
      const double r = p.snr - s1 * root;
      const double d_s1 = root;
      const double d_t0 = s1 / (2.0 * root);
      jtj[0] += d_s1 * d_s1;
      jtj[1] += d_s1 * d_t0;
      jtj[2] += d_t0 * d_t0;
      g0 += d_s1 * r;
      g1 += d_t0 * r;
      rss += r * r;
    }
    const double det = jtj[0] * jtj[2] - jtj[1] * jtj[1];
    if (!(det > 0.0)) break;
    const double ds1 = (jtj[2] * g0 - jtj[1] * g1) / det;
    const double dt0 = (jtj[0] * g1 - jtj[1] * g0) / det;
    s1 += ds1;
    t0 = std::max(t0 + dt0, 0.0);
    if (std::abs(ds1) < 1e-13 * s1 && std::abs(dt0) < 1e-13 * std::max(t0, 1.0)) break;
  }

  SnrFit fit;
  fit.snr_1us = s1;
  fit.t0_s = t0 * kOneMicrosecond;
  fit.points = points;
  const double det = jtj[0] * jtj[2] - jtj[1] * jtj[1];
  if (points.size() > 2 && det > 0.0) {
    const double s2 = rss / (n - 2.0);
    fit.snr_1us_sigma = std::sqrt(s2 * jtj[2] / det);
    fit.t0_sigma_s = std::sqrt(s2 * jtj[0] / det) * kOneMicrosecond;
  }
  return fit;
}

}  // namespace rfion

#endif  // RFION_SNR_LAW_HPP
