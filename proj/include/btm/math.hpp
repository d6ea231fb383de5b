#pragma once

#include <cmath>
#include <limits>
#include <numbers>

namespace btm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kLogSqrtTwoPi = 0.91893853320467274178;
inline constexpr double kLogTwo = 0.69314718055994530942;

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double inv_logit(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sum_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::fmax(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline double std_normal_pdf(double z) {
  return std::exp(-0.5 * z * z - kLogSqrtTwoPi);
}

inline double std_normal_cdf(double z) {
  return 0.5 * std::erfc(-z / std::numbers::sqrt2);
}

// log N(x | mu, sigma^2)
inline double normal_lpdf(double x, double mu, double sigma) {
  double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - kLogSqrtTwoPi;
}

// log N+(x | 0, sigma^2) for x >= 0
inline double half_normal_lpdf(double x, double sigma) {
  if (x < 0) return kNegInf;
  return kLogTwo + normal_lpdf(x, 0.0, sigma);
}

// log(Phi(b) - Phi(a)) for a < b, evaluated on whichever tail keeps precision.
inline double log_normal_cdf_diff(double a, double b) {
  if (!(a < b)) return kNegInf;
  if (a >= 0) {
    // both in the upper tail: Q(a) - Q(b)
    double qa = 0.5 * std::erfc(a / std::numbers::sqrt2);
    double qb = 0.5 * std::erfc(b / std::numbers::sqrt2);
    return std::log(qa - qb);
  }
  if (b <= 0) {
    return std::log(std_normal_cdf(b) - std_normal_cdf(a));
  }
  double lower_tail = std_normal_cdf(a);
  double upper_tail = 0.5 * std::erfc(b / std::numbers::sqrt2);
  return std::log1p(-(lower_tail + upper_tail));
}

}  // namespace btm
