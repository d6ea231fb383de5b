#pragma once

// Reference implementations used only by the tests. They are written from
// textbook definitions and deliberately share no code with the library.

#include <cmath>
#include <vector>

namespace oracle {

inline double invlogit(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Plain recursive Cox-de Boor on an explicit extended knot vector t.
inline double bspline(const std::vector<double>& t, int j, int d, double x, bool last_span) {
  if (d == 0) {
    if (t[j] <= x && x < t[j + 1]) return 1.0;
    // closed right end: the last non-empty interval owns the endpoint
    if (last_span && x == t[j + 1] && t[j] < t[j + 1]) {
      for (std::size_t k = j + 1; k + 1 < t.size(); ++k) {
        if (t[k] < t[k + 1]) return 0.0;
      }
      return 1.0;
    }
    return 0.0;
  }
  double left = 0.0, right = 0.0;
  if (t[j + d] != t[j]) left = (x - t[j]) / (t[j + d] - t[j]) * bspline(t, j, d - 1, x, last_span);
  if (t[j + d + 1] != t[j + 1]) {
    right = (t[j + d + 1] - x) / (t[j + d + 1] - t[j + 1]) * bspline(t, j + 1, d - 1, x, last_span);
  }
  return left + right;
}

inline std::vector<double> extend(const std::vector<double>& knots, int d) {
  std::vector<double> t(d, knots.front());
  t.insert(t.end(), knots.begin(), knots.end());
  t.insert(t.end(), d, knots.back());
  return t;
}

inline std::vector<double> basis(const std::vector<double>& knots, int d, double x) {
  auto t = extend(knots, d);
  const int J = static_cast<int>(knots.size()) + d - 1;
  std::vector<double> out(J);
  for (int j = 0; j < J; ++j) out[j] = bspline(t, j, d, x, true);
  return out;
}

// Logit-scale logistic growth rate.
inline double logistic_rate_curve(double eta, double upper, double pace) {
  if (eta >= upper) return 0.0;
  return logit(upper * invlogit(logit(eta / upper) + pace)) - logit(eta);
}

// Level of a logistic growth curve after t steps.
inline double logistic_curve(double eta0, double upper, double pace, int t) {
  return upper * invlogit(logit(eta0 / upper) + pace * t);
}

inline double double_logistic(double eta, double dc, const double delta[4]) {
  if (eta <= 1.0) return 0.0;
  const double sum = delta[0] + delta[1] + delta[2] + delta[3];
  const double k = 2.0 * std::log(9.0);
  const double a = -dc / (1.0 + std::exp(-k / delta[0] * (eta - sum + 0.5 * delta[0])));
  const double b = dc / (1.0 + std::exp(-k / delta[2] * (eta - delta[3] - 0.5 * delta[2])));
  return a + b;
}

inline double approx_rate(double x, double upper, double pace) {
  return (x - upper) * pace / (upper * (x - 1.0));
}

}  // namespace oracle
