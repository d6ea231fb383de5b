#include "btm/transition.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "btm/errors.hpp"
#include "btm/math.hpp"

namespace btm {

CoefficientRange free_coefficients(CoefficientFamily family, const KnotSequence& ks) {
  const int J = ks.num_basis();
  const int d = ks.degree();
  CoefficientRange range;
  switch (family) {
    case CoefficientFamily::mcpr_constraints:
    case CoefficientFamily::approx_logistic:
      range = {0, J - d - 1};
      break;
    case CoefficientFamily::tfr_constraints:
      range = {d + 1, J - d - 1};
      break;
  }
  if (range.size() <= 0) {
    throw ConfigError("knot sequence with " + std::to_string(ks.num_knots()) +
                      " knots and degree " + std::to_string(d) +
                      " leaves no free spline coefficients");
  }
  return range;
}

double mcpr_coefficient(double raw) { return 0.01 + 0.29 * inv_logit(raw); }

double mcpr_coefficient_grad(double raw) {
  double p = inv_logit(raw);
  return 0.29 * p * (1.0 - p);
}

double tfr_coefficient(double raw) { return -0.01 - 2.49 * inv_logit(raw); }

double tfr_coefficient_grad(double raw) {
  double p = inv_logit(raw);
  return -2.49 * p * (1.0 - p);
}

SplineCoefficients constrain_coefficients(std::span<const double> raw,
                                          CoefficientFamily family,
                                          const KnotSequence& ks) {
  const int J = ks.num_basis();
  if (static_cast<int>(raw.size()) != J) {
    throw ConfigError("expected " + std::to_string(J) + " raw spline coefficients, got " +
                      std::to_string(raw.size()));
  }
  if (family == CoefficientFamily::approx_logistic) {
    throw ConfigError("approx-logistic coefficients are derived from (upper, pace)");
  }
  auto range = free_coefficients(family, ks);
  SplineCoefficients out;
  out.family = family;
  out.raw.assign(raw.begin(), raw.end());
  out.constrained.assign(J, 0.0);
  for (int j = range.begin; j < range.end; ++j) {
    out.constrained[j] = family == CoefficientFamily::mcpr_constraints
                             ? mcpr_coefficient(raw[j])
                             : tfr_coefficient(raw[j]);
  }
  return out;
}

double scaled_level(double eta, const AsymptotePair& asymptotes) {
  return (eta - asymptotes.lower) / (asymptotes.upper - asymptotes.lower);
}

namespace {

void check_asymptotes(const AsymptotePair& a) {
  if (!(a.upper > a.lower)) {
    throw DomainError("upper asymptote must exceed the lower asymptote");
  }
}

}  // namespace

BsplinePartials f_bspline_partials(double eta, const AsymptotePair& asymptotes,
                                   std::span<const double> coefficients,
                                   const KnotSequence& ks) {
  check_asymptotes(asymptotes);
  if (static_cast<int>(coefficients.size()) != ks.num_basis()) {
    throw ConfigError("coefficient count does not match the number of basis functions");
  }
  const double width = asymptotes.upper - asymptotes.lower;
  const double x = (eta - asymptotes.lower) / width;
  BsplinePartials out;
  out.basis = basis_local(ks, x, true);
  double value = 0.0;
  double slope = 0.0;
  for (int r = 0; r < out.basis.count; ++r) {
    double c = coefficients[out.basis.first + r];
    value += c * out.basis.values[r];
    slope += c * out.basis.derivatives[r];
  }
  out.value = value;
  out.d_eta = slope / width;
  out.d_upper = -slope * x / width;
  return out;
}

double f_bspline(double eta, const AsymptotePair& asymptotes,
                 std::span<const double> coefficients, const KnotSequence& ks) {
  check_asymptotes(asymptotes);
  return spline_value(ks, coefficients, scaled_level(eta, asymptotes));
}

double f_bspline_deriv_eta(double eta, const AsymptotePair& asymptotes,
                           std::span<const double> coefficients, const KnotSequence& ks) {
  return f_bspline_partials(eta, asymptotes, coefficients, ks).d_eta;
}

namespace {

void check_logistic_args(double eta, double upper, double pace) {
  if (!(eta > 0.0)) {
    throw DomainError("logistic transition requires a positive level, got " +
                      std::to_string(eta));
  }
  if (!(upper > 0.0 && upper < 1.0)) {
    throw DomainError("logistic asymptote must lie in (0, 1)");
  }
  if (!(pace >= 0.0)) {
    throw DomainError("logistic pace must be non-negative");
  }
}

}  // namespace

double f_logistic(double eta, double upper, double pace) {
  check_logistic_args(eta, upper, pace);
  if (eta >= upper) return 0.0;
  double moved = upper * inv_logit(logit(eta / upper) + pace);
  return logit(moved) - logit(eta);
}

double f_logistic_deriv_eta(double eta, double upper, double pace) {
  check_logistic_args(eta, upper, pace);
  if (eta >= upper) return 0.0;
  double u = eta / upper;
  double s = inv_logit(logit(u) + pace);
  double v = upper * s;
  return s * (1.0 - s) / (v * (1.0 - v) * u * (1.0 - u)) - 1.0 / (eta * (1.0 - eta));
}

namespace {

void check_double_logistic(const DoubleLogisticParams& p) {
  for (double r : p.ranges) {
    if (!(r > 0.0)) {
      throw DomainError("double-logistic ranges must be positive");
    }
  }
  if (!(p.max_decrement >= 0.0)) {
    throw DomainError("double-logistic maximum decrement must be non-negative");
  }
}

struct DoubleLogisticTerms {
  double first;   // sigmoid of the descending term
  double second;  // sigmoid of the ascending term
  double slope_first;
  double slope_second;
};

DoubleLogisticTerms double_logistic_terms(double eta, const DoubleLogisticParams& p) {
  const double log9x2 = 2.0 * std::log(9.0);
  const auto& D = p.ranges;
  const double total = D[0] + D[1] + D[2] + D[3];
  DoubleLogisticTerms t;
  t.slope_first = log9x2 / D[0];
  t.slope_second = log9x2 / D[2];
  t.first = inv_logit(t.slope_first * (eta - total + 0.5 * D[0]));
  t.second = inv_logit(t.slope_second * (eta - D[3] - 0.5 * D[2]));
  return t;
}

}  // namespace

double f_double_logistic(double eta, const DoubleLogisticParams& p) {
  check_double_logistic(p);
  if (eta <= 1.0) return 0.0;
  auto t = double_logistic_terms(eta, p);
  return -p.max_decrement * t.first + p.max_decrement * t.second;
}

double f_double_logistic_deriv_eta(double eta, const DoubleLogisticParams& p) {
  check_double_logistic(p);
  if (eta <= 1.0) return 0.0;
  auto t = double_logistic_terms(eta, p);
  return p.max_decrement * (-t.first * (1.0 - t.first) * t.slope_first +
                            t.second * (1.0 - t.second) * t.slope_second);
}

double logistic_rate(double level, double upper, double pace) {
  return ((level - upper) * pace) / (upper * (level - 1.0));
}

double basis_argmax(const KnotSequence& ks, int j) {
  const int d = ks.degree();
  if (j < 0 || j >= ks.num_basis()) {
    throw ConfigError("basis index out of range");
  }
  const auto& t = ks.extended();
  double a = std::max(t[j], 0.0);
  double b = std::min(t[j + d + 1], 1.0);
  if (!(b >= a)) {
    throw DomainError("basis " + std::to_string(j) + " has no support on [0, 1]");
  }
  auto value = [&](double x) {
    auto local = basis_local(ks, x, false);
    int r = j - local.first;
    return (r >= 0 && r < local.count) ? local.values[r] : 0.0;
  };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double e = a + inv_phi * (b - a);
  double fc = value(c);
  double fe = value(e);
  while (b - a > 1e-10) {
    if (fc >= fe) {
      b = e;
      e = c;
      fe = fc;
      c = b - inv_phi * (b - a);
      fc = value(c);
    } else {
      a = c;
      c = e;
      fc = fe;
      e = a + inv_phi * (b - a);
      fe = value(e);
    }
  }
  double x = 0.5 * (a + b);
  // Monotone bases peak at an end point of the clipped support.
  if (value(a) > value(x)) x = a;
  if (value(b) > value(x)) x = b;
  return x;
}

std::vector<double> approx_logistic_anchors(const KnotSequence& ks) {
  auto range = free_coefficients(CoefficientFamily::approx_logistic, ks);
  std::vector<double> anchors(range.size());
  for (int j = range.begin; j < range.end; ++j) {
    double x = basis_argmax(ks, j);
    if (x >= 1.0 - 1e-9) {
      throw DomainError("basis " + std::to_string(j) +
                        " peaks at the asymptote; approx-logistic coefficients are undefined");
    }
    anchors[j - range.begin] = x;
  }
  return anchors;
}

SplineCoefficients approx_logistic_coefficients(double upper, double pace,
                                                const KnotSequence& ks) {
  if (!(upper > 0.0 && upper < 1.0)) {
    throw DomainError("logistic asymptote must lie in (0, 1)");
  }
  if (!(pace >= 0.0)) {
    throw DomainError("logistic pace must be non-negative");
  }
  auto range = free_coefficients(CoefficientFamily::approx_logistic, ks);
  auto anchors = approx_logistic_anchors(ks);
  SplineCoefficients out;
  out.family = CoefficientFamily::approx_logistic;
  out.constrained.assign(ks.num_basis(), 0.0);
  for (int j = range.begin; j < range.end; ++j) {
    // The basis argument is the level scaled by the asymptote.
    out.constrained[j] = logistic_rate(anchors[j - range.begin] * upper, upper, pace);
  }
  return out;
}

}  // namespace btm
