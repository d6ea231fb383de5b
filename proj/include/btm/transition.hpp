#pragma once

// Transition functions: the systematic rate of change of an indicator as a
// function of its level.

#include <array>
#include <span>
#include <vector>

#include "btm/spline_basis.hpp"

namespace btm {

struct AsymptotePair {
  double lower = 0.0;
  double upper = 1.0;
};

enum class CoefficientFamily { mcpr_constraints, tfr_constraints, approx_logistic };

// Half-open range [begin, end) of spline coefficients that are free
// parameters; every other coefficient is pinned to zero.
struct CoefficientRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool contains(int j) const { return j >= begin && j < end; }
};

CoefficientRange free_coefficients(CoefficientFamily family, const KnotSequence& ks);

// h(x) = 0.01 + 0.29 * logit^-1(x), in (0.01, 0.3)
double mcpr_coefficient(double raw);
double mcpr_coefficient_grad(double raw);

// h(x) = -0.01 - 2.49 * logit^-1(x), in (-2.5, -0.01)
double tfr_coefficient(double raw);
double tfr_coefficient_grad(double raw);

struct SplineCoefficients {
  std::vector<double> raw;
  std::vector<double> constrained;
  CoefficientFamily family = CoefficientFamily::mcpr_constraints;
};

// Applies the family's transform to the free entries of `raw` (length J) and
// zeroes the rest.
SplineCoefficients constrain_coefficients(std::span<const double> raw,
                                          CoefficientFamily family,
                                          const KnotSequence& ks);

// (eta - lower) / (upper - lower)
double scaled_level(double eta, const AsymptotePair& asymptotes);

double f_bspline(double eta, const AsymptotePair& asymptotes,
                 std::span<const double> coefficients, const KnotSequence& ks);

inline double f_bspline(double eta, const AsymptotePair& asymptotes,
                        const SplineCoefficients& beta, const KnotSequence& ks) {
  return f_bspline(eta, asymptotes, beta.constrained, ks);
}

// Value and first-order partials of f_bspline. The partial with respect to
// coefficient (basis.first + r) is basis.values[r].
struct BsplinePartials {
  double value = 0.0;
  double d_eta = 0.0;
  double d_upper = 0.0;
  LocalBasis basis;
};

BsplinePartials f_bspline_partials(double eta, const AsymptotePair& asymptotes,
                                   std::span<const double> coefficients,
                                   const KnotSequence& ks);

double f_bspline_deriv_eta(double eta, const AsymptotePair& asymptotes,
                           std::span<const double> coefficients, const KnotSequence& ks);

// Logit-scale growth rate of a logistic curve with asymptote `upper` and pace
// `pace`; zero at and above the asymptote.
double f_logistic(double eta, double upper, double pace);
double f_logistic_deriv_eta(double eta, double upper, double pace);

struct DoubleLogisticParams {
  double max_decrement = 0.0;     // d_c
  std::array<double, 4> ranges{};  // Delta_{c,1..4}
};

double f_double_logistic(double eta, const DoubleLogisticParams& p);
double f_double_logistic_deriv_eta(double eta, const DoubleLogisticParams& p);

// l(x, upper, pace) = ((x - upper) * pace) / (upper * (x - 1))
double logistic_rate(double level, double upper, double pace);

// Maximizer of basis j over its support clipped to [0, 1], by golden-section
// search to 1e-10.
double basis_argmax(const KnotSequence& ks, int j);

// Argmax of every free approx-logistic basis, cached by the models.
std::vector<double> approx_logistic_anchors(const KnotSequence& ks);

// Coefficients tracing the logistic transition: coefficient j is the
// logistic rate at the level where basis j peaks (lower asymptote zero).
SplineCoefficients approx_logistic_coefficients(double upper, double pace,
                                                const KnotSequence& ks);

}  // namespace btm
