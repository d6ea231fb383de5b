#pragma once

// B-spline knot sequences and basis evaluation via the Cox-de Boor recursion.
//
// Basis functions are indexed 0..J-1 with J = K + d - 1, where K is the
// number of distinct knots and d the degree. The extended knot vector repeats
// the first and last distinct knot d extra times, so basis j is supported on
// [extended[j], extended[j + d + 1]].

#include <array>
#include <span>
#include <vector>

namespace btm {

enum class BoundaryMode { finite, last_knot_unbounded, first_knot_unbounded };

// Stand-in for an infinite outer knot.
inline constexpr double kUnboundedKnot = 1000.0;

inline constexpr int kMaxSplineDegree = 7;

class KnotSequence {
 public:
  KnotSequence(std::vector<double> knots, int degree,
               BoundaryMode mode = BoundaryMode::finite);

  const std::vector<double>& knots() const { return knots_; }
  const std::vector<double>& extended() const { return extended_; }
  int degree() const { return degree_; }
  int num_knots() const { return static_cast<int>(knots_.size()); }
  int num_basis() const { return num_knots() + degree_ - 1; }
  double lower() const { return knots_.front(); }
  double upper() const { return knots_.back(); }
  BoundaryMode boundary_mode() const { return mode_; }

  bool contains(double x) const { return x >= lower() && x <= upper(); }

  // Index s into extended() with extended[s] <= x < extended[s + 1] and
  // d <= s < d + K - 1. The right endpoint maps to the last non-empty span.
  int find_span(double x) const;

 private:
  std::vector<double> knots_;
  std::vector<double> extended_;
  int degree_;
  BoundaryMode mode_;
};

// K - 1 evenly spaced knots on [0, 1] plus an unbounded last knot.
KnotSequence build_knots_mcpr(int num_knots, int degree);

// An unbounded first knot plus K - 1 evenly spaced knots on [0, 1].
KnotSequence build_knots_tfr(int num_knots, int degree);

// The d + 1 possibly non-zero basis functions at x: indices first..first+d.
struct LocalBasis {
  int first = 0;
  int count = 0;
  std::array<double, kMaxSplineDegree + 1> values{};
  std::array<double, kMaxSplineDegree + 1> derivatives{};  // zero unless requested
};

LocalBasis basis_local(const KnotSequence& ks, double x, bool with_derivatives);

// Dense vector of all J basis values at x.
std::vector<double> basis_eval(const KnotSequence& ks, double x);

// Dense vector of all J basis derivatives at x.
std::vector<double> basis_deriv(const KnotSequence& ks, double x);

// Sum of coefficients[j] * B_j(x).
double spline_value(const KnotSequence& ks, std::span<const double> coefficients,
                    double x);

}  // namespace btm
