#include "btm/spline_basis.hpp"

#include <algorithm>
#include <string>

#include "btm/errors.hpp"

namespace btm {

KnotSequence::KnotSequence(std::vector<double> knots, int degree, BoundaryMode mode)
    : knots_(std::move(knots)), degree_(degree), mode_(mode) {
  if (degree_ < 0 || degree_ > kMaxSplineDegree) {
    throw ConfigError("spline degree must be in [0, " + std::to_string(kMaxSplineDegree) +
                      "], got " + std::to_string(degree_));
  }
  if (knots_.size() < 2) {
    throw ConfigError("a knot sequence needs at least two distinct knots");
  }
  for (std::size_t i = 1; i < knots_.size(); ++i) {
    if (!(knots_[i] > knots_[i - 1])) {
      throw ConfigError("knots must be strictly increasing");
    }
  }
  extended_.reserve(knots_.size() + 2 * static_cast<std::size_t>(degree_));
  extended_.insert(extended_.end(), degree_, knots_.front());
  extended_.insert(extended_.end(), knots_.begin(), knots_.end());
  extended_.insert(extended_.end(), degree_, knots_.back());
}

int KnotSequence::find_span(double x) const {
  if (!contains(x)) {
    throw DomainError("spline argument " + std::to_string(x) + " outside knot span [" +
                      std::to_string(lower()) + ", " + std::to_string(upper()) + "]");
  }
  const int last = degree_ + num_knots() - 2;
  if (x >= upper()) return last;
  auto begin = extended_.begin() + degree_;
  auto end = extended_.begin() + last + 1;
  auto it = std::upper_bound(begin, end, x);
  return static_cast<int>(it - extended_.begin()) - 1;
}

namespace {

void check_builder_args(int num_knots, int degree) {
  if (num_knots < 3) {
    throw ConfigError("number of knots must be at least 3, got " + std::to_string(num_knots));
  }
  if (degree < 1) {
    throw ConfigError("spline degree must be at least 1, got " + std::to_string(degree));
  }
}

std::vector<double> unit_grid(int n) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) {
    out[i] = static_cast<double>(i) / static_cast<double>(n - 1);
  }
  return out;
}

using BasisArray = std::array<double, kMaxSplineDegree + 1>;

// Non-zero degree-p basis values at x on span s, written into out[0..p].
void triangular_basis(const std::vector<double>& t, int span, int p, double x,
                      BasisArray& out) {
  out.fill(0.0);
  out[0] = 1.0;
  BasisArray left{}, right{};
  for (int k = 1; k <= p; ++k) {
    left[k] = x - t[span + 1 - k];
    right[k] = t[span + k] - x;
    double saved = 0.0;
    for (int r = 0; r < k; ++r) {
      double denom = right[r + 1] + left[k - r];
      double temp = denom == 0.0 ? 0.0 : out[r] / denom;
      out[r] = saved + right[r + 1] * temp;
      saved = left[k - r] * temp;
    }
    out[k] = saved;
  }
}

}  // namespace

KnotSequence build_knots_mcpr(int num_knots, int degree) {
  check_builder_args(num_knots, degree);
  auto knots = unit_grid(num_knots - 1);
  knots.push_back(kUnboundedKnot);
  return KnotSequence(std::move(knots), degree, BoundaryMode::last_knot_unbounded);
}

KnotSequence build_knots_tfr(int num_knots, int degree) {
  check_builder_args(num_knots, degree);
  auto grid = unit_grid(num_knots - 1);
  std::vector<double> knots;
  knots.reserve(num_knots);
  knots.push_back(-kUnboundedKnot);
  knots.insert(knots.end(), grid.begin(), grid.end());
  return KnotSequence(std::move(knots), degree, BoundaryMode::first_knot_unbounded);
}

LocalBasis basis_local(const KnotSequence& ks, double x, bool with_derivatives) {
  const int p = ks.degree();
  const int span = ks.find_span(x);
  const auto& t = ks.extended();
  LocalBasis out;
  out.first = span - p;
  out.count = p + 1;
  triangular_basis(t, span, p, x, out.values);
  if (!with_derivatives || p == 0) return out;

  BasisArray lower{};
  triangular_basis(t, span, p - 1, x, lower);
  // lower[r] is B_{first + 1 + r, p - 1}
  for (int r = 0; r <= p; ++r) {
    int i = out.first + r;
    double d = 0.0;
    if (r >= 1) {
      double denom = t[i + p] - t[i];
      if (denom != 0.0) d += lower[r - 1] / denom;
    }
    if (r <= p - 1) {
      double denom = t[i + p + 1] - t[i + 1];
      if (denom != 0.0) d -= lower[r] / denom;
    }
    out.derivatives[r] = p * d;
  }
  return out;
}

std::vector<double> basis_eval(const KnotSequence& ks, double x) {
  auto local = basis_local(ks, x, false);
  std::vector<double> out(ks.num_basis(), 0.0);
  for (int r = 0; r < local.count; ++r) {
    out[local.first + r] = local.values[r];
  }
  return out;
}

std::vector<double> basis_deriv(const KnotSequence& ks, double x) {
  auto local = basis_local(ks, x, true);
  std::vector<double> out(ks.num_basis(), 0.0);
  for (int r = 0; r < local.count; ++r) {
    out[local.first + r] = local.derivatives[r];
  }
  return out;
}

double spline_value(const KnotSequence& ks, std::span<const double> coefficients,
                    double x) {
  if (static_cast<int>(coefficients.size()) != ks.num_basis()) {
    throw ConfigError("coefficient count does not match the number of basis functions");
  }
  auto local = basis_local(ks, x, false);
  double sum = 0.0;
  for (int r = 0; r < local.count; ++r) {
    sum += coefficients[local.first + r] * local.values[r];
  }
  return sum;
}

}  // namespace btm
