#include <doctest.h>

#include <random>

#include "btm/errors.hpp"
#include "btm/transition.hpp"
#include "oracles.hpp"

using namespace btm;

namespace {

std::vector<double> raw_all(const KnotSequence& ks, double v) { return std::vector<double>(ks.num_basis(), v); }

template <class F>
double central(F f, double x, double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

}  // namespace

TEST_CASE("coefficient transforms respect their ranges") {
  CHECK(mcpr_coefficient(-50.0) == doctest::Approx(0.01));
  CHECK(mcpr_coefficient(50.0) == doctest::Approx(0.30));
  CHECK(tfr_coefficient(-50.0) == doctest::Approx(-0.01));
  CHECK(tfr_coefficient(50.0) == doctest::Approx(-2.50));
  for (double x : {-3.0, -0.2, 0.0, 1.7}) {
    CHECK(mcpr_coefficient_grad(x) == doctest::Approx(central(mcpr_coefficient, x)).epsilon(1e-7));
    CHECK(tfr_coefficient_grad(x) == doctest::Approx(central(tfr_coefficient, x)).epsilon(1e-7));
  }
}

TEST_CASE("constrained coefficient layout") {
  auto ks = build_knots_mcpr(5, 2);
  std::vector<double> raw{-1.0, 0.0, 2.0, 5.0, 5.0, 5.0};
  auto m = constrain_coefficients(raw, CoefficientFamily::mcpr_constraints, ks);
  REQUIRE(m.constrained.size() == 6);
  for (int j = 0; j < 3; ++j) {
    CHECK(m.constrained[j] == doctest::Approx(0.01 + 0.29 * oracle::invlogit(raw[j])));
    CHECK(m.constrained[j] >= 0.01);
  }
  for (int j = 3; j < 6; ++j) CHECK(m.constrained[j] == 0.0);

  auto kt = build_knots_tfr(7, 2);
  auto t = constrain_coefficients(raw_all(kt, 0.3), CoefficientFamily::tfr_constraints, kt);
  REQUIRE(t.constrained.size() == 8);
  for (int j = 0; j < 8; ++j) {
    if (j >= 3 && j < 5) {
      CHECK(t.constrained[j] == doctest::Approx(-0.01 - 2.49 * oracle::invlogit(0.3)));
    } else {
      CHECK(t.constrained[j] == 0.0);
    }
  }
  CHECK_THROWS_AS(free_coefficients(CoefficientFamily::tfr_constraints, build_knots_tfr(5, 2)),
                  ConfigError);
  CHECK_THROWS_AS(constrain_coefficients(std::vector<double>(3, 0.0),
                                         CoefficientFamily::mcpr_constraints, ks),
                  ConfigError);
}

TEST_CASE("B-spline transition vanishes at and above the upper asymptote") {
  auto ks = build_knots_mcpr(5, 2);
  auto beta = constrain_coefficients(std::vector<double>{0.4, -0.3, 1.2, 0, 0, 0},
                                     CoefficientFamily::mcpr_constraints, ks);
  AsymptotePair asym{0.0, 0.8};
  CHECK(f_bspline(0.8, asym, beta, ks) == 0.0);
  CHECK(f_bspline(0.93, asym, beta, ks) == 0.0);
  CHECK(f_bspline_deriv_eta(0.8, asym, beta.constrained, ks) == 0.0);
  for (int i = 0; i <= 1000; ++i) CHECK(f_bspline(i / 1000.0, asym, beta, ks) >= 0.0);
}

TEST_CASE("coefficients at the floor give a constant 0.01 below the last finite knot") {
  auto ks = build_knots_mcpr(5, 2);
  auto beta = constrain_coefficients(raw_all(ks, -60.0), CoefficientFamily::mcpr_constraints, ks);
  AsymptotePair asym{0.0, 0.9};
  // bases 0..2 cover everything left of x = 1/3
  for (double eta : {0.0, 0.1, 0.2, 0.29}) {
    CHECK(f_bspline(eta, asym, beta, ks) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(std::abs(f_bspline_deriv_eta(eta, asym, beta.constrained, ks)) <= 1e-12);
  }
}

TEST_CASE("B-spline transition equals the basis dot product") {
  auto ks = build_knots_mcpr(5, 2);
  std::vector<double> coefs{0.05, 0.10, 0.15, 0.0, 0.0, 0.0};
  auto b = oracle::basis(ks.knots(), 2, 0.25);
  double want = 0.0;
  for (int j = 0; j < 6; ++j) want += coefs[j] * b[j];
  CHECK(f_bspline(0.2, {0.0, 0.8}, coefs, ks) == doctest::Approx(want).epsilon(1e-13));
  CHECK_THROWS_AS(f_bspline(-0.1, {0.0, 0.8}, coefs, ks), DomainError);
}

TEST_CASE("B-spline partials match finite differences") {
  auto ks = build_knots_mcpr(5, 2);
  std::vector<double> coefs{0.2, 0.05, 0.12, 0.0, 0.0, 0.0};
  const double upper = 0.75;
  for (double eta : {0.05, 0.3, 0.41, 0.6, 0.7}) {
    auto p = f_bspline_partials(eta, {0.0, upper}, coefs, ks);
    CHECK(p.value == doctest::Approx(f_bspline(eta, {0.0, upper}, coefs, ks)));
    auto fe = [&](double e) { return f_bspline(e, {0.0, upper}, coefs, ks); };
    auto fu = [&](double u) { return f_bspline(eta, {0.0, u}, coefs, ks); };
    CHECK(std::abs(p.d_eta - central(fe, eta)) <= 1e-6);
    CHECK(std::abs(p.d_upper - central(fu, upper)) <= 1e-6);
    auto b = oracle::basis(ks.knots(), 2, eta / upper);
    for (int r = 0; r < p.basis.count; ++r) {
      CHECK(p.basis.values[r] == doctest::Approx(b[p.basis.first + r]).epsilon(1e-12));
    }
  }
}

TEST_CASE("logistic transition") {
  CHECK(f_logistic(0.85, 0.8, 0.4) == 0.0);
  CHECK(f_logistic(0.8, 0.8, 0.4) == 0.0);
  CHECK(f_logistic(0.3, 0.8, 0.0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(f_logistic_deriv_eta(0.3, 0.8, 0.0) == doctest::Approx(0.0));
  const double want = oracle::logit(0.8 * oracle::invlogit(0.5)) - oracle::logit(0.4);
  CHECK(f_logistic(0.4, 0.8, 0.5) == doctest::Approx(want).epsilon(1e-14));
  CHECK(std::abs(f_logistic(0.4, 0.8, 0.5) - 0.39748) <= 2e-4);
  CHECK_THROWS_AS(f_logistic(0.0, 0.8, 0.5), DomainError);
  CHECK_THROWS_AS(f_logistic(0.3, 1.2, 0.5), DomainError);
  auto f = [](double e) { return f_logistic(e, 0.8, 0.35); };
  CHECK(std::abs(f_logistic_deriv_eta(0.3, 0.8, 0.35) - central(f, 0.3)) <= 1e-6);
}

TEST_CASE("double logistic transition") {
  DoubleLogisticParams p{1.0, {1.0, 1.0, 1.0, 1.0}};
  CHECK(f_double_logistic(1.0, p) == 0.0);
  CHECK(f_double_logistic(0.5, p) == 0.0);
  CHECK(std::abs(f_double_logistic(1e6, p)) <= 1e-12);
  const double d[4] = {1.0, 1.0, 1.0, 1.0};
  CHECK(f_double_logistic(2.0, p) == doctest::Approx(oracle::double_logistic(2.0, 1.0, d)).epsilon(1e-14));
  DoubleLogisticParams bad{1.0, {1.0, 0.0, 1.0, 1.0}};
  CHECK_THROWS_AS(f_double_logistic(2.0, bad), DomainError);
  DoubleLogisticParams q{0.8, {1.2, 0.7, 1.9, 1.1}};
  auto f = [&](double e) { return f_double_logistic(e, q); };
  CHECK(std::abs(f_double_logistic_deriv_eta(3.0, q) - central(f, 3.0)) <= 1e-6);
}

TEST_CASE("logistic rate closed form") {
  CHECK(logistic_rate(0.8, 0.8, 0.3) == 0.0);
  CHECK(logistic_rate(0.0, 0.7, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(logistic_rate(0.5, 0.8, 0.3) == doctest::Approx(0.225).epsilon(1e-14));
}

TEST_CASE("basis maximizers") {
  auto ks = build_knots_mcpr(5, 2);
  // with spacing 1/3 the interior quadratic bases peak mid-support
  CHECK(basis_argmax(ks, 0) == doctest::Approx(0.0).epsilon(1e-9));
  // (4hx - 3x^2) / 2h^2 on the first span, h = 1/3
  CHECK(basis_argmax(ks, 1) == doctest::Approx(2.0 / 9).epsilon(1e-8));
  CHECK(basis_argmax(ks, 2) == doctest::Approx(0.5).epsilon(1e-8));
  auto b = oracle::basis(ks.knots(), 2, basis_argmax(ks, 1));
  auto left = oracle::basis(ks.knots(), 2, basis_argmax(ks, 1) - 1e-4);
  auto right = oracle::basis(ks.knots(), 2, basis_argmax(ks, 1) + 1e-4);
  CHECK(b[1] >= left[1]);
  CHECK(b[1] >= right[1]);
}

TEST_CASE("approximate logistic coefficients follow the logistic rate at the basis peaks") {
  auto ks = build_knots_mcpr(7, 2);
  auto anchors = approx_logistic_anchors(ks);
  auto c = approx_logistic_coefficients(0.8, 0.3, ks);
  REQUIRE(anchors.size() == 5);
  for (int j = 0; j < 5; ++j) {
    CHECK(c.constrained[j] == doctest::Approx(oracle::approx_rate(anchors[j] * 0.8, 0.8, 0.3)).epsilon(1e-14));
    CHECK(c.constrained[j] >= 0.0);
  }
  for (int j = 5; j < 8; ++j) CHECK(c.constrained[j] == 0.0);
  CHECK(c.constrained[0] == doctest::Approx(0.3));
  CHECK_THROWS_AS(approx_logistic_coefficients(1.0, 0.3, ks), DomainError);
}

TEST_CASE("logistic growth simulated from the transition matches the closed-form curve") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> upper_d(0.55, 0.95), pace_d(0.05, 0.5), start_d(0.01, 0.3);
  for (int rep = 0; rep < 20; ++rep) {
    const double upper = upper_d(rng), pace = pace_d(rng);
    const double eta0 = start_d(rng) * upper;
    double eta = eta0;
    for (int t = 1; t <= 60; ++t) {
      eta = oracle::invlogit(oracle::logit(eta) + f_logistic(eta, upper, pace));
      CHECK(std::abs(eta - oracle::logistic_curve(eta0, upper, pace, t)) <= 1e-10);
    }
  }
}
