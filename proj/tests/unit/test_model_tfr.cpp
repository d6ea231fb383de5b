#include <doctest.h>

#include <cmath>
#include <random>

#include "btm/errors.hpp"
#include "btm/model_tfr.hpp"
#include "oracles.hpp"

using namespace btm;

namespace {

double npdf_log(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return -0.5 * z * z - std::log(sd) - 0.9189385332046727;
}

TfrSeries series(std::string name, std::vector<double> tfr, int start = 0) {
  TfrSeries s;
  s.country = std::move(name);
  for (std::size_t i = 0; i < tfr.size(); ++i) s.period_start.push_back(1960 + 5 * static_cast<int>(i));
  s.tfr = std::move(tfr);
  s.phase2_start = start;
  s.phase2_end = static_cast<int>(s.tfr.size()) - 1;
  return s;
}

// f_b by hand: scaled level (eta - 1) / (ref - 1), clipped to the knot range.
double decrement_oracle(double eta, double ref, const std::vector<double>& coefs, const KnotSequence& ks) {
  double x = (eta - 1.0) / (ref - 1.0);
  x = std::clamp(x, ks.lower(), ks.upper());
  auto b = oracle::basis(ks.knots(), ks.degree(), x);
  double f = 0.0;
  for (std::size_t j = 0; j < b.size(); ++j) f += coefs[j] * b[j];
  return f;
}

std::vector<double> tfr_coefs(const KnotSequence& ks, std::vector<double> raw_free) {
  std::vector<double> c(ks.num_basis(), 0.0);
  auto r = free_coefficients(CoefficientFamily::tfr_constraints, ks);
  for (int j = r.begin; j < r.end; ++j) c[j] = tfr_coefficient(raw_free[j - r.begin]);
  return c;
}

}  // namespace

TEST_CASE("TFR decrement is non-positive and vanishes at the boundaries") {
  auto ks = build_knots_tfr(7, 2);
  auto coefs = tfr_coefs(ks, {0.4, -1.0});
  const double ref = 6.5;
  CHECK(tfr_decrement(1.0, ref, coefs, ks) == 0.0);
  CHECK(tfr_decrement(0.8, ref, coefs, ks) == 0.0);
  CHECK(tfr_decrement(ref, ref, coefs, ks) == 0.0);
  for (int i = 1; i <= 2000; ++i) {
    const double eta = 1.0 + 8.0 * i / 2000.0;
    const double f = tfr_decrement(eta, ref, coefs, ks);
    CHECK(f <= 0.0);
    CHECK(f == doctest::Approx(decrement_oracle(eta, ref, coefs, ks)).epsilon(1e-12));
  }
  for (double eta : {1.7, 3.1, 4.4, 5.9}) {
    auto [f, slope] = tfr_decrement_and_slope(eta, ref, coefs, ks);
    const double fd = (tfr_decrement(eta + 1e-6, ref, coefs, ks) - tfr_decrement(eta - 1e-6, ref, coefs, ks)) / 2e-6;
    CHECK(f == tfr_decrement(eta, ref, coefs, ks));
    CHECK(std::abs(slope - fd) <= 1e-6);
  }
}

TEST_CASE("TFR propagation") {
  auto ks = build_knots_tfr(7, 2);
  std::vector<double> zero(ks.num_basis(), 0.0);
  std::vector<double> eps(6, 0.0);
  for (double v : tfr_propagate(5.0, zero, eps, ks)) CHECK(v == 5.0);
  auto coefs = tfr_coefs(ks, {1.0, 0.5});
  auto path = tfr_propagate(5.0, coefs, std::vector<double>(3, 0.0), ks);
  CHECK(path[1] == doctest::Approx(5.0 + decrement_oracle(5.0, 5.0, coefs, ks)));
  std::vector<double> e{0.0, -2.0, 0.0, 0.0};
  auto mid = tfr_propagate(5.0, coefs, e, ks);
  CHECK(mid[1] == doctest::Approx(3.0));
  CHECK(mid[2] == doctest::Approx(3.0 + decrement_oracle(3.0, 5.0, coefs, ks)));
  CHECK_THROWS_AS(tfr_propagate(1.0, coefs, e, ks), ConfigError);
  // a path that lands on 1 stays there without noise
  std::vector<double> drop{0.0, -4.0, 0.0, 0.0};
  auto floor = tfr_propagate(5.0, coefs, drop, ks);
  CHECK(floor[2] == doctest::Approx(1.0));
  CHECK(floor[3] == doctest::Approx(1.0));
}

TEST_CASE("one forward step with a decrement of -0.3") {
  // pick the raw coefficient so that f_b(5) = -0.3 for a single free coefficient
  auto ks = build_knots_tfr(7, 2);
  std::vector<double> coefs(ks.num_basis(), 0.0);
  const double ref = 8.0;
  const double x = (5.0 - 1.0) / (ref - 1.0);
  auto b = oracle::basis(ks.knots(), 2, x);
  for (int j = 3; j < 5; ++j) coefs[j] = -0.3 / (b[3] + b[4]);
  CHECK(tfr_decrement(5.0, ref, coefs, ks) == doctest::Approx(-0.3).epsilon(1e-12));
  // start a path at 5 by pushing the first step down from the reference
  const double first = 5.0 - ref - tfr_decrement(ref, ref, coefs, ks);
  auto path = tfr_propagate(ref, coefs, std::vector<double>{0.0, first, 0.0}, ks);
  CHECK(path[1] == doctest::Approx(5.0).epsilon(1e-14));
  CHECK(path[2] == doctest::Approx(4.7).epsilon(1e-12));
}

TEST_CASE("TFR log density on a two-country toy equals a hand sum") {
  auto ks = build_knots_tfr(7, 2);
  std::vector<TfrSeries> s{series("a", {6.0, 5.6, 5.1}), series("b", {7.2, 7.0, 6.1, 5.0}, 1)};
  TfrParams p;
  p.beta.resize(2, 2);
  p.beta << 0.3, -0.4, 1.1, 0.2;
  p.beta_world = Eigen::Vector2d(0.5, -0.1);
  p.beta_sigma = Eigen::Vector2d(0.7, 1.3);
  p.tau = 0.25;
  auto half = [](double x, double s) { return npdf_log(x, 0, s) + std::log(2.0); };
  double want = 0.0;
  for (int j = 0; j < 2; ++j) {
    want += npdf_log(p.beta_world[j], 0, 1) + half(p.beta_sigma[j], 1.0);
    for (int c = 0; c < 2; ++c) want += npdf_log(p.beta(c, j), p.beta_world[j], p.beta_sigma[j]);
  }
  want += half(0.25, 1.0);
  for (int c = 0; c < 2; ++c) {
    auto coefs = tfr_coefs(ks, {p.beta(c, 0), p.beta(c, 1)});
    const auto& x = s[c];
    for (int t = x.phase2_start + 1; t <= x.phase2_end; ++t) {
      want += npdf_log(x.tfr[t] - x.tfr[t - 1] - decrement_oracle(x.tfr[t - 1], x.reference_level(), coefs, ks), 0, 0.25);
    }
  }
  CHECK(tfr_log_density(p, s, ks) == doctest::Approx(want).epsilon(1e-13));
  p.tau = 0.0;
  CHECK(tfr_log_density(p, s, ks) == -INFINITY);
}

TEST_CASE("zero residuals with unit tau contribute the bare normal constant") {
  auto ks = build_knots_tfr(7, 2);
  std::vector<TfrSeries> flat{series("a", {3.0, 3.0})};
  TfrParams p;
  p.beta = Eigen::MatrixXd::Constant(1, 2, -50.0);
  p.beta_world = Eigen::Vector2d(-50.0, -50.0);
  p.beta_sigma = Eigen::Vector2d(1.0, 1.0);
  p.tau = 1.0;
  // f_b(3) is at the -0.01 floor, so the residual is 0.01 * sum of the free bases
  auto coefs = tfr_coefs(ks, {-50.0, -50.0});
  const double r = -decrement_oracle(3.0, 3.0, coefs, ks);
  CHECK(r == doctest::Approx(0.0).epsilon(1e-12));
  const double priors = tfr_log_density(p, std::vector<TfrSeries>{series("a", {3.0})}, ks);
  CHECK(tfr_log_density(p, flat, ks) - priors == doctest::Approx(-0.9189385332046727).epsilon(1e-12));
}

TEST_CASE("TFR model construction") {
  CHECK_THROWS_AS(TfrModel({7, 2}, {}), DataError);
  CHECK_THROWS_AS(TfrModel({7, 2}, {series("a", {5.0})}), DataError);
  CHECK_THROWS_AS(TfrModel({7, 2}, {series("a", {0.9, 0.8})}), ConfigError);
  CHECK_THROWS_AS(TfrModel({5, 2}, {series("a", {5.0, 4.0})}), ConfigError);
  TfrModel m({7, 2}, {series("a", {5.0, 4.6}), series("b", {6.0})});
  CHECK(m.num_free_coefficients() == 2);
  CHECK(m.dimension() == 2 + 2 + 2 * 2 + 1);
  CHECK(m.parameter_names().back() == "log_tau");
}

TEST_CASE("TFR gradient and Jacobian") {
  TfrModel m({7, 2}, {series("a", {6.5, 6.1, 5.4, 4.6, 3.9}), series("b", {5.8, 5.5, 5.0, 4.1}),
                      series("c", {7.0, 6.8, 6.2})});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 0.7);
  Eigen::VectorXd x(m.dimension());
  for (int i = 0; i < m.dimension(); ++i) x[i] = n(rng);
  Eigen::VectorXd g(m.dimension());
  const double lp = m.log_density(x, &g);
  REQUIRE(std::isfinite(lp));
  for (int i = 0; i < m.dimension(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += 1e-5;
    b[i] -= 1e-5;
    const double fd = (m.log_density(a, nullptr) - m.log_density(b, nullptr)) / 2e-5;
    CHECK(std::abs(g[i] - fd) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
  auto p = m.unpack(x);
  double jac = std::log(p.tau);
  for (int j = 0; j < 2; ++j) jac += (m.num_countries() + 1) * std::log(p.beta_sigma[j]);
  CHECK(lp == doctest::Approx(m.centered_log_density(x) + jac).epsilon(1e-12));
  CHECK(m.centered_log_density(x) == doctest::Approx(tfr_log_density(p, m.series(), m.knots())).epsilon(1e-13));
  CHECK((m.pack(p) - x).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("projection with zero noise follows the decrement deterministically") {
  TfrModel m({7, 2}, {series("a", {6.5, 6.1, 5.4})});
  auto p = m.unpack(Eigen::VectorXd::Zero(m.dimension()));
  p.tau = 0.0;
  Eigen::VectorXd x = m.pack([&] {
    auto q = p;
    q.tau = 1e-300;
    return q;
  }());
  Eigen::MatrixXd draws(2, m.dimension());
  draws.row(0) = x.transpose();
  draws.row(1) = x.transpose();
  auto proj = tfr_project(m, draws, 2095, 9);
  REQUIRE(proj.size() == 1);
  CHECK(proj[0].period_start.front() == 1970);
  CHECK(proj[0].period_start.back() == 2095);
  auto coefs = m.coefficients(m.unpack(x), 0);
  double eta = 5.4;
  for (Eigen::Index k = 0; k < proj[0].paths.cols(); ++k) {
    CHECK(proj[0].paths(0, k) == doctest::Approx(eta).epsilon(1e-12));
    CHECK(proj[0].paths(1, k) == proj[0].paths(0, k));
    eta = std::max(1.0, eta + decrement_oracle(eta, 6.5, coefs, m.knots()));
  }
}

TEST_CASE("projection mean matches a brute-force simulator") {
  TfrModel m({7, 2}, {series("a", {6.8, 6.4, 5.9})});
  TfrParams p = m.unpack(Eigen::VectorXd::Zero(m.dimension()));
  p.beta.setConstant(0.5);
  p.tau = 0.15;
  Eigen::VectorXd x = m.pack(p);
  const int N = 10000;
  Eigen::MatrixXd draws = x.transpose().replicate(N, 1);
  auto proj = tfr_project(m, draws, 2020, 77);
  const auto& paths = proj[0].paths;
  auto coefs = m.coefficients(p, 0);

  std::mt19937 rng(12345);
  std::normal_distribution<double> noise(0.0, p.tau);
  const int K = static_cast<int>(paths.cols());
  std::vector<double> sum(K, 0.0), sum2(K, 0.0);
  for (int n = 0; n < N; ++n) {
    double eta = 5.9;
    for (int k = 0; k < K; ++k) {
      if (k > 0) eta = std::max(1.0, eta + decrement_oracle(eta, 6.8, coefs, m.knots()) + noise(rng));
      sum[k] += eta;
      sum2[k] += eta * eta;
    }
  }
  for (int k = 1; k < K; ++k) {
    const double mean = sum[k] / N;
    const double var = sum2[k] / N - mean * mean;
    const double se = std::sqrt(2.0 * var / N);
    CHECK(std::abs(paths.col(k).mean() - mean) <= 4.0 * se);
  }
}

TEST_CASE("synthetic TFR series are Phase II throughout and floored") {
  TfrSyntheticOptions opt;
  opt.countries = 3;
  opt.seed = 4;
  auto s = generate_tfr_synthetic(opt);
  REQUIRE(s.size() == 3);
  for (const auto& x : s) {
    CHECK(x.phase2_start == 0);
    CHECK(x.phase2_end == opt.periods - 1);
    CHECK(x.reference_level() >= opt.start_min);
    for (double v : x.tfr) CHECK(v >= 1.0);
  }
  auto again = generate_tfr_synthetic(opt);
  CHECK(again[1].tfr == s[1].tfr);
}
