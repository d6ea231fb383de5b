#include <doctest.h>

#include <cmath>
#include <numbers>

#include "btm/errors.hpp"
#include "btm/model_mcpr.hpp"
#include "oracles.hpp"
#include "toy_mcpr.hpp"

using namespace btm;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double npdf_log(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * kLog2Pi;
}

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

McprModel make_model(McprTransition transition, TimeGrid grid = {1980, 1999, 1990}) {
  auto h = toy::hierarchy(3, 1, 6);
  McprModelConfig cfg;
  cfg.transition = transition;
  cfg.num_knots = transition == McprTransition::bspline ? 5 : 7;
  cfg.grid = grid;
  return McprModel(cfg, h, toy::observations(h, grid, 4, 2, 17), 2);
}

// Independently assembled log-Jacobian of the unconstrained parameterization.
double expected_jacobian(const McprModel& m, const McprParams& p) {
  const auto& h = m.hierarchy();
  const double C = h.num_countries(), S = h.num_subregions(), R = h.num_regions();
  const double T = m.config().grid.size();
  double j = 0.0;
  if (m.config().transition == McprTransition::bspline) {
    for (Eigen::Index k = 0; k < p.beta_world.size(); ++k) {
      // scale transforms plus the non-centered shifts
      j += (C + 1) * std::log(p.beta_sigma_country[k]) + (S + 1) * std::log(p.beta_sigma_subregion[k]) +
           (R + 1) * std::log(p.beta_sigma_region[k]);
    }
  } else {
    j += (C + 1) * std::log(p.pace_sigma_country) + (S + 1) * std::log(p.pace_sigma_subregion) +
         (R + 1) * std::log(p.pace_sigma_region);
  }
  j += (C + 1) * std::log(p.asymptote_sigma);
  j += (C + 1) * std::log(p.level_sigma_country) + (S + R + 1) * std::log(p.level_sigma_region);
  j += std::log(p.rho * (1 - p.rho));
  j += std::log(p.tau) + C * (T * std::log(p.tau) - 0.5 * std::log(1 - p.rho * p.rho));
  for (Eigen::Index d = 0; d < p.source_sigma.size(); ++d) j += std::log(p.source_sigma[d]);
  return j;
}

}  // namespace

TEST_CASE("asymptote and pace transforms") {
  CHECK(upper_asymptote(0.0) == doctest::Approx(0.725));
  CHECK(upper_asymptote(-40) == doctest::Approx(0.5));
  CHECK(upper_asymptote(40) == doctest::Approx(0.95));
  CHECK(logistic_pace(0.0) == doctest::Approx(0.25));
  CHECK(logistic_pace(40) == doctest::Approx(0.5));
}

TEST_CASE("truncated normal log density") {
  const double want = -std::log(0.1 * std::sqrt(2 * std::numbers::pi)) - std::log(phi(5) - phi(-5));
  CHECK(truncated_normal_lpdf(0.5, 0.5, 0.1) == doctest::Approx(want).epsilon(1e-13));
  CHECK(truncated_normal_lpdf(0.5, 0.5, 0.1) == doctest::Approx(1.38364).epsilon(1e-5));
  for (double mu : {-0.2, 0.05, 0.5, 0.97, 1.3}) {
    for (double y : {0.0, 0.2, 0.99}) {
      const double sd = 0.15;
      const double oracle = npdf_log(y, mu, sd) - std::log(phi((1 - mu) / sd) - phi(-mu / sd));
      CHECK(truncated_normal_lpdf(y, mu, sd) == doctest::Approx(oracle).epsilon(1e-12));
      CHECK(truncated_normal_lpdf(y, mu, sd) >= npdf_log(y, mu, sd));
    }
  }
  CHECK(truncated_normal_lpdf(1.01, 0.5, 0.1) == -INFINITY);
  CHECK(truncated_normal_lpdf(-0.01, 0.5, 0.1) == -INFINITY);
  CHECK_THROWS_AS(truncated_normal_lpdf(0.5, 0.5, 0.0), ConfigError);
  // far tail stays finite
  CHECK(std::isfinite(truncated_normal_lpdf(0.01, 0.99, 0.01)));
}

TEST_CASE("AR(1) log density") {
  // stationary SD = 0.8 / sqrt(1 - 0.36) = 1
  std::vector<double> one{0.3};
  CHECK(log_ar1(one, 0.6, 0.8, 0) == doctest::Approx(npdf_log(0.3, 0, 1.0)).epsilon(1e-14));
  std::vector<double> e{0.2, -0.1, 0.4};
  const double rho = 0.7, tau = 0.3, sd0 = tau / std::sqrt(1 - rho * rho);
  const double anchored_mid = npdf_log(-0.1, 0, sd0) + npdf_log(0.4, rho * -0.1, tau) + npdf_log(0.2, rho * -0.1, tau);
  CHECK(log_ar1(e, rho, tau, 1) == doctest::Approx(anchored_mid).epsilon(1e-14));
  const double anchored_first = npdf_log(0.2, 0, sd0) + npdf_log(-0.1, rho * 0.2, tau) + npdf_log(0.4, rho * -0.1, tau);
  CHECK(log_ar1(e, rho, tau, 0) == doctest::Approx(anchored_first).epsilon(1e-14));
  const double indep = npdf_log(0.2, 0, tau) + npdf_log(-0.1, 0, tau) + npdf_log(0.4, 0, tau);
  CHECK(log_ar1(e, 1e-9, tau, 1) == doctest::Approx(indep).epsilon(1e-8));
  CHECK(log_ar1(e, 1.0, tau, 1) == -INFINITY);
  CHECK(log_ar1(e, 0.0, tau, 1) == -INFINITY);
}

TEST_CASE("propagation") {
  TimeGrid grid{1988, 1992, 1990};
  auto h = toy::hierarchy(1, 1, 1);
  McprModelConfig cfg;
  cfg.grid = grid;
  McprModel m(cfg, h, {}, 1);
  auto p = m.zero_params();
  p.level[0] = 0.3;
  p.eps.setZero();
  // with an upper asymptote below the starting level the transition is zero
  p.asymptote[0] = -40.0;
  p.level[0] = oracle::logit(0.6);
  auto flat = propagate(p, McprTransition::bspline, grid, m.knots());
  for (int t = 0; t < grid.size(); ++t) CHECK(flat.eta(0, t) == doctest::Approx(0.6).epsilon(1e-14));

  // one forward step from logit level 0 with f = 0.1 everywhere below the asymptote
  p.level[0] = 0.0;
  p.asymptote[0] = 40.0;
  p.beta.setConstant(-60.0);
  auto traj = propagate(p, McprTransition::bspline, grid, m.knots());
  const double f0 = f_bspline(0.5, {0, upper_asymptote(40.0)},
                              std::vector<double>{0.01, 0.01, 0.01, 0, 0, 0}, m.knots());
  CHECK(traj.eta(0, grid.anchor()) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(traj.logit_eta(0, grid.anchor() + 1) == doctest::Approx(f0).epsilon(1e-14));
  CHECK(oracle::invlogit(0.1) == doctest::Approx(0.52498).epsilon(1e-5));
}

TEST_CASE("trajectories reproduce their deviations forward and backward") {
  auto m = make_model(McprTransition::bspline, {1970, 2030, 1990});
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto p = m.unpack(toy::point(m.dimension(), seed));
    auto traj = propagate(p, McprTransition::bspline, m.config().grid, m.knots());
    const int a = m.config().grid.anchor();
    for (int c = 0; c < m.hierarchy().num_countries(); ++c) {
      auto coefs = country_coefficients(p, McprTransition::bspline, m.knots(), {}, c);
      const AsymptotePair asym{0.0, upper_asymptote(p.asymptote[c])};
      CHECK(traj.logit_eta(c, a) == doctest::Approx(p.level[c]).epsilon(1e-14));
      for (int t = a + 1; t < m.config().grid.size(); ++t) {
        const double eps = traj.logit_eta(c, t) - traj.logit_eta(c, t - 1) - f_bspline(traj.eta(c, t - 1), asym, coefs, m.knots());
        CHECK(std::abs(eps - p.eps(c, t)) <= 1e-10);
      }
      for (int t = a - 1; t >= 0; --t) {
        const double eps = traj.logit_eta(c, t + 1) - f_bspline(traj.eta(c, t + 1), asym, coefs, m.knots()) - traj.logit_eta(c, t);
        CHECK(std::abs(eps - p.eps(c, t + 1)) <= 1e-10);
      }
    }
  }
}

TEST_CASE("without deviations trajectories rise monotonically below the asymptote") {
  auto m = make_model(McprTransition::bspline, {1970, 2030, 1990});
  for (std::uint64_t seed : {4u, 5u}) {
    auto p = m.unpack(toy::point(m.dimension(), seed, 1.5));
    p.eps.setZero();
    auto traj = propagate(p, McprTransition::bspline, m.config().grid, m.knots());
    for (int c = 0; c < m.hierarchy().num_countries(); ++c) {
      const double upper = std::max(upper_asymptote(p.asymptote[c]), traj.eta(c, 0));
      for (int t = 1; t < m.config().grid.size(); ++t) {
        CHECK(traj.eta(c, t) >= traj.eta(c, t - 1));
        CHECK(traj.eta(c, t) <= upper + 1e-8);
      }
    }
  }
}

TEST_CASE("log prior on a two-country toy equals a hand sum") {
  TimeGrid grid{1989, 1991, 1990};
  HierarchyIndex h;
  h.add("a", "s", "r");
  h.add("b", "s", "r");
  McprModelConfig cfg;
  cfg.num_knots = 3;  // one free coefficient
  cfg.grid = grid;
  McprModel m(cfg, h, {}, 1);
  McprParams p = m.zero_params();
  p.beta(0, 0) = 0.4;
  p.beta(1, 0) = -0.2;
  p.beta_subregion(0, 0) = 0.1;
  p.beta_region(0, 0) = -0.3;
  p.beta_world[0] = 0.2;
  p.beta_sigma_country[0] = 0.5;
  p.beta_sigma_subregion[0] = 0.7;
  p.beta_sigma_region[0] = 0.9;
  p.asymptote << 0.5, 1.5;
  p.asymptote_world = 1.0;
  p.asymptote_sigma = 0.4;
  p.level << -1.0, -2.0;
  p.level_subregion[0] = -1.4;
  p.level_region[0] = -1.1;
  p.level_world = -0.5;
  p.level_sigma_country = 0.6;
  p.level_sigma_region = 0.8;
  p.rho = 0.3;
  p.tau = 1.5;
  p.source_sigma[0] = 0.05;
  auto half = [](double x, double s) { return npdf_log(x, 0, s) + std::log(2.0); };
  double want = npdf_log(0.4, 0.1, 0.5) + npdf_log(-0.2, 0.1, 0.5) + npdf_log(0.1, -0.3, 0.7) +
                npdf_log(-0.3, 0.2, 0.9) + half(0.5, 0.5) + half(0.7, 0.5) + half(0.9, 0.5) +
                npdf_log(0.2, 0, 1);
  want += npdf_log(0.5, 1.0, 0.4) + npdf_log(1.5, 1.0, 0.4) + npdf_log(1.0, 0, 1) + half(0.4, 1);
  want += npdf_log(-1.0, -1.4, 0.6) + npdf_log(-2.0, -1.4, 0.6) + npdf_log(-1.4, -1.1, 0.8) +
          npdf_log(-1.1, -0.5, 0.8) + npdf_log(-0.5, 0, 1) + half(0.6, 1) + half(0.8, 1);
  want += half(1.5, 2.0) + half(0.05, 0.1);
  CHECK(log_prior(p, h, McprTransition::bspline) == doctest::Approx(want).epsilon(1e-13));

  p.rho = 1.2;
  CHECK(log_prior(p, h, McprTransition::bspline) == -INFINITY);
  p.rho = 0.3;
  p.tau = 0.0;
  CHECK(log_prior(p, h, McprTransition::bspline) == -INFINITY);
}

TEST_CASE("centered normal terms at their means contribute the bare constant") {
  CHECK(npdf_log(0.3, 0.3, 1.0) == doctest::Approx(-0.5 * kLog2Pi));
}

TEST_CASE("log density is the centered density plus the transform Jacobian") {
  for (auto tr : {McprTransition::bspline, McprTransition::approx_logistic}) {
    auto m = make_model(tr);
    for (std::uint64_t seed : {7u, 8u}) {
      auto x = toy::point(m.dimension(), seed);
      auto p = m.unpack(x);
      const double lhs = m.log_density(x, nullptr);
      const double rhs = m.centered_log_density(x) + expected_jacobian(m, p);
      CHECK(lhs == doctest::Approx(rhs).epsilon(1e-11));
      // the centered route composes the public building blocks
      auto traj = propagate(p, tr, m.config().grid, m.knots());
      double centered = log_prior(p, m.hierarchy(), tr) +
                        log_likelihood(traj, m.observations(), p.source_sigma, m.config().grid);
      for (int c = 0; c < m.hierarchy().num_countries(); ++c) {
        std::vector<double> e(m.config().grid.size());
        for (int t = 0; t < m.config().grid.size(); ++t) e[t] = p.eps(c, t);
        centered += log_ar1(e, p.rho, p.tau, m.config().grid.anchor());
      }
      CHECK(m.centered_log_density(x) == doctest::Approx(centered).epsilon(1e-12));
    }
  }
}

TEST_CASE("pack inverts unpack") {
  for (auto tr : {McprTransition::bspline, McprTransition::approx_logistic}) {
    auto m = make_model(tr);
    auto x = toy::point(m.dimension(), 21);
    auto y = m.pack(m.unpack(x));
    CHECK((x - y).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("gradient matches central finite differences") {
  for (auto tr : {McprTransition::bspline, McprTransition::approx_logistic}) {
    auto m = make_model(tr);
    auto x = toy::point(m.dimension(), 31);
    Eigen::VectorXd g(m.dimension());
    const double lp = m.log_density(x, &g);
    REQUIRE(std::isfinite(lp));
    double worst = 0.0;
    for (int i = 0; i < m.dimension(); ++i) {
      Eigen::VectorXd a = x, b = x;
      a[i] += 1e-5;
      b[i] -= 1e-5;
      const double fd = (m.log_density(a, nullptr) - m.log_density(b, nullptr)) / 2e-5;
      worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("density stays finite across the unconstrained space") {
  auto m = make_model(McprTransition::bspline);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(m.dimension());
  CHECK(std::isfinite(m.log_density(x, nullptr)));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto y = toy::point(m.dimension(), seed, 3.0);
    Eigen::VectorXd g(m.dimension());
    const double lp = m.log_density(y, &g);
    CHECK(!std::isnan(lp));
    if (!std::isfinite(lp)) CHECK(g.isZero());
  }
}

TEST_CASE("prior draws propagate inside the unit interval") {
  auto m = make_model(McprTransition::bspline, {1970, 2030, 1990});
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto p = m.unpack(toy::point(m.dimension(), 100 + seed, 1.0));
    auto traj = propagate(p, McprTransition::bspline, m.config().grid, m.knots());
    CHECK(traj.eta.minCoeff() > 0.0);
    CHECK(traj.eta.maxCoeff() < 1.0);
  }
}

TEST_CASE("parameter names are unique and sized to the dimension") {
  auto m = make_model(McprTransition::bspline);
  auto names = m.parameter_names();
  CHECK(static_cast<int>(names.size()) == m.dimension());
  std::sort(names.begin(), names.end());
  CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
}

TEST_CASE("invalid observations are rejected") {
  TimeGrid grid{1980, 1999, 1990};
  auto h = toy::hierarchy(1, 1, 2);
  McprModelConfig cfg;
  cfg.grid = grid;
  Observation o{0, 1975, 0.2, 0.01, 0, false};
  CHECK_THROWS_AS(McprModel(cfg, h, {o}, 1), DataError);
  o.year = 1985;
  o.country = 5;
  CHECK_THROWS_AS(McprModel(cfg, h, {o}, 1), DataError);
  o.country = 0;
  o.source = 3;
  CHECK_THROWS_AS(McprModel(cfg, h, {o}, 1), DataError);
  o.source = 0;
  CHECK_NOTHROW(McprModel(cfg, h, {o}, 1));
  cfg.grid = {1980, 1999, 2005};
  CHECK_THROWS_AS(McprModel(cfg, h, {}, 1), ConfigError);
}
