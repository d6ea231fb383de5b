#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "btm/diagnostics.hpp"
#include "btm/errors.hpp"
#include "btm/sampler.hpp"
#include "targets.hpp"

using namespace btm;

namespace {

SamplerConfig small(int warmup = 300, int samples = 500, std::uint64_t seed = 3) {
  SamplerConfig c;
  c.chains = 2;
  c.warmup = warmup;
  c.samples = samples;
  c.seed = seed;
  return c;
}

double mean_accept(const SampleResult& r) {
  double s = 0.0;
  for (const auto& c : r.chains) s += c.mean_accept_stat();
  return s / static_cast<double>(r.chains.size());
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("config validation") {
  SamplerConfig c;
  CHECK_NOTHROW(c.validate());
  c.adapt_delta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.adapt_delta = 0.8;
  c.max_treedepth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.max_treedepth = 10;
  c.chains = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("leapfrog error shrinks quadratically with the step size") {
  auto t = targets::scaled_normal((Eigen::VectorXd(3) << 1.0, 2.0, 0.5).finished());
  Eigen::VectorXd inv = Eigen::VectorXd::Ones(3);
  auto energy_error = [&](double eps) {
    Eigen::VectorXd q(3), p(3), g(3);
    q << 0.3, -1.0, 0.2;
    p << 0.5, 0.1, -0.8;
    double lp = t.log_density(q, &g);
    const double h0 = -lp + 0.5 * p.squaredNorm();
    const int steps = static_cast<int>(std::round(1.0 / eps));
    for (int i = 0; i < steps; ++i) lp = leapfrog(t, q, p, g, inv, eps);
    return std::abs(-lp + 0.5 * p.squaredNorm() - h0);
  };
  const double big = energy_error(0.2), half = energy_error(0.1);
  CHECK(big / half >= 2.0);
}

TEST_CASE("leapfrog is time reversible") {
  auto t = targets::std_normal(2);
  Eigen::VectorXd inv = Eigen::VectorXd::Constant(2, 0.7);
  Eigen::VectorXd q(2), p(2), g(2);
  q << 0.4, -0.3;
  p << 1.0, 0.2;
  t.log_density(q, &g);
  const Eigen::VectorXd q0 = q, p0 = p;
  for (int i = 0; i < 10; ++i) leapfrog(t, q, p, g, inv, 0.15);
  p = -p;
  for (int i = 0; i < 10; ++i) leapfrog(t, q, p, g, inv, 0.15);
  CHECK((q - q0).norm() <= 1e-12);
  CHECK((p + p0).norm() <= 1e-12);
}

TEST_CASE("standard normal moments and acceptance") {
  auto r = nuts_sample(targets::std_normal(10), small());
  REQUIRE(r.chains.size() == 2);
  CHECK(r.num_samples() == 500);
  CHECK(r.divergences() == 0);
  for (int i = 0; i < 10; ++i) {
    auto m = r.parameter(i);
    CHECK(std::abs(m.mean()) < 0.15);
    const double sd = std::sqrt((m.array() - m.mean()).square().sum() / (m.size() - 1));
    CHECK(std::abs(sd - 1.0) < 0.15);
    CHECK(split_rhat(m) < 1.02);
  }
  const double a = mean_accept(r);
  CHECK(a >= 0.7);
  CHECK(a <= 0.9);
}

TEST_CASE("high adapt_delta yields high acceptance") {
  auto cfg = small();
  cfg.adapt_delta = 0.999;
  auto r = nuts_sample(targets::std_normal(5), cfg);
  CHECK(mean_accept(r) >= 0.99);
}

TEST_CASE("log-transformed exponential") {
  auto cfg = small(500, 2000);
  auto r = nuts_sample(targets::log_exponential(), cfg);
  auto m = r.parameter(0);
  CHECK(std::abs(m.array().exp().mean() - 1.0) < 0.1);
}

TEST_CASE("draws pass a Kolmogorov-Smirnov check") {
  auto cfg = small(500, 2000);
  auto r = nuts_sample(targets::std_normal(1), cfg);
  auto pooled = r.pooled();
  std::vector<double> v(pooled.data(), pooled.data() + pooled.size());
  std::sort(v.begin(), v.end());
  double d = 0.0;
  const double n = static_cast<double>(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = normal_cdf(v[i]);
    d = std::max({d, std::abs(f - i / n), std::abs(f - (i + 1) / n)});
  }
  CHECK(v.size() == 4000);
  CHECK(d < 0.05);
}

TEST_CASE("a metric equal to the target covariance gives near independent draws") {
  Eigen::VectorXd sd(4);
  sd << 0.1, 1.0, 5.0, 30.0;
  auto cfg = small(200, 1000);
  cfg.inverse_metric = sd.array().square().matrix();
  auto r = nuts_sample(targets::scaled_normal(sd), cfg);
  for (int i = 0; i < 4; ++i) CHECK(bulk_ess(r.parameter(i)) / 2000.0 > 0.5);
  CHECK(r.chains[0].inverse_metric == *cfg.inverse_metric);
}

TEST_CASE("metric adaptation learns the scales") {
  Eigen::VectorXd sd(3);
  sd << 0.05, 1.0, 20.0;
  auto r = nuts_sample(targets::scaled_normal(sd), small(600, 300));
  for (const auto& c : r.chains) {
    for (int i = 0; i < 3; ++i) {
      const double ratio = c.inverse_metric[i] / (sd[i] * sd[i]);
      CHECK(ratio > 0.4);
      CHECK(ratio < 2.5);
    }
  }
}

TEST_CASE("runs are reproducible and independent of threading") {
  auto cfg = small(100, 100, 42);
  auto a = nuts_sample(targets::std_normal(3), cfg);
  auto b = nuts_sample(targets::std_normal(3), cfg);
  cfg.parallel = false;
  auto c = nuts_sample(targets::std_normal(3), cfg);
  for (std::size_t k = 0; k < a.chains.size(); ++k) {
    CHECK(a.chains[k].draws == b.chains[k].draws);
    CHECK(a.chains[k].draws == c.chains[k].draws);
    CHECK(a.chains[k].step_size == c.chains[k].step_size);
  }
  cfg.seed = 43;
  auto d = nuts_sample(targets::std_normal(3), cfg);
  CHECK(d.chains[0].draws != a.chains[0].draws);
  CHECK(a.chains[0].draws != a.chains[1].draws);
}

TEST_CASE("tree depth limit is counted") {
  auto cfg = small(0, 50);
  cfg.step_size = 1e-3;
  cfg.max_treedepth = 3;
  auto r = nuts_sample(targets::std_normal(2), cfg);
  CHECK(r.treedepth_hits() == 100);
  for (const auto& s : r.chains[0].stats) {
    CHECK(s.treedepth <= 3);
    CHECK(s.n_leapfrog <= 7);
  }
}

TEST_CASE("divergences are flagged") {
  // a narrow funnel-like wall: huge curvature beyond |x| > 1
  Target wall{1, [](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
                const double a = std::abs(x[0]);
                const double k = a > 1.0 ? 1e6 : 0.0;
                if (g) (*g)[0] = -x[0] - k * (a - 1.0) * (x[0] > 0 ? 1.0 : -1.0);
                return -0.5 * x[0] * x[0] - 0.5 * k * (a - 1.0) * (a - 1.0);
              }};
  auto cfg = small(0, 200);
  cfg.step_size = 0.9;
  cfg.init = Eigen::VectorXd::Constant(1, 0.5);
  auto r = nuts_sample(wall, cfg);
  CHECK(r.divergences() > 0);
  for (const auto& c : r.chains) {
    for (int i = 0; i < c.draws.rows(); ++i) CHECK(std::abs(c.draws(i, 0)) < 1.1);
  }
}

TEST_CASE("initialization failure after repeated non-finite densities") {
  Target nowhere{2, [](const Eigen::VectorXd&, Eigen::VectorXd* g) {
                   if (g) g->setZero();
                   return -INFINITY;
                 }};
  CHECK_THROWS_AS(nuts_sample(nowhere, small(10, 10)), SamplerError);
  int calls = 0;
  Target counting{1, [&calls](const Eigen::VectorXd&, Eigen::VectorXd* g) {
                    ++calls;
                    if (g) g->setZero();
                    return -INFINITY;
                  }};
  auto cfg = small(10, 10);
  cfg.chains = 1;
  CHECK_THROWS_AS(nuts_sample(counting, cfg), SamplerError);
  CHECK(calls <= 100);
}
