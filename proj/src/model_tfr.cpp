#include "btm/model_tfr.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "btm/errors.hpp"
#include "btm/math.hpp"

namespace btm {

namespace {

double clipped_level(double eta, double reference, const KnotSequence& ks, bool& clipped) {
  const double x = (eta - kTfrFloor) / (reference - kTfrFloor);
  const double lo = ks.lower();
  const double hi = ks.upper();
  clipped = x < lo || x > hi;
  return std::clamp(x, lo, hi);
}

void check_reference(double reference) {
  if (!(reference > kTfrFloor)) {
    throw ConfigError("first Phase II TFR must exceed 1, got " + std::to_string(reference));
  }
}

}  // namespace

double tfr_decrement(double eta, double reference, std::span<const double> coefs,
                     const KnotSequence& ks) {
  check_reference(reference);
  bool clipped = false;
  return spline_value(ks, coefs, clipped_level(eta, reference, ks, clipped));
}

std::pair<double, double> tfr_decrement_and_slope(double eta, double reference,
                                                  std::span<const double> coefs,
                                                  const KnotSequence& ks) {
  check_reference(reference);
  bool clipped = false;
  const double x = clipped_level(eta, reference, ks, clipped);
  auto local = basis_local(ks, x, true);
  double value = 0.0, slope = 0.0;
  for (int r = 0; r < local.count; ++r) {
    value += coefs[local.first + r] * local.values[r];
    slope += coefs[local.first + r] * local.derivatives[r];
  }
  return {value, clipped ? 0.0 : slope / (reference - kTfrFloor)};
}

std::vector<double> tfr_propagate(double reference, std::span<const double> coefs,
                                  std::span<const double> eps, const KnotSequence& ks) {
  check_reference(reference);
  std::vector<double> eta(eps.size());
  if (eta.empty()) return eta;
  eta[0] = reference;
  for (std::size_t t = 1; t < eta.size(); ++t) {
    eta[t] = eta[t - 1] + tfr_decrement(eta[t - 1], reference, coefs, ks) + eps[t];
  }
  return eta;
}

double tfr_log_density(const TfrParams& p, std::span<const TfrSeries> series,
                       const KnotSequence& ks) {
  const int C = static_cast<int>(series.size());
  const int P = static_cast<int>(p.beta_world.size());
  auto range = free_coefficients(CoefficientFamily::tfr_constraints, ks);
  if (range.size() != P || p.beta.rows() != C || p.beta.cols() != P) {
    throw ConfigError("TFR parameter shapes do not match the knot sequence");
  }
  if (!(p.tau > 0.0)) return kNegInf;
  double lp = 0.0;
  for (int j = 0; j < P; ++j) {
    if (!(p.beta_sigma[j] > 0.0)) return kNegInf;
    lp += normal_lpdf(p.beta_world[j], 0.0, 1.0) + half_normal_lpdf(p.beta_sigma[j], 1.0);
    for (int c = 0; c < C; ++c) lp += normal_lpdf(p.beta(c, j), p.beta_world[j], p.beta_sigma[j]);
  }
  lp += half_normal_lpdf(p.tau, 1.0);
  std::vector<double> coefs(ks.num_basis());
  for (int c = 0; c < C; ++c) {
    std::fill(coefs.begin(), coefs.end(), 0.0);
    for (int j = 0; j < P; ++j) coefs[range.begin + j] = tfr_coefficient(p.beta(c, j));
    const auto& s = series[c];
    const double ref = s.reference_level();
    for (int t = s.phase2_start + 1; t <= s.phase2_end; ++t) {
      const double resid = s.tfr[t] - s.tfr[t - 1] - tfr_decrement(s.tfr[t - 1], ref, coefs, ks);
      lp += normal_lpdf(resid, 0.0, p.tau);
    }
  }
  return lp;
}

TfrModel::TfrModel(TfrModelConfig config, std::vector<TfrSeries> series)
    : config_(config),
      series_(std::move(series)),
      knots_(build_knots_tfr(config.num_knots, config.degree)),
      free_(free_coefficients(CoefficientFamily::tfr_constraints, knots_)) {
  if (series_.empty()) {
    throw DataError("no TFR series supplied");
  }
  bool any_pair = false;
  for (const auto& s : series_) {
    check_reference(s.reference_level());
    any_pair = any_pair || s.phase2_length() >= 2;
  }
  if (!any_pair) {
    throw DataError("insufficient data: no country has two or more Phase II observations");
  }
  const int C = num_countries();
  const int P = free_.size();
  for (int j = 0; j < P; ++j) names_.push_back("beta_world." + std::to_string(j + 1));
  for (int j = 0; j < P; ++j) names_.push_back("beta_log_sigma." + std::to_string(j + 1));
  for (int c = 0; c < C; ++c) {
    for (int j = 0; j < P; ++j) {
      names_.push_back("beta_z." + std::to_string(c + 1) + "." + std::to_string(j + 1));
    }
  }
  names_.push_back("log_tau");
  dim_ = static_cast<int>(names_.size());
}

TfrParams TfrModel::unpack(const Eigen::VectorXd& x) const {
  if (x.size() != dim_) {
    throw ConfigError("parameter vector has length " + std::to_string(x.size()) +
                      ", expected " + std::to_string(dim_));
  }
  const int C = num_countries();
  const int P = free_.size();
  TfrParams p;
  p.beta_world = x.segment(0, P);
  p.beta_sigma = x.segment(P, P).array().exp();
  p.beta.resize(C, P);
  for (int c = 0; c < C; ++c) {
    for (int j = 0; j < P; ++j) {
      p.beta(c, j) = p.beta_world[j] + p.beta_sigma[j] * x[2 * P + c * P + j];
    }
  }
  p.tau = std::exp(x[dim_ - 1]);
  return p;
}

Eigen::VectorXd TfrModel::pack(const TfrParams& p) const {
  const int C = num_countries();
  const int P = free_.size();
  Eigen::VectorXd x(dim_);
  x.segment(0, P) = p.beta_world;
  x.segment(P, P) = p.beta_sigma.array().log();
  for (int c = 0; c < C; ++c) {
    for (int j = 0; j < P; ++j) {
      x[2 * P + c * P + j] = (p.beta(c, j) - p.beta_world[j]) / p.beta_sigma[j];
    }
  }
  x[dim_ - 1] = std::log(p.tau);
  return x;
}

std::vector<double> TfrModel::coefficients(const TfrParams& p, int c) const {
  std::vector<double> coefs(knots_.num_basis(), 0.0);
  for (int j = 0; j < free_.size(); ++j) coefs[free_.begin + j] = tfr_coefficient(p.beta(c, j));
  return coefs;
}

double TfrModel::centered_log_density(const Eigen::VectorXd& x) const {
  return tfr_log_density(unpack(x), series_, knots_);
}

double TfrModel::log_density(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
  if (x.size() != dim_) {
    throw ConfigError("parameter vector has length " + std::to_string(x.size()) +
                      ", expected " + std::to_string(dim_));
  }
  const int C = num_countries();
  const int P = free_.size();
  const int zoff = 2 * P;
  Eigen::VectorXd gx = Eigen::VectorXd::Zero(dim_);
  double lp = 0.0;

  Eigen::VectorXd sigma(P);
  for (int j = 0; j < P; ++j) {
    const double w = x[j];
    lp += -0.5 * w * w - kLogSqrtTwoPi;
    gx[j] -= w;
    const double u = x[P + j];
    sigma[j] = std::exp(u);
    lp += half_normal_lpdf(sigma[j], 1.0) + u;
    gx[P + j] += 1.0 - sigma[j] * sigma[j];
  }
  for (int i = zoff; i < zoff + C * P; ++i) {
    lp += -0.5 * x[i] * x[i] - kLogSqrtTwoPi;
    gx[i] -= x[i];
  }
  const double log_tau = x[dim_ - 1];
  const double tau = std::exp(log_tau);
  lp += half_normal_lpdf(tau, 1.0) + log_tau;
  gx[dim_ - 1] += 1.0 - tau * tau;

  double g_tau = 0.0;
  std::vector<double> coefs(knots_.num_basis()), g_coefs(knots_.num_basis());
  std::vector<double> beta(P);
  const double inv_var = 1.0 / (tau * tau);
  for (int c = 0; c < C; ++c) {
    std::fill(coefs.begin(), coefs.end(), 0.0);
    std::fill(g_coefs.begin(), g_coefs.end(), 0.0);
    for (int j = 0; j < P; ++j) {
      beta[j] = x[j] + sigma[j] * x[zoff + c * P + j];
      coefs[free_.begin + j] = tfr_coefficient(beta[j]);
    }
    const auto& s = series_[c];
    const double ref = s.reference_level();
    for (int t = s.phase2_start + 1; t <= s.phase2_end; ++t) {
      bool clipped = false;
      const double xs = clipped_level(s.tfr[t - 1], ref, knots_, clipped);
      auto local = basis_local(knots_, xs, false);
      double f = 0.0;
      for (int r = 0; r < local.count; ++r) f += coefs[local.first + r] * local.values[r];
      const double resid = s.tfr[t] - s.tfr[t - 1] - f;
      lp += -0.5 * resid * resid * inv_var - log_tau - kLogSqrtTwoPi;
      g_tau += resid * resid * inv_var / tau - 1.0 / tau;
      // d lp / d f = resid / tau^2
      for (int r = 0; r < local.count; ++r) {
        g_coefs[local.first + r] += resid * inv_var * local.values[r];
      }
    }
    for (int j = 0; j < P; ++j) {
      const double g_beta = g_coefs[free_.begin + j] * tfr_coefficient_grad(beta[j]);
      gx[j] += g_beta;
      gx[P + j] += g_beta * x[zoff + c * P + j] * sigma[j];
      gx[zoff + c * P + j] += g_beta * sigma[j];
    }
  }
  gx[dim_ - 1] += g_tau * tau;

  if (!std::isfinite(lp) || !gx.allFinite()) {
    if (grad) grad->setZero(dim_);
    return kNegInf;
  }
  if (grad) *grad = std::move(gx);
  return lp;
}

std::vector<TfrCountryProjection> tfr_project(const TfrModel& model,
                                              const Eigen::MatrixXd& draws, int horizon_year,
                                              std::uint64_t seed) {
  if (draws.cols() != model.dimension()) {
    throw ConfigError("draw matrix width does not match the TFR model dimension");
  }
  const int C = model.num_countries();
  const int N = static_cast<int>(draws.rows());
  std::vector<TfrCountryProjection> out(C);
  for (int c = 0; c < C; ++c) {
    const auto& s = model.series()[c];
    int year = s.period_start[s.phase2_end];
    while (year <= horizon_year) {
      out[c].period_start.push_back(year);
      year += kTfrPeriodYears;
    }
    if (out[c].period_start.empty()) out[c].period_start.push_back(s.period_start[s.phase2_end]);
    out[c].paths.resize(N, static_cast<Eigen::Index>(out[c].period_start.size()));
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int n = 0; n < N; ++n) {
    std::seed_seq seq{static_cast<std::uint64_t>(seed), static_cast<std::uint64_t>(n)};
    std::mt19937_64 rng(seq);
    auto p = model.unpack(draws.row(n).transpose());
    for (int c = 0; c < C; ++c) {
      const auto& s = model.series()[c];
      auto coefs = model.coefficients(p, c);
      const double ref = s.reference_level();
      auto& path = out[c].paths;
      double eta = s.tfr[s.phase2_end];
      path(n, 0) = eta;
      for (Eigen::Index k = 1; k < path.cols(); ++k) {
        eta += tfr_decrement(eta, ref, coefs, model.knots()) + p.tau * normal(rng);
        eta = std::max(eta, kTfrFloor);
        path(n, k) = eta;
      }
    }
  }
  return out;
}

std::vector<TfrSeries> generate_tfr_synthetic(const TfrSyntheticOptions& opt) {
  if (opt.countries < 1 || opt.periods < 2) {
    throw ConfigError("TFR synthetic data needs at least one country and two periods");
  }
  if (!(opt.start_min > kTfrFloor) || opt.start_max < opt.start_min) {
    throw ConfigError("TFR starting range must lie above 1");
  }
  auto ks = build_knots_tfr(opt.model.num_knots, opt.model.degree);
  auto range = free_coefficients(CoefficientFamily::tfr_constraints, ks);
  std::seed_seq seq{static_cast<std::uint64_t>(opt.seed), std::uint64_t{0x7f2}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> start(opt.start_min, opt.start_max);
  std::vector<TfrSeries> out;
  for (int c = 0; c < opt.countries; ++c) {
    TfrSeries s;
    s.country = "T" + std::to_string(c + 1);
    std::vector<double> coefs(ks.num_basis(), 0.0);
    for (int j = range.begin; j < range.end; ++j) {
      coefs[j] = tfr_coefficient(opt.beta_world + opt.beta_sigma * normal(rng));
    }
    double eta = start(rng);
    const double ref = eta;
    for (int t = 0; t < opt.periods; ++t) {
      if (t > 0) {
        eta += tfr_decrement(eta, ref, coefs, ks) + opt.tau * normal(rng);
        eta = std::max(eta, kTfrFloor);
      }
      s.period_start.push_back(opt.first_period + kTfrPeriodYears * t);
      s.tfr.push_back(eta);
    }
    s.phase2_start = 0;
    s.phase2_end = opt.periods - 1;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace btm
