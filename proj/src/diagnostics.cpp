#include "btm/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "btm/errors.hpp"

namespace btm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_shape(const Eigen::MatrixXd& draws) {
  if (draws.cols() < 1 || draws.rows() < 1) {
    throw ConfigError("diagnostics need at least one chain with draws");
  }
}

double sample_variance(const Eigen::VectorXd& v) {
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

Eigen::MatrixXd split_chains(const Eigen::MatrixXd& draws) {
  check_shape(draws);
  const Eigen::Index n = draws.rows();
  if (n == 1) return draws;
  const Eigen::Index half = n / 2;
  const Eigen::Index m = draws.cols();
  Eigen::MatrixXd out(half, 2 * m);
  out.leftCols(m) = draws.topRows(half);
  out.rightCols(m) = draws.bottomRows(half);
  return out;
}

Eigen::MatrixXd z_scale(const Eigen::MatrixXd& draws) {
  const Eigen::Index S = draws.size();
  std::vector<Eigen::Index> order(S);
  std::iota(order.begin(), order.end(), 0);
  const double* v = draws.data();
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  Eigen::MatrixXd out(draws.rows(), draws.cols());
  double* o = out.data();
  boost::math::normal_distribution<double> normal;
  const double denom = static_cast<double>(S) + 0.25;
  Eigen::Index i = 0;
  while (i < S) {
    Eigen::Index j = i;
    while (j + 1 < S && v[order[j + 1]] == v[order[i]]) ++j;
    // average rank of the tie block (1-based)
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    const double z = boost::math::quantile(normal, (rank - 0.375) / denom);
    for (Eigen::Index k = i; k <= j; ++k) o[order[k]] = z;
    i = j + 1;
  }
  return out;
}

bool is_constant(const Eigen::MatrixXd& draws) {
  if (draws.size() == 0) return true;
  return std::abs(draws.maxCoeff() - draws.minCoeff()) < std::numeric_limits<double>::epsilon();
}

namespace {

bool unusable(const Eigen::MatrixXd& draws) { return !draws.allFinite() || is_constant(draws); }

}  // namespace

double rhat_basic(const Eigen::MatrixXd& chains) {
  if (chains.rows() < 2 || unusable(chains)) return kNaN;
  const double n = static_cast<double>(chains.rows());
  Eigen::VectorXd means = chains.colwise().mean().transpose();
  Eigen::VectorXd vars(chains.cols());
  for (Eigen::Index k = 0; k < chains.cols(); ++k) vars[k] = sample_variance(chains.col(k));
  const double between = chains.cols() > 1 ? n * sample_variance(means) : 0.0;
  const double within = vars.mean();
  return std::sqrt((between / within + n - 1.0) / n);
}

double ess_basic(const Eigen::MatrixXd& chains) {
  const Eigen::Index m = chains.cols();
  const Eigen::Index n = chains.rows();
  if (n < 3 || unusable(chains)) return kNaN;
  // Centered chains; biased autocovariances (divided by n) are computed per
  // lag on demand since the sequence is usually truncated early.
  Eigen::MatrixXd centered(n, m);
  Eigen::VectorXd means(m);
  for (Eigen::Index k = 0; k < m; ++k) {
    means[k] = chains.col(k).mean();
    centered.col(k) = chains.col(k).array() - means[k];
  }
  auto mean_acov = [&](Eigen::Index lag) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < m; ++k) {
      s += centered.col(k).head(n - lag).dot(centered.col(k).tail(n - lag));
    }
    return s / static_cast<double>(n) / static_cast<double>(m);
  };
  const double nd = static_cast<double>(n);
  const double mean_var = mean_acov(0) * nd / (nd - 1.0);
  double var_plus = mean_var * (nd - 1.0) / nd;
  if (m > 1) var_plus += sample_variance(means);

  std::vector<double> rho(n, 0.0);
  Eigen::Index t = 0;
  double rho_even = 1.0;
  rho[t] = rho_even;
  double rho_odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
  rho[t + 1] = rho_odd;
  while (t < n - 5 && !std::isnan(rho_even + rho_odd) && rho_even + rho_odd > 0) {
    t += 2;
    rho_even = 1.0 - (mean_var - mean_acov(t)) / var_plus;
    rho_odd = 1.0 - (mean_var - mean_acov(t + 1)) / var_plus;
    if (rho_even + rho_odd >= 0) {
      rho[t] = rho_even;
      rho[t + 1] = rho_odd;
    }
  }
  const Eigen::Index max_t = t;
  if (rho_even > 0) rho[max_t] = rho_even;

  // initial monotone sequence
  t = 0;
  while (t <= max_t - 4) {
    t += 2;
    if (rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1]) {
      rho[t] = 0.5 * (rho[t - 2] + rho[t - 1]);
      rho[t + 1] = rho[t];
    }
  }
  const double total = static_cast<double>(m) * nd;
  double tau = -1.0;
  for (Eigen::Index i = 0; i < max_t; ++i) tau += 2.0 * rho[i];
  tau += rho[max_t];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

double split_rhat(const Eigen::MatrixXd& draws) {
  check_shape(draws);
  if (unusable(draws)) return kNaN;
  return rhat_basic(z_scale(split_chains(draws)));
}

double bulk_ess(const Eigen::MatrixXd& draws) {
  check_shape(draws);
  if (unusable(draws)) return kNaN;
  return ess_basic(z_scale(split_chains(draws)));
}

double quantile_sorted(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw ConfigError("quantile of an empty sample");
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("quantile probability outside [0, 1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double quantile(std::vector<double> values, double prob) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, prob);
}

ParameterSummary summarize_parameter(const std::string& name, const Eigen::MatrixXd& draws) {
  check_shape(draws);
  ParameterSummary s;
  s.name = name;
  std::vector<double> pooled(draws.data(), draws.data() + draws.size());
  std::sort(pooled.begin(), pooled.end());
  s.mean = draws.mean();
  s.sd = pooled.size() > 1
             ? std::sqrt((draws.array() - s.mean).square().sum() / static_cast<double>(pooled.size() - 1))
             : 0.0;
  s.q05 = quantile_sorted(pooled, 0.05);
  s.q50 = quantile_sorted(pooled, 0.5);
  s.q95 = quantile_sorted(pooled, 0.95);
  s.constant = is_constant(draws);
  s.rhat = split_rhat(draws);
  s.ess_bulk = bulk_ess(draws);
  return s;
}

}  // namespace btm
