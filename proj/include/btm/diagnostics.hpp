#pragma once

// Rank-normalized split R-hat and bulk effective sample size. Draws are
// passed as an iterations x chains matrix.

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace btm {

// Halves every chain; the middle draw is dropped when the length is odd.
Eigen::MatrixXd split_chains(const Eigen::MatrixXd& draws);

// Inverse-normal transform of pooled fractional ranks (average ties),
// Phi^-1((r - 3/8) / (S + 1/4)).
Eigen::MatrixXd z_scale(const Eigen::MatrixXd& draws);

// Classic R-hat of already-split, already-transformed chains.
double rhat_basic(const Eigen::MatrixXd& chains);

// ESS of already-split, already-transformed chains using Geyer's initial
// positive and monotone sequences on the biased autocovariance.
double ess_basic(const Eigen::MatrixXd& chains);

// True when every draw equals the first (sentinel case for the estimators).
bool is_constant(const Eigen::MatrixXd& draws);

// Both return NaN for constant or non-finite draws.
double split_rhat(const Eigen::MatrixXd& draws);
double bulk_ess(const Eigen::MatrixXd& draws);

struct ParameterSummary {
  std::string name;
  double mean = 0.0;
  double sd = 0.0;
  double q05 = 0.0;
  double q50 = 0.0;
  double q95 = 0.0;
  double rhat = 0.0;
  double ess_bulk = 0.0;
  bool constant = false;
};

ParameterSummary summarize_parameter(const std::string& name, const Eigen::MatrixXd& draws);

// Linear-interpolation quantile of unsorted values (type 7).
double quantile(std::vector<double> values, double prob);
// Quantile of values that are already sorted ascending.
double quantile_sorted(const std::vector<double>& sorted, double prob);

}  // namespace btm
