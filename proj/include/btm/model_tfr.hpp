#pragma once

// Phase II TFR variant: identity link, lower asymptote 1, upper asymptote
// at the first Phase II value, country|world hierarchy on the spline
// coefficients and white-noise smoothing. Observed values are treated as
// the true TFR, so the likelihood is on period-to-period residuals.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "btm/data.hpp"
#include "btm/spline_basis.hpp"
#include "btm/transition.hpp"

namespace btm {

inline constexpr double kTfrFloor = 1.0;
inline constexpr int kTfrPeriodYears = 5;
inline constexpr int kTfrHorizonYear = 2095;

struct TfrModelConfig {
  int num_knots = 7;
  int degree = 2;
};

struct TfrParams {
  Eigen::MatrixXd beta;         // C x P raw coefficients
  Eigen::VectorXd beta_world;   // P
  Eigen::VectorXd beta_sigma;   // P
  double tau = 0.1;
};

// Decrement f_b at TFR `eta` for a country whose Phase II starts at
// `reference` (> 1). The scaled level is clipped to the knot range, so f_b
// is zero above the reference level and below 1.
double tfr_decrement(double eta, double reference, std::span<const double> coefs,
                     const KnotSequence& ks);

// Same, with d f_b / d eta (zero where the level is clipped).
std::pair<double, double> tfr_decrement_and_slope(double eta, double reference,
                                                  std::span<const double> coefs,
                                                  const KnotSequence& ks);

// eta_0 = reference, eta_t = eta_{t-1} + f_b(eta_{t-1}) + eps[t] for t >= 1.
// eps[0] is ignored. Throws ConfigError when reference <= 1.
std::vector<double> tfr_propagate(double reference, std::span<const double> coefs,
                                  std::span<const double> eps, const KnotSequence& ks);

// Centered log density: white-noise residuals of every consecutive Phase II
// pair plus priors. Returns -inf for non-positive scales.
double tfr_log_density(const TfrParams& params, std::span<const TfrSeries> series,
                       const KnotSequence& ks);

class TfrModel {
 public:
  TfrModel(TfrModelConfig config, std::vector<TfrSeries> series);

  const TfrModelConfig& config() const { return config_; }
  const std::vector<TfrSeries>& series() const { return series_; }
  const KnotSequence& knots() const { return knots_; }
  int num_countries() const { return static_cast<int>(series_.size()); }
  int num_free_coefficients() const { return free_.size(); }
  CoefficientRange free_range() const { return free_; }

  int dimension() const { return dim_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  TfrParams unpack(const Eigen::VectorXd& x) const;
  Eigen::VectorXd pack(const TfrParams& p) const;

  // Full coefficient vector (length J) for country c.
  std::vector<double> coefficients(const TfrParams& p, int c) const;

  double log_density(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const;
  double centered_log_density(const Eigen::VectorXd& x) const;

 private:
  TfrModelConfig config_;
  std::vector<TfrSeries> series_;
  KnotSequence knots_;
  CoefficientRange free_;
  int dim_ = 0;
  std::vector<std::string> names_;
};

struct TfrCountryProjection {
  std::vector<int> period_start;  // step 0 is the last Phase II period
  Eigen::MatrixXd paths;          // draws x steps
};

// Forward simulation from the last Phase II period of each country to the
// period starting in `horizon_year`, one path per draw (rows of `draws` are
// unconstrained parameter vectors). Fresh N(0, tau^2) noise per step; paths
// are floored at 1.
std::vector<TfrCountryProjection> tfr_project(const TfrModel& model,
                                              const Eigen::MatrixXd& draws, int horizon_year,
                                              std::uint64_t seed);

struct TfrSyntheticOptions {
  TfrModelConfig model;
  int countries = 4;
  int first_period = 1950;
  int periods = 14;
  double start_min = 5.0;
  double start_max = 7.0;
  double beta_world = -1.5;
  double beta_sigma = 0.3;
  double tau = 0.1;
  std::uint64_t seed = 1;
};

// Phase II series simulated from the process model; every period is
// flagged Phase II. Values are floored at 1.
std::vector<TfrSeries> generate_tfr_synthetic(const TfrSyntheticOptions& options);

}  // namespace btm
