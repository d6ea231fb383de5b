#pragma once

// The hierarchical mCPR transition model: logit-scale process recursion
// around a 1990 anchor, hierarchical priors on level, asymptote and
// transition shape, AR(1) smoothing, and a truncated-normal data model.
//
// The sampler works on a flat unconstrained vector. Every hierarchical
// normal is non-centered (mean + scale * standard deviate) and the AR(1)
// deviations are driven by standard-normal innovations; scales are
// log-transformed and rho is logit-transformed.

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "btm/data.hpp"
#include "btm/spline_basis.hpp"
#include "btm/transition.hpp"

namespace btm {

enum class McprTransition { bspline, approx_logistic };

struct TimeGrid {
  int first_year = 1970;
  int last_year = 2030;
  int reference_year = 1990;

  int size() const { return last_year - first_year + 1; }
  int index(int year) const { return year - first_year; }
  int anchor() const { return index(reference_year); }
  bool contains(int year) const { return year >= first_year && year <= last_year; }
  void validate() const;
};

// Logit-scale trajectories are clamped to +/- this value.
inline constexpr double kLogitClamp = 15.0;

// lambda^u = 0.5 + 0.45 * logit^-1(raw)
double upper_asymptote(double raw);
// omega = 0.5 * logit^-1(raw)
double logistic_pace(double raw);

// Model parameters on their natural (constrained, centered) scale.
struct McprParams {
  Eigen::VectorXd level;             // Omega_c, logit scale
  Eigen::VectorXd level_subregion;
  Eigen::VectorXd level_region;
  double level_world = 0.0;
  double level_sigma_country = 1.0;
  double level_sigma_region = 1.0;  // shared by the subregion and region levels

  // B-spline transition: raw free coefficients, one column per coefficient.
  Eigen::MatrixXd beta;             // C x P
  Eigen::MatrixXd beta_subregion;   // S x P
  Eigen::MatrixXd beta_region;      // R x P
  Eigen::VectorXd beta_world;       // P
  Eigen::VectorXd beta_sigma_country;
  Eigen::VectorXd beta_sigma_subregion;
  Eigen::VectorXd beta_sigma_region;

  // Approximate logistic transition: raw pace.
  Eigen::VectorXd pace;             // C
  Eigen::VectorXd pace_subregion;
  Eigen::VectorXd pace_region;
  double pace_world = 0.0;
  double pace_sigma_country = 1.0;
  double pace_sigma_subregion = 1.0;
  double pace_sigma_region = 1.0;

  Eigen::VectorXd asymptote;        // raw lambda-tilde per country
  double asymptote_world = 0.0;
  double asymptote_sigma = 1.0;

  double rho = 0.5;
  double tau = 0.1;
  Eigen::MatrixXd eps;              // C x T
  Eigen::VectorXd source_sigma;     // D
};

struct LatentTrajectory {
  Eigen::MatrixXd logit_eta;  // C x T
  Eigen::MatrixXd eta;        // C x T
  int clamped = 0;
};

struct McprModelConfig {
  McprTransition transition = McprTransition::bspline;
  int num_knots = 5;
  int degree = 2;
  TimeGrid grid;
};

// Builds the transition-function coefficients (length J) for one country.
std::vector<double> country_coefficients(const McprParams& p, McprTransition transition,
                                         const KnotSequence& ks,
                                         std::span<const double> logistic_anchors, int c);

// Forward/backward recursion from the reference year.
LatentTrajectory propagate(const McprParams& params, McprTransition transition,
                           const TimeGrid& grid, const KnotSequence& ks);

// Centered hierarchical log density of all non-AR(1) parameters plus
// hyperpriors. Returns -inf for invalid scales or rho outside (0, 1).
double log_prior(const McprParams& params, const HierarchyIndex& h, McprTransition transition);

// AR(1) log density of one country's deviations anchored at index `anchor`:
// stationary N(0, tau^2 / (1 - rho^2)) at the anchor and first-order chains
// radiating forward and backward from it.
double log_ar1(std::span<const double> eps, double rho, double tau, int anchor);

// Truncated-normal log density of y on [0, 1] with mean eta and SD sd.
double truncated_normal_lpdf(double y, double eta, double sd);

double log_likelihood(const LatentTrajectory& traj, std::span<const Observation> obs,
                      const Eigen::VectorXd& source_sigma, const TimeGrid& grid);

class McprModel {
 public:
  McprModel(McprModelConfig config, HierarchyIndex hierarchy,
            std::vector<Observation> observations, int num_sources);

  const McprModelConfig& config() const { return config_; }
  const HierarchyIndex& hierarchy() const { return hierarchy_; }
  const std::vector<Observation>& observations() const { return observations_; }
  const KnotSequence& knots() const { return knots_; }
  const std::vector<double>& logistic_anchors() const { return anchors_; }
  int num_sources() const { return num_sources_; }
  int num_free_coefficients() const { return free_.size(); }

  int dimension() const { return dim_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  McprParams unpack(const Eigen::VectorXd& x) const;
  Eigen::VectorXd pack(const McprParams& p) const;

  // Joint log density on the unconstrained scale, Jacobians included. The
  // gradient is filled when `grad` is non-null. Returns -inf when the
  // density is not finite.
  double log_density(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const;

  // log_density minus the log-Jacobian of the non-centering and scale
  // transforms, i.e. log_prior + AR(1) + likelihood of unpack(x).
  double centered_log_density(const Eigen::VectorXd& x) const;

  // Parameters with every block set to a prior-typical value; used as a
  // starting point by the generator and tests.
  McprParams zero_params() const;

  // Number of clamped trajectory points seen by log_density so far.
  std::int64_t clamp_events() const { return clamp_events_->load(); }

 private:
  struct Layout {
    int beta_world = 0, beta_log_sigma_region = 0, beta_log_sigma_subregion = 0,
        beta_log_sigma_country = 0, beta_z_region = 0, beta_z_subregion = 0,
        beta_z_country = 0;
    int pace_world = 0, pace_log_sigma_region = 0, pace_log_sigma_subregion = 0,
        pace_log_sigma_country = 0, pace_z_region = 0, pace_z_subregion = 0,
        pace_z_country = 0;
    int asymptote_world = 0, asymptote_log_sigma = 0, asymptote_z = 0;
    int level_world = 0, level_log_sigma_country = 0, level_log_sigma_region = 0,
        level_z_region = 0, level_z_subregion = 0, level_z_country = 0;
    int logit_rho = 0, log_tau = 0, eps_z = 0, log_source_sigma = 0;
  };

  void build_layout();

  McprModelConfig config_;
  HierarchyIndex hierarchy_;
  std::vector<Observation> observations_;
  std::vector<std::vector<int>> obs_by_country_;
  int num_sources_;
  KnotSequence knots_;
  CoefficientRange free_;
  std::vector<double> anchors_;
  Layout layout_;
  int dim_ = 0;
  std::vector<std::string> names_;
  std::unique_ptr<std::atomic<std::int64_t>> clamp_events_ =
      std::make_unique<std::atomic<std::int64_t>>(0);
};

}  // namespace btm
