#pragma once

// Out-of-sample validation: hold-out splits, posterior predictive draws for
// held-out observations, coverage/error/PIT summaries, a synthetic-data
// generator, and simulation-based calibration.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "btm/data.hpp"
#include "btm/model_mcpr.hpp"
#include "btm/sampler.hpp"

namespace btm {

enum class HoldoutKind { random_20pct, after_cutoff };

std::string_view to_string(HoldoutKind kind);
std::optional<HoldoutKind> parse_holdout_kind(std::string_view name);

struct HoldoutPlan {
  HoldoutKind kind = HoldoutKind::random_20pct;
  int cutoff_year = 2010;
  int repetitions = 5;
  double fraction = 0.2;
  std::uint64_t seed = 1;
};

// Indices into the observation list.
struct Split {
  std::vector<int> train;
  std::vector<int> validation;
  std::vector<int> error_subset;  // subset of validation
};

// Random splits use repetition `repetition` of the plan's seed stream.
// Throws DataError when the training set would be empty.
Split split(std::span<const Observation> obs, const HoldoutPlan& plan, int repetition = 0);

// One draw from N(mean, sd^2) truncated to [0, 1]; sd == 0 returns mean.
double truncated_normal_draw(double mean, double sd, std::mt19937_64& rng);

// eta and sd are draws x held-out matrices; returns predictive draws of the
// same shape.
Eigen::MatrixXd posterior_predictive(const Eigen::MatrixXd& eta, const Eigen::MatrixXd& sd,
                                     std::uint64_t seed);

inline constexpr std::array<double, 4> kPitBelow = {0.05, 0.10, 0.25, 0.50};
inline constexpr std::array<double, 4> kPitAbove = {0.50, 0.75, 0.90, 0.95};

// Percentages are on [0, 100]; widths and errors are on the data scale.
struct ValidationReport {
  bool applicable = false;
  int num_heldout = 0;
  int num_eligible = 0;
  double pct_below = 0.0;
  double pct_included = 0.0;
  double pct_above = 0.0;
  double median_ci_width = 0.0;
  double me = 0.0;
  double mae = 0.0;
  std::array<double, 4> pit_below{};  // % strictly below the 5/10/25/50% quantiles
  std::array<double, 4> pit_above{};  // % at or above the 50/75/90/95% quantiles
};

// predictive: draws x held-out; observed: one value per held-out column;
// eligible: column indices used for the metrics.
ValidationReport summarize(const Eigen::MatrixXd& predictive, std::span<const double> observed,
                           std::span<const int> eligible);

// Field-wise mean over applicable reports; counts are summed.
ValidationReport average_reports(std::span<const ValidationReport> reports);

std::string format_table1_csv(std::span<const std::pair<std::string, ValidationReport>> rows);
std::string format_table2_csv(std::span<const std::pair<std::string, ValidationReport>> rows);
std::string report_to_json(const ValidationReport& report, int indent = 2);

// Fits the model on each split's training data and summarizes the held-out
// predictive distribution.
struct ValidationRun {
  HoldoutPlan plan;
  std::vector<Split> splits;
  std::vector<ValidationReport> repetitions;
  ValidationReport combined;
  double max_rhat = 0.0;
};

ValidationRun run_validation(const McprDataset& data, const McprModelConfig& model,
                             const SamplerConfig& sampler, const HoldoutPlan& plan);

// Per-draw latent mCPR and total SD at the given observations.
void predictive_inputs(const McprModel& model, const Eigen::MatrixXd& draws,
                       std::span<const Observation> obs, Eigen::MatrixXd& eta,
                       Eigen::MatrixXd& sd);

// ---- synthetic data ----

struct SparsityProfile {
  int min_obs = 4;
  int max_obs = 20;
  int first_year = 1975;
  int last_year = 2020;
};

enum class TruthSource { prior, plausible };

struct SyntheticOptions {
  McprModelConfig model;
  SparsityProfile sparsity;
  TruthSource truth = TruthSource::plausible;
  bool zero_noise = false;
  double sampling_sd_min = 0.01;
  double sampling_sd_max = 0.04;
  std::uint64_t seed = 1;
};

inline constexpr std::array<SourceType, 4> kSyntheticSources = {
    SourceType::DHS, SourceType::PMA, SourceType::MICS, SourceType::National};

struct SyntheticDataset {
  McprDataset data;
  Eigen::VectorXd truth;  // unconstrained parameter vector
  McprParams params;
  LatentTrajectory trajectory;
};

// Every parameter drawn from its prior.
Eigen::VectorXd draw_prior(const McprModel& model, std::mt19937_64& rng);
// Hyperparameters fixed at typical values; lower levels drawn from the
// hierarchy and AR(1) process.
Eigen::VectorXd draw_plausible(const McprModel& model, std::mt19937_64& rng);

// Skeleton with `regions` regions, `subregions_per_region` subregions each
// and `countries` countries spread round-robin over the subregions.
HierarchyIndex make_skeleton(int regions, int subregions_per_region, int countries);

SyntheticDataset generate_synthetic(const HierarchyIndex& skeleton, const SyntheticOptions& options,
                                    const std::optional<Eigen::VectorXd>& truth = std::nullopt);

std::string format_truth_csv(const McprModel& model, const SyntheticDataset& synthetic);

// ---- simulation-based calibration ----

struct FitOutcome {
  Eigen::MatrixXd draws;  // pooled draws x dimension
  int divergences = 0;
  int transitions = 0;
};

using Fitter = std::function<FitOutcome(const McprModel&, std::uint64_t seed)>;
using TruthDraw = std::function<Eigen::VectorXd(const McprModel&, std::mt19937_64&)>;

Fitter nuts_fitter(SamplerConfig config);

struct SbcConfig {
  int replicates = 20;
  HierarchyIndex skeleton;
  SyntheticOptions synthetic;
  int thin = 10;
  int bins = 4;
  std::uint64_t seed = 1;
  double divergence_limit = 0.1;
  TruthDraw draw_truth;  // defaults to draw_prior
};

struct SbcReport {
  std::vector<std::string> monitored;
  std::vector<int> monitored_index;
  Eigen::MatrixXi ranks;  // replicates x monitored
  int max_rank = 0;
  std::vector<double> chi_squared;
  std::vector<double> p_value;
  std::vector<bool> flagged;  // per replicate: divergence rate above the limit
  double fraction_passing(double alpha = 0.01) const;
};

// Indices of the world-level transition, asymptote, rho, tau and source SD
// parameters.
std::vector<int> sbc_monitored(const McprModel& model);

SbcReport sbc(const SbcConfig& config, const Fitter& fitter);

// Chi-squared uniformity test of ranks in [0, max_rank] over `bins` bins.
std::pair<double, double> rank_uniformity(std::span<const int> ranks, int max_rank, int bins);

}  // namespace btm
