#pragma once

// Command orchestration behind the `btm` executable: configuration
// resolution, fitting, projection, validation, simulation and summaries.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "btm/model_mcpr.hpp"
#include "btm/model_tfr.hpp"
#include "btm/sampler.hpp"
#include "btm/validation.hpp"

namespace btm {

enum class Command { fit, project, validate, simulate, summarize };
enum class ModelKind { mcpr_bspline, mcpr_approx_logistic, tfr_bspline };

std::string_view to_string(Command c);
std::string_view to_string(ModelKind m);
std::optional<Command> parse_command(std::string_view name);
std::optional<ModelKind> parse_model_kind(std::string_view name);

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNotConverged = 4;
inline constexpr double kRhatThreshold = 1.05;

struct SimulateSettings {
  int regions = 2;
  int subregions_per_region = 2;
  int countries = 6;
  int obs_min = 4;
  int obs_max = 20;
  bool zero_noise = false;
  std::string truth = "plausible";  // or "prior"
};

struct RunConfig {
  Command command = Command::fit;
  ModelKind model = ModelKind::mcpr_bspline;
  int knots = 5;
  int degree = 2;
  int chains = 4;
  int warmup = 250;
  int samples = 500;
  double adapt_delta = 0.999;
  int max_treedepth = 15;
  std::uint64_t seed = 1;
  std::string data;
  std::string hierarchy;
  std::string out = "btm_out";
  std::string fit_dir;  // project/summarize input; defaults to out
  std::string holdout = "random";
  int cutoff_year = 2010;
  int repetitions = 5;
  int horizon_year = kTfrHorizonYear;
  bool allow_nonconverged = false;
  SimulateSettings simulate;

  void validate() const;
  SamplerConfig sampler() const;
  McprModelConfig mcpr_model() const;
  TfrModelConfig tfr_model() const;
};

// Sampler budgets used for validation runs and for final runs.
void apply_preset(RunConfig& cfg, std::string_view preset);

nlohmann::json to_json(const RunConfig& cfg);
// Overwrites the fields present in `j`; unknown keys raise ConfigError.
void apply_json(RunConfig& cfg, const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// Posterior draws with their chain and iteration labels.
struct DrawTable {
  std::vector<std::string> names;
  std::vector<int> chain;
  std::vector<int> iteration;
  Eigen::MatrixXd values;  // rows x parameters

  static DrawTable from_result(const SampleResult& result, std::vector<std::string> names);
  static DrawTable read(const std::filesystem::path& path);
  std::string to_csv() const;
  int num_chains() const;
  // iterations x chains for parameter i; chains must have equal lengths.
  Eigen::MatrixXd parameter(int i) const;
};

inline constexpr std::array<double, 7> kOutputQuantiles = {0.025, 0.10, 0.25, 0.50,
                                                           0.75,  0.90, 0.975};

struct ConvergenceSummary {
  double max_rhat = 0.0;
  double min_ess = 0.0;
  std::vector<std::string> above_threshold;
  int constant_parameters = 0;
};

ConvergenceSummary convergence(const DrawTable& draws);

// Runs a command; returns the process exit status. Progress goes to `log`.
int run_command(const RunConfig& cfg, std::ostream& log);

// Full command-line entry point (argument parsing plus error mapping).
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace btm
