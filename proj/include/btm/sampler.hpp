#pragma once

// Multinomial No-U-Turn sampler with a diagonal metric, dual-averaging step
// size adaptation and windowed metric adaptation. Chains run independently;
// chain k draws from an RNG seeded with (seed, k), so serial and parallel
// runs give identical output.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace btm {

// Log density on the unconstrained scale. Fills the gradient when the second
// argument is non-null. Must be safe to call concurrently.
using LogDensityFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct Target {
  int dimension = 0;
  LogDensityFn log_density;
};

template <class Model>
Target make_target(const Model& model) {
  return {model.dimension(),
          [&model](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return model.log_density(x, g); }};
}

struct SamplerConfig {
  int chains = 4;
  int warmup = 1000;
  int samples = 1000;
  double adapt_delta = 0.8;
  int max_treedepth = 10;
  std::uint64_t seed = 1;
  bool parallel = true;
  double init_radius = 2.0;
  int max_init_attempts = 100;
  // Fixed inverse metric; disables metric adaptation when set.
  std::optional<Eigen::VectorXd> inverse_metric;
  // Fixed step size; disables step-size adaptation when set.
  std::optional<double> step_size;
  // Starting point shared by all chains instead of random initialization.
  std::optional<Eigen::VectorXd> init;
  // Called from the chain's thread after each iteration.
  std::function<void(int chain, int iteration)> progress;

  void validate() const;
};

// Per-iteration NUTS statistics, sampling phase only.
struct IterationStats {
  double accept_stat = 0.0;
  double energy = 0.0;
  double energy_error = 0.0;  // H(selected) - H(initial)
  int treedepth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
};

struct ChainResult {
  Eigen::MatrixXd draws;  // samples x dimension
  std::vector<IterationStats> stats;
  double step_size = 0.0;
  Eigen::VectorXd inverse_metric;
  int warmup_divergences = 0;

  int divergences() const;
  int treedepth_hits(int max_treedepth) const;
  double mean_accept_stat() const;
};

struct SampleResult {
  std::vector<ChainResult> chains;
  int max_treedepth = 0;

  int dimension() const { return chains.empty() ? 0 : static_cast<int>(chains[0].draws.cols()); }
  int num_samples() const { return chains.empty() ? 0 : static_cast<int>(chains[0].draws.rows()); }
  int divergences() const;
  int treedepth_hits() const;
  // Draws of parameter i as an iterations x chains matrix.
  Eigen::MatrixXd parameter(int i) const;
  // All draws stacked chain after chain: (chains * samples) x dimension.
  Eigen::MatrixXd pooled() const;
};

// One leapfrog step with a diagonal inverse metric. `grad` holds the
// gradient at q on entry and at the new q on exit. Returns the log density
// at the new q.
double leapfrog(const Target& target, Eigen::VectorXd& q, Eigen::VectorXd& p,
                Eigen::VectorXd& grad, const Eigen::VectorXd& inverse_metric, double epsilon);

SampleResult nuts_sample(const Target& target, const SamplerConfig& config);

}  // namespace btm
