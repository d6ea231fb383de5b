#include "btm/sampler.hpp"

#include <cmath>
#include <exception>
#include <limits>
#include <random>
#include <thread>

#include "btm/errors.hpp"
#include "btm/math.hpp"

namespace btm {

namespace {

constexpr double kMaxDeltaH = 1000.0;
constexpr double kMinStepSize = 1e-12;
constexpr double kInf = std::numeric_limits<double>::infinity();

struct PhasePoint {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
  Eigen::VectorXd grad;
  double log_density = 0.0;
};

class DualAveraging {
 public:
  DualAveraging(double delta) : delta_(delta) {}

  void set_mu(double mu) { mu_ = mu; }
  void restart() {
    counter_ = 0;
    s_bar_ = 0.0;
    x_bar_ = 0.0;
  }
  void learn(double& epsilon, double adapt_stat) {
    ++counter_;
    adapt_stat = std::min(adapt_stat, 1.0);
    const double eta = 1.0 / (counter_ + t0_);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (delta_ - adapt_stat);
    const double x = mu_ - s_bar_ * std::sqrt(static_cast<double>(counter_)) / gamma_;
    const double x_eta = std::pow(static_cast<double>(counter_), -kappa_);
    x_bar_ = (1.0 - x_eta) * x_bar_ + x_eta * x;
    epsilon = std::exp(x);
  }
  double final_step_size() const { return std::exp(x_bar_); }

 private:
  double delta_;
  double mu_ = std::log(10.0);
  double gamma_ = 0.05;
  double kappa_ = 0.75;
  double t0_ = 10.0;
  int counter_ = 0;
  double s_bar_ = 0.0;
  double x_bar_ = 0.0;
};

// Windowed variance estimation: fast initial buffer, slow doubling windows,
// fast terminal buffer.
class MetricWindows {
 public:
  MetricWindows(int num_warmup, int dim) : num_warmup_(num_warmup), mean_(dim), m2_(dim) {
    int init_buffer = 75, term_buffer = 50, base_window = 25;
    if (init_buffer + base_window + term_buffer > num_warmup) {
      init_buffer = static_cast<int>(0.15 * num_warmup);
      term_buffer = static_cast<int>(0.1 * num_warmup);
      base_window = num_warmup - (init_buffer + term_buffer);
    }
    init_buffer_ = init_buffer;
    term_buffer_ = term_buffer;
    window_size_ = base_window;
    next_window_ = init_buffer_ + window_size_ - 1;
    reset_estimator();
  }

  // Returns true when a window closes and `inverse_metric` was updated.
  bool learn(Eigen::VectorXd& inverse_metric, const Eigen::VectorXd& q) {
    if (in_window()) add(q);
    if (counter_ == next_window_ && counter_ != num_warmup_) {
      compute_next_window();
      const double n = static_cast<double>(n_);
      Eigen::VectorXd var = m2_ / (n - 1.0);
      inverse_metric = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
      if (!inverse_metric.allFinite()) {
        throw SamplerError("metric adaptation produced a non-finite variance");
      }
      reset_estimator();
      ++counter_;
      return true;
    }
    ++counter_;
    return false;
  }

 private:
  bool in_window() const {
    return counter_ >= init_buffer_ && counter_ < num_warmup_ - term_buffer_ &&
           counter_ != num_warmup_;
  }
  void compute_next_window() {
    if (next_window_ == num_warmup_ - term_buffer_ - 1) return;
    window_size_ *= 2;
    next_window_ = counter_ + window_size_;
    if (next_window_ != num_warmup_ - term_buffer_ - 1) {
      const int boundary = next_window_ + 2 * window_size_;
      if (boundary >= num_warmup_ - term_buffer_) next_window_ = num_warmup_ - term_buffer_ - 1;
    }
  }
  void add(const Eigen::VectorXd& q) {
    ++n_;
    Eigen::VectorXd delta = q - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_.array() += delta.array() * (q - mean_).array();
  }
  void reset_estimator() {
    n_ = 0;
    mean_.setZero();
    m2_.setZero();
  }

  int num_warmup_;
  int init_buffer_ = 0, term_buffer_ = 0, window_size_ = 0, next_window_ = 0;
  int counter_ = 0;
  long n_ = 0;
  Eigen::VectorXd mean_, m2_;
};

class Chain {
 public:
  Chain(const Target& target, const SamplerConfig& cfg, int index)
      : target_(target), cfg_(cfg), index_(index), rng_(seed_for(cfg.seed, index)) {
    const int dim = target.dimension;
    inv_metric_ = cfg.inverse_metric ? *cfg.inverse_metric : Eigen::VectorXd::Ones(dim);
    z_.q.resize(dim);
    z_.p.resize(dim);
    z_.grad.resize(dim);
  }

  ChainResult run() {
    initialize();
    ChainResult out;
    const bool adapt_step = !cfg_.step_size.has_value();
    const bool adapt_metric = !cfg_.inverse_metric.has_value();
    epsilon_ = adapt_step ? 1.0 : *cfg_.step_size;
    DualAveraging dual(cfg_.adapt_delta);
    if (adapt_step) {
      init_stepsize();
      dual.set_mu(std::log(10.0 * epsilon_));
    }
    std::optional<MetricWindows> windows;
    if (adapt_metric && cfg_.warmup >= 20) windows.emplace(cfg_.warmup, target_.dimension);

    for (int it = 0; it < cfg_.warmup; ++it) {
      auto s = transition();
      out.warmup_divergences += s.divergent;
      if (adapt_step) dual.learn(epsilon_, s.accept_stat);
      if (windows && windows->learn(inv_metric_, z_.q)) {
        if (adapt_step) {
          init_stepsize();
          dual.set_mu(std::log(10.0 * epsilon_));
          dual.restart();
        }
      }
      check_step_size(it);
      if (cfg_.progress) cfg_.progress(index_, it);
    }
    if (adapt_step && cfg_.warmup > 0) epsilon_ = dual.final_step_size();
    check_step_size(cfg_.warmup);

    out.draws.resize(cfg_.samples, target_.dimension);
    out.stats.reserve(cfg_.samples);
    for (int it = 0; it < cfg_.samples; ++it) {
      out.stats.push_back(transition());
      out.draws.row(it) = z_.q.transpose();
      if (cfg_.progress) cfg_.progress(index_, cfg_.warmup + it);
    }
    out.step_size = epsilon_;
    out.inverse_metric = inv_metric_;
    return out;
  }

 private:
  static std::mt19937_64 seed_for(std::uint64_t seed, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index)};
    return std::mt19937_64(seq);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }

  void initialize() {
    const int dim = target_.dimension;
    if (cfg_.init) {
      if (cfg_.init->size() != dim) throw ConfigError("initial point has the wrong dimension");
      z_.q = *cfg_.init;
      z_.log_density = target_.log_density(z_.q, &z_.grad);
      if (std::isfinite(z_.log_density) && z_.grad.allFinite()) return;
      throw SamplerError("chain " + std::to_string(index_) +
                         ": target is not finite at the supplied initial point");
    }
    std::uniform_real_distribution<double> unif(-cfg_.init_radius, cfg_.init_radius);
    for (int attempt = 0; attempt < cfg_.max_init_attempts; ++attempt) {
      for (int i = 0; i < dim; ++i) z_.q[i] = unif(rng_);
      z_.log_density = target_.log_density(z_.q, &z_.grad);
      if (std::isfinite(z_.log_density) && z_.grad.allFinite()) return;
    }
    throw SamplerError("chain " + std::to_string(index_) + ": initialization failed after " +
                       std::to_string(cfg_.max_init_attempts) + " attempts");
  }

  void check_step_size(int iteration) const {
    if (!(epsilon_ >= kMinStepSize)) {
      throw SamplerError("chain " + std::to_string(index_) + ": step size underflow (" +
                         std::to_string(epsilon_) + ") at iteration " +
                         std::to_string(iteration));
    }
  }

  void sample_momentum(PhasePoint& z) {
    for (Eigen::Index i = 0; i < z.p.size(); ++i) {
      z.p[i] = normal_(rng_) / std::sqrt(inv_metric_[i]);
    }
  }

  double hamiltonian(const PhasePoint& z) const {
    double h = -z.log_density + 0.5 * (z.p.array().square() * inv_metric_.array()).sum();
    return std::isnan(h) ? kInf : h;
  }

  Eigen::VectorXd p_sharp(const PhasePoint& z) const {
    return (inv_metric_.array() * z.p.array()).matrix();
  }

  void evolve(PhasePoint& z, double eps) {
    z.log_density = leapfrog(target_, z.q, z.p, z.grad, inv_metric_, eps);
  }

  void init_stepsize() {
    if (epsilon_ == 0 || epsilon_ > 1e7 || std::isnan(epsilon_)) return;
    const PhasePoint start = z_;
    auto trial = [&]() {
      z_ = start;
      sample_momentum(z_);
      const double h0 = hamiltonian(z_);
      evolve(z_, epsilon_);
      return h0 - hamiltonian(z_);
    };
    const double log_target = std::log(0.8);
    const int direction = trial() > log_target ? 1 : -1;
    while (true) {
      const double delta_h = trial();
      if (direction == 1 && !(delta_h > log_target)) break;
      if (direction == -1 && !(delta_h < log_target)) break;
      epsilon_ = direction == 1 ? 2.0 * epsilon_ : 0.5 * epsilon_;
      if (epsilon_ > 1e7) {
        throw SamplerError("posterior appears improper: step size search diverged");
      }
      if (epsilon_ < kMinStepSize) {
        throw SamplerError("chain " + std::to_string(index_) +
                           ": no acceptably small step size found");
      }
    }
    z_ = start;
  }

  static bool criterion(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus,
                        const Eigen::VectorXd& rho) {
    return p_sharp_plus.dot(rho) > 0 && p_sharp_minus.dot(rho) > 0;
  }

  bool build_tree(int depth, PhasePoint& z_propose, Eigen::VectorXd& p_sharp_beg,
                  Eigen::VectorXd& p_sharp_end, Eigen::VectorXd& rho, Eigen::VectorXd& p_beg,
                  Eigen::VectorXd& p_end, double h0, double sign, int& n_leapfrog,
                  double& log_sum_weight, double& sum_metro_prob) {
    if (depth == 0) {
      evolve(z_, sign * epsilon_);
      ++n_leapfrog;
      const double h = hamiltonian(z_);
      if (h - h0 > kMaxDeltaH) divergent_ = true;
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      sum_metro_prob += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
      z_propose = z_;
      p_sharp_beg = p_sharp(z_);
      p_sharp_end = p_sharp_beg;
      rho += z_.p;
      p_beg = z_.p;
      p_end = p_beg;
      return !divergent_;
    }

    const Eigen::Index dim = z_.q.size();
    double log_sum_weight_init = -kInf;
    Eigen::VectorXd p_init_end(dim), p_sharp_init_end(dim);
    Eigen::VectorXd rho_init = Eigen::VectorXd::Zero(dim);
    if (!build_tree(depth - 1, z_propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg,
                    p_init_end, h0, sign, n_leapfrog, log_sum_weight_init, sum_metro_prob)) {
      return false;
    }

    PhasePoint z_propose_final = z_;
    double log_sum_weight_final = -kInf;
    Eigen::VectorXd p_final_beg(dim), p_sharp_final_beg(dim);
    Eigen::VectorXd rho_final = Eigen::VectorXd::Zero(dim);
    if (!build_tree(depth - 1, z_propose_final, p_sharp_final_beg, p_sharp_end, rho_final,
                    p_final_beg, p_end, h0, sign, n_leapfrog, log_sum_weight_final,
                    sum_metro_prob)) {
      return false;
    }

    const double log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
    if (log_sum_weight_final > log_sum_weight_subtree) {
      z_propose = z_propose_final;
    } else if (uniform() < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
      z_propose = z_propose_final;
    }

    Eigen::VectorXd rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = criterion(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && criterion(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && criterion(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }

  IterationStats transition() {
    sample_momentum(z_);
    divergent_ = false;
    PhasePoint z_fwd = z_, z_bck = z_, z_sample = z_, z_propose = z_;
    Eigen::VectorXd p_fwd_fwd = z_.p, p_fwd_bck = z_.p, p_bck_fwd = z_.p, p_bck_bck = z_.p;
    Eigen::VectorXd p_sharp_fwd_fwd = p_sharp(z_);
    Eigen::VectorXd p_sharp_fwd_bck = p_sharp_fwd_fwd, p_sharp_bck_fwd = p_sharp_fwd_fwd,
                    p_sharp_bck_bck = p_sharp_fwd_fwd;
    Eigen::VectorXd rho = z_.p;
    double log_sum_weight = 0.0;
    const double h0 = hamiltonian(z_);
    int n_leapfrog = 0;
    double sum_metro_prob = 0.0;
    int depth = 0;
    const Eigen::Index dim = z_.q.size();

    while (depth < cfg_.max_treedepth) {
      Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(dim);
      Eigen::VectorXd rho_bck = Eigen::VectorXd::Zero(dim);
      bool valid = false;
      double log_sum_weight_subtree = -kInf;
      if (uniform() > 0.5) {
        z_ = z_fwd;
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        valid = build_tree(depth, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd, p_fwd_bck,
                           p_fwd_fwd, h0, 1.0, n_leapfrog, log_sum_weight_subtree,
                           sum_metro_prob);
        z_fwd = z_;
      } else {
        z_ = z_bck;
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        valid = build_tree(depth, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck, p_bck_fwd,
                           p_bck_bck, h0, -1.0, n_leapfrog, log_sum_weight_subtree,
                           sum_metro_prob);
        z_bck = z_;
      }
      if (!valid) break;
      ++depth;

      if (log_sum_weight_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (uniform() < std::exp(log_sum_weight_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

      rho = rho_bck + rho_fwd;
      bool persist = criterion(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      persist = persist && criterion(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
      persist = persist && criterion(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
      if (!persist) break;
    }

    IterationStats s;
    s.n_leapfrog = n_leapfrog;
    s.treedepth = depth;
    s.divergent = divergent_;
    s.accept_stat = n_leapfrog > 0 ? sum_metro_prob / n_leapfrog : 0.0;
    z_ = z_sample;
    s.energy = hamiltonian(z_);
    s.energy_error = s.energy - h0;
    return s;
  }

  const Target& target_;
  const SamplerConfig& cfg_;
  int index_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  Eigen::VectorXd inv_metric_;
  PhasePoint z_;
  double epsilon_ = 1.0;
  bool divergent_ = false;
};

}  // namespace

void SamplerConfig::validate() const {
  if (chains < 1) throw ConfigError("chains must be at least 1");
  if (warmup < 0 || samples < 1) throw ConfigError("warmup must be >= 0 and samples >= 1");
  if (!(adapt_delta > 0.0 && adapt_delta < 1.0)) throw ConfigError("adapt_delta must lie in (0, 1)");
  if (max_treedepth < 1) throw ConfigError("max_treedepth must be at least 1");
  if (!(init_radius > 0.0)) throw ConfigError("init_radius must be positive");
  if (step_size && !(*step_size > 0.0)) throw ConfigError("step size must be positive");
  if (inverse_metric && !((inverse_metric->array() > 0.0).all())) {
    throw ConfigError("inverse metric entries must be positive");
  }
}

double leapfrog(const Target& target, Eigen::VectorXd& q, Eigen::VectorXd& p,
                Eigen::VectorXd& grad, const Eigen::VectorXd& inverse_metric, double epsilon) {
  p += 0.5 * epsilon * grad;
  q.array() += epsilon * inverse_metric.array() * p.array();
  const double lp = target.log_density(q, &grad);
  p += 0.5 * epsilon * grad;
  return lp;
}

int ChainResult::divergences() const {
  int n = 0;
  for (const auto& s : stats) n += s.divergent;
  return n;
}

int ChainResult::treedepth_hits(int max_treedepth) const {
  int n = 0;
  for (const auto& s : stats) n += s.treedepth >= max_treedepth;
  return n;
}

double ChainResult::mean_accept_stat() const {
  if (stats.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& s : stats) sum += s.accept_stat;
  return sum / static_cast<double>(stats.size());
}

int SampleResult::divergences() const {
  int n = 0;
  for (const auto& c : chains) n += c.divergences();
  return n;
}

int SampleResult::treedepth_hits() const {
  int n = 0;
  for (const auto& c : chains) n += c.treedepth_hits(max_treedepth);
  return n;
}

Eigen::MatrixXd SampleResult::parameter(int i) const {
  Eigen::MatrixXd out(num_samples(), static_cast<Eigen::Index>(chains.size()));
  for (std::size_t k = 0; k < chains.size(); ++k) out.col(k) = chains[k].draws.col(i);
  return out;
}

Eigen::MatrixXd SampleResult::pooled() const {
  const Eigen::Index n = num_samples();
  Eigen::MatrixXd out(n * static_cast<Eigen::Index>(chains.size()), dimension());
  for (std::size_t k = 0; k < chains.size(); ++k) out.middleRows(k * n, n) = chains[k].draws;
  return out;
}

SampleResult nuts_sample(const Target& target, const SamplerConfig& config) {
  config.validate();
  if (target.dimension < 1 || !target.log_density) {
    throw ConfigError("sampler target has no dimensions or no density");
  }
  if (config.inverse_metric && config.inverse_metric->size() != target.dimension) {
    throw ConfigError("inverse metric has the wrong dimension");
  }
  SampleResult result;
  result.max_treedepth = config.max_treedepth;
  result.chains.resize(config.chains);
  std::vector<std::exception_ptr> errors(config.chains);
  auto run_chain = [&](int k) {
    try {
      Chain chain(target, config, k);
      result.chains[k] = chain.run();
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (config.parallel && config.chains > 1) {
    std::vector<std::thread> threads;
    for (int k = 0; k < config.chains; ++k) threads.emplace_back(run_chain, k);
    for (auto& t : threads) t.join();
  } else {
    for (int k = 0; k < config.chains; ++k) run_chain(k);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return result;
}

}  // namespace btm
