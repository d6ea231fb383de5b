#include "btm/validation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "btm/diagnostics.hpp"
#include "btm/errors.hpp"
#include "btm/io.hpp"
#include "btm/math.hpp"

namespace btm {

std::string_view to_string(HoldoutKind kind) {
  return kind == HoldoutKind::random_20pct ? "random" : "cutoff";
}

std::optional<HoldoutKind> parse_holdout_kind(std::string_view name) {
  if (name == "random" || name == "random_20pct") return HoldoutKind::random_20pct;
  if (name == "cutoff" || name == "after_cutoff") return HoldoutKind::after_cutoff;
  return std::nullopt;
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto rng = stream(seed, a, b);
  return rng();
}

}  // namespace

Split split(std::span<const Observation> obs, const HoldoutPlan& plan, int repetition) {
  if (obs.empty()) {
    throw DataError("cannot split an empty dataset");
  }
  const int n = static_cast<int>(obs.size());
  Split out;
  std::vector<char> held(n, 0);
  if (plan.kind == HoldoutKind::random_20pct) {
    if (!(plan.fraction > 0.0 && plan.fraction < 1.0)) {
      throw ConfigError("hold-out fraction must lie in (0, 1)");
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = stream(plan.seed, 0x5b1, static_cast<std::uint64_t>(repetition));
    std::shuffle(order.begin(), order.end(), rng);
    const int k = static_cast<int>(std::llround(plan.fraction * n));
    for (int i = 0; i < k; ++i) held[order[i]] = 1;
  } else {
    for (int i = 0; i < n; ++i) held[i] = obs[i].year >= plan.cutoff_year;
  }
  for (int i = 0; i < n; ++i) (held[i] ? out.validation : out.train).push_back(i);
  if (out.train.empty()) {
    throw DataError("hold-out plan leaves no training observations");
  }

  std::map<int, int> train_count;
  for (int i : out.train) ++train_count[obs[i].country];
  if (plan.kind == HoldoutKind::random_20pct) {
    for (int i : out.validation) {
      if (train_count.count(obs[i].country)) out.error_subset.push_back(i);
    }
  } else {
    // latest held-out observation per country; later rows win ties
    std::map<int, int> latest;
    for (int i : out.validation) {
      const int c = obs[i].country;
      if (!train_count.count(c)) continue;
      auto it = latest.find(c);
      if (it == latest.end() || obs[i].year >= obs[it->second].year) latest[c] = i;
    }
    for (auto [c, i] : latest) out.error_subset.push_back(i);
    std::sort(out.error_subset.begin(), out.error_subset.end());
  }
  return out;
}

double truncated_normal_draw(double mean, double sd, std::mt19937_64& rng) {
  if (sd == 0.0) return mean;
  if (!(sd > 0.0)) throw ConfigError("predictive SD must be non-negative");
  // mass entirely above the interval: mirror so the tail branch below applies
  if (mean > 1.0) return 1.0 - truncated_normal_draw(1.0 - mean, sd, rng);
  boost::math::normal_distribution<double> normal;
  const double a = -mean / sd;
  const double b = (1.0 - mean) / sd;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double z = 0.0;
  if (a > 0.0) {
    // upper tail: work with survival functions for accuracy
    const double qa = boost::math::cdf(boost::math::complement(normal, a));
    const double qb = boost::math::cdf(boost::math::complement(normal, b));
    const double q = qa - u * (qa - qb);
    z = q > 0.0 ? boost::math::quantile(boost::math::complement(normal, q)) : a;
  } else {
    const double pa = boost::math::cdf(normal, a);
    const double pb = boost::math::cdf(normal, b);
    const double p = pa + u * (pb - pa);
    z = p > 0.0 && p < 1.0 ? boost::math::quantile(normal, p) : (p <= 0.0 ? a : b);
  }
  return std::clamp(mean + sd * z, 0.0, 1.0);
}

Eigen::MatrixXd posterior_predictive(const Eigen::MatrixXd& eta, const Eigen::MatrixXd& sd,
                                     std::uint64_t seed) {
  if (eta.rows() != sd.rows() || eta.cols() != sd.cols()) {
    throw ConfigError("eta and SD draw matrices differ in shape");
  }
  Eigen::MatrixXd out(eta.rows(), eta.cols());
  for (Eigen::Index j = 0; j < eta.cols(); ++j) {
    auto rng = stream(seed, 0x9d, static_cast<std::uint64_t>(j));
    for (Eigen::Index l = 0; l < eta.rows(); ++l) {
      out(l, j) = truncated_normal_draw(eta(l, j), sd(l, j), rng);
    }
  }
  return out;
}

ValidationReport summarize(const Eigen::MatrixXd& predictive, std::span<const double> observed,
                           std::span<const int> eligible) {
  if (static_cast<Eigen::Index>(observed.size()) != predictive.cols()) {
    throw ConfigError("observed values do not match predictive columns");
  }
  ValidationReport r;
  r.num_heldout = static_cast<int>(observed.size());
  r.num_eligible = static_cast<int>(eligible.size());
  if (eligible.empty() || predictive.rows() == 0) return r;
  r.applicable = true;
  int below = 0, included = 0, above = 0;
  std::array<int, 4> pit_below{}, pit_above{};
  std::vector<double> widths, errors, abs_errors;
  std::vector<double> column(predictive.rows());
  for (int j : eligible) {
    if (j < 0 || j >= predictive.cols()) throw ConfigError("eligible index out of range");
    for (Eigen::Index l = 0; l < predictive.rows(); ++l) column[l] = predictive(l, j);
    std::sort(column.begin(), column.end());
    const double y = observed[j];
    const double lo = quantile_sorted(column, 0.025);
    const double hi = quantile_sorted(column, 0.975);
    const double med = quantile_sorted(column, 0.5);
    if (y < lo) {
      ++below;
    } else if (y > hi) {
      ++above;
    } else {
      ++included;
    }
    widths.push_back(hi - lo);
    errors.push_back(med - y);
    abs_errors.push_back(std::abs(med - y));
    for (std::size_t k = 0; k < kPitBelow.size(); ++k) {
      pit_below[k] += y < quantile_sorted(column, kPitBelow[k]);
      pit_above[k] += !(y < quantile_sorted(column, kPitAbove[k]));
    }
  }
  const double n = static_cast<double>(eligible.size());
  r.pct_below = 100.0 * below / n;
  r.pct_included = 100.0 * included / n;
  r.pct_above = 100.0 * above / n;
  r.median_ci_width = quantile(widths, 0.5);
  r.me = quantile(errors, 0.5);
  r.mae = quantile(abs_errors, 0.5);
  for (std::size_t k = 0; k < 4; ++k) {
    r.pit_below[k] = 100.0 * pit_below[k] / n;
    r.pit_above[k] = 100.0 * pit_above[k] / n;
  }
  return r;
}

ValidationReport average_reports(std::span<const ValidationReport> reports) {
  ValidationReport out;
  int m = 0;
  for (const auto& r : reports) {
    out.num_heldout += r.num_heldout;
    out.num_eligible += r.num_eligible;
    if (!r.applicable) continue;
    ++m;
    out.pct_below += r.pct_below;
    out.pct_included += r.pct_included;
    out.pct_above += r.pct_above;
    out.median_ci_width += r.median_ci_width;
    out.me += r.me;
    out.mae += r.mae;
    for (std::size_t k = 0; k < 4; ++k) {
      out.pit_below[k] += r.pit_below[k];
      out.pit_above[k] += r.pit_above[k];
    }
  }
  if (m == 0) {
    out = ValidationReport{};
    for (const auto& r : reports) {
      out.num_heldout += r.num_heldout;
      out.num_eligible += r.num_eligible;
    }
    return out;
  }
  out.applicable = true;
  const double inv = 1.0 / m;
  out.pct_below *= inv;
  out.pct_included *= inv;
  out.pct_above *= inv;
  out.median_ci_width *= inv;
  out.me *= inv;
  out.mae *= inv;
  for (std::size_t k = 0; k < 4; ++k) {
    out.pit_below[k] *= inv;
    out.pit_above[k] *= inv;
  }
  return out;
}

namespace {

std::string cell(const ValidationReport& r, double v) { return r.applicable ? format_double(v) : "NA"; }

}  // namespace

std::string format_table1_csv(std::span<const std::pair<std::string, ValidationReport>> rows) {
  std::ostringstream out;
  out << "model,applicable,n_eligible,pct_below,pct_included,pct_above,ci_width_x100,me_x100,"
         "mae_x100\n";
  for (const auto& [name, r] : rows) {
    out << csv_escape(name) << ',' << (r.applicable ? 1 : 0) << ',' << r.num_eligible << ','
        << cell(r, r.pct_below) << ',' << cell(r, r.pct_included) << ',' << cell(r, r.pct_above)
        << ',' << cell(r, 100.0 * r.median_ci_width) << ',' << cell(r, 100.0 * r.me) << ','
        << cell(r, 100.0 * r.mae) << '\n';
  }
  return out.str();
}

std::string format_table2_csv(std::span<const std::pair<std::string, ValidationReport>> rows) {
  std::ostringstream out;
  out << "model,applicable,below_5,below_10,below_25,below_50,above_50,above_75,above_90,"
         "above_95\n";
  for (const auto& [name, r] : rows) {
    out << csv_escape(name) << ',' << (r.applicable ? 1 : 0);
    for (double v : r.pit_below) out << ',' << cell(r, v);
    for (double v : r.pit_above) out << ',' << cell(r, v);
    out << '\n';
  }
  return out.str();
}

std::string report_to_json(const ValidationReport& r, int indent) {
  nlohmann::json j;
  j["applicable"] = r.applicable;
  j["num_heldout"] = r.num_heldout;
  j["num_eligible"] = r.num_eligible;
  if (r.applicable) {
    j["pct_below"] = r.pct_below;
    j["pct_included"] = r.pct_included;
    j["pct_above"] = r.pct_above;
    j["median_ci_width"] = r.median_ci_width;
    j["me"] = r.me;
    j["mae"] = r.mae;
    j["pit_below"] = {{"q05", r.pit_below[0]}, {"q10", r.pit_below[1]}, {"q25", r.pit_below[2]},
                      {"q50", r.pit_below[3]}};
    j["pit_above"] = {{"q50", r.pit_above[0]}, {"q75", r.pit_above[1]}, {"q90", r.pit_above[2]},
                      {"q95", r.pit_above[3]}};
  }
  return j.dump(indent);
}

void predictive_inputs(const McprModel& model, const Eigen::MatrixXd& draws,
                       std::span<const Observation> obs, Eigen::MatrixXd& eta,
                       Eigen::MatrixXd& sd) {
  const auto& grid = model.config().grid;
  const Eigen::Index L = draws.rows();
  const Eigen::Index n = static_cast<Eigen::Index>(obs.size());
  eta.resize(L, n);
  sd.resize(L, n);
  for (const auto& o : obs) {
    if (o.country < 0 || o.country >= model.hierarchy().num_countries() || !grid.contains(o.year) ||
        o.source < 0 || o.source >= model.num_sources()) {
      throw DataError("held-out observation is outside the fitted model");
    }
  }
  for (Eigen::Index l = 0; l < L; ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    auto traj = propagate(p, model.config().transition, grid, model.knots());
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& o = obs[j];
      eta(l, j) = traj.eta(o.country, grid.index(o.year));
      const double s = p.source_sigma[o.source];
      sd(l, j) = std::sqrt(o.sampling_sd * o.sampling_sd + s * s);
    }
  }
}

ValidationRun run_validation(const McprDataset& data, const McprModelConfig& model_config,
                             const SamplerConfig& sampler, const HoldoutPlan& plan) {
  if (plan.repetitions < 1) throw ConfigError("repetitions must be at least 1");
  ValidationRun run;
  run.plan = plan;
  const int reps = plan.kind == HoldoutKind::random_20pct ? plan.repetitions : 1;
  for (int rep = 0; rep < reps; ++rep) {
    Split s = split(data.observations, plan, rep);
    run.splits.push_back(s);
    std::vector<Observation> train, held;
    for (int i : s.train) train.push_back(data.observations[i]);
    for (int i : s.validation) held.push_back(data.observations[i]);
    std::vector<int> eligible;
    for (int i : s.error_subset) {
      auto it = std::find(s.validation.begin(), s.validation.end(), i);
      eligible.push_back(static_cast<int>(it - s.validation.begin()));
    }
    if (eligible.empty()) {
      ValidationReport r;
      r.num_heldout = static_cast<int>(held.size());
      run.repetitions.push_back(r);
      continue;
    }
    McprModel model(model_config, data.hierarchy, train, data.num_sources());
    SamplerConfig cfg = sampler;
    cfg.seed = derived_seed(plan.seed, 0xf17, static_cast<std::uint64_t>(rep));
    auto fit = nuts_sample(make_target(model), cfg);
    for (int i = 0; i < fit.dimension(); ++i) {
      const double r = split_rhat(fit.parameter(i));
      if (std::isfinite(r)) run.max_rhat = std::max(run.max_rhat, r);
    }
    Eigen::MatrixXd eta, sd;
    predictive_inputs(model, fit.pooled(), held, eta, sd);
    auto pred = posterior_predictive(eta, sd, derived_seed(plan.seed, 0x9e1, rep));
    std::vector<double> observed;
    for (const auto& o : held) observed.push_back(o.value);
    run.repetitions.push_back(summarize(pred, observed, eligible));
  }
  run.combined = average_reports(run.repetitions);
  return run;
}

// ---- synthetic data ----

namespace {

std::string base_name(const std::string& name) { return name.substr(0, name.find('.')); }

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

double log_half_normal(double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, sd);
  double v = 0.0;
  while (v == 0.0) v = std::abs(normal(rng));
  return std::log(v);
}

}  // namespace

Eigen::VectorXd draw_prior(const McprModel& model, std::mt19937_64& rng) {
  const auto& names = model.parameter_names();
  Eigen::VectorXd x(model.dimension());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int i = 0; i < model.dimension(); ++i) {
    const auto b = base_name(names[i]);
    if (b == "logit_rho") {
      double u = 0.0;
      while (u <= 0.0) u = unif(rng);
      x[i] = logit(u);
    } else if (b == "log_tau") {
      x[i] = log_half_normal(2.0, rng);
    } else if (b == "log_source_sigma") {
      x[i] = log_half_normal(0.1, rng);
    } else if (b.rfind("beta_log_sigma", 0) == 0) {
      x[i] = log_half_normal(0.5, rng);
    } else if (b.find("log_sigma") != std::string::npos) {
      x[i] = log_half_normal(1.0, rng);
    } else {
      x[i] = normal(rng);
    }
  }
  return x;
}

Eigen::VectorXd draw_plausible(const McprModel& model, std::mt19937_64& rng) {
  const auto& names = model.parameter_names();
  Eigen::VectorXd x(model.dimension());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int i = 0; i < model.dimension(); ++i) {
    const auto b = base_name(names[i]);
    if (b == "beta_world") {
      x[i] = -0.8;
    } else if (b == "pace_world") {
      x[i] = logit(0.3);
    } else if (b == "asymptote_world") {
      x[i] = 0.2;
    } else if (b == "level_world") {
      x[i] = -1.5;
    } else if (b == "logit_rho") {
      x[i] = logit(0.8);
    } else if (b == "log_tau") {
      x[i] = std::log(0.03);  // unconditional SD 0.05 with rho 0.8
    } else if (b == "log_source_sigma") {
      x[i] = std::log(0.02);
    } else if (b.rfind("beta_log_sigma", 0) == 0 || b.rfind("pace_log_sigma", 0) == 0) {
      x[i] = std::log(0.3);
    } else if (ends_with(b, "log_sigma") || b.find("log_sigma_") != std::string::npos) {
      x[i] = std::log(0.5);
    } else {
      x[i] = normal(rng);
    }
  }
  return x;
}

HierarchyIndex make_skeleton(int regions, int subregions_per_region, int countries) {
  if (regions < 1 || subregions_per_region < 1 || countries < 1) {
    throw ConfigError("skeleton needs at least one region, subregion and country");
  }
  HierarchyIndex h;
  const int S = regions * subregions_per_region;
  for (int c = 0; c < countries; ++c) {
    const int s = c % S;
    const int r = s / subregions_per_region;
    h.add("C" + std::to_string(c + 1), "S" + std::to_string(s + 1), "R" + std::to_string(r + 1));
  }
  h.validate();
  return h;
}

SyntheticDataset generate_synthetic(const HierarchyIndex& skeleton, const SyntheticOptions& opt,
                                    const std::optional<Eigen::VectorXd>& truth) {
  skeleton.validate();
  const auto& sp = opt.sparsity;
  if (sp.min_obs < 1 || sp.max_obs < sp.min_obs) {
    throw ConfigError("sparsity profile needs 1 <= min_obs <= max_obs");
  }
  if (!opt.model.grid.contains(sp.first_year) || !opt.model.grid.contains(sp.last_year) ||
      sp.last_year < sp.first_year) {
    throw ConfigError("sparsity years must lie on the time grid");
  }
  const int span = sp.last_year - sp.first_year + 1;
  if (sp.max_obs > span) {
    throw ConfigError("max_obs exceeds the number of available years");
  }
  const int D = static_cast<int>(kSyntheticSources.size());
  McprModel model(opt.model, skeleton, {}, D);
  auto rng = stream(opt.seed, 0x51d);

  SyntheticDataset out;
  if (truth) {
    if (truth->size() != model.dimension()) throw ConfigError("truth vector has the wrong dimension");
    out.truth = *truth;
  } else {
    out.truth = opt.truth == TruthSource::prior ? draw_prior(model, rng) : draw_plausible(model, rng);
  }
  out.params = model.unpack(out.truth);
  if (opt.zero_noise) out.params.source_sigma.setZero();
  out.trajectory = propagate(out.params, opt.model.transition, opt.model.grid, model.knots());

  out.data.hierarchy = skeleton;
  out.data.sources.assign(kSyntheticSources.begin(), kSyntheticSources.end());
  std::uniform_int_distribution<int> count(sp.min_obs, sp.max_obs);
  std::uniform_int_distribution<int> source(0, D - 1);
  std::uniform_real_distribution<double> sd(opt.sampling_sd_min, opt.sampling_sd_max);
  std::vector<int> years(span);
  for (int c = 0; c < skeleton.num_countries(); ++c) {
    std::iota(years.begin(), years.end(), sp.first_year);
    std::shuffle(years.begin(), years.end(), rng);
    const int k = count(rng);
    std::vector<int> chosen(years.begin(), years.begin() + k);
    std::sort(chosen.begin(), chosen.end());
    for (int year : chosen) {
      Observation o;
      o.country = c;
      o.year = year;
      o.source = source(rng);
      o.sampling_sd = sd(rng);
      const double eta = out.trajectory.eta(c, opt.model.grid.index(year));
      const double sigma = out.params.source_sigma[o.source];
      // zero noise keeps the reported SD so the file can still be fitted
      const double total = opt.zero_noise ? 0.0 : std::sqrt(o.sampling_sd * o.sampling_sd + sigma * sigma);
      o.value = truncated_normal_draw(eta, total, rng);
      out.data.observations.push_back(o);
    }
  }
  return out;
}

std::string format_truth_csv(const McprModel& model, const SyntheticDataset& s) {
  std::ostringstream out;
  out << "country,year,eta,logit_eta,eps,upper_asymptote,level\n";
  const auto& h = model.hierarchy();
  const auto& grid = model.config().grid;
  for (int c = 0; c < h.num_countries(); ++c) {
    for (int t = 0; t < grid.size(); ++t) {
      out << csv_escape(h.countries[c]) << ',' << grid.first_year + t << ','
          << format_double(s.trajectory.eta(c, t)) << ',' << format_double(s.trajectory.logit_eta(c, t))
          << ',' << format_double(s.params.eps(c, t)) << ','
          << format_double(upper_asymptote(s.params.asymptote[c])) << ','
          << format_double(s.params.level[c]) << '\n';
    }
  }
  return out.str();
}

// ---- simulation-based calibration ----

Fitter nuts_fitter(SamplerConfig config) {
  return [config](const McprModel& model, std::uint64_t seed) {
    SamplerConfig cfg = config;
    cfg.seed = seed;
    auto fit = nuts_sample(make_target(model), cfg);
    FitOutcome out;
    out.draws = fit.pooled();
    out.divergences = fit.divergences();
    out.transitions = static_cast<int>(out.draws.rows());
    return out;
  };
}

std::vector<int> sbc_monitored(const McprModel& model) {
  std::vector<int> idx;
  const auto& names = model.parameter_names();
  for (int i = 0; i < model.dimension(); ++i) {
    const auto b = base_name(names[i]);
    if (b == "beta_world" || b == "pace_world" || b == "asymptote_world" || b == "logit_rho" ||
        b == "log_tau" || b == "log_source_sigma") {
      idx.push_back(i);
    }
  }
  return idx;
}

std::pair<double, double> rank_uniformity(std::span<const int> ranks, int max_rank, int bins) {
  if (bins < 2) throw ConfigError("rank uniformity needs at least two bins");
  if (ranks.empty()) throw ConfigError("no ranks to test");
  std::vector<double> counts(bins, 0.0);
  const double values = static_cast<double>(max_rank) + 1.0;
  for (int r : ranks) {
    if (r < 0 || r > max_rank) throw ConfigError("rank outside [0, max_rank]");
    const int b = std::min(bins - 1, static_cast<int>(std::floor(r * bins / values)));
    counts[b] += 1.0;
  }
  const double expected = static_cast<double>(ranks.size()) / bins;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  boost::math::chi_squared_distribution<double> dist(bins - 1);
  return {chi2, boost::math::cdf(boost::math::complement(dist, chi2))};
}

double SbcReport::fraction_passing(double alpha) const {
  if (p_value.empty()) return 0.0;
  int pass = 0;
  for (double p : p_value) pass += p > alpha;
  return static_cast<double>(pass) / static_cast<double>(p_value.size());
}

SbcReport sbc(const SbcConfig& config, const Fitter& fitter) {
  if (config.replicates < 1) throw ConfigError("SBC needs at least one replicate");
  if (config.thin < 1 || config.bins < 2) throw ConfigError("SBC thin >= 1 and bins >= 2 required");
  const int D = static_cast<int>(kSyntheticSources.size());
  McprModel prior_model(config.synthetic.model, config.skeleton, {}, D);
  SbcReport report;
  report.monitored_index = sbc_monitored(prior_model);
  for (int i : report.monitored_index) report.monitored.push_back(prior_model.parameter_names()[i]);
  const int M = static_cast<int>(report.monitored_index.size());
  report.ranks.resize(config.replicates, M);

  for (int rep = 0; rep < config.replicates; ++rep) {
    auto rng = stream(config.seed, 0x5bc, static_cast<std::uint64_t>(rep));
    Eigen::VectorXd truth = config.draw_truth ? config.draw_truth(prior_model, rng)
                                              : draw_prior(prior_model, rng);
    SyntheticOptions opt = config.synthetic;
    opt.seed = derived_seed(config.seed, 0xda7a, rep);
    auto synthetic = generate_synthetic(config.skeleton, opt, truth);
    McprModel model(config.synthetic.model, synthetic.data.hierarchy, synthetic.data.observations, D);
    auto fit = fitter(model, derived_seed(config.seed, 0xf17, rep));
    const Eigen::Index total = fit.draws.rows();
    const double divergence_rate =
        fit.transitions > 0 ? static_cast<double>(fit.divergences) / fit.transitions : 0.0;
    report.flagged.push_back(divergence_rate > config.divergence_limit);

    std::vector<Eigen::Index> kept;
    for (Eigen::Index l = 0; l < total; l += config.thin) kept.push_back(l);
    // (L + 1) must be a multiple of the bin count for uniform bins
    Eigen::Index L = static_cast<Eigen::Index>(kept.size());
    while (L > 0 && (L + 1) % config.bins != 0) --L;
    if (L == 0) throw ConfigError("too few thinned draws for SBC ranks");
    if (rep == 0) report.max_rank = static_cast<int>(L);
    if (report.max_rank != L) throw ConfigError("SBC fits returned different draw counts");
    for (int m = 0; m < M; ++m) {
      const int i = report.monitored_index[m];
      int rank = 0;
      for (Eigen::Index k = 0; k < L; ++k) rank += fit.draws(kept[k], i) < truth[i];
      report.ranks(rep, m) = rank;
    }
  }
  for (int m = 0; m < M; ++m) {
    std::vector<int> col(report.ranks.col(m).data(), report.ranks.col(m).data() + config.replicates);
    auto [chi2, p] = rank_uniformity(col, report.max_rank, config.bins);
    report.chi_squared.push_back(chi2);
    report.p_value.push_back(p);
  }
  return report;
}

}  // namespace btm
