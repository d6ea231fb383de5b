#include "btm/run.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>

#include "btm/data.hpp"
#include "btm/diagnostics.hpp"
#include "btm/errors.hpp"
#include "btm/io.hpp"
#include "btm/math.hpp"

namespace btm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::pair<Command, std::string_view> kCommands[] = {
    {Command::fit, "fit"},           {Command::project, "project"},
    {Command::validate, "validate"}, {Command::simulate, "simulate"},
    {Command::summarize, "summarize"}};

constexpr std::pair<ModelKind, std::string_view> kModels[] = {
    {ModelKind::mcpr_bspline, "mcpr_bspline"},
    {ModelKind::mcpr_approx_logistic, "mcpr_approx_logistic"},
    {ModelKind::tfr_bspline, "tfr_bspline"}};

bool is_tfr(ModelKind m) { return m == ModelKind::tfr_bspline; }

}  // namespace

std::string_view to_string(Command c) {
  for (auto [k, name] : kCommands) {
    if (k == c) return name;
  }
  return "fit";
}

std::string_view to_string(ModelKind m) {
  for (auto [k, name] : kModels) {
    if (k == m) return name;
  }
  return "mcpr_bspline";
}

std::optional<Command> parse_command(std::string_view name) {
  for (auto [k, n] : kCommands) {
    if (n == name) return k;
  }
  return std::nullopt;
}

std::optional<ModelKind> parse_model_kind(std::string_view name) {
  for (auto [k, n] : kModels) {
    if (n == name) return k;
  }
  return std::nullopt;
}

void RunConfig::validate() const {
  if (knots < 3) throw ConfigError("knots must be at least 3");
  if (degree < 1 || degree > kMaxSplineDegree) {
    throw ConfigError("degree must lie in [1, " + std::to_string(kMaxSplineDegree) + "]");
  }
  sampler().validate();
  if (!parse_holdout_kind(holdout)) {
    throw ConfigError("holdout must be 'random' or 'cutoff', got '" + holdout + "'");
  }
  if (repetitions < 1) throw ConfigError("repetitions must be at least 1");
  if (simulate.truth != "plausible" && simulate.truth != "prior") {
    throw ConfigError("simulate.truth must be 'plausible' or 'prior'");
  }
  if (out.empty()) throw ConfigError("an output directory is required");
  // the knot sequence must leave free coefficients for the chosen model
  if (is_tfr(model)) {
    free_coefficients(CoefficientFamily::tfr_constraints, build_knots_tfr(knots, degree));
  } else {
    free_coefficients(CoefficientFamily::mcpr_constraints, build_knots_mcpr(knots, degree));
  }
}

SamplerConfig RunConfig::sampler() const {
  SamplerConfig s;
  s.chains = chains;
  s.warmup = warmup;
  s.samples = samples;
  s.adapt_delta = adapt_delta;
  s.max_treedepth = max_treedepth;
  s.seed = seed;
  return s;
}

McprModelConfig RunConfig::mcpr_model() const {
  McprModelConfig m;
  m.transition = model == ModelKind::mcpr_approx_logistic ? McprTransition::approx_logistic
                                                          : McprTransition::bspline;
  m.num_knots = knots;
  m.degree = degree;
  return m;
}

TfrModelConfig RunConfig::tfr_model() const { return {knots, degree}; }

void apply_preset(RunConfig& cfg, std::string_view preset) {
  if (preset == "validation") {
    cfg.warmup = 250;
    cfg.samples = 500;
    cfg.adapt_delta = 0.999;
    cfg.max_treedepth = 15;
  } else if (preset == "final") {
    cfg.warmup = 500;
    cfg.samples = 750;
    cfg.adapt_delta = 0.999;
    cfg.max_treedepth = 14;
  } else {
    throw ConfigError("unknown sampler preset '" + std::string(preset) + "'");
  }
}

json to_json(const RunConfig& c) {
  json j;
  j["command"] = std::string(to_string(c.command));
  j["model"] = std::string(to_string(c.model));
  j["seed"] = c.seed;
  j["allow_nonconverged"] = c.allow_nonconverged;
  j["spline"] = {{"knots", c.knots}, {"degree", c.degree}};
  j["sampler"] = {{"chains", c.chains},
                  {"warmup", c.warmup},
                  {"samples", c.samples},
                  {"adapt_delta", c.adapt_delta},
                  {"max_treedepth", c.max_treedepth}};
  j["paths"] = {{"data", c.data}, {"hierarchy", c.hierarchy}, {"out", c.out}, {"fit", c.fit_dir}};
  j["holdout"] = {{"kind", c.holdout}, {"cutoff_year", c.cutoff_year}, {"repetitions", c.repetitions}};
  j["projection"] = {{"horizon_year", c.horizon_year}};
  j["simulate"] = {{"regions", c.simulate.regions},
                   {"subregions_per_region", c.simulate.subregions_per_region},
                   {"countries", c.simulate.countries},
                   {"obs_min", c.simulate.obs_min},
                   {"obs_max", c.simulate.obs_max},
                   {"zero_noise", c.simulate.zero_noise},
                   {"truth", c.simulate.truth}};
  return j;
}

namespace {

template <class T>
void read_key(const json& obj, const char* key, T& target, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    target = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + key + "' has the wrong type");
  }
}

void check_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError("unknown config key '" + where + key + "'");
    }
  }
}

}  // namespace

void apply_json(RunConfig& c, const json& j) {
  check_keys(j, {"command", "model", "seed", "allow_nonconverged", "spline", "sampler", "paths",
                 "holdout", "projection", "simulate"},
             "");
  if (j.contains("command")) {
    auto cmd = parse_command(j.at("command").get<std::string>());
    if (!cmd) throw ConfigError("unknown command in config");
    c.command = *cmd;
  }
  if (j.contains("model")) {
    auto name = j.at("model").get<std::string>();
    auto m = parse_model_kind(name);
    if (!m) throw ConfigError("unknown model '" + name + "'");
    c.model = *m;
  }
  read_key(j, "seed", c.seed, "");
  read_key(j, "allow_nonconverged", c.allow_nonconverged, "");
  if (j.contains("spline")) {
    const auto& s = j.at("spline");
    check_keys(s, {"knots", "degree"}, "spline.");
    read_key(s, "knots", c.knots, "spline.");
    read_key(s, "degree", c.degree, "spline.");
  }
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    check_keys(s, {"preset", "chains", "warmup", "samples", "adapt_delta", "max_treedepth"},
               "sampler.");
    if (s.contains("preset")) apply_preset(c, s.at("preset").get<std::string>());
    read_key(s, "chains", c.chains, "sampler.");
    read_key(s, "warmup", c.warmup, "sampler.");
    read_key(s, "samples", c.samples, "sampler.");
    read_key(s, "adapt_delta", c.adapt_delta, "sampler.");
    read_key(s, "max_treedepth", c.max_treedepth, "sampler.");
  }
  if (j.contains("paths")) {
    const auto& s = j.at("paths");
    check_keys(s, {"data", "hierarchy", "out", "fit"}, "paths.");
    read_key(s, "data", c.data, "paths.");
    read_key(s, "hierarchy", c.hierarchy, "paths.");
    read_key(s, "out", c.out, "paths.");
    read_key(s, "fit", c.fit_dir, "paths.");
  }
  if (j.contains("holdout")) {
    const auto& s = j.at("holdout");
    check_keys(s, {"kind", "cutoff_year", "repetitions"}, "holdout.");
    read_key(s, "kind", c.holdout, "holdout.");
    read_key(s, "cutoff_year", c.cutoff_year, "holdout.");
    read_key(s, "repetitions", c.repetitions, "holdout.");
  }
  if (j.contains("projection")) {
    const auto& s = j.at("projection");
    check_keys(s, {"horizon_year"}, "projection.");
    read_key(s, "horizon_year", c.horizon_year, "projection.");
  }
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    check_keys(s, {"regions", "subregions_per_region", "countries", "obs_min", "obs_max",
                   "zero_noise", "truth"},
               "simulate.");
    read_key(s, "regions", c.simulate.regions, "simulate.");
    read_key(s, "subregions_per_region", c.simulate.subregions_per_region, "simulate.");
    read_key(s, "countries", c.simulate.countries, "simulate.");
    read_key(s, "obs_min", c.simulate.obs_min, "simulate.");
    read_key(s, "obs_max", c.simulate.obs_max, "simulate.");
    read_key(s, "zero_noise", c.simulate.zero_noise, "simulate.");
    read_key(s, "truth", c.simulate.truth, "simulate.");
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

// ---- draw tables ----

DrawTable DrawTable::from_result(const SampleResult& result, std::vector<std::string> names) {
  DrawTable t;
  t.names = std::move(names);
  t.values = result.pooled();
  for (std::size_t k = 0; k < result.chains.size(); ++k) {
    for (Eigen::Index i = 0; i < result.chains[k].draws.rows(); ++i) {
      t.chain.push_back(static_cast<int>(k) + 1);
      t.iteration.push_back(static_cast<int>(i) + 1);
    }
  }
  return t;
}

std::string DrawTable::to_csv() const {
  std::string out = "chain,iteration";
  for (const auto& n : names) out += "," + n;
  out += '\n';
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    out += std::to_string(chain[r]) + "," + std::to_string(iteration[r]);
    for (Eigen::Index i = 0; i < values.cols(); ++i) {
      out += ',';
      out += format_double(values(r, i));
    }
    out += '\n';
  }
  return out;
}

DrawTable DrawTable::read(const fs::path& path) {
  auto table = CsvTable::read(path);
  const auto& header = table.header();
  if (header.size() < 3 || header[0] != "chain" || header[1] != "iteration") {
    throw DataError(path.string() + ": expected chain,iteration,<parameters> columns");
  }
  DrawTable t;
  t.names.assign(header.begin() + 2, header.end());
  t.values.resize(static_cast<Eigen::Index>(table.rows().size()),
                  static_cast<Eigen::Index>(t.names.size()));
  Eigen::Index r = 0;
  for (const auto& row : table.rows()) {
    t.chain.push_back(static_cast<int>(parse_int(row, 0, "chain")));
    t.iteration.push_back(static_cast<int>(parse_int(row, 1, "iteration")));
    for (std::size_t i = 0; i < t.names.size(); ++i) {
      t.values(r, static_cast<Eigen::Index>(i)) = parse_double(row, static_cast<int>(i) + 2, t.names[i]);
    }
    ++r;
  }
  return t;
}

int DrawTable::num_chains() const {
  std::vector<int> ids(chain);
  std::sort(ids.begin(), ids.end());
  return static_cast<int>(std::unique(ids.begin(), ids.end()) - ids.begin());
}

namespace {

Eigen::MatrixXd column_by_chain(const DrawTable& t, const Eigen::VectorXd& column) {
  std::map<int, std::vector<double>> by_chain;
  for (Eigen::Index r = 0; r < column.size(); ++r) by_chain[t.chain[r]].push_back(column[r]);
  std::size_t n = by_chain.empty() ? 0 : by_chain.begin()->second.size();
  for (const auto& [k, v] : by_chain) {
    if (v.size() != n) throw DataError("chains in the draw table have different lengths");
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(by_chain.size()));
  Eigen::Index k = 0;
  for (const auto& [id, v] : by_chain) {
    for (std::size_t i = 0; i < n; ++i) out(static_cast<Eigen::Index>(i), k) = v[i];
    ++k;
  }
  return out;
}

}  // namespace

Eigen::MatrixXd DrawTable::parameter(int i) const { return column_by_chain(*this, values.col(i)); }

ConvergenceSummary convergence(const DrawTable& draws) {
  ConvergenceSummary s;
  s.min_ess = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(draws.names.size()); ++i) {
    auto m = draws.parameter(i);
    if (is_constant(m)) {
      ++s.constant_parameters;
      continue;
    }
    const double r = split_rhat(m);
    const double e = bulk_ess(m);
    if (std::isfinite(r)) {
      s.max_rhat = std::max(s.max_rhat, r);
      if (r > kRhatThreshold) s.above_threshold.push_back(draws.names[i]);
    } else {
      s.above_threshold.push_back(draws.names[i]);
      s.max_rhat = std::numeric_limits<double>::infinity();
    }
    if (std::isfinite(e)) s.min_ess = std::min(s.min_ess, e);
  }
  if (!std::isfinite(s.min_ess)) s.min_ess = 0.0;
  return s;
}

// ---- output helpers ----

namespace {

std::string quantile_header() { return "q2.5,q10,q25,q50,q75,q90,q97.5"; }

void append_quantiles(std::string& out, std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  for (double q : kOutputQuantiles) {
    out += ',';
    out += format_double(quantile_sorted(values, q));
  }
  out += '\n';
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create output directory " + dir.string());
  }
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("a ") + what + " path is required");
  if (!fs::is_regular_file(path)) {
    throw ConfigError(std::string(what) + " file not found: " + path);
  }
}

std::string summary_csv(const std::vector<ParameterSummary>& rows) {
  std::string out = "name,mean,sd,q5,q50,q95,rhat,ess_bulk\n";
  for (const auto& s : rows) {
    out += csv_escape(s.name);
    for (double v : {s.mean, s.sd, s.q05, s.q50, s.q95, s.rhat, s.ess_bulk}) {
      out += ',';
      out += std::isfinite(v) ? format_double(v) : "NA";
    }
    out += '\n';
  }
  return out;
}

json convergence_json(const ConvergenceSummary& c) {
  json j;
  j["max_rhat"] = std::isfinite(c.max_rhat) ? json(c.max_rhat) : json("inf");
  j["min_bulk_ess"] = c.min_ess;
  j["rhat_threshold"] = kRhatThreshold;
  j["converged"] = c.above_threshold.empty();
  j["constant_parameters"] = c.constant_parameters;
  std::vector<std::string> names(c.above_threshold.begin(),
                                 c.above_threshold.begin() +
                                     std::min<std::size_t>(c.above_threshold.size(), 100));
  j["num_above_threshold"] = c.above_threshold.size();
  j["above_threshold"] = names;
  return j;
}

json sampler_json(const SampleResult& r) {
  json chains = json::array();
  for (std::size_t k = 0; k < r.chains.size(); ++k) {
    const auto& c = r.chains[k];
    chains.push_back({{"chain", k + 1},
                      {"step_size", c.step_size},
                      {"divergences", c.divergences()},
                      {"warmup_divergences", c.warmup_divergences},
                      {"treedepth_hits", c.treedepth_hits(r.max_treedepth)},
                      {"mean_accept_stat", c.mean_accept_stat()}});
  }
  return {{"divergences", r.divergences()}, {"treedepth_hits", r.treedepth_hits()}, {"chains", chains}};
}

class ProgressReporter {
 public:
  ProgressReporter(std::ostream& log, int total) : log_(log), total_(total) {}
  void operator()(int chain, int iteration) {
    const int step = std::max(1, total_ / 10);
    if ((iteration + 1) % step != 0 && iteration + 1 != total_) return;
    std::lock_guard<std::mutex> lock(mutex_);
    log_ << "chain " << chain + 1 << ": iteration " << iteration + 1 << " / " << total_ << '\n';
    log_.flush();
  }

 private:
  std::ostream& log_;
  int total_;
  std::mutex mutex_;
};

SampleResult sample_with_progress(const Target& target, SamplerConfig cfg, std::ostream& log) {
  auto reporter = std::make_shared<ProgressReporter>(log, cfg.warmup + cfg.samples);
  cfg.progress = [reporter](int chain, int it) { (*reporter)(chain, it); };
  return nuts_sample(target, cfg);
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

// ---- mCPR outputs ----

McprDataset load_mcpr(const RunConfig& cfg) {
  require_file(cfg.data, "data");
  std::optional<fs::path> hierarchy;
  if (!cfg.hierarchy.empty()) {
    require_file(cfg.hierarchy, "hierarchy");
    hierarchy = cfg.hierarchy;
  }
  return load_mcpr_csv(cfg.data, hierarchy);
}

std::vector<double> unit_coefficients(const McprModel& model, std::span<const double> raw,
                                      double upper) {
  const auto& ks = model.knots();
  std::vector<double> coefs(ks.num_basis(), 0.0);
  if (model.config().transition == McprTransition::bspline) {
    auto range = free_coefficients(CoefficientFamily::mcpr_constraints, ks);
    for (int j = range.begin; j < range.end; ++j) coefs[j] = mcpr_coefficient(raw[j - range.begin]);
  } else {
    auto range = free_coefficients(CoefficientFamily::approx_logistic, ks);
    const double pace = logistic_pace(raw[0]);
    for (int j = range.begin; j < range.end; ++j) {
      const double a = model.logistic_anchors()[j - range.begin];
      coefs[j] = logistic_rate(a * upper, upper, pace);
    }
  }
  return coefs;
}

std::string mcpr_eta_quantiles(const McprModel& model, const Eigen::MatrixXd& draws) {
  const auto& h = model.hierarchy();
  const auto& grid = model.config().grid;
  const int C = h.num_countries();
  const int T = grid.size();
  const Eigen::Index L = draws.rows();
  std::vector<Eigen::MatrixXd> eta(C, Eigen::MatrixXd(L, T));
  for (Eigen::Index l = 0; l < L; ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    auto traj = propagate(p, model.config().transition, grid, model.knots());
    for (int c = 0; c < C; ++c) eta[c].row(l) = traj.eta.row(c);
  }
  std::string out = "country,year," + quantile_header() + "\n";
  std::vector<double> v(L);
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < T; ++t) {
      for (Eigen::Index l = 0; l < L; ++l) v[l] = eta[c](l, t);
      out += csv_escape(h.countries[c]) + "," + std::to_string(grid.first_year + t);
      append_quantiles(out, v);
    }
  }
  return out;
}

std::string mcpr_transition_quantiles(const McprModel& model, const Eigen::MatrixXd& draws) {
  const auto& h = model.hierarchy();
  const bool bspline = model.config().transition == McprTransition::bspline;
  constexpr int kGrid = 200;
  struct Unit {
    std::string level, name;
    int index;
  };
  std::vector<Unit> units;
  for (int c = 0; c < h.num_countries(); ++c) units.push_back({"country", h.countries[c], c});
  for (int s = 0; s < h.num_subregions(); ++s) units.push_back({"subregion", h.subregions[s], s});
  for (int r = 0; r < h.num_regions(); ++r) units.push_back({"region", h.regions[r], r});
  const Eigen::Index L = draws.rows();
  // values[unit] is L x kGrid
  std::vector<Eigen::MatrixXd> values(units.size(), Eigen::MatrixXd(L, kGrid));
  for (Eigen::Index l = 0; l < L; ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    const double world_upper = upper_asymptote(p.asymptote_world);
    for (std::size_t u = 0; u < units.size(); ++u) {
      const auto& unit = units[u];
      std::vector<double> raw;
      double upper = world_upper;
      if (bspline) {
        const Eigen::MatrixXd& m = unit.level == "country"     ? p.beta
                                   : unit.level == "subregion" ? p.beta_subregion
                                                               : p.beta_region;
        for (Eigen::Index j = 0; j < m.cols(); ++j) raw.push_back(m(unit.index, j));
      } else {
        const Eigen::VectorXd& v = unit.level == "country"     ? p.pace
                                   : unit.level == "subregion" ? p.pace_subregion
                                                               : p.pace_region;
        raw.push_back(v[unit.index]);
      }
      if (unit.level == "country") upper = upper_asymptote(p.asymptote[unit.index]);
      auto coefs = unit_coefficients(model, raw, upper);
      const AsymptotePair asym{0.0, upper};
      for (int k = 0; k < kGrid; ++k) {
        const double e = static_cast<double>(k) / (kGrid - 1);
        values[u](l, k) = f_bspline(e, asym, coefs, model.knots());
      }
    }
  }
  std::string out = "level,name,eta," + quantile_header() + "\n";
  std::vector<double> v(L);
  for (std::size_t u = 0; u < units.size(); ++u) {
    for (int k = 0; k < kGrid; ++k) {
      for (Eigen::Index l = 0; l < L; ++l) v[l] = values[u](l, k);
      out += units[u].level + "," + csv_escape(units[u].name) + "," +
             format_double(static_cast<double>(k) / (kGrid - 1));
      append_quantiles(out, v);
    }
  }
  return out;
}

// Hyperparameters on their natural scale, one column per name.
std::pair<std::vector<std::string>, Eigen::MatrixXd> mcpr_hyperparameters(
    const McprModel& model, const McprDataset& data, const Eigen::MatrixXd& draws) {
  std::vector<std::string> names;
  const bool bspline = model.config().transition == McprTransition::bspline;
  const int P = model.num_free_coefficients();
  auto index_name = [](const char* base, int j) { return std::string(base) + "." + std::to_string(j + 1); };
  if (bspline) {
    for (int j = 0; j < P; ++j) names.push_back(index_name("beta_world", j));
    for (int j = 0; j < P; ++j) names.push_back(index_name("coefficient_world", j));
    for (int j = 0; j < P; ++j) names.push_back(index_name("beta_sigma_region", j));
    for (int j = 0; j < P; ++j) names.push_back(index_name("beta_sigma_subregion", j));
    for (int j = 0; j < P; ++j) names.push_back(index_name("beta_sigma_country", j));
  } else {
    for (const char* n : {"pace_world_raw", "pace_world", "pace_sigma_region",
                          "pace_sigma_subregion", "pace_sigma_country"}) {
      names.push_back(n);
    }
  }
  for (const char* n : {"asymptote_world_raw", "upper_asymptote_world", "asymptote_sigma",
                        "level_world", "level_sigma_country", "level_sigma_region", "rho", "tau",
                        "unconditional_sd"}) {
    names.push_back(n);
  }
  for (int d = 0; d < model.num_sources(); ++d) {
    names.push_back("source_sigma." + std::string(to_string(data.sources[d])));
  }
  Eigen::MatrixXd out(draws.rows(), static_cast<Eigen::Index>(names.size()));
  for (Eigen::Index l = 0; l < draws.rows(); ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    Eigen::Index k = 0;
    if (bspline) {
      for (int j = 0; j < P; ++j) out(l, k++) = p.beta_world[j];
      for (int j = 0; j < P; ++j) out(l, k++) = mcpr_coefficient(p.beta_world[j]);
      for (int j = 0; j < P; ++j) out(l, k++) = p.beta_sigma_region[j];
      for (int j = 0; j < P; ++j) out(l, k++) = p.beta_sigma_subregion[j];
      for (int j = 0; j < P; ++j) out(l, k++) = p.beta_sigma_country[j];
    } else {
      out(l, k++) = p.pace_world;
      out(l, k++) = logistic_pace(p.pace_world);
      out(l, k++) = p.pace_sigma_region;
      out(l, k++) = p.pace_sigma_subregion;
      out(l, k++) = p.pace_sigma_country;
    }
    out(l, k++) = p.asymptote_world;
    out(l, k++) = upper_asymptote(p.asymptote_world);
    out(l, k++) = p.asymptote_sigma;
    out(l, k++) = p.level_world;
    out(l, k++) = p.level_sigma_country;
    out(l, k++) = p.level_sigma_region;
    out(l, k++) = p.rho;
    out(l, k++) = p.tau;
    out(l, k++) = p.tau / std::sqrt(1.0 - p.rho * p.rho);
    for (int d = 0; d < model.num_sources(); ++d) out(l, k++) = p.source_sigma[d];
  }
  return {names, out};
}

std::string summarize_columns(const DrawTable& layout, const std::vector<std::string>& names,
                              const Eigen::MatrixXd& values) {
  std::vector<ParameterSummary> rows;
  for (std::size_t i = 0; i < names.size(); ++i) {
    rows.push_back(summarize_parameter(names[i], column_by_chain(layout, values.col(i))));
  }
  return summary_csv(rows);
}

McprModel build_mcpr_model(const RunConfig& cfg, const McprDataset& data) {
  return McprModel(cfg.mcpr_model(), data.hierarchy, data.observations, data.num_sources());
}

int finish_fit(const RunConfig& cfg, const ConvergenceSummary& conv, std::ostream& log) {
  log << "max split R-hat " << conv.max_rhat << ", min bulk ESS " << conv.min_ess << '\n';
  if (!conv.above_threshold.empty()) {
    log << conv.above_threshold.size() << " parameter(s) with R-hat above " << kRhatThreshold
        << '\n';
    if (!cfg.allow_nonconverged) return kExitNotConverged;
  }
  return kExitOk;
}

int fit_mcpr(const RunConfig& cfg, std::ostream& log) {
  auto data = load_mcpr(cfg);
  auto model = build_mcpr_model(cfg, data);
  log << "fitting " << to_string(cfg.model) << ": " << data.observations.size()
      << " observations, " << data.hierarchy.num_countries() << " countries, "
      << model.dimension() << " parameters\n";
  auto result = sample_with_progress(make_target(model), cfg.sampler(), log);
  auto draws = DrawTable::from_result(result, model.parameter_names());
  auto conv = convergence(draws);

  const fs::path out(cfg.out);
  ensure_directory(out);
  write_file_atomic(out / "draws.csv", draws.to_csv());
  write_file_atomic(out / "eta_quantiles.csv", mcpr_eta_quantiles(model, draws.values));
  write_file_atomic(out / "transition_quantiles.csv", mcpr_transition_quantiles(model, draws.values));
  auto [names, hyper] = mcpr_hyperparameters(model, data, draws.values);
  write_file_atomic(out / "hyperparameters.csv", summarize_columns(draws, names, hyper));
  json diag;
  diag["model"] = std::string(to_string(cfg.model));
  diag["num_parameters"] = model.dimension();
  diag["sampler"] = sampler_json(result);
  diag["convergence"] = convergence_json(conv);
  diag["clamp_events"] = model.clamp_events();
  diag["data"] = {{"observations", data.observations.size()},
                  {"countries", data.hierarchy.num_countries()},
                  {"excluded_rows", data.num_excluded},
                  {"imputed_sampling_sd", data.num_imputed}};
  write_json(out / "diagnostics.json", diag);
  write_json(out / "config.json", to_json(cfg));
  return finish_fit(cfg, conv, log);
}

// ---- TFR outputs ----

std::vector<TfrSeries> load_tfr(const RunConfig& cfg) {
  require_file(cfg.data, "data");
  return load_tfr_csv(cfg.data);
}

std::string tfr_projection_quantiles(const TfrModel& model, const Eigen::MatrixXd& draws,
                                     int horizon, std::uint64_t seed) {
  auto proj = tfr_project(model, draws, horizon, seed);
  std::string out = "country,period_start_year," + quantile_header() + "\n";
  std::vector<double> v(draws.rows());
  for (int c = 0; c < model.num_countries(); ++c) {
    const auto& pc = proj[c];
    for (std::size_t k = 0; k < pc.period_start.size(); ++k) {
      for (Eigen::Index l = 0; l < draws.rows(); ++l) v[l] = pc.paths(l, static_cast<Eigen::Index>(k));
      out += csv_escape(model.series()[c].country) + "," + std::to_string(pc.period_start[k]);
      append_quantiles(out, v);
    }
  }
  return out;
}

std::string tfr_transition_quantiles(const TfrModel& model, const Eigen::MatrixXd& draws) {
  constexpr int kGrid = 200;
  const int C = model.num_countries();
  const Eigen::Index L = draws.rows();
  std::vector<Eigen::MatrixXd> values(C, Eigen::MatrixXd(L, kGrid));
  for (Eigen::Index l = 0; l < L; ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    for (int c = 0; c < C; ++c) {
      auto coefs = model.coefficients(p, c);
      const double ref = model.series()[c].reference_level();
      for (int k = 0; k < kGrid; ++k) {
        const double e = kTfrFloor + (ref - kTfrFloor) * k / (kGrid - 1);
        values[c](l, k) = tfr_decrement(e, ref, coefs, model.knots());
      }
    }
  }
  std::string out = "level,name,tfr," + quantile_header() + "\n";
  std::vector<double> v(L);
  for (int c = 0; c < C; ++c) {
    const double ref = model.series()[c].reference_level();
    for (int k = 0; k < kGrid; ++k) {
      for (Eigen::Index l = 0; l < L; ++l) v[l] = values[c](l, k);
      out += "country," + csv_escape(model.series()[c].country) + "," +
             format_double(kTfrFloor + (ref - kTfrFloor) * k / (kGrid - 1));
      append_quantiles(out, v);
    }
  }
  return out;
}

std::pair<std::vector<std::string>, Eigen::MatrixXd> tfr_hyperparameters(
    const TfrModel& model, const Eigen::MatrixXd& draws) {
  const int P = model.num_free_coefficients();
  std::vector<std::string> names;
  for (int j = 0; j < P; ++j) names.push_back("beta_world." + std::to_string(j + 1));
  for (int j = 0; j < P; ++j) names.push_back("coefficient_world." + std::to_string(j + 1));
  for (int j = 0; j < P; ++j) names.push_back("beta_sigma." + std::to_string(j + 1));
  names.push_back("tau");
  Eigen::MatrixXd out(draws.rows(), static_cast<Eigen::Index>(names.size()));
  for (Eigen::Index l = 0; l < draws.rows(); ++l) {
    auto p = model.unpack(draws.row(l).transpose());
    Eigen::Index k = 0;
    for (int j = 0; j < P; ++j) out(l, k++) = p.beta_world[j];
    for (int j = 0; j < P; ++j) out(l, k++) = tfr_coefficient(p.beta_world[j]);
    for (int j = 0; j < P; ++j) out(l, k++) = p.beta_sigma[j];
    out(l, k++) = p.tau;
  }
  return {names, out};
}

std::uint64_t projection_seed(const RunConfig& cfg) { return cfg.seed ^ 0x9e3779b97f4a7c15ULL; }

int fit_tfr(const RunConfig& cfg, std::ostream& log) {
  auto series = load_tfr(cfg);
  TfrModel model(cfg.tfr_model(), series);
  log << "fitting tfr_bspline: " << model.num_countries() << " countries, " << model.dimension()
      << " parameters\n";
  auto result = sample_with_progress(make_target(model), cfg.sampler(), log);
  auto draws = DrawTable::from_result(result, model.parameter_names());
  auto conv = convergence(draws);
  const fs::path out(cfg.out);
  ensure_directory(out);
  write_file_atomic(out / "draws.csv", draws.to_csv());
  write_file_atomic(out / "projection_quantiles.csv",
                    tfr_projection_quantiles(model, draws.values, cfg.horizon_year, projection_seed(cfg)));
  write_file_atomic(out / "transition_quantiles.csv", tfr_transition_quantiles(model, draws.values));
  auto [names, hyper] = tfr_hyperparameters(model, draws.values);
  write_file_atomic(out / "hyperparameters.csv", summarize_columns(draws, names, hyper));
  json diag;
  diag["model"] = "tfr_bspline";
  diag["num_parameters"] = model.dimension();
  diag["sampler"] = sampler_json(result);
  diag["convergence"] = convergence_json(conv);
  diag["data"] = {{"countries", model.num_countries()}};
  write_json(out / "diagnostics.json", diag);
  write_json(out / "config.json", to_json(cfg));
  return finish_fit(cfg, conv, log);
}

// ---- project / summarize ----

struct FitDirectory {
  RunConfig config;
  DrawTable draws;
};

FitDirectory read_fit_directory(const RunConfig& cfg) {
  const fs::path dir(cfg.fit_dir.empty() ? cfg.out : cfg.fit_dir);
  const auto config_path = dir / "config.json";
  const auto draws_path = dir / "draws.csv";
  if (!fs::is_regular_file(config_path) || !fs::is_regular_file(draws_path)) {
    throw ConfigError("fit directory " + dir.string() + " lacks config.json or draws.csv");
  }
  FitDirectory f{load_run_config(config_path), DrawTable::read(draws_path)};
  return f;
}

void check_names(const std::vector<std::string>& expected, const DrawTable& draws) {
  if (expected != draws.names) {
    throw DataError("draws.csv columns do not match the model rebuilt from config.json");
  }
}

int project(const RunConfig& cfg, std::ostream& log) {
  auto fit = read_fit_directory(cfg);
  const fs::path out(cfg.out);
  ensure_directory(out);
  if (is_tfr(fit.config.model)) {
    TfrModel model(fit.config.tfr_model(), load_tfr(fit.config));
    check_names(model.parameter_names(), fit.draws);
    write_file_atomic(out / "projection_quantiles.csv",
                      tfr_projection_quantiles(model, fit.draws.values, cfg.horizon_year,
                                               projection_seed(fit.config)));
  } else {
    auto data = load_mcpr(fit.config);
    auto model = build_mcpr_model(fit.config, data);
    check_names(model.parameter_names(), fit.draws);
    write_file_atomic(out / "eta_quantiles.csv", mcpr_eta_quantiles(model, fit.draws.values));
  }
  log << "projections written to " << out.string() << '\n';
  return kExitOk;
}

int summarize_fit(const RunConfig& cfg, std::ostream& log) {
  auto fit = read_fit_directory(cfg);
  const fs::path out(cfg.out);
  ensure_directory(out);
  std::vector<ParameterSummary> rows;
  for (int i = 0; i < static_cast<int>(fit.draws.names.size()); ++i) {
    rows.push_back(summarize_parameter(fit.draws.names[i], fit.draws.parameter(i)));
  }
  write_file_atomic(out / "summary.csv", summary_csv(rows));
  auto conv = convergence(fit.draws);
  json j;
  j["model"] = std::string(to_string(fit.config.model));
  j["num_parameters"] = fit.draws.names.size();
  j["num_chains"] = fit.draws.num_chains();
  j["num_draws"] = fit.draws.values.rows();
  j["convergence"] = convergence_json(conv);
  write_json(out / "summary.json", j);
  log << fit.draws.names.size() << " parameters, " << fit.draws.values.rows() << " draws, max R-hat "
      << conv.max_rhat << ", min bulk ESS " << conv.min_ess << '\n';
  return kExitOk;
}

// ---- validate / simulate ----

int validate_run(const RunConfig& cfg, std::ostream& log) {
  if (is_tfr(cfg.model)) throw ConfigError("validate supports the mCPR models only");
  auto data = load_mcpr(cfg);
  HoldoutPlan plan;
  plan.kind = *parse_holdout_kind(cfg.holdout);
  plan.cutoff_year = cfg.cutoff_year;
  plan.repetitions = cfg.repetitions;
  plan.seed = cfg.seed;
  log << "validating " << to_string(cfg.model) << " with " << to_string(plan.kind) << " hold-out\n";
  auto run = run_validation(data, cfg.mcpr_model(), cfg.sampler(), plan);
  const fs::path out(cfg.out);
  ensure_directory(out);
  const std::string label = std::string(to_string(cfg.model)) + " (d=" + std::to_string(cfg.degree) +
                            ", K=" + std::to_string(cfg.knots) + ")";
  std::vector<std::pair<std::string, ValidationReport>> rows{{label, run.combined}};
  write_file_atomic(out / "validation_table1.csv", format_table1_csv(rows));
  write_file_atomic(out / "validation_table2.csv", format_table2_csv(rows));
  json j;
  j["model"] = label;
  j["holdout"] = std::string(to_string(plan.kind));
  if (plan.kind == HoldoutKind::after_cutoff) j["cutoff_year"] = plan.cutoff_year;
  j["combined"] = json::parse(report_to_json(run.combined));
  json reps = json::array();
  for (std::size_t r = 0; r < run.repetitions.size(); ++r) {
    auto rep = json::parse(report_to_json(run.repetitions[r]));
    rep["training"] = run.splits[r].train.size();
    rep["heldout"] = run.splits[r].validation.size();
    reps.push_back(rep);
  }
  j["repetitions"] = reps;
  j["max_rhat"] = run.max_rhat;
  write_json(out / "validation.json", j);
  write_json(out / "config.json", to_json(cfg));
  if (!run.combined.applicable) log << "no eligible held-out observations; report not applicable\n";
  if (run.max_rhat > kRhatThreshold) {
    log << "max split R-hat " << run.max_rhat << " exceeds " << kRhatThreshold << '\n';
    if (!cfg.allow_nonconverged) return kExitNotConverged;
  }
  return kExitOk;
}

std::string format_hierarchy_csv(const HierarchyIndex& h) {
  std::string out = "country,subregion,region\n";
  for (int c = 0; c < h.num_countries(); ++c) {
    const int s = h.subregion_of[c];
    out += csv_escape(h.countries[c]) + "," + csv_escape(h.subregions[s]) + "," +
           csv_escape(h.regions[h.region_of[s]]) + "\n";
  }
  return out;
}

int simulate(const RunConfig& cfg, std::ostream& log) {
  const fs::path out(cfg.out);
  const auto& s = cfg.simulate;
  if (is_tfr(cfg.model)) {
    TfrSyntheticOptions opt;
    opt.model = cfg.tfr_model();
    opt.countries = s.countries;
    opt.seed = cfg.seed;
    if (s.zero_noise) opt.tau = 0.0;
    auto series = generate_tfr_synthetic(opt);
    ensure_directory(out);
    write_file_atomic(out / "data.csv", format_tfr_csv(series));
    write_json(out / "config.json", to_json(cfg));
    log << "simulated " << series.size() << " TFR series\n";
    return kExitOk;
  }
  SyntheticOptions opt;
  opt.model = cfg.mcpr_model();
  opt.sparsity.min_obs = s.obs_min;
  opt.sparsity.max_obs = s.obs_max;
  opt.zero_noise = s.zero_noise;
  opt.truth = s.truth == "prior" ? TruthSource::prior : TruthSource::plausible;
  opt.seed = cfg.seed;
  auto skeleton = make_skeleton(s.regions, s.subregions_per_region, s.countries);
  auto synthetic = generate_synthetic(skeleton, opt);
  McprModel model(opt.model, skeleton, {}, static_cast<int>(kSyntheticSources.size()));
  ensure_directory(out);
  write_file_atomic(out / "data.csv", format_mcpr_csv(synthetic.data));
  write_file_atomic(out / "hierarchy.csv", format_hierarchy_csv(skeleton));
  write_file_atomic(out / "truth.csv", format_truth_csv(model, synthetic));
  std::string params = "name,value\n";
  for (int i = 0; i < model.dimension(); ++i) {
    params += model.parameter_names()[i] + "," + format_double(synthetic.truth[i]) + "\n";
  }
  write_file_atomic(out / "truth_params.csv", params);
  write_json(out / "config.json", to_json(cfg));
  log << "simulated " << synthetic.data.observations.size() << " observations for "
      << skeleton.num_countries() << " countries\n";
  return kExitOk;
}

}  // namespace

int run_command(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  switch (cfg.command) {
    case Command::fit:
      return is_tfr(cfg.model) ? fit_tfr(cfg, log) : fit_mcpr(cfg, log);
    case Command::project:
      return project(cfg, log);
    case Command::validate:
      return validate_run(cfg, log);
    case Command::simulate:
      return simulate(cfg, log);
    case Command::summarize:
      return summarize_fit(cfg, log);
  }
  return kExitFailure;
}

// ---- command line ----

namespace {

struct Flags {
  std::optional<std::string> config, data, hierarchy, out, fit, model, holdout, preset, truth;
  std::optional<int> knots, degree, chains, warmup, samples, max_treedepth, cutoff_year,
      repetitions, horizon, countries, regions, subregions, obs_min, obs_max;
  std::optional<double> adapt_delta;
  std::optional<std::uint64_t> seed;
  bool allow_nonconverged = false;
  bool zero_noise = false;
};

void add_flags(CLI::App& app, Flags& f) {
  app.add_option("--config", f.config, "JSON run configuration");
  app.add_option("--data", f.data, "Input data CSV");
  app.add_option("--hierarchy", f.hierarchy, "Country/subregion/region CSV");
  app.add_option("--out", f.out, "Output directory");
  app.add_option("--fit", f.fit, "Fit directory read by project and summarize");
  app.add_option("--model", f.model, "mcpr_bspline | mcpr_approx_logistic | tfr_bspline");
  app.add_option("--knots", f.knots, "Number of knots K");
  app.add_option("--degree", f.degree, "Spline degree d");
  app.add_option("--chains", f.chains, "Number of chains");
  app.add_option("--warmup", f.warmup, "Warmup iterations per chain");
  app.add_option("--samples", f.samples, "Sampling iterations per chain");
  app.add_option("--adapt-delta", f.adapt_delta, "Target acceptance statistic");
  app.add_option("--max-treedepth", f.max_treedepth, "Maximum tree depth");
  app.add_option("--preset", f.preset, "Sampler budget preset: validation | final");
  app.add_option("--seed", f.seed, "Top-level random seed");
  app.add_option("--holdout", f.holdout, "random | cutoff");
  app.add_option("--cutoff-year", f.cutoff_year, "Cutoff year for the cutoff hold-out");
  app.add_option("--repetitions", f.repetitions, "Repetitions of the random hold-out");
  app.add_option("--horizon", f.horizon, "Last projected period start year (TFR)");
  app.add_option("--countries", f.countries, "Simulated countries");
  app.add_option("--regions", f.regions, "Simulated regions");
  app.add_option("--subregions", f.subregions, "Simulated subregions per region");
  app.add_option("--obs-min", f.obs_min, "Minimum simulated observations per country");
  app.add_option("--obs-max", f.obs_max, "Maximum simulated observations per country");
  app.add_option("--truth", f.truth, "Simulation truth: plausible | prior");
  app.add_flag("--zero-noise", f.zero_noise, "Simulate without observation noise");
  app.add_flag("--allow-nonconverged", f.allow_nonconverged,
               "Exit 0 even when some R-hat exceeds 1.05");
}

bool explicit_knots(const Flags& f, const std::optional<json>& file) {
  if (f.knots) return true;
  return file && file->contains("spline") && file->at("spline").contains("knots");
}

RunConfig resolve(Command command, const Flags& f) {
  RunConfig cfg;
  std::optional<json> file;
  if (f.config) {
    std::ifstream in(*f.config);
    if (!in) throw ConfigError("cannot open config file " + *f.config);
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(*f.config + ": " + e.what());
    }
    apply_json(cfg, *file);
  }
  cfg.command = command;
  if (f.model) {
    auto m = parse_model_kind(*f.model);
    if (!m) throw ConfigError("unknown model '" + *f.model + "'");
    cfg.model = *m;
  }
  if (!explicit_knots(f, file) && cfg.model != ModelKind::mcpr_bspline) cfg.knots = 7;
  if (f.preset) apply_preset(cfg, *f.preset);
  auto set = [](auto& target, const auto& source) {
    if (source) target = *source;
  };
  set(cfg.data, f.data);
  set(cfg.hierarchy, f.hierarchy);
  set(cfg.out, f.out);
  set(cfg.fit_dir, f.fit);
  set(cfg.knots, f.knots);
  set(cfg.degree, f.degree);
  set(cfg.chains, f.chains);
  set(cfg.warmup, f.warmup);
  set(cfg.samples, f.samples);
  set(cfg.adapt_delta, f.adapt_delta);
  set(cfg.max_treedepth, f.max_treedepth);
  set(cfg.seed, f.seed);
  set(cfg.holdout, f.holdout);
  set(cfg.cutoff_year, f.cutoff_year);
  set(cfg.repetitions, f.repetitions);
  set(cfg.horizon_year, f.horizon);
  set(cfg.simulate.countries, f.countries);
  set(cfg.simulate.regions, f.regions);
  set(cfg.simulate.subregions_per_region, f.subregions);
  set(cfg.simulate.obs_min, f.obs_min);
  set(cfg.simulate.obs_max, f.obs_max);
  set(cfg.simulate.truth, f.truth);
  if (f.zero_noise) cfg.simulate.zero_noise = true;
  if (f.allow_nonconverged) cfg.allow_nonconverged = true;
  return cfg;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"B-spline transition models for demographic indicators", "btm"};
  app.require_subcommand(1);
  Flags flags;
  std::map<CLI::App*, Command> commands;
  for (auto [cmd, name] : kCommands) {
    const char* help = cmd == Command::fit         ? "Fit a model and write posterior summaries"
                       : cmd == Command::project   ? "Project from an existing fit"
                       : cmd == Command::validate  ? "Run an out-of-sample validation"
                       : cmd == Command::simulate  ? "Write a synthetic dataset"
                                                   : "Summarize the draws of an existing fit";
    auto* sub = app.add_subcommand(std::string(name), help);
    add_flags(*sub, flags);
    commands[sub] = cmd;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    Command command = Command::fit;
    for (auto& [sub, cmd] : commands) {
      if (sub->parsed()) command = cmd;
    }
    auto cfg = resolve(command, flags);
    return run_command(cfg, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace btm
