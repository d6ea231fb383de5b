#include "btm/model_mcpr.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "btm/errors.hpp"
#include "btm/math.hpp"

namespace btm {

void TimeGrid::validate() const {
  if (last_year < first_year) {
    throw ConfigError("time grid ends before it starts");
  }
  if (!contains(reference_year)) {
    throw ConfigError("reference year " + std::to_string(reference_year) +
                      " is not on the time grid");
  }
}

double upper_asymptote(double raw) { return 0.5 + 0.45 * inv_logit(raw); }

double logistic_pace(double raw) { return 0.5 * inv_logit(raw); }

namespace {

double clamp_logit(double v, bool& hit) {
  if (v > kLogitClamp) {
    hit = true;
    return kLogitClamp;
  }
  if (v < -kLogitClamp) {
    hit = true;
    return -kLogitClamp;
  }
  if (std::isnan(v)) {
    hit = true;
    return 0.0;
  }
  hit = false;
  return v;
}

struct CountryPath {
  std::vector<double> logit_eta;
  std::vector<double> eta;
  std::vector<char> clamped;
  std::vector<BsplinePartials> partial;  // f partials evaluated at eta[t]
  int clamps = 0;

  explicit CountryPath(int T) : logit_eta(T), eta(T), clamped(T), partial(T) {}
};

// Runs the forward/backward recursion for one country.
void trace_country(double level, double upper, std::span<const double> coefs,
                   std::span<const double> eps, int anchor, const KnotSequence& ks,
                   CountryPath& path) {
  const int T = static_cast<int>(eps.size());
  const AsymptotePair asym{0.0, upper};
  path.clamps = 0;
  auto settle = [&](int t, double value) {
    bool hit = false;
    path.logit_eta[t] = clamp_logit(value, hit);
    path.clamped[t] = hit;
    path.clamps += hit;
    path.eta[t] = inv_logit(path.logit_eta[t]);
    path.partial[t] = f_bspline_partials(path.eta[t], asym, coefs, ks);
  };
  settle(anchor, level);
  for (int t = anchor + 1; t < T; ++t) {
    settle(t, path.logit_eta[t - 1] + path.partial[t - 1].value + eps[t]);
  }
  for (int t = anchor - 1; t >= 0; --t) {
    settle(t, path.logit_eta[t + 1] - path.partial[t + 1].value - eps[t + 1]);
  }
}

// Adjoint of trace_country. On entry g_logit holds d(target)/d(logit eta);
// it is consumed. Accumulates into g_level, g_upper, g_coefs, g_eps.
void reverse_country(const CountryPath& path, int anchor, std::vector<double>& g_logit,
                     double& g_level, double& g_upper, std::span<double> g_coefs,
                     std::span<double> g_eps) {
  const int T = static_cast<int>(g_logit.size());
  auto push = [&](int from, int to, double sign) {
    // logit_eta[from] = logit_eta[to] + sign * (f(eta[to]) + eps[sign > 0 ? from : to])
    if (path.clamped[from]) return;
    const double g = g_logit[from];
    if (g == 0.0) return;
    const auto& P = path.partial[to];
    const double e = path.eta[to];
    g_logit[to] += g * (1.0 + sign * P.d_eta * e * (1.0 - e));
    g_eps[sign > 0 ? from : to] += sign * g;
    g_upper += sign * g * P.d_upper;
    for (int r = 0; r < P.basis.count; ++r) {
      g_coefs[P.basis.first + r] += sign * g * P.basis.values[r];
    }
  };
  for (int t = T - 1; t > anchor; --t) push(t, t - 1, 1.0);
  for (int t = 0; t < anchor; ++t) push(t, t + 1, -1.0);
  if (!path.clamped[anchor]) g_level += g_logit[anchor];
}

// eps from standard-normal innovations z: stationary start at the anchor and
// AR(1) chains in both directions.
void eps_from_innovations(std::span<const double> z, double rho, double tau, int anchor,
                          std::span<double> eps) {
  const int T = static_cast<int>(z.size());
  eps[anchor] = tau / std::sqrt(1.0 - rho * rho) * z[anchor];
  for (int t = anchor + 1; t < T; ++t) eps[t] = rho * eps[t - 1] + tau * z[t];
  for (int t = anchor - 1; t >= 0; --t) eps[t] = rho * eps[t + 1] + tau * z[t];
}

void innovations_from_eps(std::span<const double> eps, double rho, double tau, int anchor,
                          std::span<double> z) {
  const int T = static_cast<int>(eps.size());
  z[anchor] = eps[anchor] * std::sqrt(1.0 - rho * rho) / tau;
  for (int t = anchor + 1; t < T; ++t) z[t] = (eps[t] - rho * eps[t - 1]) / tau;
  for (int t = anchor - 1; t >= 0; --t) z[t] = (eps[t] - rho * eps[t + 1]) / tau;
}

// Adjoint of eps_from_innovations; g_eps is consumed.
void reverse_eps(std::span<const double> z, std::span<const double> eps, double rho,
                 double tau, int anchor, std::span<double> g_eps, std::span<double> g_z,
                 double& g_rho, double& g_tau) {
  const int T = static_cast<int>(z.size());
  for (int t = T - 1; t > anchor; --t) {
    const double g = g_eps[t];
    g_eps[t - 1] += rho * g;
    g_rho += g * eps[t - 1];
    g_tau += g * z[t];
    g_z[t] += tau * g;
  }
  for (int t = 0; t < anchor; ++t) {
    const double g = g_eps[t];
    g_eps[t + 1] += rho * g;
    g_rho += g * eps[t + 1];
    g_tau += g * z[t];
    g_z[t] += tau * g;
  }
  const double g = g_eps[anchor];
  const double inv_root = 1.0 / std::sqrt(1.0 - rho * rho);
  g_z[anchor] += tau * inv_root * g;
  g_tau += inv_root * z[anchor] * g;
  g_rho += tau * z[anchor] * rho * inv_root * inv_root * inv_root * g;
}

struct TruncNormalTerm {
  double value;
  double d_eta;
  double d_sd;
};

TruncNormalTerm truncated_normal_term(double y, double eta, double sd) {
  const double r = (y - eta) / sd;
  const double a = -eta / sd;
  const double b = (1.0 - eta) / sd;
  const double log_z = log_normal_cdf_diff(a, b);
  const double z = std::exp(log_z);
  const double pa = std_normal_pdf(a);
  const double pb = std_normal_pdf(b);
  TruncNormalTerm out;
  out.value = -0.5 * r * r - std::log(sd) - kLogSqrtTwoPi - log_z;
  out.d_eta = r / sd + (pb - pa) / (sd * z);
  out.d_sd = (r * r - 1.0) / sd + (b * pb - a * pa) / (sd * z);
  return out;
}

}  // namespace

double truncated_normal_lpdf(double y, double eta, double sd) {
  if (!(sd > 0.0)) {
    throw ConfigError("truncated normal requires a positive standard deviation");
  }
  if (!(y >= 0.0 && y <= 1.0)) return kNegInf;
  return truncated_normal_term(y, eta, sd).value;
}

std::vector<double> country_coefficients(const McprParams& p, McprTransition transition,
                                         const KnotSequence& ks,
                                         std::span<const double> logistic_anchors, int c) {
  std::vector<double> coefs(ks.num_basis(), 0.0);
  if (transition == McprTransition::bspline) {
    auto range = free_coefficients(CoefficientFamily::mcpr_constraints, ks);
    for (int j = range.begin; j < range.end; ++j) {
      coefs[j] = mcpr_coefficient(p.beta(c, j - range.begin));
    }
  } else {
    auto range = free_coefficients(CoefficientFamily::approx_logistic, ks);
    const double upper = upper_asymptote(p.asymptote[c]);
    const double pace = logistic_pace(p.pace[c]);
    for (int j = range.begin; j < range.end; ++j) {
      coefs[j] = logistic_rate(logistic_anchors[j - range.begin] * upper, upper, pace);
    }
  }
  return coefs;
}

LatentTrajectory propagate(const McprParams& params, McprTransition transition,
                           const TimeGrid& grid, const KnotSequence& ks) {
  grid.validate();
  const int C = static_cast<int>(params.level.size());
  const int T = grid.size();
  if (params.eps.rows() != C || params.eps.cols() != T) {
    throw ConfigError("deviation matrix does not match countries x time grid");
  }
  std::vector<double> anchors;
  if (transition == McprTransition::approx_logistic) anchors = approx_logistic_anchors(ks);
  LatentTrajectory out;
  out.logit_eta.resize(C, T);
  out.eta.resize(C, T);
  CountryPath path(T);
  std::vector<double> eps(T);
  for (int c = 0; c < C; ++c) {
    auto coefs = country_coefficients(params, transition, ks, anchors, c);
    for (int t = 0; t < T; ++t) eps[t] = params.eps(c, t);
    trace_country(params.level[c], upper_asymptote(params.asymptote[c]), coefs, eps,
                  grid.anchor(), ks, path);
    for (int t = 0; t < T; ++t) {
      out.logit_eta(c, t) = path.logit_eta[t];
      out.eta(c, t) = path.eta[t];
    }
    out.clamped += path.clamps;
  }
  return out;
}

double log_ar1(std::span<const double> eps, double rho, double tau, int anchor) {
  const int T = static_cast<int>(eps.size());
  if (!(rho > 0.0 && rho < 1.0) || !(tau > 0.0)) return kNegInf;
  if (anchor < 0 || anchor >= T) {
    throw ConfigError("AR(1) anchor outside the series");
  }
  double lp = normal_lpdf(eps[anchor], 0.0, tau / std::sqrt(1.0 - rho * rho));
  for (int t = anchor + 1; t < T; ++t) lp += normal_lpdf(eps[t], rho * eps[t - 1], tau);
  for (int t = anchor - 1; t >= 0; --t) lp += normal_lpdf(eps[t], rho * eps[t + 1], tau);
  return lp;
}

double log_likelihood(const LatentTrajectory& traj, std::span<const Observation> obs,
                      const Eigen::VectorXd& source_sigma, const TimeGrid& grid) {
  double lp = 0.0;
  for (const auto& o : obs) {
    const double sd = std::sqrt(o.sampling_sd * o.sampling_sd +
                                source_sigma[o.source] * source_sigma[o.source]);
    if (!(sd > 0.0)) {
      throw ConfigError("observation with zero total variance");
    }
    lp += truncated_normal_lpdf(o.value, traj.eta(o.country, grid.index(o.year)), sd);
  }
  return lp;
}

double log_prior(const McprParams& p, const HierarchyIndex& h, McprTransition transition) {
  const int C = h.num_countries();
  const int S = h.num_subregions();
  const int R = h.num_regions();
  auto positive = [](double s) { return s > 0.0 && std::isfinite(s); };
  double lp = 0.0;

  if (transition == McprTransition::bspline) {
    const int P = static_cast<int>(p.beta_world.size());
    for (int j = 0; j < P; ++j) {
      const double sc = p.beta_sigma_country[j];
      const double ss = p.beta_sigma_subregion[j];
      const double sr = p.beta_sigma_region[j];
      if (!positive(sc) || !positive(ss) || !positive(sr)) return kNegInf;
      for (int c = 0; c < C; ++c) {
        lp += normal_lpdf(p.beta(c, j), p.beta_subregion(h.subregion_of[c], j), sc);
      }
      for (int s = 0; s < S; ++s) {
        lp += normal_lpdf(p.beta_subregion(s, j), p.beta_region(h.region_of[s], j), ss);
      }
      for (int r = 0; r < R; ++r) lp += normal_lpdf(p.beta_region(r, j), p.beta_world[j], sr);
      lp += half_normal_lpdf(sc, 0.5) + half_normal_lpdf(ss, 0.5) + half_normal_lpdf(sr, 0.5);
      lp += normal_lpdf(p.beta_world[j], 0.0, 1.0);
    }
  } else {
    const double sc = p.pace_sigma_country;
    const double ss = p.pace_sigma_subregion;
    const double sr = p.pace_sigma_region;
    if (!positive(sc) || !positive(ss) || !positive(sr)) return kNegInf;
    for (int c = 0; c < C; ++c) lp += normal_lpdf(p.pace[c], p.pace_subregion[h.subregion_of[c]], sc);
    for (int s = 0; s < S; ++s) lp += normal_lpdf(p.pace_subregion[s], p.pace_region[h.region_of[s]], ss);
    for (int r = 0; r < R; ++r) lp += normal_lpdf(p.pace_region[r], p.pace_world, sr);
    lp += half_normal_lpdf(sc, 1.0) + half_normal_lpdf(ss, 1.0) + half_normal_lpdf(sr, 1.0);
    lp += normal_lpdf(p.pace_world, 0.0, 1.0);
  }

  if (!positive(p.asymptote_sigma)) return kNegInf;
  for (int c = 0; c < C; ++c) lp += normal_lpdf(p.asymptote[c], p.asymptote_world, p.asymptote_sigma);
  lp += normal_lpdf(p.asymptote_world, 0.0, 1.0) + half_normal_lpdf(p.asymptote_sigma, 1.0);

  if (!positive(p.level_sigma_country) || !positive(p.level_sigma_region)) return kNegInf;
  for (int c = 0; c < C; ++c) {
    lp += normal_lpdf(p.level[c], p.level_subregion[h.subregion_of[c]], p.level_sigma_country);
  }
  for (int s = 0; s < S; ++s) {
    lp += normal_lpdf(p.level_subregion[s], p.level_region[h.region_of[s]], p.level_sigma_region);
  }
  for (int r = 0; r < R; ++r) lp += normal_lpdf(p.level_region[r], p.level_world, p.level_sigma_region);
  lp += normal_lpdf(p.level_world, 0.0, 1.0);
  lp += half_normal_lpdf(p.level_sigma_country, 1.0) + half_normal_lpdf(p.level_sigma_region, 1.0);

  if (!(p.rho > 0.0 && p.rho < 1.0)) return kNegInf;
  if (!positive(p.tau)) return kNegInf;
  lp += half_normal_lpdf(p.tau, 2.0);
  for (Eigen::Index d = 0; d < p.source_sigma.size(); ++d) {
    if (!positive(p.source_sigma[d])) return kNegInf;
    lp += half_normal_lpdf(p.source_sigma[d], 0.1);
  }
  return lp;
}

McprModel::McprModel(McprModelConfig config, HierarchyIndex hierarchy,
                     std::vector<Observation> observations, int num_sources)
    : config_(config),
      hierarchy_(std::move(hierarchy)),
      observations_(std::move(observations)),
      num_sources_(num_sources),
      knots_(build_knots_mcpr(config.num_knots, config.degree)),
      free_(free_coefficients(config.transition == McprTransition::bspline
                                  ? CoefficientFamily::mcpr_constraints
                                  : CoefficientFamily::approx_logistic,
                              knots_)) {
  config_.grid.validate();
  hierarchy_.validate();
  if (num_sources_ < 1) {
    throw ConfigError("at least one source type is required");
  }
  if (config_.transition == McprTransition::approx_logistic) {
    anchors_ = approx_logistic_anchors(knots_);
  }
  obs_by_country_.resize(hierarchy_.num_countries());
  for (std::size_t i = 0; i < observations_.size(); ++i) {
    const auto& o = observations_[i];
    if (o.country < 0 || o.country >= hierarchy_.num_countries()) {
      throw DataError("observation " + std::to_string(i) + " refers to an unknown country");
    }
    if (!config_.grid.contains(o.year)) {
      throw DataError("observation year " + std::to_string(o.year) + " for " +
                      hierarchy_.countries[o.country] + " is outside the time grid");
    }
    if (o.source < 0 || o.source >= num_sources_) {
      throw DataError("observation " + std::to_string(i) + " has an unknown source index");
    }
    if (!(o.value >= 0.0 && o.value <= 1.0)) {
      throw DataError("observation value outside [0, 1]");
    }
    if (!(o.sampling_sd > 0.0)) {
      throw DataError("observation " + std::to_string(i) +
                      " has no positive sampling SD; impute before fitting");
    }
    obs_by_country_[o.country].push_back(static_cast<int>(i));
  }
  build_layout();
}

void McprModel::build_layout() {
  const int C = hierarchy_.num_countries();
  const int S = hierarchy_.num_subregions();
  const int R = hierarchy_.num_regions();
  const int P = free_.size();
  const int T = config_.grid.size();
  int next = 0;
  names_.clear();
  auto scalar = [&](const std::string& name) {
    names_.push_back(name);
    return next++;
  };
  auto vec = [&](const std::string& name, int n) {
    int start = next;
    for (int i = 0; i < n; ++i) names_.push_back(name + "." + std::to_string(i + 1));
    next += n;
    return start;
  };
  auto mat = [&](const std::string& name, int rows, int cols) {
    int start = next;
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) {
        names_.push_back(name + "." + std::to_string(i + 1) + "." + std::to_string(j + 1));
      }
    }
    next += rows * cols;
    return start;
  };
  auto& L = layout_;
  if (config_.transition == McprTransition::bspline) {
    L.beta_world = vec("beta_world", P);
    L.beta_log_sigma_region = vec("beta_log_sigma_region", P);
    L.beta_log_sigma_subregion = vec("beta_log_sigma_subregion", P);
    L.beta_log_sigma_country = vec("beta_log_sigma_country", P);
    L.beta_z_region = mat("beta_z_region", R, P);
    L.beta_z_subregion = mat("beta_z_subregion", S, P);
    L.beta_z_country = mat("beta_z_country", C, P);
  } else {
    L.pace_world = scalar("pace_world");
    L.pace_log_sigma_region = scalar("pace_log_sigma_region");
    L.pace_log_sigma_subregion = scalar("pace_log_sigma_subregion");
    L.pace_log_sigma_country = scalar("pace_log_sigma_country");
    L.pace_z_region = vec("pace_z_region", R);
    L.pace_z_subregion = vec("pace_z_subregion", S);
    L.pace_z_country = vec("pace_z_country", C);
  }
  L.asymptote_world = scalar("asymptote_world");
  L.asymptote_log_sigma = scalar("asymptote_log_sigma");
  L.asymptote_z = vec("asymptote_z", C);
  L.level_world = scalar("level_world");
  L.level_log_sigma_country = scalar("level_log_sigma_country");
  L.level_log_sigma_region = scalar("level_log_sigma_region");
  L.level_z_region = vec("level_z_region", R);
  L.level_z_subregion = vec("level_z_subregion", S);
  L.level_z_country = vec("level_z_country", C);
  L.logit_rho = scalar("logit_rho");
  L.log_tau = scalar("log_tau");
  L.eps_z = mat("eps_z", C, T);
  L.log_source_sigma = vec("log_source_sigma", num_sources_);
  dim_ = next;
}

McprParams McprModel::zero_params() const {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(dim_);
  return unpack(x);
}

McprParams McprModel::unpack(const Eigen::VectorXd& x) const {
  if (x.size() != dim_) {
    throw ConfigError("parameter vector has length " + std::to_string(x.size()) +
                      ", expected " + std::to_string(dim_));
  }
  const auto& h = hierarchy_;
  const int C = h.num_countries();
  const int S = h.num_subregions();
  const int R = h.num_regions();
  const int P = free_.size();
  const int T = config_.grid.size();
  const auto& L = layout_;
  McprParams p;
  if (config_.transition == McprTransition::bspline) {
    p.beta_world.resize(P);
    p.beta_sigma_region.resize(P);
    p.beta_sigma_subregion.resize(P);
    p.beta_sigma_country.resize(P);
    p.beta_region.resize(R, P);
    p.beta_subregion.resize(S, P);
    p.beta.resize(C, P);
    for (int j = 0; j < P; ++j) {
      p.beta_world[j] = x[L.beta_world + j];
      p.beta_sigma_region[j] = std::exp(x[L.beta_log_sigma_region + j]);
      p.beta_sigma_subregion[j] = std::exp(x[L.beta_log_sigma_subregion + j]);
      p.beta_sigma_country[j] = std::exp(x[L.beta_log_sigma_country + j]);
      for (int r = 0; r < R; ++r) {
        p.beta_region(r, j) = p.beta_world[j] + p.beta_sigma_region[j] * x[L.beta_z_region + r * P + j];
      }
      for (int s = 0; s < S; ++s) {
        p.beta_subregion(s, j) = p.beta_region(h.region_of[s], j) +
                                 p.beta_sigma_subregion[j] * x[L.beta_z_subregion + s * P + j];
      }
      for (int c = 0; c < C; ++c) {
        p.beta(c, j) = p.beta_subregion(h.subregion_of[c], j) +
                       p.beta_sigma_country[j] * x[L.beta_z_country + c * P + j];
      }
    }
  } else {
    p.pace_world = x[L.pace_world];
    p.pace_sigma_region = std::exp(x[L.pace_log_sigma_region]);
    p.pace_sigma_subregion = std::exp(x[L.pace_log_sigma_subregion]);
    p.pace_sigma_country = std::exp(x[L.pace_log_sigma_country]);
    p.pace_region.resize(R);
    p.pace_subregion.resize(S);
    p.pace.resize(C);
    for (int r = 0; r < R; ++r) p.pace_region[r] = p.pace_world + p.pace_sigma_region * x[L.pace_z_region + r];
    for (int s = 0; s < S; ++s) {
      p.pace_subregion[s] = p.pace_region[h.region_of[s]] + p.pace_sigma_subregion * x[L.pace_z_subregion + s];
    }
    for (int c = 0; c < C; ++c) {
      p.pace[c] = p.pace_subregion[h.subregion_of[c]] + p.pace_sigma_country * x[L.pace_z_country + c];
    }
  }
  p.asymptote_world = x[L.asymptote_world];
  p.asymptote_sigma = std::exp(x[L.asymptote_log_sigma]);
  p.asymptote.resize(C);
  for (int c = 0; c < C; ++c) p.asymptote[c] = p.asymptote_world + p.asymptote_sigma * x[L.asymptote_z + c];

  p.level_world = x[L.level_world];
  p.level_sigma_country = std::exp(x[L.level_log_sigma_country]);
  p.level_sigma_region = std::exp(x[L.level_log_sigma_region]);
  p.level_region.resize(R);
  p.level_subregion.resize(S);
  p.level.resize(C);
  for (int r = 0; r < R; ++r) p.level_region[r] = p.level_world + p.level_sigma_region * x[L.level_z_region + r];
  for (int s = 0; s < S; ++s) {
    p.level_subregion[s] = p.level_region[h.region_of[s]] + p.level_sigma_region * x[L.level_z_subregion + s];
  }
  for (int c = 0; c < C; ++c) {
    p.level[c] = p.level_subregion[h.subregion_of[c]] + p.level_sigma_country * x[L.level_z_country + c];
  }

  p.rho = inv_logit(x[L.logit_rho]);
  p.tau = std::exp(x[L.log_tau]);
  p.eps.resize(C, T);
  std::vector<double> eps(T);
  for (int c = 0; c < C; ++c) {
    eps_from_innovations(std::span<const double>(x.data() + L.eps_z + c * T, T), p.rho, p.tau,
                         config_.grid.anchor(), eps);
    for (int t = 0; t < T; ++t) p.eps(c, t) = eps[t];
  }
  p.source_sigma.resize(num_sources_);
  for (int d = 0; d < num_sources_; ++d) p.source_sigma[d] = std::exp(x[L.log_source_sigma + d]);
  return p;
}

Eigen::VectorXd McprModel::pack(const McprParams& p) const {
  const auto& h = hierarchy_;
  const int C = h.num_countries();
  const int S = h.num_subregions();
  const int R = h.num_regions();
  const int P = free_.size();
  const int T = config_.grid.size();
  const auto& L = layout_;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(dim_);
  if (config_.transition == McprTransition::bspline) {
    for (int j = 0; j < P; ++j) {
      x[L.beta_world + j] = p.beta_world[j];
      x[L.beta_log_sigma_region + j] = std::log(p.beta_sigma_region[j]);
      x[L.beta_log_sigma_subregion + j] = std::log(p.beta_sigma_subregion[j]);
      x[L.beta_log_sigma_country + j] = std::log(p.beta_sigma_country[j]);
      for (int r = 0; r < R; ++r) {
        x[L.beta_z_region + r * P + j] = (p.beta_region(r, j) - p.beta_world[j]) / p.beta_sigma_region[j];
      }
      for (int s = 0; s < S; ++s) {
        x[L.beta_z_subregion + s * P + j] =
            (p.beta_subregion(s, j) - p.beta_region(h.region_of[s], j)) / p.beta_sigma_subregion[j];
      }
      for (int c = 0; c < C; ++c) {
        x[L.beta_z_country + c * P + j] =
            (p.beta(c, j) - p.beta_subregion(h.subregion_of[c], j)) / p.beta_sigma_country[j];
      }
    }
  } else {
    x[L.pace_world] = p.pace_world;
    x[L.pace_log_sigma_region] = std::log(p.pace_sigma_region);
    x[L.pace_log_sigma_subregion] = std::log(p.pace_sigma_subregion);
    x[L.pace_log_sigma_country] = std::log(p.pace_sigma_country);
    for (int r = 0; r < R; ++r) x[L.pace_z_region + r] = (p.pace_region[r] - p.pace_world) / p.pace_sigma_region;
    for (int s = 0; s < S; ++s) {
      x[L.pace_z_subregion + s] = (p.pace_subregion[s] - p.pace_region[h.region_of[s]]) / p.pace_sigma_subregion;
    }
    for (int c = 0; c < C; ++c) {
      x[L.pace_z_country + c] = (p.pace[c] - p.pace_subregion[h.subregion_of[c]]) / p.pace_sigma_country;
    }
  }
  x[L.asymptote_world] = p.asymptote_world;
  x[L.asymptote_log_sigma] = std::log(p.asymptote_sigma);
  for (int c = 0; c < C; ++c) x[L.asymptote_z + c] = (p.asymptote[c] - p.asymptote_world) / p.asymptote_sigma;
  x[L.level_world] = p.level_world;
  x[L.level_log_sigma_country] = std::log(p.level_sigma_country);
  x[L.level_log_sigma_region] = std::log(p.level_sigma_region);
  for (int r = 0; r < R; ++r) x[L.level_z_region + r] = (p.level_region[r] - p.level_world) / p.level_sigma_region;
  for (int s = 0; s < S; ++s) {
    x[L.level_z_subregion + s] = (p.level_subregion[s] - p.level_region[h.region_of[s]]) / p.level_sigma_region;
  }
  for (int c = 0; c < C; ++c) {
    x[L.level_z_country + c] = (p.level[c] - p.level_subregion[h.subregion_of[c]]) / p.level_sigma_country;
  }
  x[L.logit_rho] = logit(p.rho);
  x[L.log_tau] = std::log(p.tau);
  std::vector<double> eps(T);
  for (int c = 0; c < C; ++c) {
    for (int t = 0; t < T; ++t) eps[t] = p.eps(c, t);
    innovations_from_eps(eps, p.rho, p.tau, config_.grid.anchor(),
                         std::span<double>(x.data() + L.eps_z + c * T, T));
  }
  for (int d = 0; d < num_sources_; ++d) x[L.log_source_sigma + d] = std::log(p.source_sigma[d]);
  return x;
}

double McprModel::centered_log_density(const Eigen::VectorXd& x) const {
  auto p = unpack(x);
  double lp = log_prior(p, hierarchy_, config_.transition);
  const int T = config_.grid.size();
  std::vector<double> eps(T);
  for (int c = 0; c < hierarchy_.num_countries(); ++c) {
    for (int t = 0; t < T; ++t) eps[t] = p.eps(c, t);
    lp += log_ar1(eps, p.rho, p.tau, config_.grid.anchor());
  }
  auto traj = propagate(p, config_.transition, config_.grid, knots_);
  lp += log_likelihood(traj, observations_, p.source_sigma, config_.grid);
  return lp;
}

double McprModel::log_density(const Eigen::VectorXd& x, Eigen::VectorXd* grad) const {
  if (x.size() != dim_) {
    throw ConfigError("parameter vector has length " + std::to_string(x.size()) +
                      ", expected " + std::to_string(dim_));
  }
  const auto& h = hierarchy_;
  const int C = h.num_countries();
  const int S = h.num_subregions();
  const int R = h.num_regions();
  const int P = free_.size();
  const int T = config_.grid.size();
  const int J = knots_.num_basis();
  const int anchor = config_.grid.anchor();
  const bool bspline = config_.transition == McprTransition::bspline;
  const auto& L = layout_;

  Eigen::VectorXd gx = Eigen::VectorXd::Zero(dim_);
  double lp = 0.0;

  auto std_normal = [&](int i) {
    const double z = x[i];
    lp += -0.5 * z * z - kLogSqrtTwoPi;
    gx[i] -= z;
    return z;
  };
  auto std_normal_block = [&](int start, int n) {
    for (int i = start; i < start + n; ++i) std_normal(i);
  };
  // log-scale parameter with a half-normal prior on the scale, Jacobian included
  auto half_normal_scale = [&](int i, double prior_sd) {
    const double u = x[i];
    const double s = std::exp(u);
    lp += half_normal_lpdf(s, prior_sd) + u;
    gx[i] += 1.0 - s * s / (prior_sd * prior_sd);
    return s;
  };

  // Transition shape hierarchy.
  Eigen::MatrixXd beta_region, beta_subregion, beta;
  Eigen::VectorXd sig_beta_r(P), sig_beta_s(P), sig_beta_c(P);
  Eigen::VectorXd pace_region, pace_subregion, pace;
  double sig_pace_r = 0, sig_pace_s = 0, sig_pace_c = 0;
  if (bspline) {
    beta_region.resize(R, P);
    beta_subregion.resize(S, P);
    beta.resize(C, P);
    for (int j = 0; j < P; ++j) {
      const double world = std_normal(L.beta_world + j);
      sig_beta_r[j] = half_normal_scale(L.beta_log_sigma_region + j, 0.5);
      sig_beta_s[j] = half_normal_scale(L.beta_log_sigma_subregion + j, 0.5);
      sig_beta_c[j] = half_normal_scale(L.beta_log_sigma_country + j, 0.5);
      for (int r = 0; r < R; ++r) beta_region(r, j) = world + sig_beta_r[j] * x[L.beta_z_region + r * P + j];
      for (int s = 0; s < S; ++s) {
        beta_subregion(s, j) = beta_region(h.region_of[s], j) + sig_beta_s[j] * x[L.beta_z_subregion + s * P + j];
      }
      for (int c = 0; c < C; ++c) {
        beta(c, j) = beta_subregion(h.subregion_of[c], j) + sig_beta_c[j] * x[L.beta_z_country + c * P + j];
      }
    }
    std_normal_block(L.beta_z_region, R * P);
    std_normal_block(L.beta_z_subregion, S * P);
    std_normal_block(L.beta_z_country, C * P);
  } else {
    const double world = std_normal(L.pace_world);
    sig_pace_r = half_normal_scale(L.pace_log_sigma_region, 1.0);
    sig_pace_s = half_normal_scale(L.pace_log_sigma_subregion, 1.0);
    sig_pace_c = half_normal_scale(L.pace_log_sigma_country, 1.0);
    pace_region.resize(R);
    pace_subregion.resize(S);
    pace.resize(C);
    for (int r = 0; r < R; ++r) pace_region[r] = world + sig_pace_r * x[L.pace_z_region + r];
    for (int s = 0; s < S; ++s) pace_subregion[s] = pace_region[h.region_of[s]] + sig_pace_s * x[L.pace_z_subregion + s];
    for (int c = 0; c < C; ++c) pace[c] = pace_subregion[h.subregion_of[c]] + sig_pace_c * x[L.pace_z_country + c];
    std_normal_block(L.pace_z_region, R);
    std_normal_block(L.pace_z_subregion, S);
    std_normal_block(L.pace_z_country, C);
  }

  // Asymptote.
  const double asym_world = std_normal(L.asymptote_world);
  const double sig_asym = half_normal_scale(L.asymptote_log_sigma, 1.0);
  std_normal_block(L.asymptote_z, C);

  // Level hierarchy.
  const double level_world = std_normal(L.level_world);
  const double sig_level_c = half_normal_scale(L.level_log_sigma_country, 1.0);
  const double sig_level_r = half_normal_scale(L.level_log_sigma_region, 1.0);
  Eigen::VectorXd level_region(R), level_subregion(S);
  for (int r = 0; r < R; ++r) level_region[r] = level_world + sig_level_r * x[L.level_z_region + r];
  for (int s = 0; s < S; ++s) {
    level_subregion[s] = level_region[h.region_of[s]] + sig_level_r * x[L.level_z_subregion + s];
  }
  std_normal_block(L.level_z_region, R);
  std_normal_block(L.level_z_subregion, S);
  std_normal_block(L.level_z_country, C);

  // Smoothing and observation noise.
  const double rho = inv_logit(x[L.logit_rho]);
  lp += std::log(rho) + std::log1p(-rho);
  gx[L.logit_rho] += 1.0 - 2.0 * rho;
  const double tau = half_normal_scale(L.log_tau, 2.0);
  std_normal_block(L.eps_z, C * T);
  Eigen::VectorXd source_sigma(num_sources_);
  for (int d = 0; d < num_sources_; ++d) source_sigma[d] = half_normal_scale(L.log_source_sigma + d, 0.1);

  // Country recursions, likelihood, and their adjoints.
  Eigen::MatrixXd g_beta = Eigen::MatrixXd::Zero(bspline ? C : 0, P);
  Eigen::VectorXd g_pace = Eigen::VectorXd::Zero(bspline ? 0 : C);
  Eigen::VectorXd g_level = Eigen::VectorXd::Zero(C);
  Eigen::VectorXd g_asym = Eigen::VectorXd::Zero(C);
  Eigen::VectorXd g_source = Eigen::VectorXd::Zero(num_sources_);
  double g_rho = 0.0, g_tau = 0.0;

  CountryPath path(T);
  std::vector<double> eps(T), g_eps(T), g_logit(T), coefs(J), g_coefs(J);
  std::int64_t clamps = 0;
  for (int c = 0; c < C; ++c) {
    const double asym_raw = asym_world + sig_asym * x[L.asymptote_z + c];
    const double ap = inv_logit(asym_raw);
    const double upper = 0.5 + 0.45 * ap;
    const double level = level_subregion[h.subregion_of[c]] + sig_level_c * x[L.level_z_country + c];

    std::fill(coefs.begin(), coefs.end(), 0.0);
    double pace_value = 0.0;
    if (bspline) {
      for (int j = 0; j < P; ++j) coefs[free_.begin + j] = mcpr_coefficient(beta(c, j));
    } else {
      pace_value = logistic_pace(pace[c]);
      for (int j = 0; j < P; ++j) {
        const double a = anchors_[j];
        coefs[free_.begin + j] = pace_value * (1.0 - a) / (1.0 - a * upper);
      }
    }

    std::span<const double> z_eps(x.data() + L.eps_z + c * T, T);
    eps_from_innovations(z_eps, rho, tau, anchor, eps);
    trace_country(level, upper, coefs, eps, anchor, knots_, path);
    clamps += path.clamps;

    std::fill(g_logit.begin(), g_logit.end(), 0.0);
    for (int i : obs_by_country_[c]) {
      const auto& o = observations_[i];
      const int t = config_.grid.index(o.year);
      const double sd_source = source_sigma[o.source];
      const double sd = std::sqrt(o.sampling_sd * o.sampling_sd + sd_source * sd_source);
      const double e = path.eta[t];
      auto term = truncated_normal_term(o.value, e, sd);
      lp += term.value;
      g_logit[t] += term.d_eta * e * (1.0 - e);
      g_source[o.source] += term.d_sd * sd_source / sd;
    }

    std::fill(g_eps.begin(), g_eps.end(), 0.0);
    std::fill(g_coefs.begin(), g_coefs.end(), 0.0);
    double g_upper = 0.0;
    reverse_country(path, anchor, g_logit, g_level[c], g_upper, g_coefs, g_eps);

    std::span<double> g_z_eps(gx.data() + L.eps_z + c * T, T);
    reverse_eps(z_eps, eps, rho, tau, anchor, g_eps, g_z_eps, g_rho, g_tau);

    if (bspline) {
      for (int j = 0; j < P; ++j) {
        g_beta(c, j) += g_coefs[free_.begin + j] * mcpr_coefficient_grad(beta(c, j));
      }
    } else {
      double g_pace_value = 0.0;
      for (int j = 0; j < P; ++j) {
        const double a = anchors_[j];
        const double denom = 1.0 - a * upper;
        const double g = g_coefs[free_.begin + j];
        g_pace_value += g * (1.0 - a) / denom;
        g_upper += g * pace_value * (1.0 - a) * a / (denom * denom);
      }
      const double pp = inv_logit(pace[c]);
      g_pace[c] += g_pace_value * 0.5 * pp * (1.0 - pp);
    }
    g_asym[c] += g_upper * 0.45 * ap * (1.0 - ap);
  }
  if (clamps > 0) clamp_events_->fetch_add(clamps, std::memory_order_relaxed);

  // Level hierarchy adjoints.
  {
    Eigen::VectorXd g_sub = Eigen::VectorXd::Zero(S);
    Eigen::VectorXd g_reg = Eigen::VectorXd::Zero(R);
    double g_sig_c = 0.0, g_sig_r = 0.0;
    for (int c = 0; c < C; ++c) {
      const double z = x[L.level_z_country + c];
      g_sub[h.subregion_of[c]] += g_level[c];
      g_sig_c += g_level[c] * z;
      gx[L.level_z_country + c] += sig_level_c * g_level[c];
    }
    for (int s = 0; s < S; ++s) {
      const double z = x[L.level_z_subregion + s];
      g_reg[h.region_of[s]] += g_sub[s];
      g_sig_r += g_sub[s] * z;
      gx[L.level_z_subregion + s] += sig_level_r * g_sub[s];
    }
    for (int r = 0; r < R; ++r) {
      const double z = x[L.level_z_region + r];
      gx[L.level_world] += g_reg[r];
      g_sig_r += g_reg[r] * z;
      gx[L.level_z_region + r] += sig_level_r * g_reg[r];
    }
    gx[L.level_log_sigma_country] += g_sig_c * sig_level_c;
    gx[L.level_log_sigma_region] += g_sig_r * sig_level_r;
  }

  // Asymptote adjoints.
  {
    double g_sig = 0.0;
    for (int c = 0; c < C; ++c) {
      gx[L.asymptote_world] += g_asym[c];
      g_sig += g_asym[c] * x[L.asymptote_z + c];
      gx[L.asymptote_z + c] += sig_asym * g_asym[c];
    }
    gx[L.asymptote_log_sigma] += g_sig * sig_asym;
  }

  // Transition shape adjoints.
  if (bspline) {
    for (int j = 0; j < P; ++j) {
      Eigen::VectorXd g_sub = Eigen::VectorXd::Zero(S);
      Eigen::VectorXd g_reg = Eigen::VectorXd::Zero(R);
      double g_sc = 0.0, g_ss = 0.0, g_sr = 0.0;
      for (int c = 0; c < C; ++c) {
        const int i = L.beta_z_country + c * P + j;
        g_sub[h.subregion_of[c]] += g_beta(c, j);
        g_sc += g_beta(c, j) * x[i];
        gx[i] += sig_beta_c[j] * g_beta(c, j);
      }
      for (int s = 0; s < S; ++s) {
        const int i = L.beta_z_subregion + s * P + j;
        g_reg[h.region_of[s]] += g_sub[s];
        g_ss += g_sub[s] * x[i];
        gx[i] += sig_beta_s[j] * g_sub[s];
      }
      for (int r = 0; r < R; ++r) {
        const int i = L.beta_z_region + r * P + j;
        gx[L.beta_world + j] += g_reg[r];
        g_sr += g_reg[r] * x[i];
        gx[i] += sig_beta_r[j] * g_reg[r];
      }
      gx[L.beta_log_sigma_country + j] += g_sc * sig_beta_c[j];
      gx[L.beta_log_sigma_subregion + j] += g_ss * sig_beta_s[j];
      gx[L.beta_log_sigma_region + j] += g_sr * sig_beta_r[j];
    }
  } else {
    Eigen::VectorXd g_sub = Eigen::VectorXd::Zero(S);
    Eigen::VectorXd g_reg = Eigen::VectorXd::Zero(R);
    double g_sc = 0.0, g_ss = 0.0, g_sr = 0.0;
    for (int c = 0; c < C; ++c) {
      const int i = L.pace_z_country + c;
      g_sub[h.subregion_of[c]] += g_pace[c];
      g_sc += g_pace[c] * x[i];
      gx[i] += sig_pace_c * g_pace[c];
    }
    for (int s = 0; s < S; ++s) {
      const int i = L.pace_z_subregion + s;
      g_reg[h.region_of[s]] += g_sub[s];
      g_ss += g_sub[s] * x[i];
      gx[i] += sig_pace_s * g_sub[s];
    }
    for (int r = 0; r < R; ++r) {
      const int i = L.pace_z_region + r;
      gx[L.pace_world] += g_reg[r];
      g_sr += g_reg[r] * x[i];
      gx[i] += sig_pace_r * g_reg[r];
    }
    gx[L.pace_log_sigma_country] += g_sc * sig_pace_c;
    gx[L.pace_log_sigma_subregion] += g_ss * sig_pace_s;
    gx[L.pace_log_sigma_region] += g_sr * sig_pace_r;
  }

  gx[L.logit_rho] += g_rho * rho * (1.0 - rho);
  gx[L.log_tau] += g_tau * tau;
  for (int d = 0; d < num_sources_; ++d) gx[L.log_source_sigma + d] += g_source[d] * source_sigma[d];

  if (!std::isfinite(lp) || !gx.allFinite()) {
    if (grad) grad->setZero(dim_);
    return kNegInf;
  }
  if (grad) *grad = std::move(gx);
  return lp;
}

}  // namespace btm
