#include "btm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "btm/errors.hpp"
#include "btm/io.hpp"

namespace btm {

namespace {

constexpr std::pair<SourceType, std::string_view> kSourceNames[] = {
    {SourceType::DHS, "DHS"},
    {SourceType::PMA, "PMA"},
    {SourceType::MICS, "MICS"},
    {SourceType::National, "National"},
    {SourceType::Other, "Other"},
};

int index_of(std::vector<std::string>& names, const std::string& name) {
  auto it = std::find(names.begin(), names.end(), name);
  if (it != names.end()) return static_cast<int>(it - names.begin());
  names.push_back(name);
  return static_cast<int>(names.size()) - 1;
}

bool truthy(const std::string& s) {
  return s == "1" || s == "true" || s == "TRUE" || s == "True" || s == "yes";
}

}  // namespace

std::optional<SourceType> parse_source_type(std::string_view name) {
  for (auto [type, label] : kSourceNames) {
    if (label == name) return type;
  }
  return std::nullopt;
}

std::string_view to_string(SourceType type) {
  for (auto [t, label] : kSourceNames) {
    if (t == type) return label;
  }
  return "Other";
}

std::optional<int> HierarchyIndex::country_index(std::string_view name) const {
  auto it = std::find(countries.begin(), countries.end(), name);
  if (it == countries.end()) return std::nullopt;
  return static_cast<int>(it - countries.begin());
}

int HierarchyIndex::add(const std::string& country, const std::string& subregion,
                        const std::string& region) {
  if (country.empty() || subregion.empty() || region.empty()) {
    throw DataError("country, subregion and region names must be non-empty");
  }
  const int r = index_of(regions, region);
  const bool new_subregion =
      std::find(subregions.begin(), subregions.end(), subregion) == subregions.end();
  const int s = index_of(subregions, subregion);
  if (new_subregion) {
    region_of.push_back(r);
  } else if (region_of[s] != r) {
    throw DataError("subregion '" + subregion + "' assigned to both '" +
                    regions[region_of[s]] + "' and '" + region + "'");
  }
  if (auto c = country_index(country)) {
    if (subregion_of[*c] != s) {
      throw DataError("country '" + country + "' assigned to both '" +
                      subregions[subregion_of[*c]] + "' and '" + subregion + "'");
    }
    return *c;
  }
  countries.push_back(country);
  subregion_of.push_back(s);
  return num_countries() - 1;
}

void HierarchyIndex::validate() const {
  if (countries.empty()) {
    throw DataError("hierarchy has no countries");
  }
  if (subregion_of.size() != countries.size() || region_of.size() != subregions.size()) {
    throw DataError("hierarchy index arrays are inconsistent");
  }
  for (int s : subregion_of) {
    if (s < 0 || s >= num_subregions()) throw DataError("country maps to an unknown subregion");
  }
  for (int r : region_of) {
    if (r < 0 || r >= num_regions()) throw DataError("subregion maps to an unknown region");
  }
}

int survey_year(double year_start, double year_end) {
  return static_cast<int>(std::floor(0.5 * (year_start + year_end)));
}

void impute_sampling_sd(McprDataset& data) {
  std::vector<double> max_by_source(data.sources.size(), 0.0);
  double max_overall = 0.0;
  for (const auto& o : data.observations) {
    if (o.sampling_sd > 0.0) {
      max_by_source[o.source] = std::max(max_by_source[o.source], o.sampling_sd);
      max_overall = std::max(max_overall, o.sampling_sd);
    }
  }
  for (auto& o : data.observations) {
    if (o.sampling_sd > 0.0) continue;
    double fill = max_by_source[o.source] > 0.0 ? max_by_source[o.source] : max_overall;
    if (!(fill > 0.0)) {
      throw DataError("cannot impute sampling SD: no observation reports a positive SD");
    }
    o.sampling_sd = fill;
    o.sd_imputed = true;
    ++data.num_imputed;
  }
}

McprDataset parse_mcpr_csv(std::istream& in, const HierarchyIndex* hierarchy) {
  auto table = CsvTable::parse(in);
  const int col_country = table.require_column("country");
  const int col_subregion = table.require_column("subregion");
  const int col_region = table.require_column("region");
  const int col_start = table.require_column("year_start");
  const int col_end = table.require_column("year_end");
  const int col_value = table.require_column("value");
  const int col_sd = table.require_column("sampling_sd");
  const int col_source = table.require_column("source_type");
  const auto col_exclude = table.column("exclude");

  McprDataset data;
  if (hierarchy) {
    hierarchy->validate();
    data.hierarchy = *hierarchy;
  }
  for (const auto& row : table.rows()) {
    const auto& f = row.fields;
    const std::string where = "line " + std::to_string(row.line);
    if (col_exclude && truthy(f[*col_exclude])) {
      ++data.num_excluded;
      continue;
    }
    auto source = parse_source_type(f[col_source]);
    if (!source) {
      throw DataError(where + ": unknown source_type '" + f[col_source] + "'");
    }
    int c = 0;
    try {
      c = data.hierarchy.add(f[col_country], f[col_subregion], f[col_region]);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
    Observation o;
    o.country = c;
    double start = parse_double(row, col_start, "year_start");
    double end = parse_double(row, col_end, "year_end");
    if (end < start) {
      throw DataError(where + ": year_end precedes year_start");
    }
    o.year = survey_year(start, end);
    o.value = parse_double(row, col_value, "value");
    if (!(o.value >= 0.0 && o.value <= 1.0)) {
      throw DataError(where + ": value " + f[col_value] + " outside [0, 1]");
    }
    auto sd = parse_optional_double(row, col_sd, "sampling_sd");
    if (sd && *sd < 0.0) {
      throw DataError(where + ": negative sampling_sd");
    }
    o.sampling_sd = sd.value_or(0.0);
    auto it = std::find(data.sources.begin(), data.sources.end(), *source);
    if (it == data.sources.end()) {
      data.sources.push_back(*source);
      o.source = data.num_sources() - 1;
    } else {
      o.source = static_cast<int>(it - data.sources.begin());
    }
    data.observations.push_back(o);
  }
  if (data.observations.empty()) {
    throw DataError("no observations after exclusions");
  }
  impute_sampling_sd(data);
  return data;
}

HierarchyIndex load_hierarchy_csv(const std::filesystem::path& path) {
  auto table = CsvTable::read(path);
  const int col_country = table.require_column("country");
  const int col_subregion = table.require_column("subregion");
  const int col_region = table.require_column("region");
  HierarchyIndex h;
  for (const auto& row : table.rows()) {
    try {
      h.add(row.fields[col_country], row.fields[col_subregion], row.fields[col_region]);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": line " + std::to_string(row.line) + ": " + e.what());
    }
  }
  h.validate();
  return h;
}

McprDataset load_mcpr_csv(const std::filesystem::path& data,
                          const std::optional<std::filesystem::path>& hierarchy) {
  std::optional<HierarchyIndex> h;
  if (hierarchy) h = load_hierarchy_csv(*hierarchy);
  std::ifstream in(data);
  if (!in) {
    throw DataError("cannot open " + data.string());
  }
  try {
    return parse_mcpr_csv(in, h ? &*h : nullptr);
  } catch (const DataError& e) {
    throw DataError(data.string() + ": " + e.what());
  }
}

std::string format_mcpr_csv(const McprDataset& data) {
  std::ostringstream out;
  out << "country,subregion,region,year_start,year_end,value,sampling_sd,source_type\n";
  const auto& h = data.hierarchy;
  for (const auto& o : data.observations) {
    int s = h.subregion_of[o.country];
    out << csv_escape(h.countries[o.country]) << ',' << csv_escape(h.subregions[s]) << ','
        << csv_escape(h.regions[h.region_of[s]]) << ',' << o.year << ',' << o.year << ','
        << format_double(o.value) << ',' << format_double(o.sampling_sd) << ','
        << to_string(data.sources[o.source]) << '\n';
  }
  return out.str();
}

std::vector<TfrSeries> parse_tfr_csv(std::istream& in) {
  auto table = CsvTable::parse(in);
  const int col_country = table.require_column("country");
  const int col_period = table.require_column("period_start_year");
  const int col_tfr = table.require_column("tfr");
  const int col_flag = table.require_column("phase2_flag");

  struct Row {
    int period;
    double tfr;
    bool phase2;
    int line;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> by_country;
  for (const auto& row : table.rows()) {
    const auto& name = row.fields[col_country];
    Row r;
    r.period = static_cast<int>(parse_int(row, col_period, "period_start_year"));
    r.tfr = parse_double(row, col_tfr, "tfr");
    r.phase2 = truthy(row.fields[col_flag]);
    r.line = row.line;
    if (!(r.tfr > 0.0)) {
      throw DataError("line " + std::to_string(row.line) + ": tfr must be positive");
    }
    if (!by_country.count(name)) order.push_back(name);
    by_country[name].push_back(r);
  }

  std::vector<TfrSeries> out;
  for (const auto& name : order) {
    auto rows = by_country[name];
    std::sort(rows.begin(), rows.end(),
              [](const Row& a, const Row& b) { return a.period < b.period; });
    TfrSeries s;
    s.country = name;
    int first = -1, last = -1;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i > 0 && rows[i].period == rows[i - 1].period) {
        throw DataError("line " + std::to_string(rows[i].line) + ": duplicate period for " +
                        name);
      }
      s.period_start.push_back(rows[i].period);
      s.tfr.push_back(rows[i].tfr);
      if (rows[i].phase2) {
        if (first < 0) first = static_cast<int>(i);
        if (last >= 0 && last != static_cast<int>(i) - 1) {
          throw DataError("line " + std::to_string(rows[i].line) +
                          ": Phase II periods must be contiguous for " + name);
        }
        last = static_cast<int>(i);
      }
    }
    if (first < 0) continue;
    s.phase2_start = first;
    s.phase2_end = last;
    out.push_back(std::move(s));
  }
  if (out.empty()) {
    throw DataError("no country has Phase II periods");
  }
  return out;
}

std::vector<TfrSeries> load_tfr_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw DataError("cannot open " + path.string());
  }
  try {
    return parse_tfr_csv(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string format_tfr_csv(const std::vector<TfrSeries>& series) {
  std::ostringstream out;
  out << "country,period_start_year,tfr,phase2_flag\n";
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.tfr.size(); ++i) {
      bool flag = static_cast<int>(i) >= s.phase2_start && static_cast<int>(i) <= s.phase2_end;
      out << csv_escape(s.country) << ',' << s.period_start[i] << ',' << format_double(s.tfr[i])
          << ',' << (flag ? 1 : 0) << '\n';
    }
  }
  return out.str();
}

}  // namespace btm
