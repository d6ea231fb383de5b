#pragma once

// Survey observations, the country/subregion/region hierarchy, and loaders
// for the mCPR and TFR input files.

#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace btm {

enum class SourceType { DHS, PMA, MICS, National, Other };

std::optional<SourceType> parse_source_type(std::string_view name);
std::string_view to_string(SourceType type);

// Country -> subregion -> region. Indices are positions in the name lists.
struct HierarchyIndex {
  std::vector<std::string> countries;
  std::vector<std::string> subregions;
  std::vector<std::string> regions;
  std::vector<int> subregion_of;  // per country
  std::vector<int> region_of;     // per subregion

  int num_countries() const { return static_cast<int>(countries.size()); }
  int num_subregions() const { return static_cast<int>(subregions.size()); }
  int num_regions() const { return static_cast<int>(regions.size()); }
  int region_of_country(int c) const { return region_of[subregion_of[c]]; }

  std::optional<int> country_index(std::string_view name) const;

  // Adds a country (and its subregion/region if new); throws DataError when
  // the country or subregion was already registered under a different parent.
  int add(const std::string& country, const std::string& subregion,
          const std::string& region);

  void validate() const;
};

struct Observation {
  int country = 0;
  int year = 0;
  double value = 0.0;
  double sampling_sd = 0.0;
  int source = 0;  // index into McprDataset::sources
  bool sd_imputed = false;
};

struct McprDataset {
  HierarchyIndex hierarchy;
  std::vector<Observation> observations;
  std::vector<SourceType> sources;  // distinct source types, first-seen order
  int num_excluded = 0;
  int num_imputed = 0;

  int num_sources() const { return static_cast<int>(sources.size()); }
};

// Observation year: midpoint of the survey period, rounded down.
int survey_year(double year_start, double year_end);

// Fills missing or zero sampling SDs with the largest SD among observations
// of the same source type, falling back to the largest SD overall.
void impute_sampling_sd(McprDataset& data);

// Columns: country, subregion, region, year_start, year_end, value,
// sampling_sd, source_type, and optionally exclude. A hierarchy table with
// columns country, subregion, region may pre-register countries.
McprDataset parse_mcpr_csv(std::istream& in, const HierarchyIndex* hierarchy = nullptr);
McprDataset load_mcpr_csv(const std::filesystem::path& data,
                          const std::optional<std::filesystem::path>& hierarchy = std::nullopt);

HierarchyIndex load_hierarchy_csv(const std::filesystem::path& path);

// Serializes observations in the loader's format (year_start = year_end).
std::string format_mcpr_csv(const McprDataset& data);

struct TfrSeries {
  std::string country;
  std::vector<int> period_start;  // 5-year period start years, ascending
  std::vector<double> tfr;
  int phase2_start = 0;  // index of the first Phase II period
  int phase2_end = 0;    // index of the last Phase II period (inclusive)

  int phase2_length() const { return phase2_end - phase2_start + 1; }
  double reference_level() const { return tfr[phase2_start]; }
};

// Columns: country, period_start_year, tfr, phase2_flag. Countries without
// flagged periods are dropped.
std::vector<TfrSeries> parse_tfr_csv(std::istream& in);
std::vector<TfrSeries> load_tfr_csv(const std::filesystem::path& path);

std::string format_tfr_csv(const std::vector<TfrSeries>& series);

}  // namespace btm
