#pragma once

// Declarative run configuration, read from JSON. Every knob has a default so
// a minimal config file is `{}`; unknown keys are rejected to catch typos.

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/text.hpp"

namespace nestfact {

using Json = nlohmann::json;

// Demographic bucket boundaries. Encoding is one-hot with the first bucket as
// the dropped reference, preceded by a constant intercept column:
//   w = [1, age in bucket 2..n, gender==F, marital==married,
//        income >= income_split, size in bucket 2..n]
struct CovariateConfig {
  std::vector<double> age_buckets = {35.0, 50.0, 65.0};  // boundaries; k bounds -> k+1 buckets
  double income_split = 50000.0;
  std::vector<double> size_buckets = {1.0, 2.0};  // household size boundaries

  int width() const {
    return 1 + static_cast<int>(age_buckets.size()) + 3 + static_cast<int>(size_buckets.size());
  }
};

struct PanelConfig {
  char separator = ',';
  int min_trips = 20;
  int max_trips = 300;
  std::vector<int> exclude_weeks;
  std::vector<std::string> exclude_weeks_containing;  // ISO dates; the whole week is dropped

  // Category filters.
  int top_n = 10;
  double multi_item_share_max = 0.15;
  double multi_top_share_max = 0.10;
  double price_corr_max = 0.75;
  int min_items_with_variation = 2;
  double price_change_min = 0.10;
  double price_change_week_share = 0.10;
  double seasonality_drop_fraction = 0.15;

  // Availability.
  double oos_trip_share = 0.75;

  // Holdout.
  double validation_fraction = 0.10;
  double test_fraction = 0.10;
  double validation_price_change_boost = 3.0;

  CovariateConfig covariates;
};

namespace detail {

inline void expect_keys(const Json& j, std::initializer_list<const char*> allowed,
                        const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline PanelConfig parse_panel_config(const Json& j) {
  PanelConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("panel config must be a JSON object");
  detail::expect_keys(j,
                      {"separator", "min_trips", "max_trips", "exclude_weeks",
                       "exclude_weeks_containing", "top_n", "multi_item_share_max",
                       "multi_top_share_max", "price_corr_max", "min_items_with_variation",
                       "price_change_min", "price_change_week_share", "seasonality_drop_fraction",
                       "oos_trip_share", "validation_fraction", "test_fraction",
                       "validation_price_change_boost", "covariates"},
                      "panel config");
  if (j.contains("separator")) {
    std::string s = j["separator"].get<std::string>();
    if (s.size() != 1) throw ConfigError("separator must be a single character");
    c.separator = s[0];
  }
  if (j.contains("min_trips")) c.min_trips = j["min_trips"].get<int>();
  if (j.contains("max_trips")) c.max_trips = j["max_trips"].get<int>();
  if (c.min_trips < 0 || c.max_trips < c.min_trips) throw ConfigError("bad trip band");
  if (j.contains("exclude_weeks")) c.exclude_weeks = j["exclude_weeks"].get<std::vector<int>>();
  if (j.contains("exclude_weeks_containing"))
    c.exclude_weeks_containing = j["exclude_weeks_containing"].get<std::vector<std::string>>();
  if (j.contains("top_n")) c.top_n = j["top_n"].get<int>();
  if (c.top_n < 1) throw ConfigError("top_n must be >= 1");
  if (j.contains("multi_item_share_max")) c.multi_item_share_max = j["multi_item_share_max"].get<double>();
  if (j.contains("multi_top_share_max")) c.multi_top_share_max = j["multi_top_share_max"].get<double>();
  if (j.contains("price_corr_max")) c.price_corr_max = j["price_corr_max"].get<double>();
  if (j.contains("min_items_with_variation"))
    c.min_items_with_variation = j["min_items_with_variation"].get<int>();
  if (j.contains("price_change_min")) c.price_change_min = j["price_change_min"].get<double>();
  if (j.contains("price_change_week_share"))
    c.price_change_week_share = j["price_change_week_share"].get<double>();
  if (j.contains("seasonality_drop_fraction"))
    c.seasonality_drop_fraction = j["seasonality_drop_fraction"].get<double>();
  if (c.seasonality_drop_fraction < 0.0 || c.seasonality_drop_fraction >= 1.0)
    throw ConfigError("seasonality_drop_fraction must be in [0,1)");
  if (j.contains("oos_trip_share")) c.oos_trip_share = j["oos_trip_share"].get<double>();
  if (j.contains("validation_fraction")) c.validation_fraction = j["validation_fraction"].get<double>();
  if (j.contains("test_fraction")) c.test_fraction = j["test_fraction"].get<double>();
  if (c.validation_fraction < 0.0 || c.test_fraction < 0.0 ||
      c.validation_fraction + c.test_fraction >= 1.0)
    throw ConfigError("validation+test fractions must sum to less than 1");
  if (j.contains("validation_price_change_boost"))
    c.validation_price_change_boost = j["validation_price_change_boost"].get<double>();
  if (j.contains("covariates")) {
    const Json& cov = j["covariates"];
    detail::expect_keys(cov, {"age_buckets", "income_split", "size_buckets"}, "covariates");
    if (cov.contains("age_buckets")) c.covariates.age_buckets = cov["age_buckets"].get<std::vector<double>>();
    if (cov.contains("income_split")) c.covariates.income_split = cov["income_split"].get<double>();
    if (cov.contains("size_buckets")) c.covariates.size_buckets = cov["size_buckets"].get<std::vector<double>>();
  }
  return c;
}

inline PanelConfig load_panel_config(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  return parse_panel_config(j);
}

}  // namespace nestfact
