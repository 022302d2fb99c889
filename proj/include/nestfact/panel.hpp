#pragma once

// Transaction panel: trips grouped by household-day, with purchases and
// explicit out-of-stock listings, plus encoded household demographics.

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/config.hpp"
#include "nestfact/dates.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/text.hpp"

namespace nestfact {

struct Purchase {
  int item;      // dense UPC index into the hierarchy
  int quantity;  // >= 1
  double price;  // unit price paid
};

struct Trip {
  int household;     // dense household index
  std::int64_t day;  // days since epoch
  int week;
  int weekday;                 // 0=Sun..6=Sat
  std::vector<Purchase> purchases;
  std::vector<int> oos_items;  // items listed out-of-stock on this trip
};

// Raw demographics plus their encoded form. `buckets` keeps the discrete cell
// per dimension (age, gender, marital, income, size) for targeting cells.
struct HouseholdInfo {
  std::vector<double> w;    // fixed-width encoding, w[0] = 1 (intercept)
  std::vector<int> buckets;  // 5 entries
  bool observed = false;     // had a row in the households file
};

struct RejectedRow {
  int line;
  std::string reason;
};

struct TransactionPanel {
  IdTable household_ids;
  std::vector<HouseholdInfo> households;
  std::vector<Trip> trips;  // sorted by (household, day)
  std::vector<RejectedRow> rejected;

  int n_households() const { return household_ids.size(); }
  int covariate_width() const { return households.empty() ? 1 : static_cast<int>(households[0].w.size()); }
};

inline HouseholdInfo encode_household(double age, const std::string& gender,
                                      const std::string& marital, double income, double size,
                                      const CovariateConfig& cfg) {
  HouseholdInfo h;
  h.observed = true;
  h.w.assign(static_cast<std::size_t>(cfg.width()), 0.0);
  h.w[0] = 1.0;
  int pos = 1;
  int age_b = 0;
  for (double bound : cfg.age_buckets) age_b += age >= bound;
  if (age_b > 0) h.w[static_cast<std::size_t>(pos + age_b - 1)] = 1.0;
  pos += static_cast<int>(cfg.age_buckets.size());
  const int gender_b = gender == "F" ? 1 : 0;
  h.w[static_cast<std::size_t>(pos)] = gender_b;
  ++pos;
  const int marital_b = marital == "married" ? 1 : 0;
  h.w[static_cast<std::size_t>(pos)] = marital_b;
  ++pos;
  const int income_b = income >= cfg.income_split ? 1 : 0;
  h.w[static_cast<std::size_t>(pos)] = income_b;
  ++pos;
  int size_b = 0;
  for (double bound : cfg.size_buckets) size_b += size > bound;
  if (size_b > 0) h.w[static_cast<std::size_t>(pos + size_b - 1)] = 1.0;
  h.buckets = {age_b, gender_b, marital_b, income_b, size_b};
  return h;
}

inline HouseholdInfo reference_household(const CovariateConfig& cfg) {
  HouseholdInfo h;
  h.w.assign(static_cast<std::size_t>(cfg.width()), 0.0);
  h.w[0] = 1.0;
  h.buckets = {0, 0, 0, 0, 0};
  return h;
}

// households file: household_id, age, gender, marital_status, income, household_size
inline std::map<std::string, HouseholdInfo> load_households(const std::string& path,
                                                            const CovariateConfig& cfg,
                                                            char sep = ',') {
  auto lines = read_lines(path);
  if (lines.empty()) throw DataError("empty households file " + path);
  auto header = split_fields(lines[0], sep);
  const std::vector<std::string> want = {"household_id", "age",    "gender",
                                         "marital_status", "income", "household_size"};
  if (std::vector<std::string>(header.begin(), header.end()) != want)
    throw DataError("households header must be household_id,age,gender,marital_status,income,household_size");
  std::map<std::string, HouseholdInfo> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const int line_no = static_cast<int>(i) + 1;
    auto f = split_fields(lines[i], sep);
    if (f.size() != 6)
      throw DataError("line " + std::to_string(line_no) + ": expected 6 fields");
    if (out.count(f[0])) throw DataError("line " + std::to_string(line_no) + ": duplicate household " + f[0]);
    out[f[0]] = encode_household(parse_double(f[1], line_no, "age"), f[2], f[3],
                                 parse_double(f[4], line_no, "income"),
                                 parse_double(f[5], line_no, "household_size"), cfg);
  }
  return out;
}

// transactions file: household_id, date, upc, quantity, price, oos_flag.
// Rows with oos_flag=1 are availability signals (quantity must be 0); rows
// referencing UPCs missing from the hierarchy land in the rejection report.
inline TransactionPanel ingest_transactions(const std::string& transactions_path,
                                            const ProductHierarchy& hierarchy,
                                            const PanelConfig& config,
                                            const std::string& households_path = "") {
  auto lines = read_lines(transactions_path);
  if (lines.empty()) throw DataError("empty transactions file " + transactions_path);
  auto header = split_fields(lines[0], config.separator);
  const std::vector<std::string> want = {"household_id", "date", "upc", "quantity", "price", "oos_flag"};
  if (std::vector<std::string>(header.begin(), header.end()) != want)
    throw DataError("transactions header must be household_id,date,upc,quantity,price,oos_flag");

  std::map<std::string, HouseholdInfo> demo;
  if (!households_path.empty()) demo = load_households(households_path, config.covariates, config.separator);

  TransactionPanel panel;
  std::map<std::pair<int, std::int64_t>, std::size_t> trip_index;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const int line_no = static_cast<int>(i) + 1;
    auto f = split_fields(lines[i], config.separator);
    if (f.size() != 6)
      throw DataError("line " + std::to_string(line_no) + ": expected 6 fields, got " +
                      std::to_string(f.size()));
    const std::int64_t day = parse_iso_date(f[1]);
    const int item = hierarchy.upcs.lookup(f[2]);
    if (item < 0) {
      panel.rejected.push_back({line_no, "unknown upc " + f[2]});
      continue;
    }
    const long long qty = parse_int(f[3], line_no, "quantity");
    const long long oos = parse_int(f[5], line_no, "oos_flag");
    const int hh = panel.household_ids.intern(f[0]);
    if (hh == static_cast<int>(panel.households.size())) {
      auto it = demo.find(f[0]);
      panel.households.push_back(it != demo.end() ? it->second
                                                  : reference_household(config.covariates));
    }
    auto key = std::make_pair(hh, day);
    auto [it, inserted] = trip_index.try_emplace(key, panel.trips.size());
    if (inserted) {
      Trip t;
      t.household = hh;
      t.day = day;
      t.week = week_of(day);
      t.weekday = weekday_of(day);
      panel.trips.push_back(std::move(t));
    }
    Trip& trip = panel.trips[it->second];
    if (oos == 1) {
      if (qty != 0)
        throw DataError("line " + std::to_string(line_no) + ": oos row must have quantity 0");
      if (std::find(trip.oos_items.begin(), trip.oos_items.end(), item) == trip.oos_items.end())
        trip.oos_items.push_back(item);
    } else if (oos == 0) {
      if (qty < 1) throw DataError("line " + std::to_string(line_no) + ": quantity must be >= 1");
      const double price = parse_double(f[4], line_no, "price");
      if (!(price > 0.0)) throw DataError("line " + std::to_string(line_no) + ": price must be positive");
      trip.purchases.push_back({item, static_cast<int>(qty), price});
    } else {
      throw DataError("line " + std::to_string(line_no) + ": oos_flag must be 0 or 1");
    }
  }

  std::vector<std::size_t> order(panel.trips.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Trip& ta = panel.trips[a];
    const Trip& tb = panel.trips[b];
    return ta.household != tb.household ? ta.household < tb.household : ta.day < tb.day;
  });
  std::vector<Trip> sorted;
  sorted.reserve(panel.trips.size());
  for (std::size_t i : order) sorted.push_back(std::move(panel.trips[i]));
  panel.trips = std::move(sorted);
  for (Trip& t : panel.trips) std::sort(t.oos_items.begin(), t.oos_items.end());
  return panel;
}

inline void export_panel(const TransactionPanel& panel, const ProductHierarchy& hierarchy,
                         const std::string& path, char sep = ',') {
  std::string out = "household_id";
  for (const char* col : {"date", "upc", "quantity", "price", "oos_flag"}) {
    out += sep;
    out += col;
  }
  out += "\n";
  char buf[64];
  for (const Trip& t : panel.trips) {
    const std::string& hh = panel.household_ids.name(t.household);
    const std::string date = format_iso_date(t.day);
    for (const Purchase& p : t.purchases) {
      std::snprintf(buf, sizeof(buf), "%.2f", p.price);
      out += hh;
      out += sep;
      out += date;
      out += sep;
      out += hierarchy.upcs.name(p.item);
      out += sep;
      out += std::to_string(p.quantity);
      out += sep;
      out += buf;
      out += sep;
      out += "0\n";
    }
    for (int item : t.oos_items) {
      out += hh;
      out += sep;
      out += date;
      out += sep;
      out += hierarchy.upcs.name(item);
      out += sep;
      out += "0";
      out += sep;
      out += "0.00";
      out += sep;
      out += "1\n";
    }
  }
  write_file(path, out);
}

// Only Tue/Wed trips are kept; the 20..300 trip band is measured on all trips
// before the weekday restriction; configured weeks are dropped whole.
inline TransactionPanel restrict_sample(const TransactionPanel& panel, const PanelConfig& config) {
  std::vector<int> trip_count(static_cast<std::size_t>(panel.n_households()), 0);
  for (const Trip& t : panel.trips) ++trip_count[static_cast<std::size_t>(t.household)];

  std::vector<int> excluded = config.exclude_weeks;
  for (const std::string& date : config.exclude_weeks_containing)
    excluded.push_back(week_of(parse_iso_date(date)));
  std::sort(excluded.begin(), excluded.end());

  TransactionPanel out;
  out.rejected = panel.rejected;
  std::vector<int> hh_map(static_cast<std::size_t>(panel.n_households()), -1);
  for (const Trip& t : panel.trips) {
    const int n = trip_count[static_cast<std::size_t>(t.household)];
    if (n < config.min_trips || n > config.max_trips) continue;
    if (t.weekday != kTuesday && t.weekday != kWednesday) continue;
    if (std::binary_search(excluded.begin(), excluded.end(), t.week)) continue;
    int& m = hh_map[static_cast<std::size_t>(t.household)];
    if (m < 0) {
      m = out.household_ids.intern(panel.household_ids.name(t.household));
      out.households.push_back(panel.households[static_cast<std::size_t>(t.household)]);
    }
    Trip copy = t;
    copy.household = m;
    out.trips.push_back(std::move(copy));
  }
  if (out.trips.empty()) throw DataError("empty sample after restriction");
  return out;
}

// One unit kept per (trip, category): a unit is drawn uniformly across the
// category's purchased units, the winning purchase is kept with quantity 1.
// Seeded per (household, day) so the outcome is order-independent.
inline Trip resolve_unit_demand_trip(const Trip& trip, const ProductHierarchy& hierarchy,
                                     std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> by_category;
  for (std::size_t i = 0; i < trip.purchases.size(); ++i)
    by_category[hierarchy.category_of[trip.purchases[i].item]].push_back(i);

  Trip out = trip;
  bool any_multi = false;
  for (auto& [cat, idxs] : by_category) {
    int units = 0;
    for (std::size_t i : idxs) units += trip.purchases[i].quantity;
    if (units > 1) any_multi = true;
  }
  if (!any_multi) {
    return out;
  }
  out.purchases.clear();
  auto rng = make_rng(seed, rng_stream::kUnitDemand,
                      mix64(static_cast<std::uint64_t>(trip.household),
                            static_cast<std::uint64_t>(trip.day)));
  for (auto& [cat, idxs] : by_category) {
    int units = 0;
    for (std::size_t i : idxs) units += trip.purchases[i].quantity;
    if (units == 1) {
      for (std::size_t i : idxs)
        if (trip.purchases[i].quantity == 1) out.purchases.push_back(trip.purchases[i]);
      continue;
    }
    std::uniform_int_distribution<int> pick(0, units - 1);
    int u = pick(rng);
    for (std::size_t i : idxs) {
      if (u < trip.purchases[i].quantity) {
        Purchase kept = trip.purchases[i];
        kept.quantity = 1;
        out.purchases.push_back(kept);
        break;
      }
      u -= trip.purchases[i].quantity;
    }
  }
  return out;
}

inline TransactionPanel resolve_unit_demand(const TransactionPanel& panel,
                                            const ProductHierarchy& hierarchy, std::uint64_t seed) {
  TransactionPanel out = panel;
  for (Trip& t : out.trips) t = resolve_unit_demand_trip(t, hierarchy, seed);
  return out;
}

}  // namespace nestfact
