#pragma once

// Category selection filters and the top-10/pooled catalog. The panel itself
// is never mutated: the catalog is a view describing which categories are
// modeled and how items map to top/pooled slots, which also makes the filter
// pass idempotent (same panel in, same category set out).

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestfact/config.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/math.hpp"
#include "nestfact/panel.hpp"

namespace nestfact {

struct CategoryStats {
  int category = -1;
  int n_items = 0;            // distinct items of the category purchased in the panel
  double multi_item_share = 0.0;  // among trips containing the category
  double multi_top_share = 0.0;
  double avg_abs_price_corr = 0.0;
  int items_with_variation = 0;  // top items with any Tue/Wed price difference
  double best_change_week_share = 0.0;
  double seasonality_score = 0.0;  // mean percentile of top items' Herfindahls
  std::vector<int> top_items;
  std::vector<int> pooled_items;
};

struct FilterDecision {
  CategoryStats stats;
  bool kept = false;
  std::string reason;  // "pass" or the first failing filter
};

// The modeled category set. `slot_of_category[cat]` is -1 for dropped
// categories; `rank_of_item` is the item's position in its category's top
// list, `top_n` when pooled, -1 when the category was dropped.
struct CategoryCatalog {
  int top_n = 10;
  std::vector<int> categories;                // kept category ids, ascending
  std::vector<std::vector<int>> top_items;    // per kept slot, by popularity
  std::vector<std::vector<int>> pooled_items;
  std::vector<int> slot_of_category;
  std::vector<int> rank_of_item;
  double seasonality_cutoff = 0.0;

  int n_kept() const { return static_cast<int>(categories.size()); }
  bool item_in_scope(int item) const { return rank_of_item[static_cast<std::size_t>(item)] >= 0; }
  bool item_is_top(int item) const {
    const int r = rank_of_item[static_cast<std::size_t>(item)];
    return r >= 0 && r < top_n;
  }
};

struct FilterResult {
  CategoryCatalog catalog;
  std::vector<FilterDecision> decisions;  // one per category with panel activity
};

namespace detail {

inline long long price_cents(double p) { return std::llround(p * 100.0); }

}  // namespace detail

inline FilterResult apply_category_filters(const TransactionPanel& panel,
                                           const ProductHierarchy& hierarchy,
                                           const PanelConfig& config) {
  const int n_items = hierarchy.n_items();
  const int n_categories = hierarchy.n_categories();

  // Units purchased per item, and distinct weeks present.
  std::vector<long long> item_units(static_cast<std::size_t>(n_items), 0);
  std::set<int> week_set;
  for (const Trip& t : panel.trips) {
    week_set.insert(t.week);
    for (const Purchase& p : t.purchases) item_units[static_cast<std::size_t>(p.item)] += p.quantity;
  }
  const int n_weeks = static_cast<int>(week_set.size());
  std::map<int, int> week_slot;
  {
    int s = 0;
    for (int w : week_set) week_slot[w] = s++;
  }

  // Modal daily price per (item, session): counts per cent value.
  // session = week_slot * 2 + (weekday == Wednesday)
  std::vector<std::map<int, std::map<long long, int>>> price_counts(
      static_cast<std::size_t>(n_items));
  for (const Trip& t : panel.trips) {
    if (t.weekday != kTuesday && t.weekday != kWednesday) continue;
    const int sess = week_slot[t.week] * 2 + (t.weekday == kWednesday);
    for (const Purchase& p : t.purchases)
      ++price_counts[static_cast<std::size_t>(p.item)][sess][detail::price_cents(p.price)];
  }
  auto modal_price = [&](int item) {
    std::map<int, double> out;
    for (const auto& [sess, counts] : price_counts[static_cast<std::size_t>(item)]) {
      int best_n = -1;
      long long best_c = 0;
      for (const auto& [cents, n] : counts) {
        if (n > best_n || (n == best_n && cents < best_c)) {
          best_n = n;
          best_c = cents;
        }
      }
      out[sess] = static_cast<double>(best_c) / 100.0;
    }
    return out;
  };

  // Daily demand Herfindahl percentile per item (seasonality input).
  std::vector<double> herf(static_cast<std::size_t>(n_items), -1.0);
  {
    std::vector<std::map<std::int64_t, double>> daily(static_cast<std::size_t>(n_items));
    for (const Trip& t : panel.trips)
      for (const Purchase& p : t.purchases)
        daily[static_cast<std::size_t>(p.item)][t.day] += p.quantity;
    std::vector<double> values;
    for (int j = 0; j < n_items; ++j) {
      if (daily[static_cast<std::size_t>(j)].empty()) continue;
      std::vector<double> d;
      d.reserve(daily[static_cast<std::size_t>(j)].size());
      for (const auto& [day, q] : daily[static_cast<std::size_t>(j)]) d.push_back(q);
      herf[static_cast<std::size_t>(j)] = herfindahl(d);
      values.push_back(herf[static_cast<std::size_t>(j)]);
    }
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    for (int j = 0; j < n_items; ++j) {
      double& h = herf[static_cast<std::size_t>(j)];
      if (h < 0.0) continue;
      const auto lo = std::lower_bound(values.begin(), values.end(), h) - values.begin();
      const auto hi = std::upper_bound(values.begin(), values.end(), h) - values.begin();
      h = n > 0 ? (static_cast<double>(lo) + 0.5 * static_cast<double>(hi - lo)) / n : 0.0;
    }
  }

  // Items per category ranked by units, ties by UPC name.
  std::vector<std::vector<int>> cat_items(static_cast<std::size_t>(n_categories));
  for (int j = 0; j < n_items; ++j)
    if (item_units[static_cast<std::size_t>(j)] > 0)
      cat_items[static_cast<std::size_t>(hierarchy.category_of[j])].push_back(j);
  for (auto& items : cat_items) {
    std::sort(items.begin(), items.end(), [&](int a, int b) {
      const auto ua = item_units[static_cast<std::size_t>(a)];
      const auto ub = item_units[static_cast<std::size_t>(b)];
      return ua != ub ? ua > ub : hierarchy.upcs.name(a) < hierarchy.upcs.name(b);
    });
  }

  FilterResult result;
  std::vector<CategoryStats> all_stats;
  std::vector<std::string> fail_reason(static_cast<std::size_t>(n_categories));
  for (int c = 0; c < n_categories; ++c) {
    const auto& items = cat_items[static_cast<std::size_t>(c)];
    if (items.empty()) continue;  // no activity in this panel; not reported
    CategoryStats s;
    s.category = c;
    s.n_items = static_cast<int>(items.size());
    const int k = std::min<int>(config.top_n, s.n_items);
    s.top_items.assign(items.begin(), items.begin() + k);
    s.pooled_items.assign(items.begin() + k, items.end());

    std::vector<std::uint8_t> is_top(static_cast<std::size_t>(n_items), 0);
    for (int j : s.top_items) is_top[static_cast<std::size_t>(j)] = 1;

    long long trips_with_cat = 0, multi = 0, multi_top = 0;
    for (const Trip& t : panel.trips) {
      int units = 0, top_units = 0;
      for (const Purchase& p : t.purchases) {
        if (hierarchy.category_of[p.item] != c) continue;
        units += p.quantity;
        if (is_top[static_cast<std::size_t>(p.item)]) top_units += p.quantity;
      }
      if (units == 0) continue;
      ++trips_with_cat;
      multi += units > 1;
      multi_top += top_units > 1;
    }
    if (trips_with_cat > 0) {
      s.multi_item_share = static_cast<double>(multi) / static_cast<double>(trips_with_cat);
      s.multi_top_share = static_cast<double>(multi_top) / static_cast<double>(trips_with_cat);
    }

    // Pairwise |corr| of top items' session prices on overlapping sessions.
    std::vector<std::map<int, double>> series;
    series.reserve(s.top_items.size());
    for (int j : s.top_items) series.push_back(modal_price(j));
    double corr_sum = 0.0;
    int corr_n = 0;
    for (std::size_t a = 0; a < series.size(); ++a) {
      for (std::size_t b = a + 1; b < series.size(); ++b) {
        std::vector<double> xa, xb;
        for (const auto& [sess, pa] : series[a]) {
          auto it = series[b].find(sess);
          if (it != series[b].end()) {
            xa.push_back(pa);
            xb.push_back(it->second);
          }
        }
        if (xa.size() < 3) continue;
        corr_sum += std::abs(pearson_correlation(xa, xb));
        ++corr_n;
      }
    }
    s.avg_abs_price_corr = corr_n > 0 ? corr_sum / corr_n : 0.0;

    // Tue->Wed variation and 10-cent change weeks among top items.
    for (std::size_t a = 0; a < series.size(); ++a) {
      bool varies = false;
      int change_weeks = 0;
      for (const auto& [sess, p_tue] : series[a]) {
        if (sess % 2 != 0) continue;
        auto it = series[a].find(sess + 1);
        if (it == series[a].end()) continue;
        const double diff = std::abs(it->second - p_tue);
        if (diff > 0.005) varies = true;
        if (diff >= config.price_change_min - 1e-9) ++change_weeks;
      }
      s.items_with_variation += varies;
      if (n_weeks > 0)
        s.best_change_week_share = std::max(
            s.best_change_week_share, static_cast<double>(change_weeks) / n_weeks);
    }

    double pct_sum = 0.0;
    for (int j : s.top_items) pct_sum += herf[static_cast<std::size_t>(j)];
    s.seasonality_score = s.top_items.empty() ? 0.0 : pct_sum / static_cast<double>(s.top_items.size());

    std::string reason;
    if (s.n_items < 2)
      reason = "fewer than 2 items";
    else if (s.multi_item_share > config.multi_item_share_max)
      reason = "multi-item trip share above threshold";
    else if (s.multi_top_share > config.multi_top_share_max)
      reason = "multiple-top-item trip share above threshold";
    else if (s.avg_abs_price_corr > config.price_corr_max)
      reason = "average absolute price correlation above threshold";
    else if (s.items_with_variation < config.min_items_with_variation)
      reason = "too few items with Tue-Wed price variation";
    else if (s.best_change_week_share < config.price_change_week_share - 1e-12)
      reason = "no item with large price changes in enough weeks";
    fail_reason[static_cast<std::size_t>(c)] = reason;
    all_stats.push_back(std::move(s));
  }

  // Seasonality: drop the bottom fraction (by score, ties by category id)
  // among categories that pass the absolute filters.
  std::vector<std::size_t> passing;
  for (std::size_t i = 0; i < all_stats.size(); ++i)
    if (fail_reason[static_cast<std::size_t>(all_stats[i].category)].empty()) passing.push_back(i);
  std::sort(passing.begin(), passing.end(), [&](std::size_t a, std::size_t b) {
    const double sa = all_stats[a].seasonality_score;
    const double sb = all_stats[b].seasonality_score;
    return sa != sb ? sa < sb : all_stats[a].category < all_stats[b].category;
  });
  const std::size_t n_drop = static_cast<std::size_t>(
      std::floor(config.seasonality_drop_fraction * static_cast<double>(passing.size())));
  for (std::size_t i = 0; i < n_drop; ++i)
    fail_reason[static_cast<std::size_t>(all_stats[passing[i]].category)] =
        "seasonality score in bottom fraction";
  result.catalog.seasonality_cutoff =
      n_drop < passing.size() && n_drop > 0 ? all_stats[passing[n_drop]].seasonality_score : 0.0;

  result.catalog.top_n = config.top_n;
  result.catalog.slot_of_category.assign(static_cast<std::size_t>(n_categories), -1);
  result.catalog.rank_of_item.assign(static_cast<std::size_t>(n_items), -1);
  for (CategoryStats& s : all_stats) {
    FilterDecision d;
    d.kept = fail_reason[static_cast<std::size_t>(s.category)].empty();
    d.reason = d.kept ? "pass" : fail_reason[static_cast<std::size_t>(s.category)];
    if (d.kept) {
      const int slot = result.catalog.n_kept();
      result.catalog.categories.push_back(s.category);
      result.catalog.slot_of_category[static_cast<std::size_t>(s.category)] = slot;
      for (std::size_t r = 0; r < s.top_items.size(); ++r)
        result.catalog.rank_of_item[static_cast<std::size_t>(s.top_items[r])] = static_cast<int>(r);
      for (int j : s.pooled_items)
        result.catalog.rank_of_item[static_cast<std::size_t>(j)] = config.top_n;
      result.catalog.top_items.push_back(s.top_items);
      result.catalog.pooled_items.push_back(s.pooled_items);
    }
    d.stats = std::move(s);
    result.decisions.push_back(std::move(d));
  }
  return result;
}

inline Json filter_log_json(const FilterResult& result, const ProductHierarchy& hierarchy) {
  Json out = Json::array();
  for (const FilterDecision& d : result.decisions) {
    Json j;
    j["category"] = hierarchy.categories.name(d.stats.category);
    j["kept"] = d.kept;
    j["reason"] = d.reason;
    j["n_items"] = d.stats.n_items;
    j["multi_item_share"] = d.stats.multi_item_share;
    j["multi_top_share"] = d.stats.multi_top_share;
    j["avg_abs_price_corr"] = d.stats.avg_abs_price_corr;
    j["items_with_variation"] = d.stats.items_with_variation;
    j["best_change_week_share"] = d.stats.best_change_week_share;
    j["seasonality_score"] = d.stats.seasonality_score;
    Json top = Json::array();
    for (int item : d.stats.top_items) top.push_back(hierarchy.upcs.name(item));
    j["top_items"] = top;
    j["n_pooled_items"] = static_cast<int>(d.stats.pooled_items.size());
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace nestfact
