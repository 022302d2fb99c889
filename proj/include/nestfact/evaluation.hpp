#pragma once
// Heldout evaluation on a shared observation universe. Every model is scored
// on the same (trip, kept category) cells; the per-item predictions are
// coarsened onto the catalog's alternatives (top items, one pooled tail, an
// outside option) so factorized and discrete-choice models stay comparable.
//
// Beyond predictive fit and per-category rankings, this header carries the
// quasi-experimental machinery: Tuesday/Wednesday event extraction, Skellam
// and Bernoulli event likelihoods, personalization diagnostics, never-buyer
// decile curves, finite-difference price elasticities with summary contrasts
// by product class, and the elasticity-tercile demand validation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/dates.hpp"
#include "nestfact/demand_model.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/math.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/session_grid.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

inline constexpr double kProbClip = 1e-12;   // floor for log-likelihood terms
inline constexpr double kRateClip = 1e-8;    // floor for Skellam intensities

// ---- Evaluation universe ----------------------------------------------------

struct EvalCell {
  std::int32_t household = 0;
  std::int32_t slot = 0;
  std::int32_t session = 0;
  std::int32_t chosen = 0;  // alternative index; the outside option is last
};

// Shared observation set plus the catalog geometry needed to score it.
struct EvalDataset {
  const ProductHierarchy* hierarchy = nullptr;
  const CategoryCatalog* catalog = nullptr;
  const SessionGrid* grid = nullptr;
  std::vector<std::vector<int>> items;  // modeled items per slot, ascending ids
  std::vector<EvalCell> cells;          // panel order: household runs, then day

  int n_top(int slot) const {
    return static_cast<int>(catalog->top_items[static_cast<std::size_t>(slot)].size());
  }
  bool has_pooled(int slot) const {
    return !catalog->pooled_items[static_cast<std::size_t>(slot)].empty();
  }
  int n_inside(int slot) const { return n_top(slot) + (has_pooled(slot) ? 1 : 0); }
  int outside_alt(int slot) const { return n_inside(slot); }
  int n_alts(int slot) const { return n_inside(slot) + 1; }
  // Catalog rank to alternative: top ranks map to themselves, pooled members
  // collapse onto the single pooled alternative.
  int alt_of_rank(int slot, int rank) const { return rank < n_top(slot) ? rank : n_top(slot); }
};

inline EvalDataset build_eval_dataset(const TransactionPanel& panel,
                                      const ProductHierarchy& hierarchy,
                                      const CategoryCatalog& catalog, const SessionGrid& grid,
                                      const SampleSplit& split, SplitBucket bucket) {
  EvalDataset ds;
  ds.hierarchy = &hierarchy;
  ds.catalog = &catalog;
  ds.grid = &grid;
  ds.items = modeled_items(catalog);
  const int n_slots = catalog.n_kept();
  std::vector<int> chosen(static_cast<std::size_t>(n_slots));
  for (const Trip& t : panel.trips) {
    if (split.of(t.household, t.week) != bucket) continue;
    const int ws = grid.week_slot(t.week);
    if (ws < 0) continue;
    const int session = grid.session(ws, t.weekday == kWednesday ? 1 : 0);
    for (int s = 0; s < n_slots; ++s)
      chosen[static_cast<std::size_t>(s)] = ds.outside_alt(s);
    for (const Purchase& p : t.purchases) {
      const int r = catalog.rank_of_item[static_cast<std::size_t>(p.item)];
      if (r < 0) continue;
      const int c = hierarchy.category_of[static_cast<std::size_t>(p.item)];
      const int s = catalog.slot_of_category[static_cast<std::size_t>(c)];
      if (s < 0) continue;
      chosen[static_cast<std::size_t>(s)] = ds.alt_of_rank(s, r);
    }
    for (int s = 0; s < n_slots; ++s)
      ds.cells.push_back({t.household, s, session, chosen[static_cast<std::size_t>(s)]});
  }
  return ds;
}

// ---- Predictions --------------------------------------------------------------

struct PredictionTable {
  std::string model;
  std::vector<std::size_t> offset;  // cells + 1 entries
  std::vector<double> value;

  std::span<const double> row(std::size_t cell) const {
    return {value.data() + offset[cell], offset[cell + 1] - offset[cell]};
  }
};

// Scores every cell at the grid's prices and availability and coarsens the
// per-item probabilities onto the catalog alternatives (pooled members sum).
inline PredictionTable predict_table(const DemandModel& model, const EvalDataset& ds) {
  PredictionTable t;
  t.model = model.name();
  const int n_slots = ds.catalog->n_kept();

  // Position -> alternative map per slot, plus scratch buffers.
  std::vector<std::vector<int>> alt_of_pos(static_cast<std::size_t>(n_slots));
  for (int s = 0; s < n_slots; ++s) {
    const auto& items = ds.items[static_cast<std::size_t>(s)];
    auto& m = alt_of_pos[static_cast<std::size_t>(s)];
    m.resize(items.size());
    for (std::size_t k = 0; k < items.size(); ++k)
      m[k] = ds.alt_of_rank(s, ds.catalog->rank_of_item[static_cast<std::size_t>(items[k])]);
  }

  t.offset.reserve(ds.cells.size() + 1);
  t.offset.push_back(0);
  std::vector<double> price, probs;
  std::vector<std::uint8_t> avail;
  for (const EvalCell& cell : ds.cells) {
    const auto& items = ds.items[static_cast<std::size_t>(cell.slot)];
    price.resize(items.size());
    avail.resize(items.size());
    probs.assign(items.size() + 1, 0.0);
    for (std::size_t k = 0; k < items.size(); ++k) {
      price[k] = ds.grid->price(items[k], cell.session);
      avail[k] = ds.grid->is_available(items[k], cell.session) ? 1 : 0;
    }
    model.category_probs(cell.household, cell.slot, cell.session, items, price, avail, probs);
    const std::size_t base = t.value.size();
    t.value.resize(base + static_cast<std::size_t>(ds.n_alts(cell.slot)), 0.0);
    const auto& m = alt_of_pos[static_cast<std::size_t>(cell.slot)];
    for (std::size_t k = 0; k < items.size(); ++k)
      t.value[base + static_cast<std::size_t>(m[k])] += probs[k];
    t.value[base + static_cast<std::size_t>(ds.outside_alt(cell.slot))] = probs[items.size()];
    t.offset.push_back(t.value.size());
  }
  return t;
}

// ---- Predictive fit -----------------------------------------------------------

struct CategoryFit {
  int slot = -1;
  std::int64_t cells = 0, purchases = 0, clipped = 0;
  double ll_sum = 0.0, se_sum = 0.0;

  double mean_ll() const {
    return purchases > 0 ? ll_sum / static_cast<double>(purchases)
                         : std::numeric_limits<double>::quiet_NaN();
  }
  double mean_mse() const {
    return purchases > 0 ? se_sum / static_cast<double>(purchases)
                         : std::numeric_limits<double>::quiet_NaN();
  }
};

struct FitReport {
  std::string model;
  double mean_ll = std::numeric_limits<double>::quiet_NaN();
  double mean_mse = std::numeric_limits<double>::quiet_NaN();
  std::int64_t cells = 0, purchases = 0, clipped = 0;
  std::vector<CategoryFit> by_slot;
};

// Mean log likelihood and mean squared error, both normalized by the number
// of purchases (cells whose chosen alternative is inside). Probabilities
// below the clip floor enter as the floor and are counted.
inline FitReport predictive_fit(const PredictionTable& preds, const EvalDataset& ds) {
  if (preds.offset.size() != ds.cells.size() + 1)
    throw ConfigError("prediction table does not match the evaluation set");
  FitReport r;
  r.model = preds.model;
  r.by_slot.resize(static_cast<std::size_t>(ds.catalog->n_kept()));
  for (int s = 0; s < ds.catalog->n_kept(); ++s) r.by_slot[static_cast<std::size_t>(s)].slot = s;

  for (std::size_t i = 0; i < ds.cells.size(); ++i) {
    const EvalCell& cell = ds.cells[i];
    CategoryFit& cf = r.by_slot[static_cast<std::size_t>(cell.slot)];
    const auto row = preds.row(i);
    ++cf.cells;
    if (cell.chosen != ds.outside_alt(cell.slot)) ++cf.purchases;
    double p = row[static_cast<std::size_t>(cell.chosen)];
    if (p < kProbClip) {
      p = kProbClip;
      ++cf.clipped;
    }
    cf.ll_sum += std::log(p);
    for (std::size_t a = 0; a < row.size(); ++a) {
      const double y = static_cast<std::size_t>(cell.chosen) == a ? 1.0 : 0.0;
      cf.se_sum += (y - row[a]) * (y - row[a]);
    }
  }
  double ll = 0.0, se = 0.0;
  for (const CategoryFit& cf : r.by_slot) {
    r.cells += cf.cells;
    r.purchases += cf.purchases;
    r.clipped += cf.clipped;
    ll += cf.ll_sum;
    se += cf.se_sum;
  }
  if (r.purchases > 0) {
    r.mean_ll = ll / static_cast<double>(r.purchases);
    r.mean_mse = se / static_cast<double>(r.purchases);
  }
  return r;
}

// ---- Per-category model ranking ----------------------------------------------

struct ModelRanks {
  std::string model;
  std::vector<double> rank_ll, rank_mse;  // per slot; NaN where the category was skipped
  double mean_rank_ll = std::numeric_limits<double>::quiet_NaN();
  double mean_rank_mse = std::numeric_limits<double>::quiet_NaN();
  double pct_best_ll = std::numeric_limits<double>::quiet_NaN();
  double pct_best_mse = std::numeric_limits<double>::quiet_NaN();
};

struct RankTable {
  std::vector<ModelRanks> models;
  int n_ranked = 0, n_skipped = 0;  // categories with and without purchases
};

namespace eval_detail {

// Average ranks (1 = best); exact ties share the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> value, bool higher_better) {
  const std::size_t n = value.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return higher_better ? value[a] > value[b] : value[a] < value[b];
  });
  std::vector<double> rank(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && value[order[j + 1]] == value[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = shared;
    i = j + 1;
  }
  return rank;
}

}  // namespace eval_detail

// Ranks models within each category by heldout mean log likelihood and mean
// squared error. All reports must come from the same evaluation set;
// categories without a single purchase are skipped.
inline RankTable rank_models_by_category(std::span<const FitReport> reports) {
  if (reports.size() < 2) throw ConfigError("ranking needs at least two models");
  const std::size_t n_slots = reports[0].by_slot.size();
  for (const FitReport& r : reports) {
    if (r.by_slot.size() != n_slots)
      throw ConfigError("fit reports cover different category sets");
    for (std::size_t s = 0; s < n_slots; ++s)
      if (r.by_slot[s].cells != reports[0].by_slot[s].cells ||
          r.by_slot[s].purchases != reports[0].by_slot[s].purchases)
        throw ConfigError("fit reports were not computed on identical observations");
  }

  RankTable table;
  table.models.resize(reports.size());
  for (std::size_t m = 0; m < reports.size(); ++m) {
    table.models[m].model = reports[m].model;
    table.models[m].rank_ll.assign(n_slots, std::numeric_limits<double>::quiet_NaN());
    table.models[m].rank_mse.assign(n_slots, std::numeric_limits<double>::quiet_NaN());
  }

  std::vector<double> ll(reports.size()), mse(reports.size());
  std::vector<double> sum_ll(reports.size(), 0.0), sum_mse(reports.size(), 0.0);
  std::vector<int> best_ll(reports.size(), 0), best_mse(reports.size(), 0);
  for (std::size_t s = 0; s < n_slots; ++s) {
    if (reports[0].by_slot[s].purchases == 0) {
      ++table.n_skipped;
      continue;
    }
    for (std::size_t m = 0; m < reports.size(); ++m) {
      ll[m] = reports[m].by_slot[s].mean_ll();
      mse[m] = reports[m].by_slot[s].mean_mse();
    }
    const auto r_ll = eval_detail::average_ranks(ll, true);
    const auto r_mse = eval_detail::average_ranks(mse, false);
    const double best_ll_v = *std::max_element(ll.begin(), ll.end());
    const double best_mse_v = *std::min_element(mse.begin(), mse.end());
    for (std::size_t m = 0; m < reports.size(); ++m) {
      table.models[m].rank_ll[s] = r_ll[m];
      table.models[m].rank_mse[s] = r_mse[m];
      sum_ll[m] += r_ll[m];
      sum_mse[m] += r_mse[m];
      if (ll[m] == best_ll_v) ++best_ll[m];
      if (mse[m] == best_mse_v) ++best_mse[m];
    }
    ++table.n_ranked;
  }
  if (table.n_ranked > 0) {
    for (std::size_t m = 0; m < reports.size(); ++m) {
      table.models[m].mean_rank_ll = sum_ll[m] / table.n_ranked;
      table.models[m].mean_rank_mse = sum_mse[m] / table.n_ranked;
      table.models[m].pct_best_ll = 100.0 * best_ll[m] / table.n_ranked;
      table.models[m].pct_best_mse = 100.0 * best_mse[m] / table.n_ranked;
    }
  }
  return table;
}

// ---- Tuesday/Wednesday events --------------------------------------------------

enum class EventType { OwnPrice = 0, CrossPrice = 1, StockOut = 2, AllWeeks = 3 };

struct Event {
  EventType type = EventType::OwnPrice;
  int item = -1;       // focal top item
  int slot = -1;
  int week_slot = -1;
  double magnitude = 0.0;  // own: price change in dollars; cross: largest
                           // other-item change; stock-out: switch count
};

namespace eval_detail {

inline long long cents(double price) { return std::llround(price * 100.0); }

}  // namespace eval_detail

// Deterministic scan of the session grid for midweek events. Focal items are
// the catalog's top items. Own-price events need at least a ten-cent change;
// cross-price and stock-out events require the focal item's own price to be
// unchanged that week; every event requires the focal item to be available
// on both days.
inline std::vector<Event> extract_events(const SessionGrid& grid, const CategoryCatalog& catalog) {
  std::vector<Event> events;
  const auto items = modeled_items(catalog);
  for (int s = 0; s < catalog.n_kept(); ++s) {
    for (int u : catalog.top_items[static_cast<std::size_t>(s)]) {
      for (int ws = 0; ws < grid.n_weeks(); ++ws) {
        const int tue = grid.session(ws, 0), wed = grid.session(ws, 1);
        if (!grid.is_available(u, tue) || !grid.is_available(u, wed)) continue;
        const long long own =
            eval_detail::cents(grid.price(u, wed)) - eval_detail::cents(grid.price(u, tue));
        if (std::llabs(own) >= 10) {
          events.push_back({EventType::OwnPrice, u, s, ws, static_cast<double>(own) / 100.0});
          continue;
        }
        if (own != 0) continue;  // sub-threshold own change blocks other event types
        long long cross = 0;
        int switches = 0;
        for (int v : items[static_cast<std::size_t>(s)]) {
          if (v == u) continue;
          const long long dv =
              eval_detail::cents(grid.price(v, wed)) - eval_detail::cents(grid.price(v, tue));
          if (std::llabs(dv) > std::llabs(cross)) cross = dv;
          if (grid.is_available(v, tue) != grid.is_available(v, wed)) ++switches;
        }
        if (cross != 0)
          events.push_back({EventType::CrossPrice, u, s, ws, static_cast<double>(cross) / 100.0});
        if (switches > 0)
          events.push_back({EventType::StockOut, u, s, ws, static_cast<double>(switches)});
      }
    }
  }
  return events;
}

// Benchmark set covering every focal-available week, for the all-weeks rows
// of the event tables.
inline std::vector<Event> all_weeks_events(const SessionGrid& grid,
                                           const CategoryCatalog& catalog) {
  std::vector<Event> events;
  for (int s = 0; s < catalog.n_kept(); ++s)
    for (int u : catalog.top_items[static_cast<std::size_t>(s)])
      for (int ws = 0; ws < grid.n_weeks(); ++ws)
        if (grid.is_available(u, grid.session(ws, 0)) &&
            grid.is_available(u, grid.session(ws, 1)))
          events.push_back({EventType::AllWeeks, u, s, ws, 0.0});
  return events;
}

// Mean units sold per grid day in the training split, per item. Splits items
// into the popular and less-common halves of the event likelihood tables.
inline std::vector<double> item_daily_purchase_rate(const TransactionPanel& panel,
                                                    const SampleSplit& split,
                                                    const SessionGrid& grid, int n_items) {
  std::vector<double> rate(static_cast<std::size_t>(n_items), 0.0);
  for (const Trip& t : panel.trips) {
    if (split.of(t.household, t.week) != SplitBucket::Train) continue;
    if (grid.week_slot(t.week) < 0) continue;
    for (const Purchase& p : t.purchases)
      rate[static_cast<std::size_t>(p.item)] += static_cast<double>(p.quantity);
  }
  const double days = 2.0 * static_cast<double>(grid.n_weeks());
  for (double& v : rate) v /= days;
  return rate;
}

// ---- Event likelihoods ----------------------------------------------------------

struct EventLikelihoodOptions {
  double popular_daily_rate = 2.5;  // units per day at or above which the
                                    // Skellam aggregate applies
  int bootstrap = 1000;
  std::uint64_t seed = 1;
};

struct EventBucket {
  EventType type = EventType::OwnPrice;
  bool popular = false;
  std::int64_t n_events = 0, n_obs = 0, skipped = 0, clipped = 0;
  double individual_ll = std::numeric_limits<double>::quiet_NaN();
  double individual_se = std::numeric_limits<double>::quiet_NaN();
  double aggregate_ll = std::numeric_limits<double>::quiet_NaN();
  double aggregate_se = std::numeric_limits<double>::quiet_NaN();
};

struct EventReport {
  std::string model;
  std::array<EventBucket, 8> buckets;  // type-major, popular before less common

  const EventBucket& bucket(EventType type, bool popular) const {
    return buckets[static_cast<std::size_t>(type) * 2 + (popular ? 0 : 1)];
  }
};

// Scores the model's predictions over event weeks. The individual measure is
// the mean Bernoulli log likelihood of the focal item's purchase indicator
// across the event weeks' trips. The aggregate measure follows the focal
// item's popularity: a Skellam likelihood of the Wednesday-minus-Tuesday
// count (intensities are summed predictions per day) for popular items, a
// Bernoulli likelihood of any purchase during the week otherwise. Standard
// errors come from resampling events with replacement. Event weeks without
// test shoppers on both days are skipped and counted.
inline EventReport counterfactual_event_likelihood(const PredictionTable& preds,
                                                   const EvalDataset& ds,
                                                   std::span<const Event> events,
                                                   std::span<const double> daily_rate,
                                                   const EventLikelihoodOptions& opts = {}) {
  if (preds.offset.size() != ds.cells.size() + 1)
    throw ConfigError("prediction table does not match the evaluation set");
  EventReport report;
  report.model = preds.model;
  for (int t = 0; t < 4; ++t)
    for (int pop = 0; pop < 2; ++pop) {
      auto& b = report.buckets[static_cast<std::size_t>(t) * 2 + static_cast<std::size_t>(pop)];
      b.type = static_cast<EventType>(t);
      b.popular = pop == 0;
    }

  // Cells grouped by (slot, session).
  const int n_sessions = ds.grid->n_sessions();
  std::vector<std::vector<std::uint32_t>> by_cell(
      static_cast<std::size_t>(ds.catalog->n_kept()) * static_cast<std::size_t>(n_sessions));
  for (std::size_t i = 0; i < ds.cells.size(); ++i)
    by_cell[static_cast<std::size_t>(ds.cells[i].slot) * n_sessions + ds.cells[i].session]
        .push_back(static_cast<std::uint32_t>(i));

  struct EventStat {
    std::int64_t n_obs = 0;
    double ll_ind = 0.0;  // summed over observations
    double ll_agg = 0.0;  // one term per event
  };
  std::array<std::vector<EventStat>, 8> stats;

  for (const Event& e : events) {
    const int rank = ds.catalog->rank_of_item[static_cast<std::size_t>(e.item)];
    if (rank < 0 || rank >= ds.n_top(e.slot))
      throw ConfigError("event focal item is not a top catalog item");
    const int alt = ds.alt_of_rank(e.slot, rank);
    const bool popular =
        daily_rate[static_cast<std::size_t>(e.item)] >= opts.popular_daily_rate;
    EventBucket& bucket =
        report.buckets[static_cast<std::size_t>(e.type) * 2 + (popular ? 0 : 1)];
    const auto& tue = by_cell[static_cast<std::size_t>(e.slot) * n_sessions +
                              ds.grid->session(e.week_slot, 0)];
    const auto& wed = by_cell[static_cast<std::size_t>(e.slot) * n_sessions +
                              ds.grid->session(e.week_slot, 1)];
    if (tue.empty() || wed.empty()) {
      ++bucket.skipped;
      continue;
    }

    EventStat st;
    double lam_tue = 0.0, lam_wed = 0.0;
    std::int64_t buys_tue = 0, buys_wed = 0;
    for (int day = 0; day < 2; ++day) {
      for (std::uint32_t ci : day == 0 ? tue : wed) {
        double p = preds.row(ci)[static_cast<std::size_t>(alt)];
        (day == 0 ? lam_tue : lam_wed) += p;
        const bool y = ds.cells[ci].chosen == alt;
        if (y) ++(day == 0 ? buys_tue : buys_wed);
        if (p < kProbClip || p > 1.0 - kProbClip) {
          p = std::clamp(p, kProbClip, 1.0 - kProbClip);
          ++bucket.clipped;
        }
        st.ll_ind += y ? std::log(p) : std::log1p(-p);
        ++st.n_obs;
      }
    }
    if (popular) {
      st.ll_agg = skellam_log_pmf(buys_wed - buys_tue, std::max(lam_wed, kRateClip),
                                  std::max(lam_tue, kRateClip));
    } else {
      const double mu = std::clamp(lam_tue + lam_wed, kProbClip, 1.0 - kProbClip);
      st.ll_agg = buys_tue + buys_wed > 0 ? std::log(mu) : std::log1p(-mu);
    }
    stats[static_cast<std::size_t>(e.type) * 2 + (popular ? 0 : 1)].push_back(st);
  }

  for (std::size_t b = 0; b < 8; ++b) {
    EventBucket& bucket = report.buckets[b];
    const auto& list = stats[b];
    bucket.n_events = static_cast<std::int64_t>(list.size());
    if (list.empty()) continue;
    double ll = 0.0, agg = 0.0;
    for (const EventStat& st : list) {
      bucket.n_obs += st.n_obs;
      ll += st.ll_ind;
      agg += st.ll_agg;
    }
    bucket.individual_ll = ll / static_cast<double>(bucket.n_obs);
    bucket.aggregate_ll = agg / static_cast<double>(list.size());

    if (opts.bootstrap > 1 && list.size() > 1) {
      auto rng = make_rng(opts.seed, rng_stream::kBootstrap, mix64(0xe7, b));
      std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
      std::vector<double> rep_ind(static_cast<std::size_t>(opts.bootstrap));
      std::vector<double> rep_agg(static_cast<std::size_t>(opts.bootstrap));
      for (int r = 0; r < opts.bootstrap; ++r) {
        double s_ll = 0.0, s_agg = 0.0;
        std::int64_t s_n = 0;
        for (std::size_t e = 0; e < list.size(); ++e) {
          const EventStat& st = list[pick(rng)];
          s_ll += st.ll_ind;
          s_agg += st.ll_agg;
          s_n += st.n_obs;
        }
        rep_ind[static_cast<std::size_t>(r)] = s_ll / static_cast<double>(s_n);
        rep_agg[static_cast<std::size_t>(r)] = s_agg / static_cast<double>(list.size());
      }
      bucket.individual_se = stddev(rep_ind);
      bucket.aggregate_se = stddev(rep_agg);
    }
  }
  return report;
}

// ---- Personalization diagnostics -------------------------------------------------

// Sample standard deviation over the mean; zero-variance or degenerate
// inputs give zero.
inline double coefficient_of_variation(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  if (!(std::abs(m) > 0.0)) return 0.0;
  return stddev(v) / m;
}

// Pooled within-group regression slope of actual on predicted: groups are
// demeaned separately, absorbing their fixed effects.
struct WithinGroupSlope {
  double sxx = 0.0, sxy = 0.0;
  std::int64_t pairs = 0;

  void add_group(std::span<const double> pred, std::span<const double> act) {
    if (pred.size() != act.size()) throw ConfigError("slope group widths disagree");
    if (pred.empty()) return;
    const double mp = mean(pred), ma = mean(act);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      sxx += (pred[i] - mp) * (pred[i] - mp);
      sxy += (pred[i] - mp) * (act[i] - ma);
    }
    pairs += static_cast<std::int64_t>(pred.size());
  }
  bool defined() const { return sxx > 0.0; }
  double slope() const {
    return defined() ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
  }
};

namespace eval_detail {

// Per-household predicted and actual purchase rates over the evaluation set,
// per top item and per category (any inside alternative).
struct HouseholdRates {
  int n_households = 0;
  // Per slot: household-major blocks of width n_top + 1; the last column is
  // the inside (category-level) rate.
  std::vector<std::vector<double>> pred;
  std::vector<std::vector<std::int32_t>> buys;
  std::vector<std::vector<std::int32_t>> cells;  // per (slot, household)

  int width(const EvalDataset& ds, int slot) const { return ds.n_top(slot) + 1; }
};

inline HouseholdRates household_rates(const PredictionTable& preds, const EvalDataset& ds) {
  HouseholdRates hr;
  int n_h = 0;
  for (const EvalCell& c : ds.cells) n_h = std::max(n_h, static_cast<int>(c.household) + 1);
  hr.n_households = n_h;
  const int n_slots = ds.catalog->n_kept();
  hr.pred.resize(static_cast<std::size_t>(n_slots));
  hr.buys.resize(static_cast<std::size_t>(n_slots));
  hr.cells.resize(static_cast<std::size_t>(n_slots));
  for (int s = 0; s < n_slots; ++s) {
    const std::size_t w = static_cast<std::size_t>(ds.n_top(s)) + 1;
    hr.pred[static_cast<std::size_t>(s)].assign(w * static_cast<std::size_t>(n_h), 0.0);
    hr.buys[static_cast<std::size_t>(s)].assign(w * static_cast<std::size_t>(n_h), 0);
    hr.cells[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(n_h), 0);
  }
  for (std::size_t i = 0; i < ds.cells.size(); ++i) {
    const EvalCell& c = ds.cells[i];
    const auto row = preds.row(i);
    const int s = c.slot;
    const std::size_t w = static_cast<std::size_t>(ds.n_top(s)) + 1;
    const std::size_t base = static_cast<std::size_t>(c.household) * w;
    auto& pred = hr.pred[static_cast<std::size_t>(s)];
    auto& buys = hr.buys[static_cast<std::size_t>(s)];
    for (int a = 0; a < ds.n_top(s); ++a) {
      pred[base + static_cast<std::size_t>(a)] += row[static_cast<std::size_t>(a)];
      if (c.chosen == a) ++buys[base + static_cast<std::size_t>(a)];
    }
    pred[base + w - 1] += 1.0 - row[static_cast<std::size_t>(ds.outside_alt(s))];
    if (c.chosen != ds.outside_alt(s)) ++buys[base + w - 1];
    ++hr.cells[static_cast<std::size_t>(s)][static_cast<std::size_t>(c.household)];
  }
  return hr;
}

}  // namespace eval_detail

struct PersonalizationReport {
  std::string model;
  double upc_cov = std::numeric_limits<double>::quiet_NaN();
  double category_cov = std::numeric_limits<double>::quiet_NaN();
  double upc_slope = std::numeric_limits<double>::quiet_NaN();
  double category_slope = std::numeric_limits<double>::quiet_NaN();
  bool upc_slope_defined = false, category_slope_defined = false;
  std::int64_t upc_pairs = 0, category_pairs = 0;
};

// Cross-household dispersion of predictions (coefficient of variation,
// averaged over items and over categories) and the calibration slope of
// actual on predicted rates with item or category fixed effects absorbed.
inline PersonalizationReport personalization_metrics(const PredictionTable& preds,
                                                     const EvalDataset& ds) {
  const auto hr = eval_detail::household_rates(preds, ds);
  PersonalizationReport out;
  out.model = preds.model;

  std::vector<double> cov_items, cov_cats, gp, ga;
  WithinGroupSlope upc_slope, cat_slope;
  for (int s = 0; s < ds.catalog->n_kept(); ++s) {
    const std::size_t w = static_cast<std::size_t>(ds.n_top(s)) + 1;
    const auto& cells = hr.cells[static_cast<std::size_t>(s)];
    for (std::size_t col = 0; col < w; ++col) {
      gp.clear();
      ga.clear();
      for (int i = 0; i < hr.n_households; ++i) {
        const std::int32_t n = cells[static_cast<std::size_t>(i)];
        if (n <= 0) continue;
        const std::size_t at = static_cast<std::size_t>(i) * w + col;
        gp.push_back(hr.pred[static_cast<std::size_t>(s)][at] / n);
        ga.push_back(static_cast<double>(hr.buys[static_cast<std::size_t>(s)][at]) / n);
      }
      if (gp.empty()) continue;
      const bool category_level = col == w - 1;
      (category_level ? cov_cats : cov_items).push_back(coefficient_of_variation(gp));
      (category_level ? cat_slope : upc_slope).add_group(gp, ga);
    }
  }
  out.upc_cov = mean(cov_items);
  out.category_cov = mean(cov_cats);
  out.upc_slope_defined = upc_slope.defined();
  out.category_slope_defined = cat_slope.defined();
  out.upc_slope = upc_slope.slope();
  out.category_slope = cat_slope.slope();
  out.upc_pairs = upc_slope.pairs;
  out.category_pairs = cat_slope.pairs;
  return out;
}

// ---- Never-buyer deciles ----------------------------------------------------------

struct NeverBuyerReport {
  std::string model;
  std::array<double, 10> upc_rate{}, category_rate{};
  std::array<std::int64_t, 10> upc_cells{}, upc_buys{}, category_cells{}, category_buys{};
  int upcs_used = 0, upcs_skipped = 0;
  int categories_used = 0, categories_skipped = 0;

  double upc_ratio() const {
    return upc_rate[0] > 0.0 ? upc_rate[9] / upc_rate[0]
                             : std::numeric_limits<double>::quiet_NaN();
  }
  double category_ratio() const {
    return category_rate[0] > 0.0 ? category_rate[9] / category_rate[0]
                                  : std::numeric_limits<double>::quiet_NaN();
  }
};

// Heldout purchase rates of training never-buyers, by decile of the model's
// predicted rate. Deciles are equal-count within each item (ties broken by
// household id, sizes differ by at most one) and pooled across items by
// total purchases over total trips; items with fewer than min_eligible
// never-buyers are skipped and counted. Decile 9 holds the highest
// predictions. The same construction applies per category.
inline NeverBuyerReport never_buyer_deciles(const TransactionPanel& panel,
                                            const SampleSplit& split,
                                            const PredictionTable& preds, const EvalDataset& ds,
                                            int min_eligible = 10) {
  const auto hr = eval_detail::household_rates(preds, ds);
  NeverBuyerReport out;
  out.model = preds.model;
  const int n_slots = ds.catalog->n_kept();

  // Training purchase indicators per (household, top item) and (household, slot).
  std::vector<std::vector<std::uint8_t>> bought_item(static_cast<std::size_t>(n_slots));
  std::vector<std::vector<std::uint8_t>> bought_cat(static_cast<std::size_t>(n_slots));
  for (int s = 0; s < n_slots; ++s) {
    bought_item[static_cast<std::size_t>(s)].assign(
        static_cast<std::size_t>(ds.n_top(s)) * static_cast<std::size_t>(hr.n_households), 0);
    bought_cat[static_cast<std::size_t>(s)].assign(static_cast<std::size_t>(hr.n_households), 0);
  }
  for (const Trip& t : panel.trips) {
    if (split.of(t.household, t.week) != SplitBucket::Train) continue;
    if (t.household >= hr.n_households) continue;
    for (const Purchase& p : t.purchases) {
      const int r = ds.catalog->rank_of_item[static_cast<std::size_t>(p.item)];
      if (r < 0) continue;
      const int c = ds.hierarchy->category_of[static_cast<std::size_t>(p.item)];
      const int s = ds.catalog->slot_of_category[static_cast<std::size_t>(c)];
      if (s < 0) continue;
      bought_cat[static_cast<std::size_t>(s)][static_cast<std::size_t>(t.household)] = 1;
      if (r < ds.n_top(s))
        bought_item[static_cast<std::size_t>(s)][static_cast<std::size_t>(r) * hr.n_households +
                                                 static_cast<std::size_t>(t.household)] = 1;
    }
  }

  struct Entry {
    double pred;
    int household;
    std::int32_t cells;
    std::int32_t buys;
  };
  std::vector<Entry> eligible;
  auto pool = [&](std::array<std::int64_t, 10>& cells, std::array<std::int64_t, 10>& buys) {
    std::sort(eligible.begin(), eligible.end(), [](const Entry& a, const Entry& b) {
      if (a.pred != b.pred) return a.pred < b.pred;
      return a.household < b.household;
    });
    const std::size_t n = eligible.size();
    for (int d = 0; d < 10; ++d) {
      const std::size_t lo = n * static_cast<std::size_t>(d) / 10;
      const std::size_t hi = n * static_cast<std::size_t>(d + 1) / 10;
      for (std::size_t k = lo; k < hi; ++k) {
        cells[static_cast<std::size_t>(d)] += eligible[k].cells;
        buys[static_cast<std::size_t>(d)] += eligible[k].buys;
      }
    }
  };

  for (int s = 0; s < n_slots; ++s) {
    const std::size_t w = static_cast<std::size_t>(ds.n_top(s)) + 1;
    const auto& cells = hr.cells[static_cast<std::size_t>(s)];
    for (int a = 0; a < ds.n_top(s); ++a) {
      eligible.clear();
      for (int i = 0; i < hr.n_households; ++i) {
        if (cells[static_cast<std::size_t>(i)] <= 0) continue;
        if (bought_item[static_cast<std::size_t>(s)][static_cast<std::size_t>(a) * hr.n_households +
                                                     static_cast<std::size_t>(i)])
          continue;
        const std::size_t at = static_cast<std::size_t>(i) * w + static_cast<std::size_t>(a);
        eligible.push_back({hr.pred[static_cast<std::size_t>(s)][at] /
                                cells[static_cast<std::size_t>(i)],
                            i, cells[static_cast<std::size_t>(i)],
                            hr.buys[static_cast<std::size_t>(s)][at]});
      }
      if (static_cast<int>(eligible.size()) < min_eligible) {
        ++out.upcs_skipped;
        continue;
      }
      pool(out.upc_cells, out.upc_buys);
      ++out.upcs_used;
    }
    eligible.clear();
    for (int i = 0; i < hr.n_households; ++i) {
      if (cells[static_cast<std::size_t>(i)] <= 0) continue;
      if (bought_cat[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]) continue;
      const std::size_t at = static_cast<std::size_t>(i) * w + (w - 1);
      eligible.push_back({hr.pred[static_cast<std::size_t>(s)][at] /
                              cells[static_cast<std::size_t>(i)],
                          i, cells[static_cast<std::size_t>(i)],
                          hr.buys[static_cast<std::size_t>(s)][at]});
    }
    if (static_cast<int>(eligible.size()) < min_eligible) {
      ++out.categories_skipped;
    } else {
      pool(out.category_cells, out.category_buys);
      ++out.categories_used;
    }
  }
  for (int d = 0; d < 10; ++d) {
    out.upc_rate[static_cast<std::size_t>(d)] =
        out.upc_cells[static_cast<std::size_t>(d)] > 0
            ? static_cast<double>(out.upc_buys[static_cast<std::size_t>(d)]) /
                  static_cast<double>(out.upc_cells[static_cast<std::size_t>(d)])
            : std::numeric_limits<double>::quiet_NaN();
    out.category_rate[static_cast<std::size_t>(d)] =
        out.category_cells[static_cast<std::size_t>(d)] > 0
            ? static_cast<double>(out.category_buys[static_cast<std::size_t>(d)]) /
                  static_cast<double>(out.category_cells[static_cast<std::size_t>(d)])
            : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

// ---- Finite-difference price elasticities ----------------------------------------

struct ElasticityValue {
  double value = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

// Arc elasticity of the focal item's unconditional purchase probability with
// respect to its own price (other < 0) or another item's price: central
// differences on log price with a multiplicative step. Undefined when the
// focal item is unavailable, the perturbed price is not positive, or either
// perturbed probability vanishes.
inline ElasticityValue price_elasticity(const DemandModel& model, const SessionGrid& grid,
                                        std::span<const int> items, int slot, int household,
                                        int focal, int other, int session, double step = 0.01) {
  if (!(step > 0.0) || step >= 1.0) throw ConfigError("elasticity step must be in (0,1)");
  const int target = other < 0 ? focal : other;
  std::size_t focal_pos = items.size(), target_pos = items.size();
  for (std::size_t k = 0; k < items.size(); ++k) {
    if (items[k] == focal) focal_pos = k;
    if (items[k] == target) target_pos = k;
  }
  if (focal_pos == items.size() || target_pos == items.size())
    throw ConfigError("elasticity item outside the modeled universe");

  std::vector<double> price(items.size());
  std::vector<std::uint8_t> avail(items.size());
  for (std::size_t k = 0; k < items.size(); ++k) {
    price[k] = grid.price(items[k], session);
    avail[k] = grid.is_available(items[k], session) ? 1 : 0;
  }
  ElasticityValue out;
  if (!avail[focal_pos] || !(price[target_pos] > 0.0)) return out;

  const double base = price[target_pos];
  std::vector<double> probs(items.size() + 1);
  price[target_pos] = base * (1.0 + step);
  model.category_probs(household, slot, session, items, price, avail, probs);
  const double hi = probs[focal_pos];
  price[target_pos] = base * (1.0 - step);
  model.category_probs(household, slot, session, items, price, avail, probs);
  const double lo = probs[focal_pos];
  if (!(hi > 0.0) || !(lo > 0.0)) return out;
  out.value = (std::log(hi) - std::log(lo)) / (std::log1p(step) - std::log1p(-step));
  out.defined = true;
  return out;
}

// ---- Elasticity summary -------------------------------------------------------------

struct ElasticitySummaryOptions {
  int households_per_item = 30;  // cap on sampled buyers per focal item
  int min_buyers = 3;            // items with fewer training buyers are skipped
  double step = 0.01;
  std::uint64_t seed = 1;
};

struct ElasticitySummary {
  std::string model;
  double median_own = std::numeric_limits<double>::quiet_NaN();
  double sd_of_product_means = std::numeric_limits<double>::quiet_NaN();
  double mean_within_product_sd = std::numeric_limits<double>::quiet_NaN();
  double class_inside = std::numeric_limits<double>::quiet_NaN();
  double class_outside = std::numeric_limits<double>::quiet_NaN();
  double class_pct = std::numeric_limits<double>::quiet_NaN();
  double subclass_inside = std::numeric_limits<double>::quiet_NaN();
  double subclass_outside = std::numeric_limits<double>::quiet_NaN();
  double subclass_pct = std::numeric_limits<double>::quiet_NaN();
  std::int64_t own_products = 0, cross_pairs = 0;
  std::int64_t undefined_count = 0, skipped_items = 0, skipped_pairs = 0;
};

// Elasticities sampled over each focal item's training buyers (consumers the
// item is relevant for), at the latest session where the focal item, and for
// cross pairs the price-changing item, is available. Own elasticities are
// summarized across products (median and dispersion of product means, mean
// within-product dispersion). Cross elasticities are contrasted by class
// over all within-category pairs, and by subclass within same-class pairs.
inline ElasticitySummary elasticity_summary(const DemandModel& model, const EvalDataset& ds,
                                            const TransactionPanel& panel,
                                            const SampleSplit& split,
                                            const ElasticitySummaryOptions& opts = {}) {
  ElasticitySummary out;
  out.model = model.name();
  const SessionGrid& grid = *ds.grid;
  const ProductHierarchy& hier = *ds.hierarchy;
  const int n_slots = ds.catalog->n_kept();

  // Training buyers per top item.
  const int n_items = hier.n_items();
  std::vector<std::vector<int>> buyers(static_cast<std::size_t>(n_items));
  {
    std::vector<std::vector<std::uint8_t>> seen(static_cast<std::size_t>(n_items));
    int n_h = 0;
    for (const Trip& t : panel.trips) n_h = std::max(n_h, t.household + 1);
    for (const Trip& t : panel.trips) {
      if (split.of(t.household, t.week) != SplitBucket::Train) continue;
      for (const Purchase& p : t.purchases) {
        auto& s = seen[static_cast<std::size_t>(p.item)];
        if (s.empty()) s.assign(static_cast<std::size_t>(n_h), 0);
        if (!s[static_cast<std::size_t>(t.household)]) {
          s[static_cast<std::size_t>(t.household)] = 1;
          buyers[static_cast<std::size_t>(p.item)].push_back(t.household);
        }
      }
    }
  }

  auto sample_buyers = [&](int item) {
    std::vector<int> picked = buyers[static_cast<std::size_t>(item)];
    std::sort(picked.begin(), picked.end());
    if (static_cast<int>(picked.size()) > opts.households_per_item) {
      auto rng = make_rng(opts.seed, rng_stream::kElasticity,
                          mix64(0x11, static_cast<std::uint64_t>(item)));
      std::shuffle(picked.begin(), picked.end(), rng);
      picked.resize(static_cast<std::size_t>(opts.households_per_item));
      std::sort(picked.begin(), picked.end());
    }
    return picked;
  };
  auto last_session = [&](int a, int b) {
    for (int sess = grid.n_sessions() - 1; sess >= 0; --sess) {
      if (!grid.is_available(a, sess) || !(grid.price(a, sess) > 0.0)) continue;
      if (b >= 0 && (!grid.is_available(b, sess) || !(grid.price(b, sess) > 0.0))) continue;
      return sess;
    }
    return -1;
  };

  std::vector<double> product_means, product_sds, vals;
  std::vector<double> cls_in, cls_out, sub_in, sub_out;
  for (int s = 0; s < n_slots; ++s) {
    const auto& universe = ds.items[static_cast<std::size_t>(s)];
    for (int u : ds.catalog->top_items[static_cast<std::size_t>(s)]) {
      const auto picked = sample_buyers(u);
      if (static_cast<int>(picked.size()) < opts.min_buyers) {
        ++out.skipped_items;
        continue;
      }
      const int own_sess = last_session(u, -1);
      if (own_sess < 0) {
        ++out.skipped_items;
        continue;
      }
      vals.clear();
      for (int i : picked) {
        const auto e = price_elasticity(model, grid, universe, s, i, u, -1, own_sess, opts.step);
        if (e.defined)
          vals.push_back(e.value);
        else
          ++out.undefined_count;
      }
      if (vals.empty()) {
        ++out.skipped_items;
        continue;
      }
      product_means.push_back(mean(vals));
      product_sds.push_back(stddev(vals));
      ++out.own_products;

      // Cross pairs: the focal item's demand responds to every other modeled
      // item's price, sampled over the focal item's buyers.
      for (int v : universe) {
        if (v == u) continue;
        const int sess = last_session(u, v);
        if (sess < 0) {
          ++out.skipped_pairs;
          continue;
        }
        vals.clear();
        for (int i : picked) {
          const auto e = price_elasticity(model, grid, universe, s, i, u, v, sess, opts.step);
          if (e.defined)
            vals.push_back(e.value);
          else
            ++out.undefined_count;
        }
        if (vals.empty()) {
          ++out.skipped_pairs;
          continue;
        }
        const double m = mean(vals);
        ++out.cross_pairs;
        const bool same_class = hier.class_of[static_cast<std::size_t>(u)] ==
                                hier.class_of[static_cast<std::size_t>(v)];
        (same_class ? cls_in : cls_out).push_back(m);
        if (same_class) {
          const bool same_sub = hier.subclass_of[static_cast<std::size_t>(u)] ==
                                hier.subclass_of[static_cast<std::size_t>(v)];
          (same_sub ? sub_in : sub_out).push_back(m);
        }
      }
    }
  }

  if (!product_means.empty()) {
    out.median_own = median(product_means);
    out.sd_of_product_means = stddev(product_means);
    out.mean_within_product_sd = mean(product_sds);
  }
  auto pct = [](double inside, double outside) {
    return std::abs(outside) > 0.0 ? 100.0 * (inside - outside) / std::abs(outside)
                                   : std::numeric_limits<double>::quiet_NaN();
  };
  if (!cls_in.empty()) out.class_inside = mean(cls_in);
  if (!cls_out.empty()) out.class_outside = mean(cls_out);
  out.class_pct = pct(out.class_inside, out.class_outside);
  if (!sub_in.empty()) out.subclass_inside = mean(sub_in);
  if (!sub_out.empty()) out.subclass_outside = mean(sub_out);
  out.subclass_pct = pct(out.subclass_inside, out.subclass_outside);
  return out;
}

// ---- Elasticity terciles vs realized demand responses ------------------------------

struct TercileOptions {
  double step = 0.01;
  int min_shoppers = 5;  // a pooled cell with fewer shoppers on either day is
                         // flagged sparse
  std::vector<double> bucket_edges = {-0.15, -0.05, 0.05, 0.15};  // on log price change
};

struct TercileCell {
  std::int64_t tue_cells = 0, wed_cells = 0, tue_buys = 0, wed_buys = 0;
  bool sparse = true;

  // Wednesday minus Tuesday purchase rate among the tercile's shoppers.
  double demand_change() const {
    if (tue_cells == 0 || wed_cells == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(wed_buys) / static_cast<double>(wed_cells) -
           static_cast<double>(tue_buys) / static_cast<double>(tue_cells);
  }
};

struct TercileReport {
  std::string model;
  // buckets[b][t]: price-change bucket b, elasticity tercile t (0 = most
  // price sensitive, i.e. most negative predicted own elasticity).
  std::vector<std::array<TercileCell, 3>> buckets;
  std::array<double, 3> response_slope{};  // demand change per unit log price change
  std::array<bool, 3> slope_defined{};
  int events_used = 0, events_skipped = 0;
  std::int64_t households_ranked = 0, households_dropped = 0;
};

// Splits each focal item's households into terciles of predicted own
// elasticity, then pools realized Tuesday-to-Wednesday demand changes over
// own-price events by price-change bucket. The per-tercile slope regresses
// the per-event demand change on the log price change.
inline TercileReport tercile_demand_validation(const DemandModel& model, const EvalDataset& ds,
                                               std::span<const Event> events,
                                               const TercileOptions& opts = {}) {
  TercileReport out;
  out.model = model.name();
  out.buckets.resize(opts.bucket_edges.size() + 1);
  for (std::size_t b = 1; b < opts.bucket_edges.size(); ++b)
    if (!(opts.bucket_edges[b] > opts.bucket_edges[b - 1]))
      throw ConfigError("tercile bucket edges must increase");
  const SessionGrid& grid = *ds.grid;
  const int n_sessions = grid.n_sessions();

  // Cells grouped by (slot, session).
  std::vector<std::vector<std::uint32_t>> by_cell(
      static_cast<std::size_t>(ds.catalog->n_kept()) * static_cast<std::size_t>(n_sessions));
  int n_h = 0;
  for (std::size_t i = 0; i < ds.cells.size(); ++i) {
    by_cell[static_cast<std::size_t>(ds.cells[i].slot) * n_sessions + ds.cells[i].session]
        .push_back(static_cast<std::uint32_t>(i));
    n_h = std::max(n_h, static_cast<int>(ds.cells[i].household) + 1);
  }
  std::vector<std::int32_t> slot_cells(static_cast<std::size_t>(n_h));

  // Tercile assignment per focal item, cached; -1 marks unranked households.
  std::vector<std::int8_t> tercile(static_cast<std::size_t>(n_h), -1);
  int cached_item = -1;
  auto assign_terciles = [&](int u, int slot) {
    if (u == cached_item) return;
    cached_item = u;
    std::fill(tercile.begin(), tercile.end(), static_cast<std::int8_t>(-1));
    std::fill(slot_cells.begin(), slot_cells.end(), 0);
    for (int sess = 0; sess < n_sessions; ++sess)
      for (std::uint32_t ci : by_cell[static_cast<std::size_t>(slot) * n_sessions + sess])
        ++slot_cells[static_cast<std::size_t>(ds.cells[ci].household)];
    int ref = -1;
    for (int sess = n_sessions - 1; sess >= 0 && ref < 0; --sess)
      if (grid.is_available(u, sess) && grid.price(u, sess) > 0.0) ref = sess;
    if (ref < 0) return;
    std::vector<std::pair<double, int>> ranked;
    const auto& universe = ds.items[static_cast<std::size_t>(slot)];
    for (int i = 0; i < n_h; ++i) {
      if (slot_cells[static_cast<std::size_t>(i)] <= 0) continue;
      const auto e = price_elasticity(model, grid, universe, slot, i, u, -1, ref, opts.step);
      if (!e.defined) {
        ++out.households_dropped;
        continue;
      }
      ranked.emplace_back(e.value, i);
    }
    std::sort(ranked.begin(), ranked.end());
    out.households_ranked += static_cast<std::int64_t>(ranked.size());
    const std::size_t n = ranked.size();
    for (int t = 0; t < 3; ++t) {
      const std::size_t lo = n * static_cast<std::size_t>(t) / 3;
      const std::size_t hi = n * static_cast<std::size_t>(t + 1) / 3;
      for (std::size_t k = lo; k < hi; ++k)
        tercile[static_cast<std::size_t>(ranked[k].second)] = static_cast<std::int8_t>(t);
    }
  };

  std::array<WithinGroupSlope, 3> slope_acc;
  std::array<std::vector<double>, 3> xs, ys;
  for (const Event& e : events) {
    if (e.type != EventType::OwnPrice) continue;
    const int tue = grid.session(e.week_slot, 0), wed = grid.session(e.week_slot, 1);
    const double p_tue = grid.price(e.item, tue), p_wed = grid.price(e.item, wed);
    if (!(p_tue > 0.0) || !(p_wed > 0.0)) {
      ++out.events_skipped;
      continue;
    }
    const auto& cells_tue = by_cell[static_cast<std::size_t>(e.slot) * n_sessions + tue];
    const auto& cells_wed = by_cell[static_cast<std::size_t>(e.slot) * n_sessions + wed];
    if (cells_tue.empty() || cells_wed.empty()) {
      ++out.events_skipped;
      continue;
    }
    assign_terciles(e.item, e.slot);
    const int rank = ds.catalog->rank_of_item[static_cast<std::size_t>(e.item)];
    const int alt = ds.alt_of_rank(e.slot, rank);
    const double dlp = std::log(p_wed) - std::log(p_tue);
    const std::size_t b =
        static_cast<std::size_t>(std::upper_bound(opts.bucket_edges.begin(),
                                                  opts.bucket_edges.end(), dlp) -
                                 opts.bucket_edges.begin());
    std::array<TercileCell, 3> ev{};
    for (int day = 0; day < 2; ++day) {
      for (std::uint32_t ci : day == 0 ? cells_tue : cells_wed) {
        const std::int8_t t = tercile[static_cast<std::size_t>(ds.cells[ci].household)];
        if (t < 0) continue;
        TercileCell& cell = ev[static_cast<std::size_t>(t)];
        ++(day == 0 ? cell.tue_cells : cell.wed_cells);
        if (ds.cells[ci].chosen == alt) ++(day == 0 ? cell.tue_buys : cell.wed_buys);
      }
    }
    for (int t = 0; t < 3; ++t) {
      TercileCell& pooled = out.buckets[b][static_cast<std::size_t>(t)];
      pooled.tue_cells += ev[static_cast<std::size_t>(t)].tue_cells;
      pooled.wed_cells += ev[static_cast<std::size_t>(t)].wed_cells;
      pooled.tue_buys += ev[static_cast<std::size_t>(t)].tue_buys;
      pooled.wed_buys += ev[static_cast<std::size_t>(t)].wed_buys;
      const double dy = ev[static_cast<std::size_t>(t)].demand_change();
      if (std::isfinite(dy)) {
        xs[static_cast<std::size_t>(t)].push_back(dlp);
        ys[static_cast<std::size_t>(t)].push_back(dy);
      }
    }
    ++out.events_used;
  }

  for (auto& row : out.buckets)
    for (TercileCell& cell : row)
      cell.sparse = std::min(cell.tue_cells, cell.wed_cells) <
                    static_cast<std::int64_t>(opts.min_shoppers);
  for (int t = 0; t < 3; ++t) {
    slope_acc[static_cast<std::size_t>(t)].add_group(xs[static_cast<std::size_t>(t)],
                                                     ys[static_cast<std::size_t>(t)]);
    out.slope_defined[static_cast<std::size_t>(t)] = slope_acc[static_cast<std::size_t>(t)].defined();
    out.response_slope[static_cast<std::size_t>(t)] = slope_acc[static_cast<std::size_t>(t)].slope();
  }
  return out;
}

}  // namespace nestfact
