#pragma once
// Per-category discrete choice baselines: multinomial logit, nested logit
// (outside good in its own nest), and mixed logit by maximum simulated
// likelihood. Alternatives are the category's top items, one pooled
// alternative for the remaining items, and the outside good. Variants swap
// demographic interactions for factorization-based preference controls.
//
// Inside utility:
//   V_aj = alpha_j + eta * log p_jt + beta_j . D_i + weekday + week_t + phi * control_ij
// with week_t a fixed offset (logit of the category's training-week purchase
// rate), not a free parameter. The outside good has utility zero, or
// phi * (1 - sum_j control_ij) when controls are attached.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/dates.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/hpf.hpp"
#include "nestfact/math.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/session_grid.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

// ---- Preference control table -------------------------------------------

struct ControlTable {
  int n_households = 0, n_items = 0;
  Matrix value;
  std::vector<std::uint8_t> present;

  bool has(int i, int j) const {
    if (i < 0 || i >= n_households || j < 0 || j >= n_items) return false;
    return present[static_cast<std::size_t>(i) * static_cast<std::size_t>(n_items) + j] != 0;
  }
  double at(int i, int j) const {
    if (!has(i, j)) throw DataError("control table lookup for an uncovered pair");
    return value(i, j);
  }
};

inline ControlTable control_table_from_fit(const HpfFit& fit) {
  ControlTable t;
  t.n_households = fit.n_users;
  t.n_items = fit.n_items;
  t.value = Matrix(fit.n_users, fit.n_items);
  t.present.assign(static_cast<std::size_t>(fit.n_users) * fit.n_items, 1);
  for (int i = 0; i < fit.n_users; ++i)
    for (int j = 0; j < fit.n_items; ++j) t.value(i, j) = hpf_control(fit, i, j);
  return t;
}

// Reads the delimited export written by write_control_table, resolving names
// through the panel's id tables.
inline ControlTable load_control_table(const std::string& path, const TransactionPanel& panel,
                                       const ProductHierarchy& hierarchy) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open control table: " + path);
  ControlTable t;
  t.n_households = static_cast<int>(panel.households.size());
  t.n_items = hierarchy.n_items();
  t.value = Matrix(t.n_households, t.n_items);
  t.present.assign(static_cast<std::size_t>(t.n_households) * t.n_items, 0);
  std::string line;
  if (!std::getline(in, line) || line != "household,upc,control")
    throw DataError("control table header mismatch in " + path);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw DataError("malformed control table row: " + line);
    const int i = panel.household_ids.lookup(line.substr(0, c1));
    const int j = hierarchy.upcs.lookup(line.substr(c1 + 1, c2 - c1 - 1));
    if (i < 0 || j < 0) throw DataError("control table names unknown to the panel: " + line);
    t.value(i, j) = std::stod(line.substr(c2 + 1));
    t.present[static_cast<std::size_t>(i) * t.n_items + j] = 1;
  }
  return t;
}

// ---- Category choice data -------------------------------------------------

struct ChoiceObs {
  std::int32_t household = 0;
  std::int32_t week_slot = 0;
  std::int32_t session = 0;
  std::int8_t wednesday = 0;
  std::int32_t alt = 0;  // 0..n_inside-1 inside, n_inside = outside
};

struct CategoryChoiceData {
  int slot = -1;
  int category = -1;
  std::vector<int> top_items;     // rank order
  std::vector<int> pooled_items;  // empty when the category has no tail
  std::vector<double> pooled_weight;
  Matrix log_price;                          // inside alternative x session
  std::vector<std::vector<std::uint8_t>> avail;  // inside alternative x session
  std::vector<double> week_offset;           // per week slot
  Matrix demo;                               // household x D (no intercept column)
  Matrix control;                            // household x (inside+1); outside last
  bool has_controls = false;
  std::vector<ChoiceObs> obs;
  int n_households = 0;

  bool has_pooled() const { return !pooled_items.empty(); }
  int n_inside() const { return static_cast<int>(top_items.size()) + (has_pooled() ? 1 : 0); }
  int outside_alt() const { return n_inside(); }
};

// Prices, availability, week offsets and demographics for one kept category.
// Observations are filled separately per split bucket so the same base data
// serves train fitting and heldout evaluation.
inline CategoryChoiceData build_category_choice_data(const TransactionPanel& panel,
                                                     [[maybe_unused]] const ProductHierarchy& hierarchy,
                                                     const CategoryCatalog& catalog,
                                                     const SessionGrid& grid, int slot,
                                                     const SampleSplit& split) {
  if (slot < 0 || slot >= catalog.n_kept()) throw DataError("category slot out of range");
  CategoryChoiceData d;
  d.slot = slot;
  d.category = catalog.categories[static_cast<std::size_t>(slot)];
  d.top_items = catalog.top_items[static_cast<std::size_t>(slot)];
  d.pooled_items = catalog.pooled_items[static_cast<std::size_t>(slot)];
  d.n_households = static_cast<int>(panel.households.size());

  // Pooled alternative weights: training purchase shares within the tail.
  if (!d.pooled_items.empty()) {
    std::vector<double> cnt(d.pooled_items.size(), 0.0);
    for (const Trip& t : panel.trips) {
      if (split.of(t.household, t.week) != SplitBucket::Train) continue;
      for (const Purchase& p : t.purchases) {
        auto it = std::find(d.pooled_items.begin(), d.pooled_items.end(), p.item);
        if (it != d.pooled_items.end())
          cnt[static_cast<std::size_t>(it - d.pooled_items.begin())] +=
              static_cast<double>(p.quantity);
      }
    }
    const double total = std::accumulate(cnt.begin(), cnt.end(), 0.0);
    d.pooled_weight.resize(cnt.size());
    for (std::size_t k = 0; k < cnt.size(); ++k)
      d.pooled_weight[k] = total > 0.0 ? cnt[k] / total : 1.0 / static_cast<double>(cnt.size());
  }

  const int a_n = d.n_inside();
  const int n_sess = grid.n_sessions();
  d.log_price = Matrix(a_n, n_sess);
  d.avail.assign(static_cast<std::size_t>(a_n),
                 std::vector<std::uint8_t>(static_cast<std::size_t>(n_sess), 0));
  for (int s = 0; s < n_sess; ++s) {
    for (std::size_t r = 0; r < d.top_items.size(); ++r) {
      const int j = d.top_items[r];
      d.avail[r][static_cast<std::size_t>(s)] = grid.is_available(j, s) ? 1 : 0;
      const double p = grid.price(j, s);
      d.log_price(static_cast<int>(r), s) = p > 0.0 ? std::log(p) : 0.0;
    }
    if (d.has_pooled()) {
      // Share-weighted price over the available tail items.
      double wsum = 0.0, psum = 0.0;
      for (std::size_t k = 0; k < d.pooled_items.size(); ++k) {
        const int j = d.pooled_items[k];
        if (!grid.is_available(j, s)) continue;
        wsum += d.pooled_weight[k];
        psum += d.pooled_weight[k] * grid.price(j, s);
      }
      const int pa = a_n - 1;
      d.avail[static_cast<std::size_t>(pa)][static_cast<std::size_t>(s)] = wsum > 0.0 ? 1 : 0;
      d.log_price(pa, s) = wsum > 0.0 ? std::log(psum / wsum) : 0.0;
    }
  }

  d.week_offset.resize(static_cast<std::size_t>(grid.n_weeks()));
  for (int w = 0; w < grid.n_weeks(); ++w) {
    const double r = std::clamp(grid.week_rate.empty() ? 0.5 : grid.week_rate(slot, w), 1e-6,
                                1.0 - 1e-6);
    d.week_offset[static_cast<std::size_t>(w)] = std::log(r / (1.0 - r));
  }

  const int p_w = panel.covariate_width();
  d.demo = Matrix(d.n_households, std::max(0, p_w - 1));
  for (int i = 0; i < d.n_households; ++i)
    for (int c = 1; c < p_w; ++c)
      d.demo(i, c - 1) = panel.households[static_cast<std::size_t>(i)].w[static_cast<std::size_t>(c)];
  return d;
}

inline void fill_choice_observations(CategoryChoiceData& d, const TransactionPanel& panel,
                                     const ProductHierarchy& hierarchy,
                                     const CategoryCatalog& catalog, const SessionGrid& grid,
                                     const SampleSplit& split, SplitBucket bucket) {
  d.obs.clear();
  const int top_n = static_cast<int>(d.top_items.size());
  for (const Trip& t : panel.trips) {
    if (split.of(t.household, t.week) != bucket) continue;
    const int ws = grid.week_slot(t.week);
    if (ws < 0) continue;
    const int wed = t.weekday == kWednesday ? 1 : 0;
    int alt = d.outside_alt();
    for (const Purchase& p : t.purchases) {
      if (hierarchy.category_of[static_cast<std::size_t>(p.item)] != d.category) continue;
      const int r = catalog.rank_of_item[static_cast<std::size_t>(p.item)];
      if (r < 0) continue;  // item outside the modeled assortment
      alt = r < top_n ? r : top_n;
      break;  // purchases are already collapsed to one per category
    }
    d.obs.push_back({t.household, ws, grid.session(ws, wed), static_cast<std::int8_t>(wed), alt});
  }
}

// ---- Specification ---------------------------------------------------------

enum class BaselineKind { Mnl, Nested, Mixed };

struct LogitSpec {
  BaselineKind kind = BaselineKind::Mnl;
  bool demographics = true;
  bool hpf_controls = false;
  bool price = true;
  bool week_offset = true;
  bool weekday_dummy = true;
  bool random_price = false;       // mixed only
  bool random_intercepts = false;  // mixed only
  // Gives one inside alternative its own log-price coefficient on top of the
  // shared one; used by the placebo suite to test a single shifted item.
  int separate_price_alt = -1;
  int draws = 500;
  std::uint64_t seed = 1;
  // Pins the mixing scale at a constant instead of estimating it; negative
  // means free. Zero collapses the mixture onto the plain logit.
  double fixed_mix_scale = -1.0;
  int max_iter = 400;
  double tolerance = 1e-6;  // max-norm of the mean-LL gradient

  void validate() const {
    if (demographics && hpf_controls)
      throw ConfigError("pick demographic or preference controls, not both");
    const bool any_random = random_price || random_intercepts;
    if (kind == BaselineKind::Mixed && !any_random)
      throw ConfigError("mixed logit needs a random coefficient");
    if (kind != BaselineKind::Mixed && any_random)
      throw ConfigError("random coefficients require the mixed logit");
    if (kind == BaselineKind::Mixed && (draws < 100 || draws > 3000))
      throw ConfigError("mixed logit needs between 100 and 3000 draws");
    if (fixed_mix_scale >= 0.0 && kind != BaselineKind::Mixed)
      throw ConfigError("a pinned mixing scale only applies to the mixed logit");
    if (separate_price_alt >= 0 && (kind != BaselineKind::Mnl || !price))
      throw ConfigError("a separate price coefficient needs the plain logit with price active");
    if (max_iter < 1 || !(tolerance > 0.0)) throw ConfigError("bad optimizer settings");
  }
};

// Dense parameter layout; -1 marks an absent block.
struct BaselineLayout {
  int a_n = 0;  // inside alternatives
  int d_n = 0;  // demographic columns
  int alpha = -1, eta = -1, eta_focal = -1, beta = -1, wday = -1, ctl = -1, nest = -1;
  int ls_price = -1, ls_alpha = -1;
  int focal_alt = -1;  // alternative owning eta_focal
  int total = 0;

  static BaselineLayout make(const CategoryChoiceData& data, const LogitSpec& spec,
                             bool price_active, bool focal_active = true) {
    BaselineLayout l;
    l.a_n = data.n_inside();
    l.d_n = spec.demographics ? data.demo.cols() : 0;
    int at = 0;
    l.alpha = at;
    at += l.a_n;
    if (spec.price && price_active) l.eta = at++;
    if (l.eta >= 0 && spec.separate_price_alt >= 0 && focal_active) {
      l.focal_alt = spec.separate_price_alt;
      l.eta_focal = at++;
    }
    if (spec.demographics) {
      l.beta = at;
      at += l.a_n * l.d_n;
    }
    if (spec.weekday_dummy) l.wday = at++;
    if (spec.hpf_controls) l.ctl = at++;
    if (spec.kind == BaselineKind::Nested) l.nest = at++;
    const bool free_scale = spec.fixed_mix_scale < 0.0;
    if (spec.random_price && free_scale) l.ls_price = at++;
    if (spec.random_intercepts && free_scale) l.ls_alpha = at++;
    l.total = at;
    return l;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> n(static_cast<std::size_t>(total));
    char buf[48];
    for (int a = 0; a < a_n; ++a) {
      std::snprintf(buf, sizeof(buf), "alpha[%d]", a);
      n[static_cast<std::size_t>(alpha + a)] = buf;
    }
    if (eta >= 0) n[static_cast<std::size_t>(eta)] = "log_price";
    if (eta_focal >= 0) {
      std::snprintf(buf, sizeof(buf), "log_price_focal[%d]", focal_alt);
      n[static_cast<std::size_t>(eta_focal)] = buf;
    }
    if (beta >= 0)
      for (int a = 0; a < a_n; ++a)
        for (int d = 0; d < d_n; ++d) {
          std::snprintf(buf, sizeof(buf), "demo[%d,%d]", a, d);
          n[static_cast<std::size_t>(beta + a * d_n + d)] = buf;
        }
    if (wday >= 0) n[static_cast<std::size_t>(wday)] = "wednesday";
    if (ctl >= 0) n[static_cast<std::size_t>(ctl)] = "control";
    if (nest >= 0) n[static_cast<std::size_t>(nest)] = "nest_logit_scale";
    if (ls_price >= 0) n[static_cast<std::size_t>(ls_price)] = "log_sd_price";
    if (ls_alpha >= 0) n[static_cast<std::size_t>(ls_alpha)] = "log_sd_intercept";
    return n;
  }
};

struct MleFit {
  LogitSpec spec;
  BaselineLayout layout;
  std::vector<double> estimates, se, p_value;
  std::vector<std::string> names;
  double log_lik = 0.0;   // total over fitted observations
  double mean_ll = 0.0;   // per observation
  std::int64_t n_obs = 0;
  bool converged = false;
  double grad_norm = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool ridge_fallback = false;
  bool nest_at_boundary = false;
  bool price_identified = true;
  bool focal_price_identified = true;
  std::vector<std::string> warnings;

  double focal_price_coefficient() const {
    return layout.eta_focal >= 0 ? estimates[static_cast<std::size_t>(layout.eta_focal)]
                                 : std::numeric_limits<double>::quiet_NaN();
  }
  double focal_price_se() const {
    return layout.eta_focal >= 0 ? se[static_cast<std::size_t>(layout.eta_focal)]
                                 : std::numeric_limits<double>::quiet_NaN();
  }
  double focal_price_p_value() const {
    return layout.eta_focal >= 0 ? p_value[static_cast<std::size_t>(layout.eta_focal)]
                                 : std::numeric_limits<double>::quiet_NaN();
  }
  double price_coefficient() const {
    return layout.eta >= 0 ? estimates[static_cast<std::size_t>(layout.eta)] : 0.0;
  }
  double price_se() const {
    return layout.eta >= 0 ? se[static_cast<std::size_t>(layout.eta)]
                           : std::numeric_limits<double>::quiet_NaN();
  }
  double price_p_value() const {
    return layout.eta >= 0 ? p_value[static_cast<std::size_t>(layout.eta)]
                           : std::numeric_limits<double>::quiet_NaN();
  }
  double nest_coefficient() const {
    return layout.nest >= 0 ? sigmoid(estimates[static_cast<std::size_t>(layout.nest)]) : 1.0;
  }
};

// ---- Likelihood machinery ---------------------------------------------------

namespace logit_detail {

// Quasi-random standard normal draws per household, fixed across iterations.
// Dimension 0 is the price coefficient; dimensions 1..A are the random
// intercepts. Each household owns a fixed stride of the sequence, so draw r
// is the same no matter how many draws a fit requests; a run with more draws
// extends the smaller run's set instead of replacing it.
inline double household_draw(std::uint64_t seed, int household, int draw, int dim) {
  const unsigned base = kHaltonBases[dim % static_cast<int>(std::size(kHaltonBases))];
  const std::uint64_t index = 17 + static_cast<std::uint64_t>(household) * 4096 +
                              static_cast<std::uint64_t>(draw) + mix64(seed) % 1024;
  return normal_quantile(halton(index, base));
}

struct Work {
  std::vector<double> v;      // inside utilities
  std::vector<double> prob;   // inside + outside
  std::vector<std::uint8_t> open;
  std::vector<double> grad_r; // per-draw gradient scratch (mixed)
  std::vector<double> lls;    // per-draw panel log likelihood (mixed)
};

// Inside utilities for one observation; eta_shift and alpha_shift carry the
// mixed logit draw displacements (zero for the fixed-coefficient models).
inline void inside_utilities(const CategoryChoiceData& d, const LogitSpec& spec,
                             const BaselineLayout& l, std::span<const double> x,
                             const ChoiceObs& o, double eta_shift,
                             std::span<const double> alpha_shift, std::vector<double>& v,
                             std::vector<std::uint8_t>& open) {
  const int a_n = l.a_n;
  v.assign(static_cast<std::size_t>(a_n), 0.0);
  open.assign(static_cast<std::size_t>(a_n), 0);
  const double eta = l.eta >= 0 ? x[static_cast<std::size_t>(l.eta)] + eta_shift : 0.0;
  const double week = spec.week_offset ? d.week_offset[static_cast<std::size_t>(o.week_slot)] : 0.0;
  const double wday = l.wday >= 0 && o.wednesday ? x[static_cast<std::size_t>(l.wday)] : 0.0;
  for (int a = 0; a < a_n; ++a) {
    const bool avail = d.avail[static_cast<std::size_t>(a)][static_cast<std::size_t>(o.session)] ||
                       a == o.alt;
    if (!avail) continue;
    open[static_cast<std::size_t>(a)] = 1;
    double u = x[static_cast<std::size_t>(l.alpha + a)] + week + wday;
    if (!alpha_shift.empty()) u += alpha_shift[static_cast<std::size_t>(a)];
    if (l.eta >= 0) {
      const double eta_a =
          a == l.focal_alt && l.eta_focal >= 0 ? x[static_cast<std::size_t>(l.eta_focal)] : eta;
      u += eta_a * d.log_price(a, o.session);
    }
    if (l.beta >= 0) {
      const auto demo = d.demo.row(o.household);
      const double* b = x.data() + l.beta + a * l.d_n;
      for (int c = 0; c < l.d_n; ++c) u += b[c] * demo[static_cast<std::size_t>(c)];
    }
    if (l.ctl >= 0) u += x[static_cast<std::size_t>(l.ctl)] * d.control(o.household, a);
    v[static_cast<std::size_t>(a)] = u;
  }
}

// Variant with caller-supplied prices and availability for counterfactual
// queries; the fitting path above stays on the observed grid columns.
inline void inside_utilities_at(const CategoryChoiceData& d, const LogitSpec& spec,
                                const BaselineLayout& l, std::span<const double> x, int household,
                                int week_slot, int wednesday, std::span<const double> log_price,
                                std::span<const std::uint8_t> avail, double eta_shift,
                                std::span<const double> alpha_shift, std::vector<double>& v,
                                std::vector<std::uint8_t>& open) {
  const int a_n = l.a_n;
  v.assign(static_cast<std::size_t>(a_n), 0.0);
  open.assign(static_cast<std::size_t>(a_n), 0);
  const double eta = l.eta >= 0 ? x[static_cast<std::size_t>(l.eta)] + eta_shift : 0.0;
  const double week = spec.week_offset ? d.week_offset[static_cast<std::size_t>(week_slot)] : 0.0;
  const double wday = l.wday >= 0 && wednesday ? x[static_cast<std::size_t>(l.wday)] : 0.0;
  for (int a = 0; a < a_n; ++a) {
    if (!avail[static_cast<std::size_t>(a)]) continue;
    open[static_cast<std::size_t>(a)] = 1;
    double u = x[static_cast<std::size_t>(l.alpha + a)] + week + wday;
    if (!alpha_shift.empty()) u += alpha_shift[static_cast<std::size_t>(a)];
    if (l.eta >= 0) {
      const double eta_a =
          a == l.focal_alt && l.eta_focal >= 0 ? x[static_cast<std::size_t>(l.eta_focal)] : eta;
      u += eta_a * log_price[static_cast<std::size_t>(a)];
    }
    if (l.beta >= 0) {
      const auto demo = d.demo.row(household);
      const double* b = x.data() + l.beta + a * l.d_n;
      for (int c = 0; c < l.d_n; ++c) u += b[c] * demo[static_cast<std::size_t>(c)];
    }
    if (l.ctl >= 0) u += x[static_cast<std::size_t>(l.ctl)] * d.control(household, a);
    v[static_cast<std::size_t>(a)] = u;
  }
}

inline double outside_utility(const CategoryChoiceData& d, const BaselineLayout& l,
                              std::span<const double> x, int household) {
  return l.ctl >= 0 ? x[static_cast<std::size_t>(l.ctl)] * d.control(household, d.n_inside())
                    : 0.0;
}

inline double outside_utility(const CategoryChoiceData& d, const BaselineLayout& l,
                              std::span<const double> x, const ChoiceObs& o) {
  return outside_utility(d, l, x, static_cast<int>(o.household));
}

// Shares over the open inside alternatives plus the outside good from already
// computed utilities; adds weight times each probability into out. The
// nested branch puts the outside good alone in its nest.
inline void add_alt_probs(const LogitSpec& spec, const BaselineLayout& l,
                          std::span<const double> x, const std::vector<double>& v,
                          const std::vector<std::uint8_t>& open, double u_out, double weight,
                          std::span<double> out) {
  const int a_n = l.a_n;
  if (spec.kind == BaselineKind::Nested) {
    const double zeta = sigmoid(x[static_cast<std::size_t>(l.nest)]);
    double mx = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < a_n; ++a)
      if (open[static_cast<std::size_t>(a)])
        mx = std::max(mx, v[static_cast<std::size_t>(a)] / zeta);
    if (!std::isfinite(mx)) {
      out[static_cast<std::size_t>(a_n)] += weight;
      return;
    }
    double zsum = 0.0;
    for (int a = 0; a < a_n; ++a)
      if (open[static_cast<std::size_t>(a)])
        zsum += std::exp(v[static_cast<std::size_t>(a)] / zeta - mx);
    const double iv = mx + std::log(zsum);
    const double q = sigmoid(zeta * iv - u_out);
    for (int a = 0; a < a_n; ++a)
      if (open[static_cast<std::size_t>(a)])
        out[static_cast<std::size_t>(a)] +=
            weight * q * std::exp(v[static_cast<std::size_t>(a)] / zeta - iv);
    out[static_cast<std::size_t>(a_n)] += weight * (1.0 - q);
    return;
  }
  double mx = u_out;
  for (int a = 0; a < a_n; ++a)
    if (open[static_cast<std::size_t>(a)]) mx = std::max(mx, v[static_cast<std::size_t>(a)]);
  double z = std::exp(u_out - mx);
  for (int a = 0; a < a_n; ++a)
    if (open[static_cast<std::size_t>(a)]) z += std::exp(v[static_cast<std::size_t>(a)] - mx);
  const double lse = mx + std::log(z);
  for (int a = 0; a < a_n; ++a)
    if (open[static_cast<std::size_t>(a)])
      out[static_cast<std::size_t>(a)] += weight * std::exp(v[static_cast<std::size_t>(a)] - lse);
  out[static_cast<std::size_t>(a_n)] += weight * std::exp(u_out - lse);
}

// Adds g times the design vector of inside alternative a to the gradient.
inline void add_design(const CategoryChoiceData& d, const BaselineLayout& l, const ChoiceObs& o,
                       int a, double g, double eta_draw_scale, double alpha_draw,
                       std::span<double> grad) {
  grad[static_cast<std::size_t>(l.alpha + a)] += g;
  if (l.eta >= 0) {
    const bool focal = a == l.focal_alt && l.eta_focal >= 0;
    grad[static_cast<std::size_t>(focal ? l.eta_focal : l.eta)] += g * d.log_price(a, o.session);
    if (l.ls_price >= 0)
      grad[static_cast<std::size_t>(l.ls_price)] += g * d.log_price(a, o.session) * eta_draw_scale;
  }
  if (l.beta >= 0) {
    const auto demo = d.demo.row(o.household);
    double* b = grad.data() + l.beta + a * l.d_n;
    for (int c = 0; c < l.d_n; ++c) b[c] += g * demo[static_cast<std::size_t>(c)];
  }
  if (l.wday >= 0 && o.wednesday) grad[static_cast<std::size_t>(l.wday)] += g;
  if (l.ctl >= 0) grad[static_cast<std::size_t>(l.ctl)] += g * d.control(o.household, a);
  if (l.ls_alpha >= 0) grad[static_cast<std::size_t>(l.ls_alpha)] += g * alpha_draw;
}

// Plain conditional logit over open inside alternatives plus the outside
// good. Returns the log probability of o.alt and accumulates the gradient.
inline double mnl_obs(const CategoryChoiceData& d, const LogitSpec& spec, const BaselineLayout& l,
                      std::span<const double> x, const ChoiceObs& o, double eta_shift,
                      double eta_draw_scale, std::span<const double> alpha_shift,
                      std::span<const double> alpha_draws, Work& w, std::span<double> grad) {
  inside_utilities(d, spec, l, x, o, eta_shift, alpha_shift, w.v, w.open);
  const int a_n = l.a_n;
  const double u_out = outside_utility(d, l, x, o);
  double mx = u_out;
  for (int a = 0; a < a_n; ++a)
    if (w.open[static_cast<std::size_t>(a)]) mx = std::max(mx, w.v[static_cast<std::size_t>(a)]);
  double z = std::exp(u_out - mx);
  for (int a = 0; a < a_n; ++a)
    if (w.open[static_cast<std::size_t>(a)]) z += std::exp(w.v[static_cast<std::size_t>(a)] - mx);
  const double lse = mx + std::log(z);
  const double ll = (o.alt == d.outside_alt() ? u_out : w.v[static_cast<std::size_t>(o.alt)]) - lse;

  if (!grad.empty()) {
    const double p_out = std::exp(u_out - lse);
    if (l.ctl >= 0) {
      const double g_out = (o.alt == d.outside_alt() ? 1.0 : 0.0) - p_out;
      grad[static_cast<std::size_t>(l.ctl)] += g_out * d.control(o.household, d.n_inside());
    }
    for (int a = 0; a < a_n; ++a) {
      if (!w.open[static_cast<std::size_t>(a)]) continue;
      const double p = std::exp(w.v[static_cast<std::size_t>(a)] - lse);
      const double g = (a == o.alt ? 1.0 : 0.0) - p;
      add_design(d, l, o, a, g, eta_draw_scale,
                 alpha_draws.empty() ? 0.0 : alpha_draws[static_cast<std::size_t>(a)], grad);
    }
  }
  return ll;
}

// Nested logit with the outside good alone in its nest. zeta = sigmoid(z)
// scales the within-nest utilities; zeta == 1 collapses to the plain logit.
inline double nested_obs(const CategoryChoiceData& d, const LogitSpec& spec,
                         const BaselineLayout& l, std::span<const double> x, const ChoiceObs& o,
                         Work& w, std::span<double> grad) {
  inside_utilities(d, spec, l, x, o, 0.0, {}, w.v, w.open);
  const int a_n = l.a_n;
  const double zeta = sigmoid(x[static_cast<std::size_t>(l.nest)]);
  const double u_out = outside_utility(d, l, x, o);
  double mx = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < a_n; ++a)
    if (w.open[static_cast<std::size_t>(a)]) mx = std::max(mx, w.v[static_cast<std::size_t>(a)] / zeta);
  if (!std::isfinite(mx)) {
    // Nothing available inside: the outside good is chosen with certainty.
    return o.alt == d.outside_alt() ? 0.0 : kNegInf;
  }
  double zsum = 0.0;
  for (int a = 0; a < a_n; ++a)
    if (w.open[static_cast<std::size_t>(a)])
      zsum += std::exp(w.v[static_cast<std::size_t>(a)] / zeta - mx);
  const double iv = mx + std::log(zsum);      // log-sum of scaled utilities
  const double m = zeta * iv - u_out;
  const double q = sigmoid(m);                // P(inside nest)
  double vbar = 0.0;                          // within-nest mean utility
  for (int a = 0; a < a_n; ++a)
    if (w.open[static_cast<std::size_t>(a)])
      vbar += std::exp(w.v[static_cast<std::size_t>(a)] / zeta - iv) * w.v[static_cast<std::size_t>(a)];

  double ll;
  if (o.alt == d.outside_alt()) {
    ll = -log1pexp(m);
  } else {
    ll = std::log(q) + w.v[static_cast<std::size_t>(o.alt)] / zeta - iv;
  }

  if (!grad.empty()) {
    const double dzeta = zeta * (1.0 - zeta);  // chain rule through sigmoid
    const double ctl_out = l.ctl >= 0 ? d.control(o.household, d.n_inside()) : 0.0;
    if (o.alt == d.outside_alt()) {
      for (int a = 0; a < a_n; ++a) {
        if (!w.open[static_cast<std::size_t>(a)]) continue;
        const double s = std::exp(w.v[static_cast<std::size_t>(a)] / zeta - iv);
        add_design(d, l, o, a, -q * s, 0.0, 0.0, grad);
      }
      if (l.ctl >= 0) grad[static_cast<std::size_t>(l.ctl)] += q * ctl_out;
      grad[static_cast<std::size_t>(l.nest)] += -q * (iv - vbar / zeta) * dzeta;
    } else {
      for (int a = 0; a < a_n; ++a) {
        if (!w.open[static_cast<std::size_t>(a)]) continue;
        const double s = std::exp(w.v[static_cast<std::size_t>(a)] / zeta - iv);
        const double g = (1.0 - q) * s + ((a == o.alt ? 1.0 : 0.0) - s) / zeta;
        add_design(d, l, o, a, g, 0.0, 0.0, grad);
      }
      if (l.ctl >= 0) grad[static_cast<std::size_t>(l.ctl)] += -(1.0 - q) * ctl_out;
      const double dll_dzeta = (1.0 - q) * (iv - vbar / zeta) +
                               (vbar - w.v[static_cast<std::size_t>(o.alt)]) / (zeta * zeta);
      grad[static_cast<std::size_t>(l.nest)] += dll_dzeta * dzeta;
    }
  }
  return ll;
}

}  // namespace logit_detail

// Mean log likelihood and gradient over the given observation order. The
// order must group a household's observations contiguously for the mixed
// logit's panel product.
inline double baseline_loglik(const CategoryChoiceData& d, const LogitSpec& spec,
                              const BaselineLayout& l, std::span<const double> x,
                              std::span<const std::uint32_t> order, std::span<double> grad) {
  using namespace logit_detail;
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  Work w;
  double total = 0.0;
  const double n_inv = 1.0 / static_cast<double>(order.size());

  if (spec.kind != BaselineKind::Mixed) {
    for (std::uint32_t oi : order) {
      const ChoiceObs& o = d.obs[oi];
      total += spec.kind == BaselineKind::Nested ? nested_obs(d, spec, l, x, o, w, grad)
                                                 : mnl_obs(d, spec, l, x, o, 0.0, 0.0, {}, {}, w, grad);
    }
    if (!grad.empty())
      for (double& g : grad) g *= n_inv;
    return total * n_inv;
  }

  // Mixed logit: panel likelihood per household averaged over fixed draws.
  const int rr = spec.draws;
  const double pinned = std::max(spec.fixed_mix_scale, 0.0);
  const double s_price = l.ls_price >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_price)])
                                         : (spec.random_price ? pinned : 0.0);
  const double s_alpha = l.ls_alpha >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_alpha)])
                                         : (spec.random_intercepts ? pinned : 0.0);
  std::vector<double> alpha_shift, alpha_draws;
  std::vector<double> grad_r(grad.empty() ? 0 : grad.size());
  w.lls.resize(static_cast<std::size_t>(rr));

  std::size_t lo = 0;
  while (lo < order.size()) {
    std::size_t hi = lo;
    const int hh = d.obs[order[lo]].household;
    while (hi < order.size() && d.obs[order[hi]].household == hh) ++hi;

    for (int r = 0; r < rr; ++r) {
      double ll_r = 0.0;
      const double eta_draw = spec.random_price ? household_draw(spec.seed, hh, r, 0) : 0.0;
      if (spec.random_intercepts) {
        alpha_draws.resize(static_cast<std::size_t>(l.a_n));
        alpha_shift.resize(static_cast<std::size_t>(l.a_n));
        for (int a = 0; a < l.a_n; ++a) {
          alpha_draws[static_cast<std::size_t>(a)] = household_draw(spec.seed, hh, r, 1 + a);
          alpha_shift[static_cast<std::size_t>(a)] =
              s_alpha * alpha_draws[static_cast<std::size_t>(a)];
        }
      }
      for (std::size_t k = lo; k < hi; ++k)
        ll_r += mnl_obs(d, spec, l, x, d.obs[order[k]], s_price * eta_draw, 0.0, alpha_shift,
                        {}, w, {});
      w.lls[static_cast<std::size_t>(r)] = ll_r;
    }
    const double lse = log_sum_exp(w.lls);
    total += lse - std::log(static_cast<double>(rr));

    if (!grad.empty()) {
      for (int r = 0; r < rr; ++r) {
        const double wt = std::exp(w.lls[static_cast<std::size_t>(r)] - lse);
        if (wt < 1e-14) continue;
        std::fill(grad_r.begin(), grad_r.end(), 0.0);
        const double eta_draw = spec.random_price ? household_draw(spec.seed, hh, r, 0) : 0.0;
        if (spec.random_intercepts) {
          for (int a = 0; a < l.a_n; ++a) {
            alpha_draws[static_cast<std::size_t>(a)] = household_draw(spec.seed, hh, r, 1 + a);
            alpha_shift[static_cast<std::size_t>(a)] =
                s_alpha * alpha_draws[static_cast<std::size_t>(a)];
          }
        }
        for (std::size_t k = lo; k < hi; ++k)
          mnl_obs(d, spec, l, x, d.obs[order[k]], s_price * eta_draw, s_price * eta_draw,
                  alpha_shift,
                  l.ls_alpha >= 0 ? std::span<const double>(alpha_shift) : std::span<const double>{},
                  w, grad_r);
        for (std::size_t t = 0; t < grad.size(); ++t) grad[t] += wt * grad_r[t];
      }
    }
    lo = hi;
  }
  if (!grad.empty())
    for (double& g : grad) g *= n_inv;
  return total * n_inv;
}

namespace logit_detail {

struct OptResult {
  std::vector<double> x;
  double f = 0.0;
  std::vector<double> grad;
  int iterations = 0;
  bool converged = false;
};

// Dense BFGS ascent with backtracking line search.
inline OptResult bfgs_maximize(const std::function<double(std::span<const double>, std::span<double>)>& fg,
                               std::vector<double> x0, int max_iter, double tol) {
  const std::size_t n = x0.size();
  OptResult res;
  res.x = std::move(x0);
  std::vector<double> g(n), g_new(n), dir(n), x_new(n), s(n), y(n);
  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n),
                                                    static_cast<Eigen::Index>(n));
  double f = fg(res.x, g);
  for (int it = 0; it < max_iter; ++it) {
    double gmax = 0.0;
    for (double gv : g) gmax = std::max(gmax, std::abs(gv));
    if (gmax < tol) {
      res.converged = true;
      res.iterations = it;
      break;
    }
    Eigen::Map<const Eigen::VectorXd> gv(g.data(), static_cast<Eigen::Index>(n));
    Eigen::VectorXd dv = h_inv * gv;
    for (std::size_t k = 0; k < n; ++k) dir[k] = dv(static_cast<Eigen::Index>(k));
    double slope = 0.0;
    for (std::size_t k = 0; k < n; ++k) slope += dir[k] * g[k];
    if (!(slope > 0.0)) {
      // Curvature got corrupted; restart from steepest ascent.
      h_inv.setIdentity();
      dir = g;
      slope = 0.0;
      for (double gv2 : g) slope += gv2 * gv2;
      if (!(slope > 0.0)) {
        res.iterations = it;
        break;
      }
    }
    double step = 1.0;
    double f_new = -std::numeric_limits<double>::infinity();
    bool ok = false;
    for (int bt = 0; bt < 50; ++bt) {
      for (std::size_t k = 0; k < n; ++k) x_new[k] = res.x[k] + step * dir[k];
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new >= f + 1e-4 * step * slope) {
        ok = true;
        break;
      }
      step *= 0.5;
    }
    res.iterations = it + 1;
    if (!ok) break;  // no ascent step found at the smallest scale

    for (std::size_t k = 0; k < n; ++k) {
      s[k] = x_new[k] - res.x[k];
      y[k] = g[k] - g_new[k];  // ascent on f: curvature uses -grad differences
    }
    double sy = 0.0;
    for (std::size_t k = 0; k < n; ++k) sy += s[k] * y[k];
    if (sy > 1e-12) {
      Eigen::Map<const Eigen::VectorXd> sv(s.data(), static_cast<Eigen::Index>(n));
      Eigen::Map<const Eigen::VectorXd> yv(y.data(), static_cast<Eigen::Index>(n));
      const Eigen::VectorXd hy = h_inv * yv;
      const double yhy = yv.dot(hy);
      h_inv += ((sy + yhy) / (sy * sy)) * (sv * sv.transpose()) -
               (hy * sv.transpose() + sv * hy.transpose()) / sy;
    }
    res.x = x_new;
    f = f_new;
    g = g_new;
  }
  res.f = f;
  res.grad = g;
  double gmax = 0.0;
  for (double gv : g) gmax = std::max(gmax, std::abs(gv));
  if (gmax < tol) res.converged = true;
  return res;
}

}  // namespace logit_detail

// Observed information standard errors from a central-difference Hessian of
// the total log likelihood.
inline void fill_standard_errors(MleFit& fit, std::size_t n_observations,
                                 const std::function<double(std::span<const double>, std::span<double>)>& fg) {
  const std::size_t n = fit.estimates.size();
  const double n_obs = static_cast<double>(n_observations);
  Eigen::MatrixXd hess(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  std::vector<double> x = fit.estimates, gp(n), gm(n);
  const double h = 1e-5;
  for (std::size_t k = 0; k < n; ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    fg(x, gp);
    x[k] = keep - h;
    fg(x, gm);
    x[k] = keep;
    for (std::size_t m = 0; m < n; ++m)
      hess(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m)) =
          (gp[m] - gm[m]) / (2.0 * h) * n_obs;
  }
  const Eigen::MatrixXd sym = 0.5 * (hess + hess.transpose());
  const Eigen::MatrixXd info = -sym;
  Eigen::LDLT<Eigen::MatrixXd> solver(info);
  fit.se.assign(n, std::numeric_limits<double>::quiet_NaN());
  fit.p_value.assign(n, std::numeric_limits<double>::quiet_NaN());
  if (solver.info() == Eigen::Success) {
    const Eigen::MatrixXd cov = solver.solve(Eigen::MatrixXd::Identity(
        static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
    for (std::size_t k = 0; k < n; ++k) {
      const double v = cov(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
      if (v > 0.0 && std::isfinite(v)) {
        fit.se[k] = std::sqrt(v);
        fit.p_value[k] = two_sided_p_value(fit.estimates[k], fit.se[k]);
      }
    }
  } else {
    fit.warnings.push_back("observed information not positive definite; no standard errors");
  }
}

inline MleFit fit_baseline(const CategoryChoiceData& data, const LogitSpec& spec) {
  spec.validate();
  if (spec.hpf_controls && !data.has_controls)
    throw DataError("specification asks for preference controls but none are attached");
  if (data.obs.empty()) throw DataError("no observations for this category and split");

  // Canonical processing order: household runs, then time. Makes every
  // reduction independent of the caller's row order.
  std::vector<std::uint32_t> order(data.obs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    const ChoiceObs& oa = data.obs[a];
    const ChoiceObs& ob = data.obs[b];
    if (oa.household != ob.household) return oa.household < ob.household;
    if (oa.session != ob.session) return oa.session < ob.session;
    return oa.alt < ob.alt;
  });

  MleFit fit;
  fit.spec = spec;
  fit.n_obs = static_cast<std::int64_t>(data.obs.size());

  // Price identification scan over the open choice sets.
  bool price_active = spec.price;
  if (spec.price) {
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (const ChoiceObs& o : data.obs)
      for (int a = 0; a < data.n_inside(); ++a)
        if (data.avail[static_cast<std::size_t>(a)][static_cast<std::size_t>(o.session)] ||
            a == o.alt) {
          mn = std::min(mn, data.log_price(a, o.session));
          mx = std::max(mx, data.log_price(a, o.session));
        }
    if (!(mx - mn > 1e-9)) {
      price_active = false;
      fit.price_identified = false;
      fit.warnings.push_back("price coefficient not identified: no price variation");
    }
  }
  bool focal_active = spec.separate_price_alt >= 0 && price_active;
  if (spec.separate_price_alt >= 0) {
    if (spec.separate_price_alt >= data.n_inside())
      throw ConfigError("separate price alternative out of range for this category");
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    const int f = spec.separate_price_alt;
    for (const ChoiceObs& o : data.obs)
      if (data.avail[static_cast<std::size_t>(f)][static_cast<std::size_t>(o.session)] ||
          f == o.alt) {
        mn = std::min(mn, data.log_price(f, o.session));
        mx = std::max(mx, data.log_price(f, o.session));
      }
    if (!(mx - mn > 1e-9)) {
      focal_active = false;
      fit.focal_price_identified = false;
      fit.warnings.push_back("separate price coefficient not identified: focal price constant");
    }
  }
  fit.layout = BaselineLayout::make(data, spec, price_active, focal_active);
  fit.names = fit.layout.names();

  // Separation scan: an alternative nobody ever chooses sends its intercept
  // to minus infinity; a small ridge keeps the optimum interior.
  std::vector<std::int64_t> chosen(static_cast<std::size_t>(data.n_inside()) + 1, 0);
  for (const ChoiceObs& o : data.obs) ++chosen[static_cast<std::size_t>(o.alt)];
  double ridge = 0.0;
  for (std::size_t a = 0; a < chosen.size(); ++a)
    if (chosen[a] == 0) {
      ridge = 1e-3;
      fit.ridge_fallback = true;
      fit.warnings.push_back("alternative " + std::to_string(a) +
                             " never chosen; ridge-penalized estimates");
      break;
    }

  const BaselineLayout& l = fit.layout;
  auto objective = [&](std::span<const double> x, std::span<double> grad) {
    double f = baseline_loglik(data, spec, l, x, order, grad);
    if (ridge > 0.0) {
      double pen = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) {
        pen += x[k] * x[k];
        if (!grad.empty()) grad[k] -= ridge * x[k] / static_cast<double>(order.size());
      }
      f -= 0.5 * ridge * pen / static_cast<double>(order.size());
    }
    return f;
  };

  std::vector<double> x0(static_cast<std::size_t>(l.total), 0.0);
  if (l.ls_price >= 0) x0[static_cast<std::size_t>(l.ls_price)] = std::log(0.2);
  if (l.ls_alpha >= 0) x0[static_cast<std::size_t>(l.ls_alpha)] = std::log(0.2);

  logit_detail::OptResult opt =
      logit_detail::bfgs_maximize(objective, std::move(x0), spec.max_iter, spec.tolerance);
  fit.estimates = opt.x;
  fit.converged = opt.converged;
  fit.iterations = opt.iterations;
  double gmax = 0.0;
  for (double gv : opt.grad) gmax = std::max(gmax, std::abs(gv));
  fit.grad_norm = gmax;
  if (!fit.converged)
    fit.warnings.push_back("optimizer stopped before reaching the gradient tolerance");

  // Reported likelihood is recomputed from the final estimates, unpenalized.
  fit.mean_ll = baseline_loglik(data, spec, l, fit.estimates, order, {});
  fit.log_lik = fit.mean_ll * static_cast<double>(order.size());

  if (l.nest >= 0 && fit.nest_coefficient() > 0.999) {
    fit.nest_at_boundary = true;
    fit.warnings.push_back("nesting coefficient at the plain-logit boundary");
  }

  auto plain = [&](std::span<const double> x, std::span<double> grad) {
    return baseline_loglik(data, spec, l, x, order, grad);
  };
  fill_standard_errors(fit, order.size(), plain);
  return fit;
}

inline MleFit fit_mnl(const CategoryChoiceData& data, const LogitSpec& spec) {
  if (spec.kind != BaselineKind::Mnl) throw ConfigError("fit_mnl wants a plain logit spec");
  return fit_baseline(data, spec);
}

inline MleFit fit_nested_logit(const CategoryChoiceData& data, const LogitSpec& spec) {
  if (spec.kind != BaselineKind::Nested) throw ConfigError("fit_nested_logit wants a nested spec");
  return fit_baseline(data, spec);
}

inline MleFit fit_mixed_logit(const CategoryChoiceData& data, const LogitSpec& spec) {
  if (spec.kind != BaselineKind::Mixed) throw ConfigError("fit_mixed_logit wants a mixed spec");
  return fit_baseline(data, spec);
}

inline MleFit fit_mixed_logit(const CategoryChoiceData& data, LogitSpec spec, int draws,
                              std::uint64_t seed) {
  spec.draws = draws;
  spec.seed = seed;
  return fit_mixed_logit(data, spec);
}

// Per-observation alternative probabilities, inside alternatives then the
// outside good in the last column. The mixed logit averages over its fitted
// draw set.
inline Matrix predict_probs(const CategoryChoiceData& data, const MleFit& fit) {
  using namespace logit_detail;
  const BaselineLayout& l = fit.layout;
  const int a_n = l.a_n;
  Matrix out(static_cast<int>(data.obs.size()), a_n + 1, 0.0);
  Work w;
  std::vector<double> alpha_shift;
  const std::span<const double> x(fit.estimates);

  for (std::size_t oi = 0; oi < data.obs.size(); ++oi) {
    const ChoiceObs& o = data.obs[oi];
    if (o.household < 0 || o.household >= data.n_households)
      throw DataError("prediction for a household outside the fitted panel");
    auto accumulate = [&](double weight, double eta_shift, std::span<const double> ashift) {
      inside_utilities(data, fit.spec, l, x, o, eta_shift, ashift, w.v, w.open);
      const double u_out = outside_utility(data, l, x, o);
      add_alt_probs(fit.spec, l, x, w.v, w.open, u_out, weight, out.row(static_cast<int>(oi)));
    };

    if (fit.spec.kind != BaselineKind::Mixed) {
      accumulate(1.0, 0.0, {});
    } else {
      const int rr = fit.spec.draws;
      const double pinned = std::max(fit.spec.fixed_mix_scale, 0.0);
      const double s_price = l.ls_price >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_price)])
                                             : (fit.spec.random_price ? pinned : 0.0);
      const double s_alpha = l.ls_alpha >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_alpha)])
                                             : (fit.spec.random_intercepts ? pinned : 0.0);
      for (int r = 0; r < rr; ++r) {
        const double eta_shift =
            fit.spec.random_price ? s_price * household_draw(fit.spec.seed, o.household, r, 0)
                                  : 0.0;
        if (fit.spec.random_intercepts) {
          alpha_shift.resize(static_cast<std::size_t>(a_n));
          for (int a = 0; a < a_n; ++a)
            alpha_shift[static_cast<std::size_t>(a)] =
                s_alpha * household_draw(fit.spec.seed, o.household, r, 1 + a);
        }
        accumulate(1.0 / static_cast<double>(rr), eta_shift,
                   fit.spec.random_intercepts ? std::span<const double>(alpha_shift)
                                              : std::span<const double>{});
      }
    }
  }
  return out;
}

// Alternative probabilities for one household and session at caller-supplied
// inside log prices and availability (outside good last). At the observed
// grid state this reproduces the matching predict_probs row; counterfactual
// price or stock queries pass perturbed spans. Unavailable alternatives get
// probability zero, with no forced-open chosen alternative.
inline std::vector<double> counterfactual_probs(const CategoryChoiceData& data, const MleFit& fit,
                                                int household, int session,
                                                std::span<const double> log_price,
                                                std::span<const std::uint8_t> avail) {
  using namespace logit_detail;
  const BaselineLayout& l = fit.layout;
  const int a_n = l.a_n;
  if (static_cast<int>(log_price.size()) != a_n || static_cast<int>(avail.size()) != a_n)
    throw ConfigError("counterfactual query width does not match the category's alternatives");
  if (household < 0 || household >= data.n_households)
    throw DataError("prediction for a household outside the fitted panel");
  if (session < 0 || session >= data.log_price.cols())
    throw DataError("counterfactual session outside the fitted grid");
  const int week_slot = session / 2;
  const int wednesday = session % 2;
  std::vector<double> out(static_cast<std::size_t>(a_n) + 1, 0.0);
  Work w;
  std::vector<double> alpha_shift;
  const std::span<const double> x(fit.estimates);

  auto accumulate = [&](double weight, double eta_shift, std::span<const double> ashift) {
    inside_utilities_at(data, fit.spec, l, x, household, week_slot, wednesday, log_price, avail,
                        eta_shift, ashift, w.v, w.open);
    const double u_out = outside_utility(data, l, x, household);
    add_alt_probs(fit.spec, l, x, w.v, w.open, u_out, weight, out);
  };

  if (fit.spec.kind != BaselineKind::Mixed) {
    accumulate(1.0, 0.0, {});
    return out;
  }
  const int rr = fit.spec.draws;
  const double pinned = std::max(fit.spec.fixed_mix_scale, 0.0);
  const double s_price = l.ls_price >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_price)])
                                         : (fit.spec.random_price ? pinned : 0.0);
  const double s_alpha = l.ls_alpha >= 0 ? std::exp(x[static_cast<std::size_t>(l.ls_alpha)])
                                         : (fit.spec.random_intercepts ? pinned : 0.0);
  for (int r = 0; r < rr; ++r) {
    const double eta_shift =
        fit.spec.random_price ? s_price * household_draw(fit.spec.seed, household, r, 0) : 0.0;
    if (fit.spec.random_intercepts) {
      alpha_shift.resize(static_cast<std::size_t>(a_n));
      for (int a = 0; a < a_n; ++a)
        alpha_shift[static_cast<std::size_t>(a)] =
            s_alpha * household_draw(fit.spec.seed, household, r, 1 + a);
    }
    accumulate(1.0 / static_cast<double>(rr), eta_shift,
               fit.spec.random_intercepts ? std::span<const double>(alpha_shift)
                                          : std::span<const double>{});
  }
  return out;
}

// Joins the control table onto the category's alternatives: top items get
// their own control, the pooled alternative a share-weighted blend, and the
// outside good one minus the sum of the inside values.
inline void attach_hpf_controls(CategoryChoiceData& data, const ControlTable& table) {
  std::vector<std::string> missing;
  const int a_n = data.n_inside();
  data.control = Matrix(data.n_households, a_n + 1, 0.0);
  for (int i = 0; i < data.n_households; ++i) {
    for (std::size_t r = 0; r < data.top_items.size(); ++r) {
      const int j = data.top_items[r];
      if (!table.has(i, j)) {
        if (missing.size() < 8)
          missing.push_back("(" + std::to_string(i) + "," + std::to_string(j) + ")");
        continue;
      }
      data.control(i, static_cast<int>(r)) = table.at(i, j);
    }
    if (data.has_pooled()) {
      double blend = 0.0;
      for (std::size_t k = 0; k < data.pooled_items.size(); ++k) {
        const int j = data.pooled_items[k];
        if (!table.has(i, j)) {
          if (missing.size() < 8)
            missing.push_back("(" + std::to_string(i) + "," + std::to_string(j) + ")");
          continue;
        }
        blend += data.pooled_weight[k] * table.at(i, j);
      }
      data.control(i, a_n - 1) = blend;
    }
    double inside = 0.0;
    for (int a = 0; a < a_n; ++a) inside += data.control(i, a);
    data.control(i, a_n) = 1.0 - inside;
  }
  if (!missing.empty()) {
    std::string msg = "control coverage gaps for pairs:";
    for (const std::string& p : missing) msg += " " + p;
    throw DataError(msg);
  }
  data.has_controls = true;
}

}  // namespace nestfact
