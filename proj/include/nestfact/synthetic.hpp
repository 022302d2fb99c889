#pragma once

// Ground-truth generator and brute-force reference math. The generator draws
// a full latent parameter set, simulates Tuesday/Wednesday shopping with
// Tuesday-night price changes and planted stock-outs, and can plant price
// endogeneity (prices raised in high-demand weeks with a Wednesday-specific
// demand component) to give the placebo suite a target.
//
// brute_force_probs and analytic_elasticity are deliberately independent of
// choice_kernel: they recompute the nested probabilities with their own
// loops so the two implementations can cross-check each other.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nestfact/choice_kernel.hpp"
#include "nestfact/config.hpp"
#include "nestfact/dates.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/session_grid.hpp"

namespace nestfact {

struct SyntheticConfig {
  int n_households = 500;
  int n_categories = 20;
  int items_per_category = 8;
  int n_weeks = 80;
  int k_factors = 3;   // latent intercept factors
  int m_factors = 1;   // sensitivity factors
  int r_factors = 1;   // week-trend factors
  int n_item_covariates = 0;

  // Parameter distributions.
  double theta_sd = 0.8;
  double beta_class_sd = 0.5;     // class-level mean of beta_j
  double beta_subclass_sd = 0.35; // subclass-level mean
  double beta_resid_sd = 0.4;
  bool class_correlated_beta = true;
  double gamma_mean = 1.0;
  double gamma_sd = 0.3;
  double lambda_mean = 0.8;
  double lambda_sd = 0.3;
  double lambda_c_mean = 0.35;
  double lambda_c_sd = 0.10;
  double rho_intercept_sd = 0.5;
  double rho_sd = 0.25;
  double beta_c_sd = 0.8;
  double rho_c_intercept_mean = -2.0;
  double rho_c_intercept_sd = 0.5;
  double rho_c_sd = 0.25;
  double sigma_sd = 0.3;
  double mu_sd = 0.3;
  double delta_sd = 0.4;
  double wday_sd = 0.15;

  // Elasticity segments (two-point gamma distribution) for targeting tests.
  bool elasticity_segments = false;
  double gamma_low = 0.2;
  double gamma_high = 1.6;

  // Price process (all changes on Tuesday nights). Persistent changes move
  // the base level; promotions are one-week temporary cuts that revert on
  // their own. Promo-heavy processes keep the price-shift placebo honest:
  // with persistent changes a shifted series still tracks the real levels,
  // while one-week cuts relocate to disjoint weeks.
  double base_price_min = 0.99;
  double base_price_max = 6.99;
  double price_change_prob = 0.25;
  double price_change_frac_min = 0.05;
  double price_change_frac_max = 0.35;
  double price_floor = 0.29;
  double promo_prob = 0.0;
  double promo_depth_min = 0.10;
  double promo_depth_max = 0.35;

  // Stock-outs.
  double oos_prob = 0.02;

  // Shopping behavior.
  double shop_prob_min = 0.35;
  double shop_prob_max = 0.65;
  double multi_item_prob = 0.01;

  // Marginal costs.
  double cost_frac_min = 0.4;
  double cost_frac_max = 0.7;
  double cost_missing_prob = 0.15;

  // Planted endogeneity: AR(1) demand shock per (category, week); the shock
  // adds endo_demand_gain * shock to Wednesday category utility, and the
  // Wednesday-onward price is raised by endo_price_shift in top-quartile
  // shock weeks.
  bool endogenous_prices = false;
  double demand_shock_rho = 0.8;
  double demand_shock_sd = 1.0;
  double endo_demand_gain = 0.0;
  double endo_price_shift = 0.40;

  std::uint64_t seed = 1;

  int n_modeled_items() const { return n_categories * items_per_category; }
};

struct SyntheticTruth {
  SyntheticConfig config;
  // Raw parameter arrays (households/items/categories index the hierarchy).
  std::vector<std::vector<double>> theta, beta, gamma, lambda, rho, sigma;
  std::vector<std::vector<double>> beta_c, lambda_c, rho_c, mu_c, delta;
  std::vector<std::vector<double>> wday;      // C x 2
  std::vector<std::vector<double>> w;         // encoded household covariates
  std::vector<std::vector<double>> x;         // item covariates
  std::vector<std::vector<double>> shock;     // C x T demand shock (standardized)
  std::vector<std::vector<std::uint8_t>> hot; // C x T top-quartile indicator
  // Raw demographics (for the households file).
  std::vector<double> raw_age, raw_income, raw_size;
  std::vector<std::string> raw_gender, raw_marital;
};

struct SyntheticData {
  ProductHierarchy hierarchy;
  TransactionPanel panel;
  SessionGrid grid;  // true prices and availability; week_rate left empty
  SyntheticTruth truth;
};

namespace synth_detail {

inline double round_cents(double p) { return std::llround(p * 100.0) / 100.0; }

inline std::vector<double> draw_vec(Rng& rng, int n, double mean, double sd) {
  std::normal_distribution<double> nd(mean, sd);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& e : v) e = nd(rng);
  return v;
}

}  // namespace synth_detail

// Anchor Tuesday for generated panels.
inline const std::int64_t kSynthAnchor = days_from_civil(2019, 3, 5);

// Catalog that keeps every multi-item category, bypassing the data-driven
// screens; items rank in id order. Intended for synthetic scenarios whose
// scale is too small for the screens to be meaningful.
inline CategoryCatalog catalog_keep_all(const ProductHierarchy& h, int top_n) {
  CategoryCatalog cat;
  cat.top_n = top_n;
  const int n_cats = h.categories.size();
  cat.slot_of_category.assign(static_cast<std::size_t>(n_cats), -1);
  cat.rank_of_item.assign(static_cast<std::size_t>(h.n_items()), -1);
  std::vector<int> count(static_cast<std::size_t>(n_cats), 0);
  for (int c : h.category_of) ++count[static_cast<std::size_t>(c)];
  for (int c = 0; c < n_cats; ++c) {
    if (count[static_cast<std::size_t>(c)] < 2) continue;
    cat.slot_of_category[static_cast<std::size_t>(c)] = static_cast<int>(cat.categories.size());
    cat.categories.push_back(c);
    cat.top_items.emplace_back();
    cat.pooled_items.emplace_back();
  }
  std::vector<int> next_rank(static_cast<std::size_t>(n_cats), 0);
  for (int j = 0; j < h.n_items(); ++j) {
    const int c = h.category_of[static_cast<std::size_t>(j)];
    const int slot = cat.slot_of_category[static_cast<std::size_t>(c)];
    if (slot < 0) continue;
    const int r = next_rank[static_cast<std::size_t>(c)]++;
    if (r < top_n) {
      cat.rank_of_item[static_cast<std::size_t>(j)] = r;
      cat.top_items[static_cast<std::size_t>(slot)].push_back(j);
    } else {
      cat.rank_of_item[static_cast<std::size_t>(j)] = top_n;
      cat.pooled_items[static_cast<std::size_t>(slot)].push_back(j);
    }
  }
  return cat;
}

inline SyntheticData generate_panel(const SyntheticConfig& cfg) {
  if (cfg.n_households < 1 || cfg.n_categories < 1 || cfg.items_per_category < 2 ||
      cfg.n_weeks < 2 || cfg.k_factors < 1 || cfg.m_factors < 1 || cfg.r_factors < 1)
    throw ConfigError("synthetic dims must be positive (and >= 2 items per category)");
  SyntheticData data;
  SyntheticTruth& truth = data.truth;
  truth.config = cfg;
  const int C = cfg.n_categories;
  const int Jm = cfg.n_modeled_items();
  const int T = cfg.n_weeks;
  const int N = cfg.n_households;
  const int K = cfg.k_factors;
  const int M = cfg.m_factors;
  const int R = cfg.r_factors;
  const int Q = cfg.n_item_covariates;
  const std::uint64_t seed = cfg.seed;

  // Hierarchy: two classes and four subclasses per category; the staple
  // category (one always-available item every trip buys) is appended last so
  // modeled indices stay 0..C-1 / 0..Jm-1.
  ProductHierarchy& h = data.hierarchy;
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x10);
    std::uniform_real_distribution<double> base_p(cfg.base_price_min, cfg.base_price_max);
    std::uniform_real_distribution<double> cost_f(cfg.cost_frac_min, cfg.cost_frac_max);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);
    char buf[32];
    for (int c = 0; c < C; ++c) {
      const int cat = h.categories.intern("cat" + std::to_string(c));
      for (int j = 0; j < cfg.items_per_category; ++j) {
        std::snprintf(buf, sizeof(buf), "upc%03d_%02d", c, j);
        h.upcs.intern(buf);
        h.category_of.push_back(cat);
        const int cls = j * 2 / cfg.items_per_category;          // 2 classes
        const int sub = j * 4 / cfg.items_per_category;          // 4 subclasses
        h.class_of.push_back(h.classes.intern("cls" + std::to_string(c * 2 + cls)));
        h.subclass_of.push_back(h.subclasses.intern("sub" + std::to_string(c * 4 + sub)));
        const double base = synth_detail::round_cents(base_p(rng));
        h.cost.push_back(unif(rng) < cfg.cost_missing_prob
                             ? std::nan("")
                             : synth_detail::round_cents(base * cost_f(rng)));
      }
    }
    h.upcs.intern("staple_item");
    h.category_of.push_back(h.categories.intern("staple"));
    h.class_of.push_back(h.classes.intern("cls_staple"));
    h.subclass_of.push_back(h.subclasses.intern("sub_staple"));
    h.cost.push_back(0.50);
    h.item_covariates = Matrix(h.n_items(), Q);
    for (int j = 0; j < h.n_items(); ++j)
      for (int q = 0; q < Q; ++q) h.item_covariates(j, q) = nd(rng);
  }

  // Demographics.
  CovariateConfig cov_cfg;
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x20);
    std::uniform_real_distribution<double> age_d(20.0, 79.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> log_inc(std::log(45000.0), 0.6);
    std::binomial_distribution<int> size_d(5, 0.3);
    for (int i = 0; i < N; ++i) {
      truth.raw_age.push_back(std::floor(age_d(rng)));
      truth.raw_gender.push_back(unif(rng) < 0.54 ? "F" : "M");
      truth.raw_marital.push_back(unif(rng) < 0.5 ? "married" : "single");
      truth.raw_income.push_back(std::floor(std::exp(log_inc(rng))));
      truth.raw_size.push_back(1.0 + size_d(rng));
      auto info = encode_household(truth.raw_age[i], truth.raw_gender[i], truth.raw_marital[i],
                                   truth.raw_income[i], truth.raw_size[i], cov_cfg);
      truth.w.push_back(info.w);
    }
  }
  const int P = cov_cfg.width();

  // Latent parameters.
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x30);
    using synth_detail::draw_vec;
    for (int i = 0; i < N; ++i) truth.theta.push_back(draw_vec(rng, K, 0.0, cfg.theta_sd));
    std::vector<std::vector<double>> cls_mean, sub_mean;
    for (int s = 0; s < h.classes.size(); ++s)
      cls_mean.push_back(draw_vec(rng, K, 0.0, cfg.beta_class_sd));
    for (int s = 0; s < h.subclasses.size(); ++s)
      sub_mean.push_back(draw_vec(rng, K, 0.0, cfg.beta_subclass_sd));
    for (int j = 0; j < Jm; ++j) {
      std::vector<double> b = draw_vec(rng, K, 0.0,
                                       cfg.class_correlated_beta ? cfg.beta_resid_sd : cfg.theta_sd);
      if (cfg.class_correlated_beta) {
        for (int k = 0; k < K; ++k)
          b[k] += cls_mean[h.class_of[j]][k] + sub_mean[h.subclass_of[j]][k];
      }
      truth.beta.push_back(std::move(b));
    }
    for (int i = 0; i < N; ++i) {
      if (cfg.elasticity_segments) {
        std::vector<double> g(static_cast<std::size_t>(M), i % 2 == 0 ? cfg.gamma_low : cfg.gamma_high);
        truth.gamma.push_back(std::move(g));
      } else {
        truth.gamma.push_back(draw_vec(rng, M, cfg.gamma_mean, cfg.gamma_sd));
      }
    }
    for (int j = 0; j < Jm; ++j) truth.lambda.push_back(draw_vec(rng, M, cfg.lambda_mean, cfg.lambda_sd));
    for (int j = 0; j < Jm; ++j) {
      std::vector<double> r = draw_vec(rng, P, 0.0, cfg.rho_sd);
      std::normal_distribution<double> nd0(0.0, cfg.rho_intercept_sd);
      r[0] = nd0(rng);
      truth.rho.push_back(std::move(r));
    }
    for (int i = 0; i < N; ++i) truth.sigma.push_back(draw_vec(rng, Q, 0.0, cfg.sigma_sd));
    for (int c = 0; c < C; ++c) truth.beta_c.push_back(draw_vec(rng, K, 0.0, cfg.beta_c_sd));
    for (int c = 0; c < C; ++c) {
      auto l = draw_vec(rng, M, cfg.lambda_c_mean, cfg.lambda_c_sd);
      for (double& v : l) v = std::max(0.05, v);
      truth.lambda_c.push_back(std::move(l));
    }
    for (int c = 0; c < C; ++c) {
      std::vector<double> r = draw_vec(rng, P, 0.0, cfg.rho_c_sd);
      std::normal_distribution<double> nd0(cfg.rho_c_intercept_mean, cfg.rho_c_intercept_sd);
      r[0] = nd0(rng);
      truth.rho_c.push_back(std::move(r));
    }
    for (int c = 0; c < C; ++c) truth.mu_c.push_back(draw_vec(rng, R, 0.0, cfg.mu_sd));
    for (int t = 0; t < T; ++t) truth.delta.push_back(draw_vec(rng, R, 0.0, cfg.delta_sd));
    for (int c = 0; c < C; ++c) truth.wday.push_back(draw_vec(rng, 2, 0.0, cfg.wday_sd));
  }

  // Demand shock (AR(1), standardized per category) and hot weeks.
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x40);
    std::normal_distribution<double> nd(0.0, 1.0);
    const double phi = cfg.demand_shock_rho;
    truth.shock.assign(static_cast<std::size_t>(C), std::vector<double>(static_cast<std::size_t>(T), 0.0));
    truth.hot.assign(static_cast<std::size_t>(C), std::vector<std::uint8_t>(static_cast<std::size_t>(T), 0));
    for (int c = 0; c < C; ++c) {
      double s = nd(rng) * cfg.demand_shock_sd;
      for (int t = 0; t < T; ++t) {
        truth.shock[c][t] = s;
        s = phi * s + nd(rng) * cfg.demand_shock_sd * std::sqrt(1.0 - phi * phi);
      }
      std::vector<double> sorted = truth.shock[c];
      std::sort(sorted.begin(), sorted.end());
      const double q75 = sorted[static_cast<std::size_t>(std::floor(0.75 * (T - 1)))];
      for (int t = 0; t < T; ++t) truth.hot[c][t] = truth.shock[c][t] > q75;
      const double m = mean(truth.shock[c]);
      const double sd = std::max(1e-9, stddev(truth.shock[c]));
      for (int t = 0; t < T; ++t) truth.shock[c][t] = (truth.shock[c][t] - m) / sd;
    }
  }

  // Price paths: b_w is the price in force from Wednesday of week w through
  // Tuesday of week w+1, so every change lands on a Tuesday night. The
  // endogenous raise is temporary (applies while the week stays hot).
  SessionGrid& grid = data.grid;
  grid.n_items = h.n_items();
  grid.weeks.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) grid.weeks[static_cast<std::size_t>(t)] = week_of(kSynthAnchor) + t;
  grid.price = Matrix(grid.n_items, 2 * T, 0.0);
  grid.available.assign(static_cast<std::size_t>(grid.n_items) * (2 * T), 1);
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x50);
    std::uniform_real_distribution<double> base_p(cfg.base_price_min, cfg.base_price_max);
    std::uniform_real_distribution<double> frac(cfg.price_change_frac_min, cfg.price_change_frac_max);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int j = 0; j < Jm; ++j) {
      const int c = h.category_of[j];
      // Promotions draw from a per-item stream so that turning them on does
      // not perturb the base-path draws shared with promo-free configs.
      auto rng_promo = make_rng(seed, rng_stream::kInit, mix64(0x55, static_cast<std::uint64_t>(j)));
      std::uniform_real_distribution<double> depth(cfg.promo_depth_min, cfg.promo_depth_max);
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      double base = synth_detail::round_cents(base_p(rng));
      double prev_b = base;  // price in force entering week 0's Tuesday
      for (int t = 0; t < T; ++t) {
        if (unif(rng) < cfg.price_change_prob) {
          const double f = frac(rng);
          const double dir = unif(rng) < 0.5 ? -1.0 : 1.0;
          base = synth_detail::round_cents(std::max(cfg.price_floor, base * (1.0 + dir * f)));
        }
        double level = base;
        if (cfg.promo_prob > 0.0 && u01(rng_promo) < cfg.promo_prob)
          level = synth_detail::round_cents(std::max(cfg.price_floor, base * (1.0 - depth(rng_promo))));
        double b = level;
        if (cfg.endogenous_prices && truth.hot[c][t])
          b = synth_detail::round_cents(level + cfg.endo_price_shift);
        grid.price(j, 2 * t) = prev_b;
        grid.price(j, 2 * t + 1) = b;
        prev_b = b;
      }
    }
    for (int t = 0; t < T; ++t) {
      grid.price(Jm, 2 * t) = 1.00;  // staple
      grid.price(Jm, 2 * t + 1) = 1.00;
    }
    // Stock-outs per (modeled item, session).
    for (int j = 0; j < Jm; ++j) {
      auto rng_oos = make_rng(seed, rng_stream::kInit, mix64(0x60, static_cast<std::uint64_t>(j)));
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      for (int s = 0; s < 2 * T; ++s)
        if (u01(rng_oos) < cfg.oos_prob)
          grid.available[static_cast<std::size_t>(j) * (2 * T) + s] = 0;
    }
  }

  // Households and trips.
  TransactionPanel& panel = data.panel;
  for (int i = 0; i < N; ++i) {
    panel.household_ids.intern("hh" + std::to_string(i));
    auto info = encode_household(truth.raw_age[i], truth.raw_gender[i], truth.raw_marital[i],
                                 truth.raw_income[i], truth.raw_size[i], cov_cfg);
    panel.households.push_back(std::move(info));
  }
  std::vector<double> shop_prob(static_cast<std::size_t>(N));
  {
    auto rng = make_rng(seed, rng_stream::kInit, 0x70);
    std::uniform_real_distribution<double> sp(cfg.shop_prob_min, cfg.shop_prob_max);
    for (int i = 0; i < N; ++i) shop_prob[static_cast<std::size_t>(i)] = sp(rng);
  }

  const int n_sessions = 2 * T;
  for (int i = 0; i < N; ++i) {
    for (int t = 0; t < T; ++t) {
      for (int wd = 0; wd < 2; ++wd) {
        auto rng = make_rng(seed, rng_stream::kGenerator,
                            mix64(static_cast<std::uint64_t>(i),
                                  static_cast<std::uint64_t>(t * 2 + wd)));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        if (unif(rng) >= shop_prob[static_cast<std::size_t>(i)]) continue;
        Trip trip;
        trip.household = i;
        trip.day = kSynthAnchor + static_cast<std::int64_t>(t) * 7 + wd;
        trip.week = week_of(trip.day);
        trip.weekday = wd == 0 ? kTuesday : kWednesday;
        const int sess = 2 * t + wd;
        for (int c = 0; c < C; ++c) {
          // Item utilities over available items.
          double u_max = kNegInf;
          std::vector<double> u(static_cast<std::size_t>(cfg.items_per_category), kNegInf);
          std::vector<int> avail_items;
          for (int jj = 0; jj < cfg.items_per_category; ++jj) {
            const int j = c * cfg.items_per_category + jj;
            if (!grid.available[static_cast<std::size_t>(j) * n_sessions + sess]) continue;
            double v = 0.0;
            for (int k = 0; k < K; ++k) v += truth.theta[i][k] * truth.beta[j][k];
            for (int p = 0; p < P; ++p) v += truth.w[i][p] * truth.rho[j][p];
            for (int q = 0; q < Q; ++q) v += truth.sigma[i][q] * h.item_covariates(j, q);
            double gl = 0.0;
            for (int m = 0; m < M; ++m) gl += truth.gamma[i][m] * truth.lambda[j][m];
            v -= gl * std::log(grid.price(j, sess));
            u[static_cast<std::size_t>(jj)] = v;
            u_max = std::max(u_max, v);
            avail_items.push_back(jj);
          }
          if (avail_items.empty()) continue;  // empty category: forced no-buy
          double denom = 0.0;
          for (int jj : avail_items) denom += std::exp(u[static_cast<std::size_t>(jj)] - u_max);
          const double iv = u_max + std::log(denom);
          double u_c = 0.0;
          for (int k = 0; k < K; ++k) u_c += truth.theta[i][k] * truth.beta_c[c][k];
          for (int p = 0; p < P; ++p) u_c += truth.w[i][p] * truth.rho_c[c][p];
          double glc = 0.0;
          for (int m = 0; m < M; ++m) glc += truth.gamma[i][m] * truth.lambda_c[c][m];
          u_c += glc * iv;
          double mdelta = 0.0;
          for (int r = 0; r < R; ++r) mdelta += truth.mu_c[c][r] * truth.delta[t][r];
          u_c += mdelta + truth.wday[c][wd];
          if (wd == 1) u_c += cfg.endo_demand_gain * truth.shock[c][t];
          const double p_buy = 1.0 / (1.0 + std::exp(-u_c));
          if (unif(rng) >= p_buy) continue;
          // Item draw via inverse CDF over the conditional softmax.
          double target = unif(rng) * denom;
          int chosen = avail_items.back();
          for (int jj : avail_items) {
            target -= std::exp(u[static_cast<std::size_t>(jj)] - u_max);
            if (target <= 0.0) {
              chosen = jj;
              break;
            }
          }
          const int item = c * cfg.items_per_category + chosen;
          trip.purchases.push_back({item, 1, grid.price(item, sess)});
          if (unif(rng) < cfg.multi_item_prob) {
            const int extra = avail_items[static_cast<std::size_t>(rng() % avail_items.size())];
            const int extra_item = c * cfg.items_per_category + extra;
            trip.purchases.push_back({extra_item, 1, grid.price(extra_item, sess)});
          }
        }
        // OOS listings for every unavailable modeled item on this trip.
        for (int j = 0; j < Jm; ++j)
          if (!grid.available[static_cast<std::size_t>(j) * n_sessions + sess])
            trip.oos_items.push_back(j);
        // Staple purchase makes every trip visible to ingestion.
        trip.purchases.push_back({Jm, 1, 1.00});
        panel.trips.push_back(std::move(trip));
      }
    }
  }
  return data;
}

// ---- Brute-force reference math (independent of choice_kernel) ----

// Unconditional probabilities for one (household, category, session): entries
// for each of the category's items followed by the outside good. Unavailable
// items get probability 0.
inline std::vector<double> brute_force_probs(const SyntheticTruth& truth,
                                             const ProductHierarchy& h, const SessionGrid& grid,
                                             int household, int category, int week_slot,
                                             int weekday_slot) {
  const SyntheticConfig& cfg = truth.config;
  const int J = cfg.items_per_category;
  const int sess = 2 * week_slot + weekday_slot;
  const int n_sessions = grid.n_sessions();
  std::vector<double> out(static_cast<std::size_t>(J) + 1, 0.0);

  std::vector<double> expu(static_cast<std::size_t>(J), 0.0);
  double u_max = kNegInf;
  bool any = false;
  std::vector<double> u(static_cast<std::size_t>(J), 0.0);
  std::vector<bool> ok(static_cast<std::size_t>(J), false);
  for (int jj = 0; jj < J; ++jj) {
    const int j = category * J + jj;
    if (!grid.available[static_cast<std::size_t>(j) * n_sessions + sess]) continue;
    double v = 0.0;
    for (std::size_t k = 0; k < truth.theta[household].size(); ++k)
      v += truth.theta[household][k] * truth.beta[j][k];
    for (std::size_t p = 0; p < truth.w[household].size(); ++p)
      v += truth.w[household][p] * truth.rho[j][p];
    for (std::size_t q = 0; q < truth.sigma[household].size(); ++q)
      v += truth.sigma[household][q] * h.item_covariates(j, static_cast<int>(q));
    double gl = 0.0;
    for (std::size_t m = 0; m < truth.gamma[household].size(); ++m)
      gl += truth.gamma[household][m] * truth.lambda[j][m];
    v -= gl * std::log(grid.price(j, sess));
    u[static_cast<std::size_t>(jj)] = v;
    ok[static_cast<std::size_t>(jj)] = true;
    u_max = std::max(u_max, v);
    any = true;
  }
  if (!any) {
    out.back() = 1.0;
    return out;
  }
  double denom = 0.0;
  for (int jj = 0; jj < J; ++jj) {
    if (!ok[static_cast<std::size_t>(jj)]) continue;
    expu[static_cast<std::size_t>(jj)] = std::exp(u[static_cast<std::size_t>(jj)] - u_max);
    denom += expu[static_cast<std::size_t>(jj)];
  }
  const double iv = u_max + std::log(denom);

  double u_c = 0.0;
  for (std::size_t k = 0; k < truth.theta[household].size(); ++k)
    u_c += truth.theta[household][k] * truth.beta_c[category][k];
  for (std::size_t p = 0; p < truth.w[household].size(); ++p)
    u_c += truth.w[household][p] * truth.rho_c[category][p];
  double glc = 0.0;
  for (std::size_t m = 0; m < truth.gamma[household].size(); ++m)
    glc += truth.gamma[household][m] * truth.lambda_c[category][m];
  u_c += glc * iv;
  for (std::size_t r = 0; r < truth.mu_c[category].size(); ++r)
    u_c += truth.mu_c[category][r] * truth.delta[week_slot][r];
  u_c += truth.wday[category][weekday_slot];
  if (weekday_slot == 1) u_c += cfg.endo_demand_gain * truth.shock[category][week_slot];

  const double p_cat = u_c >= 0.0 ? 1.0 / (1.0 + std::exp(-u_c))
                                  : std::exp(u_c) / (1.0 + std::exp(u_c));
  for (int jj = 0; jj < J; ++jj)
    if (ok[static_cast<std::size_t>(jj)])
      out[static_cast<std::size_t>(jj)] = p_cat * expu[static_cast<std::size_t>(jj)] / denom;
  out.back() = 1.0 - p_cat;
  return out;
}

namespace synth_detail {

// Common pieces for the analytic elasticities: conditional share s_j, category
// purchase probability, and the sensitivity scalars g_j = gamma.lambda_j and
// G_c = gamma.lambda_c.
struct ElasticityContext {
  double s_focal;
  double p_cat;
  double g_focal;
  double g_cat;
};

inline ElasticityContext elasticity_context(const SyntheticTruth& truth, const ProductHierarchy& h,
                                            const SessionGrid& grid, int household, int focal,
                                            int week_slot, int weekday_slot) {
  const int category = h.category_of[focal];
  const int J = truth.config.items_per_category;
  const int sess = 2 * week_slot + weekday_slot;
  if (!grid.available[static_cast<std::size_t>(focal) * grid.n_sessions() + sess])
    throw NumericError("analytic elasticity requested for an unavailable item");
  auto probs = brute_force_probs(truth, h, grid, household, category, week_slot, weekday_slot);
  const double p_cat = 1.0 - probs.back();
  const int jj = focal - category * J;
  const double s = p_cat > 0.0 ? probs[static_cast<std::size_t>(jj)] / p_cat : 0.0;
  double g = 0.0, gc = 0.0;
  for (std::size_t m = 0; m < truth.gamma[household].size(); ++m) {
    g += truth.gamma[household][m] * truth.lambda[focal][m];
    gc += truth.gamma[household][m] * truth.lambda_c[category][m];
  }
  return {s, p_cat, g, gc};
}

}  // namespace synth_detail

// d log P(buy focal) / d log price_focal at the session's prices.
inline double analytic_elasticity(const SyntheticTruth& truth, const ProductHierarchy& h,
                                  const SessionGrid& grid, int household, int focal, int week_slot,
                                  int weekday_slot) {
  auto ctx = synth_detail::elasticity_context(truth, h, grid, household, focal, week_slot, weekday_slot);
  return -ctx.g_focal * (1.0 - ctx.s_focal) -
         (1.0 - ctx.p_cat) * ctx.g_cat * ctx.s_focal * ctx.g_focal;
}

// d log P(buy other) / d log price_focal, for `other` in the same category.
inline double analytic_cross_elasticity(const SyntheticTruth& truth, const ProductHierarchy& h,
                                        const SessionGrid& grid, int household, int focal,
                                        int other, int week_slot, int weekday_slot) {
  if (h.category_of[focal] != h.category_of[other])
    throw NumericError("cross elasticity oracle covers within-category pairs only");
  auto ctx = synth_detail::elasticity_context(truth, h, grid, household, focal, week_slot, weekday_slot);
  return ctx.g_focal * ctx.s_focal * (1.0 - (1.0 - ctx.p_cat) * ctx.g_cat);
}

// Map the truth onto the kernel's flat layout (staple rows stay zero).
inline ParamVector truth_to_param_vector(const SyntheticTruth& truth, const ProductHierarchy& h) {
  const SyntheticConfig& cfg = truth.config;
  Dims d;
  d.N = cfg.n_households;
  d.J = h.n_items();
  d.C = cfg.n_categories;
  d.T = cfg.n_weeks;
  d.K = cfg.k_factors;
  d.M = cfg.m_factors;
  d.P = static_cast<int>(truth.w.empty() ? 0 : truth.w[0].size());
  d.Q = cfg.n_item_covariates;
  d.R = cfg.r_factors;
  ParamVector pv(d);
  for (int i = 0; i < d.N; ++i) {
    for (int k = 0; k < d.K; ++k) pv.at(Block::Theta, i, k) = truth.theta[i][k];
    for (int m = 0; m < d.M; ++m) pv.at(Block::Gamma, i, m) = truth.gamma[i][m];
    for (int q = 0; q < d.Q; ++q) pv.at(Block::Sigma, i, q) = truth.sigma[i][q];
  }
  for (int j = 0; j < cfg.n_modeled_items(); ++j) {
    for (int k = 0; k < d.K; ++k) pv.at(Block::Beta, j, k) = truth.beta[j][k];
    for (int m = 0; m < d.M; ++m) pv.at(Block::Lambda, j, m) = truth.lambda[j][m];
    for (int p = 0; p < d.P; ++p) pv.at(Block::Rho, j, p) = truth.rho[j][p];
  }
  for (int c = 0; c < d.C; ++c) {
    for (int k = 0; k < d.K; ++k) pv.at(Block::BetaC, c, k) = truth.beta_c[c][k];
    for (int m = 0; m < d.M; ++m) pv.at(Block::LambdaC, c, m) = truth.lambda_c[c][m];
    for (int p = 0; p < d.P; ++p) pv.at(Block::RhoC, c, p) = truth.rho_c[c][p];
    for (int r = 0; r < d.R; ++r) pv.at(Block::MuC, c, r) = truth.mu_c[c][r];
    pv.at(Block::Wday, c, 0) = truth.wday[c][0];
    pv.at(Block::Wday, c, 1) = truth.wday[c][1];
  }
  for (int t = 0; t < d.T; ++t)
    for (int r = 0; r < d.R; ++r) pv.at(Block::Delta, t, r) = truth.delta[t][r];
  return pv;
}

// ---- Serialization ----

inline Json synthetic_config_json(const SyntheticConfig& c) {
  Json j;
  j["n_households"] = c.n_households;
  j["n_categories"] = c.n_categories;
  j["items_per_category"] = c.items_per_category;
  j["n_weeks"] = c.n_weeks;
  j["k_factors"] = c.k_factors;
  j["m_factors"] = c.m_factors;
  j["r_factors"] = c.r_factors;
  j["n_item_covariates"] = c.n_item_covariates;
  j["theta_sd"] = c.theta_sd;
  j["beta_class_sd"] = c.beta_class_sd;
  j["beta_subclass_sd"] = c.beta_subclass_sd;
  j["beta_resid_sd"] = c.beta_resid_sd;
  j["class_correlated_beta"] = c.class_correlated_beta;
  j["gamma_mean"] = c.gamma_mean;
  j["gamma_sd"] = c.gamma_sd;
  j["lambda_mean"] = c.lambda_mean;
  j["lambda_sd"] = c.lambda_sd;
  j["lambda_c_mean"] = c.lambda_c_mean;
  j["lambda_c_sd"] = c.lambda_c_sd;
  j["rho_intercept_sd"] = c.rho_intercept_sd;
  j["rho_sd"] = c.rho_sd;
  j["beta_c_sd"] = c.beta_c_sd;
  j["rho_c_intercept_mean"] = c.rho_c_intercept_mean;
  j["rho_c_intercept_sd"] = c.rho_c_intercept_sd;
  j["rho_c_sd"] = c.rho_c_sd;
  j["sigma_sd"] = c.sigma_sd;
  j["mu_sd"] = c.mu_sd;
  j["delta_sd"] = c.delta_sd;
  j["wday_sd"] = c.wday_sd;
  j["elasticity_segments"] = c.elasticity_segments;
  j["gamma_low"] = c.gamma_low;
  j["gamma_high"] = c.gamma_high;
  j["base_price_min"] = c.base_price_min;
  j["base_price_max"] = c.base_price_max;
  j["price_change_prob"] = c.price_change_prob;
  j["price_change_frac_min"] = c.price_change_frac_min;
  j["price_change_frac_max"] = c.price_change_frac_max;
  j["price_floor"] = c.price_floor;
  j["promo_prob"] = c.promo_prob;
  j["promo_depth_min"] = c.promo_depth_min;
  j["promo_depth_max"] = c.promo_depth_max;
  j["oos_prob"] = c.oos_prob;
  j["shop_prob_min"] = c.shop_prob_min;
  j["shop_prob_max"] = c.shop_prob_max;
  j["multi_item_prob"] = c.multi_item_prob;
  j["cost_frac_min"] = c.cost_frac_min;
  j["cost_frac_max"] = c.cost_frac_max;
  j["cost_missing_prob"] = c.cost_missing_prob;
  j["endogenous_prices"] = c.endogenous_prices;
  j["demand_shock_rho"] = c.demand_shock_rho;
  j["demand_shock_sd"] = c.demand_shock_sd;
  j["endo_demand_gain"] = c.endo_demand_gain;
  j["endo_price_shift"] = c.endo_price_shift;
  j["seed"] = c.seed;
  return j;
}

inline SyntheticConfig parse_synthetic_config(const Json& j) {
  SyntheticConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("synthetic config must be a JSON object");
  const Json defaults = synthetic_config_json(SyntheticConfig{});
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in synthetic config");
  auto get_i = [&](const char* k, int& v) { if (j.contains(k)) v = j[k].get<int>(); };
  auto get_d = [&](const char* k, double& v) { if (j.contains(k)) v = j[k].get<double>(); };
  auto get_b = [&](const char* k, bool& v) { if (j.contains(k)) v = j[k].get<bool>(); };
  get_i("n_households", c.n_households);
  get_i("n_categories", c.n_categories);
  get_i("items_per_category", c.items_per_category);
  get_i("n_weeks", c.n_weeks);
  get_i("k_factors", c.k_factors);
  get_i("m_factors", c.m_factors);
  get_i("r_factors", c.r_factors);
  get_i("n_item_covariates", c.n_item_covariates);
  get_d("theta_sd", c.theta_sd);
  get_d("beta_class_sd", c.beta_class_sd);
  get_d("beta_subclass_sd", c.beta_subclass_sd);
  get_d("beta_resid_sd", c.beta_resid_sd);
  get_b("class_correlated_beta", c.class_correlated_beta);
  get_d("gamma_mean", c.gamma_mean);
  get_d("gamma_sd", c.gamma_sd);
  get_d("lambda_mean", c.lambda_mean);
  get_d("lambda_sd", c.lambda_sd);
  get_d("lambda_c_mean", c.lambda_c_mean);
  get_d("lambda_c_sd", c.lambda_c_sd);
  get_d("rho_intercept_sd", c.rho_intercept_sd);
  get_d("rho_sd", c.rho_sd);
  get_d("beta_c_sd", c.beta_c_sd);
  get_d("rho_c_intercept_mean", c.rho_c_intercept_mean);
  get_d("rho_c_intercept_sd", c.rho_c_intercept_sd);
  get_d("rho_c_sd", c.rho_c_sd);
  get_d("sigma_sd", c.sigma_sd);
  get_d("mu_sd", c.mu_sd);
  get_d("delta_sd", c.delta_sd);
  get_d("wday_sd", c.wday_sd);
  get_b("elasticity_segments", c.elasticity_segments);
  get_d("gamma_low", c.gamma_low);
  get_d("gamma_high", c.gamma_high);
  get_d("base_price_min", c.base_price_min);
  get_d("base_price_max", c.base_price_max);
  get_d("price_change_prob", c.price_change_prob);
  get_d("price_change_frac_min", c.price_change_frac_min);
  get_d("price_change_frac_max", c.price_change_frac_max);
  get_d("price_floor", c.price_floor);
  get_d("promo_prob", c.promo_prob);
  get_d("promo_depth_min", c.promo_depth_min);
  get_d("promo_depth_max", c.promo_depth_max);
  get_d("oos_prob", c.oos_prob);
  get_d("shop_prob_min", c.shop_prob_min);
  get_d("shop_prob_max", c.shop_prob_max);
  get_d("multi_item_prob", c.multi_item_prob);
  get_d("cost_frac_min", c.cost_frac_min);
  get_d("cost_frac_max", c.cost_frac_max);
  get_d("cost_missing_prob", c.cost_missing_prob);
  get_b("endogenous_prices", c.endogenous_prices);
  get_d("demand_shock_rho", c.demand_shock_rho);
  get_d("demand_shock_sd", c.demand_shock_sd);
  get_d("endo_demand_gain", c.endo_demand_gain);
  get_d("endo_price_shift", c.endo_price_shift);
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

// Truth serialization: the config plus a digest of the realized parameters.
// Regeneration from (config, seed) reproduces the panel bit-exactly, so the
// config is the full truth; the digest guards against generator drift.
inline std::uint64_t truth_digest(const SyntheticTruth& truth) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_all = [&h](const std::vector<std::vector<double>>& m) {
    char buf[32];
    for (const auto& row : m)
      for (double v : row) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        h = fnv1a(buf, h);
      }
  };
  mix_all(truth.theta);
  mix_all(truth.beta);
  mix_all(truth.gamma);
  mix_all(truth.lambda);
  mix_all(truth.rho);
  mix_all(truth.beta_c);
  mix_all(truth.lambda_c);
  mix_all(truth.rho_c);
  mix_all(truth.mu_c);
  mix_all(truth.delta);
  mix_all(truth.wday);
  mix_all(truth.shock);
  return h;
}

inline Json truth_json(const SyntheticTruth& truth) {
  Json j;
  j["config"] = synthetic_config_json(truth.config);
  j["digest"] = truth_digest(truth);
  return j;
}

inline SyntheticTruth truth_from_json(const Json& j) {
  SyntheticConfig cfg = parse_synthetic_config(j.at("config"));
  SyntheticData data = generate_panel(cfg);
  if (j.contains("digest") && j["digest"].get<std::uint64_t>() != truth_digest(data.truth))
    throw DataError("truth digest mismatch: generator or config drifted");
  return std::move(data.truth);
}

inline void write_households_file(const SyntheticTruth& truth, const std::string& path,
                                  char sep = ',') {
  std::string out = "household_id";
  for (const char* col : {"age", "gender", "marital_status", "income", "household_size"}) {
    out += sep;
    out += col;
  }
  out += "\n";
  char buf[64];
  for (std::size_t i = 0; i < truth.raw_age.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "hh%zu%c%.0f%c%s%c%s%c%.0f%c%.0f\n", i, sep, truth.raw_age[i],
                  sep, truth.raw_gender[i].c_str(), sep, truth.raw_marital[i].c_str(), sep,
                  truth.raw_income[i], sep, truth.raw_size[i]);
    out += buf;
  }
  write_file(path, out);
}

inline void write_synthetic_files(const SyntheticData& data, const std::string& dir,
                                  char sep = ',') {
  export_panel(data.panel, data.hierarchy, dir + "/transactions.csv", sep);
  save_hierarchy(data.hierarchy, dir + "/hierarchy.csv", sep);
  write_households_file(data.truth, dir + "/households.csv", sep);
  export_grid(data.grid, data.hierarchy, dir + "/grid_true.csv", sep);
  write_file(dir + "/truth.json", truth_json(data.truth).dump(2) + "\n");
}

}  // namespace nestfact
