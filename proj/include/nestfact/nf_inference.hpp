#pragma once

// Two-stage stochastic variational inference for the nested factorization
// model. Stage one fits the within-category item choice (softmax over the
// session's available items, trained on purchases only). Its posterior-mean
// utilities produce an inclusive-value table, and stage two fits the binary
// category-incidence model on every trip x category cell, holding the
// household vectors at their stage-one posterior means.
//
// The posterior family is fully factorized Gaussians (mean, log-scale per
// entry) with N(0, prior_scale^2) priors. Gradients use the
// reparameterization trick with noise keyed by (seed, round, observation,
// draw) so a gradient and an ELBO evaluated with the same key share noise;
// finite differences of elbo_estimate then match elbo_gradient exactly in
// expectation and tightly in sample.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "nestfact/choice_kernel.hpp"
#include "nestfact/config.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/math.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/session_grid.hpp"
#include "nestfact/splits_fwd.hpp"
#include "nestfact/text.hpp"

namespace nestfact {

enum class Stage { Items, Categories };

inline const std::vector<Block>& stage_blocks(Stage stage) {
  static const std::vector<Block> items = {Block::Theta, Block::Beta,  Block::Gamma,
                                           Block::Lambda, Block::Rho, Block::Sigma};
  static const std::vector<Block> cats = {Block::BetaC, Block::LambdaC, Block::RhoC,
                                          Block::MuC,   Block::Delta,   Block::Wday};
  return stage == Stage::Items ? items : cats;
}

struct TrainingConfig {
  int k_factors = 8;
  int m_factors = 3;
  int r_factors = 1;
  double prior_scale = 1.0;
  int minibatch = 512;
  int mc_draws = 2;
  double learning_rate = 0.05;
  double lr_decay = 0.0;  // step size = learning_rate / (1 + lr_decay * step)
  int max_epochs = 60;
  double tolerance = 1e-5;
  int monitor_obs = 4096;
  int eval_draws = 8;
  double init_scale = 0.1;
  int threads = 1;
  std::uint64_t seed = 1;

  void validate() const {
    if (k_factors < 1 || m_factors < 1 || r_factors < 1)
      throw ConfigError("factor counts must be >= 1");
    if (mc_draws < 1 || eval_draws < 1) throw ConfigError("draws must be >= 1");
    if (tolerance <= 0.0) throw ConfigError("tolerance must be > 0");
    if (minibatch < 1) throw ConfigError("minibatch must be >= 1");
    if (learning_rate <= 0.0 || prior_scale <= 0.0 || init_scale <= 0.0)
      throw ConfigError("learning rate, prior scale, init scale must be > 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

inline Json training_config_json(const TrainingConfig& c) {
  return Json{{"k_factors", c.k_factors},
              {"m_factors", c.m_factors},
              {"r_factors", c.r_factors},
              {"prior_scale", c.prior_scale},
              {"minibatch", c.minibatch},
              {"mc_draws", c.mc_draws},
              {"learning_rate", c.learning_rate},
              {"lr_decay", c.lr_decay},
              {"max_epochs", c.max_epochs},
              {"tolerance", c.tolerance},
              {"monitor_obs", c.monitor_obs},
              {"eval_draws", c.eval_draws},
              {"init_scale", c.init_scale},
              {"threads", c.threads},
              {"seed", c.seed}};
}

inline TrainingConfig parse_training_config(const Json& j) {
  TrainingConfig c;
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  const Json defaults = training_config_json(TrainingConfig{});
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in training config");
  auto gi = [&](const char* k, int& v) { if (j.contains(k)) v = j[k].get<int>(); };
  auto gd = [&](const char* k, double& v) { if (j.contains(k)) v = j[k].get<double>(); };
  gi("k_factors", c.k_factors);
  gi("m_factors", c.m_factors);
  gi("r_factors", c.r_factors);
  gd("prior_scale", c.prior_scale);
  gi("minibatch", c.minibatch);
  gi("mc_draws", c.mc_draws);
  gd("learning_rate", c.learning_rate);
  gd("lr_decay", c.lr_decay);
  gi("max_epochs", c.max_epochs);
  gd("tolerance", c.tolerance);
  gi("monitor_obs", c.monitor_obs);
  gi("eval_draws", c.eval_draws);
  gd("init_scale", c.init_scale);
  gi("threads", c.threads);
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

// ---- Variational state ----

struct VariationalState {
  ParamLayout layout;
  std::vector<double> mean, log_scale;
  // Adam moments for means and log-scales.
  std::vector<double> m_mean, v_mean, m_ls, v_ls;
  std::int64_t step = 0;
  std::int32_t epoch = 0;
  std::vector<double> elbo_history;

  std::size_t size() const { return mean.size(); }
  ParamVector posterior_means() const {
    ParamVector pv(layout.dims);
    pv.values = mean;
    return pv;
  }
};

inline VariationalState init_state(const TrainingConfig& cfg, const Dims& dims,
                                   std::uint64_t seed) {
  cfg.validate();
  if (dims.K != cfg.k_factors || dims.M != cfg.m_factors || dims.R != cfg.r_factors)
    throw ConfigError("dims factor counts disagree with training config");
  VariationalState s;
  s.layout = ParamLayout::make(dims);
  const std::size_t n = s.layout.total;
  s.mean.resize(n);
  s.log_scale.assign(n, std::log(cfg.init_scale));
  s.m_mean.assign(n, 0.0);
  s.v_mean.assign(n, 0.0);
  s.m_ls.assign(n, 0.0);
  s.v_ls.assign(n, 0.0);
  auto rng = make_rng(seed, rng_stream::kInit, 0xa0);
  std::normal_distribution<double> nd(0.0, cfg.init_scale);
  for (double& m : s.mean) m = nd(rng);
  // The likelihood is invariant to flipping the sign of a sensitivity factor
  // in both of its blocks at once; start the positive branch so household and
  // item sensitivities do not fight over lambda's sign early in training.
  for (Block b : {Block::Gamma, Block::Lambda, Block::LambdaC}) {
    const std::size_t off = s.layout.offset[static_cast<int>(b)];
    for (std::size_t i = off; i < off + s.layout.block_size(b); ++i)
      s.mean[i] = std::abs(s.mean[i]);
  }
  return s;
}

// ---- Training dataset ----

struct NfDataset {
  const ProductHierarchy* hierarchy = nullptr;
  const SessionGrid* grid = nullptr;
  Matrix w;  // households x covariates
  std::vector<std::vector<int>> items_of_slot;
  std::vector<int> slot_category;  // slot -> category id
  // Available item list per (slot, session), ascending item ids.
  std::vector<std::vector<std::vector<int>>> avail;

  struct Choice {
    int household, item, slot, session;
  };
  std::vector<Choice> purchases;

  struct Cell {
    int household, slot, session;
    double iv;
    std::uint8_t y;
  };
  std::vector<Cell> cells;

  std::size_t n_obs(Stage stage) const {
    return stage == Stage::Items ? purchases.size() : cells.size();
  }
};

inline Matrix household_covariates(const TransactionPanel& panel) {
  const int n = static_cast<int>(panel.households.size());
  const int p = panel.covariate_width();
  Matrix w(n, p);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < p; ++k) w(i, k) = panel.households[static_cast<std::size_t>(i)].w[static_cast<std::size_t>(k)];
  return w;
}

// Shared skeleton: covariates, per-slot item lists, availability cache.
inline NfDataset make_dataset(const TransactionPanel& panel, const ProductHierarchy& hierarchy,
                              const CategoryCatalog& catalog, const SessionGrid& grid) {
  NfDataset ds;
  ds.hierarchy = &hierarchy;
  ds.grid = &grid;
  ds.w = household_covariates(panel);
  const int n_slots = catalog.n_kept();
  ds.items_of_slot.resize(static_cast<std::size_t>(n_slots));
  ds.slot_category.resize(static_cast<std::size_t>(n_slots));
  for (int c = 0; c < static_cast<int>(catalog.slot_of_category.size()); ++c) {
    const int slot = catalog.slot_of_category[static_cast<std::size_t>(c)];
    if (slot >= 0) ds.slot_category[static_cast<std::size_t>(slot)] = c;
  }
  for (int j = 0; j < hierarchy.n_items(); ++j) {
    const int slot = catalog.slot_of_category[static_cast<std::size_t>(hierarchy.category_of[static_cast<std::size_t>(j)])];
    if (slot >= 0) ds.items_of_slot[static_cast<std::size_t>(slot)].push_back(j);
  }
  const int n_sessions = grid.n_sessions();
  ds.avail.resize(static_cast<std::size_t>(n_slots));
  for (int s = 0; s < n_slots; ++s) {
    ds.avail[static_cast<std::size_t>(s)].resize(static_cast<std::size_t>(n_sessions));
    for (int sess = 0; sess < n_sessions; ++sess)
      for (int j : ds.items_of_slot[static_cast<std::size_t>(s)])
        if (grid.is_available(j, sess))
          ds.avail[static_cast<std::size_t>(s)][static_cast<std::size_t>(sess)].push_back(j);
  }
  return ds;
}

// Stage-one observations: one per purchase of an in-catalog item in the
// requested split bucket.
inline void fill_stage1_observations(NfDataset& ds, const TransactionPanel& panel,
                                     const CategoryCatalog& catalog, const SampleSplit& split,
                                     SplitBucket bucket) {
  ds.purchases.clear();
  const SessionGrid& grid = *ds.grid;
  for (const Trip& trip : panel.trips) {
    if (split.of(trip.household, static_cast<int>(trip.week)) != bucket) continue;
    const int ws = grid.week_slot(trip.week);
    if (ws < 0) continue;
    const int sess = grid.session(ws, trip.weekday == kWednesday ? 1 : 0);
    for (const Purchase& p : trip.purchases) {
      const int slot =
          catalog.slot_of_category[static_cast<std::size_t>(ds.hierarchy->category_of[static_cast<std::size_t>(p.item)])];
      if (slot < 0) continue;
      ds.purchases.push_back({trip.household, p.item, slot, sess});
    }
  }
}

struct InclusiveValueTable {
  int n_households = 0, n_slots = 0, n_sessions = 0;
  std::vector<double> iv;
  double at(int i, int slot, int sess) const {
    return iv[(static_cast<std::size_t>(i) * n_slots + slot) * n_sessions + sess];
  }
  double& at(int i, int slot, int sess) {
    return iv[(static_cast<std::size_t>(i) * n_slots + slot) * n_sessions + sess];
  }
};

// Stage-two cells: every (trip, kept category) with a nonempty choice set.
inline void fill_stage2_cells(NfDataset& ds, const TransactionPanel& panel,
                              const CategoryCatalog& catalog, const SampleSplit& split,
                              SplitBucket bucket, const InclusiveValueTable& table) {
  ds.cells.clear();
  const SessionGrid& grid = *ds.grid;
  const int n_slots = static_cast<int>(ds.items_of_slot.size());
  std::vector<std::uint8_t> bought(static_cast<std::size_t>(n_slots));
  for (const Trip& trip : panel.trips) {
    if (split.of(trip.household, static_cast<int>(trip.week)) != bucket) continue;
    const int ws = grid.week_slot(trip.week);
    if (ws < 0) continue;
    const int sess = grid.session(ws, trip.weekday == kWednesday ? 1 : 0);
    std::fill(bought.begin(), bought.end(), 0);
    for (const Purchase& p : trip.purchases) {
      const int slot =
          catalog.slot_of_category[static_cast<std::size_t>(ds.hierarchy->category_of[static_cast<std::size_t>(p.item)])];
      if (slot >= 0) bought[static_cast<std::size_t>(slot)] = 1;
    }
    for (int s = 0; s < n_slots; ++s) {
      const double iv = table.at(trip.household, s, sess);
      if (!std::isfinite(iv)) continue;  // nothing available: forced no-buy
      ds.cells.push_back({trip.household, s, sess, iv, bought[static_cast<std::size_t>(s)]});
    }
  }
}

// ---- ELBO core ----

namespace infer_detail {

struct Scratch {
  std::vector<int> items;
  std::vector<double> u, soft, eps_local;
  std::vector<double> theta, gamma, sigma;
  std::vector<double> eps_theta, eps_gamma, eps_sigma;
  std::vector<double> g_theta, g_gamma, g_sigma, g_item;
};

// Sample a contiguous parameter row; eps and values stored by the caller.
inline void sample_row(const VariationalState& st, Block b, int row, int n, Rng& rng,
                       std::normal_distribution<double>& nd, double* val, double* eps) {
  const std::size_t off = st.layout.offset[static_cast<int>(b)] +
                          static_cast<std::size_t>(row) * static_cast<std::size_t>(n);
  for (int k = 0; k < n; ++k) {
    eps[k] = nd(rng);
    val[k] = st.mean[off + static_cast<std::size_t>(k)] +
             std::exp(st.log_scale[off + static_cast<std::size_t>(k)]) * eps[k];
  }
}

inline void add_grad(const VariationalState& st, Block b, int row, int n, const double* g,
                     const double* eps, double* grad_mean, double* grad_ls) {
  const std::size_t off = st.layout.offset[static_cast<int>(b)] +
                          static_cast<std::size_t>(row) * static_cast<std::size_t>(n);
  for (int k = 0; k < n; ++k) {
    grad_mean[off + static_cast<std::size_t>(k)] += g[k];
    grad_ls[off + static_cast<std::size_t>(k)] +=
        g[k] * eps[k] * std::exp(st.log_scale[off + static_cast<std::size_t>(k)]);
  }
}

// One stage-one observation: returns mean log-likelihood over draws and, when
// grad buffers are non-null, accumulates d loglik / d(variational params)
// scaled by `weight`.
inline double stage1_obs(const VariationalState& st, const NfDataset& ds, std::size_t obs_id,
                         int draws, std::uint64_t seed, std::uint64_t round, double weight,
                         double* grad_mean, double* grad_ls, Scratch& sc) {
  const NfDataset::Choice& ob = ds.purchases[obs_id];
  const Dims& d = st.layout.dims;
  const auto& cached = ds.avail[static_cast<std::size_t>(ob.slot)][static_cast<std::size_t>(ob.session)];
  sc.items.assign(cached.begin(), cached.end());
  if (std::find(sc.items.begin(), sc.items.end(), ob.item) == sc.items.end())
    sc.items.push_back(ob.item);  // bought despite a session-level stockout listing
  const int n = static_cast<int>(sc.items.size());
  const int per_item = d.K + d.M + d.P;
  sc.u.resize(static_cast<std::size_t>(n));
  sc.soft.resize(static_cast<std::size_t>(n));
  sc.eps_local.resize(static_cast<std::size_t>(n * per_item) * 2);
  sc.theta.resize(static_cast<std::size_t>(d.K));
  sc.eps_theta.resize(static_cast<std::size_t>(d.K));
  sc.gamma.resize(static_cast<std::size_t>(d.M));
  sc.eps_gamma.resize(static_cast<std::size_t>(d.M));
  sc.sigma.resize(static_cast<std::size_t>(d.Q));
  sc.eps_sigma.resize(static_cast<std::size_t>(d.Q));

  const auto w_row = ds.w.row(ob.household);
  double total = 0.0;
  for (int draw = 0; draw < draws; ++draw) {
    auto rng = make_rng(seed, rng_stream::kSample, mix64(mix64(round, obs_id), static_cast<std::uint64_t>(draw)));
    std::normal_distribution<double> nd(0.0, 1.0);
    sample_row(st, Block::Theta, ob.household, d.K, rng, nd, sc.theta.data(), sc.eps_theta.data());
    sample_row(st, Block::Gamma, ob.household, d.M, rng, nd, sc.gamma.data(), sc.eps_gamma.data());
    if (d.Q > 0)
      sample_row(st, Block::Sigma, ob.household, d.Q, rng, nd, sc.sigma.data(), sc.eps_sigma.data());

    double* vals = sc.eps_local.data();
    double* epss = sc.eps_local.data() + static_cast<std::ptrdiff_t>(n) * per_item;
    int chosen_pos = -1;
    for (int a = 0; a < n; ++a) {
      const int j = sc.items[static_cast<std::size_t>(a)];
      if (j == ob.item) chosen_pos = a;
      double* v = vals + static_cast<std::ptrdiff_t>(a) * per_item;
      double* e = epss + static_cast<std::ptrdiff_t>(a) * per_item;
      sample_row(st, Block::Beta, j, d.K, rng, nd, v, e);
      sample_row(st, Block::Lambda, j, d.M, rng, nd, v + d.K, e + d.K);
      sample_row(st, Block::Rho, j, d.P, rng, nd, v + d.K + d.M, e + d.K + d.M);
      double util = 0.0;
      for (int k = 0; k < d.K; ++k) util += sc.theta[static_cast<std::size_t>(k)] * v[k];
      double gl = 0.0;
      for (int m = 0; m < d.M; ++m) gl += sc.gamma[static_cast<std::size_t>(m)] * v[d.K + m];
      const double lp = std::log(ds.grid->price(j, ob.session));
      util -= gl * lp;
      for (int p = 0; p < d.P; ++p) util += w_row[static_cast<std::size_t>(p)] * v[d.K + d.M + p];
      for (int q = 0; q < d.Q; ++q)
        util += sc.sigma[static_cast<std::size_t>(q)] * ds.hierarchy->item_covariates(j, q);
      sc.u[static_cast<std::size_t>(a)] = util;
    }
    const double lse = log_sum_exp(sc.u);
    if (!std::isfinite(lse))
      throw NumericError("non-finite likelihood at purchase observation " + std::to_string(obs_id));
    total += sc.u[static_cast<std::size_t>(chosen_pos)] - lse;
    if (grad_mean == nullptr) continue;

    const double scale = weight / draws;
    for (int a = 0; a < n; ++a)
      sc.soft[static_cast<std::size_t>(a)] = std::exp(sc.u[static_cast<std::size_t>(a)] - lse);
    auto& g_theta = sc.g_theta;
    auto& g_gamma = sc.g_gamma;
    auto& g_sigma = sc.g_sigma;
    auto& g_item = sc.g_item;
    g_theta.assign(static_cast<std::size_t>(d.K), 0.0);
    g_gamma.assign(static_cast<std::size_t>(d.M), 0.0);
    g_sigma.assign(static_cast<std::size_t>(d.Q), 0.0);
    g_item.resize(static_cast<std::size_t>(per_item));
    for (int a = 0; a < n; ++a) {
      const int j = sc.items[static_cast<std::size_t>(a)];
      const double r = ((a == chosen_pos) ? 1.0 : 0.0) - sc.soft[static_cast<std::size_t>(a)];
      const double* v = vals + static_cast<std::ptrdiff_t>(a) * per_item;
      const double* e = epss + static_cast<std::ptrdiff_t>(a) * per_item;
      const double lp = std::log(ds.grid->price(j, ob.session));
      for (int k = 0; k < d.K; ++k) {
        g_theta[static_cast<std::size_t>(k)] += r * v[k];
        g_item[static_cast<std::size_t>(k)] = scale * r * sc.theta[static_cast<std::size_t>(k)];
      }
      for (int m = 0; m < d.M; ++m) {
        g_gamma[static_cast<std::size_t>(m)] += r * (-lp) * v[d.K + m];
        g_item[static_cast<std::size_t>(d.K + m)] =
            scale * r * (-lp) * sc.gamma[static_cast<std::size_t>(m)];
      }
      for (int p = 0; p < d.P; ++p)
        g_item[static_cast<std::size_t>(d.K + d.M + p)] = scale * r * w_row[static_cast<std::size_t>(p)];
      for (int q = 0; q < d.Q; ++q)
        g_sigma[static_cast<std::size_t>(q)] += r * ds.hierarchy->item_covariates(j, q);
      add_grad(st, Block::Beta, j, d.K, g_item.data(), e, grad_mean, grad_ls);
      add_grad(st, Block::Lambda, j, d.M, g_item.data() + d.K, e + d.K, grad_mean, grad_ls);
      add_grad(st, Block::Rho, j, d.P, g_item.data() + d.K + d.M, e + d.K + d.M, grad_mean, grad_ls);
    }
    for (double& g : g_theta) g *= scale;
    for (double& g : g_gamma) g *= scale;
    for (double& g : g_sigma) g *= scale;
    add_grad(st, Block::Theta, ob.household, d.K, g_theta.data(), sc.eps_theta.data(), grad_mean,
             grad_ls);
    add_grad(st, Block::Gamma, ob.household, d.M, g_gamma.data(), sc.eps_gamma.data(), grad_mean,
             grad_ls);
    if (d.Q > 0)
      add_grad(st, Block::Sigma, ob.household, d.Q, g_sigma.data(), sc.eps_sigma.data(), grad_mean,
               grad_ls);
  }
  return total / draws;
}

// One stage-two cell (household vectors plugged in at their posterior means).
inline double stage2_obs(const VariationalState& st, const NfDataset& ds, std::size_t obs_id,
                         int draws, std::uint64_t seed, std::uint64_t round, double weight,
                         double* grad_mean, double* grad_ls, Scratch& sc) {
  const NfDataset::Cell& ob = ds.cells[obs_id];
  const Dims& d = st.layout.dims;
  const int t = ob.session / 2;
  const int wd = ob.session % 2;
  const auto w_row = ds.w.row(ob.household);
  const std::size_t off_theta = st.layout.at(Block::Theta, ob.household, 0);
  const std::size_t off_gamma = st.layout.at(Block::Gamma, ob.household, 0);

  const int per = d.K + d.M + d.P + d.R + d.R + 1;  // beta_c, lambda_c, rho_c, mu_c, delta_t, wday
  sc.eps_local.resize(static_cast<std::size_t>(per) * 2);
  double* v = sc.eps_local.data();
  double* e = sc.eps_local.data() + per;

  double total = 0.0;
  const std::size_t obs_key = obs_id + 0x80000000ULL;  // distinct noise stream from stage one
  for (int draw = 0; draw < draws; ++draw) {
    auto rng = make_rng(seed, rng_stream::kSample, mix64(mix64(round, obs_key), static_cast<std::uint64_t>(draw)));
    std::normal_distribution<double> nd(0.0, 1.0);
    sample_row(st, Block::BetaC, ob.slot, d.K, rng, nd, v, e);
    sample_row(st, Block::LambdaC, ob.slot, d.M, rng, nd, v + d.K, e + d.K);
    sample_row(st, Block::RhoC, ob.slot, d.P, rng, nd, v + d.K + d.M, e + d.K + d.M);
    sample_row(st, Block::MuC, ob.slot, d.R, rng, nd, v + d.K + d.M + d.P, e + d.K + d.M + d.P);
    sample_row(st, Block::Delta, t, d.R, rng, nd, v + d.K + d.M + d.P + d.R,
               e + d.K + d.M + d.P + d.R);
    sample_row(st, Block::Wday, ob.slot * 2 + wd, 1, rng, nd, v + per - 1, e + per - 1);

    double u = 0.0;
    for (int k = 0; k < d.K; ++k) u += st.mean[off_theta + static_cast<std::size_t>(k)] * v[k];
    double gl = 0.0;
    for (int m = 0; m < d.M; ++m) gl += st.mean[off_gamma + static_cast<std::size_t>(m)] * v[d.K + m];
    u += gl * ob.iv;
    for (int p = 0; p < d.P; ++p) u += w_row[static_cast<std::size_t>(p)] * v[d.K + d.M + p];
    double mdelta = 0.0;
    for (int r = 0; r < d.R; ++r)
      mdelta += v[d.K + d.M + d.P + r] * v[d.K + d.M + d.P + d.R + r];
    u += mdelta + v[per - 1];
    const double ll = ob.y ? log_sigmoid(u) : log_one_minus_sigmoid(u);
    if (!std::isfinite(ll))
      throw NumericError("non-finite likelihood at category cell " + std::to_string(obs_id));
    total += ll;
    if (grad_mean == nullptr) continue;

    const double resid = (ob.y ? 1.0 : 0.0) - sigmoid(u);
    const double scale = weight / draws;
    auto& g = sc.g_item;
    g.resize(static_cast<std::size_t>(per));
    for (int k = 0; k < d.K; ++k)
      g[static_cast<std::size_t>(k)] = scale * resid * st.mean[off_theta + static_cast<std::size_t>(k)];
    for (int m = 0; m < d.M; ++m)
      g[static_cast<std::size_t>(d.K + m)] =
          scale * resid * ob.iv * st.mean[off_gamma + static_cast<std::size_t>(m)];
    for (int p = 0; p < d.P; ++p)
      g[static_cast<std::size_t>(d.K + d.M + p)] = scale * resid * w_row[static_cast<std::size_t>(p)];
    for (int r = 0; r < d.R; ++r) {
      g[static_cast<std::size_t>(d.K + d.M + d.P + r)] =
          scale * resid * v[d.K + d.M + d.P + d.R + r];  // d u / d mu = delta
      g[static_cast<std::size_t>(d.K + d.M + d.P + d.R + r)] =
          scale * resid * v[d.K + d.M + d.P + r];  // d u / d delta = mu
    }
    g[static_cast<std::size_t>(per - 1)] = scale * resid;
    add_grad(st, Block::BetaC, ob.slot, d.K, g.data(), e, grad_mean, grad_ls);
    add_grad(st, Block::LambdaC, ob.slot, d.M, g.data() + d.K, e + d.K, grad_mean, grad_ls);
    add_grad(st, Block::RhoC, ob.slot, d.P, g.data() + d.K + d.M, e + d.K + d.M, grad_mean, grad_ls);
    add_grad(st, Block::MuC, ob.slot, d.R, g.data() + d.K + d.M + d.P, e + d.K + d.M + d.P,
             grad_mean, grad_ls);
    add_grad(st, Block::Delta, t, d.R, g.data() + d.K + d.M + d.P + d.R,
             e + d.K + d.M + d.P + d.R, grad_mean, grad_ls);
    add_grad(st, Block::Wday, ob.slot * 2 + wd, 1, g.data() + per - 1, e + per - 1, grad_mean,
             grad_ls);
  }
  return total / draws;
}

inline double obs_term(const VariationalState& st, const NfDataset& ds, Stage stage,
                       std::size_t obs_id, int draws, std::uint64_t seed, std::uint64_t round,
                       double weight, double* gm, double* gl, Scratch& sc) {
  return stage == Stage::Items
             ? stage1_obs(st, ds, obs_id, draws, seed, round, weight, gm, gl, sc)
             : stage2_obs(st, ds, obs_id, draws, seed, round, weight, gm, gl, sc);
}

// KL(q || prior) over the stage's active blocks, closed form.
inline double kl_active(const VariationalState& st, Stage stage, double prior_scale) {
  const double s2 = prior_scale * prior_scale;
  double kl = 0.0;
  for (Block b : stage_blocks(stage)) {
    const std::size_t off = st.layout.offset[static_cast<int>(b)];
    const std::size_t n = st.layout.block_size(b);
    for (std::size_t i = off; i < off + n; ++i) {
      const double mu = st.mean[i];
      const double sig = std::exp(st.log_scale[i]);
      kl += std::log(prior_scale) - st.log_scale[i] + (sig * sig + mu * mu) / (2.0 * s2) - 0.5;
    }
  }
  return kl;
}

inline void kl_gradient(const VariationalState& st, Stage stage, double prior_scale,
                        double* grad_mean, double* grad_ls) {
  const double s2 = prior_scale * prior_scale;
  for (Block b : stage_blocks(stage)) {
    const std::size_t off = st.layout.offset[static_cast<int>(b)];
    const std::size_t n = st.layout.block_size(b);
    for (std::size_t i = off; i < off + n; ++i) {
      grad_mean[i] -= st.mean[i] / s2;
      const double sig2 = std::exp(2.0 * st.log_scale[i]);
      grad_ls[i] -= sig2 / s2 - 1.0;
    }
  }
}

}  // namespace infer_detail

// Monte Carlo ELBO over the given observation indices. The likelihood term is
// multiplied by `lik_weight` (pass n_total / n_slice to unbias a subsample).
inline double elbo_estimate(const VariationalState& st, const NfDataset& ds, Stage stage,
                            std::span<const std::uint32_t> idx, int draws, std::uint64_t seed,
                            std::uint64_t noise_round, double lik_weight, double prior_scale) {
  infer_detail::Scratch sc;
  double lik = 0.0;
  for (std::uint32_t i : idx)
    lik += infer_detail::obs_term(st, ds, stage, i, draws, seed, noise_round, 1.0, nullptr,
                                  nullptr, sc);
  return lik_weight * lik - infer_detail::kl_active(st, stage, prior_scale);
}

struct ElboGradient {
  std::vector<double> mean, log_scale;
  double elbo = 0.0;  // matching estimate under the same noise
};

// Reparameterized gradient of elbo_estimate under identical noise keys.
// Observations are processed in fixed-size chunks whose partial sums are
// reduced in chunk order, so results do not depend on the thread count.
inline ElboGradient elbo_gradient(const VariationalState& st, const NfDataset& ds, Stage stage,
                                  std::span<const std::uint32_t> idx, int draws,
                                  std::uint64_t seed, std::uint64_t noise_round,
                                  double lik_weight, double prior_scale, int threads = 1) {
  const std::size_t total = st.size();
  constexpr std::size_t kChunk = 256;
  const std::size_t n_chunks = idx.empty() ? 0 : (idx.size() + kChunk - 1) / kChunk;
  ElboGradient out;
  out.mean.assign(total, 0.0);
  out.log_scale.assign(total, 0.0);

  std::vector<std::vector<double>> part_mean(n_chunks), part_ls(n_chunks);
  std::vector<double> part_lik(n_chunks, 0.0);
  auto work = [&](std::size_t chunk) {
    infer_detail::Scratch sc;
    part_mean[chunk].assign(total, 0.0);
    part_ls[chunk].assign(total, 0.0);
    const std::size_t lo = chunk * kChunk;
    const std::size_t hi = std::min(idx.size(), lo + kChunk);
    for (std::size_t k = lo; k < hi; ++k)
      part_lik[chunk] += infer_detail::obs_term(st, ds, stage, idx[k], draws, seed, noise_round,
                                                lik_weight, part_mean[chunk].data(),
                                                part_ls[chunk].data(), sc);
  };
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) work(c);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::vector<std::thread> pool;
    const int nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n_chunks);
    for (int t = 0; t < nt; ++t)
      pool.emplace_back([&] {
        try {
          for (std::size_t c = next.fetch_add(1); c < n_chunks; c = next.fetch_add(1)) work(c);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  double lik = 0.0;
  for (std::size_t c = 0; c < n_chunks; ++c) {
    lik += part_lik[c];
    for (std::size_t i = 0; i < total; ++i) {
      out.mean[i] += part_mean[c][i];
      out.log_scale[i] += part_ls[c][i];
    }
  }
  infer_detail::kl_gradient(st, stage, prior_scale, out.mean.data(), out.log_scale.data());
  out.elbo = lik_weight * lik - infer_detail::kl_active(st, stage, prior_scale);
  return out;
}

// ---- Fitting loop ----

struct FitResult {
  bool converged = false;
  bool aborted_nan = false;
  std::int64_t iterations = 0;
  double final_elbo = 0.0;
  std::vector<std::string> log_lines;   // line-delimited JSON records
  std::vector<double> step_elbo;        // per-step minibatch ELBO trace
};

namespace infer_detail {

inline void adam_update(VariationalState& st, Stage stage, const ElboGradient& g,
                        const TrainingConfig& cfg) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  st.step += 1;
  const double t = static_cast<double>(st.step);
  const double lr = cfg.learning_rate / (1.0 + cfg.lr_decay * t);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);
  for (Block b : stage_blocks(stage)) {
    const std::size_t off = st.layout.offset[static_cast<int>(b)];
    const std::size_t n = st.layout.block_size(b);
    for (std::size_t i = off; i < off + n; ++i) {
      st.m_mean[i] = b1 * st.m_mean[i] + (1.0 - b1) * g.mean[i];
      st.v_mean[i] = b2 * st.v_mean[i] + (1.0 - b2) * g.mean[i] * g.mean[i];
      st.mean[i] += lr * (st.m_mean[i] / c1) / (std::sqrt(st.v_mean[i] / c2) + eps);
      st.m_ls[i] = b1 * st.m_ls[i] + (1.0 - b1) * g.log_scale[i];
      st.v_ls[i] = b2 * st.v_ls[i] + (1.0 - b2) * g.log_scale[i] * g.log_scale[i];
      st.log_scale[i] += lr * (st.m_ls[i] / c1) / (std::sqrt(st.v_ls[i] / c2) + eps);
      st.log_scale[i] = std::clamp(st.log_scale[i], -12.0, 4.0);
    }
  }
}

}  // namespace infer_detail

// Run SVI for one stage, resuming from the state's counters (so a reloaded
// checkpoint continues identically). Convergence: relative ELBO change over a
// five-evaluation window below cfg.tolerance, evaluated once per epoch on a
// fixed monitoring subsample with fixed evaluation noise.
inline FitResult fit_stage(VariationalState& st, const NfDataset& ds, Stage stage,
                           const TrainingConfig& cfg) {
  cfg.validate();
  FitResult res;
  const std::size_t n = ds.n_obs(stage);
  if (n == 0) throw DataError("no training observations for this stage");

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::vector<std::uint32_t> monitor = order;
  {
    auto rng = make_rng(cfg.seed, rng_stream::kEval, 0x17);
    std::shuffle(monitor.begin(), monitor.end(), rng);
    if (monitor.size() > static_cast<std::size_t>(cfg.monitor_obs))
      monitor.resize(static_cast<std::size_t>(cfg.monitor_obs));
  }
  const double monitor_weight = static_cast<double>(n) / static_cast<double>(monitor.size());

  VariationalState last_good = st;
  char line[256];
  for (; st.epoch < cfg.max_epochs; ) {
    double elbo = std::nan("");
    try {
      // Rebuild from identity each epoch so the permutation depends only on
      // (seed, epoch), not on how many epochs this process has already run.
      // A fit resumed from a checkpoint then sees the same batches as an
      // uninterrupted one.
      std::iota(order.begin(), order.end(), 0u);
      auto rng = make_rng(cfg.seed, rng_stream::kMinibatch, static_cast<std::uint64_t>(st.epoch));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(cfg.minibatch)) {
        const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.minibatch));
        const double weight = static_cast<double>(n) / static_cast<double>(hi - lo);
        ElboGradient g = elbo_gradient(st, ds, stage,
                                       std::span<const std::uint32_t>(order.data() + lo, hi - lo),
                                       cfg.mc_draws, cfg.seed,
                                       static_cast<std::uint64_t>(st.step) + 1, weight,
                                       cfg.prior_scale, cfg.threads);
        infer_detail::adam_update(st, stage, g, cfg);
        res.step_elbo.push_back(g.elbo);
      }
      st.epoch += 1;
      elbo = elbo_estimate(st, ds, stage, monitor, cfg.eval_draws, cfg.seed, 0, monitor_weight,
                           cfg.prior_scale);
    } catch (const NumericError&) {
      st = last_good;
      res.aborted_nan = true;
      break;
    }
    const double lr_now = cfg.learning_rate / (1.0 + cfg.lr_decay * static_cast<double>(st.step));
    std::snprintf(line, sizeof(line),
                  "{\"iteration\":%lld,\"epoch\":%d,\"elbo\":%.10g,\"step_size\":%.6g}",
                  static_cast<long long>(st.step), st.epoch, elbo, lr_now);
    res.log_lines.emplace_back(line);
    if (!std::isfinite(elbo)) {
      st = last_good;
      res.aborted_nan = true;
      break;
    }
    st.elbo_history.push_back(elbo);
    last_good = st;
    // Stop when the trailing five-epoch window mean stops moving relative to
    // the window before it. Single-point differences false-trigger when the
    // trace oscillates around its plateau; window means do not.
    const std::size_t h = st.elbo_history.size();
    if (h >= 10) {
      double recent = 0.0, older = 0.0;
      for (std::size_t k = h - 5; k < h; ++k) recent += st.elbo_history[k];
      for (std::size_t k = h - 10; k < h - 5; ++k) older += st.elbo_history[k];
      recent /= 5.0;
      older /= 5.0;
      const double rel = std::abs(recent - older) / std::max(1.0, std::abs(older));
      if (rel < cfg.tolerance) {
        res.converged = true;
        break;
      }
    }
  }
  res.iterations = st.step;
  res.final_elbo = st.elbo_history.empty() ? std::nan("") : st.elbo_history.back();
  return res;
}

inline FitResult fit_stage1_upc(VariationalState& st, const NfDataset& ds,
                                const TrainingConfig& cfg) {
  if (ds.purchases.empty()) throw DataError("stage one needs purchase observations");
  return fit_stage(st, ds, Stage::Items, cfg);
}

inline FitResult fit_stage2_category(VariationalState& st, const NfDataset& ds,
                                     const TrainingConfig& cfg) {
  if (ds.cells.empty()) throw DataError("stage two needs category cells");
  VariationalState fresh = st;  // reset counters for the new stage
  fresh.step = 0;
  fresh.epoch = 0;
  fresh.elbo_history.clear();
  st = fresh;
  return fit_stage(st, ds, Stage::Categories, cfg);
}

// Inclusive values from posterior-mean utilities for every household x kept
// category x session; empty choice sets get the -inf sentinel.
inline InclusiveValueTable compute_inclusive_values(const VariationalState& st,
                                                    const NfDataset& ds) {
  const Dims& d = st.layout.dims;
  InclusiveValueTable table;
  table.n_households = d.N;
  table.n_slots = static_cast<int>(ds.items_of_slot.size());
  table.n_sessions = ds.grid->n_sessions();
  table.iv.assign(static_cast<std::size_t>(d.N) * table.n_slots * table.n_sessions, kNegInf);
  ParamVector pv = st.posterior_means();
  LatentParams params = pv.view();
  std::vector<double> u;
  for (int i = 0; i < d.N; ++i) {
    const auto w_row = ds.w.row(i);
    for (int s = 0; s < table.n_slots; ++s) {
      for (int sess = 0; sess < table.n_sessions; ++sess) {
        const auto& items = ds.avail[static_cast<std::size_t>(s)][static_cast<std::size_t>(sess)];
        if (items.empty()) continue;
        u.resize(items.size());
        for (std::size_t a = 0; a < items.size(); ++a)
          u[a] = upc_utility(params, i, items[a], ds.grid->price(items[a], sess), w_row,
                             ds.hierarchy->item_covariates.row(items[a]));
        table.at(i, s, sess) = inclusive_value(u, {});
      }
    }
  }
  return table;
}

// ---- Checkpointing ----

namespace infer_detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <class T>
inline T take(const std::string& s, std::size_t& pos) {
  if (pos + sizeof(T) > s.size()) throw DataError("truncated checkpoint");
  T v;
  std::memcpy(&v, s.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace infer_detail

inline std::string serialize_state(const VariationalState& st) {
  std::string out;
  out.reserve(64 + st.size() * 6 * sizeof(double));
  out += "NFCK0001";
  const Dims& d = st.layout.dims;
  const std::int32_t dims[9] = {d.N, d.J, d.C, d.T, d.K, d.M, d.P, d.Q, d.R};
  infer_detail::put_bytes(out, dims, sizeof(dims));
  infer_detail::put_bytes(out, &st.step, sizeof(st.step));
  infer_detail::put_bytes(out, &st.epoch, sizeof(st.epoch));
  const std::uint64_t nh = st.elbo_history.size();
  infer_detail::put_bytes(out, &nh, sizeof(nh));
  infer_detail::put_bytes(out, st.elbo_history.data(), nh * sizeof(double));
  for (const auto* v : {&st.mean, &st.log_scale, &st.m_mean, &st.v_mean, &st.m_ls, &st.v_ls})
    infer_detail::put_bytes(out, v->data(), v->size() * sizeof(double));
  const std::uint64_t digest = fnv1a(out);
  infer_detail::put_bytes(out, &digest, sizeof(digest));
  return out;
}

inline VariationalState deserialize_state(const std::string& s) {
  if (s.size() < 16 || s.compare(0, 8, "NFCK0001") != 0)
    throw DataError("bad checkpoint header");
  const std::uint64_t digest = [&] {
    std::uint64_t d;
    std::memcpy(&d, s.data() + s.size() - sizeof(d), sizeof(d));
    return d;
  }();
  if (fnv1a(std::string_view(s.data(), s.size() - sizeof(std::uint64_t))) != digest)
    throw DataError("checkpoint digest mismatch");
  std::size_t pos = 8;
  Dims d;
  std::int32_t raw[9];
  for (auto& r : raw) r = infer_detail::take<std::int32_t>(s, pos);
  d.N = raw[0]; d.J = raw[1]; d.C = raw[2]; d.T = raw[3]; d.K = raw[4];
  d.M = raw[5]; d.P = raw[6]; d.Q = raw[7]; d.R = raw[8];
  VariationalState st;
  st.layout = ParamLayout::make(d);
  st.step = infer_detail::take<std::int64_t>(s, pos);
  st.epoch = infer_detail::take<std::int32_t>(s, pos);
  const std::uint64_t nh = infer_detail::take<std::uint64_t>(s, pos);
  st.elbo_history.resize(nh);
  for (auto& v : st.elbo_history) v = infer_detail::take<double>(s, pos);
  const std::size_t n = st.layout.total;
  for (auto* v : {&st.mean, &st.log_scale, &st.m_mean, &st.v_mean, &st.m_ls, &st.v_ls}) {
    v->resize(n);
    for (auto& e : *v) e = infer_detail::take<double>(s, pos);
  }
  if (pos + sizeof(std::uint64_t) != s.size()) throw DataError("checkpoint length mismatch");
  return st;
}

inline void save_checkpoint(const VariationalState& st, const std::string& path) {
  write_file(path, serialize_state(st));
}

inline VariationalState load_checkpoint(const std::string& path) {
  return deserialize_state(read_file(path));
}

// ---- Hyperparameter selection ----

struct HyperCandidate {
  TrainingConfig config;
  double validation_score = 0.0;  // validation counterfactual log-likelihood
};

inline TrainingConfig select_hyperparameters(const std::vector<HyperCandidate>& candidates) {
  if (candidates.empty()) throw ConfigError("no hyperparameter candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& a = candidates[i];
    const auto& b = candidates[best];
    const int a_size = a.config.k_factors + a.config.m_factors;
    const int b_size = b.config.k_factors + b.config.m_factors;
    if (a.validation_score > b.validation_score ||
        (a.validation_score == b.validation_score && a_size < b_size))
      best = i;
  }
  return candidates[best].config;
}

}  // namespace nestfact
