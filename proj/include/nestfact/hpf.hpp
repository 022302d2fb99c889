#pragma once
// Hierarchical Poisson factorization of the household-by-item purchase count
// matrix, fit by closed-form coordinate ascent. The fitted rates double as
// per-(household, item) preference controls for the discrete choice baselines:
// the control is log(mu_ij), and a category's outside good gets
// 1 - sum_k log(mu_ik).
//
// Generative model (all entries independent):
//   activity   xi_i  ~ Gamma(activity_shape, activity_rate)
//   weights    theta_ik ~ Gamma(shape, xi_i)
//   popularity eta_j ~ Gamma(activity_shape, activity_rate)
//   weights    beta_jk ~ Gamma(shape, eta_j)
//   counts     y_ij ~ Poisson(theta_i . beta_j)
//
// The variational family is Gamma for every latent entry plus a per-positive-
// count multinomial over factors; every update is exact, so the bound cannot
// decrease between sweeps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/math.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/splits_fwd.hpp"

namespace nestfact {

struct HpfPriors {
  double shape = 0.3;           // shape of the weight entries
  double activity_shape = 0.3;  // shape of the per-entity rate
  double activity_rate = 0.3;   // rate of the per-entity rate

  void validate() const {
    if (!(shape > 0.0) || !(activity_shape > 0.0) || !(activity_rate > 0.0))
      throw ConfigError("hpf priors must be positive");
  }
};

struct HpfConfig {
  int k_hpf = 20;
  HpfPriors priors;
  int max_sweeps = 500;
  double tolerance = 1e-8;  // relative bound change that counts as converged
  std::uint64_t seed = 1;

  void validate() const {
    priors.validate();
    if (k_hpf < 1) throw ConfigError("k_hpf must be at least 1");
    if (max_sweeps < 1) throw ConfigError("max_sweeps must be at least 1");
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
  }
};

// One aggregated training cell: purchases of item by user over the train split.
struct PurchaseCount {
  std::int32_t user = 0;
  std::int32_t item = 0;
  std::int64_t count = 0;
};

struct HpfFit {
  int n_users = 0, n_items = 0, k = 0;
  // Gamma variational factors, row-major [entity * k + factor].
  std::vector<double> theta_shp, theta_rte;  // user weights
  std::vector<double> beta_shp, beta_rte;    // item weights
  std::vector<double> act_shp, act_rte;      // user activity
  std::vector<double> pop_shp, pop_rte;      // item popularity
  std::vector<double> elbo_trace;            // one entry per sweep
  bool converged = false;

  double expected_theta(int i, int f) const {
    const std::size_t at = static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                           static_cast<std::size_t>(f);
    return theta_shp[at] / theta_rte[at];
  }
  double expected_beta(int j, int f) const {
    const std::size_t at = static_cast<std::size_t>(j) * static_cast<std::size_t>(k) +
                           static_cast<std::size_t>(f);
    return beta_shp[at] / beta_rte[at];
  }
  // Mean purchase rate for the pair; strictly positive by construction.
  double mu(int i, int j) const {
    if (i < 0 || i >= n_users || j < 0 || j >= n_items)
      throw DataError("hpf rate lookup outside the fitted matrix");
    double acc = 0.0;
    for (int f = 0; f < k; ++f) acc += expected_theta(i, f) * expected_beta(j, f);
    return acc;
  }
};

namespace hpf_detail {

// E[ln g] for g ~ Gamma(shp, rte).
inline double e_log_gamma(double shp, double rte) { return digamma(shp) - std::log(rte); }

// Entropy of Gamma(shp, rte).
inline double gamma_entropy(double shp, double rte) {
  return shp - std::log(rte) + std::lgamma(shp) + (1.0 - shp) * digamma(shp);
}

// E_q[ln p(g | shape, rate)] minus nothing, with E[ln rate]/E[rate] supplied so
// the rate may itself be a latent Gamma variable.
inline double e_log_gamma_prior(double shape, double e_log_rate, double e_rate, double e_log_g,
                                double e_g) {
  return shape * e_log_rate - std::lgamma(shape) + (shape - 1.0) * e_log_g - e_rate * e_g;
}

}  // namespace hpf_detail

// Fit by coordinate ascent. Counts must be nonnegative; zero cells may simply
// be omitted. Deterministic for a fixed config, including thread-free sweeps.
inline HpfFit fit_hpf(std::span<const PurchaseCount> counts, int n_users, int n_items,
                      const HpfConfig& cfg) {
  cfg.validate();
  if (n_users < 1 || n_items < 1) throw DataError("hpf needs at least one user and item");
  std::int64_t total = 0;
  for (const PurchaseCount& c : counts) {
    if (c.user < 0 || c.user >= n_users || c.item < 0 || c.item >= n_items)
      throw DataError("hpf count outside the matrix");
    if (c.count < 0) throw DataError("hpf counts must be nonnegative");
    total += c.count;
  }
  if (total == 0) throw DataError("degenerate counts: no purchases to factorize");

  const int K = cfg.k_hpf;
  const double a = cfg.priors.shape;
  const double a2 = cfg.priors.activity_shape;
  const double b2 = cfg.priors.activity_rate;
  const std::size_t nu = static_cast<std::size_t>(n_users);
  const std::size_t ni = static_cast<std::size_t>(n_items);
  const std::size_t kk = static_cast<std::size_t>(K);

  HpfFit fit;
  fit.n_users = n_users;
  fit.n_items = n_items;
  fit.k = K;

  // Jittered initialization around the prior breaks factor symmetry; any
  // positive starting point preserves the ascent guarantee.
  auto rng = make_rng(cfg.seed, rng_stream::kInit, 0xb0);
  std::uniform_real_distribution<double> jitter(0.0, 0.1);
  auto init = [&](std::vector<double>& v, std::size_t n, double base) {
    v.resize(n);
    for (double& e : v) e = base + jitter(rng);
  };
  init(fit.theta_shp, nu * kk, a);
  init(fit.theta_rte, nu * kk, b2);
  init(fit.beta_shp, ni * kk, a);
  init(fit.beta_rte, ni * kk, b2);
  // Activity shapes are constant at their fixed-point value.
  fit.act_shp.assign(nu, a2 + K * a);
  init(fit.act_rte, nu, b2);
  fit.pop_shp.assign(ni, a2 + K * a);
  init(fit.pop_rte, ni, b2);

  std::vector<double> phi(kk);            // per-cell factor responsibilities
  std::vector<double> log_theta(nu * kk); // E[ln theta]
  std::vector<double> log_beta(ni * kk);  // E[ln beta]
  std::vector<double> theta_sum(kk), beta_sum(kk);
  std::vector<double> num_theta(nu * kk), num_beta(ni * kk);

  auto refresh_logs = [&]() {
    for (std::size_t t = 0; t < nu * kk; ++t)
      log_theta[t] = hpf_detail::e_log_gamma(fit.theta_shp[t], fit.theta_rte[t]);
    for (std::size_t t = 0; t < ni * kk; ++t)
      log_beta[t] = hpf_detail::e_log_gamma(fit.beta_shp[t], fit.beta_rte[t]);
  };
  auto refresh_sums = [&]() {
    std::fill(theta_sum.begin(), theta_sum.end(), 0.0);
    std::fill(beta_sum.begin(), beta_sum.end(), 0.0);
    for (std::size_t i = 0; i < nu; ++i)
      for (std::size_t f = 0; f < kk; ++f)
        theta_sum[f] += fit.theta_shp[i * kk + f] / fit.theta_rte[i * kk + f];
    for (std::size_t j = 0; j < ni; ++j)
      for (std::size_t f = 0; f < kk; ++f)
        beta_sum[f] += fit.beta_shp[j * kk + f] / fit.beta_rte[j * kk + f];
  };

  // Variational bound with responsibilities held at their closed-form optimum,
  // which turns the per-cell term into count * log-sum-exp of the factor
  // scores. Constant in the count factorials is kept so traces are comparable
  // across runs.
  auto bound = [&]() {
    refresh_logs();
    refresh_sums();
    double l = 0.0;
    std::vector<double> score(kk);
    for (const PurchaseCount& c : counts) {
      if (c.count == 0) continue;
      const std::size_t iu = static_cast<std::size_t>(c.user) * kk;
      const std::size_t ij = static_cast<std::size_t>(c.item) * kk;
      for (std::size_t f = 0; f < kk; ++f) score[f] = log_theta[iu + f] + log_beta[ij + f];
      l += static_cast<double>(c.count) * log_sum_exp(score) -
           std::lgamma(static_cast<double>(c.count) + 1.0);
    }
    for (std::size_t f = 0; f < kk; ++f) l -= theta_sum[f] * beta_sum[f];

    for (std::size_t i = 0; i < nu; ++i) {
      const double e_xi = fit.act_shp[i] / fit.act_rte[i];
      const double e_log_xi = hpf_detail::e_log_gamma(fit.act_shp[i], fit.act_rte[i]);
      l += hpf_detail::e_log_gamma_prior(a2, std::log(b2), b2, e_log_xi, e_xi) +
           hpf_detail::gamma_entropy(fit.act_shp[i], fit.act_rte[i]);
      for (std::size_t f = 0; f < kk; ++f) {
        const std::size_t t = i * kk + f;
        l += hpf_detail::e_log_gamma_prior(a, e_log_xi, e_xi, log_theta[t],
                                           fit.theta_shp[t] / fit.theta_rte[t]) +
             hpf_detail::gamma_entropy(fit.theta_shp[t], fit.theta_rte[t]);
      }
    }
    for (std::size_t j = 0; j < ni; ++j) {
      const double e_eta = fit.pop_shp[j] / fit.pop_rte[j];
      const double e_log_eta = hpf_detail::e_log_gamma(fit.pop_shp[j], fit.pop_rte[j]);
      l += hpf_detail::e_log_gamma_prior(a2, std::log(b2), b2, e_log_eta, e_eta) +
           hpf_detail::gamma_entropy(fit.pop_shp[j], fit.pop_rte[j]);
      for (std::size_t f = 0; f < kk; ++f) {
        const std::size_t t = j * kk + f;
        l += hpf_detail::e_log_gamma_prior(a, e_log_eta, e_eta, log_beta[t],
                                           fit.beta_shp[t] / fit.beta_rte[t]) +
             hpf_detail::gamma_entropy(fit.beta_shp[t], fit.beta_rte[t]);
      }
    }
    return l;
  };

  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    refresh_logs();
    refresh_sums();

    // Factor responsibilities for every positive cell, accumulated into the
    // shape numerators of both sides at once.
    std::fill(num_theta.begin(), num_theta.end(), 0.0);
    std::fill(num_beta.begin(), num_beta.end(), 0.0);
    for (const PurchaseCount& c : counts) {
      if (c.count == 0) continue;
      const std::size_t iu = static_cast<std::size_t>(c.user) * kk;
      const std::size_t ij = static_cast<std::size_t>(c.item) * kk;
      for (std::size_t f = 0; f < kk; ++f) phi[f] = log_theta[iu + f] + log_beta[ij + f];
      const double lse = log_sum_exp(phi);
      for (std::size_t f = 0; f < kk; ++f) {
        const double r = std::exp(phi[f] - lse) * static_cast<double>(c.count);
        num_theta[iu + f] += r;
        num_beta[ij + f] += r;
      }
    }

    // User block: weights given current item sums, then activity.
    for (std::size_t i = 0; i < nu; ++i) {
      const double e_xi = fit.act_shp[i] / fit.act_rte[i];
      double row_sum = 0.0;
      for (std::size_t f = 0; f < kk; ++f) {
        const std::size_t t = i * kk + f;
        fit.theta_shp[t] = a + num_theta[t];
        fit.theta_rte[t] = e_xi + beta_sum[f];
        row_sum += fit.theta_shp[t] / fit.theta_rte[t];
      }
      fit.act_rte[i] = b2 + row_sum;
    }

    // Item block sees the refreshed user weights.
    std::fill(theta_sum.begin(), theta_sum.end(), 0.0);
    for (std::size_t i = 0; i < nu; ++i)
      for (std::size_t f = 0; f < kk; ++f)
        theta_sum[f] += fit.theta_shp[i * kk + f] / fit.theta_rte[i * kk + f];
    for (std::size_t j = 0; j < ni; ++j) {
      const double e_eta = fit.pop_shp[j] / fit.pop_rte[j];
      double row_sum = 0.0;
      for (std::size_t f = 0; f < kk; ++f) {
        const std::size_t t = j * kk + f;
        fit.beta_shp[t] = a + num_beta[t];
        fit.beta_rte[t] = e_eta + theta_sum[f];
        row_sum += fit.beta_shp[t] / fit.beta_rte[t];
      }
      fit.pop_rte[j] = b2 + row_sum;
    }

    fit.elbo_trace.push_back(bound());
    const std::size_t h = fit.elbo_trace.size();
    if (h >= 2) {
      const double prev = fit.elbo_trace[h - 2];
      const double rel = std::abs(fit.elbo_trace[h - 1] - prev) / std::max(1.0, std::abs(prev));
      if (rel < cfg.tolerance) {
        fit.converged = true;
        break;
      }
    }
  }
  return fit;
}

// Utility-scale preference control: the choice model analogue of the fitted
// rate, u_ij = log(mu_ij) + noise.
inline double hpf_control(const HpfFit& fit, int household, int item) {
  return std::log(fit.mu(household, item));
}

// Outside-good utility for a category: one minus the summed item controls, so
// an item at rate exactly 1 contributes nothing.
inline double outside_good_control(const HpfFit& fit, int household, std::span<const int> items) {
  double acc = 1.0;
  for (int j : items) acc -= hpf_control(fit, household, j);
  return acc;
}

// Delimited export consumed by the choice baselines: one row per
// (household, item) pair in the given orders, no gaps.
inline void write_control_table(const std::string& path, const HpfFit& fit,
                                std::span<const std::string> household_names,
                                std::span<const int> items,
                                std::span<const std::string> item_names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open control table for writing: " + path);
  out << "household,upc,control\n";
  char buf[64];
  for (int i = 0; i < fit.n_users; ++i) {
    for (int j : items) {
      std::snprintf(buf, sizeof(buf), "%.17g", hpf_control(fit, i, j));
      out << household_names[static_cast<std::size_t>(i)] << ','
          << item_names[static_cast<std::size_t>(j)] << ',' << buf << '\n';
    }
  }
  if (!out) throw DataError("failed writing control table: " + path);
}

// Aggregate a training split into per-(household, item) counts for the fit.
// Items past the modeled range (the anchor row, if any) may be excluded by
// the caller via n_items.
inline std::vector<PurchaseCount> aggregate_counts(const TransactionPanel& panel, int n_items,
                                                   const SampleSplit& split, SplitBucket bucket) {
  std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> cells;
  for (const Trip& trip : panel.trips) {
    if (split.of(trip.household, trip.week) != bucket) continue;
    for (const Purchase& pur : trip.purchases) {
      if (pur.item >= n_items) continue;
      cells[{trip.household, pur.item}] += pur.quantity;
    }
  }
  std::vector<PurchaseCount> out;
  out.reserve(cells.size());
  for (const auto& [key, n] : cells) out.push_back({key.first, key.second, n});
  return out;
}

}  // namespace nestfact
