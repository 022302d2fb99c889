#pragma once
// Uniform per-household demand interface consumed by the evaluation,
// elasticity and targeting layers. A model answers one question: for a
// household, category slot and session, what is the probability of buying
// each modeled item (or nothing) at the supplied prices and availability?
//
// Two implementations cover every model in the comparison ladder. The factor
// model serves both the synthetic ground truth and fitted posterior means;
// the logit adapter wraps the per-category discrete-choice fits and splits
// its pooled alternative back onto member items.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nestfact/choice_kernel.hpp"
#include "nestfact/common.hpp"
#include "nestfact/filters.hpp"
#include "nestfact/hierarchy.hpp"
#include "nestfact/logit_baselines.hpp"
#include "nestfact/panel.hpp"
#include "nestfact/synthetic.hpp"

namespace nestfact {

class DemandModel {
 public:
  virtual ~DemandModel() = default;
  virtual const std::string& name() const = 0;
  virtual int n_households() const = 0;

  // Unconditional purchase probabilities for one household, category slot and
  // session. items, price and avail run over the slot's modeled items in
  // ascending id order (see modeled_items); out receives items.size() + 1
  // entries, the no-purchase probability last. Prices must be positive for
  // available items.
  virtual void category_probs(int household, int slot, int session, std::span<const int> items,
                              std::span<const double> price,
                              std::span<const std::uint8_t> avail,
                              std::span<double> out) const = 0;
};

// Canonical item universe per kept slot: top items plus the pooled tail,
// ascending by id. Every category_probs call indexes against these lists.
inline std::vector<std::vector<int>> modeled_items(const CategoryCatalog& catalog) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(catalog.n_kept()));
  for (int s = 0; s < catalog.n_kept(); ++s) {
    auto& items = out[static_cast<std::size_t>(s)];
    items = catalog.top_items[static_cast<std::size_t>(s)];
    items.insert(items.end(), catalog.pooled_items[static_cast<std::size_t>(s)].begin(),
                 catalog.pooled_items[static_cast<std::size_t>(s)].end());
    std::sort(items.begin(), items.end());
  }
  return out;
}

inline std::vector<int> slot_categories(const CategoryCatalog& catalog) {
  std::vector<int> out(static_cast<std::size_t>(catalog.n_kept()), -1);
  for (int c = 0; c < static_cast<int>(catalog.slot_of_category.size()); ++c) {
    const int s = catalog.slot_of_category[static_cast<std::size_t>(c)];
    if (s >= 0) out[static_cast<std::size_t>(s)] = c;
  }
  return out;
}

inline Matrix household_matrix(const TransactionPanel& panel) {
  const int n = static_cast<int>(panel.households.size());
  const int p = panel.covariate_width();
  Matrix w(n, p);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < p; ++c)
      w(i, c) = panel.households[static_cast<std::size_t>(i)].w[static_cast<std::size_t>(c)];
  return w;
}

inline Matrix household_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw DataError("empty household covariate table");
  Matrix w(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size())
      throw DataError("ragged household covariate table");
    for (std::size_t c = 0; c < rows[i].size(); ++c)
      w(static_cast<int>(i), static_cast<int>(c)) = rows[i][c];
  }
  return w;
}

// Factorized demand: serves the synthetic ground truth and fitted posterior
// means through the same utility kernel.
class FactorDemandModel final : public DemandModel {
 public:
  FactorDemandModel(std::string name, ParamVector params, Matrix w,
                    const ProductHierarchy& hierarchy, std::vector<int> slot_category)
      : name_(std::move(name)),
        params_(std::move(params)),
        w_(std::move(w)),
        hierarchy_(&hierarchy),
        slot_category_(std::move(slot_category)),
        x_c_(static_cast<std::size_t>(params_.layout.dims.Q), 0.0) {
    const Dims& d = params_.layout.dims;
    if (w_.rows() != d.N || w_.cols() != d.P)
      throw ConfigError("household covariates do not match the parameter layout");
    if (hierarchy_->item_covariates.cols() != d.Q)
      throw ConfigError("item covariates do not match the parameter layout");
  }

  const std::string& name() const override { return name_; }
  int n_households() const override { return params_.layout.dims.N; }
  const ParamVector& params() const { return params_; }

  void category_probs(int household, int slot, int session, std::span<const int> items,
                      std::span<const double> price, std::span<const std::uint8_t> avail,
                      std::span<double> out) const override {
    const Dims& d = params_.layout.dims;
    if (household < 0 || household >= d.N) throw DataError("household out of range");
    if (slot < 0 || slot >= static_cast<int>(slot_category_.size()))
      throw DataError("category slot out of range");
    if (session < 0 || session >= 2 * d.T) throw DataError("session out of range");
    if (price.size() != items.size() || avail.size() != items.size() ||
        out.size() != items.size() + 1)
      throw ConfigError("span widths disagree in category_probs");

    const LatentParams p = params_.view();
    const auto w_i = w_.row(household);
    bool any = false;
    std::vector<double> u(items.size(), 0.0);
    for (std::size_t k = 0; k < items.size(); ++k) {
      if (!avail[k]) continue;
      u[k] = upc_utility(p, household, items[k], price[k], w_i,
                         hierarchy_->item_covariates.row(items[k]));
      any = true;
    }
    if (!any) {
      std::fill(out.begin(), out.end(), 0.0);
      out[items.size()] = 1.0;
      return;
    }
    const double iv = inclusive_value(u, avail);
    std::vector<double> cond(items.size(), 0.0);
    conditional_choice_probs(u, avail, cond);
    const double u_c = category_utility(p, household, slot_category_[static_cast<std::size_t>(slot)],
                                        iv, session / 2, session % 2, w_i, x_c_);
    unconditional_item_probs(category_purchase_prob(u_c), cond, out);
  }

  // Noise-perturbed copy for dominance checks: independent Gaussian noise on
  // every parameter.
  FactorDemandModel perturbed(std::string name, double sd, std::uint64_t seed) const {
    ParamVector pv = params_;
    auto rng = make_rng(seed, rng_stream::kEval, 0x7e);
    std::normal_distribution<double> noise(0.0, sd);
    for (double& v : pv.values) v += noise(rng);
    return FactorDemandModel(std::move(name), std::move(pv), w_, *hierarchy_, slot_category_);
  }

 private:
  std::string name_;
  ParamVector params_;
  Matrix w_;
  const ProductHierarchy* hierarchy_;
  std::vector<int> slot_category_;
  std::vector<double> x_c_;
};

// Ground-truth demand model for a synthetic panel. The planted endogenous
// demand component lives outside the factor parameterization, so configs
// with a nonzero gain are rejected rather than silently approximated.
inline FactorDemandModel truth_demand_model(const SyntheticData& data,
                                            const CategoryCatalog& catalog,
                                            std::string name = "truth") {
  if (data.truth.config.endo_demand_gain != 0.0)
    throw ConfigError("ground truth with a planted demand shock has no factor representation");
  return FactorDemandModel(std::move(name), truth_to_param_vector(data.truth, data.hierarchy),
                           household_matrix(data.truth.w), data.hierarchy,
                           slot_categories(catalog));
}

// Wraps the per-category logit fits. The pooled alternative's probability is
// split over its member items by availability-renormalized training shares,
// so summing members recovers the alternative's probability exactly.
class LogitBaselineModel final : public DemandModel {
 public:
  // data and fits are borrowed per slot and must outlive the adapter.
  LogitBaselineModel(std::string name, std::vector<const CategoryChoiceData*> data,
                     std::vector<const MleFit*> fits)
      : name_(std::move(name)), data_(std::move(data)), fits_(std::move(fits)) {
    if (data_.empty() || data_.size() != fits_.size())
      throw ConfigError("logit adapter needs one fit per category slot");
    for (std::size_t s = 0; s < data_.size(); ++s)
      if (data_[s] == nullptr || fits_[s] == nullptr || data_[s]->slot != static_cast<int>(s))
        throw ConfigError("logit adapter slots out of order");
  }

  const std::string& name() const override { return name_; }
  int n_households() const override { return data_[0]->n_households; }
  const MleFit& fit(int slot) const { return *fits_[static_cast<std::size_t>(slot)]; }

  void category_probs(int household, int slot, int session, std::span<const int> items,
                      std::span<const double> price, std::span<const std::uint8_t> avail,
                      std::span<double> out) const override {
    if (slot < 0 || slot >= static_cast<int>(data_.size()))
      throw DataError("category slot out of range");
    const CategoryChoiceData& d = *data_[static_cast<std::size_t>(slot)];
    const MleFit& f = *fits_[static_cast<std::size_t>(slot)];
    if (price.size() != items.size() || avail.size() != items.size() ||
        out.size() != items.size() + 1)
      throw ConfigError("span widths disagree in category_probs");

    const int a_n = d.n_inside();
    const int n_top = static_cast<int>(d.top_items.size());
    std::vector<double> lp(static_cast<std::size_t>(a_n), 0.0);
    std::vector<std::uint8_t> av(static_cast<std::size_t>(a_n), 0);
    auto pos_of = [&](int item) {
      const auto it = std::lower_bound(items.begin(), items.end(), item);
      if (it == items.end() || *it != item)
        throw DataError("item missing from the modeled universe");
      return static_cast<std::size_t>(it - items.begin());
    };
    for (int a = 0; a < n_top; ++a) {
      const std::size_t k = pos_of(d.top_items[static_cast<std::size_t>(a)]);
      av[static_cast<std::size_t>(a)] = avail[k];
      lp[static_cast<std::size_t>(a)] = price[k] > 0.0 ? std::log(price[k]) : 0.0;
    }
    double wsum = 0.0;
    if (d.has_pooled()) {
      double psum = 0.0;
      for (std::size_t m = 0; m < d.pooled_items.size(); ++m) {
        const std::size_t k = pos_of(d.pooled_items[m]);
        if (!avail[k]) continue;
        wsum += d.pooled_weight[m];
        psum += d.pooled_weight[m] * price[k];
      }
      av[static_cast<std::size_t>(a_n - 1)] = wsum > 0.0 ? 1 : 0;
      lp[static_cast<std::size_t>(a_n - 1)] = wsum > 0.0 && psum > 0.0 ? std::log(psum / wsum) : 0.0;
    }

    const std::vector<double> probs = counterfactual_probs(d, f, household, session, lp, av);
    std::fill(out.begin(), out.end(), 0.0);
    for (int a = 0; a < n_top; ++a)
      out[pos_of(d.top_items[static_cast<std::size_t>(a)])] = probs[static_cast<std::size_t>(a)];
    if (d.has_pooled() && wsum > 0.0) {
      const double pooled = probs[static_cast<std::size_t>(a_n - 1)];
      for (std::size_t m = 0; m < d.pooled_items.size(); ++m) {
        const std::size_t k = pos_of(d.pooled_items[m]);
        if (avail[k]) out[k] = pooled * d.pooled_weight[m] / wsum;
      }
    }
    out[items.size()] = probs[static_cast<std::size_t>(a_n)];
  }

 private:
  std::string name_;
  std::vector<const CategoryChoiceData*> data_;
  std::vector<const MleFit*> fits_;
};

}  // namespace nestfact
