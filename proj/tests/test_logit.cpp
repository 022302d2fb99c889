#include "nestfact/logit_baselines.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "nestfact/synthetic.hpp"

using namespace nestfact;

namespace {

// Choice data with every alternative available in every session and flat
// week offsets; prices get filled by the individual simulators.
CategoryChoiceData blank_data(int n_households, int n_alts, int n_weeks) {
  CategoryChoiceData d;
  d.slot = 0;
  d.category = 0;
  d.top_items.resize(static_cast<std::size_t>(n_alts));
  std::iota(d.top_items.begin(), d.top_items.end(), 0);
  d.n_households = n_households;
  d.log_price = Matrix(n_alts, 2 * n_weeks, 0.0);
  d.avail.assign(static_cast<std::size_t>(n_alts),
                 std::vector<std::uint8_t>(static_cast<std::size_t>(2 * n_weeks), 1));
  d.week_offset.assign(static_cast<std::size_t>(n_weeks), 0.0);
  d.demo = Matrix(n_households, 0);
  return d;
}

void randomize_prices(CategoryChoiceData& d, Rng& rng, double lo = -0.7, double hi = 0.7) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (int a = 0; a < d.log_price.rows(); ++a)
    for (int s = 0; s < d.log_price.cols(); ++s) d.log_price(a, s) = u(rng);
}

// Exact multinomial sampling through the Gumbel-max construction.
int gumbel_choice(const std::vector<double>& u_inside, double u_out, Rng& rng) {
  std::uniform_real_distribution<double> uni(1e-12, 1.0 - 1e-12);
  double best = u_out - std::log(-std::log(uni(rng)));
  int alt = static_cast<int>(u_inside.size());
  for (std::size_t a = 0; a < u_inside.size(); ++a) {
    const double g = u_inside[a] - std::log(-std::log(uni(rng)));
    if (g > best) {
      best = g;
      alt = static_cast<int>(a);
    }
  }
  return alt;
}

struct PlainSim {
  int n_households = 500;
  int obs_per_household = 10;
  int n_alts = 4;
  int n_weeks = 40;
  std::vector<double> alpha;
  double eta = -2.0;
  double eta_sd = 0.0;  // > 0 simulates household-level price mixing
  double wednesday = 0.0;
  std::uint64_t seed = 7;
};

CategoryChoiceData simulate_plain(const PlainSim& cfg) {
  CategoryChoiceData d = blank_data(cfg.n_households, cfg.n_alts, cfg.n_weeks);
  Rng rng = make_rng(cfg.seed, rng_stream::kGenerator, 0);
  randomize_prices(d, rng);
  std::uniform_int_distribution<int> week(0, cfg.n_weeks - 1);
  std::uniform_int_distribution<int> day(0, 1);
  std::normal_distribution<double> mix(0.0, 1.0);
  std::vector<double> u(static_cast<std::size_t>(cfg.n_alts));
  for (int i = 0; i < cfg.n_households; ++i) {
    const double eta_i = cfg.eta + (cfg.eta_sd > 0.0 ? cfg.eta_sd * mix(rng) : 0.0);
    for (int k = 0; k < cfg.obs_per_household; ++k) {
      const int w = week(rng);
      const int wd = day(rng);
      const int sess = 2 * w + wd;
      for (int a = 0; a < cfg.n_alts; ++a)
        u[static_cast<std::size_t>(a)] = cfg.alpha[static_cast<std::size_t>(a)] +
                                         eta_i * d.log_price(a, sess) +
                                         (wd ? cfg.wednesday : 0.0);
      const int alt = gumbel_choice(u, 0.0, rng);
      d.obs.push_back({i, w, sess, static_cast<std::int8_t>(wd), alt});
    }
  }
  return d;
}

// Two-level sampling: the outside nest first, then the within-nest share.
CategoryChoiceData simulate_nested(const PlainSim& cfg, double zeta) {
  CategoryChoiceData d = blank_data(cfg.n_households, cfg.n_alts, cfg.n_weeks);
  Rng rng = make_rng(cfg.seed, rng_stream::kGenerator, 1);
  randomize_prices(d, rng);
  std::uniform_int_distribution<int> week(0, cfg.n_weeks - 1);
  std::uniform_int_distribution<int> day(0, 1);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(cfg.n_alts));
  for (int i = 0; i < cfg.n_households; ++i) {
    for (int k = 0; k < cfg.obs_per_household; ++k) {
      const int w = week(rng);
      const int wd = day(rng);
      const int sess = 2 * w + wd;
      double mx = -1e300;
      for (int a = 0; a < cfg.n_alts; ++a) {
        v[static_cast<std::size_t>(a)] = (cfg.alpha[static_cast<std::size_t>(a)] +
                                          cfg.eta * d.log_price(a, sess) +
                                          (wd ? cfg.wednesday : 0.0)) /
                                         zeta;
        mx = std::max(mx, v[static_cast<std::size_t>(a)]);
      }
      double z = 0.0;
      for (int a = 0; a < cfg.n_alts; ++a) z += std::exp(v[static_cast<std::size_t>(a)] - mx);
      const double iv = mx + std::log(z);
      int alt = cfg.n_alts;
      if (uni(rng) < sigmoid(zeta * iv)) {
        double r = uni(rng);
        alt = cfg.n_alts - 1;
        for (int a = 0; a < cfg.n_alts; ++a) {
          r -= std::exp(v[static_cast<std::size_t>(a)] - iv);
          if (r <= 0.0) {
            alt = a;
            break;
          }
        }
      }
      d.obs.push_back({i, w, sess, static_cast<std::int8_t>(wd), alt});
    }
  }
  return d;
}

LogitSpec lean_spec(BaselineKind kind) {
  LogitSpec spec;
  spec.kind = kind;
  spec.demographics = false;
  spec.weekday_dummy = true;
  return spec;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.data().size(); ++k)
    m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

}  // namespace

TEST(SpecValidation, RejectsContradictoryVariants) {
  LogitSpec s;
  s.demographics = true;
  s.hpf_controls = true;
  EXPECT_THROW(s.validate(), ConfigError);

  LogitSpec mixed;
  mixed.kind = BaselineKind::Mixed;
  EXPECT_THROW(mixed.validate(), ConfigError);  // no random coefficient
  mixed.random_price = true;
  mixed.draws = 50;
  EXPECT_THROW(mixed.validate(), ConfigError);  // too few draws
  mixed.draws = 200;
  EXPECT_NO_THROW(mixed.validate());

  LogitSpec plain;
  plain.random_price = true;
  EXPECT_THROW(plain.validate(), ConfigError);  // random coefficient outside mixed

  LogitSpec pinned;
  pinned.fixed_mix_scale = 0.0;
  EXPECT_THROW(pinned.validate(), ConfigError);  // pinned scale outside mixed
}

TEST(PlainLogit, RecoversPlantedPriceCoefficient) {
  PlainSim cfg;
  cfg.n_households = 2000;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.5, 0.2, -0.3, 0.0};
  cfg.eta = -2.0;
  cfg.wednesday = 0.25;
  CategoryChoiceData d = simulate_plain(cfg);
  ASSERT_EQ(d.obs.size(), 20000u);

  MleFit fit = fit_mnl(d, lean_spec(BaselineKind::Mnl));
  EXPECT_TRUE(fit.converged);
  EXPECT_LT(fit.grad_norm, 1e-6);
  EXPECT_TRUE(fit.price_identified);
  EXPECT_NEAR(fit.price_coefficient(), -2.0, 0.15);
  EXPECT_NEAR(fit.estimates[static_cast<std::size_t>(fit.layout.wday)], 0.25, 0.15);
  ASSERT_FALSE(std::isnan(fit.price_se()));
  EXPECT_GT(fit.price_se(), 0.0);
  EXPECT_LT(fit.price_p_value(), 1e-4);

  // Reported likelihood is reproducible from the estimates alone.
  Matrix probs = predict_probs(d, fit);
  double ll = 0.0;
  for (std::size_t k = 0; k < d.obs.size(); ++k)
    ll += std::log(probs(static_cast<int>(k), d.obs[k].alt));
  EXPECT_NEAR(ll, fit.log_lik, 1e-8 * std::abs(fit.log_lik));
}

TEST(PlainLogit, FlagsPriceAsUnidentifiedWithoutVariation) {
  PlainSim cfg;
  cfg.n_households = 200;
  cfg.obs_per_household = 5;
  cfg.alpha = {0.3, 0.0, -0.2, 0.1};
  CategoryChoiceData d = simulate_plain(cfg);
  for (int a = 0; a < d.log_price.rows(); ++a)
    for (int s = 0; s < d.log_price.cols(); ++s) d.log_price(a, s) = 0.4;

  MleFit fit = fit_mnl(d, lean_spec(BaselineKind::Mnl));
  EXPECT_FALSE(fit.price_identified);
  EXPECT_EQ(fit.layout.eta, -1);
  EXPECT_EQ(fit.price_coefficient(), 0.0);
  EXPECT_TRUE(std::isnan(fit.price_se()));
  ASSERT_FALSE(fit.warnings.empty());
  EXPECT_NE(fit.warnings.front().find("price"), std::string::npos);
}

TEST(PlainLogit, DoubledPricesAreAbsorbedByIntercepts) {
  PlainSim cfg;
  cfg.n_households = 600;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.4, 0.1, -0.2, 0.0};
  cfg.eta = -1.5;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec spec = lean_spec(BaselineKind::Mnl);
  spec.weekday_dummy = false;
  spec.tolerance = 1e-9;
  spec.max_iter = 800;
  MleFit base = fit_mnl(d, spec);
  ASSERT_TRUE(base.converged);

  CategoryChoiceData doubled = d;
  for (int a = 0; a < doubled.log_price.rows(); ++a)
    for (int s = 0; s < doubled.log_price.cols(); ++s)
      doubled.log_price(a, s) += std::log(2.0);
  MleFit shifted = fit_mnl(doubled, spec);
  ASSERT_TRUE(shifted.converged);

  EXPECT_NEAR(shifted.price_coefficient(), base.price_coefficient(), 1e-5);
  for (int a = 0; a < base.layout.a_n; ++a) {
    const double expect_alpha = base.estimates[static_cast<std::size_t>(base.layout.alpha + a)] -
                                base.price_coefficient() * std::log(2.0);
    EXPECT_NEAR(shifted.estimates[static_cast<std::size_t>(shifted.layout.alpha + a)],
                expect_alpha, 1e-4);
  }
  EXPECT_LT(max_abs_diff(predict_probs(d, base), predict_probs(doubled, shifted)), 1e-6);
}

TEST(NestedLogit, RecoversPlantedNestingCoefficient) {
  PlainSim cfg;
  cfg.n_households = 2000;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.8, 0.4, 0.0, -0.4};
  cfg.eta = -2.0;
  CategoryChoiceData d = simulate_nested(cfg, 0.6);
  ASSERT_EQ(d.obs.size(), 20000u);

  MleFit fit = fit_nested_logit(d, lean_spec(BaselineKind::Nested));
  EXPECT_TRUE(fit.converged);
  EXPECT_FALSE(fit.nest_at_boundary);
  EXPECT_NEAR(fit.nest_coefficient(), 0.6, 0.1);
  EXPECT_NEAR(fit.price_coefficient(), -2.0, 0.25);
}

TEST(NestedLogit, CollapsesToPlainLogitAtUnitCoefficient) {
  PlainSim cfg;
  cfg.n_households = 300;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.5, 0.0, -0.5, 0.2};
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec mnl_spec = lean_spec(BaselineKind::Mnl);
  MleFit mnl = fit_mnl(d, mnl_spec);

  LogitSpec nested_spec = lean_spec(BaselineKind::Nested);
  BaselineLayout nl = BaselineLayout::make(d, nested_spec, true);
  ASSERT_EQ(nl.total, mnl.layout.total + 1);
  std::vector<double> x(mnl.estimates);
  x.push_back(40.0);  // sigmoid(40) is 1 to machine precision
  std::vector<std::uint32_t> order(d.obs.size());
  std::iota(order.begin(), order.end(), 0u);

  const double ll_nested = baseline_loglik(d, nested_spec, nl, x, order, {});
  EXPECT_NEAR(ll_nested * static_cast<double>(d.obs.size()), mnl.log_lik, 1e-8);
}

TEST(NestedLogit, WithinNestSharesKeepTheirRatiosWhenAnAlternativeDrops) {
  PlainSim cfg;
  cfg.n_households = 400;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.8, 0.4, 0.0, -0.4};
  cfg.eta = -2.0;
  CategoryChoiceData d = simulate_nested(cfg, 0.6);

  LogitSpec spec = lean_spec(BaselineKind::Nested);
  spec.max_iter = 200;
  MleFit fit = fit_nested_logit(d, spec);
  Matrix before = predict_probs(d, fit);

  CategoryChoiceData dropped = d;
  for (std::size_t s = 0; s < dropped.avail[2].size(); ++s) dropped.avail[2][s] = 0;
  Matrix after = predict_probs(dropped, fit);

  int checked = 0;
  for (std::size_t k = 0; k < d.obs.size(); ++k) {
    if (d.obs[k].alt == 2) continue;  // keeps alternative 2 closed in both runs
    const double r_before = before(static_cast<int>(k), 0) / before(static_cast<int>(k), 1);
    const double r_after = after(static_cast<int>(k), 0) / after(static_cast<int>(k), 1);
    ASSERT_NEAR(r_after / r_before, 1.0, 1e-12);
    ++checked;
  }
  EXPECT_GT(checked, 1000);
}

TEST(MixedLogit, RecoversMixingMeanAndScale) {
  PlainSim cfg;
  cfg.n_households = 2500;
  cfg.obs_per_household = 20;
  cfg.n_alts = 3;
  cfg.alpha = {0.4, 0.0, -0.4};
  cfg.eta = -2.0;
  cfg.eta_sd = 0.5;
  cfg.wednesday = 0.0;
  CategoryChoiceData d = simulate_plain(cfg);
  ASSERT_EQ(d.obs.size(), 50000u);

  LogitSpec spec = lean_spec(BaselineKind::Mixed);
  spec.weekday_dummy = false;
  spec.random_price = true;
  spec.draws = 150;
  spec.tolerance = 2e-5;
  spec.max_iter = 200;
  MleFit fit = fit_mixed_logit(d, spec, spec.draws, 11);
  EXPECT_NEAR(fit.price_coefficient(), -2.0, 0.2);
  const double scale =
      std::exp(fit.estimates[static_cast<std::size_t>(fit.layout.ls_price)]);
  EXPECT_NEAR(scale, 0.5, 0.2);
}

TEST(MixedLogit, PinnedZeroScaleReproducesPlainLogitEstimates) {
  PlainSim cfg;
  cfg.n_households = 400;
  cfg.obs_per_household = 10;
  cfg.n_alts = 3;
  cfg.alpha = {0.3, 0.0, -0.3};
  cfg.eta = -1.2;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec mnl_spec = lean_spec(BaselineKind::Mnl);
  mnl_spec.weekday_dummy = false;
  MleFit mnl = fit_mnl(d, mnl_spec);

  LogitSpec degen = lean_spec(BaselineKind::Mixed);
  degen.weekday_dummy = false;
  degen.random_price = true;
  degen.fixed_mix_scale = 0.0;
  degen.draws = 100;
  MleFit mixed = fit_mixed_logit(d, degen);

  ASSERT_EQ(mixed.estimates.size(), mnl.estimates.size());
  for (std::size_t k = 0; k < mnl.estimates.size(); ++k)
    EXPECT_NEAR(mixed.estimates[k], mnl.estimates[k], 1e-4);
}

TEST(MixedLogit, SimulatedLikelihoodStabilizesAsDrawsGrow) {
  PlainSim cfg;
  cfg.n_households = 200;
  cfg.obs_per_household = 12;
  cfg.n_alts = 3;
  cfg.alpha = {0.4, 0.0, -0.4};
  cfg.eta = -1.5;
  cfg.eta_sd = 0.8;
  CategoryChoiceData d = simulate_plain(cfg);

  std::vector<std::uint32_t> order(d.obs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::vector<double> lls;
  for (int draws : {100, 200, 400, 800, 3200}) {
    LogitSpec spec = lean_spec(BaselineKind::Mixed);
    spec.weekday_dummy = false;
    spec.random_price = true;
    spec.draws = draws;
    BaselineLayout l = BaselineLayout::make(d, spec, true);
    std::vector<double> x(static_cast<std::size_t>(l.total), 0.0);
    x[0] = 0.4;
    x[2] = -0.4;
    x[static_cast<std::size_t>(l.eta)] = -1.5;
    x[static_cast<std::size_t>(l.ls_price)] = std::log(0.8);
    lls.push_back(baseline_loglik(d, spec, l, x, order, {}));
  }
  // Because each household owns a fixed stride of the low-discrepancy
  // sequence, a bigger draw count extends the smaller one, and the panel
  // likelihood settles onto a plateau: deviations from a many-draw
  // reference shrink instead of the plain-Monte-Carlo pattern of a
  // monotone climb out of the Jensen gap.
  const double ref = lls.back();
  const double g100 = std::abs(lls[0] - ref);
  const double g800 = std::abs(lls[3] - ref);
  EXPECT_LT(g100, 1e-4);
  EXPECT_LT(std::abs(lls[1] - ref), 1e-4);
  EXPECT_LT(std::abs(lls[2] - ref), 1e-4);
  EXPECT_LT(g800, 5e-6);
  EXPECT_LT(g800, g100);
}

TEST(MixedLogit, PanelLikelihoodBeatsPlainLogitOnHeterogeneousData) {
  PlainSim cfg;
  cfg.n_households = 400;
  cfg.obs_per_household = 15;
  cfg.n_alts = 3;
  cfg.alpha = {0.4, 0.0, -0.4};
  cfg.eta = -1.5;
  cfg.eta_sd = 0.8;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec mnl_spec = lean_spec(BaselineKind::Mnl);
  mnl_spec.weekday_dummy = false;
  MleFit mnl = fit_mnl(d, mnl_spec);

  LogitSpec mixed_spec = lean_spec(BaselineKind::Mixed);
  mixed_spec.weekday_dummy = false;
  mixed_spec.random_price = true;
  mixed_spec.draws = 100;
  mixed_spec.tolerance = 1e-4;
  mixed_spec.max_iter = 150;
  MleFit mixed = fit_mixed_logit(d, mixed_spec);

  EXPECT_GT(mixed.mean_ll, mnl.mean_ll + 1e-3);
}

TEST(Controls, AllZeroTableMatchesUncontrolledFit) {
  PlainSim cfg;
  cfg.n_households = 400;
  cfg.obs_per_household = 10;
  cfg.n_alts = 3;
  cfg.alpha = {0.3, 0.0, -0.3};
  cfg.eta = -1.5;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec bare = lean_spec(BaselineKind::Mnl);
  bare.weekday_dummy = false;
  bare.tolerance = 1e-9;
  bare.max_iter = 800;
  MleFit base = fit_mnl(d, bare);

  ControlTable zeros;
  zeros.n_households = cfg.n_households;
  zeros.n_items = cfg.n_alts;
  zeros.value = Matrix(cfg.n_households, cfg.n_alts, 0.0);
  zeros.present.assign(static_cast<std::size_t>(cfg.n_households) * cfg.n_alts, 1);
  CategoryChoiceData with = d;
  attach_hpf_controls(with, zeros);
  ASSERT_TRUE(with.has_controls);

  LogitSpec ctl = bare;
  ctl.hpf_controls = true;
  MleFit fit = fit_mnl(with, ctl);

  EXPECT_NEAR(fit.mean_ll, base.mean_ll, 1e-8);
  // The control column is constant, so only probabilities are pinned down.
  Matrix pa = predict_probs(d, base);
  Matrix pb = predict_probs(with, fit);
  EXPECT_LT(max_abs_diff(pa, pb), 1e-6);
}

TEST(Controls, TrueUtilitiesAsControlsEarnUnitCoefficient) {
  const int n_households = 800, obs_per = 12, n_alts = 3;
  CategoryChoiceData d = blank_data(n_households, n_alts, 30);
  Rng rng = make_rng(5, rng_stream::kGenerator, 2);
  std::uniform_real_distribution<double> g(0.0, 3.0);
  std::uniform_int_distribution<int> week(0, 29);
  std::uniform_int_distribution<int> day(0, 1);

  // Household-specific utilities that sum to one, so the derived outside
  // covariate (one minus the inside sum) equals the true outside utility 0.
  Matrix util(n_households, n_alts);
  for (int i = 0; i < n_households; ++i) {
    double sum = 0.0;
    for (int a = 0; a < n_alts; ++a) {
      util(i, a) = g(rng);
      sum += util(i, a);
    }
    for (int a = 0; a < n_alts; ++a) util(i, a) -= (sum - 1.0) / n_alts;
  }
  std::vector<double> u(static_cast<std::size_t>(n_alts));
  for (int i = 0; i < n_households; ++i)
    for (int k = 0; k < obs_per; ++k) {
      const int w = week(rng);
      const int wd = day(rng);
      for (int a = 0; a < n_alts; ++a) u[static_cast<std::size_t>(a)] = util(i, a);
      d.obs.push_back({i, w, 2 * w + wd, static_cast<std::int8_t>(wd), gumbel_choice(u, 0.0, rng)});
    }

  ControlTable table;
  table.n_households = n_households;
  table.n_items = n_alts;
  table.value = util;
  table.present.assign(static_cast<std::size_t>(n_households) * n_alts, 1);
  attach_hpf_controls(d, table);

  LogitSpec spec = lean_spec(BaselineKind::Mnl);
  spec.hpf_controls = true;
  spec.price = false;
  spec.weekday_dummy = false;
  MleFit fit = fit_mnl(d, spec);
  ASSERT_GE(fit.layout.ctl, 0);
  EXPECT_NEAR(fit.estimates[static_cast<std::size_t>(fit.layout.ctl)], 1.0, 0.1);
  for (int a = 0; a < n_alts; ++a)
    EXPECT_NEAR(fit.estimates[static_cast<std::size_t>(fit.layout.alpha + a)], 0.0, 0.1);
}

TEST(Controls, CoverageGapIsAHardError) {
  CategoryChoiceData d = blank_data(20, 3, 5);
  ControlTable table;
  table.n_households = 20;
  table.n_items = 3;
  table.value = Matrix(20, 3, 0.1);
  table.present.assign(60, 1);
  table.present[7 * 3 + 2] = 0;  // household 7, item 2
  try {
    attach_hpf_controls(d, table);
    FAIL() << "missing pair should throw";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("(7,2)"), std::string::npos);
  }
  EXPECT_FALSE(d.has_controls);
}

TEST(Predictions, InterceptOnlyFitMatchesTrainingShares) {
  PlainSim cfg;
  cfg.n_households = 500;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.7, 0.2, -0.1, -0.5};
  cfg.eta = 0.0;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec spec = lean_spec(BaselineKind::Mnl);
  spec.price = false;
  spec.weekday_dummy = false;
  spec.week_offset = false;
  spec.tolerance = 1e-8;
  MleFit fit = fit_mnl(d, spec);
  ASSERT_TRUE(fit.converged);

  Matrix probs = predict_probs(d, fit);
  const double n = static_cast<double>(d.obs.size());
  for (int a = 0; a <= d.n_inside(); ++a) {
    double share = 0.0, mean_p = 0.0;
    for (std::size_t k = 0; k < d.obs.size(); ++k) {
      share += d.obs[k].alt == a ? 1.0 : 0.0;
      mean_p += probs(static_cast<int>(k), a);
    }
    EXPECT_NEAR(mean_p / n, share / n, 1e-6);
  }
}

TEST(Predictions, RowsLieOnTheSimplexForEveryModelKind) {
  PlainSim cfg;
  cfg.n_households = 150;
  cfg.obs_per_household = 8;
  cfg.alpha = {0.4, 0.1, -0.2, 0.0};
  cfg.eta = -1.0;
  CategoryChoiceData d = simulate_plain(cfg);
  // Knock out some availability to exercise closed choice sets.
  Rng rng = make_rng(9, rng_stream::kGenerator, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& row : d.avail)
    for (auto& cell : row)
      if (u(rng) < 0.15) cell = 0;

  LogitSpec quick = lean_spec(BaselineKind::Mnl);
  quick.max_iter = 80;
  quick.tolerance = 1e-4;
  std::vector<MleFit> fits;
  fits.push_back(fit_mnl(d, quick));
  LogitSpec nested = lean_spec(BaselineKind::Nested);
  nested.max_iter = 80;
  nested.tolerance = 1e-4;
  fits.push_back(fit_nested_logit(d, nested));
  LogitSpec mixed = lean_spec(BaselineKind::Mixed);
  mixed.random_price = true;
  mixed.draws = 100;
  mixed.max_iter = 40;
  mixed.tolerance = 1e-3;
  fits.push_back(fit_mixed_logit(d, mixed));

  for (const MleFit& fit : fits) {
    Matrix probs = predict_probs(d, fit);
    for (int r = 0; r < probs.rows(); ++r) {
      double sum = 0.0;
      for (int c = 0; c < probs.cols(); ++c) {
        EXPECT_GE(probs(r, c), 0.0);
        sum += probs(r, c);
      }
      ASSERT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Predictions, DegenerateMixturePredictsExactlyLikePlainLogit) {
  PlainSim cfg;
  cfg.n_households = 300;
  cfg.obs_per_household = 8;
  cfg.n_alts = 3;
  cfg.alpha = {0.3, 0.0, -0.3};
  cfg.eta = -1.0;
  CategoryChoiceData d = simulate_plain(cfg);

  LogitSpec spec = lean_spec(BaselineKind::Mnl);
  spec.weekday_dummy = false;
  MleFit mnl = fit_mnl(d, spec);

  MleFit degen = mnl;  // same estimates, layout unchanged by the pinned scale
  degen.spec.kind = BaselineKind::Mixed;
  degen.spec.random_price = true;
  degen.spec.fixed_mix_scale = 0.0;
  degen.spec.draws = 100;

  EXPECT_LT(max_abs_diff(predict_probs(d, mnl), predict_probs(d, degen)), 1e-8);
}

TEST(Determinism, FitIsInvariantToObservationOrder) {
  PlainSim cfg;
  cfg.n_households = 200;
  cfg.obs_per_household = 10;
  cfg.alpha = {0.4, 0.1, -0.2, 0.0};
  cfg.eta = -1.5;
  cfg.wednesday = 0.2;
  CategoryChoiceData d = simulate_plain(cfg);

  CategoryChoiceData shuffled = d;
  Rng rng = make_rng(3, rng_stream::kGenerator, 4);
  std::shuffle(shuffled.obs.begin(), shuffled.obs.end(), rng);

  LogitSpec spec = lean_spec(BaselineKind::Mnl);
  MleFit a = fit_mnl(d, spec);
  MleFit b = fit_mnl(shuffled, spec);
  ASSERT_EQ(a.estimates.size(), b.estimates.size());
  for (std::size_t k = 0; k < a.estimates.size(); ++k)
    EXPECT_EQ(a.estimates[k], b.estimates[k]);
  EXPECT_EQ(a.log_lik, b.log_lik);
}

TEST(CategoryData, BuildsAlternativesPricesAndChoicesFromPanel) {
  SyntheticConfig cfg;
  cfg.n_households = 40;
  cfg.n_categories = 2;
  cfg.items_per_category = 4;
  cfg.n_weeks = 20;
  cfg.k_factors = 1;
  cfg.m_factors = 1;
  cfg.rho_c_intercept_mean = 0.0;  // busy panel: plenty of purchases
  cfg.seed = 31;
  SyntheticData data = generate_panel(cfg);
  CategoryCatalog catalog = catalog_keep_all(data.hierarchy, 2);  // 2 top + 2 pooled
  SampleSplit split;
  compute_week_rates(data.grid, data.panel, data.hierarchy, catalog, split);

  CategoryChoiceData d =
      build_category_choice_data(data.panel, data.hierarchy, catalog, data.grid, 0, split);
  fill_choice_observations(d, data.panel, data.hierarchy, catalog, data.grid, split,
                           SplitBucket::Train);
  ASSERT_FALSE(d.obs.empty());
  EXPECT_TRUE(d.has_pooled());
  EXPECT_EQ(d.n_inside(), 3);
  EXPECT_EQ(d.outside_alt(), 3);

  double wsum = 0.0;
  for (double wk : d.pooled_weight) wsum += wk;
  EXPECT_NEAR(wsum, 1.0, 1e-12);
  for (double wo : d.week_offset) EXPECT_TRUE(std::isfinite(wo));

  // Independent tally of chosen alternatives straight from the trips.
  std::vector<long long> want(5, 0);
  const int category = catalog.categories[0];
  for (const Trip& t : data.panel.trips) {
    if (data.grid.week_slot(t.week) < 0) continue;
    int alt = 3;
    for (const Purchase& p : t.purchases) {
      if (data.hierarchy.category_of[static_cast<std::size_t>(p.item)] != category) continue;
      const int rank = catalog.rank_of_item[static_cast<std::size_t>(p.item)];
      alt = rank < 2 ? rank : 2;
      break;
    }
    ++want[static_cast<std::size_t>(alt)];
  }
  std::vector<long long> got(5, 0);
  for (const ChoiceObs& o : d.obs) ++got[static_cast<std::size_t>(o.alt)];
  EXPECT_EQ(got, want);

  // Pooled price sits inside the pooled items' price range when available.
  for (const ChoiceObs& o : d.obs) {
    if (!d.avail[2][static_cast<std::size_t>(o.session)]) continue;
    double lo = 1e300, hi = -1e300;
    for (int j : d.pooled_items) {
      if (!data.grid.is_available(j, o.session)) continue;
      lo = std::min(lo, data.grid.price(j, o.session));
      hi = std::max(hi, data.grid.price(j, o.session));
    }
    const double pooled = std::exp(d.log_price(2, o.session));
    EXPECT_GE(pooled, lo - 1e-9);
    EXPECT_LE(pooled, hi + 1e-9);
  }

  // End-to-end fit on real panel-derived data.
  LogitSpec spec;
  spec.max_iter = 120;
  spec.tolerance = 1e-5;
  MleFit fit = fit_mnl(d, spec);
  EXPECT_EQ(fit.n_obs, static_cast<std::int64_t>(d.obs.size()));
  Matrix probs = predict_probs(d, fit);
  for (int r = 0; r < probs.rows(); ++r) {
    double sum = 0.0;
    for (int c = 0; c < probs.cols(); ++c) sum += probs(r, c);
    ASSERT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(CategoryData, ControlTableRoundTripsThroughFitAndBlendsPooledItems) {
  // Hand-built fit covering four items and two households.
  HpfFit hfit;
  hfit.n_users = 2;
  hfit.n_items = 4;
  hfit.k = 1;
  hfit.theta_shp.assign(2, 2.0);
  hfit.theta_rte.assign(2, 1.0);
  hfit.beta_shp.assign(4, 3.0);
  hfit.beta_rte.assign(4, 2.0);
  ControlTable table = control_table_from_fit(hfit);
  EXPECT_EQ(table.n_households, 2);
  EXPECT_EQ(table.n_items, 4);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(table.at(i, j), std::log(3.0), 1e-12);

  CategoryChoiceData d = blank_data(2, 3, 2);
  d.top_items = {0, 1};
  d.pooled_items = {2, 3};
  d.pooled_weight = {0.25, 0.75};
  attach_hpf_controls(d, table);
  ASSERT_TRUE(d.has_controls);
  const double c = std::log(3.0);
  EXPECT_NEAR(d.control(0, 0), c, 1e-12);
  EXPECT_NEAR(d.control(0, 2), 0.25 * c + 0.75 * c, 1e-12);
  EXPECT_NEAR(d.control(0, 3), 1.0 - 3.0 * c, 1e-12);
}
