#pragma once

// The shared math core: latent-parameter layout plus pure maps from
// (parameters, session state) to utilities, choice probabilities, and
// inclusive values. Inference, baselines, and evaluation all route through
// these functions.
//
// Utility structure. Item stage, conditional on buying in category c:
//   u_ijt = theta_i . beta_j + W_i . rho_j + sigma_i . X_j
//           - (gamma_i . lambda_j) * log(price_jt)
//   P(j | buy in c) = a_jt exp(u_ijt) / sum_k a_kt exp(u_ikt)
// Category stage (binary purchase):
//   IV_ict = log sum_{available j} exp(u_ijt)
//   u_ict = theta_i . beta_c + W_i . rho_c + sigma_i . X_c
//           + (gamma_i . lambda_c) * IV_ict + mu_c . delta_t + w_{c,weekday}
//   P(buy in c) = exp(u_ict) / (1 + exp(u_ict))
// The EV1 shocks never appear explicitly; they are exactly the logit links.
// The IV coefficient enters with a positive sign (nested-logit consistency),
// the price coefficient with a negative sign (price deterrence).

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "nestfact/common.hpp"
#include "nestfact/math.hpp"

namespace nestfact {

struct Dims {
  int N = 0;  // households
  int J = 0;  // items
  int C = 0;  // categories
  int T = 0;  // week slots
  int K = 0;  // latent intercept factors
  int M = 0;  // latent sensitivity factors
  int P = 0;  // household covariate width (incl. intercept column)
  int Q = 0;  // item covariate width
  int R = 0;  // week-trend factors
};

enum class Block : int {
  Theta = 0,   // N x K   user intercept factors
  Beta,        // J x K   item intercept factors
  Gamma,       // N x M   user sensitivity factors
  Lambda,      // J x M   item price loadings
  Rho,         // J x P   item coefficients on household covariates
  Sigma,       // N x Q   user coefficients on item covariates
  BetaC,       // C x K   category intercept factors
  LambdaC,     // C x M   category IV loadings
  RhoC,        // C x P   category coefficients on household covariates
  MuC,         // C x R   category week-trend loadings
  Delta,       // T x R   week factors
  Wday,        // C x 2   Tue/Wed effects
};

inline constexpr int kNumBlocks = 12;

struct ParamLayout {
  Dims dims;
  std::array<std::size_t, kNumBlocks> offset{};
  std::array<int, kNumBlocks> n_rows{};
  std::array<int, kNumBlocks> n_cols{};
  std::size_t total = 0;

  static ParamLayout make(const Dims& d) {
    ParamLayout l;
    l.dims = d;
    const std::array<std::pair<int, int>, kNumBlocks> shapes = {{{d.N, d.K},
                                                                 {d.J, d.K},
                                                                 {d.N, d.M},
                                                                 {d.J, d.M},
                                                                 {d.J, d.P},
                                                                 {d.N, d.Q},
                                                                 {d.C, d.K},
                                                                 {d.C, d.M},
                                                                 {d.C, d.P},
                                                                 {d.C, d.R},
                                                                 {d.T, d.R},
                                                                 {d.C, 2}}};
    std::size_t off = 0;
    for (int b = 0; b < kNumBlocks; ++b) {
      l.n_rows[b] = shapes[b].first;
      l.n_cols[b] = shapes[b].second;
      l.offset[b] = off;
      off += static_cast<std::size_t>(shapes[b].first) * static_cast<std::size_t>(shapes[b].second);
    }
    l.total = off;
    return l;
  }

  std::size_t at(Block b, int row, int col = 0) const {
    const int i = static_cast<int>(b);
    return offset[i] + static_cast<std::size_t>(row) * n_cols[i] + col;
  }
  std::size_t block_size(Block b) const {
    const int i = static_cast<int>(b);
    return static_cast<std::size_t>(n_rows[i]) * n_cols[i];
  }
};

// Read-only view of a flat parameter vector under a layout.
struct LatentParams {
  const ParamLayout* layout = nullptr;
  std::span<const double> x;

  std::span<const double> row(Block b, int r) const {
    const int i = static_cast<int>(b);
    return x.subspan(layout->at(b, r), static_cast<std::size_t>(layout->n_cols[i]));
  }
  std::span<const double> theta(int i) const { return row(Block::Theta, i); }
  std::span<const double> beta(int j) const { return row(Block::Beta, j); }
  std::span<const double> gamma(int i) const { return row(Block::Gamma, i); }
  std::span<const double> lambda(int j) const { return row(Block::Lambda, j); }
  std::span<const double> rho(int j) const { return row(Block::Rho, j); }
  std::span<const double> sigma(int i) const { return row(Block::Sigma, i); }
  std::span<const double> beta_c(int c) const { return row(Block::BetaC, c); }
  std::span<const double> lambda_c(int c) const { return row(Block::LambdaC, c); }
  std::span<const double> rho_c(int c) const { return row(Block::RhoC, c); }
  std::span<const double> mu_c(int c) const { return row(Block::MuC, c); }
  std::span<const double> delta(int t) const { return row(Block::Delta, t); }
  double wday(int c, int weekday_slot) const { return x[layout->at(Block::Wday, c, weekday_slot)]; }

  bool all_finite() const {
    for (double v : x)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Owning parameter vector with a stable layout.
struct ParamVector {
  ParamLayout layout;
  std::vector<double> values;

  explicit ParamVector(const Dims& d) : layout(ParamLayout::make(d)), values(layout.total, 0.0) {}
  LatentParams view() const { return {&layout, values}; }
  double& at(Block b, int row, int col = 0) { return values[layout.at(b, row, col)]; }
  double at(Block b, int row, int col = 0) const { return values[layout.at(b, row, col)]; }
};

// Item-stage utility. `price` must be positive for the log-price term; a
// non-positive price on an available item is a data error upstream.
inline double upc_utility(const LatentParams& p, int household, int item, double price,
                          std::span<const double> w_i, std::span<const double> x_j) {
  const Dims& d = p.layout->dims;
  if (static_cast<int>(w_i.size()) != d.P || static_cast<int>(x_j.size()) != d.Q)
    throw ConfigError("covariate width mismatch in upc_utility");
  if (!(price > 0.0)) throw NumericError("missing or non-positive price in upc_utility");
  double u = dot(p.theta(household), p.beta(item));
  u += dot(w_i, p.rho(item));
  u += dot(p.sigma(household), x_j);
  u -= dot(p.gamma(household), p.lambda(item)) * std::log(price);
  return u;
}

// p_j = a_j exp(u_j) / sum_k a_k exp(u_k); throws on an empty choice set.
inline void conditional_choice_probs(std::span<const double> utilities,
                                     std::span<const std::uint8_t> available,
                                     std::span<double> out) {
  masked_softmax(utilities, available, out);
}

// IV = log sum over available items of exp(u); -inf sentinel when none.
inline double inclusive_value(std::span<const double> utilities,
                              std::span<const std::uint8_t> available) {
  return log_sum_exp(utilities, available);
}

// Category-stage utility; a sentinel IV propagates to -inf (forced no-buy).
inline double category_utility(const LatentParams& p, int household, int category, double iv,
                               int week_slot, int weekday_slot, std::span<const double> w_i,
                               std::span<const double> x_c) {
  const Dims& d = p.layout->dims;
  if (static_cast<int>(w_i.size()) != d.P || static_cast<int>(x_c.size()) != d.Q)
    throw ConfigError("covariate width mismatch in category_utility");
  if (week_slot < 0 || week_slot >= d.T || weekday_slot < 0 || weekday_slot > 1)
    throw ConfigError("session index out of range in category_utility");
  if (iv == kNegInf) return kNegInf;
  double u = dot(p.theta(household), p.beta_c(category));
  u += dot(w_i, p.rho_c(category));
  u += dot(p.sigma(household), x_c);
  u += dot(p.gamma(household), p.lambda_c(category)) * iv;
  u += dot(p.mu_c(category), p.delta(week_slot));
  u += p.wday(category, weekday_slot);
  return u;
}

inline double category_purchase_prob(double utility) { return sigmoid(utility); }

// Joint probabilities: out[0..n-1] = P(cat) * conditional, out[n] = outside.
inline void unconditional_item_probs(double category_prob, std::span<const double> conditional,
                                     std::span<double> out) {
  for (std::size_t j = 0; j < conditional.size(); ++j) out[j] = category_prob * conditional[j];
  out[conditional.size()] = 1.0 - category_prob;
}

}  // namespace nestfact
