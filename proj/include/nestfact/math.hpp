#pragma once

// Numeric primitives: stabilized logistic/softmax operations, the Skellam
// log-pmf via a log-domain Bessel series, Halton sequences with a normal
// inverse transform, digamma, and small summary-statistic helpers.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "nestfact/common.hpp"

namespace nestfact {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log1pexp(double x) {
  if (x > 700.0) return x;
  if (x > 37.0) return x + std::exp(-x);
  if (x > -37.0) return std::log1p(std::exp(x));
  return std::exp(x);
}

// exp(u) / (1 + exp(u)), stable over the full double range.
inline double sigmoid(double u) {
  if (u == kNegInf) return 0.0;
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  double e = std::exp(u);
  return e / (1.0 + e);
}

// log(exp(u) / (1 + exp(u)))
inline double log_sigmoid(double u) {
  if (u == kNegInf) return kNegInf;
  return -log1pexp(-u);
}

// log(1 - sigmoid(u)) = -log(1 + exp(u))
inline double log_one_minus_sigmoid(double u) {
  if (u == kNegInf) return 0.0;
  return -log1pexp(u);
}

// log sum_{i: mask} exp(x_i); -inf when the masked set is empty.
inline double log_sum_exp(std::span<const double> x, std::span<const std::uint8_t> mask = {}) {
  double m = kNegInf;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    m = std::max(m, x[i]);
  }
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    s += std::exp(x[i] - m);
  }
  return m + std::log(s);
}

// Softmax over the masked entries; masked-out entries get exactly 0.
// Throws NumericError when no entry is unmasked (empty choice set).
inline void masked_softmax(std::span<const double> x, std::span<const std::uint8_t> mask,
                           std::span<double> out) {
  double lse = log_sum_exp(x, mask);
  if (lse == kNegInf) throw NumericError("empty choice set");
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (mask.empty() || mask[i]) ? std::exp(x[i] - lse) : 0.0;
  }
}

// log I_v(x) for integer order v >= 0, by log-domain power series. Accurate
// for the Skellam range used here (x up to ~2e4, i.e. lambda up to 1e4).
inline double log_bessel_i(int v, double x) {
  if (x == 0.0) return v == 0 ? 0.0 : kNegInf;
  const double lh = std::log(x / 2.0);
  // term(m) = (x/2)^(2m+v) / (m! * (m+v)!)
  double max_log = kNegInf;
  double acc = 0.0;
  const int peak = static_cast<int>(std::ceil((std::sqrt((v + 1.0) * (v + 1.0) + x * x) - (v + 1.0)) / 2.0));
  const int m_max = std::max(peak * 2 + 64, 128);
  for (int m = 0; m <= m_max; ++m) {
    double lt = (2.0 * m + v) * lh - std::lgamma(m + 1.0) - std::lgamma(m + v + 1.0);
    if (lt > max_log) {
      acc = acc * std::exp(max_log - lt) + 1.0;
      max_log = lt;
    } else {
      acc += std::exp(lt - max_log);
      if (m > peak && lt < max_log - 45.0) break;
    }
  }
  return max_log + std::log(acc);
}

// log P(N1 - N2 = k) where N1 ~ Poisson(lambda1), N2 ~ Poisson(lambda2).
inline double skellam_log_pmf(long long k, double lambda1, double lambda2) {
  if (!(lambda1 > 0.0) || !(lambda2 > 0.0) || !std::isfinite(lambda1) || !std::isfinite(lambda2))
    throw NumericError("skellam requires positive finite rates");
  const double half_log_ratio = 0.5 * (std::log(lambda1) - std::log(lambda2));
  const int a = static_cast<int>(k < 0 ? -k : k);
  return -(lambda1 + lambda2) + static_cast<double>(k) * half_log_ratio +
         log_bessel_i(a, 2.0 * std::sqrt(lambda1 * lambda2));
}

// Wichura's AS241 rational approximation of the standard normal quantile.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw NumericError("normal_quantile: p outside (0,1)");
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r +
                 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r +
              133.14166789178437745) * r + 3.387132872796366608) /
           (((((((5226.495278852545703 * r + 28729.085735721942674) * r + 39307.89580009271061) * r +
                 21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r +
              42.313330701600911252) * r + 1.0);
  }
  double r = q < 0.0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double val;
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
               1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r +
            4.6303378461565452959) * r + 1.42343711074968357734) /
          (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
               0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r +
            2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
               0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r +
            5.4637849111641143699) * r + 6.6579046435011037772) /
          (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
               7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r +
            0.59983220655588793769) * r + 1.0);
  }
  return q < 0.0 ? -val : val;
}

// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided p-value for z = estimate / se under a normal approximation.
inline double two_sided_p_value(double estimate, double se) {
  if (!(se > 0.0)) return 1.0;
  const double z = std::abs(estimate / se);
  return std::min(1.0, 2.0 * normal_cdf(-z));
}

// Digamma via recurrence + asymptotic series.
inline double digamma(double x) {
  if (!(x > 0.0)) throw NumericError("digamma requires x > 0");
  double result = 0.0;
  while (x < 12.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 -
                    inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
  return result;
}

// Halton low-discrepancy point: radical inverse of `index` in base `base`.
inline double halton(std::uint64_t index, unsigned base) {
  double f = 1.0;
  double r = 0.0;
  while (index > 0) {
    f /= base;
    r += f * (index % base);
    index /= base;
  }
  return r;
}

inline constexpr unsigned kHaltonBases[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                            23, 29, 31, 37, 41, 43, 47, 53};

inline double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

inline double variance(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

inline double stddev(std::span<const double> x) { return std::sqrt(variance(x)); }

inline double median(std::vector<double> x) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  return n % 2 == 1 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

inline double pearson_correlation(std::span<const double> a, std::span<const double> b) {
  const double ma = mean(a), mb = mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Herfindahl concentration index of a nonnegative weight vector.
inline double herfindahl(std::span<const double> w) {
  double total = 0.0;
  for (double v : w) total += v;
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (double v : w) {
    const double s = v / total;
    h += s * s;
  }
  return h;
}

}  // namespace nestfact
