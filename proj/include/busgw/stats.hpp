#pragma once

// Summary statistics for benchmark results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

namespace busgw::stats {

class StatsError : public std::invalid_argument {
 public:
  enum class Kind { LengthMismatch, InsufficientSamples, UndefinedCorrelation };
  StatsError(Kind kind, const std::string& what) : std::invalid_argument(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw StatsError(StatsError::Kind::InsufficientSamples, "mean of empty sample");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

// Unbiased (n - 1) sample variance.
inline double sample_variance(std::span<const double> xs) {
  if (xs.size() < 2) throw StatsError(StatsError::Kind::InsufficientSamples, "variance needs at least 2 samples");
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return ss / static_cast<double>(xs.size() - 1);
}

// Pearson product-moment correlation. Deviations are taken from the means
// first (two-pass) so large offsets do not cancel catastrophically.
inline double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw StatsError(StatsError::Kind::LengthMismatch, "pearson: lists differ in length");
  if (xs.size() < 2) throw StatsError(StatsError::Kind::InsufficientSamples, "pearson needs at least 2 pairs");
  const double mx = mean(xs);
  const double my = mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw StatsError(StatsError::Kind::UndefinedCorrelation, "pearson undefined for a constant list");
  }
  const double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  return std::clamp(r, -1.0, 1.0);
}

// Two-sided Student t critical value t(1 - alpha/2, df).
inline double t_critical(double df, double confidence = 0.95) {
  boost::math::students_t dist(df);
  return boost::math::quantile(boost::math::complement(dist, (1.0 - confidence) / 2.0));
}

struct Interval {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;

  double half_width() const noexcept { return high - mean; }
  bool overlaps(const Interval& o) const noexcept { return low <= o.high && o.low <= high; }
  bool contains(double x) const noexcept { return low <= x && x <= high; }
  bool operator==(const Interval&) const = default;
};

inline Interval mean_ci95(std::span<const double> xs) {
  if (xs.size() < 2) throw StatsError(StatsError::Kind::InsufficientSamples, "mean_ci95 needs at least 2 samples");
  const double m = mean(xs);
  const double n = static_cast<double>(xs.size());
  const double half = t_critical(n - 1.0) * std::sqrt(sample_variance(xs)) / std::sqrt(n);
  return {m, m - half, m + half};
}

// Welch interval for mean(a) - mean(b).
inline Interval welch_diff_ci95(std::span<const double> a, std::span<const double> b) {
  const double va = sample_variance(a) / static_cast<double>(a.size());
  const double vb = sample_variance(b) / static_cast<double>(b.size());
  const double diff = mean(a) - mean(b);
  const double se2 = va + vb;
  if (se2 == 0.0) return {diff, diff, diff};
  const double df = se2 * se2 / (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  const double half = t_critical(df) * std::sqrt(se2);
  return {diff, diff - half, diff + half};
}

// Linear-interpolated quantile, q in [0, 1]; `xs` need not be sorted.
inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw StatsError(StatsError::Kind::InsufficientSamples, "quantile of empty sample");
  std::sort(xs.begin(), xs.end());
  const double pos = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (xs[hi] - xs[lo]) * (pos - static_cast<double>(lo));
}

struct Summary {
  std::size_t count = 0;
  double mean = 0.0;
  double median = 0.0;
  double p95 = 0.0;
  double p99 = 0.0;
  double max = 0.0;
};

inline Summary summarize(std::vector<double> xs) {
  Summary s;
  if (xs.empty()) return s;
  std::sort(xs.begin(), xs.end());
  s.count = xs.size();
  s.mean = mean(xs);
  s.median = quantile(xs, 0.5);
  s.p95 = quantile(xs, 0.95);
  s.p99 = quantile(xs, 0.99);
  s.max = xs.back();
  return s;
}

}  // namespace busgw::stats
