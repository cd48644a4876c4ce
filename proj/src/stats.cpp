#include "sfb/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sfb/errors.hpp"

namespace sfb {

MeanEstimate mean_estimate(std::span<const double> v) {
  MeanEstimate e;
  e.n = v.size();
  if (v.empty()) return e;
  double s = 0.0;
  for (double a : v) s += a;
  e.mean = s / static_cast<double>(v.size());
  if (v.size() < 2) {
    e.stderr_ = std::numeric_limits<double>::infinity();
    return e;
  }
  double ss = 0.0;
  for (double a : v) ss += (a - e.mean) * (a - e.mean);
  e.stderr_ = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  return e;
}

MeanEstimate batch_means(std::span<const double> v, std::size_t n_batches) {
  require(n_batches >= 2, "batch means need at least two batches");
  require(v.size() >= n_batches, "fewer samples than batches");
  const std::size_t len = v.size() / n_batches;
  std::vector<double> means(n_batches);
  for (std::size_t b = 0; b < n_batches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += v[i];
    means[b] = s / static_cast<double>(len);
  }
  MeanEstimate e = mean_estimate(means);
  e.n = len * n_batches;
  return e;
}

double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + lo);
  }
  return m;
}

MeanEstimate median_estimate(std::vector<double> v) {
  require(!v.empty(), "median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double m = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  const double half = 1.96 * std::sqrt(static_cast<double>(n)) / 2.0;
  const double c = static_cast<double>(n) / 2.0;
  const auto lo = static_cast<std::size_t>(std::max(0.0, std::floor(c - half)));
  const auto hi = std::min(n - 1, static_cast<std::size_t>(std::ceil(c + half)));
  return {m, (v[hi] - v[lo]) / (2.0 * 1.96), n};
}

double t_quantile_975(double nu) {
  require(nu >= 1.0, "t quantile needs at least one degree of freedom");
  static constexpr double table[] = {
      12.706204736, 4.302652730, 3.182446305, 2.776445105, 2.570581836, 2.446911851,
      2.364624252,  2.306004135, 2.262157163, 2.228138852, 2.200985160, 2.178812830,
      2.160368656,  2.144786688, 2.131449546, 2.119905299, 2.109815578, 2.100922040,
      2.093024054,  2.085963447, 2.079613845, 2.073873068, 2.068657610, 2.063898562,
      2.059538553,  2.055529439, 2.051830516, 2.048407142, 2.045229642, 2.042272456};
  if (nu <= 30.0 && nu == std::floor(nu)) return table[static_cast<std::size_t>(nu) - 1];
  // Hill's expansion around the normal quantile; below 1e-6 relative for nu > 30.
  const double z = 1.959963984540054;
  const double z3 = z * z * z, z5 = z3 * z * z, z7 = z5 * z * z, z9 = z7 * z * z;
  return z + (z3 + z) / (4 * nu) + (5 * z5 + 16 * z3 + 3 * z) / (96 * nu * nu) +
         (3 * z7 + 19 * z5 + 17 * z3 - 15 * z) / (384 * nu * nu * nu) +
         (79 * z9 + 776 * z7 + 1482 * z5 - 1920 * z3 - 945 * z) / (92160 * nu * nu * nu * nu);
}

LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "linear fit needs at least two points");
  LinearFit f;
  f.n = x.size();
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0, "linear fit needs distinct abscissae");
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double rss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - f.intercept - f.slope * x[i];
    rss += r * r;
  }
  f.r2 = syy > 0.0 ? 1.0 - rss / syy : 1.0;
  if (x.size() > 2) {
    f.slope_stderr = std::sqrt(rss / (n - 2.0) / sxx);
    const double t = t_quantile_975(n - 2.0);
    f.ci_low = f.slope - t * f.slope_stderr;
    f.ci_high = f.slope + t * f.slope_stderr;
  } else {
    f.slope_stderr = std::numeric_limits<double>::infinity();
    f.ci_low = -f.slope_stderr;
    f.ci_high = f.slope_stderr;
  }
  return f;
}

}  // namespace sfb
