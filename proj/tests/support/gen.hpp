#pragma once

// Hand-rolled generators for property tests. Every generator is driven by an
// explicit mt19937_64 so failures replay from the printed case index.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sfb/spectral.hpp"

namespace sfb::testgen {

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// Coefficients decay like 1/k with random signs, then the field is rescaled
// to a V-norm drawn uniformly from (0, max_v_norm].
inline SpectralField field(std::mt19937_64& g, std::size_t n, double max_v_norm = 10.0) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SpectralField x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = normal(g) / static_cast<double>(i + 1);
  const double v = std::sqrt(v_norm_sq(x));
  if (v > 0.0) x *= max_v_norm * (1.0 - unit(g)) / v;
  return x;
}

// A field supported on a random subset of modes, to exercise sparse inputs.
inline SpectralField sparse_field(std::mt19937_64& g, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> normal;
  std::bernoulli_distribution keep(0.3);
  SpectralField x(n);
  for (std::size_t i = 0; i < n; ++i)
    if (keep(g)) x[i] = scale * normal(g);
  return x;
}

inline std::vector<double> doubles(std::mt19937_64& g, std::size_t n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(n);
  for (double& a : v) a = u(g);
  return v;
}

// Composite Simpson rule on [0, 1] with an even number of intervals.
template <class F>
double simpson(F&& f, std::size_t intervals = 20000) {
  const double h = 1.0 / static_cast<double>(intervals);
  double s = f(0.0) + f(1.0);
  for (std::size_t i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(h * static_cast<double>(i));
  return s * h / 3.0;
}

// Point evaluation of a sine series and its derivative, straight from the
// definition e_k = sqrt(2) sin(k pi xi).
inline double eval(const SpectralField& x, double xi) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    s += x[i] * std::sqrt(2.0) * std::sin(static_cast<double>(i + 1) * M_PI * xi);
  return s;
}

inline double eval_d(const SpectralField& x, double xi) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double k = static_cast<double>(i + 1);
    s += x[i] * std::sqrt(2.0) * k * M_PI * std::cos(k * M_PI * xi);
  }
  return s;
}

}  // namespace sfb::testgen
