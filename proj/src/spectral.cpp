#include "sfb/spectral.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "sfb/errors.hpp"
#include "sfb/simd/kernels.hpp"

namespace sfb {

using std::numbers::pi;

SpectralField SpectralField::unit(std::size_t n_modes, std::size_t k, double amplitude) {
  require(k >= 1 && k <= n_modes, "unit field index out of range");
  SpectralField e(n_modes);
  e[k - 1] = amplitude;
  return e;
}

bool SpectralField::all_finite() const noexcept {
  for (double v : c_)
    if (!std::isfinite(v)) return false;
  return true;
}

SpectralField& SpectralField::operator+=(const SpectralField& o) {
  require(o.size() == size(), "field size mismatch");
  simd::active().axpy(1.0, o.data(), data(), size());
  return *this;
}

SpectralField& SpectralField::operator-=(const SpectralField& o) {
  require(o.size() == size(), "field size mismatch");
  simd::active().axpy(-1.0, o.data(), data(), size());
  return *this;
}

SpectralField& SpectralField::operator*=(double s) {
  for (double& v : c_) v *= s;
  return *this;
}

double inner(const SpectralField& x, const SpectralField& y) {
  require(x.size() == y.size(), "field size mismatch");
  return simd::active().dot(x.data(), y.data(), x.size());
}

double norm(const SpectralField& x) { return std::sqrt(inner(x, x)); }

double sobolev_norm(const SpectralField& x, double sigma) {
  require(sigma >= -2.0 && sigma <= 2.0, "sobolev index outside [-2, 2]");
  if (!x.all_finite()) fail(ErrorCategory::invalid_field, "non-finite field coefficient");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::pow(eigenvalue(i + 1), sigma) * x[i] * x[i];
  return std::sqrt(s);
}

double v_norm_sq(const SpectralField& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += eigenvalue(i + 1) * x[i] * x[i];
  return s;
}

SpectralField apply_A(const SpectralField& x) {
  SpectralField out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = -eigenvalue(i + 1) * x[i];
  return out;
}

SpectralField apply_semigroup(const SpectralField& x, double t) {
  require(t >= 0.0, "semigroup time must be nonnegative");
  SpectralField out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(-eigenvalue(i + 1) * t) * x[i];
  return out;
}

SpectralBasis::SpectralBasis(std::size_t n_modes) : n_(n_modes), m_(2 * n_modes + 1) {
  require(n_modes >= 1, "basis needs at least one mode");
  const std::size_t p = m_ - 1;
  const double md = static_cast<double>(m_);
  lambda_.resize(n_);
  synth_.resize(p * n_);
  dsynth_.resize(p * n_);
  analysis_.resize(n_ * p);
  burgers_.resize(n_ * p);
  for (std::size_t k = 1; k <= n_; ++k) lambda_[k - 1] = eigenvalue(k);
  for (std::size_t i = 1; i <= p; ++i) {
    for (std::size_t k = 1; k <= n_; ++k) {
      // Reduce k*i mod 2M before scaling so large products keep full accuracy.
      const double arg = pi * static_cast<double>((k * i) % (2 * m_)) / md;
      const double s = std::numbers::sqrt2 * std::sin(arg);
      const double c = std::numbers::sqrt2 * std::cos(arg);
      const double kpi = static_cast<double>(k) * pi;
      synth_[(i - 1) * n_ + (k - 1)] = s;
      dsynth_[(i - 1) * n_ + (k - 1)] = kpi * c;
      analysis_[(k - 1) * p + (i - 1)] = s / md;
      burgers_[(k - 1) * p + (i - 1)] = -0.5 * kpi * c / md;
    }
  }
}

void SpectralBasis::check(const SpectralField& x) const {
  if (x.size() != n_)
    fail(ErrorCategory::precondition, "field has " + std::to_string(x.size()) +
                                          " modes, basis has " + std::to_string(n_));
}

std::vector<double> SpectralBasis::to_grid(const SpectralField& x) const {
  check(x);
  std::vector<double> g(m_ - 1);
  simd::active().gemv(synth_.data(), x.data(), g.data(), m_ - 1, n_);
  return g;
}

std::vector<double> SpectralBasis::derivative_to_grid(const SpectralField& x) const {
  check(x);
  std::vector<double> g(m_ - 1);
  simd::active().gemv(dsynth_.data(), x.data(), g.data(), m_ - 1, n_);
  return g;
}

SpectralField SpectralBasis::project(std::span<const double> grid_values) const {
  require(grid_values.size() == m_ - 1, "grid data size mismatch");
  SpectralField out(n_);
  simd::active().gemv(analysis_.data(), grid_values.data(), out.data(), n_, m_ - 1);
  return out;
}

namespace {
thread_local std::vector<double> scratch_a;
thread_local std::vector<double> scratch_b;
}  // namespace

void SpectralBasis::burgers(std::span<const double> x, std::span<double> out) const {
  require(x.size() == n_ && out.size() == n_, "burgers: size mismatch");
  const auto& k = simd::active();
  const std::size_t p = m_ - 1;
  scratch_a.resize(p);
  k.gemv(synth_.data(), x.data(), scratch_a.data(), p, n_);
  k.mul(scratch_a.data(), scratch_a.data(), scratch_a.data(), p);
  k.gemv(burgers_.data(), scratch_a.data(), out.data(), n_, p);
}

SpectralField SpectralBasis::burgers(const SpectralField& x) const {
  check(x);
  SpectralField out(n_);
  burgers(x.coeffs(), out.coeffs());
  return out;
}

double SpectralBasis::trilinear(const SpectralField& x, const SpectralField& y,
                                const SpectralField& z) const {
  check(x);
  check(y);
  check(z);
  const auto& k = simd::active();
  const std::size_t p = m_ - 1;
  std::vector<double> gx(p), gy(p), gz(p);
  k.gemv(synth_.data(), x.data(), gx.data(), p, n_);
  k.gemv(dsynth_.data(), y.data(), gy.data(), p, n_);
  k.gemv(synth_.data(), z.data(), gz.data(), p, n_);
  k.mul(gx.data(), gy.data(), gx.data(), p);
  return k.dot(gx.data(), gz.data(), p) / static_cast<double>(m_);
}

void SpectralBasis::burgers_jacobian_transpose(std::span<const double> x,
                                               std::span<const double> w,
                                               std::span<double> out) const {
  require(x.size() == n_ && w.size() == n_ && out.size() == n_, "jacobian: size mismatch");
  const auto& k = simd::active();
  const std::size_t p = m_ - 1;
  scratch_a.resize(p);
  scratch_b.resize(p);
  k.gemv(synth_.data(), x.data(), scratch_a.data(), p, n_);
  k.gemv(dsynth_.data(), w.data(), scratch_b.data(), p, n_);
  k.mul(scratch_a.data(), scratch_b.data(), scratch_a.data(), p);
  k.gemv(analysis_.data(), scratch_a.data(), out.data(), n_, p);
  for (double& v : out) v = -v;
}

}  // namespace sfb
