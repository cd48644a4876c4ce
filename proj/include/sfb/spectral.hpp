#pragma once

// Sine eigenbasis e_k(xi) = sqrt(2) sin(k pi xi) of the Dirichlet Laplacian on
// [0,1], Sobolev norms, the heat semigroup, and the Burgers nonlinearity.

#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <span>
#include <vector>

namespace sfb {

// lambda_k = k^2 pi^2, k >= 1.
constexpr double eigenvalue(std::size_t k) {
  const double kk = static_cast<double>(k);
  return kk * kk * std::numbers::pi * std::numbers::pi;
}

// A field on [0,1] with homogeneous Dirichlet data, stored as coefficients
// on e_1..e_N. Index i holds the coefficient of e_{i+1}.
class SpectralField {
 public:
  SpectralField() = default;
  explicit SpectralField(std::size_t n_modes) : c_(n_modes, 0.0) {}
  explicit SpectralField(std::vector<double> coeffs) : c_(std::move(coeffs)) {}
  SpectralField(std::initializer_list<double> coeffs) : c_(coeffs) {}

  // e_k in an N-mode basis, k is 1-based.
  static SpectralField unit(std::size_t n_modes, std::size_t k, double amplitude = 1.0);

  std::size_t size() const noexcept { return c_.size(); }
  double& operator[](std::size_t i) { return c_[i]; }
  double operator[](std::size_t i) const { return c_[i]; }
  std::span<double> coeffs() noexcept { return c_; }
  std::span<const double> coeffs() const noexcept { return c_; }
  double* data() noexcept { return c_.data(); }
  const double* data() const noexcept { return c_.data(); }
  const std::vector<double>& vec() const noexcept { return c_; }

  bool all_finite() const noexcept;

  SpectralField& operator+=(const SpectralField& o);
  SpectralField& operator-=(const SpectralField& o);
  SpectralField& operator*=(double s);

  friend SpectralField operator+(SpectralField a, const SpectralField& b) { return a += b; }
  friend SpectralField operator-(SpectralField a, const SpectralField& b) { return a -= b; }
  friend SpectralField operator*(double s, SpectralField a) { return a *= s; }
  friend bool operator==(const SpectralField&, const SpectralField&) = default;

 private:
  std::vector<double> c_;
};

double inner(const SpectralField& x, const SpectralField& y);

// |x|, the L^2(0,1) norm.
double norm(const SpectralField& x);

// (sum_k lambda_k^sigma x_k^2)^{1/2} for sigma in [-2, 2]. Throws
// invalid_field on non-finite coefficients.
double sobolev_norm(const SpectralField& x, double sigma);

// ||x||^2 = sum_k lambda_k x_k^2 (the V norm squared).
double v_norm_sq(const SpectralField& x);

// Mode-wise multiplication by -lambda_k.
SpectralField apply_A(const SpectralField& x);

// Mode-wise multiplication by exp(-lambda_k t), t >= 0.
SpectralField apply_semigroup(const SpectralField& x, double t);

// Galerkin truncation at N modes with a (2N+1)-interval physical grid. The
// grid is xi_i = i / M for i = 1..M-1 with M = 2N+1; the endpoints carry no
// information since every basis function vanishes there. The trapezoid rule
// on this grid integrates cos(j pi xi) exactly for j < 2M, which covers every
// cubic product of truncated fields (frequency <= 3N).
class SpectralBasis {
 public:
  explicit SpectralBasis(std::size_t n_modes);

  std::size_t n_modes() const noexcept { return n_; }
  std::size_t grid_intervals() const noexcept { return m_; }
  std::size_t interior_points() const noexcept { return m_ - 1; }
  std::span<const double> eigenvalues() const noexcept { return lambda_; }

  // Values of x at the interior grid points.
  std::vector<double> to_grid(const SpectralField& x) const;
  // Values of d/dxi x at the interior grid points.
  std::vector<double> derivative_to_grid(const SpectralField& x) const;
  // Galerkin projection of grid data onto e_1..e_N (exact for products of up
  // to three truncated fields).
  SpectralField project(std::span<const double> grid_values) const;

  // P_N (x d/dxi x), evaluated as the projection of (1/2) d/dxi (x^2).
  SpectralField burgers(const SpectralField& x) const;
  void burgers(std::span<const double> x, std::span<double> out) const;

  // b(x, y, z) = int_0^1 x (d/dxi y) z dxi.
  double trilinear(const SpectralField& x, const SpectralField& y, const SpectralField& z) const;

  // Transposed Jacobian of x -> burgers(x) applied to w: -P_N(x d/dxi w).
  void burgers_jacobian_transpose(std::span<const double> x, std::span<const double> w,
                                  std::span<double> out) const;

 private:
  void check(const SpectralField& x) const;

  std::size_t n_;
  std::size_t m_;
  std::vector<double> lambda_;
  std::vector<double> synth_;      // (M-1) x N: sqrt(2) sin(k pi xi_i)
  std::vector<double> dsynth_;     // (M-1) x N: sqrt(2) k pi cos(k pi xi_i)
  std::vector<double> analysis_;   // N x (M-1): sqrt(2) sin(k pi xi_i) / M
  std::vector<double> burgers_;    // N x (M-1): -(k pi / 2) sqrt(2) cos(k pi xi_i) / M
};

}  // namespace sfb
