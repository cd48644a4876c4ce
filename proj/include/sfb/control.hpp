#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "sfb/spectral.hpp"

namespace sfb {

// Piecewise-constant control u(t) on [0, T]: n_knots equal time cells times
// the first n_modes sine modes. Knot j covers [j h, (j+1) h) with h = T / n_knots.
class Control {
 public:
  Control() = default;
  Control(double horizon, std::size_t n_knots, std::size_t n_modes,
          std::optional<double> energy_bound = std::nullopt);
  Control(double horizon, std::size_t n_knots, std::size_t n_modes, std::vector<double> values,
          std::optional<double> energy_bound = std::nullopt);

  // u(t) = u for all t.
  static Control constant(double horizon, std::size_t n_knots, const SpectralField& u);

  double horizon() const noexcept { return horizon_; }
  std::size_t n_knots() const noexcept { return n_knots_; }
  std::size_t n_modes() const noexcept { return n_modes_; }
  double knot_length() const noexcept { return horizon_ / static_cast<double>(n_knots_); }
  const std::optional<double>& energy_bound() const noexcept { return bound_; }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<const double> knot(std::size_t j) const;
  std::span<double> knot(std::size_t j);
  std::size_t knot_at(double t) const;

  // Writes u(t) into the first n_modes entries of out and zeros the rest.
  void evaluate(double t, std::span<double> out) const;

  // int_0^T |u(s)|^2 ds under the knot quadrature.
  double energy() const;

  // Throws precondition when the energy exceeds the declared bound.
  void validate() const;

  bool is_zero() const noexcept;

  friend bool operator==(const Control&, const Control&) = default;

 private:
  double horizon_ = 0.0;
  std::size_t n_knots_ = 0;
  std::size_t n_modes_ = 0;
  std::vector<double> values_;
  std::optional<double> bound_;
};

}  // namespace sfb
