#include "sfb/control.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sfb/errors.hpp"

namespace sfb {

Control::Control(double horizon, std::size_t n_knots, std::size_t n_modes,
                 std::optional<double> energy_bound)
    : Control(horizon, n_knots, n_modes, std::vector<double>(n_knots * n_modes, 0.0),
              energy_bound) {}

Control::Control(double horizon, std::size_t n_knots, std::size_t n_modes,
                 std::vector<double> values, std::optional<double> energy_bound)
    : horizon_(horizon), n_knots_(n_knots), n_modes_(n_modes), values_(std::move(values)),
      bound_(energy_bound) {
  require(horizon >= 0.0, "control horizon must be nonnegative");
  require(n_knots >= 1 && n_modes >= 1, "control needs at least one knot and one mode");
  require(values_.size() == n_knots * n_modes, "control values do not match knots x modes");
  validate();
}

Control Control::constant(double horizon, std::size_t n_knots, const SpectralField& u) {
  Control c(horizon, n_knots, u.size());
  for (std::size_t j = 0; j < n_knots; ++j)
    std::copy(u.coeffs().begin(), u.coeffs().end(), c.knot(j).begin());
  return c;
}

std::span<const double> Control::knot(std::size_t j) const {
  return std::span<const double>(values_).subspan(j * n_modes_, n_modes_);
}

std::span<double> Control::knot(std::size_t j) {
  return std::span<double>(values_).subspan(j * n_modes_, n_modes_);
}

std::size_t Control::knot_at(double t) const {
  if (horizon_ <= 0.0) return 0;
  const double pos = t / knot_length();
  if (pos <= 0.0) return 0;
  return std::min(static_cast<std::size_t>(pos), n_knots_ - 1);
}

void Control::evaluate(double t, std::span<double> out) const {
  require(out.size() >= n_modes_, "control has more modes than the target field");
  auto k = knot(knot_at(t));
  std::copy(k.begin(), k.end(), out.begin());
  std::fill(out.begin() + static_cast<std::ptrdiff_t>(n_modes_), out.end(), 0.0);
}

double Control::energy() const {
  double s = 0.0;
  for (double v : values_) s += v * v;
  return s * knot_length();
}

void Control::validate() const {
  if (bound_ && energy() > *bound_ * (1.0 + 1e-12))
    fail(ErrorCategory::precondition,
         "control energy " + std::to_string(energy()) + " exceeds bound " + std::to_string(*bound_));
}

bool Control::is_zero() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0; });
}

}  // namespace sfb
