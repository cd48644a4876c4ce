#include "sfb/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sfb/errors.hpp"
#include "sfb/simd/kernels.hpp"

namespace sfb {

SkeletonPath solve_skeleton(const SpectralField& x, const Control& u, const AveragedDrift& fbar,
                            double horizon, std::size_t n_steps) {
  const Model& model = fbar.model();
  const std::size_t n = model.n_modes();
  require(x.size() == n, "initial field must match the model's mode count");
  if (!x.all_finite()) fail(ErrorCategory::invalid_field, "non-finite initial field");
  require(horizon >= 0.0, "horizon must be nonnegative");
  require(std::abs(u.horizon() - horizon) <= 1e-12 * std::max(1.0, horizon),
          "control horizon does not match the skeleton horizon");
  require(u.n_modes() <= n, "control has more modes than the model");
  u.validate();
  if (horizon == 0.0) n_steps = 0;
  require(horizon == 0.0 || n_steps >= 1, "skeleton needs at least one step");

  const double dt = n_steps ? horizon / static_cast<double>(n_steps) : 0.0;
  std::vector<double> decay(n), phi(n), sqrt_q1(n), lambda(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lam = eigenvalue(i + 1);
    lambda[i] = lam;
    decay[i] = std::exp(-lam * dt);
    phi[i] = -std::expm1(-lam * dt) / lam;
    sqrt_q1[i] = std::sqrt(model.noise.q1[i]);
  }
  SpectralBasis basis(n);
  const auto& k = simd::active();
  const bool controlled = !u.is_zero();

  SkeletonPath p;
  p.times.reserve(n_steps + 1);
  p.x.reserve(n_steps + 1);
  p.times.push_back(0.0);
  p.x.push_back(x);
  p.energy.push_back(inner(x, x));
  p.v_integral.push_back(0.0);

  std::vector<double> state = x.vec(), drift(n), fb(n), ubuf(n, 0.0);
  for (std::size_t s = 0; s < n_steps; ++s) {
    basis.burgers(state, drift);
    p.max_b_term = std::max(p.max_b_term, std::abs(k.dot(drift.data(), state.data(), n)));
    fbar.evaluate(state, fb);
    k.axpy(1.0, fb.data(), drift.data(), n);
    if (controlled) {
      u.evaluate((static_cast<double>(s) + 0.5) * dt, ubuf);
      const double s1 = model.coeffs->sigma1(state);
      for (std::size_t i = 0; i < n; ++i) drift[i] += s1 * sqrt_q1[i] * ubuf[i];
    }
    const double v = k.weighted_sq_sum(lambda.data(), state.data(), n);
    for (std::size_t i = 0; i < n; ++i) state[i] = decay[i] * state[i] + phi[i] * drift[i];
    for (double a : state)
      if (!std::isfinite(a))
        throw BlowUpError(s, "skeleton path left the finite range at t=" +
                                 std::to_string(dt * static_cast<double>(s + 1)));
    p.times.push_back(dt * static_cast<double>(s + 1));
    p.x.emplace_back(state);
    p.energy.push_back(k.dot(state.data(), state.data(), n));
    p.v_integral.push_back(p.v_integral.back() + dt * v);
  }
  return p;
}

EnergyReport energy_report(const SkeletonPath& path) {
  EnergyReport r;
  require(!path.x.empty(), "energy report of an empty path");
  r.sup_energy = *std::max_element(path.energy.begin(), path.energy.end());
  r.v_integral = path.v_integral.back();
  r.witness = (r.sup_energy + r.v_integral) / (1.0 + path.energy.front());
  return r;
}

std::vector<Control> oscillatory_sequence(const Control& base, std::size_t mode, double amplitude,
                                          double omega, const std::vector<std::size_t>& indices) {
  require(mode >= 1 && mode <= base.n_modes(), "oscillation mode outside the control's modes");
  const double h = base.knot_length();
  std::vector<Control> out;
  out.reserve(indices.size());
  for (std::size_t n : indices) {
    Control c = base;
    const double w = static_cast<double>(n) * omega;
    for (std::size_t j = 0; j < base.n_knots(); ++j) {
      const double a = h * static_cast<double>(j), b = a + h;
      const double avg = w == 0.0 ? 1.0 : (std::sin(w * b) - std::sin(w * a)) / (w * h);
      c.knot(j)[mode - 1] += amplitude * avg;
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<ContinuityGap> weak_continuity_probe(const SpectralField& x,
                                                 const std::vector<Control>& sequence,
                                                 const Control& limit, const AveragedDrift& fbar,
                                                 double horizon, std::size_t n_steps) {
  const SkeletonPath ref = solve_skeleton(x, limit, fbar, horizon, n_steps);
  const double dt = n_steps ? horizon / static_cast<double>(n_steps) : 0.0;
  std::vector<ContinuityGap> gaps;
  gaps.reserve(sequence.size());
  for (const Control& un : sequence) {
    const SkeletonPath p = solve_skeleton(x, un, fbar, horizon, n_steps);
    ContinuityGap g;
    for (std::size_t s = 0; s < p.x.size(); ++s) {
      const SpectralField d = p.x[s] - ref.x[s];
      g.sup_gap = std::max(g.sup_gap, norm(d));
      if (s + 1 < p.x.size()) g.v_gap += dt * v_norm_sq(d);
    }
    gaps.push_back(g);
  }
  return gaps;
}

}  // namespace sfb
