#pragma once

// Exponential integrators for the coupled slow-fast system, its controlled
// version, and the block-frozen auxiliary processes.
//
// Slow step (length dt):
//   X' = e^{dt A} X + phi(dt A) dt [B(X) + <f> + sigma1(X) Q1^{1/2} u]
//        + e^{dt A} sqrt(eps) sigma1(X) Q1^{1/2} dW
// where <f> is f(X, Y) averaged over the fast substeps of the step and dW is
// the sum of the substep increments.
//
// Fast substep (length h, slow argument frozen at the start of the slow step):
//   Y' = e^{h A/delta} Y + (1 - e^{h A/delta}) (-A/delta)^{-1} F
//        + sigma2 Q2^{1/2} delta^{-1/2} I
//   F  = g(X, Y)/delta + (delta eps)^{-1/2} sigma2 Q2^{1/2} u
// where, per mode, (dW_k, I_k) is drawn jointly from the Gaussian law of
// (W_k(h), int_0^h e^{-lambda_k (h-s)/delta} dW_k(s)). This keeps the linear
// part and the Ornstein-Uhlenbeck variance exact at any stiffness while the
// slow equation sees exactly the same increments.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "sfb/control.hpp"
#include "sfb/model.hpp"
#include "sfb/rng.hpp"
#include "sfb/spectral.hpp"

namespace sfb {

struct TimeGrid {
  double horizon = 0.0;
  std::size_t n_steps = 0;      // slow steps, dt = horizon / n_steps
  std::size_t substeps = 1;     // fast substeps per slow step
  std::size_t block_steps = 1;  // Khasminskii block Delta = block_steps * dt

  // substeps chosen so that dt_fast <= delta / 10, block rounded from
  // delta^{1/2} to a multiple of dt (at least dt).
  static TimeGrid make(double horizon, std::size_t n_steps, const ScaleParams& scales);

  double dt() const noexcept;
  double dt_fast() const noexcept;
  double block() const noexcept { return dt() * static_cast<double>(block_steps); }
  double time(std::size_t n) const noexcept { return dt() * static_cast<double>(n); }
  // Index of t(Delta) for step index n.
  std::size_t block_start(std::size_t n) const noexcept { return (n / block_steps) * block_steps; }

  // Throws precondition if the fast substep does not resolve delta / 10.
  void validate(const ScaleParams& scales) const;
};

// Counters over the increments each equation consumed. The slow sum must
// equal the fast sum up to rounding: both equations see one W.
struct NoiseLedger {
  std::uint64_t fast_increments = 0;
  std::uint64_t slow_increments = 0;
  double fast_sum = 0.0;
  double slow_sum = 0.0;
};

struct TrajectoryPair {
  std::vector<double> times;
  std::vector<SpectralField> x;
  std::vector<SpectralField> y;
  std::optional<double> guard_radius;
  // First index at which the stopping functional exceeded the guard radius.
  std::optional<std::size_t> exit_index;
  StreamKey seed;
  NoiseLedger noise;
  double v_integral = 0.0;               // int_0^{T ^ tau} ||X||^2 dt
  double control_noise_integral = 0.0;   // sum over steps of <u, dW>
  double control_energy = 0.0;           // int_0^{T ^ tau} |u|^2 dt

  // Number of leading path points that lie strictly before the exit time.
  std::size_t usable_points() const noexcept {
    return exit_index ? *exit_index : x.size();
  }
  bool stopped() const noexcept { return exit_index.has_value(); }
};

struct AuxiliaryRun {
  TrajectoryPair controlled;            // (X^{u}, Y^{u}) on the same noise
  std::vector<SpectralField> x_hat;
  std::vector<SpectralField> y_hat;
  double y_gap_integral = 0.0;          // int_0^{T ^ tau} |Y - Y^|^2 dt, substep resolution
  double x_hat_v_integral = 0.0;
};

// Default guard radius 10 (1 + |x| + |y|).
double default_guard_radius(const SpectralField& x, const SpectralField& y);

// Standard normals for one slow step: substeps x N pairs, row-major by substep.
struct StepNoise {
  std::vector<double> xi_w;     // drives dW = sqrt(h) xi_w
  std::vector<double> xi_conv;  // completes the joint law of the convolution
};

struct CoupledState {
  SpectralField x;
  SpectralField y;
};

// One slow step of the coupled (optionally controlled) system. `u` is either
// empty or an N-mode control value held over the step.
CoupledState step_coupled(const CoupledState& state, const Model& model, const ScaleParams& scales,
                          const TimeGrid& grid, const StepNoise& noise,
                          std::span<const double> u = {});

TrajectoryPair simulate_pair(const SpectralField& x, const SpectralField& y, const Model& model,
                             const ScaleParams& scales, const TimeGrid& grid, StreamKey seed,
                             std::optional<double> guard_radius = std::nullopt);

TrajectoryPair simulate_controlled(const SpectralField& x, const SpectralField& y,
                                   const Model& model, const ScaleParams& scales,
                                   const TimeGrid& grid, const Control& u, StreamKey seed,
                                   std::optional<double> guard_radius = std::nullopt);

// Runs the controlled system together with the auxiliary pair on the same W.
// The guard functional adds int ||X^||^2 to the controlled one.
AuxiliaryRun simulate_auxiliary(const SpectralField& x, const SpectralField& y, const Model& model,
                                const ScaleParams& scales, const TimeGrid& grid, const Control& u,
                                StreamKey seed, std::optional<double> guard_radius = std::nullopt);

// The uncontrolled system sampled under the measure in which W has drift
// u / sqrt(eps): every substep's standard normals are shifted by
// u sqrt(h / eps). control_noise_integral (sum of <u, dW> over the unshifted
// increments) and control_energy then give the exact likelihood ratio of the
// discrete scheme back to the untilted law,
//   exp(-control_noise_integral / sqrt(eps) - control_energy / (2 eps)).
TrajectoryPair simulate_tilted(const SpectralField& x, const SpectralField& y, const Model& model,
                               const ScaleParams& scales, const TimeGrid& grid, const Control& u,
                               StreamKey seed, std::optional<double> guard_radius = std::nullopt);

}  // namespace sfb
