#pragma once

// Deterministic skeleton equation
//   dX = [A X + B(X) + fbar(X)] dt + sigma1(X) Q1^{1/2} u dt
// (the averaged equation when u = 0), its energy ledger, and the
// weak-continuity probe along oscillating control sequences.

#include <cstddef>
#include <vector>

#include "sfb/control.hpp"
#include "sfb/frozen.hpp"
#include "sfb/spectral.hpp"

namespace sfb {

inline constexpr std::size_t default_skeleton_steps = 2048;

struct SkeletonPath {
  std::vector<double> times;
  std::vector<SpectralField> x;
  std::vector<double> energy;      // |X_t|^2
  std::vector<double> v_integral;  // int_0^t ||X_s||^2 ds (left Riemann sum)
  double max_b_term = 0.0;         // max over steps of |<B(X), X>|
};

// Exponential Euler with exact linear part, phi_1-weighted drift and the
// control read at step midpoints. Throws BlowUpError on a non-finite state.
SkeletonPath solve_skeleton(const SpectralField& x, const Control& u, const AveragedDrift& fbar,
                            double horizon, std::size_t n_steps = default_skeleton_steps);

struct EnergyReport {
  double sup_energy = 0.0;  // sup_t |X_t|^2
  double v_integral = 0.0;  // int_0^T ||X||^2
  double witness = 0.0;     // (sup + int) / (1 + |x|^2)
};

EnergyReport energy_report(const SkeletonPath& path);

// u + amplitude * cos(n omega t) e_mode for each n, each control averaged
// exactly over its knot cells (the L^2 projection onto piecewise constants).
std::vector<Control> oscillatory_sequence(const Control& base, std::size_t mode, double amplitude,
                                          double omega, const std::vector<std::size_t>& indices);

struct ContinuityGap {
  double sup_gap = 0.0;  // sup_t |X^{u_n}_t - X^u_t|
  double v_gap = 0.0;    // int_0^T ||X^{u_n} - X^u||^2
};

std::vector<ContinuityGap> weak_continuity_probe(const SpectralField& x,
                                                 const std::vector<Control>& sequence,
                                                 const Control& limit, const AveragedDrift& fbar,
                                                 double horizon,
                                                 std::size_t n_steps = default_skeleton_steps);

}  // namespace sfb
