#pragma once

// Rate function of the skeleton equation: the least control energy
// (1/2) int |u|^2 that steers the skeleton from x to a target, computed by an
// augmented Lagrangian over an L-BFGS inner solver, plus the closed-form
// minimum-energy solution of the linear-quadratic case.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sfb/control.hpp"
#include "sfb/frozen.hpp"
#include "sfb/skeleton.hpp"

namespace sfb {

enum class TargetKind { endpoint, path };
enum class GradientMode { automatic, adjoint, finite_difference };

struct RateProblem {
  SpectralField x;   // initial condition
  double horizon = 1.0;
  TargetKind kind = TargetKind::endpoint;

  // endpoint: |X_T - z| <= radius (radius 0 is the equality X_T = z)
  SpectralField z;
  double radius = 0.0;

  // path: X_t = g_t at every skeleton grid point, sup-norm tolerance
  std::vector<SpectralField> path_target;
  double path_tolerance = 1e-3;

  std::size_t n_knots = 32;
  std::size_t n_modes_ctrl = 8;     // clipped to the model's mode count
  std::size_t n_steps = 0;          // skeleton steps; 0 picks a multiple of n_knots near 2048
  std::vector<double> rho_schedule{1e2, 1e3, 1e4};
  std::size_t n_starts = 5;
  std::uint64_t seed = 1;
  std::optional<Control> warm_start;
  GradientMode gradient = GradientMode::automatic;
  std::size_t max_inner_iterations = 400;
  std::size_t max_outer_iterations = 40;
  std::size_t threads = 1;

  // Skeleton steps actually used (a positive multiple of n_knots).
  std::size_t steps() const;
  std::size_t control_modes(std::size_t model_modes) const;
};

struct OptimizerTrace {
  std::size_t outer_iterations = 0;
  std::size_t inner_iterations = 0;
  std::size_t objective_evaluations = 0;
  std::vector<double> gradient_norms;  // final inner gradient norm per outer iteration
  std::vector<double> residuals;       // constraint residual per outer iteration
  std::vector<double> rho;             // penalty weight per outer iteration
};

struct RateResult {
  double value = 0.0;       // (1/2) int |u*|^2 by the knot quadrature
  Control u_star;
  SkeletonPath path;
  double residual = 0.0;    // endpoint: max(0, |X_T - z| - r); path: sup_t |X_t - g_t|
  double tolerance = 0.0;   // residual needed for the converged flag
  bool converged = false;
  bool upper_bound = false; // nonconvex problem: the value is an upper bound on I
  std::string label;        // "global minimum" or "certified upper bound"
  GradientMode gradient = GradientMode::finite_difference;
  std::size_t best_start = 0;
  std::size_t converged_starts = 0;
  OptimizerTrace trace;
};

// The augmented-Lagrangian objective in scaled coordinates
// theta = sqrt(knot length) * u, so the energy term is |theta|^2 / 2.
class RateObjective {
 public:
  RateObjective(const RateProblem& problem, const AveragedDrift& fbar);

  std::size_t dimension() const noexcept { return dim_; }
  bool adjoint_available() const noexcept { return adjoint_ok_; }
  bool nonconvex() const noexcept { return nonconvex_; }

  Control to_control(const std::vector<double>& theta) const;
  std::vector<double> from_control(const Control& u) const;

  SkeletonPath solve(const std::vector<double>& theta) const;
  double energy(const std::vector<double>& theta) const;
  double residual(const SkeletonPath& path) const;
  double tolerance() const noexcept { return tol_; }

  // Augmented Lagrangian value at the current multipliers and rho.
  double value(const std::vector<double>& theta) const;
  std::vector<double> gradient_adjoint(const std::vector<double>& theta) const;
  std::vector<double> gradient_fd(const std::vector<double>& theta) const;
  std::vector<double> gradient(const std::vector<double>& theta) const;

  void set_rho(double rho) { rho_ = rho; }
  double rho() const noexcept { return rho_; }
  void reset_multipliers();
  // mu <- mu + rho c (equality) or max(0, mu + rho c) (ball).
  void update_multipliers(const SkeletonPath& path);

  GradientMode mode() const noexcept { return mode_; }
  std::size_t evaluations() const noexcept { return evals_; }

 private:
  // Constraint values and the AL penalty; fills dL/dX_n when requested.
  double penalty(const SkeletonPath& path, std::vector<std::vector<double>>* dx) const;

  const RateProblem& p_;
  const AveragedDrift& fbar_;
  const Model& model_;
  std::size_t n_, nc_, knots_, steps_, dim_;
  double knot_len_, dt_, tol_;
  bool adjoint_ok_, nonconvex_;
  GradientMode mode_;
  double rho_ = 1.0;
  std::vector<double> mu_;         // endpoint: N; ball: 1; path: (steps+1) x N
  mutable std::size_t evals_ = 0;
};

// Multi-start minimization. Never throws on non-convergence: the result then
// carries converged = false and the best incumbent.
RateResult minimize_rate(const RateProblem& problem, const AveragedDrift& fbar);

struct LqOracle {
  double value = 0.0;
  std::vector<double> c;   // u_k(s) = c_k exp(-lambda_k (T - s))
  double horizon = 0.0;

  // Exact control, and its cell averages on a knot grid.
  std::vector<double> at(double t) const;
  Control control(std::size_t n_knots) const;
};

// Minimum energy to steer the linear flow from x to z (or into the ball of
// radius r around z, single mode only). Requires a model whose skeleton is
// linear: fbar identically zero, constant sigma1 and one mode (B vanishes on
// span{e_1}).
LqOracle lq_oracle(const SpectralField& x, const SpectralField& z, double horizon,
                   const Model& model, double radius = 0.0);

}  // namespace sfb
