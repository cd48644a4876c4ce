#pragma once

// The frozen fast equation dY = [A Y + g(x, Y)] dt + sigma2(x, Y) Q2^{1/2} dW~
// with x held fixed, its time averages, and the averaged drift
// fbar(x) = int f(x, y) mu^x(dy).

#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfb/model.hpp"
#include "sfb/rng.hpp"
#include "sfb/spectral.hpp"

namespace sfb {

// Five mixing times 5 / (lambda_1 - L_g). Falls back to 5 / lambda_1 when the
// A3 margin is not positive (the caller has been warned by then).
double default_burn_in(const Model& model);

// Exact step of the linear part; the stochastic convolution is drawn from its
// Gaussian law so linear presets carry no time-stepping error.
class FrozenStepper {
 public:
  FrozenStepper(const Model& model, SpectralField x, double dt);

  // y <- one step; xi holds N standard normals.
  void step(std::vector<double>& y, const double* xi);
  const SpectralField& x() const noexcept { return x_; }
  double dt() const noexcept { return dt_; }

 private:
  const CoefficientSet& coeffs_;
  SpectralField x_;
  double dt_;
  std::vector<double> decay_, phi_, conv_sd_, sqrt_q2_;
  std::vector<double> g_, noise_;
};

struct FrozenRun {
  SpectralField x;
  std::vector<double> times;
  std::vector<SpectralField> y;
  std::size_t burn_in_steps = 0;
  double time_average_window = 0.0;
  bool a3_holds = true;  // false: ergodicity is not guaranteed for this run
};

// n_steps steps of length dt. burn_in defaults to default_burn_in(model).
FrozenRun simulate_frozen(const SpectralField& x, const SpectralField& y, const Model& model,
                          double dt, std::size_t n_steps, StreamKey seed,
                          std::optional<double> burn_in = std::nullopt);

// Mean of f(x, Y_t) over the post-burn-in part of a run, with batch-means
// standard errors per mode.
struct FbarEstimate {
  SpectralField value;
  SpectralField stderr_;   // per-mode standard error
  double stderr_norm = 0.0;  // |stderr_|
  std::size_t samples = 0;
  bool closed_form = false;
};

struct FbarBudget {
  double dt = 0.01;
  double horizon = 200.0;                 // averaging window after burn-in
  std::optional<double> burn_in;          // default: five mixing times
  std::size_t batches = 20;
  StreamKey seed{0x5eed, 0};
  std::vector<double> y0;                 // initial fast state; empty means zero
};

enum class FbarMode { time_average, closed_form };

// Time-average estimate. Refuses (condition_violation) when A3 fails.
FbarEstimate estimate_fbar_time_average(const SpectralField& x, const Model& model,
                                        const FbarBudget& budget);

// Chooses the closed form when the preset declares one.
FbarEstimate estimate_fbar(const SpectralField& x, const Model& model, const FbarBudget& budget);

// fbar as a cached map. Exact-x memoization; concurrent callers may race on
// a key, and since the estimator is deterministic in (x, budget) every
// writer stores the same value.
//
// The RNG stream is keyed on the budget seed, not on x: nearby x then see
// common random numbers, which keeps the estimate smooth in x for finite
// differences.
class AveragedDrift {
 public:
  AveragedDrift(Model model, FbarBudget budget, std::optional<FbarMode> mode = std::nullopt);

  FbarMode mode() const noexcept { return mode_; }
  const Model& model() const noexcept { return model_; }
  const FbarBudget& budget() const noexcept { return budget_; }

  void evaluate(std::span<const double> x, std::span<double> out) const;
  FbarEstimate estimate(const SpectralField& x) const;

  bool has_jacobian() const noexcept { return mode_ == FbarMode::closed_form; }
  void jacobian_transpose(std::span<const double> x, std::span<const double> w,
                          std::span<double> out) const;

  std::size_t cache_size() const;

 private:
  Model model_;
  FbarBudget budget_;
  FbarMode mode_;
  mutable std::mutex mu_;
  mutable std::map<std::vector<double>, FbarEstimate> cache_;
};

struct MixingReport {
  bool exact_coupling = false;  // y1 == y2: the gap is identically zero
  bool ok = false;              // a positive rate was fitted
  double eta_hat = 0.0;
  double fit_r2 = 0.0;
  std::vector<double> times;
  std::vector<double> mean_gap;  // E|Y^{x,y1}_t - Y^{x,y2}_t|
  std::string message;
};

// Two frozen runs per path sharing one noise; fits log E|gap| = c - eta t
// over the points where the gap is above round-off.
MixingReport mixing_diagnostic(const SpectralField& x, const SpectralField& y1,
                               const SpectralField& y2, const Model& model, double dt,
                               std::size_t n_steps, StreamKey seed, std::size_t n_paths = 20);

// sup_t E|Y^{x1,y}_t - Y^{x2,y}_t|^2 / |x1 - x2|^2, maximized over the pairs.
double x_sensitivity(const std::vector<std::pair<SpectralField, SpectralField>>& pairs,
                     const SpectralField& y, const Model& model, double dt, std::size_t n_steps,
                     StreamKey seed, std::size_t n_paths = 20);

}  // namespace sfb
