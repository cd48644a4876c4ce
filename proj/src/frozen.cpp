#include "sfb/frozen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "sfb/errors.hpp"
#include "sfb/simd/kernels.hpp"
#include "sfb/stats.hpp"

namespace sfb {

double default_burn_in(const Model& model) {
  const double margin = eigenvalue(1) - model.declared().L_g;
  return 5.0 / (margin > 0.0 ? margin : eigenvalue(1));
}

FrozenStepper::FrozenStepper(const Model& model, SpectralField x, double dt)
    : coeffs_(*model.coeffs), x_(std::move(x)), dt_(dt) {
  require(dt > 0.0, "frozen step must be positive");
  const std::size_t n = model.n_modes();
  require(x_.size() == n, "frozen argument must match the model's mode count");
  decay_.resize(n);
  phi_.resize(n);
  conv_sd_.resize(n);
  sqrt_q2_.resize(n);
  g_.resize(n);
  noise_.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lam = eigenvalue(i + 1);
    decay_[i] = std::exp(-lam * dt);
    phi_[i] = -std::expm1(-lam * dt) / lam;
    conv_sd_[i] = std::sqrt(-std::expm1(-2.0 * lam * dt) / (2.0 * lam));
    sqrt_q2_[i] = std::sqrt(model.noise.q2[i]);
  }
}

void FrozenStepper::step(std::vector<double>& y, const double* xi) {
  const std::size_t n = y.size();
  coeffs_.g(x_.coeffs(), y, g_);
  const double s2 = coeffs_.sigma2(x_.coeffs(), y);
  for (std::size_t i = 0; i < n; ++i) noise_[i] = s2 * sqrt_q2_[i] * conv_sd_[i];
  simd::active().lincomb3(decay_.data(), y.data(), phi_.data(), g_.data(), noise_.data(), xi,
                          y.data(), n);
}

namespace {

void check_state(const std::vector<double>& y, std::size_t step) {
  for (double v : y)
    if (!std::isfinite(v))
      throw BlowUpError(step, "frozen run left the finite range after step " + std::to_string(step));
}

}  // namespace

FrozenRun simulate_frozen(const SpectralField& x, const SpectralField& y, const Model& model,
                          double dt, std::size_t n_steps, StreamKey seed,
                          std::optional<double> burn_in) {
  require(y.size() == model.n_modes(), "initial fast state must match the model's mode count");
  if (!x.all_finite() || !y.all_finite()) fail(ErrorCategory::invalid_field, "non-finite initial data");
  FrozenStepper st(model, x, dt);
  const DeclaredConstants d = model.declared();
  FrozenRun run;
  run.x = x;
  run.a3_holds = check_a3(d.L_g, d.L_sigma2).holds;
  const double b = burn_in.value_or(default_burn_in(model));
  run.burn_in_steps = std::min<std::size_t>(n_steps, static_cast<std::size_t>(std::ceil(b / dt)));
  run.time_average_window = dt * static_cast<double>(n_steps - run.burn_in_steps);

  auto rng = make_stream(seed, StreamTag::frozen);
  std::normal_distribution<double> normal;
  std::vector<double> state = y.vec(), xi(y.size());
  run.times.reserve(n_steps + 1);
  run.y.reserve(n_steps + 1);
  run.times.push_back(0.0);
  run.y.push_back(y);
  for (std::size_t k = 0; k < n_steps; ++k) {
    for (double& v : xi) v = normal(rng);
    st.step(state, xi.data());
    check_state(state, k);
    run.times.push_back(dt * static_cast<double>(k + 1));
    run.y.emplace_back(state);
  }
  return run;
}

FbarEstimate estimate_fbar_time_average(const SpectralField& x, const Model& model,
                                        const FbarBudget& budget) {
  const DeclaredConstants d = model.declared();
  const A3Result a3 = check_a3(d.L_g, d.L_sigma2);
  if (!a3.holds)
    fail(ErrorCategory::condition_violation,
         "time-average estimate of fbar refused: condition A3 fails (lhs " + std::to_string(a3.lhs) +
             "), the frozen equation need not be ergodic");
  require(budget.dt > 0.0 && budget.horizon > 0.0, "fbar budget needs positive dt and horizon");
  require(budget.batches >= 2, "fbar budget needs at least two batches");
  const std::size_t n = model.n_modes();
  require(x.size() == n, "fbar argument must match the model's mode count");

  FbarEstimate est;
  est.value = SpectralField(n);
  est.stderr_ = SpectralField(n);
  if (model.coeffs->f_is_zero()) return est;

  FrozenStepper st(model, x, budget.dt);
  const std::size_t burn =
      static_cast<std::size_t>(std::ceil(budget.burn_in.value_or(default_burn_in(model)) / budget.dt));
  const std::size_t batch_len = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(budget.horizon / budget.dt)) / budget.batches);
  const std::size_t total = batch_len * budget.batches;

  auto rng = make_stream(budget.seed, StreamTag::frozen);
  std::normal_distribution<double> normal;
  require(budget.y0.empty() || budget.y0.size() == n, "fbar initial state has the wrong size");
  std::vector<double> y = budget.y0.empty() ? std::vector<double>(n, 0.0) : budget.y0;
  std::vector<double> xi(n), f(n), acc(n, 0.0);
  std::vector<double> batch_means(budget.batches * n, 0.0);
  for (std::size_t k = 0; k < burn + total; ++k) {
    for (double& v : xi) v = normal(rng);
    st.step(y, xi.data());
    check_state(y, k);
    if (k < burn) continue;
    model.coeffs->f(x.coeffs(), y, f);
    simd::active().axpy(1.0, f.data(), acc.data(), n);
    const std::size_t j = k - burn;
    if ((j + 1) % batch_len == 0) {
      const std::size_t b = j / batch_len;
      for (std::size_t i = 0; i < n; ++i) batch_means[b * n + i] = acc[i] / static_cast<double>(batch_len);
      std::fill(acc.begin(), acc.end(), 0.0);
    }
  }
  std::vector<double> col(budget.batches);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < budget.batches; ++b) col[b] = batch_means[b * n + i];
    const MeanEstimate m = mean_estimate(col);
    est.value[i] = m.mean;
    est.stderr_[i] = m.stderr_;
  }
  est.stderr_norm = norm(est.stderr_);
  est.samples = total;
  return est;
}

FbarEstimate estimate_fbar(const SpectralField& x, const Model& model, const FbarBudget& budget) {
  if (!model.coeffs->has_closed_form_fbar()) return estimate_fbar_time_average(x, model, budget);
  require(x.size() == model.n_modes(), "fbar argument must match the model's mode count");
  FbarEstimate est;
  est.value = SpectralField(x.size());
  est.stderr_ = SpectralField(x.size());
  est.closed_form = true;
  model.coeffs->fbar(x.coeffs(), est.value.coeffs());
  return est;
}

AveragedDrift::AveragedDrift(Model model, FbarBudget budget, std::optional<FbarMode> mode)
    : model_(std::move(model)), budget_(budget) {
  const bool closed = model_.coeffs->has_closed_form_fbar();
  mode_ = mode.value_or(closed ? FbarMode::closed_form : FbarMode::time_average);
  if (mode_ == FbarMode::closed_form && !closed)
    fail(ErrorCategory::precondition,
         "closed-form fbar requested but preset '" + std::string(model_.coeffs->name()) +
             "' does not declare one");
}

FbarEstimate AveragedDrift::estimate(const SpectralField& x) const {
  if (mode_ == FbarMode::closed_form) return estimate_fbar(x, model_, budget_);
  {
    std::lock_guard lock(mu_);
    if (auto it = cache_.find(x.vec()); it != cache_.end()) return it->second;
  }
  FbarEstimate e = estimate_fbar_time_average(x, model_, budget_);
  std::lock_guard lock(mu_);
  cache_.insert_or_assign(x.vec(), e);
  return e;
}

void AveragedDrift::evaluate(std::span<const double> x, std::span<double> out) const {
  if (mode_ == FbarMode::closed_form) {
    model_.coeffs->fbar(x, out);
    return;
  }
  const FbarEstimate e = estimate(SpectralField(std::vector<double>(x.begin(), x.end())));
  std::copy(e.value.coeffs().begin(), e.value.coeffs().end(), out.begin());
}

void AveragedDrift::jacobian_transpose(std::span<const double> x, std::span<const double> w,
                                       std::span<double> out) const {
  require(has_jacobian(), "averaged drift has no closed-form Jacobian in time-average mode");
  model_.coeffs->fbar_jacobian_transpose(x, w, out);
}

std::size_t AveragedDrift::cache_size() const {
  std::lock_guard lock(mu_);
  return cache_.size();
}

MixingReport mixing_diagnostic(const SpectralField& x, const SpectralField& y1,
                               const SpectralField& y2, const Model& model, double dt,
                               std::size_t n_steps, StreamKey seed, std::size_t n_paths) {
  require(n_paths >= 1 && n_steps >= 2, "mixing diagnostic needs paths and steps");
  MixingReport r;
  r.times.resize(n_steps + 1);
  r.mean_gap.assign(n_steps + 1, 0.0);
  for (std::size_t k = 0; k <= n_steps; ++k) r.times[k] = dt * static_cast<double>(k);
  if (y1 == y2) {
    r.exact_coupling = true;
    r.ok = true;
    r.message = "identical initial states: the coupled gap is identically zero";
    return r;
  }
  const std::size_t n = model.n_modes();
  FrozenStepper s1(model, x, dt), s2(model, x, dt);
  std::normal_distribution<double> normal;
  std::vector<double> xi(n);
  for (std::size_t p = 0; p < n_paths; ++p) {
    auto rng = make_stream({seed.master, seed.index + p}, StreamTag::frozen);
    std::vector<double> a = y1.vec(), b = y2.vec();
    r.mean_gap[0] += norm(y1 - y2) / static_cast<double>(n_paths);
    for (std::size_t k = 0; k < n_steps; ++k) {
      for (double& v : xi) v = normal(rng);
      s1.step(a, xi.data());
      s2.step(b, xi.data());
      double gap = 0.0;
      for (std::size_t i = 0; i < n; ++i) gap += (a[i] - b[i]) * (a[i] - b[i]);
      r.mean_gap[k + 1] += std::sqrt(gap) / static_cast<double>(n_paths);
    }
  }
  // Fit after the first tenth of the window, where faster modes have died
  // out, and only while the gap is well above round-off.
  std::vector<double> ts, logs;
  const double floor = 1e-12 * r.mean_gap[0];
  for (std::size_t k = n_steps / 10; k <= n_steps; ++k) {
    if (!(r.mean_gap[k] > floor)) break;
    ts.push_back(r.times[k]);
    logs.push_back(std::log(r.mean_gap[k]));
  }
  if (ts.size() < 3) {
    r.message = "gap fell below round-off before a rate could be fitted; shorten dt or the window";
    return r;
  }
  const LinearFit fit = linear_fit(ts, logs);
  r.eta_hat = -fit.slope;
  r.fit_r2 = fit.r2;
  r.ok = r.eta_hat > 0.0;
  if (!r.ok) r.message = "fitted decay rate is not positive: no contraction observed";
  return r;
}

double x_sensitivity(const std::vector<std::pair<SpectralField, SpectralField>>& pairs,
                     const SpectralField& y, const Model& model, double dt, std::size_t n_steps,
                     StreamKey seed, std::size_t n_paths) {
  const std::size_t n = model.n_modes();
  std::normal_distribution<double> normal;
  std::vector<double> xi(n);
  double sup = 0.0;
  for (const auto& [x1, x2] : pairs) {
    const double dx2 = inner(x1 - x2, x1 - x2);
    require(dx2 > 0.0, "sensitivity pairs must differ");
    FrozenStepper s1(model, x1, dt), s2(model, x2, dt);
    std::vector<double> msq(n_steps, 0.0);
    for (std::size_t p = 0; p < n_paths; ++p) {
      auto rng = make_stream({seed.master, seed.index + p}, StreamTag::frozen);
      std::vector<double> a = y.vec(), b = y.vec();
      for (std::size_t k = 0; k < n_steps; ++k) {
        for (double& v : xi) v = normal(rng);
        s1.step(a, xi.data());
        s2.step(b, xi.data());
        double gap = 0.0;
        for (std::size_t i = 0; i < n; ++i) gap += (a[i] - b[i]) * (a[i] - b[i]);
        msq[k] += gap / static_cast<double>(n_paths);
      }
    }
    sup = std::max(sup, *std::max_element(msq.begin(), msq.end()) / dx2);
  }
  return sup;
}

}  // namespace sfb
