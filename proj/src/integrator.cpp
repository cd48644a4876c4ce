#include "sfb/integrator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sfb/errors.hpp"
#include "sfb/simd/kernels.hpp"

namespace sfb {

TimeGrid TimeGrid::make(double horizon, std::size_t n_steps, const ScaleParams& scales) {
  require(horizon >= 0.0, "horizon must be nonnegative");
  TimeGrid g;
  g.horizon = horizon;
  g.n_steps = horizon == 0.0 ? 0 : n_steps;
  require(horizon == 0.0 || n_steps >= 1, "grid needs at least one step");
  if (g.n_steps == 0) return g;
  const double dt = g.dt();
  const double fast_limit = scales.delta / 10.0;
  g.substeps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(dt / fast_limit - 1e-9)));
  const double blocks = std::round(scales.khasminskii_block() / dt);
  g.block_steps = std::max<std::size_t>(1, static_cast<std::size_t>(blocks));
  return g;
}

double TimeGrid::dt() const noexcept {
  return n_steps == 0 ? 0.0 : horizon / static_cast<double>(n_steps);
}

double TimeGrid::dt_fast() const noexcept { return dt() / static_cast<double>(substeps); }

void TimeGrid::validate(const ScaleParams& scales) const {
  require(substeps >= 1 && block_steps >= 1, "grid substeps and block must be positive");
  if (n_steps == 0) return;
  if (dt_fast() > scales.delta / 10.0 * (1.0 + 1e-9))
    fail(ErrorCategory::precondition,
         "fast substep " + std::to_string(dt_fast()) + " does not resolve delta/10 = " +
             std::to_string(scales.delta / 10.0));
}

double default_guard_radius(const SpectralField& x, const SpectralField& y) {
  return 10.0 * (1.0 + norm(x) + norm(y));
}

namespace {

// (1 - e^{-a}) / r computed without cancellation.
double phi_weight(double rate, double h) {
  if (rate == 0.0) return h;
  return -std::expm1(-rate * h) / rate;
}

class Engine {
 public:
  Engine(const Model& model, const ScaleParams& scales, const TimeGrid& grid)
      : model_(model), coeffs_(*model.coeffs), basis_(model.n_modes()), n_(model.n_modes()),
        eps_(scales.epsilon), delta_(scales.delta), dt_(grid.dt()), h_(grid.dt_fast()),
        substeps_(grid.substeps) {
    slow_decay_.resize(n_);
    slow_phi_.resize(n_);
    slow_noise_.resize(n_);
    sqrt_q1_.resize(n_);
    fast_decay_.resize(n_);
    fast_phi_.resize(n_);
    conv_b_.resize(n_);
    conv_c_.resize(n_);
    fast_noise_.resize(n_);
    fast_control_.resize(n_);
    const double sqrt_h = std::sqrt(h_);
    for (std::size_t i = 0; i < n_; ++i) {
      const double lambda = eigenvalue(i + 1);
      slow_decay_[i] = std::exp(-lambda * dt_);
      slow_phi_[i] = phi_weight(lambda, dt_);
      sqrt_q1_[i] = std::sqrt(model.noise.q1[i]);
      slow_noise_[i] = slow_decay_[i] * sqrt_q1_[i];

      const double rate = lambda / delta_;
      fast_decay_[i] = std::exp(-rate * h_);
      fast_phi_[i] = phi_weight(rate, h_);
      const double var_conv = -std::expm1(-2.0 * rate * h_) / (2.0 * rate);
      const double cov = fast_phi_[i];
      conv_b_[i] = h_ > 0.0 ? cov / sqrt_h : 0.0;
      conv_c_[i] = std::sqrt(std::max(0.0, var_conv - conv_b_[i] * conv_b_[i]));
      const double sqrt_q2 = std::sqrt(model.noise.q2[i]);
      fast_noise_[i] = sqrt_q2 / std::sqrt(delta_);
      fast_control_[i] = eps_ > 0.0 ? sqrt_q2 / std::sqrt(delta_ * eps_) : 0.0;
    }
    sqrt_h_ = sqrt_h;
    zeros_.assign(n_, 0.0);
    dw_.resize(n_);
    conv_.resize(n_);
    buf_f_.resize(n_);
    buf_g_.resize(n_);
    buf_force_.resize(n_);
    buf_coef_.resize(n_);
    buf_drift_.resize(n_);
  }

  std::size_t substeps() const noexcept { return substeps_; }
  std::size_t n() const noexcept { return n_; }
  double h() const noexcept { return h_; }
  double dt() const noexcept { return dt_; }
  const std::vector<double>& dw() const noexcept { return dw_; }

  // dW = sqrt(h) xi_w, I = b xi_w + c xi_conv.
  void load_noise(const double* xi_w, const double* xi_conv) {
    const auto& k = simd::active();
    for (std::size_t i = 0; i < n_; ++i) dw_[i] = sqrt_h_ * xi_w[i];
    k.lincomb3(conv_b_.data(), xi_w, conv_c_.data(), xi_conv, zeros_.data(), zeros_.data(),
               conv_.data(), n_);
  }

  // One fast substep of y with slow argument xs. Adds f(xs, y) to f_acc.
  void fast_substep(std::span<const double> xs, std::vector<double>& y,
                    std::span<const double> u, std::vector<double>& f_acc) {
    const auto& k = simd::active();
    if (!coeffs_.f_is_zero()) {
      coeffs_.f(xs, y, buf_f_);
      k.axpy(1.0, buf_f_.data(), f_acc.data(), n_);
    }
    coeffs_.g(xs, y, buf_g_);
    const double s2 = coeffs_.sigma2(xs, y);
    const double inv_delta = 1.0 / delta_;
    for (std::size_t i = 0; i < n_; ++i) {
      buf_force_[i] = buf_g_[i] * inv_delta;
      buf_coef_[i] = s2 * fast_noise_[i];
    }
    if (!u.empty())
      for (std::size_t i = 0; i < n_; ++i) buf_force_[i] += s2 * fast_control_[i] * u[i];
    k.lincomb3(fast_decay_.data(), y.data(), fast_phi_.data(), buf_force_.data(),
               buf_coef_.data(), conv_.data(), y.data(), n_);
  }

  // One slow step of x given the substep-averaged f and the summed increment.
  void slow_update(std::vector<double>& x, std::span<const double> f_avg,
                   std::span<const double> u, std::span<const double> dw_sum) {
    const auto& k = simd::active();
    basis_.burgers(x, buf_drift_);
    k.axpy(1.0, f_avg.data(), buf_drift_.data(), n_);
    const double s1 = coeffs_.sigma1(x);
    if (!u.empty())
      for (std::size_t i = 0; i < n_; ++i) buf_drift_[i] += s1 * sqrt_q1_[i] * u[i];
    if (dw_sum.empty()) {
      k.lincomb3(slow_decay_.data(), x.data(), slow_phi_.data(), buf_drift_.data(),
                 zeros_.data(), zeros_.data(), x.data(), n_);
      return;
    }
    const double amp = std::sqrt(eps_) * s1;
    for (std::size_t i = 0; i < n_; ++i) buf_coef_[i] = amp * slow_noise_[i];
    k.lincomb3(slow_decay_.data(), x.data(), slow_phi_.data(), buf_drift_.data(),
               buf_coef_.data(), dw_sum.data(), x.data(), n_);
  }

 private:
  const Model& model_;
  const CoefficientSet& coeffs_;
  SpectralBasis basis_;
  std::size_t n_;
  double eps_, delta_, dt_, h_, sqrt_h_ = 0.0;
  std::size_t substeps_;
  std::vector<double> slow_decay_, slow_phi_, slow_noise_, sqrt_q1_;
  std::vector<double> fast_decay_, fast_phi_, conv_b_, conv_c_, fast_noise_, fast_control_;
  std::vector<double> zeros_, dw_, conv_;
  std::vector<double> buf_f_, buf_g_, buf_force_, buf_coef_, buf_drift_;
};

bool finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
}

double l2_sq(const std::vector<double>& v) {
  return simd::active().dot(v.data(), v.data(), v.size());
}

double v_sq(const std::vector<double>& v) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += eigenvalue(i + 1) * v[i] * v[i];
  return s;
}

void check_inputs(const SpectralField& x, const SpectralField& y, const Model& model,
                  const ScaleParams& scales, const TimeGrid& grid, const Control* u) {
  require(x.size() == model.n_modes() && y.size() == model.n_modes(),
          "initial data must match the model's mode count");
  if (!x.all_finite() || !y.all_finite())
    fail(ErrorCategory::invalid_field, "non-finite initial data");
  grid.validate(scales);
  if (u) {
    require(std::abs(u->horizon() - grid.horizon) <= 1e-12 * std::max(1.0, grid.horizon),
            "control horizon does not match the time grid");
    require(u->n_modes() <= model.n_modes(), "control has more modes than the model");
    require(u->is_zero() || scales.epsilon > 0.0,
            "a nonzero control needs epsilon > 0 (fast control scales as (delta eps)^{-1/2})");
    u->validate();
  }
}

AuxiliaryRun run(const SpectralField& x0, const SpectralField& y0, const Model& model,
                 const ScaleParams& scales, const TimeGrid& grid, const Control* control,
                 bool with_aux, StreamKey seed, std::optional<double> guard,
                 const Control* tilt = nullptr) {
  check_inputs(x0, y0, model, scales, grid, control ? control : tilt);
  if (control && control->is_zero()) control = nullptr;
  if (tilt && tilt->is_zero()) tilt = nullptr;

  const std::size_t n = model.n_modes();
  Engine eng(model, scales, grid);
  auto rng = make_stream(seed, StreamTag::coupled);
  std::normal_distribution<double> normal;

  AuxiliaryRun out;
  TrajectoryPair& tr = out.controlled;
  tr.seed = seed;
  tr.guard_radius = guard;
  tr.times.reserve(grid.n_steps + 1);
  tr.x.reserve(grid.n_steps + 1);
  tr.y.reserve(grid.n_steps + 1);
  tr.times.push_back(0.0);
  tr.x.push_back(x0);
  tr.y.push_back(y0);
  if (with_aux) {
    out.x_hat.reserve(grid.n_steps + 1);
    out.y_hat.reserve(grid.n_steps + 1);
    out.x_hat.push_back(x0);
    out.y_hat.push_back(y0);
  }
  if (guard && norm(x0) > *guard) {
    tr.exit_index = 0;
    return out;
  }

  std::vector<double> x = x0.vec(), y = y0.vec();
  std::vector<double> xh = x0.vec(), yh = y0.vec();
  std::vector<double> xs(n), xblock = x0.vec();
  std::vector<double> u_buf(n, 0.0), f_acc(n), fh_acc(n), dw_sum(n), xi_w(n), xi_c(n);
  std::vector<double> tilt_buf(n, 0.0);
  std::span<const double> u;
  const double h = eng.h();
  const double tilt_shift = tilt ? std::sqrt(h / scales.epsilon) : 0.0;
  const double dt = eng.dt();
  const double inv_sub = 1.0 / static_cast<double>(eng.substeps());

  for (std::size_t step = 0; step < grid.n_steps; ++step) {
    if (control) {
      control->evaluate((static_cast<double>(step) + 0.5) * dt, u_buf);
      u = u_buf;
    }
    if (tilt) tilt->evaluate((static_cast<double>(step) + 0.5) * dt, tilt_buf);
    xs = x;
    if (with_aux && step % grid.block_steps == 0) xblock = x;
    std::fill(f_acc.begin(), f_acc.end(), 0.0);
    std::fill(fh_acc.begin(), fh_acc.end(), 0.0);
    std::fill(dw_sum.begin(), dw_sum.end(), 0.0);

    for (std::size_t j = 0; j < eng.substeps(); ++j) {
      for (std::size_t i = 0; i < n; ++i) xi_w[i] = normal(rng);
      for (std::size_t i = 0; i < n; ++i) xi_c[i] = normal(rng);
      if (tilt) {
        tr.control_noise_integral += std::sqrt(h) * simd::active().dot(tilt_buf.data(), xi_w.data(), n);
        for (std::size_t i = 0; i < n; ++i) xi_w[i] += tilt_shift * tilt_buf[i];
      }
      eng.load_noise(xi_w.data(), xi_c.data());
      if (with_aux) {
        double gap = 0.0;
        for (std::size_t i = 0; i < n; ++i) gap += (y[i] - yh[i]) * (y[i] - yh[i]);
        out.y_gap_integral += h * gap;
      }
      eng.fast_substep(xs, y, u, f_acc);
      if (with_aux) eng.fast_substep(xblock, yh, {}, fh_acc);

      const auto& dw = eng.dw();
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        dw_sum[i] += dw[i];
        s += dw[i];
      }
      tr.noise.fast_sum += s;
      tr.noise.fast_increments += n;
      if (!u.empty())
        tr.control_noise_integral += simd::active().dot(u.data(), dw.data(), n);
    }
    tr.noise.slow_sum += std::accumulate(dw_sum.begin(), dw_sum.end(), 0.0);
    tr.noise.slow_increments += n * eng.substeps();

    tr.v_integral += dt * v_sq(x);
    if (!u.empty()) tr.control_energy += dt * l2_sq(u_buf);
    if (tilt) tr.control_energy += dt * l2_sq(tilt_buf);
    if (with_aux) out.x_hat_v_integral += dt * v_sq(xh);

    for (double& v : f_acc) v *= inv_sub;
    eng.slow_update(x, f_acc, u, dw_sum);
    if (with_aux) {
      for (double& v : fh_acc) v *= inv_sub;
      eng.slow_update(xh, fh_acc, u, {});
    }

    const std::size_t idx = step + 1;
    tr.times.push_back(grid.time(idx));
    tr.x.emplace_back(x);
    tr.y.emplace_back(y);
    if (with_aux) {
      out.x_hat.emplace_back(xh);
      out.y_hat.emplace_back(yh);
    }

    const bool ok = finite(x) && finite(y) && (!with_aux || (finite(xh) && finite(yh)));
    if (!ok) {
      if (guard) {
        tr.exit_index = idx;
        break;
      }
      throw BlowUpError(step, "trajectory blew up between t=" + std::to_string(grid.time(step)) +
                                  " and t=" + std::to_string(grid.time(idx)) +
                                  " (no guard radius set)");
    }
    if (guard) {
      double functional = std::sqrt(l2_sq(x)) + tr.v_integral;
      if (with_aux) functional += out.x_hat_v_integral;
      if (functional > *guard) {
        tr.exit_index = idx;
        break;
      }
    }
  }
  return out;
}

}  // namespace

CoupledState step_coupled(const CoupledState& state, const Model& model, const ScaleParams& scales,
                          const TimeGrid& grid, const StepNoise& noise, std::span<const double> u) {
  check_inputs(state.x, state.y, model, scales, grid, nullptr);
  require(grid.n_steps >= 1, "step_coupled needs a grid with a positive step");
  const std::size_t n = model.n_modes();
  require(noise.xi_w.size() == grid.substeps * n && noise.xi_conv.size() == grid.substeps * n,
          "step noise must hold substeps x modes normals");
  require(u.empty() || u.size() == n, "control value must have one entry per mode");
  Engine eng(model, scales, grid);
  std::vector<double> x = state.x.vec(), y = state.y.vec();
  std::vector<double> f_acc(n, 0.0), dw_sum(n, 0.0);
  for (std::size_t j = 0; j < grid.substeps; ++j) {
    eng.load_noise(noise.xi_w.data() + j * n, noise.xi_conv.data() + j * n);
    eng.fast_substep(state.x.coeffs(), y, u, f_acc);
    for (std::size_t i = 0; i < n; ++i) dw_sum[i] += eng.dw()[i];
  }
  for (double& v : f_acc) v /= static_cast<double>(grid.substeps);
  eng.slow_update(x, f_acc, u, dw_sum);
  if (!finite(x) || !finite(y)) throw BlowUpError(0, "step produced a non-finite state");
  return {SpectralField(std::move(x)), SpectralField(std::move(y))};
}

TrajectoryPair simulate_pair(const SpectralField& x, const SpectralField& y, const Model& model,
                             const ScaleParams& scales, const TimeGrid& grid, StreamKey seed,
                             std::optional<double> guard_radius) {
  return run(x, y, model, scales, grid, nullptr, false, seed, guard_radius).controlled;
}

TrajectoryPair simulate_controlled(const SpectralField& x, const SpectralField& y,
                                   const Model& model, const ScaleParams& scales,
                                   const TimeGrid& grid, const Control& u, StreamKey seed,
                                   std::optional<double> guard_radius) {
  return run(x, y, model, scales, grid, &u, false, seed, guard_radius).controlled;
}

AuxiliaryRun simulate_auxiliary(const SpectralField& x, const SpectralField& y, const Model& model,
                                const ScaleParams& scales, const TimeGrid& grid, const Control& u,
                                StreamKey seed, std::optional<double> guard_radius) {
  return run(x, y, model, scales, grid, &u, true, seed, guard_radius);
}

TrajectoryPair simulate_tilted(const SpectralField& x, const SpectralField& y, const Model& model,
                               const ScaleParams& scales, const TimeGrid& grid, const Control& u,
                               StreamKey seed, std::optional<double> guard_radius) {
  return run(x, y, model, scales, grid, nullptr, false, seed, guard_radius, &u).controlled;
}

}  // namespace sfb
