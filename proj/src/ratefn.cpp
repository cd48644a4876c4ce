#include "sfb/ratefn.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <random>

#include "sfb/errors.hpp"
#include "sfb/parallel.hpp"
#include "sfb/rng.hpp"

namespace sfb {

std::size_t RateProblem::steps() const {
  require(n_knots >= 2, "rate problem needs at least two time knots");
  if (n_steps == 0) {
    const double m = std::max(1.0, std::round(2048.0 / static_cast<double>(n_knots)));
    return n_knots * static_cast<std::size_t>(m);
  }
  require(n_steps % n_knots == 0, "skeleton steps must be a multiple of the control knots");
  return n_steps;
}

std::size_t RateProblem::control_modes(std::size_t model_modes) const {
  require(n_modes_ctrl >= 1, "rate problem needs at least one control mode");
  return std::min(n_modes_ctrl, model_modes);
}

RateObjective::RateObjective(const RateProblem& problem, const AveragedDrift& fbar)
    : p_(problem), fbar_(fbar), model_(fbar.model()) {
  n_ = model_.n_modes();
  nc_ = p_.control_modes(n_);
  knots_ = p_.n_knots;
  steps_ = p_.steps();
  dim_ = knots_ * nc_;
  require(p_.horizon > 0.0, "rate problem needs a positive horizon");
  require(p_.x.size() == n_, "initial field must match the model's mode count");
  require(!p_.rho_schedule.empty(), "penalty schedule is empty");
  for (double r : p_.rho_schedule) require(r > 0.0, "penalty weights must be positive");
  knot_len_ = p_.horizon / static_cast<double>(knots_);
  dt_ = p_.horizon / static_cast<double>(steps_);
  if (p_.kind == TargetKind::endpoint) {
    require(p_.z.size() == n_, "endpoint target must match the model's mode count");
    require(p_.radius >= 0.0, "target radius must be nonnegative");
    tol_ = 1e-4 * (1.0 + norm(p_.z));
  } else {
    require(p_.path_target.size() == steps_ + 1,
            "path target must hold one field per skeleton grid point (" + std::to_string(steps_ + 1) + ")");
    for (const auto& g : p_.path_target) require(g.size() == n_, "path target field has the wrong size");
    require(p_.path_tolerance > 0.0, "path tolerance must be positive");
    tol_ = p_.path_tolerance;
  }
  adjoint_ok_ = fbar_.has_jacobian() && model_.coeffs->sigma1_is_constant();
  // Closed-form fbar of the presets is linear, so with constant sigma1 the
  // only nonlinearity left is the Burgers term, which vanishes on span{e_1}.
  nonconvex_ = n_ >= 2 || !adjoint_ok_;
  switch (p_.gradient) {
    case GradientMode::automatic:
      mode_ = adjoint_ok_ ? GradientMode::adjoint : GradientMode::finite_difference;
      break;
    case GradientMode::adjoint:
      require(adjoint_ok_, "adjoint gradients need a closed-form fbar and constant sigma1");
      mode_ = GradientMode::adjoint;
      break;
    case GradientMode::finite_difference:
      mode_ = GradientMode::finite_difference;
      break;
  }
  rho_ = p_.rho_schedule.front();
  reset_multipliers();
}

void RateObjective::reset_multipliers() {
  if (p_.kind == TargetKind::path)
    mu_.assign((steps_ + 1) * n_, 0.0);
  else if (p_.radius > 0.0)
    mu_.assign(1, 0.0);
  else
    mu_.assign(n_, 0.0);
}

Control RateObjective::to_control(const std::vector<double>& theta) const {
  std::vector<double> v(theta.size());
  const double s = 1.0 / std::sqrt(knot_len_);
  for (std::size_t i = 0; i < theta.size(); ++i) v[i] = theta[i] * s;
  return Control(p_.horizon, knots_, nc_, std::move(v));
}

std::vector<double> RateObjective::from_control(const Control& u) const {
  std::vector<double> theta(dim_, 0.0), buf(std::max(u.n_modes(), nc_), 0.0);
  const double s = std::sqrt(knot_len_);
  for (std::size_t j = 0; j < knots_; ++j) {
    u.evaluate((static_cast<double>(j) + 0.5) * knot_len_ * u.horizon() / p_.horizon, buf);
    for (std::size_t i = 0; i < nc_; ++i) theta[j * nc_ + i] = s * buf[i];
  }
  return theta;
}

SkeletonPath RateObjective::solve(const std::vector<double>& theta) const {
  ++evals_;
  return solve_skeleton(p_.x, to_control(theta), fbar_, p_.horizon, steps_);
}

double RateObjective::energy(const std::vector<double>& theta) const {
  double s = 0.0;
  for (double t : theta) s += t * t;
  return 0.5 * s;
}

double RateObjective::residual(const SkeletonPath& path) const {
  if (p_.kind == TargetKind::endpoint) return std::max(0.0, norm(path.x.back() - p_.z) - p_.radius);
  double sup = 0.0;
  for (std::size_t s = 0; s < path.x.size(); ++s) sup = std::max(sup, norm(path.x[s] - p_.path_target[s]));
  return sup;
}

double RateObjective::penalty(const SkeletonPath& path, std::vector<std::vector<double>>* dx) const {
  if (dx) dx->assign(steps_ + 1, std::vector<double>(n_, 0.0));
  const SpectralField& xt = path.x.back();
  if (p_.kind == TargetKind::endpoint && p_.radius == 0.0) {
    double pen = 0.0;
    for (std::size_t i = 0; i < n_; ++i) {
      const double c = xt[i] - p_.z[i];
      pen += mu_[i] * c + 0.5 * rho_ * c * c;
      if (dx) (*dx)[steps_][i] = mu_[i] + rho_ * c;
    }
    return pen;
  }
  if (p_.kind == TargetKind::endpoint) {
    // c = |X_T - z| - r <= 0. Unsquared, so the multiplier step does not
    // shrink with r; it is smooth wherever it can be active (|X_T - z| = r > 0).
    const double d = norm(xt - p_.z);
    const double c = d - p_.radius;
    const double active = std::max(0.0, mu_[0] + rho_ * c);
    if (dx && d > 0.0)
      for (std::size_t i = 0; i < n_; ++i) (*dx)[steps_][i] = active * (xt[i] - p_.z[i]) / d;
    return (active * active - mu_[0] * mu_[0]) / (2.0 * rho_);
  }
  const double w = std::sqrt(dt_);
  double pen = 0.0;
  for (std::size_t s = 1; s <= steps_; ++s)
    for (std::size_t i = 0; i < n_; ++i) {
      const double c = w * (path.x[s][i] - p_.path_target[s][i]);
      const double m = mu_[s * n_ + i];
      pen += m * c + 0.5 * rho_ * c * c;
      if (dx) (*dx)[s][i] = w * (m + rho_ * c);
    }
  return pen;
}

void RateObjective::update_multipliers(const SkeletonPath& path) {
  const SpectralField& xt = path.x.back();
  if (p_.kind == TargetKind::endpoint && p_.radius == 0.0) {
    for (std::size_t i = 0; i < n_; ++i) mu_[i] += rho_ * (xt[i] - p_.z[i]);
  } else if (p_.kind == TargetKind::endpoint) {
    mu_[0] = std::max(0.0, mu_[0] + rho_ * (norm(xt - p_.z) - p_.radius));
  } else {
    const double w = std::sqrt(dt_);
    for (std::size_t s = 1; s <= steps_; ++s)
      for (std::size_t i = 0; i < n_; ++i)
        mu_[s * n_ + i] += rho_ * w * (path.x[s][i] - p_.path_target[s][i]);
  }
}

double RateObjective::value(const std::vector<double>& theta) const {
  return energy(theta) + penalty(solve(theta), nullptr);
}

std::vector<double> RateObjective::gradient_adjoint(const std::vector<double>& theta) const {
  require(adjoint_ok_, "adjoint gradients are not available for this model");
  const SkeletonPath path = solve(theta);
  std::vector<std::vector<double>> dx;
  penalty(path, &dx);

  std::vector<double> decay(n_), phi(n_), ctrl(n_);
  const double s1 = model_.coeffs->sigma1(p_.x.coeffs());
  const double inv_sqrt_h = 1.0 / std::sqrt(knot_len_);
  for (std::size_t i = 0; i < n_; ++i) {
    const double lam = eigenvalue(i + 1);
    decay[i] = std::exp(-lam * dt_);
    phi[i] = -std::expm1(-lam * dt_) / lam;
    ctrl[i] = s1 * std::sqrt(model_.noise.q1[i]) * inv_sqrt_h;
  }
  SpectralBasis basis(n_);
  const std::size_t per_knot = steps_ / knots_;
  std::vector<double> grad = theta;  // energy term
  std::vector<double> p = dx[steps_], w(n_), jb(n_), jf(n_);
  for (std::size_t s = steps_; s-- > 0;) {
    for (std::size_t i = 0; i < n_; ++i) w[i] = phi[i] * p[i];
    const std::size_t j = s / per_knot;
    for (std::size_t i = 0; i < nc_; ++i) grad[j * nc_ + i] += ctrl[i] * w[i];
    basis.burgers_jacobian_transpose(path.x[s].coeffs(), w, jb);
    fbar_.jacobian_transpose(path.x[s].coeffs(), w, jf);
    for (std::size_t i = 0; i < n_; ++i) p[i] = decay[i] * p[i] + jb[i] + jf[i] + dx[s][i];
  }
  return grad;
}

std::vector<double> RateObjective::gradient_fd(const std::vector<double>& theta) const {
  std::vector<double> grad(dim_), t = theta;
  for (std::size_t i = 0; i < dim_; ++i) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta[i]));
    t[i] = theta[i] + h;
    const double fp = value(t);
    t[i] = theta[i] - h;
    const double fm = value(t);
    t[i] = theta[i];
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

std::vector<double> RateObjective::gradient(const std::vector<double>& theta) const {
  return mode_ == GradientMode::adjoint ? gradient_adjoint(theta) : gradient_fd(theta);
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct InnerResult {
  std::size_t iterations = 0;
  double gradient_norm = 0.0;
};

// L-BFGS (memory 10) with Armijo backtracking.
InnerResult lbfgs(const RateObjective& obj, std::vector<double>& theta, std::size_t max_iter) {
  constexpr std::size_t memory = 10;
  const std::size_t dim = theta.size();
  std::deque<std::vector<double>> S, Y;
  std::deque<double> R;
  double f = obj.value(theta);
  std::vector<double> g = obj.gradient(theta), d(dim), alpha(memory);
  InnerResult res;
  for (; res.iterations < max_iter; ++res.iterations) {
    const double gn = std::sqrt(dot(g, g));
    res.gradient_norm = gn;
    if (gn <= 1e-10 * (1.0 + std::abs(f))) break;

    d = g;
    for (std::size_t k = S.size(); k-- > 0;) {
      alpha[k] = R[k] * dot(S[k], d);
      for (std::size_t i = 0; i < dim; ++i) d[i] -= alpha[k] * Y[k][i];
    }
    const double gamma = S.empty() ? 1.0 / std::max(1.0, gn) : dot(S.back(), Y.back()) / dot(Y.back(), Y.back());
    for (double& v : d) v *= gamma;
    for (std::size_t k = 0; k < S.size(); ++k) {
      const double beta = R[k] * dot(Y[k], d);
      for (std::size_t i = 0; i < dim; ++i) d[i] += S[k][i] * (alpha[k] - beta);
    }
    for (double& v : d) v = -v;
    double slope = dot(g, d);
    if (!(slope < 0.0)) {
      S.clear();
      Y.clear();
      R.clear();
      for (std::size_t i = 0; i < dim; ++i) d[i] = -g[i] / std::max(1.0, gn);
      slope = dot(g, d);
    }

    double t = 1.0, f_new = 0.0;
    std::vector<double> trial(dim);
    bool accepted = false;
    for (int bt = 0; bt < 50; ++bt) {
      for (std::size_t i = 0; i < dim; ++i) trial[i] = theta[i] + t * d[i];
      f_new = obj.value(trial);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) break;

    std::vector<double> g_new = obj.gradient(trial), s(dim), y(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      s[i] = trial[i] - theta[i];
      y[i] = g_new[i] - g[i];
    }
    const double sy = dot(s, y);
    if (sy > 1e-12 * std::sqrt(dot(s, s) * dot(y, y))) {
      if (S.size() == memory) {
        S.pop_front();
        Y.pop_front();
        R.pop_front();
      }
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      R.push_back(1.0 / sy);
    }
    const double f_old = f;
    theta = trial;
    f = f_new;
    g = std::move(g_new);
    if (std::abs(f_old - f) <= 1e-16 * std::max(1.0, std::abs(f))) {
      ++res.iterations;
      res.gradient_norm = std::sqrt(dot(g, g));
      break;
    }
  }
  return res;
}

struct StartOutcome {
  std::vector<double> theta;
  double value = 0.0;
  double residual = 0.0;
  bool converged = false;
  OptimizerTrace trace;
};

StartOutcome run_start(const RateProblem& problem, const AveragedDrift& fbar, std::vector<double> theta) {
  RateObjective obj(problem, fbar);
  StartOutcome out;
  std::size_t rho_idx = 0;
  double prev = std::numeric_limits<double>::infinity();
  double res = prev;
  for (std::size_t outer = 0; outer < problem.max_outer_iterations; ++outer) {
    const InnerResult inner = lbfgs(obj, theta, problem.max_inner_iterations);
    const SkeletonPath path = obj.solve(theta);
    res = obj.residual(path);
    out.trace.outer_iterations = outer + 1;
    out.trace.inner_iterations += inner.iterations;
    out.trace.gradient_norms.push_back(inner.gradient_norm);
    out.trace.residuals.push_back(res);
    out.trace.rho.push_back(obj.rho());
    // Iterate well past the flag threshold so the multipliers settle and the
    // energy is accurate, not just feasible.
    if (res <= 1e-3 * obj.tolerance()) break;
    obj.update_multipliers(path);
    if (res > 0.25 * prev && rho_idx + 1 < problem.rho_schedule.size()) obj.set_rho(problem.rho_schedule[++rho_idx]);
    prev = res;
  }
  out.residual = res;
  out.converged = res < obj.tolerance();
  out.value = obj.energy(theta);
  out.theta = std::move(theta);
  out.trace.objective_evaluations = obj.evaluations();
  return out;
}

}  // namespace

RateResult minimize_rate(const RateProblem& problem, const AveragedDrift& fbar) {
  const RateObjective probe(problem, fbar);
  const std::size_t starts = std::max<std::size_t>(1, problem.n_starts);
  std::vector<std::vector<double>> init(starts);
  init[0] = problem.warm_start ? probe.from_control(*problem.warm_start)
                               : std::vector<double>(probe.dimension(), 0.0);
  for (std::size_t s = 1; s < starts; ++s) {
    auto rng = make_stream({problem.seed, s}, StreamTag::multistart);
    std::normal_distribution<double> normal;
    const double scale = 1.0 / std::sqrt(static_cast<double>(probe.dimension()));
    init[s].resize(probe.dimension());
    for (double& v : init[s]) v = scale * normal(rng);
  }

  std::vector<StartOutcome> outcomes(starts);
  parallel_for(starts, problem.threads,
               [&](std::size_t s) { outcomes[s] = run_start(problem, fbar, init[s]); });

  std::size_t best = 0;
  std::size_t n_conv = 0;
  for (std::size_t s = 0; s < starts; ++s) {
    const auto& o = outcomes[s];
    if (o.converged) ++n_conv;
    const auto& b = outcomes[best];
    const bool better = o.converged != b.converged ? o.converged
                        : o.converged              ? o.value < b.value
                                                   : o.residual < b.residual;
    if (better) best = s;
  }

  const StartOutcome& win = outcomes[best];
  RateResult r;
  r.value = win.value;
  r.u_star = probe.to_control(win.theta);
  r.path = solve_skeleton(problem.x, r.u_star, fbar, problem.horizon, problem.steps());
  r.residual = win.residual;
  r.tolerance = probe.tolerance();
  r.converged = win.converged;
  r.upper_bound = probe.nonconvex();
  r.gradient = probe.mode();
  r.best_start = best;
  r.converged_starts = n_conv;
  r.trace = win.trace;
  r.trace.objective_evaluations = 0;
  for (const auto& o : outcomes) r.trace.objective_evaluations += o.trace.objective_evaluations;
  if (!r.converged)
    r.label = "not converged (best incumbent)";
  else
    r.label = r.upper_bound ? "certified upper bound" : "global minimum";
  return r;
}

std::vector<double> LqOracle::at(double t) const {
  std::vector<double> u(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) u[i] = c[i] * std::exp(-eigenvalue(i + 1) * (horizon - t));
  return u;
}

Control LqOracle::control(std::size_t n_knots) const {
  Control u(horizon, n_knots, c.size());
  const double h = u.knot_length();
  for (std::size_t j = 0; j < n_knots; ++j) {
    const double a = h * static_cast<double>(j), b = a + h;
    for (std::size_t i = 0; i < c.size(); ++i) {
      const double lam = eigenvalue(i + 1);
      u.knot(j)[i] = c[i] * (std::exp(-lam * (horizon - b)) - std::exp(-lam * (horizon - a))) / (lam * h);
    }
  }
  return u;
}

LqOracle lq_oracle(const SpectralField& x, const SpectralField& z, double horizon, const Model& model,
                   double radius) {
  const CoefficientSet& c = *model.coeffs;
  require(c.f_is_zero() && c.has_closed_form_fbar() && c.sigma1_is_constant(),
          "LQ oracle needs fbar = 0 and constant sigma1 (decoupled_small_noise)");
  require(model.n_modes() == 1, "LQ oracle needs N = 1: the Burgers term is active for N >= 2");
  require(x.size() == 1 && z.size() == 1, "LQ oracle fields must have one mode");
  require(horizon > 0.0, "LQ oracle needs a positive horizon");
  require(radius >= 0.0, "target radius must be nonnegative");
  const double s1 = c.sigma1(x.coeffs());
  LqOracle o;
  o.horizon = horizon;
  o.c.resize(1);
  const double lam = eigenvalue(1);
  const double free_end = std::exp(-lam * horizon) * x[0];
  const double gap = z[0] - free_end;
  const double d = std::copysign(std::max(0.0, std::abs(gap) - radius), gap);
  const double gain = s1 * std::sqrt(model.noise.q1[0]);
  const double G = -std::expm1(-2.0 * lam * horizon) / (2.0 * lam);
  if (gain == 0.0) {
    if (d != 0.0) fail(ErrorCategory::precondition, "target unreachable: sigma1 sqrt(q1) vanishes on mode 1");
    return o;
  }
  o.c[0] = d / (gain * G);
  o.value = 0.5 * d * d / (gain * gain * G);
  return o;
}

}  // namespace sfb
