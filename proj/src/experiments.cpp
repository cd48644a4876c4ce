#include "sfb/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "sfb/errors.hpp"
#include "sfb/frozen.hpp"
#include "sfb/integrator.hpp"
#include "sfb/parallel.hpp"
#include "sfb/ratefn.hpp"
#include "sfb/simd/kernels.hpp"
#include "sfb/skeleton.hpp"
#include "sfb/stats.hpp"

namespace sfb {

using nlohmann::json;

std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::averaging: return "averaging";
    case Protocol::khasminskii_scaling: return "khasminskii_scaling";
    case Protocol::auxiliary_error: return "auxiliary_error";
    case Protocol::controlled_convergence: return "controlled_convergence";
    case Protocol::ldp_tail: return "ldp_tail";
  }
  return "unknown";
}

Protocol parse_protocol(std::string_view name) {
  for (Protocol p : {Protocol::averaging, Protocol::khasminskii_scaling, Protocol::auxiliary_error,
                     Protocol::controlled_convergence, Protocol::ldp_tail})
    if (protocol_name(p) == name) return p;
  fail(ErrorCategory::usage, "unknown protocol '" + std::string(name) +
                                 "' (averaging, khasminskii_scaling, auxiliary_error, "
                                 "controlled_convergence, ldp_tail)");
}

// ---------------------------------------------------------------- plans

namespace {

std::vector<double> padded(std::vector<double> v, std::size_t n) {
  v.resize(n, 0.0);
  return v;
}

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

}  // namespace

ExperimentPlan resolve_plan(ExperimentPlan p) {
  const bool tail = p.protocol == Protocol::ldp_tail;
  if (p.ensemble == 0) p.ensemble = tail ? 2000 : 200;
  if (p.x0.empty()) {
    p.x0.assign(p.n_modes, 0.0);
    if (!tail && p.n_modes > 0) p.x0[0] = 1.0;
  }
  if (p.y0.empty()) p.y0.assign(p.n_modes, 0.0);
  p.x0 = padded(p.x0, std::max(p.x0.size(), p.n_modes));
  p.y0 = padded(p.y0, std::max(p.y0.size(), p.n_modes));
  if (p.protocol == Protocol::khasminskii_scaling) {
    if (p.blocks.empty())
      for (int e = 4; e <= 9; ++e) p.blocks.push_back(std::ldexp(1.0, -e));
    if (!p.guard_radius) p.guard_radius = 10.0 * (1.0 + l2(p.x0) + l2(p.y0));
  }
  if (p.protocol == Protocol::controlled_convergence && p.control.empty())
    p.control = {2.0 / std::sqrt(p.horizon)};
  if (tail && p.target.empty()) p.target = {0.45};
  return p;
}

void validate_plan(const ExperimentPlan& p) {
  require(p.n_modes >= 1, "n_modes must be positive");
  require(!p.epsilons.empty(), "epsilon schedule is empty");
  for (std::size_t i = 0; i < p.epsilons.size(); ++i) {
    const double e = p.epsilons[i];
    require(e > 0.0 && e <= 1.0, "epsilon must lie in (0, 1], got " + std::to_string(e));
    require(i == 0 || e < p.epsilons[i - 1], "epsilon schedule must be strictly decreasing");
  }
  require(p.delta_exponent > 1.0, "delta exponent p must exceed 1 so that delta/eps -> 0");
  require(p.ensemble >= 2, "ensemble needs at least two paths");
  require(p.horizon > 0.0 && std::isfinite(p.horizon), "horizon must be positive");
  require(p.n_steps >= 1, "n_steps must be positive");
  auto fits = [&](const std::vector<double>& v, const char* what) {
    if (v.size() > p.n_modes)
      fail(ErrorCategory::invalid_field, std::string(what) + " has more modes than n_modes");
    for (double a : v)
      if (!std::isfinite(a)) fail(ErrorCategory::invalid_field, std::string(what) + " is not finite");
  };
  fits(p.x0, "x0");
  fits(p.y0, "y0");
  fits(p.control, "control");
  fits(p.target, "target");
  if (p.guard_radius) require(*p.guard_radius > 0.0, "guard radius must be positive");
  const double dt = p.horizon / static_cast<double>(p.n_steps);
  for (double b : p.blocks)
    require(b >= dt * (1.0 - 1e-12) && b <= p.horizon,
            "block " + std::to_string(b) + " must lie in [dt, T]");
  require(p.radius >= 0.0, "ball radius must be nonnegative");
  require(p.fbar_horizon > 0.0 && p.fbar_dt > 0.0, "fbar budget must be positive");
  if (p.protocol == Protocol::ldp_tail) {
    require(p.rate_knots >= 2, "rate_knots must be at least 2");
    require(p.n_steps % p.rate_knots == 0, "n_steps must be a multiple of rate_knots");
  }
}

json plan_to_json(const ExperimentPlan& p) {
  json j;
  j["protocol"] = protocol_name(p.protocol);
  j["preset"] = preset_name(p.preset);
  json params = json::object();
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) params[k] = *v;
  };
  put("kappa", p.params.kappa);
  put("sigma1", p.params.sigma1);
  put("sigma2", p.params.sigma2);
  put("f_y", p.params.f_y);
  put("f_x", p.params.f_x);
  put("g_y", p.params.g_y);
  put("g_x", p.params.g_x);
  put("noise_decay", p.params.noise_decay);
  j["params"] = params;
  j["n_modes"] = p.n_modes;
  j["epsilons"] = p.epsilons;
  j["delta_exponent"] = p.delta_exponent;
  j["ensemble"] = p.ensemble;
  j["seed"] = p.seed;
  j["horizon"] = p.horizon;
  j["n_steps"] = p.n_steps;
  j["x0"] = p.x0;
  j["y0"] = p.y0;
  j["guard_radius"] = p.guard_radius ? json(*p.guard_radius) : json(nullptr);
  j["blocks"] = p.blocks;
  j["control"] = p.control;
  j["target"] = p.target;
  j["radius"] = p.radius;
  j["rate_knots"] = p.rate_knots;
  j["fbar_horizon"] = p.fbar_horizon;
  j["fbar_dt"] = p.fbar_dt;
  j["allow_a3_violation"] = p.allow_a3_violation;
  return j;
}

namespace {

[[noreturn]] void bad_field(const std::string& path, const std::string& what) {
  fail(ErrorCategory::usage, "config field '" + path + "': " + what);
}

double read_double(const json& v, const std::string& path) {
  if (!v.is_number()) bad_field(path, "expected a number");
  return v.get<double>();
}

std::uint64_t read_uint(const json& v, const std::string& path) {
  if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0))) bad_field(path, "expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

bool read_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) bad_field(path, "expected true or false");
  return v.get<bool>();
}

std::string read_string(const json& v, const std::string& path) {
  if (!v.is_string()) bad_field(path, "expected a string");
  return v.get<std::string>();
}

std::vector<double> read_doubles(const json& v, const std::string& path) {
  if (!v.is_array()) bad_field(path, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out.push_back(read_double(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

}  // namespace

ExperimentPlan plan_from_json(const json& j, ExperimentPlan p, const std::string& prefix) {
  if (!j.is_object()) bad_field(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, v] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (key == "protocol") {
      try {
        p.protocol = parse_protocol(read_string(v, path));
      } catch (const Error& e) {
        bad_field(path, e.what());
      }
    } else if (key == "preset") {
      try {
        p.preset = parse_preset(read_string(v, path));
      } catch (const Error& e) {
        bad_field(path, e.what());
      }
    } else if (key == "params") {
      if (!v.is_object()) bad_field(path, "expected an object");
      for (const auto& [pk, pv] : v.items()) {
        const std::string pp = path + "." + pk;
        const double d = read_double(pv, pp);
        if (pk == "kappa") p.params.kappa = d;
        else if (pk == "sigma1") p.params.sigma1 = d;
        else if (pk == "sigma2") p.params.sigma2 = d;
        else if (pk == "f_y") p.params.f_y = d;
        else if (pk == "f_x") p.params.f_x = d;
        else if (pk == "g_y") p.params.g_y = d;
        else if (pk == "g_x") p.params.g_x = d;
        else if (pk == "noise_decay") p.params.noise_decay = d;
        else bad_field(pp, "unknown parameter");
      }
    } else if (key == "n_modes") {
      p.n_modes = read_uint(v, path);
    } else if (key == "epsilons") {
      p.epsilons = read_doubles(v, path);
    } else if (key == "delta_exponent") {
      p.delta_exponent = read_double(v, path);
    } else if (key == "ensemble") {
      p.ensemble = read_uint(v, path);
    } else if (key == "seed") {
      p.seed = read_uint(v, path);
    } else if (key == "horizon") {
      p.horizon = read_double(v, path);
    } else if (key == "n_steps") {
      p.n_steps = read_uint(v, path);
    } else if (key == "x0") {
      p.x0 = read_doubles(v, path);
    } else if (key == "y0") {
      p.y0 = read_doubles(v, path);
    } else if (key == "guard_radius") {
      if (v.is_null()) p.guard_radius.reset();
      else p.guard_radius = read_double(v, path);
    } else if (key == "blocks") {
      p.blocks = read_doubles(v, path);
    } else if (key == "control") {
      p.control = read_doubles(v, path);
    } else if (key == "target") {
      p.target = read_doubles(v, path);
    } else if (key == "radius") {
      p.radius = read_double(v, path);
    } else if (key == "rate_knots") {
      p.rate_knots = read_uint(v, path);
    } else if (key == "fbar_horizon") {
      p.fbar_horizon = read_double(v, path);
    } else if (key == "fbar_dt") {
      p.fbar_dt = read_double(v, path);
    } else if (key == "allow_a3_violation") {
      p.allow_a3_violation = read_bool(v, path);
    } else if (key == "threads") {
      p.threads = read_uint(v, path);
    } else if (key == "output_dir") {
      p.output_dir = read_string(v, path);
    } else {
      bad_field(path, "unknown key");
    }
  }
  return p;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string plan_hash(const ExperimentPlan& plan) { return fnv1a_hex(plan_to_json(plan).dump()); }

// ---------------------------------------------------------------- records

bool RunRecord::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

const Statistic* RunRecord::find(std::string_view name, double epsilon) const {
  for (const auto& s : statistics)
    if (s.name == name && s.epsilon == epsilon) return &s;
  return nullptr;
}

std::vector<const Statistic*> RunRecord::series(std::string_view name) const {
  std::vector<const Statistic*> out;
  for (const auto& s : statistics)
    if (s.name == name) out.push_back(&s);
  return out;
}

// ---------------------------------------------------------------- protocols

namespace {

struct Setup {
  ExperimentPlan plan;
  Model model;
  SpectralField x0, y0;
};

Setup prepare(const ExperimentPlan& in, Protocol protocol) {
  ExperimentPlan plan = in;
  plan.protocol = protocol;
  plan = resolve_plan(plan);
  validate_plan(plan);
  Model model = preset(plan.preset, plan.n_modes, plan.params);
  const auto d = model.declared();
  const auto a3 = check_a3(d.L_g, d.L_sigma2);
  if (!a3.holds && !plan.allow_a3_violation)
    fail(ErrorCategory::condition_violation,
         "dissipativity condition fails (lhs " + std::to_string(a3.lhs) +
             " >= 1); set allow_a3_violation to run anyway");
  Setup s{plan, std::move(model), SpectralField(padded(plan.x0, plan.n_modes)),
          SpectralField(padded(plan.y0, plan.n_modes))};
  return s;
}

RunRecord new_record(const Setup& s) {
  RunRecord r;
  r.protocol = std::string(protocol_name(s.plan.protocol));
  r.plan_hash = plan_hash(s.plan);
  r.plan = plan_to_json(s.plan);
  r.manifest.seed = s.plan.seed;
  r.manifest.horizon = s.plan.horizon;
  r.manifest.n_steps = s.plan.n_steps;
  r.manifest.n_modes = s.plan.n_modes;
  r.manifest.simd = std::string(simd::active().name);
  return r;
}

// Trajectory i of sweep point k; `variant` separates estimators that must not
// share noise (raw vs tilted sampling).
StreamKey path_key(const ExperimentPlan& p, std::size_t k, std::size_t variant, std::size_t i) {
  return {p.seed, (static_cast<std::uint64_t>(k) << 40) | (static_cast<std::uint64_t>(variant) << 32) |
                      static_cast<std::uint64_t>(i)};
}

AveragedDrift make_fbar(const Setup& s) {
  FbarBudget b;
  b.dt = s.plan.fbar_dt;
  b.horizon = s.plan.fbar_horizon;
  b.seed = {s.plan.seed, 0xfba5};
  return AveragedDrift(s.model, b);
}

double sup_distance(const std::vector<SpectralField>& a, const std::vector<SpectralField>& b,
                    std::size_t count) {
  double m = 0.0;
  for (std::size_t n = 0; n < count; ++n) m = std::max(m, norm(a[n] - b[n]));
  return m;
}

void report(const Progress& progress, const std::string& line) {
  if (progress) progress(line);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

Statistic make_stat(const ScaleParams& sc, std::string name, const MeanEstimate& e,
                    std::optional<double> block = std::nullopt) {
  return {sc.epsilon, sc.delta, block, std::move(name), e.mean, e.stderr_, e.n};
}

// Each step along the schedule may not rise by more than two combined
// standard errors.
Check decreasing(const RunRecord& r, const std::string& stat) {
  const auto s = r.series(stat);
  Check c{stat + "_decreasing", true, ""};
  bool strict = true;
  std::ostringstream d;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) {
    const double bar = 2.0 * std::hypot(s[i]->stderr_, s[i + 1]->stderr_);
    if (s[i + 1]->mean >= s[i]->mean + bar) c.passed = false;
    if (s[i + 1]->mean >= s[i]->mean) strict = false;
  }
  d << "means";
  for (const auto* x : s) d << ' ' << fmt(x->mean) << "+-" << fmt(x->stderr_);
  d << (strict ? "; point estimates strictly decreasing" : "; point estimates not strictly decreasing");
  c.detail = d.str();
  return c;
}

// Fraction of stopped paths, recorded per sweep point; more than half is a
// failed check advising a larger guard.
void record_stops(RunRecord& r, const ScaleParams& sc, const std::vector<char>& stopped,
                  const std::optional<double>& guard, Check& guard_check) {
  if (!guard) return;
  const double n = static_cast<double>(stopped.size());
  const double frac = static_cast<double>(std::count(stopped.begin(), stopped.end(), 1)) / n;
  r.statistics.push_back({sc.epsilon, sc.delta, std::nullopt, "stopped_fraction", frac,
                          std::sqrt(frac * (1.0 - frac) / n), stopped.size()});
  if (frac > 0.5) {
    guard_check.passed = false;
    guard_check.detail = "guard radius " + fmt(*guard) + " stops " + fmt(100.0 * frac) +
                         "% of paths at eps=" + fmt(sc.epsilon) + "; increase guard_radius";
  }
}

void aux_sweep(RunRecord& r, const Setup& s, Check& guard_check, const Progress& progress) {
  const auto& p = s.plan;
  const Control zero(p.horizon, 1, p.n_modes);
  for (std::size_t k = 0; k < p.epsilons.size(); ++k) {
    const auto sc = ScaleParams::from_exponent(p.epsilons[k], p.delta_exponent);
    const auto grid = TimeGrid::make(p.horizon, p.n_steps, sc);
    std::vector<double> gap(p.ensemble);
    std::vector<char> stopped(p.ensemble, 0);
    parallel_for(p.ensemble, p.threads, [&](std::size_t i) {
      const auto a = simulate_auxiliary(s.x0, s.y0, s.model, sc, grid, zero, path_key(p, k, 1, i),
                                        p.guard_radius);
      gap[i] = a.y_gap_integral;
      stopped[i] = a.controlled.stopped();
    });
    const auto e = mean_estimate(gap);
    r.statistics.push_back(make_stat(sc, "aux_y_gap", e, grid.block()));
    record_stops(r, sc, stopped, p.guard_radius, guard_check);
    report(progress, "eps=" + fmt(sc.epsilon) + " E int|Y-Yhat|^2 = " + fmt(e.mean) + " +- " +
                         fmt(e.stderr_));
  }
  if (p.epsilons.size() >= 2) r.checks.push_back(decreasing(r, "aux_y_gap"));
}

}  // namespace

RunRecord run_averaging(const ExperimentPlan& in, const Progress& progress) {
  const Setup s = prepare(in, Protocol::averaging);
  const auto& p = s.plan;
  RunRecord r = new_record(s);
  const AveragedDrift fbar = make_fbar(s);
  const auto bar = solve_skeleton(s.x0, Control(p.horizon, 1, p.n_modes), fbar, p.horizon, p.n_steps);
  Check guard_check{"guard_truncation", true, "at most half of the paths stopped"};
  for (std::size_t k = 0; k < p.epsilons.size(); ++k) {
    const auto sc = ScaleParams::from_exponent(p.epsilons[k], p.delta_exponent);
    const auto grid = TimeGrid::make(p.horizon, p.n_steps, sc);
    std::vector<double> gap(p.ensemble);
    std::vector<char> stopped(p.ensemble, 0);
    parallel_for(p.ensemble, p.threads, [&](std::size_t i) {
      const auto tr = simulate_pair(s.x0, s.y0, s.model, sc, grid, path_key(p, k, 0, i),
                                    p.guard_radius);
      gap[i] = sup_distance(tr.x, bar.x, tr.usable_points());
      stopped[i] = tr.stopped();
    });
    const auto e = mean_estimate(gap);
    r.statistics.push_back(make_stat(sc, "sup_gap", e));
    record_stops(r, sc, stopped, p.guard_radius, guard_check);
    report(progress, "eps=" + fmt(sc.epsilon) + " E sup|X - Xbar| = " + fmt(e.mean) + " +- " +
                         fmt(e.stderr_));
  }
  r.checks.push_back(decreasing(r, "sup_gap"));
  if (p.guard_radius) r.checks.push_back(guard_check);
  return r;
}

RunRecord run_khasminskii(const ExperimentPlan& in, const Progress& progress) {
  const Setup s = prepare(in, Protocol::khasminskii_scaling);
  const auto& p = s.plan;
  RunRecord r = new_record(s);
  Check guard_check{"guard_truncation", true, "at most half of the paths stopped"};

  // Block sweep at the first (largest) epsilon: one ensemble, every block
  // length read off the same paths.
  const auto sc = ScaleParams::from_exponent(p.epsilons.front(), p.delta_exponent);
  const auto grid = TimeGrid::make(p.horizon, p.n_steps, sc);
  const double dt = grid.dt();
  std::vector<std::size_t> steps;
  for (double b : p.blocks)
    steps.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(b / dt))));
  std::vector<std::vector<double>> inc(steps.size(), std::vector<double>(p.ensemble));
  std::vector<char> stopped(p.ensemble, 0);
  parallel_for(p.ensemble, p.threads, [&](std::size_t i) {
    const auto tr = simulate_pair(s.x0, s.y0, s.model, sc, grid, path_key(p, 0, 0, i), p.guard_radius);
    stopped[i] = tr.stopped();
    const std::size_t usable = tr.usable_points();
    for (std::size_t j = 0; j < steps.size(); ++j) {
      double acc = 0.0;
      for (std::size_t n = 0; n + 1 < usable; ++n) {
        const double d = norm(tr.x[n] - tr.x[(n / steps[j]) * steps[j]]);
        acc += dt * d * d;
      }
      inc[j][i] = acc;
    }
  });
  record_stops(r, sc, stopped, p.guard_radius, guard_check);
  std::vector<double> lx, ly;
  for (std::size_t j = 0; j < steps.size(); ++j) {
    const double block = dt * static_cast<double>(steps[j]);
    const auto e = mean_estimate(inc[j]);
    r.statistics.push_back(make_stat(sc, "x_block_increment", e, block));
    report(progress, "Delta=" + fmt(block) + " E int|X_t - X_t(Delta)|^2 = " + fmt(e.mean) +
                         " +- " + fmt(e.stderr_));
    if (e.mean > 0.0) {
      lx.push_back(std::log(block));
      ly.push_back(std::log(e.mean));
    }
  }
  if (lx.size() >= 3) {
    const auto f = linear_fit(lx, ly);
    r.fits.push_back({"x_block_increment_vs_block", f.slope, f.intercept, f.slope_stderr, f.ci_low,
                      f.ci_high, f.r2, f.n});
    r.checks.push_back({"block_exponent_in_range", f.slope >= 0.4 && f.slope <= 0.8,
                        "fitted exponent " + fmt(f.slope) + " (95% CI " + fmt(f.ci_low) + ", " +
                            fmt(f.ci_high) + "), expected in [0.4, 0.8]"});
  } else {
    r.checks.push_back({"block_exponent_in_range", false, "fewer than three positive block points"});
  }

  aux_sweep(r, s, guard_check, progress);
  r.checks.push_back(guard_check);
  if (!guard_check.passed) r.flags.push_back(guard_check.detail);
  return r;
}

RunRecord run_auxiliary_error(const ExperimentPlan& in, const Progress& progress) {
  const Setup s = prepare(in, Protocol::auxiliary_error);
  RunRecord r = new_record(s);
  Check guard_check{"guard_truncation", true, "at most half of the paths stopped"};
  aux_sweep(r, s, guard_check, progress);
  if (s.plan.guard_radius) r.checks.push_back(guard_check);
  return r;
}

RunRecord run_controlled_convergence(const ExperimentPlan& in, const Progress& progress) {
  const Setup s = prepare(in, Protocol::controlled_convergence);
  const auto& p = s.plan;
  RunRecord r = new_record(s);
  const Control u = Control::constant(p.horizon, 1, SpectralField(padded(p.control, p.n_modes)));
  r.values["control_energy"] = u.energy();
  const AveragedDrift fbar = make_fbar(s);
  const auto bar = solve_skeleton(s.x0, u, fbar, p.horizon, p.n_steps);
  Check guard_check{"guard_truncation", true, "at most half of the paths stopped"};
  for (std::size_t k = 0; k < p.epsilons.size(); ++k) {
    const auto sc = ScaleParams::from_exponent(p.epsilons[k], p.delta_exponent);
    const auto grid = TimeGrid::make(p.horizon, p.n_steps, sc);
    std::vector<double> a_gap(p.ensemble), b_gap(p.ensemble);
    std::vector<char> stopped(p.ensemble, 0);
    parallel_for(p.ensemble, p.threads, [&](std::size_t i) {
      const auto a = simulate_auxiliary(s.x0, s.y0, s.model, sc, grid, u, path_key(p, k, 0, i),
                                        p.guard_radius);
      const std::size_t usable = a.controlled.usable_points();
      a_gap[i] = sup_distance(a.controlled.x, a.x_hat, usable);
      b_gap[i] = sup_distance(a.x_hat, bar.x, usable);
      stopped[i] = a.controlled.stopped();
    });
    const auto ma = median_estimate(a_gap), mb = median_estimate(b_gap);
    r.statistics.push_back(make_stat(sc, "median_sup_x_minus_xhat", ma));
    r.statistics.push_back(make_stat(sc, "median_sup_xhat_minus_xbar", mb));
    r.statistics.push_back(make_stat(sc, "mean_sup_x_minus_xhat", mean_estimate(a_gap)));
    r.statistics.push_back(make_stat(sc, "mean_sup_xhat_minus_xbar", mean_estimate(b_gap)));
    record_stops(r, sc, stopped, p.guard_radius, guard_check);
    report(progress, "eps=" + fmt(sc.epsilon) + " median sup|X^u - Xhat| = " + fmt(ma.mean) +
                         ", median sup|Xhat - Xbar^u| = " + fmt(mb.mean));
  }
  r.checks.push_back(decreasing(r, "median_sup_x_minus_xhat"));
  r.checks.push_back(decreasing(r, "median_sup_xhat_minus_xbar"));
  if (p.guard_radius) r.checks.push_back(guard_check);
  return r;
}

namespace {

// P(|X_T - z| <= r) for the single-mode linear flow with additive noise, on
// the slow scheme's own discrete law: X_T ~ N(e^{-lambda T} x, eps s^2 q dt
// sum_{m=1}^{n} e^{-2 lambda m dt}).
double exact_tail_probability(const Setup& s, double eps) {
  const auto& p = s.plan;
  const double lambda = eigenvalue(1);
  const double dt = p.horizon / static_cast<double>(p.n_steps);
  const double sig = s.model.coeffs->sigma1(s.x0.coeffs());
  const double q = s.model.noise.q1[0];
  double sum = 0.0;
  for (std::size_t m = 1; m <= p.n_steps; ++m)
    sum += std::exp(-2.0 * lambda * dt * static_cast<double>(m));
  const double sd = std::sqrt(eps * sig * sig * q * dt * sum);
  const double mean = std::exp(-lambda * p.horizon) * s.x0[0];
  const double z = p.target[0];
  // Upper minus lower tail, each through erfc to keep relative accuracy.
  auto upper = [&](double a) { return 0.5 * std::erfc((a - mean) / (sd * std::sqrt(2.0))); };
  return upper(z - p.radius) - upper(z + p.radius);
}

}  // namespace

RunRecord run_ldp_tail(const ExperimentPlan& in, const Progress& progress) {
  const Setup s = prepare(in, Protocol::ldp_tail);
  const auto& p = s.plan;
  RunRecord r = new_record(s);
  const SpectralField z(padded(p.target, p.n_modes));
  const AveragedDrift fbar = make_fbar(s);

  RateProblem rp;
  rp.x = s.x0;
  rp.horizon = p.horizon;
  rp.kind = TargetKind::endpoint;
  rp.z = z;
  rp.radius = p.radius;
  rp.n_knots = p.rate_knots;
  rp.n_steps = p.n_steps;
  rp.seed = p.seed;
  rp.threads = p.threads;
  report(progress, "minimizing the rate function over the ball");
  const RateResult rate = minimize_rate(rp, fbar);
  const double I = rate.value;
  r.values["rate_value"] = I;
  r.values["rate_residual"] = rate.residual;
  r.checks.push_back({"rate_converged", rate.converged, rate.label});
  const bool linear = s.model.coeffs->f_is_zero() && s.model.coeffs->sigma1_is_constant() &&
                      p.n_modes == 1;
  if (linear) r.values["lq_oracle_value"] = lq_oracle(s.x0, z, p.horizon, s.model, p.radius).value;
  report(progress, "I* = " + fmt(I) + " (" + rate.label + ")");

  auto hit = [&](const TrajectoryPair& tr) {
    return !tr.stopped() && norm(tr.x.back() - z) <= p.radius;
  };
  const double n = static_cast<double>(p.ensemble);
  for (std::size_t k = 0; k < p.epsilons.size(); ++k) {
    const double eps = p.epsilons[k];
    const auto sc = ScaleParams::from_exponent(eps, p.delta_exponent);
    const auto grid = TimeGrid::make(p.horizon, p.n_steps, sc);
    std::vector<double> raw(p.ensemble), tilted(p.ensemble);
    parallel_for(p.ensemble, p.threads, [&](std::size_t i) {
      const auto a = simulate_pair(s.x0, s.y0, s.model, sc, grid, path_key(p, k, 0, i), p.guard_radius);
      raw[i] = hit(a) ? 1.0 : 0.0;
      // W shifted by u* / sqrt(eps), weighted back to the untilted law.
      const auto b = simulate_tilted(s.x0, s.y0, s.model, sc, grid, rate.u_star,
                                         path_key(p, k, 1, i), p.guard_radius);
      if (hit(b))
        tilted[i] = std::exp(-b.control_noise_integral / std::sqrt(eps) - b.control_energy / (2.0 * eps));
    });
    const double hits = std::accumulate(raw.begin(), raw.end(), 0.0);
    const double pr = hits / n;
    const MeanEstimate er{pr, std::sqrt(pr * (1.0 - pr) / n), p.ensemble};
    const auto et = mean_estimate(tilted);
    r.statistics.push_back(make_stat(sc, "hit_probability_raw", er));
    r.statistics.push_back(make_stat(sc, "hit_probability_tilted", et));
    if (hits > 0)
      r.statistics.push_back(make_stat(sc, "neg_eps_log_p_raw",
                                       {-eps * std::log(pr), eps * er.stderr_ / pr, p.ensemble}));
    else
      r.flags.push_back("raw estimate degenerate at eps=" + fmt(eps) + "; tilted estimate used");
    if (et.mean > 0.0)
      r.statistics.push_back(make_stat(sc, "neg_eps_log_p_tilted",
                                       {-eps * std::log(et.mean), eps * et.stderr_ / et.mean, p.ensemble}));
    if (hits >= 100) {
      const double bar = 3.0 * std::hypot(er.stderr_, et.stderr_);
      r.checks.push_back({"raw_tilted_agree_eps_" + fmt(eps), std::abs(pr - et.mean) <= bar,
                          "raw " + fmt(pr) + ", tilted " + fmt(et.mean) + ", 3 SE " + fmt(bar)});
    }
    std::string line = "eps=" + fmt(eps) + " hits " + fmt(hits) + "/" + fmt(n) + ", tilted P = " +
                       fmt(et.mean) + " +- " + fmt(et.stderr_);
    if (linear) {
      const double pe = exact_tail_probability(s, eps);
      r.statistics.push_back(make_stat(sc, "hit_probability_exact", {pe, 0.0, 0}));
      if (pe > 0.0) r.statistics.push_back(make_stat(sc, "neg_eps_log_p_exact", {-eps * std::log(pe), 0.0, 0}));
      const double bar = 3.0 * et.stderr_;
      r.checks.push_back({"tilted_matches_exact_tail_eps_" + fmt(eps), std::abs(et.mean - pe) <= bar,
                          "tilted " + fmt(et.mean) + ", exact " + fmt(pe) + ", 3 SE " + fmt(bar)});
      line += ", exact " + fmt(pe);
    }
    report(progress, line);
  }
  const auto* last = r.find("neg_eps_log_p_tilted", p.epsilons.back());
  if (last && I > 0.0) {
    const double rel = std::abs(last->mean - I) / I;
    r.checks.push_back({"tail_within_30pct_of_rate", rel <= 0.3,
                        "-eps log P = " + fmt(last->mean) + " at eps=" + fmt(p.epsilons.back()) +
                            ", I* = " + fmt(I) + ", relative gap " + fmt(rel)});
  } else if (I > 0.0) {
    r.checks.push_back({"tail_within_30pct_of_rate", false, "no tilted hits at the smallest eps"});
  }
  return r;
}

RunRecord run_experiment(const ExperimentPlan& plan, const Progress& progress) {
  switch (plan.protocol) {
    case Protocol::averaging: return run_averaging(plan, progress);
    case Protocol::khasminskii_scaling: return run_khasminskii(plan, progress);
    case Protocol::auxiliary_error: return run_auxiliary_error(plan, progress);
    case Protocol::controlled_convergence: return run_controlled_convergence(plan, progress);
    case Protocol::ldp_tail: return run_ldp_tail(plan, progress);
  }
  fail(ErrorCategory::usage, "unknown protocol");
}

// ---------------------------------------------------------------- persistence

json record_to_json(const RunRecord& r) {
  json j;
  j["format"] = record_format;
  j["version"] = r.version;
  j["protocol"] = r.protocol;
  j["plan_hash"] = r.plan_hash;
  j["plan"] = r.plan;
  j["manifest"] = {{"software", r.manifest.software}, {"seed", r.manifest.seed},
                   {"horizon", r.manifest.horizon},   {"n_steps", r.manifest.n_steps},
                   {"n_modes", r.manifest.n_modes},   {"simd", r.manifest.simd}};
  json stats = json::array();
  for (const auto& s : r.statistics)
    stats.push_back({{"epsilon", s.epsilon},
                     {"delta", s.delta},
                     {"block", s.block ? json(*s.block) : json(nullptr)},
                     {"statistic", s.name},
                     {"mean", s.mean},
                     {"stderr", s.stderr_},
                     {"n", s.n}});
  j["statistics"] = stats;
  json fits = json::array();
  for (const auto& f : r.fits)
    fits.push_back({{"name", f.name},     {"slope", f.slope},     {"intercept", f.intercept},
                    {"stderr", f.stderr_}, {"ci_low", f.ci_low},   {"ci_high", f.ci_high},
                    {"r2", f.r2},          {"n", f.n}});
  j["fits"] = fits;
  j["values"] = r.values;
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  j["checks"] = checks;
  j["flags"] = r.flags;
  j["passed"] = r.passed();
  return j;
}

namespace {

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key))
    fail(ErrorCategory::format, "record is missing field '" + path + key + "'");
  return j.at(key);
}

template <class T>
T as(const json& j, const std::string& key, const std::string& path) {
  const json& v = field(j, key, path);
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    fail(ErrorCategory::format, "record field '" + path + key + "' has the wrong type");
  }
}

}  // namespace

RunRecord record_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCategory::format, "record is not a JSON object");
  if (as<std::string>(j, "format", "") != record_format)
    fail(ErrorCategory::format, "not a run record (format field is not '" + std::string(record_format) + "')");
  const int version = as<int>(j, "version", "");
  if (version != record_version)
    fail(ErrorCategory::version_mismatch,
         "record version " + std::to_string(version) + " cannot be read by this build (version " +
             std::to_string(record_version) + "); migrate the record or rerun its plan");
  RunRecord r;
  r.version = version;
  r.protocol = as<std::string>(j, "protocol", "");
  r.plan_hash = as<std::string>(j, "plan_hash", "");
  r.plan = field(j, "plan", "");
  const json& m = field(j, "manifest", "");
  r.manifest.software = as<std::string>(m, "software", "manifest.");
  r.manifest.seed = as<std::uint64_t>(m, "seed", "manifest.");
  r.manifest.horizon = as<double>(m, "horizon", "manifest.");
  r.manifest.n_steps = as<std::size_t>(m, "n_steps", "manifest.");
  r.manifest.n_modes = as<std::size_t>(m, "n_modes", "manifest.");
  r.manifest.simd = as<std::string>(m, "simd", "manifest.");
  const json& stats = field(j, "statistics", "");
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const std::string path = "statistics[" + std::to_string(i) + "].";
    const json& s = stats[i];
    Statistic st;
    st.epsilon = as<double>(s, "epsilon", path);
    st.delta = as<double>(s, "delta", path);
    if (!field(s, "block", path).is_null()) st.block = as<double>(s, "block", path);
    st.name = as<std::string>(s, "statistic", path);
    st.mean = as<double>(s, "mean", path);
    st.stderr_ = as<double>(s, "stderr", path);
    st.n = as<std::size_t>(s, "n", path);
    r.statistics.push_back(st);
  }
  const json& fits = field(j, "fits", "");
  for (std::size_t i = 0; i < fits.size(); ++i) {
    const std::string path = "fits[" + std::to_string(i) + "].";
    const json& f = fits[i];
    r.fits.push_back({as<std::string>(f, "name", path), as<double>(f, "slope", path),
                      as<double>(f, "intercept", path), as<double>(f, "stderr", path),
                      as<double>(f, "ci_low", path), as<double>(f, "ci_high", path),
                      as<double>(f, "r2", path), as<std::size_t>(f, "n", path)});
  }
  r.values = as<std::map<std::string, double>>(j, "values", "");
  const json& checks = field(j, "checks", "");
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const std::string path = "checks[" + std::to_string(i) + "].";
    r.checks.push_back({as<std::string>(checks[i], "name", path), as<bool>(checks[i], "passed", path),
                        as<std::string>(checks[i], "detail", path)});
  }
  r.flags = as<std::vector<std::string>>(j, "flags", "");
  return r;
}

std::string serialize(const RunRecord& record) { return record_to_json(record).dump(2) + "\n"; }

std::string csv_summary(const RunRecord& r) {
  std::ostringstream out;
  out.precision(17);
  out << "epsilon,delta,block,statistic,mean,stderr,n\n";
  for (const auto& s : r.statistics) {
    out << s.epsilon << ',' << s.delta << ',';
    if (s.block) out << *s.block;
    out << ',' << s.name << ',' << s.mean << ',' << s.stderr_ << ',' << s.n << '\n';
  }
  return out.str();
}

std::string record_file_name(const RunRecord& r) { return r.protocol + "-" + r.plan_hash + ".json"; }

namespace {

std::optional<std::string> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void write_once(const std::filesystem::path& path, const std::string& bytes) {
  if (auto existing = read_file(path)) {
    if (*existing == bytes) return;
    fail(ErrorCategory::io, "refusing to overwrite " + path.string() +
                                " with different content; records are append-only");
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCategory::io, "cannot write " + tmp);
    out << bytes;
    if (!out) fail(ErrorCategory::io, "write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCategory::io, "cannot rename " + tmp + ": " + ec.message());
}

void persist(const RunRecord& record, const std::filesystem::path& path) {
  const auto dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCategory::io, "cannot create " + dir.string() + ": " + ec.message());
  write_once(path, serialize(record));
  auto csv = path;
  csv.replace_extension(".csv");
  write_once(csv, csv_summary(record));
  std::ofstream ledger(dir / "ledger.jsonl", std::ios::app);
  if (!ledger) fail(ErrorCategory::io, "cannot append to " + (dir / "ledger.jsonl").string());
  ledger << json{{"file", path.filename().string()},
                 {"protocol", record.protocol},
                 {"plan_hash", record.plan_hash},
                 {"seed", record.manifest.seed},
                 {"passed", record.passed()}}
                .dump()
         << '\n';
}

RunRecord load(const std::filesystem::path& path) {
  const auto text = read_file(path);
  if (!text) fail(ErrorCategory::io, "cannot read " + path.string());
  json j;
  try {
    j = json::parse(*text);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, path.string() + ": parse error at byte " + std::to_string(e.byte) +
                                 ": " + e.what());
  }
  return record_from_json(j);
}

}  // namespace sfb
