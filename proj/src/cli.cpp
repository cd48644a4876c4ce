#include "sfb/cli.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sfb/errors.hpp"
#include "sfb/experiments.hpp"
#include "sfb/frozen.hpp"
#include "sfb/integrator.hpp"
#include "sfb/model.hpp"
#include "sfb/ratefn.hpp"
#include "sfb/skeleton.hpp"

namespace sfb::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

json defaults() {
  return {
      {"model", {{"preset", "linear_ou"}, {"n_modes", 16}, {"params", json::object()}}},
      {"seed", 1},
      {"allow_a3_violation", false},
      {"simulate",
       {{"epsilon", 0.1}, {"delta_exponent", 2.0}, {"horizon", 1.0}, {"n_steps", 512},
        {"x0", json::array()}, {"y0", json::array()}, {"control", json::array()},
        {"guard_radius", nullptr}}},
      {"frozen",
       {{"x", json::array()}, {"dt", 0.01}, {"horizon", 200.0}, {"burn_in", nullptr},
        {"batches", 20}, {"mixing", false}}},
      {"skeleton",
       {{"x0", json::array()}, {"control", json::array()}, {"horizon", 1.0}, {"n_steps", 2048},
        {"fbar_horizon", 20.0}, {"fbar_dt", 0.01}}},
      {"rate",
       {{"x0", json::array()}, {"endpoint", json::array()}, {"radius", 0.0}, {"horizon", 1.0},
        {"n_knots", 32}, {"n_modes_ctrl", 8}, {"n_starts", 5}, {"n_steps", 0}, {"fbar_horizon", 20.0},
        {"fbar_dt", 0.01}}},
      {"experiment", json::object()},
  };
}

[[noreturn]] void bad(const std::string& path, const std::string& what) {
  fail(ErrorCategory::usage, "config field '" + path + "': " + what);
}

// Overlays `src` on `dst`, refusing keys the defaults do not know. The
// experiment section is checked later against the plan schema.
void overlay(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) bad(path.empty() ? "<root>" : path, "expected an object");
  for (const auto& [k, v] : src.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (path.empty() && (k == "threads" || k == "output_dir")) {
      dst[k] = v;
      continue;
    }
    if (!dst.contains(k)) bad(p, "unknown key");
    if (k == "experiment" || k == "params" || !dst[k].is_object()) {
      if (dst[k].is_object() && !v.is_object()) bad(p, "expected an object");
      dst[k] = v;
    } else {
      overlay(dst[k], v, p);
    }
  }
}

double num(const json& sec, const std::string& key, const std::string& path) {
  const json& v = sec.at(key);
  if (!v.is_number()) bad(path + "." + key, "expected a number");
  return v.get<double>();
}

std::uint64_t uint(const json& sec, const std::string& key, const std::string& path) {
  const json& v = sec.at(key);
  if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0))) bad(path + "." + key, "expected a nonnegative integer");
  return v.get<std::uint64_t>();
}

std::optional<double> opt_num(const json& sec, const std::string& key, const std::string& path) {
  if (sec.at(key).is_null()) return std::nullopt;
  return num(sec, key, path);
}

bool flag(const json& sec, const std::string& key, const std::string& path) {
  const json& v = sec.at(key);
  if (!v.is_boolean()) bad(path + "." + key, "expected true or false");
  return v.get<bool>();
}

// A coefficient vector padded to n modes; empty gives `fallback`.
SpectralField field(const json& sec, const std::string& key, const std::string& path,
                    std::size_t n, std::vector<double> fallback = {}) {
  const json& v = sec.at(key);
  if (!v.is_array()) bad(path + "." + key, "expected an array of numbers");
  std::vector<double> c;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) bad(path + "." + key + "[" + std::to_string(i) + "]", "expected a number");
    c.push_back(v[i].get<double>());
  }
  if (c.empty()) c = std::move(fallback);
  if (c.size() > n)
    fail(ErrorCategory::invalid_field,
         path + "." + key + " has " + std::to_string(c.size()) + " modes, the model has " +
             std::to_string(n));
  c.resize(n, 0.0);
  return SpectralField(std::move(c));
}

struct Context {
  json cfg;
  std::string sub;
  ExperimentPlan model_plan;  // preset, n_modes, params, seed, override
  Model model;
  std::size_t threads = 1;
  fs::path out_dir;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  std::uint64_t seed() const { return model_plan.seed; }
  std::size_t n() const { return model.n_modes(); }
  const json& section() const { return cfg.at(sub); }
  // The effective config of this command: shared keys plus its own section.
  json effective() const {
    return {{"model", cfg.at("model")},
            {"seed", cfg.at("seed")},
            {"allow_a3_violation", cfg.at("allow_a3_violation")},
            {sub, section()}};
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

json coeffs(const SpectralField& x) { return x.vec(); }

json path_json(const std::vector<SpectralField>& xs) {
  json a = json::array();
  for (const auto& x : xs) a.push_back(x.vec());
  return a;
}

fs::path write_output(const Context& c, const std::string& kind, json body) {
  body["format"] = "sfb." + kind;
  body["version"] = record_version;
  body["config"] = c.effective();
  const std::string bytes = body.dump(2) + "\n";
  std::error_code ec;
  fs::create_directories(c.out_dir, ec);
  if (ec) fail(ErrorCategory::io, "cannot create " + c.out_dir.string() + ": " + ec.message());
  const fs::path path = c.out_dir / (kind + "-" + fnv1a_hex(c.effective().dump()) + ".json");
  write_once(path, bytes);
  return path;
}

void gate_a3(const Context& c) {
  const auto d = c.model.declared();
  const auto a3 = check_a3(d.L_g, d.L_sigma2);
  if (a3.holds) return;
  if (!c.model_plan.allow_a3_violation)
    fail(ErrorCategory::condition_violation,
         "dissipativity condition fails for this model (margin " + fmt(a3.margin) + ", lhs " +
             fmt(a3.lhs) + "); pass --allow-a3-violation to run anyway");
  *c.err << "sfb: warning: dissipativity condition fails; running on override\n";
}

int cmd_check(Context& c) {
  const auto r = check_conditions(c.model, 1000, c.seed());
  auto& o = *c.out;
  o << "model " << preset_name(c.model_plan.preset) << ", N = " << c.n() << ", " << r.samples
    << " sampled pairs\n";
  o << "A1 (Lipschitz):\n";
  for (const auto& w : r.a1)
    o << "  " << w.coefficient << ": declared " << fmt(w.declared) << ", sampled ratio "
      << fmt(w.sampled_sup) << (w.violated ? "  VIOLATED" : "") << "\n";
  o << "A2 (growth): " << r.a2.coefficient << " declared " << fmt(r.a2.declared)
    << ", sampled ratio " << fmt(r.a2.sampled_sup) << (r.a2.violated ? "  VIOLATED" : "") << "\n";
  o << "A3 (dissipativity): margin lambda_1 - L_g = " << fmt(r.a3.margin) << ", lhs "
    << fmt(r.a3.lhs) << " < 1: " << (r.a3.holds ? "holds" : "FAILS") << "\n";
  o << "traces: tr Q1 <= " << fmt(r.trace1) << ", tr Q2 <= " << fmt(r.trace2)
    << (r.traces_finite ? "" : "  NOT FINITE") << "\n";
  o << "A4 (scale separation): enforced by delta = eps^p with p > 1 in every plan\n";
  o << (r.all_hold() ? "all conditions hold\n" : "conditions violated\n");
  if (!r.all_hold())
    fail(ErrorCategory::condition_violation, "the model violates the well-posedness conditions");
  return exit_ok;
}

int cmd_simulate(Context& c) {
  gate_a3(c);
  const auto& s = c.section();
  const std::string p = "simulate";
  const auto scales = ScaleParams::from_exponent(num(s, "epsilon", p), num(s, "delta_exponent", p));
  const double T = num(s, "horizon", p);
  const auto grid = TimeGrid::make(T, uint(s, "n_steps", p), scales);
  const auto x0 = field(s, "x0", p, c.n(), {1.0});
  const auto y0 = field(s, "y0", p, c.n());
  const auto u = field(s, "control", p, c.n());
  const auto guard = opt_num(s, "guard_radius", p);
  const StreamKey key{c.seed(), 0};
  *c.err << "simulating " << grid.n_steps << " slow steps x " << grid.substeps << " substeps\n";
  const bool controlled = std::any_of(u.vec().begin(), u.vec().end(), [](double a) { return a != 0.0; });
  const auto tr = controlled
                      ? simulate_controlled(x0, y0, c.model, scales, grid, Control::constant(T, 1, u), key, guard)
                      : simulate_pair(x0, y0, c.model, scales, grid, key, guard);
  double sup = 0.0;
  for (std::size_t i = 0; i < tr.usable_points(); ++i) sup = std::max(sup, norm(tr.x[i]));
  json body{{"times", tr.times},
            {"x", path_json(tr.x)},
            {"y", path_json(tr.y)},
            {"exit_index", tr.exit_index ? json(*tr.exit_index) : json(nullptr)},
            {"v_integral", tr.v_integral},
            {"delta", scales.delta},
            {"substeps", grid.substeps}};
  const auto path = write_output(c, "trajectory", body);
  *c.out << "eps " << fmt(scales.epsilon) << ", delta " << fmt(scales.delta) << ", dt "
         << fmt(grid.dt()) << ", " << grid.substeps << " fast substeps per step\n"
         << "|X_T| = " << fmt(norm(tr.x[tr.usable_points() - 1])) << ", sup |X| = " << fmt(sup)
         << ", int ||X||^2 = " << fmt(tr.v_integral) << "\n"
         << (tr.stopped() ? "stopped by the guard at index " + std::to_string(*tr.exit_index)
                          : std::string("not stopped"))
         << "\nwrote " << path.string() << "\n";
  return exit_ok;
}

int cmd_frozen(Context& c) {
  const auto& s = c.section();
  const std::string p = "frozen";
  const auto x = field(s, "x", p, c.n(), {1.0});
  FbarBudget b;
  b.dt = num(s, "dt", p);
  b.horizon = num(s, "horizon", p);
  b.burn_in = opt_num(s, "burn_in", p);
  b.batches = uint(s, "batches", p);
  b.seed = {c.seed(), 0};
  *c.err << "time-averaging the frozen equation over " << fmt(b.horizon) << " time units\n";
  const auto est = estimate_fbar_time_average(x, c.model, b);
  json body{{"x", coeffs(x)},
            {"fbar", coeffs(est.value)},
            {"stderr", coeffs(est.stderr_)},
            {"samples", est.samples}};
  auto& o = *c.out;
  o << "fbar(x) by time average (" << est.samples << " samples, batch-means errors):\n";
  std::vector<double> closed(c.n(), 0.0);
  const bool has_closed = c.model.coeffs->has_closed_form_fbar();
  if (has_closed) {
    c.model.coeffs->fbar(x.coeffs(), closed);
    body["closed_form"] = closed;
  }
  for (std::size_t k = 0; k < std::min<std::size_t>(c.n(), 8); ++k) {
    o << "  mode " << k + 1 << ": " << fmt(est.value[k]) << " +- " << fmt(est.stderr_[k]);
    if (has_closed) o << "   (closed form " << fmt(closed[k]) << ")";
    o << "\n";
  }
  if (flag(s, "mixing", p)) {
    const auto y2 = SpectralField::unit(c.n(), 1, 1.0);
    const auto m = mixing_diagnostic(x, SpectralField(c.n()), y2, c.model, b.dt,
                                     static_cast<std::size_t>(std::ceil(1.0 / b.dt)), {c.seed(), 1});
    body["mixing"] = {{"eta_hat", m.eta_hat}, {"r2", m.fit_r2}, {"ok", m.ok}, {"message", m.message}};
    o << "coupling decay rate eta = " << fmt(m.eta_hat) << " (lambda_1 = " << fmt(eigenvalue(1))
      << "), fit r2 " << fmt(m.fit_r2) << "\n";
  }
  o << "wrote " << write_output(c, "fbar", body).string() << "\n";
  return exit_ok;
}

// Models without a closed-form fbar estimate it by time averages at every
// new x, which dominates the cost of skeleton and rate runs.
AveragedDrift drift_for(const Context& c) {
  FbarBudget b;
  b.seed = {c.seed(), 0xfba5};
  b.horizon = num(c.section(), "fbar_horizon", c.sub);
  b.dt = num(c.section(), "fbar_dt", c.sub);
  return AveragedDrift(c.model, b);
}

int cmd_skeleton(Context& c) {
  gate_a3(c);
  const auto& s = c.section();
  const std::string p = "skeleton";
  const double T = num(s, "horizon", p);
  const auto x0 = field(s, "x0", p, c.n(), {1.0});
  const auto u = Control::constant(T, 1, field(s, "control", p, c.n()));
  const auto fbar = drift_for(c);
  const auto path = solve_skeleton(x0, u, fbar, T, uint(s, "n_steps", p));
  const auto e = energy_report(path);
  json body{{"times", path.times},
            {"x", path_json(path.x)},
            {"sup_energy", e.sup_energy},
            {"v_integral", e.v_integral},
            {"witness", e.witness}};
  *c.out << "|X_T| = " << fmt(norm(path.x.back())) << ", sup |X|^2 = " << fmt(e.sup_energy)
         << ", int ||X||^2 = " << fmt(e.v_integral) << ", energy witness " << fmt(e.witness)
         << "\nwrote " << write_output(c, "skeleton", body).string() << "\n";
  return exit_ok;
}

int cmd_rate(Context& c) {
  gate_a3(c);
  const auto& s = c.section();
  const std::string p = "rate";
  RateProblem rp;
  rp.horizon = num(s, "horizon", p);
  rp.x = field(s, "x0", p, c.n());
  if (s.at("endpoint").empty()) bad(p + ".endpoint", "an endpoint target is required");
  rp.z = field(s, "endpoint", p, c.n());
  rp.radius = num(s, "radius", p);
  rp.n_knots = uint(s, "n_knots", p);
  rp.n_modes_ctrl = uint(s, "n_modes_ctrl", p);
  rp.n_starts = uint(s, "n_starts", p);
  rp.n_steps = uint(s, "n_steps", p);
  rp.seed = c.seed();
  rp.threads = c.threads;
  const auto fbar = drift_for(c);
  if (fbar.mode() == FbarMode::time_average)
    *c.err << "note: fbar is time-averaged at every skeleton step; expect a long run "
              "(see --steps, --knots, --fbar-horizon)\n";
  *c.err << "minimizing over " << rp.n_knots << " knots x " << rp.control_modes(c.n())
         << " modes, " << rp.n_starts << " starts\n";
  const auto r = minimize_rate(rp, fbar);
  json body{{"value", r.value},
            {"label", r.label},
            {"converged", r.converged},
            {"residual", r.residual},
            {"tolerance", r.tolerance},
            {"u_star", r.u_star.values()},
            {"x_T", coeffs(r.path.x.back())}};
  auto& o = *c.out;
  o << "I = " << fmt(r.value) << "  [" << r.label << "]\n"
    << "residual " << fmt(r.residual) << " (tolerance " << fmt(r.tolerance) << "), "
    << r.converged_starts << " of " << rp.n_starts << " starts converged, best start "
    << r.best_start << "\n";
  const bool linear = c.model.coeffs->f_is_zero() && c.model.coeffs->sigma1_is_constant() && c.n() == 1;
  if (linear) {
    const auto lq = lq_oracle(rp.x, rp.z, rp.horizon, c.model, rp.radius);
    body["lq_oracle"] = lq.value;
    o << "LQ oracle I = " << fmt(lq.value) << ", relative error "
      << fmt(lq.value > 0 ? std::abs(r.value - lq.value) / lq.value : std::abs(r.value)) << "\n";
  }
  o << "wrote " << write_output(c, "rate", body).string() << "\n";
  if (!r.converged)
    fail(ErrorCategory::non_convergence,
         "no start met the constraint tolerance; best incumbent I = " + fmt(r.value));
  return exit_ok;
}

int cmd_experiment(Context& c) {
  ExperimentPlan plan = plan_from_json(c.section(), c.model_plan, "experiment");
  plan.threads = c.threads;
  plan.output_dir = c.out_dir.string();
  gate_a3(c);
  auto& err = *c.err;
  const auto record = run_experiment(plan, [&err](const std::string& line) { err << line << "\n"; });
  const fs::path path = c.out_dir / record_file_name(record);
  persist(record, path);
  auto& o = *c.out;
  o << record.protocol << "  plan " << record.plan_hash << "  seed " << record.manifest.seed << "\n";
  for (const auto& s : record.statistics) {
    o << "  eps " << fmt(s.epsilon) << "  delta " << fmt(s.delta);
    if (s.block) o << "  Delta " << fmt(*s.block);
    o << "  " << s.name << " = " << fmt(s.mean) << " +- " << fmt(s.stderr_) << "  (n=" << s.n << ")\n";
  }
  for (const auto& f : record.fits)
    o << "fit " << f.name << ": slope " << fmt(f.slope) << ", 95% CI [" << fmt(f.ci_low) << ", "
      << fmt(f.ci_high) << "], r2 " << fmt(f.r2) << "\n";
  for (const auto& [k, v] : record.values) o << k << " = " << fmt(v) << "\n";
  for (const auto& ch : record.checks)
    o << (ch.passed ? "PASS " : "FAIL ") << ch.name << ": " << ch.detail << "\n";
  for (const auto& f : record.flags) o << "flag: " << f << "\n";
  o << "wrote " << path.string() << "\n";
  if (!record.passed()) {
    err << "sfb: error[protocol_check]: at least one protocol check failed\n";
    return exit_checks_failed;
  }
  return exit_ok;
}

json read_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCategory::io, "cannot read config " + path);
  const std::string text{std::istreambuf_iterator<char>(in), {}};
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorCategory::usage, "config " + path + ": parse error at byte " + std::to_string(e.byte));
  }
}

json to_json_vec(const std::vector<double>& v) { return v; }

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-time-scale stochastic Burgers laboratory"};
  app.name("sfb");
  app.require_subcommand(1, 1);

  std::string config_path, preset, out_dir, protocol;
  std::size_t modes = 0, threads = 1, steps = 0, ensemble = 0, knots = 0, ctrl_modes = 0, starts = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> params;
  std::vector<double> x0, y0, control, endpoint, epsilons, xf;
  double epsilon = 0, p = 0, fbar_horizon = 0, horizon = 0, guard = 0, radius = 0, dt = 0, burn_in = 0;
  bool allow_a3 = false, mixing = false;

  struct Opts {
    CLI::Option *config, *preset, *modes, *param, *seed, *threads, *out, *allow;
  };
  auto common = [&](CLI::App* sub) {
    Opts o;
    o.config = sub->add_option("--config", config_path, "JSON config file; flags override it");
    o.preset = sub->add_option("--preset", preset, "linear_ou | lipschitz_saturating | decoupled_small_noise");
    o.modes = sub->add_option("-N,--modes", modes, "Galerkin modes");
    o.param = sub->add_option("--param", params, "preset parameter override key=value (repeatable)");
    o.seed = sub->add_option("--seed", seed, "master seed");
    o.threads = sub->add_option("--threads", threads, "worker threads (0: all cores)");
    o.out = sub->add_option("--out", out_dir, "output directory (default $SFB_OUT, else ./sfb-out)");
    o.allow = sub->add_flag("--allow-a3-violation", allow_a3, "run although the dissipativity condition fails");
    return o;
  };

  auto* sim = app.add_subcommand("simulate", "one coupled (optionally controlled) trajectory");
  auto* frz = app.add_subcommand("frozen", "time-average estimate of the averaged drift");
  auto* skl = app.add_subcommand("skeleton", "deterministic skeleton / averaged equation");
  auto* rat = app.add_subcommand("rate", "rate function of an endpoint target");
  auto* exp = app.add_subcommand("experiment", "run a Monte Carlo protocol and write a record");
  auto* chk = app.add_subcommand("check", "report the well-posedness conditions of a model");
  std::map<CLI::App*, Opts> opts;
  for (auto* s : {sim, frz, skl, rat, exp, chk}) opts[s] = common(s);

  std::map<std::string, CLI::Option*> o;
  o["sim.eps"] = sim->add_option("--epsilon", epsilon, "noise intensity eps in (0, 1]");
  o["sim.p"] = sim->add_option("--p", p, "delta = eps^p, p > 1");
  o["sim.T"] = sim->add_option("--horizon", horizon);
  o["sim.steps"] = sim->add_option("--steps", steps, "slow steps");
  o["sim.x0"] = sim->add_option("--x0", x0, "initial slow coefficients")->delimiter(',');
  o["sim.y0"] = sim->add_option("--y0", y0, "initial fast coefficients")->delimiter(',');
  o["sim.u"] = sim->add_option("--control", control, "constant control coefficients")->delimiter(',');
  o["sim.guard"] = sim->add_option("--guard", guard, "guard radius of the stopping functional");

  o["frz.x"] = frz->add_option("--x", xf, "frozen slow coefficients")->delimiter(',');
  o["frz.dt"] = frz->add_option("--dt", dt);
  o["frz.T"] = frz->add_option("--horizon", horizon, "averaging window after burn-in");
  o["frz.burn"] = frz->add_option("--burn-in", burn_in);
  o["frz.mix"] = frz->add_flag("--mixing", mixing, "also fit the coupling decay rate");

  o["skl.x0"] = skl->add_option("--x0", x0)->delimiter(',');
  o["skl.u"] = skl->add_option("--control", control)->delimiter(',');
  o["skl.T"] = skl->add_option("--horizon", horizon);
  o["skl.steps"] = skl->add_option("--steps", steps);
  o["skl.fh"] = skl->add_option("--fbar-horizon", fbar_horizon, "time-average window per fbar evaluation");

  o["rat.x0"] = rat->add_option("--x0", x0)->delimiter(',');
  o["rat.z"] = rat->add_option("--endpoint", endpoint, "target coefficients z")->delimiter(',');
  o["rat.r"] = rat->add_option("--radius", radius, "ball radius around z (0: equality)");
  o["rat.T"] = rat->add_option("--horizon", horizon);
  o["rat.knots"] = rat->add_option("--knots", knots);
  o["rat.cm"] = rat->add_option("--ctrl-modes", ctrl_modes);
  o["rat.starts"] = rat->add_option("--starts", starts);
  o["rat.steps"] = rat->add_option("--steps", steps, "skeleton steps (0: auto, a multiple of the knots)");
  o["rat.fh"] = rat->add_option("--fbar-horizon", fbar_horizon, "time-average window per fbar evaluation");

  o["exp.proto"] = exp->add_option("--protocol", protocol,
                                   "averaging | khasminskii_scaling | auxiliary_error | "
                                   "controlled_convergence | ldp_tail");
  o["exp.eps"] = exp->add_option("--epsilons", epsilons, "decreasing eps schedule")->delimiter(',');
  o["exp.p"] = exp->add_option("--p", p);
  o["exp.ens"] = exp->add_option("--ensemble", ensemble);
  o["exp.steps"] = exp->add_option("--steps", steps);
  o["exp.T"] = exp->add_option("--horizon", horizon);
  o["exp.x0"] = exp->add_option("--x0", x0)->delimiter(',');
  o["exp.guard"] = exp->add_option("--guard", guard);
  o["exp.u"] = exp->add_option("--control", control)->delimiter(',');
  o["exp.z"] = exp->add_option("--endpoint", endpoint)->delimiter(',');
  o["exp.r"] = exp->add_option("--radius", radius);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return exit_ok;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return exit_ok;
  } catch (const CLI::ParseError& e) {
    err << "sfb: error[usage]: " << e.what() << "\n";
    return exit_code(ErrorCategory::usage);
  }

  CLI::App* sub = app.get_subcommands().front();
  const Opts& so = opts.at(sub);
  auto given = [&](const char* key) { return o.at(key)->count() > 0; };

  try {
    Context c;
    c.sub = sub->get_name();
    c.out = &out;
    c.err = &err;
    c.cfg = defaults();
    if (so.config->count()) overlay(c.cfg, read_config(config_path), "");

    json& m = c.cfg["model"];
    if (so.preset->count()) m["preset"] = preset;
    if (so.modes->count()) m["n_modes"] = modes;
    for (const auto& kv : params) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail(ErrorCategory::usage, "--param expects key=value, got '" + kv + "'");
      try {
        m["params"][kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
      } catch (const std::logic_error&) {
        fail(ErrorCategory::usage, "--param value is not a number: '" + kv + "'");
      }
    }
    if (so.seed->count()) c.cfg["seed"] = seed;
    if (so.allow->count()) c.cfg["allow_a3_violation"] = true;

    json& s = c.cfg[c.sub];
    if (c.sub == "simulate") {
      if (given("sim.eps")) s["epsilon"] = epsilon;
      if (given("sim.p")) s["delta_exponent"] = p;
      if (given("sim.T")) s["horizon"] = horizon;
      if (given("sim.steps")) s["n_steps"] = steps;
      if (given("sim.x0")) s["x0"] = to_json_vec(x0);
      if (given("sim.y0")) s["y0"] = to_json_vec(y0);
      if (given("sim.u")) s["control"] = to_json_vec(control);
      if (given("sim.guard")) s["guard_radius"] = guard;
    } else if (c.sub == "frozen") {
      if (given("frz.x")) s["x"] = to_json_vec(xf);
      if (given("frz.dt")) s["dt"] = dt;
      if (given("frz.T")) s["horizon"] = horizon;
      if (given("frz.burn")) s["burn_in"] = burn_in;
      if (given("frz.mix")) s["mixing"] = true;
    } else if (c.sub == "skeleton") {
      if (given("skl.x0")) s["x0"] = to_json_vec(x0);
      if (given("skl.u")) s["control"] = to_json_vec(control);
      if (given("skl.T")) s["horizon"] = horizon;
      if (given("skl.steps")) s["n_steps"] = steps;
      if (given("skl.fh")) s["fbar_horizon"] = fbar_horizon;
    } else if (c.sub == "rate") {
      if (given("rat.x0")) s["x0"] = to_json_vec(x0);
      if (given("rat.z")) s["endpoint"] = to_json_vec(endpoint);
      if (given("rat.r")) s["radius"] = radius;
      if (given("rat.T")) s["horizon"] = horizon;
      if (given("rat.knots")) s["n_knots"] = knots;
      if (given("rat.cm")) s["n_modes_ctrl"] = ctrl_modes;
      if (given("rat.starts")) s["n_starts"] = starts;
      if (given("rat.steps")) s["n_steps"] = steps;
      if (given("rat.fh")) s["fbar_horizon"] = fbar_horizon;
    } else if (c.sub == "experiment") {
      if (given("exp.proto")) s["protocol"] = protocol;
      if (given("exp.eps")) s["epsilons"] = to_json_vec(epsilons);
      if (given("exp.p")) s["delta_exponent"] = p;
      if (given("exp.ens")) s["ensemble"] = ensemble;
      if (given("exp.steps")) s["n_steps"] = steps;
      if (given("exp.T")) s["horizon"] = horizon;
      if (given("exp.x0")) s["x0"] = to_json_vec(x0);
      if (given("exp.guard")) s["guard_radius"] = guard;
      if (given("exp.u")) s["control"] = to_json_vec(control);
      if (given("exp.z")) s["target"] = to_json_vec(endpoint);
      if (given("exp.r")) s["radius"] = radius;
    }

    // Shared keys through the plan reader, so field paths and types are
    // checked in one place.
    ExperimentPlan base;
    base = plan_from_json(m, base, "model");
    const json& sd = c.cfg["seed"];
    if (!(sd.is_number_unsigned() || (sd.is_number_integer() && sd.get<std::int64_t>() >= 0))) bad("seed", "expected a nonnegative integer");
    base.seed = sd.get<std::uint64_t>();
    const json& al = c.cfg["allow_a3_violation"];
    if (!al.is_boolean()) bad("allow_a3_violation", "expected true or false");
    base.allow_a3_violation = al.get<bool>();
    c.model_plan = base;
    c.model = sfb::preset(base.preset, base.n_modes, base.params);

    c.threads = threads;
    if (!so.threads->count() && c.cfg.contains("threads")) c.threads = uint(c.cfg, "threads", "");
    if (so.out->count()) {
      c.out_dir = out_dir;
    } else if (c.cfg.contains("output_dir") && c.cfg["output_dir"].is_string()) {
      c.out_dir = c.cfg["output_dir"].get<std::string>();
    } else if (const char* env = std::getenv("SFB_OUT"); env && *env) {
      c.out_dir = env;
    } else {
      c.out_dir = "sfb-out";
    }

    if (c.sub == "check") return cmd_check(c);
    if (c.sub == "simulate") return cmd_simulate(c);
    if (c.sub == "frozen") return cmd_frozen(c);
    if (c.sub == "skeleton") return cmd_skeleton(c);
    if (c.sub == "rate") return cmd_rate(c);
    return cmd_experiment(c);
  } catch (const BlowUpError& e) {
    err << "sfb: error[blow_up]: " << e.what() << " (last finite index " << e.last_finite_index() << ")\n";
    return exit_code(ErrorCategory::blow_up);
  } catch (const ParseError& e) {
    err << "sfb: error[format]: " << e.what() << "\n";
    return exit_code(ErrorCategory::format);
  } catch (const Error& e) {
    err << "sfb: error[" << category_name(e.category()) << "]: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "sfb: error[internal]: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace sfb::cli
