#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sfb/errors.hpp"
#include "sfb/skeleton.hpp"
#include "sfb/stats.hpp"
#include "support/gen.hpp"

using namespace sfb;
using std::numbers::pi;

namespace {

AveragedDrift closed(PresetName p, std::size_t n) { return AveragedDrift(preset(p, n), FbarBudget{}); }

// Classical RK4 on x' = A x + B(x) + fbar(x), written against the basis and
// the preset's closed-form fbar only.
SpectralField rk4_reference(const SpectralField& x0, const AveragedDrift& fb, double T, std::size_t steps) {
  const std::size_t n = x0.size();
  SpectralBasis basis(n);
  auto rhs = [&](const SpectralField& x) {
    SpectralField out = apply_A(x) + basis.burgers(x);
    SpectralField f(n);
    fb.evaluate(x.coeffs(), f.coeffs());
    return out + f;
  };
  const double h = T / static_cast<double>(steps);
  SpectralField x = x0;
  for (std::size_t s = 0; s < steps; ++s) {
    auto k1 = rhs(x);
    auto k2 = rhs(x + (h / 2) * k1);
    auto k3 = rhs(x + (h / 2) * k2);
    auto k4 = rhs(x + h * k3);
    x = x + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  return x;
}

}  // namespace

TEST_CASE("free linear flow") {
  auto fb = closed(PresetName::decoupled_small_noise, 1);
  auto p = solve_skeleton(SpectralField{1.0}, Control(0.5, 1, 1), fb, 0.5, 100);
  for (std::size_t s = 0; s < p.x.size(); ++s)
    CHECK(p.x[s][0] == doctest::Approx(std::exp(-pi * pi * p.times[s])).epsilon(1e-12));
}

TEST_CASE("constant control against the scalar ODE") {
  auto fb = closed(PresetName::decoupled_small_noise, 1);
  const double c = -2.5, x0 = 0.3, T = 0.7;
  auto p = solve_skeleton(SpectralField{x0}, Control::constant(T, 4, SpectralField{c}), fb, T, 700);
  const double lam = pi * pi;
  for (std::size_t s = 0; s < p.x.size(); s += 50) {
    const double t = p.times[s];
    CHECK(p.x[s][0] == doctest::Approx(std::exp(-lam * t) * x0 + c * (1 - std::exp(-lam * t)) / lam)
                           .epsilon(1e-12));
  }
}

TEST_CASE("averaged linear_ou flow against an RK4 reference") {
  auto fb = closed(PresetName::linear_ou, 8);
  SpectralField x{2.0, -1.0, 0.5, 0, 0.2, 0, 0, 0.1};
  auto p = solve_skeleton(x, Control(1.0, 1, 8), fb, 1.0, 2048);
  auto ref = rk4_reference(x, fb, 1.0, 40000);
  auto coarse = solve_skeleton(x, Control(1.0, 1, 8), fb, 1.0, 2048 / 16);
  const double err = norm(p.x.back() - ref);
  const double err_coarse = norm(coarse.x.back() - ref);
  MESSAGE("skeleton end-point error: dt=T/2048 " << err << ", dt=T/128 " << err_coarse);
  CHECK(err <= 1e-3 * norm(ref) + 1e-6);
  CHECK(err_coarse / err == doctest::Approx(16.0).epsilon(0.25));
}

TEST_CASE("energy report") {
  auto fb = closed(PresetName::linear_ou, 4);
  auto r0 = energy_report(solve_skeleton(SpectralField(4), Control(1.0, 1, 4), fb, 1.0, 64));
  CHECK(r0.sup_energy == 0.0);
  CHECK(r0.v_integral == 0.0);

  auto fb1 = closed(PresetName::linear_ou, 1);
  auto a = energy_report(solve_skeleton(SpectralField{1.0}, Control(1.0, 1, 1), fb1, 1.0, 64));
  auto b = energy_report(solve_skeleton(SpectralField{2.0}, Control(1.0, 1, 1), fb1, 1.0, 64));
  CHECK(b.sup_energy == doctest::Approx(4.0 * a.sup_energy).epsilon(1e-14));

  auto g = testgen::rng(8);
  auto fb8 = closed(PresetName::linear_ou, 8);
  double worst = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    Control u(1.0, 16, 8, 10.0);
    std::normal_distribution<double> normal;
    for (double& v : u.values()) v = normal(g);
    const double scale = std::sqrt(10.0 / u.energy()) * std::uniform_real_distribution<double>(0, 1)(g);
    for (double& v : u.values()) v *= scale;
    u.validate();
    auto x = testgen::field(g, 8, 5.0);
    worst = std::max(worst, energy_report(solve_skeleton(x, u, fb8, 1.0, 512)).witness);
  }
  MESSAGE("energy witness over S_10 sweep: " << worst);
  CHECK(std::isfinite(worst));
  CHECK(worst < 50.0);
}

TEST_CASE("property: the Burgers term is energy neutral along the path") {
  auto fb = closed(PresetName::linear_ou, 32);
  auto g = testgen::rng(4);
  for (int rep = 0; rep < 5; ++rep) {
    auto x = testgen::field(g, 32, 10.0);
    auto p = solve_skeleton(x, Control(0.5, 1, 32), fb, 0.5, 512);
    CHECK(p.max_b_term <= 1e-10 * (1.0 + v_norm_sq(x)));
  }
}

TEST_CASE("property: first-order self-convergence") {
  auto fb = closed(PresetName::linear_ou, 8);
  SpectralField x{3.0, 1.0, -0.5, 0.25, 0, 0, 0, 0};
  auto u = Control::constant(1.0, 8, SpectralField{1.0, 0.5, 0, 0, 0, 0, 0, 0});
  // Gap between successive refinements in sup_t |X^{dt}_t - X^{dt/2}_t| on the
  // coarse grid points.
  std::vector<std::size_t> steps{64, 128, 256, 512, 1024, 2048};
  std::vector<SkeletonPath> paths;
  for (std::size_t s : steps) paths.push_back(solve_skeleton(x, u, fb, 1.0, s));
  std::vector<double> ldt, ldiff;
  for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
    double sup = 0.0;
    for (std::size_t k = 0; k < paths[i].x.size(); ++k)
      sup = std::max(sup, norm(paths[i].x[k] - paths[i + 1].x[2 * k]));
    ldt.push_back(std::log(1.0 / static_cast<double>(steps[i])));
    ldiff.push_back(std::log(sup));
  }
  auto fit = linear_fit(ldt, ldiff);
  MESSAGE("self-convergence exponent " << fit.slope);
  CHECK(fit.slope >= 0.9);
}

TEST_CASE("weak continuity probe") {
  auto fb = closed(PresetName::decoupled_small_noise, 4);
  auto x = SpectralField::unit(4, 1);
  Control base = Control::constant(1.0, 2048, SpectralField{0.5, 0.0, 0.0, 0.0});
  auto same = weak_continuity_probe(x, {base, base}, base, fb, 1.0, 2048);
  for (const auto& g : same) {
    CHECK(g.sup_gap == 0.0);
    CHECK(g.v_gap == 0.0);
  }

  auto seq = oscillatory_sequence(base, 1, 1.0, 2.0 * pi, {4, 8, 16, 32, 64});
  auto gaps = weak_continuity_probe(x, seq, base, fb, 1.0, 2048);
  for (std::size_t i = 0; i + 1 < gaps.size(); ++i) CHECK(gaps[i + 1].sup_gap < gaps[i].sup_gap);
  CHECK(gaps.back().sup_gap <= 0.5 * gaps.front().sup_gap);
  // The oscillation carries constant L^2 norm: strong convergence fails.
  for (const auto& c : seq) CHECK((c.energy() - base.energy()) == doctest::Approx(0.5).epsilon(0.02));

  // Constant perturbations of size 1/n: gap / |u_n - u|_{L^2} is a fixed modulus.
  std::vector<Control> shifts;
  std::vector<double> sizes;
  for (int n = 1; n <= 16; n *= 2) {
    Control c = base;
    for (std::size_t j = 0; j < c.n_knots(); ++j) c.knot(j)[1] += 1.0 / n;
    shifts.push_back(c);
    sizes.push_back(1.0 / n);
  }
  auto sg = weak_continuity_probe(x, shifts, base, fb, 1.0, 2048);
  // Burgers is active at N = 4, so the response is only asymptotically linear.
  const double modulus = sg.back().sup_gap / sizes.back();
  MESSAGE("control-to-path modulus " << modulus);
  for (std::size_t i = 0; i < sg.size(); ++i)
    CHECK(sg[i].sup_gap / sizes[i] == doctest::Approx(modulus).epsilon(0.05));
}

TEST_CASE("skeleton input validation") {
  auto fb = closed(PresetName::decoupled_small_noise, 2);
  CHECK_THROWS_AS(solve_skeleton(SpectralField(3), Control(1.0, 1, 2), fb, 1.0, 8), Error);
  CHECK_THROWS_AS(solve_skeleton(SpectralField(2), Control(2.0, 1, 2), fb, 1.0, 8), Error);
  auto p = solve_skeleton(SpectralField{1.0, 2.0}, Control(0.0, 1, 2), fb, 0.0, 8);
  CHECK(p.x.size() == 1);
}
