#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sfb/errors.hpp"
#include "sfb/integrator.hpp"
#include "support/gen.hpp"

using namespace sfb;
using std::numbers::pi;

namespace {

StepNoise zero_noise(const TimeGrid& g, std::size_t n) {
  return {std::vector<double>(g.substeps * n, 0.0), std::vector<double>(g.substeps * n, 0.0)};
}

}  // namespace

TEST_CASE("time grid") {
  auto s = ScaleParams::explicit_values(0.1, 1e-3);
  auto g = TimeGrid::make(1.0, 100, s);
  CHECK(g.dt() == doctest::Approx(0.01));
  CHECK(g.substeps == 100);
  CHECK(g.dt_fast() <= s.delta / 10.0 * (1 + 1e-12));
  CHECK(g.block_steps == 3);  // sqrt(1e-3) = 0.0316 -> 3 dt
  CHECK(g.block_start(7) == 6);
  auto t0 = TimeGrid::make(0.0, 10, s);
  CHECK(t0.n_steps == 0);
  TimeGrid bad = g;
  bad.substeps = 1;
  CHECK_THROWS_AS(bad.validate(s), Error);
}

TEST_CASE("zero coupling, zero noise: pure semigroup") {
  auto m = preset(PresetName::decoupled_small_noise, 1);
  auto s = ScaleParams::explicit_values(0.0, 0.5);
  auto g = TimeGrid::make(0.3, 30, s);
  CoupledState st{SpectralField{0.8}, SpectralField{0.0}};
  auto next = step_coupled(st, m, s, g, zero_noise(g, 1));
  CHECK(next.x[0] == doctest::Approx(std::exp(-pi * pi * g.dt()) * 0.8).epsilon(1e-14));

  // Full path with eps = 0: the noise never reaches X.
  auto tr = simulate_pair(SpectralField{0.8}, SpectralField{0.3}, m, s, g, {1, 0});
  CHECK(tr.x.back()[0] == doctest::Approx(std::exp(-pi * pi * 0.3) * 0.8).epsilon(1e-12));
}

TEST_CASE("zero state is a fixed point without noise") {
  auto m = preset(PresetName::linear_ou, 8);
  auto s = ScaleParams::explicit_values(0.1, 0.01);
  auto g = TimeGrid::make(1.0, 50, s);
  CoupledState st{SpectralField(8), SpectralField(8)};
  for (int i = 0; i < 50; ++i) st = step_coupled(st, m, s, g, zero_noise(g, 8));
  CHECK(st.x == SpectralField(8));
  CHECK(st.y == SpectralField(8));
}

TEST_CASE("fast mode reaches the OU stationary variance") {
  auto m = preset(PresetName::linear_ou, 1);
  auto s = ScaleParams::explicit_values(0.01, 1e-3);
  auto g = TimeGrid::make(12.0, 12000, s);
  auto tr = simulate_pair(SpectralField(1), SpectralField(1), m, s, g, {7, 0});
  const std::size_t burn = 2000;
  double mean = 0.0, sq = 0.0;
  const double n = static_cast<double>(tr.y.size() - burn);
  for (std::size_t i = burn; i < tr.y.size(); ++i) mean += tr.y[i][0] / n;
  for (std::size_t i = burn; i < tr.y.size(); ++i) sq += (tr.y[i][0] - mean) * (tr.y[i][0] - mean) / (n - 1);
  const double oracle = m.noise.q2[0] / (2.0 * eigenvalue(1));
  CHECK(sq == doctest::Approx(oracle).epsilon(0.10));
}

TEST_CASE("paths: single point at T = 0, determinism, shared noise") {
  auto m = preset(PresetName::lipschitz_saturating, 8);
  auto s = ScaleParams::from_exponent(0.1, 2.0);
  auto g0 = TimeGrid::make(0.0, 10, s);
  SpectralField x = SpectralField::unit(8, 1, 0.5), y = SpectralField::unit(8, 2, -0.3);
  auto p0 = simulate_pair(x, y, m, s, g0, {1, 2});
  CHECK(p0.x.size() == 1);
  CHECK(p0.x[0] == x);
  CHECK(p0.y[0] == y);

  auto g = TimeGrid::make(1.0, 100, s);
  auto a = simulate_pair(x, y, m, s, g, {3, 4});
  auto b = simulate_pair(x, y, m, s, g, {3, 4});
  auto c = simulate_pair(x, y, m, s, g, {3, 5});
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
  CHECK(a.x.back() != c.x.back());
  CHECK(a.x[0] == x);
  CHECK(a.noise.fast_increments == a.noise.slow_increments);
  CHECK(a.noise.fast_increments == g.n_steps * g.substeps * 8);
  CHECK(a.noise.fast_sum == doctest::Approx(a.noise.slow_sum).epsilon(1e-12).scale(1.0));
}

TEST_CASE("zero control coincides with the uncontrolled run") {
  auto m = preset(PresetName::lipschitz_saturating, 8);
  auto s = ScaleParams::from_exponent(0.2, 2.0);
  auto g = TimeGrid::make(0.5, 50, s);
  SpectralField x = SpectralField::unit(8, 1), y(8);
  Control zero(0.5, 8, 8);
  auto a = simulate_pair(x, y, m, s, g, {9, 1});
  auto b = simulate_controlled(x, y, m, s, g, zero, {9, 1});
  CHECK(a.x == b.x);
  CHECK(a.y == b.y);
}

TEST_CASE("slow control drift against the linear ODE") {
  // eps = delta = 1, noise zeroed: x' = -pi^2 x + sqrt(q1) c, solved exactly by
  // the exponential step for constant forcing.
  auto m = preset(PresetName::decoupled_small_noise, 1);
  auto s = ScaleParams::explicit_values(1.0, 1.0);
  auto g = TimeGrid::make(0.4, 40, s);
  const double c = 1.7, x0 = 0.2;
  std::vector<double> u{c};
  CoupledState st{SpectralField{x0}, SpectralField{0.0}};
  for (std::size_t i = 0; i < g.n_steps; ++i) st = step_coupled(st, m, s, g, zero_noise(g, 1), u);
  const double lam = pi * pi;
  const double oracle = std::exp(-lam * 0.4) * x0 + c * (1.0 - std::exp(-lam * 0.4)) / lam;
  CHECK(st.x[0] == doctest::Approx(oracle).epsilon(1e-12));

  // The quadrature of int sigma1 Q1^{1/2} u dt from zero data, semigroup off
  // the table: with a tiny step the increment is c * dt.
  auto gs = TimeGrid::make(1e-6, 1, s);
  CoupledState z{SpectralField{0.0}, SpectralField{0.0}};
  auto one = step_coupled(z, m, s, gs, zero_noise(gs, 1), u);
  CHECK(one.x[0] == doctest::Approx(c * 1e-6).epsilon(1e-5));
}

TEST_CASE("nonzero control with eps = 0 is refused") {
  auto m = preset(PresetName::decoupled_small_noise, 2);
  auto s = ScaleParams::explicit_values(0.0, 0.1);
  auto g = TimeGrid::make(1.0, 10, s);
  auto u = Control::constant(1.0, 4, SpectralField{1.0, 0.0});
  CHECK_THROWS_AS(simulate_controlled(SpectralField(2), SpectralField(2), m, s, g, u, {1, 1}), Error);
  auto wrong = Control::constant(2.0, 4, SpectralField{1.0, 0.0});
  auto s2 = ScaleParams::explicit_values(0.1, 0.1);
  CHECK_THROWS_AS(simulate_controlled(SpectralField(2), SpectralField(2), m, s2, g, wrong, {1, 1}),
                  Error);
}

TEST_CASE("guard and blow-up") {
  // A huge initial field under Burgers with a coarse step diverges.
  auto m = preset(PresetName::decoupled_small_noise, 16);
  auto s = ScaleParams::explicit_values(0.0, 1.0);
  auto g = TimeGrid::make(5.0, 20, s);
  SpectralField x(16);
  for (std::size_t i = 0; i < 16; ++i) x[i] = 1e6;
  try {
    simulate_pair(x, SpectralField(16), m, s, g, {1, 1});
    FAIL("expected blow-up");
  } catch (const BlowUpError& e) {
    CHECK(e.category() == ErrorCategory::blow_up);
    CHECK(e.last_finite_index() < g.n_steps);
  }
  auto tr = simulate_pair(x, SpectralField(16), m, s, g, {1, 1}, default_guard_radius(x, SpectralField(16)));
  CHECK(tr.stopped());
  CHECK(tr.usable_points() >= 1);

  // Small data under a small guard: the stopping functional crosses R.
  auto ou = preset(PresetName::linear_ou, 4);
  auto so = ScaleParams::from_exponent(0.5, 2.0);
  auto go = TimeGrid::make(1.0, 100, so);
  auto small = simulate_pair(SpectralField::unit(4, 1), SpectralField(4), ou, so, go, {2, 2}, 1.05);
  REQUIRE(small.stopped());
  CHECK(*small.exit_index >= 1);
  CHECK(small.usable_points() == *small.exit_index);
}

TEST_CASE("auxiliary processes") {
  SUBCASE("decoupled, no control: Y and Y^ coincide and X^ is the Burgers flow") {
    auto m = preset(PresetName::decoupled_small_noise, 8);
    auto s = ScaleParams::from_exponent(0.1, 2.0);
    auto g = TimeGrid::make(0.5, 100, s);
    auto x = SpectralField::unit(8, 1, 2.0), y = SpectralField::unit(8, 3, 0.4);
    auto run = simulate_auxiliary(x, y, m, s, g, Control(0.5, 1, 8), {4, 4});
    CHECK(run.y_gap_integral == 0.0);
    CHECK(run.y_hat.back() == run.controlled.y.back());

    SpectralBasis basis(8);
    SpectralField ref = x;
    const double dt = g.dt();
    for (std::size_t n = 0; n < g.n_steps; ++n) {
      auto bx = basis.burgers(ref);
      for (std::size_t i = 0; i < 8; ++i) {
        const double lam = eigenvalue(i + 1);
        ref[i] = std::exp(-lam * dt) * ref[i] + (1.0 - std::exp(-lam * dt)) / lam * bx[i];
      }
    }
    for (std::size_t i = 0; i < 8; ++i) CHECK(run.x_hat.back()[i] == doctest::Approx(ref[i]).epsilon(1e-12).scale(1.0));
  }
  SUBCASE("block equal to dt: Y^ differs from Y only through the one-step lag") {
    auto m = preset(PresetName::linear_ou, 4);
    // delta large enough that sqrt(delta) rounds to one step.
    auto s = ScaleParams::explicit_values(0.5, 1e-4);
    auto g = TimeGrid::make(0.2, 20, s);
    REQUIRE(g.block_steps == 1);
    auto run = simulate_auxiliary(SpectralField::unit(4, 1), SpectralField(4), m, s, g,
                                  Control(0.2, 1, 4), {5, 5});
    // With block = dt the frozen argument equals X_{t_n}, which is exactly the
    // slow argument the coupled run uses, so the fast paths coincide.
    CHECK(run.y_gap_integral == 0.0);
  }
  SUBCASE("linear_ou, eps = 0.1: gap is positive and finite") {
    auto m = preset(PresetName::linear_ou, 4);
    auto s = ScaleParams::from_exponent(0.1, 2.0);
    auto g = TimeGrid::make(1.0, 200, s);
    auto u = Control::constant(1.0, 1, SpectralField{2.0, 0.0, 0.0, 0.0});
    auto run = simulate_auxiliary(SpectralField::unit(4, 1), SpectralField(4), m, s, g, u, {6, 6});
    CHECK(run.y_gap_integral > 0.0);
    CHECK(std::isfinite(run.y_gap_integral));
    CHECK(run.controlled.control_energy == doctest::Approx(4.0));
  }
}

TEST_CASE("moment bound witness under linear_ou") {
  auto m = preset(PresetName::linear_ou, 8);
  auto s = ScaleParams::from_exponent(0.1, 2.0);
  auto g = TimeGrid::make(1.0, 100, s);
  double worst = 0.0;
  for (double amp : {0.5, 1.0, 2.0}) {
    auto x = SpectralField::unit(8, 1, amp), y = SpectralField::unit(8, 2, amp);
    double acc = 0.0;
    const int paths = 40;
    for (int p = 0; p < paths; ++p) {
      auto tr = simulate_pair(x, y, m, s, g, {8, static_cast<std::uint64_t>(p)});
      double sup = 0.0;
      for (const auto& xi : tr.x) sup = std::max(sup, inner(xi, xi));
      acc += (sup + tr.v_integral) / paths;
    }
    worst = std::max(worst, acc / (1.0 + inner(x, x) + inner(y, y)));
  }
  MESSAGE("moment witness C = " << worst);
  CHECK(std::isfinite(worst));
  CHECK(worst < 10.0);
}

TEST_CASE("tilted sampling: zero tilt is the plain run, weights average to one") {
  auto m = preset(PresetName::decoupled_small_noise, 1);
  auto s = ScaleParams::from_exponent(0.2, 2.0);
  auto g = TimeGrid::make(1.0, 64, s);
  const SpectralField x{0.3}, y{0.0};
  const StreamKey key{11, 4};
  auto plain = simulate_pair(x, y, m, s, g, key);
  auto zero = simulate_tilted(x, y, m, s, g, Control(1.0, 4, 1), key);
  CHECK(plain.x == zero.x);
  CHECK(zero.control_energy == 0.0);

  // E_Q[dP/dQ] = 1 for any tilt; the shifted law moves the mean of X_T.
  const Control u = Control::constant(1.0, 4, SpectralField{1.5});
  std::vector<double> w;
  double shift = 0.0;
  for (std::uint64_t i = 0; i < 4000; ++i) {
    auto t = simulate_tilted(x, y, m, s, g, u, {12, i});
    w.push_back(std::exp(-t.control_noise_integral / std::sqrt(s.epsilon) -
                         t.control_energy / (2.0 * s.epsilon)));
    shift += t.x.back()[0] / 4000.0;
  }
  double mean = 0.0, sq = 0.0;
  for (double v : w) mean += v / 4000.0;
  for (double v : w) sq += (v - mean) * (v - mean) / 3999.0;
  CHECK(std::abs(mean - 1.0) <= 3.0 * std::sqrt(sq / 4000.0));
  // Deterministic part of the shift: sum_n e^{-lambda (T - t_n)} u dt, the
  // left-point rule of the Girsanov drift.
  const double lambda = pi * pi, dt = 1.0 / 64;
  double drift = 0.0;
  for (int n = 0; n < 64; ++n) drift += std::exp(-lambda * dt * (64 - n)) * 1.5 * dt;
  // sd of X_T is about sqrt(eps G) = 0.1, so the mean of 4000 has SE 0.0016.
  CHECK(std::abs(shift - (x[0] * std::exp(-lambda) + drift)) <= 5.0 * 0.0016);
}
