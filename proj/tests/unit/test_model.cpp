#include <cmath>
#include <numbers>

#include "doctest.h"
#include "sfb/errors.hpp"
#include "sfb/model.hpp"

using namespace sfb;
using std::numbers::pi;

TEST_CASE("A3 arithmetic") {
  CHECK(check_a3(0.0, 0.0).holds);
  CHECK_FALSE(check_a3(pi * pi, 0.3).holds);
  CHECK_FALSE(check_a3(pi * pi, 0.0).holds);
  const auto r = check_a3(1.0, 2.0);
  CHECK(r.holds);
  CHECK(r.lhs == doctest::Approx(4.0 / (pi * pi) + 1.0 / (pi * pi - 1.0)));
  CHECK(r.lhs == doctest::Approx(0.518).epsilon(1e-3));
  CHECK(r.margin == doctest::Approx(pi * pi - 1.0));
}

TEST_CASE("presets") {
  auto ou = preset(PresetName::linear_ou, 8);
  REQUIRE(ou.coeffs->has_closed_form_fbar());
  SpectralField e1 = SpectralField::unit(8, 1), out(8);
  ou.coeffs->fbar(e1.coeffs(), out.coeffs());
  CHECK(out[0] == doctest::Approx(1.0 / (pi * pi)).epsilon(1e-15));
  CHECK(out[0] == doctest::Approx(0.101321).epsilon(1e-6));
  for (std::size_t i = 1; i < 8; ++i) CHECK(out[i] == 0.0);
  CHECK(ou.noise.q1[2] == doctest::Approx(1.0 / 9.0));

  auto dec = preset(PresetName::decoupled_small_noise, 8);
  SpectralField x{1, 2, 3, 4, 5, 6, 7, 8};
  dec.coeffs->fbar(x.coeffs(), out.coeffs());
  CHECK(out == SpectralField(8));

  CHECK(check_conditions(ou, 1000).a3.holds);
  CHECK(parse_preset("lipschitz_saturating") == PresetName::lipschitz_saturating);
  try {
    parse_preset("nope");
    FAIL("expected usage error");
  } catch (const Error& e) {
    CHECK(e.category() == ErrorCategory::usage);
  }
}

TEST_CASE("property: presets respect their declared constants over 1e4 pairs") {
  for (auto p : {PresetName::linear_ou, PresetName::lipschitz_saturating,
                 PresetName::decoupled_small_noise}) {
    auto m = preset(p, 16);
    auto rep = check_conditions(m, 10000, 99);
    CAPTURE(preset_name(p));
    CHECK(rep.samples == 10000);
    for (const auto& w : rep.a1) {
      CAPTURE(w.coefficient);
      CHECK_FALSE(w.violated);
    }
    CHECK_FALSE(rep.a2.violated);
    CHECK(rep.a3.holds);
    CHECK(rep.traces_finite);
    CHECK(rep.all_hold());
  }
}

TEST_CASE("understated constants are reported, not thrown") {
  auto m = preset(PresetName::lipschitz_saturating, 8);
  DeclaredConstants d = m.declared();
  d.L_f *= 0.5;
  m.declared_override = d;
  auto rep = check_conditions(m, 1000);
  CHECK(rep.a1[0].violated);
  CHECK_FALSE(rep.all_hold());
}

TEST_CASE("trace bounds include the tail") {
  auto n = NoiseSpec::power_law(10);
  double s = 0.0;
  for (int k = 1; k <= 10; ++k) s += 1.0 / (k * k);
  CHECK(n.trace_bound1() == doctest::Approx(s + 0.1));
  CHECK(n.trace_bound1() >= pi * pi / 6.0);
}

TEST_CASE("scale parameters") {
  auto s = ScaleParams::from_exponent(0.1, 2.0);
  CHECK(s.delta == doctest::Approx(0.01));
  CHECK(s.khasminskii_block() == doctest::Approx(0.1));
  CHECK_THROWS_AS(ScaleParams::from_exponent(0.0, 2.0), Error);
  CHECK_THROWS_AS(ScaleParams::from_exponent(0.5, 1.0), Error);
  CHECK_THROWS_AS(ScaleParams::from_exponent(1.5, 2.0), Error);
}
