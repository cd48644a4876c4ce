#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "sfb/errors.hpp"
#include "sfb/experiments.hpp"

using namespace sfb;
namespace fs = std::filesystem;

namespace {

ExperimentPlan small(Protocol p) {
  ExperimentPlan plan;
  plan.protocol = p;
  plan.n_modes = 4;
  plan.epsilons = {0.5, 0.25};
  plan.ensemble = 24;
  plan.n_steps = 64;
  plan.seed = 7;
  return plan;
}

ErrorCategory category_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  FAIL("expected an error");
  return ErrorCategory::usage;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("sfb_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("plan validation") {
  auto p = small(Protocol::averaging);
  CHECK_NOTHROW(validate_plan(resolve_plan(p)));
  auto e0 = p;
  e0.epsilons = {0.1, 0.0};
  CHECK(category_of([&] { validate_plan(resolve_plan(e0)); }) == ErrorCategory::precondition);
  auto up = p;
  up.epsilons = {0.1, 0.2};
  CHECK(category_of([&] { validate_plan(resolve_plan(up)); }) == ErrorCategory::precondition);
  auto flat = p;
  flat.delta_exponent = 1.0;
  CHECK(category_of([&] { validate_plan(resolve_plan(flat)); }) == ErrorCategory::precondition);
  auto wide = p;
  wide.x0 = std::vector<double>(9, 0.1);
  CHECK(category_of([&] { validate_plan(resolve_plan(wide)); }) == ErrorCategory::invalid_field);
  auto ctrl = small(Protocol::controlled_convergence);
  ctrl.epsilons = {0.0};
  CHECK(category_of([&] { run_controlled_convergence(ctrl); }) == ErrorCategory::precondition);
}

TEST_CASE("resolved defaults") {
  auto k = resolve_plan(small(Protocol::khasminskii_scaling));
  REQUIRE(k.blocks.size() == 6);
  CHECK(k.blocks.front() == 0.0625);
  CHECK(k.blocks.back() == std::ldexp(1.0, -9));
  REQUIRE(k.guard_radius.has_value());
  CHECK(*k.guard_radius == doctest::Approx(20.0));  // 10 (1 + |e_1| + 0)
  auto t = resolve_plan(ExperimentPlan{.protocol = Protocol::ldp_tail});
  CHECK(t.ensemble == 2000);
  CHECK(t.x0 == std::vector<double>(16, 0.0));
  CHECK(resolve_plan(ExperimentPlan{}).ensemble == 200);
  auto c = resolve_plan(small(Protocol::controlled_convergence));
  CHECK(c.control == std::vector<double>{2.0});
}

TEST_CASE("plan JSON round trip and field-path errors") {
  auto p = resolve_plan(small(Protocol::ldp_tail));
  p.params.kappa = 0.5;
  p.guard_radius = 30.0;
  const auto j = plan_to_json(p);
  const auto back = plan_from_json(j);
  CHECK(plan_to_json(back) == j);
  CHECK(plan_hash(back) == plan_hash(p));
  auto other = p;
  other.seed = 8;
  CHECK(plan_hash(other) != plan_hash(p));
  // Runtime knobs do not enter the record.
  auto threaded = p;
  threaded.threads = 4;
  threaded.output_dir = "/elsewhere";
  CHECK(plan_hash(threaded) == plan_hash(p));

  auto usage_message = [](const nlohmann::json& bad) {
    try {
      plan_from_json(bad, {}, "experiment");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::usage);
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(usage_message({{"epsilonz", {0.1}}}).find("experiment.epsilonz") != std::string::npos);
  CHECK(usage_message({{"epsilons", {0.1, "x"}}}).find("experiment.epsilons[1]") != std::string::npos);
  CHECK(usage_message({{"ensemble", -3}}).find("experiment.ensemble") != std::string::npos);
  CHECK(usage_message({{"params", {{"kapa", 1.0}}}}).find("experiment.params.kapa") != std::string::npos);
  CHECK(usage_message({{"protocol", "nope"}}).find("experiment.protocol") != std::string::npos);
}

TEST_CASE("averaging protocol: deterministic, thread-independent, shrinking error bars") {
  auto p = small(Protocol::averaging);
  auto a = run_averaging(p);
  auto b = run_averaging(p);
  CHECK(serialize(a) == serialize(b));
  auto threaded = p;
  threaded.threads = 3;
  CHECK(serialize(run_averaging(threaded)) == serialize(a));

  const auto s = a.series("sup_gap");
  REQUIRE(s.size() == 2);
  for (const auto* st : s) {
    CHECK(st->n == 24);
    CHECK(st->stderr_ > 0.0);
    CHECK(st->delta == doctest::Approx(st->epsilon * st->epsilon));
  }
  REQUIRE(a.checks.size() == 1);
  CHECK(a.checks[0].name == "sup_gap_decreasing");

  // Quadrupling the ensemble halves the standard error (CLT).
  auto big = p;
  big.ensemble = 96;
  big.epsilons = {0.5};
  auto one = p;
  one.epsilons = {0.5};
  const double ratio = run_averaging(big).series("sup_gap")[0]->stderr_ /
                       run_averaging(one).series("sup_gap")[0]->stderr_;
  CHECK(ratio == doctest::Approx(0.5).epsilon(0.35));
}

TEST_CASE("averaging without noise or coupling: the gap is the scheme gap, independent of eps") {
  auto p = small(Protocol::averaging);
  p.preset = PresetName::decoupled_small_noise;
  p.params.sigma1 = 0.0;
  p.x0 = {0.8, -0.3, 0.2, 0.1};
  auto r = run_averaging(p);
  const auto s = r.series("sup_gap");
  REQUIRE(s.size() == 2);
  CHECK(s[0]->mean == s[1]->mean);
  CHECK(s[0]->mean <= 1e-12);
  CHECK(s[0]->stderr_ == 0.0);
}

TEST_CASE("khasminskii protocol") {
  auto p = small(Protocol::khasminskii_scaling);
  p.n_steps = 512;
  p.epsilons = {0.3};
  p.blocks = {1.0 / 16, 1.0 / 32, 1.0 / 64, 1.0 / 128};
  auto r = run_khasminskii(p);
  const auto inc = r.series("x_block_increment");
  REQUIRE(inc.size() == 4);
  for (std::size_t i = 0; i + 1 < inc.size(); ++i) CHECK(inc[i + 1]->mean < inc[i]->mean);
  REQUIRE(r.fits.size() == 1);
  CHECK(r.fits[0].ci_low <= r.fits[0].slope);
  CHECK(r.fits[0].slope <= r.fits[0].ci_high);
  CHECK(r.fits[0].n == 4);
  CHECK(r.series("aux_y_gap").size() == 1);

  SUBCASE("fast equation blind to x: Y and Y^ coincide") {
    auto q = p;
    q.params.kappa = 0.0;
    auto rr = run_khasminskii(q);
    CHECK(rr.series("aux_y_gap")[0]->mean == 0.0);
  }
  SUBCASE("a guard that stops most paths fails and advises a larger radius") {
    auto q = p;
    q.guard_radius = 1.05;
    auto rr = run_khasminskii(q);
    bool found = false;
    for (const auto& c : rr.checks)
      if (c.name == "guard_truncation") {
        found = true;
        CHECK_FALSE(c.passed);
        CHECK(c.detail.find("increase guard_radius") != std::string::npos);
      }
    CHECK(found);
    CHECK_FALSE(rr.flags.empty());
  }
}

TEST_CASE("controlled convergence with u = 0 decomposes the averaging gap") {
  auto p = small(Protocol::controlled_convergence);
  p.control = {0.0};
  auto c = run_controlled_convergence(p);
  auto a = run_averaging(small(Protocol::averaging));
  // Same streams, so path by path sup|X - Xbar| <= sup|X - X^| + sup|X^ - Xbar|.
  for (double eps : {0.5, 0.25}) {
    const double lhs = a.find("sup_gap", eps)->mean;
    const double rhs = c.find("mean_sup_x_minus_xhat", eps)->mean +
                       c.find("mean_sup_xhat_minus_xbar", eps)->mean;
    CHECK(lhs <= rhs + 1e-12);
  }
  CHECK(c.values.at("control_energy") == 0.0);
  auto u = small(Protocol::controlled_convergence);
  CHECK(run_controlled_convergence(u).values.at("control_energy") == doctest::Approx(4.0));
}

TEST_CASE("tail protocol: trivial events") {
  auto p = small(Protocol::ldp_tail);
  p.preset = PresetName::decoupled_small_noise;
  p.n_modes = 1;
  p.rate_knots = 8;
  p.ensemble = 50;
  p.x0 = {0.0};
  SUBCASE("huge ball: P = 1") {
    p.radius = 100.0;
    auto r = run_ldp_tail(p);
    CHECK(r.values.at("rate_value") == 0.0);
    for (const auto* s : r.series("neg_eps_log_p_raw")) CHECK(s->mean == 0.0);
    for (const auto* s : r.series("hit_probability_tilted")) CHECK(s->mean == 1.0);
    CHECK(r.flags.empty());
  }
  SUBCASE("ball on the free flow: I* = 0") {
    p.target = {0.0};
    p.radius = 0.1;
    p.epsilons = {0.5, 0.1};
    p.ensemble = 400;
    auto r = run_ldp_tail(p);
    CHECK(r.values.at("rate_value") == 0.0);
    // A typical event: -eps log P -> 0 (about 0.38 at eps = 0.5, 0.02 at 0.1).
    const auto s = r.series("neg_eps_log_p_raw");
    REQUIRE(s.size() == 2);
    CHECK(s[1]->mean < s[0]->mean);
    CHECK(s[1]->mean < 0.05);
  }
  SUBCASE("displaced ball: oracle and exact tail are reported") {
    p.ensemble = 400;
    p.epsilons = {0.2};
    p.rate_knots = 32;
    auto r = run_ldp_tail(p);
    CHECK(r.values.at("rate_value") == doctest::Approx(r.values.at("lq_oracle_value")).epsilon(0.02));
    REQUIRE(r.find("hit_probability_exact", 0.2));
    const auto* t = r.find("hit_probability_tilted", 0.2);
    const auto* e = r.find("hit_probability_exact", 0.2);
    CHECK(std::abs(t->mean - e->mean) <= 3.0 * t->stderr_);
  }
}

TEST_CASE("persist and load") {
  auto dir = scratch("persist");
  auto r = run_averaging(small(Protocol::averaging));
  const auto path = dir / record_file_name(r);
  persist(r, path);
  CHECK(load(path) == r);
  CHECK(record_from_json(record_to_json(r)) == r);

  // Same bytes again: accepted, ledger grows.
  persist(r, path);
  std::ifstream ledger(dir / "ledger.jsonl");
  int lines = 0;
  for (std::string line; std::getline(ledger, line);) ++lines;
  CHECK(lines == 2);

  auto csv = path;
  csv.replace_extension(".csv");
  const auto text = slurp(csv);
  CHECK(text.rfind("epsilon,delta,block,statistic,mean,stderr,n\n", 0) == 0);

  SUBCASE("different content under the same name is refused") {
    auto changed = r;
    changed.flags.push_back("x");
    CHECK(category_of([&] { persist(changed, path); }) == ErrorCategory::io);
  }
  SUBCASE("corrupted file names the byte offset") {
    auto bad = dir / "bad.json";
    std::string s = slurp(path);
    s.insert(1, "@");
    std::ofstream(bad, std::ios::binary) << s;
    try {
      load(bad);
      FAIL("no parse error");
    } catch (const ParseError& e) {
      CHECK(e.byte_offset() == 2);
      CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
  }
  SUBCASE("other versions ask for a migration") {
    auto j = record_to_json(r);
    j["version"] = 2;
    auto v2 = dir / "v2.json";
    std::ofstream(v2) << j.dump();
    try {
      load(v2);
      FAIL("no version error");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::version_mismatch);
      CHECK(std::string(e.what()).find("migrate") != std::string::npos);
    }
  }
  SUBCASE("missing fields are format errors naming the field") {
    auto j = record_to_json(r);
    j["statistics"][1].erase("stderr");
    try {
      record_from_json(j);
      FAIL("no format error");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::format);
      CHECK(std::string(e.what()).find("statistics[1].stderr") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}
