#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "sfb/cli.hpp"
#include "sfb/experiments.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run sfb_run(std::vector<std::string> args) {
  args.insert(args.begin(), "sfb");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = sfb::cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("sfb_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::vector<fs::path> files_in(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> v;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext) v.push_back(e.path());
  return v;
}

}  // namespace

TEST_CASE("cli: usage errors exit 2") {
  CHECK(sfb_run({}).code == 2);
  CHECK(sfb_run({"bogus"}).code == 2);
  auto r = sfb_run({"simulate", "--no-such-flag"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("sfb: error[usage]:", 0) == 0);
  CHECK(sfb_run({"check", "--preset", "nope"}).code == 2);
  CHECK(sfb_run({"check", "--param", "kappa"}).code == 2);
  CHECK(sfb_run({"experiment", "--protocol", "nope"}).code == 2);
}

TEST_CASE("cli: help exits 0") {
  auto r = sfb_run({"--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("experiment") != std::string::npos);
  CHECK(sfb_run({"rate", "--help"}).code == 0);
}

TEST_CASE("cli: config errors name the field") {
  auto dir = scratch("config");
  put(dir / "a.json", R"({"model":{"presett":"linear_ou"}})");
  auto r = sfb_run({"check", "--config", (dir / "a.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("model.presett") != std::string::npos);

  put(dir / "b.json", R"({"simulate":{"epsilon":"big"}})");
  r = sfb_run({"simulate", "--config", (dir / "b.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("simulate.epsilon") != std::string::npos);

  put(dir / "c.json", R"({"experiment":{"ensembel":3}})");
  r = sfb_run({"experiment", "--config", (dir / "c.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("experiment.ensembel") != std::string::npos);

  put(dir / "d.json", "{\"seed\": ");
  r = sfb_run({"check", "--config", (dir / "d.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("byte") != std::string::npos);

  r = sfb_run({"check", "--config", (dir / "missing.json").string()});
  CHECK(r.code == 8);
}

TEST_CASE("cli: check reports conditions and their exit code") {
  auto r = sfb_run({"check", "--preset", "linear_ou"});
  CHECK(r.code == 0);
  CHECK(r.out.find("all conditions hold") != std::string::npos);

  // g_y = 12 exceeds lambda_1, so the dissipativity margin is negative.
  r = sfb_run({"check", "--preset", "lipschitz_saturating", "--param", "g_y=12"});
  CHECK(r.code == 4);
  CHECK(r.err.find("error[condition_violation]") != std::string::npos);
}

TEST_CASE("cli: A3 gate and override") {
  auto dir = scratch("a3");
  const std::vector<std::string> base{"simulate", "--preset", "lipschitz_saturating", "--param",
                                      "g_y=12", "-N", "2", "--steps", "8", "--out", dir.string()};
  CHECK(sfb_run(base).code == 4);
  CHECK(files_in(dir, ".json").empty());
  auto with = base;
  with.push_back("--allow-a3-violation");
  auto r = sfb_run(with);
  CHECK(r.code == 0);
  CHECK(r.err.find("warning") != std::string::npos);
}

TEST_CASE("cli: invalid shapes and preconditions exit 3") {
  auto dir = scratch("shape");
  CHECK(sfb_run({"simulate", "-N", "2", "--x0", "1,2,3", "--out", dir.string()}).code == 3);
  CHECK(sfb_run({"simulate", "--epsilon", "1.5", "--out", dir.string()}).code == 3);
  CHECK(sfb_run({"experiment", "--epsilons", "0.1,0.2", "--out", dir.string()}).code == 3);
}

TEST_CASE("cli: simulate output is deterministic and flags override the config") {
  auto d1 = scratch("sim1");
  auto d2 = scratch("sim2");
  put(d1 / "cfg.json", R"({"model":{"n_modes":4},"seed":5,"simulate":{"epsilon":0.5,"n_steps":32}})");
  auto r1 = sfb_run({"simulate", "--config", (d1 / "cfg.json").string(), "--out", d1.string()});
  auto r2 = sfb_run({"simulate", "-N", "4", "--seed", "5", "--epsilon", "0.5", "--steps", "32",
                     "--out", d2.string()});
  REQUIRE(r1.code == 0);
  REQUIRE(r2.code == 0);
  auto f1 = files_in(d1, ".json");
  auto f2 = files_in(d2, ".json");
  f1.erase(std::remove_if(f1.begin(), f1.end(), [](auto& p) { return p.filename() == "cfg.json"; }),
           f1.end());
  REQUIRE(f1.size() == 1);
  REQUIRE(f2.size() == 1);
  CHECK(f1[0].filename() == f2[0].filename());
  CHECK(slurp(f1[0]) == slurp(f2[0]));

  auto j = nlohmann::json::parse(slurp(f1[0]));
  CHECK(j["format"] == "sfb.trajectory");
  CHECK(j["x"].size() == 33);
  CHECK(j["x"][0].size() == 4);

  // The flag wins over the file.
  auto d3 = scratch("sim3");
  auto r3 = sfb_run({"simulate", "--config", (d1 / "cfg.json").string(), "--epsilon", "0.25",
                     "--out", d3.string()});
  REQUIRE(r3.code == 0);
  auto j3 = nlohmann::json::parse(slurp(files_in(d3, ".json").at(0)));
  CHECK(j3["config"]["simulate"]["epsilon"] == 0.25);
  CHECK(j3["config"]["simulate"]["n_steps"] == 32);
}

TEST_CASE("cli: experiment writes a loadable record and reruns are idempotent") {
  auto dir = scratch("exp");
  const std::vector<std::string> args{"experiment", "--protocol", "averaging", "-N", "4",
                                      "--ensemble", "16", "--steps", "32", "--epsilons", "0.5,0.25",
                                      "--out", dir.string()};
  auto r = sfb_run(args);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("sup_gap") != std::string::npos);
  auto recs = files_in(dir, ".json");
  REQUIRE(recs.size() == 1);
  const std::string first = slurp(recs[0]);
  auto rec = sfb::load(recs[0]);
  CHECK(rec.protocol == "averaging");
  CHECK(rec.series("sup_gap").size() == 2);
  CHECK(fs::exists(recs[0].parent_path() / (recs[0].stem().string() + ".csv")));

  REQUIRE(sfb_run(args).code == 0);
  CHECK(slurp(recs[0]) == first);

  // A record with the same name but different bytes is never overwritten.
  put(recs[0], first + " ");
  CHECK(sfb_run(args).code == 8);
}

TEST_CASE("cli: failed protocol checks exit 9") {
  auto dir = scratch("exp9");
  // With no noise in either equation and no slow/fast coupling, the gap is the
  // same at both eps and the strict-decrease check cannot pass.
  auto r = sfb_run({"experiment", "--protocol", "auxiliary_error", "-N", "2", "--param",
                    "sigma1=0", "--param", "sigma2=0", "--param", "kappa=0", "--ensemble", "4",
                    "--steps", "16", "--epsilons", "0.5,0.25", "--out", dir.string()});
  CHECK(r.code == 9);
  CHECK(r.out.find("FAIL") != std::string::npos);
  CHECK(files_in(dir, ".json").size() == 1);
}

TEST_CASE("cli: rate compares against the linear oracle") {
  auto dir = scratch("rate");
  auto r = sfb_run({"rate", "--preset", "decoupled_small_noise", "-N", "1", "--endpoint", "0.45",
                    "--radius", "0.05", "--knots", "16", "--starts", "2", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("LQ oracle") != std::string::npos);
  auto j = nlohmann::json::parse(slurp(files_in(dir, ".json").at(0)));
  CHECK(j["converged"] == true);
  CHECK(std::abs(j["value"].get<double>() - j["lq_oracle"].get<double>()) <
        0.05 * j["lq_oracle"].get<double>());
}

TEST_CASE("cli: frozen and skeleton") {
  auto dir = scratch("frz");
  auto r = sfb_run({"frozen", "-N", "2", "--horizon", "20", "--mixing", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("closed form") != std::string::npos);
  CHECK(r.out.find("eta") != std::string::npos);
  r = sfb_run({"skeleton", "-N", "4", "--steps", "64", "--control", "1", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(files_in(dir, ".json").size() == 2);
}
