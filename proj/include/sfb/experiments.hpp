#pragma once

// Monte Carlo protocols over the simulators (averaging, Khasminskii block
// scaling, auxiliary error, controlled convergence, small-noise tails) and
// the versioned run-record format they write.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sfb/model.hpp"

namespace sfb {

enum class Protocol { averaging, khasminskii_scaling, auxiliary_error, controlled_convergence, ldp_tail };

std::string_view protocol_name(Protocol p);
Protocol parse_protocol(std::string_view name);  // usage error when unknown

inline constexpr int record_version = 1;
inline constexpr std::string_view record_format = "sfb.run_record";
inline constexpr std::string_view software_version = "0.1.0";

struct ExperimentPlan {
  Protocol protocol = Protocol::averaging;
  PresetName preset = PresetName::linear_ou;
  PresetParams params;
  std::size_t n_modes = 16;
  std::vector<double> epsilons{0.1, 0.05, 0.02, 0.01};  // strictly decreasing, in (0, 1]
  double delta_exponent = 2.0;                          // delta = eps^p, p > 1
  std::size_t ensemble = 0;                             // 0: 200, or 2000 for ldp_tail
  std::uint64_t seed = 1;
  double horizon = 1.0;
  std::size_t n_steps = 512;                            // slow steps on [0, T]
  std::vector<double> x0;                               // empty: e_1 (ldp_tail: 0)
  std::vector<double> y0;                               // empty: 0
  std::optional<double> guard_radius;                   // khasminskii: default 10(1+|x|+|y|)
  std::vector<double> blocks;                           // Delta grid; empty: 2^-4 .. 2^-9
  std::vector<double> control;                          // constant u; empty: 2 e_1 / sqrt(T)
  std::vector<double> target;                           // ball centre; empty: 0.45 e_1
  double radius = 0.05;
  std::size_t rate_knots = 64;
  double fbar_horizon = 50.0;                           // time-average window, nonlinear fbar
  double fbar_dt = 0.01;
  bool allow_a3_violation = false;

  // Runtime knobs. They do not change results and stay out of the record.
  std::size_t threads = 1;
  std::string output_dir;
};

// Fills protocol defaults so that the plan written to a record is complete.
ExperimentPlan resolve_plan(ExperimentPlan plan);

// Throws precondition (value constraints) or invalid_field (shapes).
void validate_plan(const ExperimentPlan& plan);

nlohmann::json plan_to_json(const ExperimentPlan& plan);
// Reads the keys present in j over `base`. Unknown keys and type errors are
// usage errors naming the field path (prefix + key).
ExperimentPlan plan_from_json(const nlohmann::json& j, ExperimentPlan base = {},
                              const std::string& prefix = "");

// FNV-1a 64 over the compact JSON of the plan, as 16 hex digits.
std::string plan_hash(const ExperimentPlan& plan);

struct Statistic {
  double epsilon = 0.0;
  double delta = 0.0;
  std::optional<double> block;  // Khasminskii Delta, where the statistic depends on it
  std::string name;
  double mean = 0.0;            // or median, or an exact value (n = 0)
  double stderr_ = 0.0;
  std::size_t n = 0;

  friend bool operator==(const Statistic&, const Statistic&) = default;
};

struct FitResult {
  std::string name;
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_ = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double r2 = 0.0;
  std::size_t n = 0;

  friend bool operator==(const FitResult&, const FitResult&) = default;
};

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;

  friend bool operator==(const Check&, const Check&) = default;
};

struct Manifest {
  std::string software{software_version};
  std::uint64_t seed = 0;
  double horizon = 0.0;
  std::size_t n_steps = 0;
  std::size_t n_modes = 0;
  std::string simd;

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct RunRecord {
  int version = record_version;
  std::string protocol;
  std::string plan_hash;
  nlohmann::json plan;
  Manifest manifest;
  std::vector<Statistic> statistics;
  std::vector<FitResult> fits;
  std::map<std::string, double> values;
  std::vector<Check> checks;
  std::vector<std::string> flags;

  bool passed() const;
  const Statistic* find(std::string_view name, double epsilon) const;
  std::vector<const Statistic*> series(std::string_view name) const;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

// Progress lines for a human (the CLI sends them to stderr).
using Progress = std::function<void(const std::string&)>;

RunRecord run_averaging(const ExperimentPlan& plan, const Progress& progress = {});
RunRecord run_khasminskii(const ExperimentPlan& plan, const Progress& progress = {});
RunRecord run_auxiliary_error(const ExperimentPlan& plan, const Progress& progress = {});
RunRecord run_controlled_convergence(const ExperimentPlan& plan, const Progress& progress = {});
RunRecord run_ldp_tail(const ExperimentPlan& plan, const Progress& progress = {});
// Dispatches on plan.protocol.
RunRecord run_experiment(const ExperimentPlan& plan, const Progress& progress = {});

nlohmann::json record_to_json(const RunRecord& record);
// Throws format errors naming the field, version_mismatch for other versions.
RunRecord record_from_json(const nlohmann::json& j);
std::string serialize(const RunRecord& record);

// Writes the record (pretty JSON) and a CSV summary next to it, then appends
// one line to ledger.jsonl in the same directory. An existing file is only
// accepted when its bytes are identical: records are never rewritten.
void persist(const RunRecord& record, const std::filesystem::path& path);
// ParseError carries the byte offset of a syntax error.
RunRecord load(const std::filesystem::path& path);

// Columns: epsilon,delta,block,statistic,mean,stderr,n
std::string csv_summary(const RunRecord& record);

// Default record file name: <protocol>-<plan hash>.json
std::string record_file_name(const RunRecord& record);

// FNV-1a 64 of the bytes, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

// Writes bytes to path through a temporary file. An existing file is left
// alone when it already holds these bytes; different content is an io error.
void write_once(const std::filesystem::path& path, const std::string& bytes);

}  // namespace sfb
