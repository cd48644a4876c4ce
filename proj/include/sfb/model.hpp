#pragma once

// Coefficient bundles (f, g, sigma1, sigma2, Q1, Q2), scale parameters, the
// well-posedness condition checker, and the named benchmark presets.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sfb/spectral.hpp"

namespace sfb {

// Mode-diagonal trace-class covariances. q_k = amplitude * k^{-decay}.
struct NoiseSpec {
  std::vector<double> q1;
  std::vector<double> q2;
  double decay1 = 2.0;
  double decay2 = 2.0;

  static NoiseSpec power_law(std::size_t n_modes, double decay = 2.0, double amp1 = 1.0,
                             double amp2 = 1.0);

  std::size_t size() const noexcept { return q1.size(); }

  // Upper bound on the full (untruncated) trace: the truncated sum plus the
  // integral tail bound sum_{k>N} k^{-p} <= N^{1-p} / (p - 1), scaled by the
  // amplitude read off q_1.
  double trace_bound1() const;
  double trace_bound2() const;
};

// Lipschitz and growth constants a coefficient set declares for itself.
// g_x and sigma2_x are the constants multiplying |x1 - x2| in the g and
// sigma2 bounds; growth2 is the sup_y ||sigma2(x,y) Q2^{1/2}||_HS <= C(|x|+1)
// constant.
struct DeclaredConstants {
  double L_f = 0.0;
  double L_g = 0.0;
  double g_x = 0.0;
  double L_sigma1 = 0.0;
  double L_sigma2 = 0.0;
  double sigma2_x = 0.0;
  double growth2 = 0.0;
};

// f, g: H x H -> H. sigma1 and sigma2 are scalar multipliers composed with the
// mode-diagonal Q^{1/2}, so sigma1(x) Q1^{1/2} maps e_k to sigma1(x) sqrt(q1_k) e_k.
class CoefficientSet {
 public:
  virtual ~CoefficientSet() = default;

  virtual std::string_view name() const = 0;

  virtual void f(std::span<const double> x, std::span<const double> y,
                 std::span<double> out) const = 0;
  virtual void g(std::span<const double> x, std::span<const double> y,
                 std::span<double> out) const = 0;
  virtual double sigma1(std::span<const double> x) const = 0;
  virtual double sigma2(std::span<const double> x, std::span<const double> y) const = 0;

  // Constants for a given noise (HS norms involve the traces of Q1, Q2).
  virtual DeclaredConstants declared(const NoiseSpec& noise) const = 0;

  virtual bool f_is_zero() const { return false; }
  virtual bool sigma1_is_constant() const { return false; }
  virtual bool g_depends_on_x() const { return true; }
  virtual bool sigma2_depends_on_x() const { return true; }

  // Averaged drift in closed form, available when the frozen invariant measure
  // is known explicitly.
  virtual bool has_closed_form_fbar() const { return false; }
  virtual void fbar(std::span<const double> x, std::span<double> out) const;
  // Transposed Jacobian of the closed-form averaged drift applied to w.
  virtual void fbar_jacobian_transpose(std::span<const double> x, std::span<const double> w,
                                       std::span<double> out) const;

  // Named numeric parameters, for records and summaries.
  virtual std::vector<std::pair<std::string, double>> parameters() const = 0;
};

enum class PresetName { linear_ou, lipschitz_saturating, decoupled_small_noise };

std::string_view preset_name(PresetName p);
// Throws a usage error for unknown names.
PresetName parse_preset(std::string_view name);

// Optional overrides of preset coefficients. Unset fields keep the defaults.
struct PresetParams {
  std::optional<double> kappa;    // linear_ou: g(x, y) = kappa x
  std::optional<double> sigma1;   // sigma1 amplitude (all presets)
  std::optional<double> sigma2;   // sigma2 amplitude (all presets)
  std::optional<double> f_y;      // lipschitz_saturating: tanh(y) weight in f
  std::optional<double> f_x;      // lipschitz_saturating: tanh(x) weight in f
  std::optional<double> g_y;      // lipschitz_saturating: tanh(y) weight in g
  std::optional<double> g_x;      // lipschitz_saturating: tanh(x) weight in g
  std::optional<double> noise_decay;
};

struct Model {
  std::shared_ptr<const CoefficientSet> coeffs;
  NoiseSpec noise;
  // User-declared constants replace the coefficient set's own when present.
  std::optional<DeclaredConstants> declared_override;

  std::size_t n_modes() const noexcept { return noise.size(); }
  DeclaredConstants declared() const;
};

Model preset(PresetName name, std::size_t n_modes, const PresetParams& params = {});

// delta(eps) = eps^p with p > 1; the Khasminskii block is delta^{1/2}.
struct ScaleParams {
  double epsilon = 1.0;
  double delta = 1.0;

  // Requires eps in (0, 1] and p > 1.
  static ScaleParams from_exponent(double epsilon, double p);
  // Direct values, eps >= 0 and delta > 0; used for reductions and probes.
  static ScaleParams explicit_values(double epsilon, double delta);

  double khasminskii_block() const;
};

struct A3Result {
  bool holds = false;
  double margin = 0.0;  // lambda_1 - L_g
  double lhs = 0.0;     // L_sigma2^2 / lambda_1 + L_g / (lambda_1 - L_g); +inf if margin <= 0
};

A3Result check_a3(double L_g, double L_sigma2);

struct LipschitzWitness {
  std::string coefficient;
  double declared = 0.0;  // reported for orientation; the ratio is what is tested
  double sampled_sup = 0.0;  // sup of |diff| / (declared bound)
  bool violated = false;     // sampled_sup > 1.01
};

struct ConditionReport {
  std::vector<LipschitzWitness> a1;
  LipschitzWitness a2;
  A3Result a3;
  double trace1 = 0.0;
  double trace2 = 0.0;
  bool traces_finite = false;
  std::size_t samples = 0;

  bool all_hold() const;
};

// Samples at least `samples` random pairs. Violations are reported, never thrown.
ConditionReport check_conditions(const Model& model, std::size_t samples = 1000,
                                 std::uint64_t seed = 0x5eed);

}  // namespace sfb
