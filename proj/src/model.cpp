#include "sfb/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "sfb/errors.hpp"

namespace sfb {

namespace {

double trace_with_tail(const std::vector<double>& q, double decay) {
  double s = 0.0;
  for (double v : q) s += v;
  if (q.empty() || decay <= 1.0) return s;
  // q_1 = amplitude * 1^{-p}
  const double n = static_cast<double>(q.size());
  return s + q.front() * std::pow(n, 1.0 - decay) / (decay - 1.0);
}

double truncated_hs(const std::vector<double>& q) {
  double s = 0.0;
  for (double v : q) s += v;
  return std::sqrt(s);
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

class LinearOU final : public CoefficientSet {
 public:
  LinearOU(double kappa, double s1, double s2) : kappa_(kappa), s1_(s1), s2_(s2) {}
  std::string_view name() const override { return "linear_ou"; }
  void f(std::span<const double>, std::span<const double> y, std::span<double> out) const override {
    std::copy(y.begin(), y.end(), out.begin());
  }
  void g(std::span<const double> x, std::span<const double>, std::span<double> out) const override {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = kappa_ * x[i];
  }
  double sigma1(std::span<const double>) const override { return s1_; }
  double sigma2(std::span<const double>, std::span<const double>) const override { return s2_; }
  DeclaredConstants declared(const NoiseSpec& n) const override {
    DeclaredConstants c;
    c.L_f = 1.0;
    c.g_x = std::abs(kappa_);
    c.growth2 = std::abs(s2_) * std::sqrt(n.trace_bound2());
    return c;
  }
  bool sigma1_is_constant() const override { return true; }
  bool g_depends_on_x() const override { return kappa_ != 0.0; }
  bool sigma2_depends_on_x() const override { return false; }
  bool has_closed_form_fbar() const override { return true; }
  // The frozen equation is Ornstein-Uhlenbeck with mean kappa (-A)^{-1} x.
  void fbar(std::span<const double> x, std::span<double> out) const override {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = kappa_ * x[i] / eigenvalue(i + 1);
  }
  void fbar_jacobian_transpose(std::span<const double>, std::span<const double> w,
                               std::span<double> out) const override {
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = kappa_ * w[i] / eigenvalue(i + 1);
  }
  std::vector<std::pair<std::string, double>> parameters() const override {
    return {{"kappa", kappa_}, {"sigma1", s1_}, {"sigma2", s2_}};
  }

 private:
  double kappa_, s1_, s2_;
};

class DecoupledSmallNoise final : public CoefficientSet {
 public:
  DecoupledSmallNoise(double s1, double s2) : s1_(s1), s2_(s2) {}
  std::string_view name() const override { return "decoupled_small_noise"; }
  void f(std::span<const double>, std::span<const double>, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
  }
  void g(std::span<const double>, std::span<const double>, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
  }
  double sigma1(std::span<const double>) const override { return s1_; }
  double sigma2(std::span<const double>, std::span<const double>) const override { return s2_; }
  DeclaredConstants declared(const NoiseSpec& n) const override {
    DeclaredConstants c;
    c.growth2 = std::abs(s2_) * std::sqrt(n.trace_bound2());
    return c;
  }
  bool f_is_zero() const override { return true; }
  bool sigma1_is_constant() const override { return true; }
  bool g_depends_on_x() const override { return false; }
  bool sigma2_depends_on_x() const override { return false; }
  bool has_closed_form_fbar() const override { return true; }
  void fbar(std::span<const double>, std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
  }
  void fbar_jacobian_transpose(std::span<const double>, std::span<const double>,
                               std::span<double> out) const override {
    std::fill(out.begin(), out.end(), 0.0);
  }
  std::vector<std::pair<std::string, double>> parameters() const override {
    return {{"sigma1", s1_}, {"sigma2", s2_}};
  }

 private:
  double s1_, s2_;
};

// Mode-wise tanh maps have derivative bounded by one, so each term is
// 1-Lipschitz in H.
class LipschitzSaturating final : public CoefficientSet {
 public:
  LipschitzSaturating(double fy, double fx, double gy, double gx, double s1, double s2)
      : fy_(fy), fx_(fx), gy_(gy), gx_(gx), s1_(s1), s2_(s2) {}
  std::string_view name() const override { return "lipschitz_saturating"; }
  void f(std::span<const double> x, std::span<const double> y, std::span<double> out) const override {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fy_ * std::tanh(y[i]) + fx_ * std::tanh(x[i]);
  }
  void g(std::span<const double> x, std::span<const double> y, std::span<double> out) const override {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gy_ * std::tanh(y[i]) + gx_ * std::tanh(x[i]);
  }
  double sigma1(std::span<const double> x) const override {
    return s1_ * (1.0 + 0.5 * std::tanh(l2(x)));
  }
  double sigma2(std::span<const double> x, std::span<const double> y) const override {
    return s2_ * (1.0 + 0.25 * std::tanh(l2(x)) + 0.25 * std::tanh(l2(y)));
  }
  DeclaredConstants declared(const NoiseSpec& n) const override {
    const double hs1 = std::sqrt(n.trace_bound1());
    const double hs2 = std::sqrt(n.trace_bound2());
    DeclaredConstants c;
    c.L_f = std::max(std::abs(fy_), std::abs(fx_));
    c.L_g = std::abs(gy_);
    c.g_x = std::abs(gx_);
    c.L_sigma1 = 0.5 * std::abs(s1_) * hs1;
    c.L_sigma2 = 0.25 * std::abs(s2_) * hs2;
    c.sigma2_x = 0.25 * std::abs(s2_) * hs2;
    c.growth2 = 1.5 * std::abs(s2_) * hs2;
    return c;
  }
  bool g_depends_on_x() const override { return gx_ != 0.0; }
  std::vector<std::pair<std::string, double>> parameters() const override {
    return {{"f_y", fy_}, {"f_x", fx_}, {"g_y", gy_}, {"g_x", gx_}, {"sigma1", s1_}, {"sigma2", s2_}};
  }

 private:
  double fy_, fx_, gy_, gx_, s1_, s2_;
};

}  // namespace

void CoefficientSet::fbar(std::span<const double>, std::span<double>) const {
  fail(ErrorCategory::precondition,
       std::string(name()) + " has no closed-form averaged drift");
}

void CoefficientSet::fbar_jacobian_transpose(std::span<const double>, std::span<const double>,
                                             std::span<double>) const {
  fail(ErrorCategory::precondition,
       std::string(name()) + " has no closed-form averaged drift");
}

NoiseSpec NoiseSpec::power_law(std::size_t n_modes, double decay, double amp1, double amp2) {
  require(n_modes >= 1, "noise needs at least one mode");
  require(decay > 1.0, "noise decay exponent must exceed 1 for a finite trace");
  require(amp1 >= 0.0 && amp2 >= 0.0, "noise amplitudes must be nonnegative");
  NoiseSpec n;
  n.decay1 = n.decay2 = decay;
  n.q1.resize(n_modes);
  n.q2.resize(n_modes);
  for (std::size_t k = 1; k <= n_modes; ++k) {
    const double base = std::pow(static_cast<double>(k), -decay);
    n.q1[k - 1] = amp1 * base;
    n.q2[k - 1] = amp2 * base;
  }
  return n;
}

double NoiseSpec::trace_bound1() const { return trace_with_tail(q1, decay1); }
double NoiseSpec::trace_bound2() const { return trace_with_tail(q2, decay2); }

DeclaredConstants Model::declared() const {
  if (declared_override) return *declared_override;
  return coeffs->declared(noise);
}

std::string_view preset_name(PresetName p) {
  switch (p) {
    case PresetName::linear_ou: return "linear_ou";
    case PresetName::lipschitz_saturating: return "lipschitz_saturating";
    case PresetName::decoupled_small_noise: return "decoupled_small_noise";
  }
  return "unknown";
}

PresetName parse_preset(std::string_view name) {
  if (name == "linear_ou") return PresetName::linear_ou;
  if (name == "lipschitz_saturating") return PresetName::lipschitz_saturating;
  if (name == "decoupled_small_noise") return PresetName::decoupled_small_noise;
  fail(ErrorCategory::usage, "unknown preset '" + std::string(name) +
                                 "' (expected linear_ou, lipschitz_saturating or "
                                 "decoupled_small_noise)");
}

Model preset(PresetName name, std::size_t n_modes, const PresetParams& p) {
  Model m;
  m.noise = NoiseSpec::power_law(n_modes, p.noise_decay.value_or(2.0));
  const double s1 = p.sigma1.value_or(1.0);
  const double s2 = p.sigma2.value_or(1.0);
  switch (name) {
    case PresetName::linear_ou:
      m.coeffs = std::make_shared<LinearOU>(p.kappa.value_or(1.0), s1, s2);
      break;
    case PresetName::lipschitz_saturating:
      m.coeffs = std::make_shared<LipschitzSaturating>(p.f_y.value_or(1.0), p.f_x.value_or(0.5),
                                                       p.g_y.value_or(2.0), p.g_x.value_or(1.0),
                                                       s1, s2);
      break;
    case PresetName::decoupled_small_noise:
      m.coeffs = std::make_shared<DecoupledSmallNoise>(s1, s2);
      break;
  }
  return m;
}

ScaleParams ScaleParams::from_exponent(double epsilon, double p) {
  require(epsilon > 0.0 && epsilon <= 1.0, "epsilon must lie in (0, 1]");
  require(p > 1.0, "delta exponent must exceed 1 so that delta/epsilon -> 0");
  return {epsilon, std::pow(epsilon, p)};
}

ScaleParams ScaleParams::explicit_values(double epsilon, double delta) {
  require(epsilon >= 0.0 && epsilon <= 1.0, "epsilon must lie in [0, 1]");
  require(delta > 0.0, "delta must be positive");
  return {epsilon, delta};
}

double ScaleParams::khasminskii_block() const { return std::sqrt(delta); }

A3Result check_a3(double L_g, double L_sigma2) {
  constexpr double lambda1 = eigenvalue(1);
  A3Result r;
  r.margin = lambda1 - L_g;
  if (r.margin <= 0.0) {
    r.lhs = std::numeric_limits<double>::infinity();
    r.holds = false;
    return r;
  }
  r.lhs = L_sigma2 * L_sigma2 / lambda1 + L_g / r.margin;
  r.holds = r.lhs < 1.0;
  return r;
}

bool ConditionReport::all_hold() const {
  for (const auto& w : a1)
    if (w.violated) return false;
  return !a2.violated && a3.holds && traces_finite;
}

namespace {

double bound_ratio(double diff, double bound) {
  if (diff == 0.0) return 0.0;
  if (bound <= 0.0) return std::numeric_limits<double>::infinity();
  return diff / bound;
}

}  // namespace

ConditionReport check_conditions(const Model& model, std::size_t samples, std::uint64_t seed) {
  const std::size_t n = model.n_modes();
  const CoefficientSet& c = *model.coeffs;
  const DeclaredConstants d = model.declared();
  const double hs1 = truncated_hs(model.noise.q1);
  const double hs2 = truncated_hs(model.noise.q2);

  ConditionReport r;
  r.samples = samples;
  r.trace1 = model.noise.trace_bound1();
  r.trace2 = model.noise.trace_bound2();
  r.traces_finite = std::isfinite(r.trace1) && std::isfinite(r.trace2) &&
                    std::all_of(model.noise.q1.begin(), model.noise.q1.end(), [](double q) { return q >= 0; }) &&
                    std::all_of(model.noise.q2.begin(), model.noise.q2.end(), [](double q) { return q >= 0; });
  r.a3 = check_a3(d.L_g, d.L_sigma2);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  std::bernoulli_distribution near(0.5);

  auto draw = [&](std::vector<double>& v) {
    const double scale = std::pow(10.0, unif(rng));
    for (std::size_t k = 0; k < n; ++k) v[k] = scale * normal(rng) / static_cast<double>(k + 1);
  };
  auto perturb = [&](const std::vector<double>& base, std::vector<double>& v) {
    const double scale = std::pow(10.0, unif(rng) - 3.0);
    for (std::size_t k = 0; k < n; ++k) v[k] = base[k] + scale * normal(rng);
  };
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };

  double sup_f = 0.0, sup_g = 0.0, sup_s1 = 0.0, sup_s2 = 0.0, sup_a2 = 0.0;
  std::vector<double> x1(n), x2(n), y1(n), y2(n), o1(n), o2(n);
  for (std::size_t s = 0; s < samples; ++s) {
    draw(x1);
    draw(y1);
    if (near(rng)) {
      perturb(x1, x2);
      perturb(y1, y2);
    } else {
      draw(x2);
      draw(y2);
    }
    const double dx = dist(x1, x2);
    const double dy = dist(y1, y2);

    c.f(x1, y1, o1);
    c.f(x2, y2, o2);
    sup_f = std::max(sup_f, bound_ratio(dist(o1, o2), d.L_f * (dx + dy)));

    c.g(x1, y1, o1);
    c.g(x2, y2, o2);
    sup_g = std::max(sup_g, bound_ratio(dist(o1, o2), d.g_x * dx + d.L_g * dy));

    sup_s1 = std::max(sup_s1, bound_ratio(std::abs(c.sigma1(x1) - c.sigma1(x2)) * hs1,
                                          d.L_sigma1 * dx));
    sup_s2 = std::max(sup_s2, bound_ratio(std::abs(c.sigma2(x1, y1) - c.sigma2(x2, y2)) * hs2,
                                          d.sigma2_x * dx + d.L_sigma2 * dy));

    const double xn = std::sqrt(std::inner_product(x1.begin(), x1.end(), x1.begin(), 0.0));
    sup_a2 = std::max(sup_a2, bound_ratio(std::abs(c.sigma2(x1, y1)) * hs2, d.growth2 * (xn + 1.0)));
    sup_a2 = std::max(sup_a2, bound_ratio(std::abs(c.sigma2(x1, y2)) * hs2, d.growth2 * (xn + 1.0)));
  }

  auto witness = [](std::string name, double declared, double sup) {
    return LipschitzWitness{std::move(name), declared, sup, sup > 1.01};
  };
  r.a1.push_back(witness("f", d.L_f, sup_f));
  r.a1.push_back(witness("g", d.L_g, sup_g));
  r.a1.push_back(witness("sigma1", d.L_sigma1, sup_s1));
  r.a1.push_back(witness("sigma2", d.L_sigma2, sup_s2));
  r.a2 = witness("sigma2_growth", d.growth2, sup_a2);
  return r;
}

}  // namespace sfb
