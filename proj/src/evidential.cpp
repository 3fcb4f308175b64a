#include "evtraffic/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "evtraffic/errors.hpp"

namespace evtraffic::evidential {

namespace {
constexpr double kLogPi = 1.1447298858494002;  // log π

void require_alpha_above_one(double alpha) {
  if (!(alpha > 1.0)) {
    throw NumericalError("NIG alpha must exceed 1 for finite variance, got " + std::to_string(alpha));
  }
}
}  // namespace

void validate(const NigParams& p) {
  if (!std::isfinite(p.lambda) || !std::isfinite(p.nu) || !std::isfinite(p.alpha) || !std::isfinite(p.beta)) {
    throw NumericalError("NIG parameters must be finite");
  }
  if (!(p.nu > 0.0)) throw NumericalError("NIG nu must be positive, got " + std::to_string(p.nu));
  require_alpha_above_one(p.alpha);
  if (!(p.beta > 0.0)) throw NumericalError("NIG beta must be positive, got " + std::to_string(p.beta));
}

double nig_log_density(double mu, double sigma2, const NigParams& p) {
  if (!(sigma2 > 0.0)) throw NumericalError("NIG density needs sigma2 > 0, got " + std::to_string(sigma2));
  validate(p);
  const double d = p.lambda - mu;
  return p.alpha * std::log(p.beta) + 0.5 * std::log(p.nu) - special::lgamma(p.alpha) -
         0.5 * std::log(2.0 * std::numbers::pi * sigma2) - (p.alpha + 1.0) * std::log(sigma2) -
         (2.0 * p.beta + p.nu * d * d) / (2.0 * sigma2);
}

StudentT student_t_of(const NigParams& p) {
  validate(p);
  return {p.lambda, p.beta * (1.0 + p.nu) / (p.nu * p.alpha), 2.0 * p.alpha};
}

double student_t_log_pdf(double x, const NigParams& p) {
  const StudentT t = student_t_of(p);
  const double z2 = (x - t.location) * (x - t.location) / (t.dof * t.scale2);
  return special::lgamma(0.5 * (t.dof + 1.0)) - special::lgamma(0.5 * t.dof) -
         0.5 * std::log(t.dof * std::numbers::pi * t.scale2) - 0.5 * (t.dof + 1.0) * std::log1p(z2);
}

UncertaintyBreakdown decompose(const NigParams& p) {
  validate(p);
  UncertaintyBreakdown u;
  u.data_var = p.beta / (p.alpha - 1.0);
  u.knowledge_var = u.data_var / p.nu;
  u.total_var = p.beta * (p.nu + 1.0) / (p.nu * (p.alpha - 1.0));
  return u;
}

double nll_loss(double x_obs, const NigParams& p) {
  validate(p);
  const double r = x_obs - p.lambda;
  const double two_b_lambda = 2.0 * p.beta * (1.0 + p.nu);
  return 0.5 * (kLogPi - std::log(p.nu)) - p.alpha * std::log(two_b_lambda) +
         (p.alpha + 0.5) * std::log(r * r * p.nu + two_b_lambda) + special::lgamma(p.alpha) -
         special::lgamma(p.alpha + 0.5);
}

double ratio_regularizer(double x_obs, const NigParams& p, const RegularizerOptions& opt) {
  validate(p);
  const double expected = kMadToStd * std::sqrt(p.beta / (p.alpha - 1.0));
  double bracket = std::abs(x_obs - p.lambda) / expected - 1.0;
  if (opt.bracket_floor) bracket = std::max(bracket, *opt.bracket_floor);
  return bracket * (p.nu + p.alpha);
}

double total_loss(double x_obs, const NigParams& p, double epsilon, const RegularizerOptions& opt) {
  if (epsilon < 0.0) throw ValidationError("loss weight epsilon must be non-negative");
  if (epsilon == 0.0) return nll_loss(x_obs, p);
  return nll_loss(x_obs, p) + epsilon * ratio_regularizer(x_obs, p, opt);
}

PositiveParams positivity_transform(double raw_nu, double raw_alpha, double raw_beta) {
  return {special::softplus(raw_nu) + kPositivityFloor, 1.0 + special::softplus(raw_alpha) + kPositivityFloor,
          special::softplus(raw_beta) + kPositivityFloor};
}

double inverse_positivity(double value, double offset) {
  const double y = value - offset - kPositivityFloor;
  if (!(y > 0.0)) throw NumericalError("value below the positivity floor");
  // softplus⁻¹(y) = y + log(1 − e^{−y})
  return y + std::log(-std::expm1(-y));
}

// ---- differentiable ------------------------------------------------------------

NigVars positivity_transform(const ad::Var& lambda, const ad::Var& raw_nu, const ad::Var& raw_alpha,
                             const ad::Var& raw_beta) {
  return {lambda, ad::softplus(raw_nu) + kPositivityFloor, ad::softplus(raw_alpha) + (1.0 + kPositivityFloor),
          ad::softplus(raw_beta) + kPositivityFloor};
}

ad::Var nll_loss(const ad::Var& x_obs, const NigVars& p) {
  using namespace ad;
  const Var r = x_obs - p.lambda;
  const Var two_b_lambda = (p.beta * (p.nu + 1.0)) * 2.0;
  return (kLogPi - log(p.nu)) * 0.5 - p.alpha * log(two_b_lambda) +
         (p.alpha + 0.5) * log(square(r) * p.nu + two_b_lambda) + lgamma(p.alpha) - lgamma(p.alpha + 0.5);
}

ad::Var ratio_regularizer(const ad::Var& x_obs, const NigVars& p, const RegularizerOptions& opt) {
  using namespace ad;
  const Var expected = sqrt(p.beta / (p.alpha - 1.0)) * kMadToStd;
  Var bracket = abs(x_obs - p.lambda) / expected - 1.0;
  if (opt.bracket_floor) bracket = clamp(bracket, *opt.bracket_floor, std::numeric_limits<double>::infinity());
  return bracket * (p.nu + p.alpha);
}

ad::Var total_loss(const ad::Var& x_obs, const NigVars& p, double epsilon, const RegularizerOptions& opt) {
  if (epsilon < 0.0) throw ValidationError("loss weight epsilon must be non-negative");
  const ad::Var nll = nll_loss(x_obs, p);
  if (epsilon == 0.0) return nll;
  return nll + ratio_regularizer(x_obs, p, opt) * epsilon;
}

}  // namespace evtraffic::evidential
