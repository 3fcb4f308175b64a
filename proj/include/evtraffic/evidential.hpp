#pragma once

// Closed-form deep evidential regression: Normal-Inverse-Gamma prior over a
// Gaussian's (mean, variance), its Student-t marginal, the data/knowledge
// variance split, and the training losses.
//
// Scalar functions are plain doubles for reporting and tests; the ad:: forms
// take tape variables and broadcast elementwise.

#include <optional>

#include "evtraffic/autodiff.hpp"
#include "evtraffic/special.hpp"

namespace evtraffic::evidential {

inline constexpr double kPositivityFloor = 1e-6;
inline constexpr double kMadToStd = special::kMadToStd;

struct NigParams {
  double lambda = 0.0;  ///< predicted mean (km/h)
  double nu = 1.0;      ///< virtual observation count of the mean, > 0
  double alpha = 2.0;   ///< half degrees of freedom, > 1
  double beta = 1.0;    ///< inverse-gamma scale, > 0
};

struct UncertaintyBreakdown {
  double data_var = 0.0;       ///< E[σ²]
  double knowledge_var = 0.0;  ///< Var[μ]
  double total_var = 0.0;
};

struct RegularizerOptions {
  /// Lower clip for the bracket (ratio − 1). The bracket is ≥ −1 by
  /// construction; 0 gives a non-negative variant. Unset: no clipping.
  std::optional<double> bracket_floor;
};

/// Throws NumericalError unless ν > 0, α > 1, β > 0 and all are finite.
void validate(const NigParams& p);

double nig_log_density(double mu, double sigma2, const NigParams& p);
double student_t_log_pdf(double x, const NigParams& p);
/// Location, squared scale and degrees of freedom of the Student-t marginal.
struct StudentT {
  double location;
  double scale2;
  double dof;
};
StudentT student_t_of(const NigParams& p);

UncertaintyBreakdown decompose(const NigParams& p);

double nll_loss(double x_obs, const NigParams& p);
double ratio_regularizer(double x_obs, const NigParams& p, const RegularizerOptions& opt = {});
double total_loss(double x_obs, const NigParams& p, double epsilon, const RegularizerOptions& opt = {});

struct PositiveParams {
  double nu;
  double alpha;
  double beta;
};
PositiveParams positivity_transform(double raw_nu, double raw_alpha, double raw_beta);
/// Raw value whose positivity transform equals `value` (floor `offset` + 1e-6).
double inverse_positivity(double value, double offset = 0.0);

// ---- differentiable forms --------------------------------------------------

struct NigVars {
  ad::Var lambda;
  ad::Var nu;
  ad::Var alpha;
  ad::Var beta;
};

NigVars positivity_transform(const ad::Var& lambda, const ad::Var& raw_nu, const ad::Var& raw_alpha,
                             const ad::Var& raw_beta);

ad::Var nll_loss(const ad::Var& x_obs, const NigVars& p);
ad::Var ratio_regularizer(const ad::Var& x_obs, const NigVars& p, const RegularizerOptions& opt = {});
ad::Var total_loss(const ad::Var& x_obs, const NigVars& p, double epsilon, const RegularizerOptions& opt = {});

}  // namespace evtraffic::evidential
