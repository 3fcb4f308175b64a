#pragma once

namespace evtraffic::special {

/// √2·erf⁻¹(1/2): the ratio between the median absolute deviation and the
/// standard deviation of a Gaussian (the 75% normal quantile).
inline constexpr double kMadToStd = 0.6744897501960817;

/// log Γ(x) via the Lanczos approximation (g = 7, 9 coefficients), with the
/// reflection formula below 0.5.
double lgamma(double x);

/// ψ(x) = d/dx log Γ(x). Recurrence up to x ≥ 10, then the asymptotic series.
double digamma(double x);

/// log(1 + eˣ) without overflow.
double softplus(double x);

double sigmoid(double x);

}  // namespace evtraffic::special
