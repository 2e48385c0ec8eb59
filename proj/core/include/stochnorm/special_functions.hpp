#pragma once

namespace stochnorm {

// Regularized lower incomplete gamma P(a, x) = gamma(a,x)/Gamma(a), a > 0,
// x >= 0. Series expansion for x < a+1, continued fraction otherwise.
double regularized_gamma_p(double a, double x);

// CDF of the chi-squared distribution with k degrees of freedom.
double chi_squared_cdf(double x, int k);

// Survival function of the Kolmogorov distribution,
// Q(lambda) = 2 * sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2).
double kolmogorov_survival(double lambda);

// Standard normal density and CDF.
double normal_pdf(double x);
double normal_cdf(double x);

}  // namespace stochnorm
