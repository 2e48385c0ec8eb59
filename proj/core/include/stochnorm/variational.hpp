#pragma once

#include <utility>

#include "stochnorm/rng.hpp"
#include "stochnorm/tensor.hpp"

namespace stochnorm {

class Network;

enum class ScaleGranularity { PerChannel, PerLayer };

// Gaussian posterior over the post-normalization scale S ~ N(s, sigma(u)^2).
// `s` and `u` alias the owning layer's parameters; with per-layer granularity
// `u` has a single element shared by all channels.
struct VariationalScale {
  Tensor s;  // [c]
  Tensor u;  // [c] or [1]
  ScaleGranularity granularity = ScaleGranularity::PerChannel;
};

// Prior N(s0, sigma0^2) on the scale, plus the per-example weight of the KL
// term (fractional for augmented or per-pixel losses).
struct PriorConfig {
  double s0 = 1.0;
  double sigma0 = 10.0;
  double kl_factor = 1.0;
};

// Evidence-plus-KL decomposition of the stochastic objective.
struct ElboBreakdown {
  Tensor evidence;  // (|D|/M) * sum of per-sample NLL
  Tensor kl;        // summed KL terms (before kl_factor)
  Tensor total;     // evidence + kl_factor * kl
  int64_t dataset_size = 0;
  int64_t batch_size = 0;
};

// sigma = e^u for u < 0 and u + 1 for u >= 0. Continuous and C1 at u = 0;
// both d(sigma)/du and d(log sigma)/du are bounded by 1, which keeps the
// -log sigma^2 gradient of the KL finite as sigma -> 0.
double sigma_from_u(double u);
double dsigma_du(double u);
Tensor sigma_from_u(const Tensor& u);

// KL(q(S) || p(S)) up to an additive constant:
//   -log sigma^2 + sigma^2/sigma0^2 + (s - s0)^2/sigma0^2
// summed over channels, with sigma = sigma_from_u(u). Gradients flow to both
// s and u.
Tensor kl_scale(const VariationalScale& vs, const PriorConfig& prior);

// Scalar convenience form for a single channel.
double kl_scale_value(double s, double u, const PriorConfig& prior);

// Draws S = s + sigma(u) * xi with a fresh xi ~ N(0,1) per training example
// and channel (shape [k, c]). The pathwise parametrization routes gradients
// to s with coefficient 1 and to u with coefficient xi * sigma'(u).
Tensor sample_scale(const VariationalScale& vs, int batch, Rng& rng);

// (x_norm + b) * S with the per-sample scale S broadcast over spatial
// positions; the bias stays deterministic.
Tensor bayes_norm_forward(const Tensor& x_norm, const Tensor& b, const Tensor& scale);

// Evidence estimate (|D|/M) * batch_nll_sum plus weighted KL.
ElboBreakdown evidence_objective(const Tensor& batch_nll_sum, int64_t dataset_size,
                                 int64_t batch_size, const Tensor& kl_sum,
                                 const PriorConfig& prior);

// Monte Carlo posterior predictive: mean of softmax outputs over n_samples
// scale draws. Rows sum to 1.
Tensor mc_predict(Network& network, const Tensor& x, int n_samples, Rng& rng);

// The reparametrization (S, B) = (U s, V + b/(U s)): composing
// (x + B) * S reproduces ((x + V) U) s + b exactly.
std::pair<double, double> bn_equivalence_map(double s, double b, double u, double v);

// Checks the variational-dropout identity
//   sum_j W_ij (x_j S_j) + b_i == sum_j (W_ij S_j) x_j + b_i
// within 1e-12 elementwise.
bool dropout_equivalence_check(const Tensor& w, const Tensor& bias, const Tensor& x,
                               const Tensor& scale);

}  // namespace stochnorm
