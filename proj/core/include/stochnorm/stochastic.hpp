#pragma once

#include <cstdint>
#include <vector>

#include "stochnorm/rng.hpp"
#include "stochnorm/tensor.hpp"

namespace stochnorm {

class Network;
class SyntheticDataset;

// One draw of the multiplicative/additive pair modeling batch-statistics
// randomness: V = (mu - M)/sigma, U = sigma/S for a batch of effective size
// n = k*z. U is strictly positive under the inverse-chi model.
struct NoiseSample {
  double v = 0.0;
  double u = 1.0;
  int64_t n = 0;
};

enum class NoiseModel { ExactChi, Gaussian };

// Configuration for noise-injection forward passes. sigma_v/sigma_u hold one
// value per layer (or a single value applied to all layers). Gaussian draws
// are not truncated, so U <= 0 is possible for large sigma_u; the exact-chi
// model guarantees U > 0.
struct NoiseConfig {
  NoiseModel model = NoiseModel::Gaussian;
  std::vector<double> sigma_v;
  std::vector<double> sigma_u;
  std::vector<int64_t> effective_n;  // per layer, exact-chi model
  bool spatial_correlated = true;

  // Per-layer sigma_U profile measured in a BN-trained network, usable as a
  // default for noise-injection retraining.
  static NoiseConfig measured_bn_defaults();

  double layer_sigma_v(size_t layer) const;
  double layer_sigma_u(size_t layer) const;
  int64_t layer_n(size_t layer) const;
};

// Per-layer empirical variances of (mu - M)/sigma and sigma/S collected from
// repeated batch draws.
struct EmpiricalNoiseStats {
  struct Layer {
    int layer_index = 0;
    int64_t batch_size = 0;
    int64_t spatial_size = 0;
    double var_v = 0.0;
    double var_u = 0.0;
    int64_t n_draws = 0;
  };
  std::vector<Layer> layers;

  std::string to_csv() const;
};

// Draws (V, U) with V = xi/sqrt(n), xi ~ N(0,1), and U = sqrt(n)/sqrt(chi2
// draw with n-1 degrees of freedom). Requires n >= 2.
NoiseSample sample_bn_noise(int64_t n, Rng& rng);

// Per-sample-and-channel noise fields for a [k,c,...] activation. Every
// spatial position of one sample/channel shares a single draw.
struct NoiseField {
  Tensor v;  // [k,c]
  Tensor u;  // [k,c]
};
NoiseField draw_noise_field(const NoiseConfig& cfg, size_t layer, int batch, int channels,
                            Rng& rng);

// (x_norm + V) * U with per-sample-channel fields broadcast over spatial
// positions; differentiable w.r.t. x_norm.
Tensor noisy_normalize(const Tensor& x_norm, const Tensor& v, const Tensor& u);

// Kolmogorov-Smirnov test of samples against the chi-squared distribution
// with n-1 degrees of freedom (the model for n * S^2 / sigma^2).
struct KsResult {
  double statistic = 0.0;
  double p_value = 0.0;
};
KsResult ks_test_chi2(const std::vector<double>& samples, int64_t n);

// Least-squares slope of log(variance) against log(size).
double variance_scaling_fit(const std::vector<double>& sizes,
                            const std::vector<double>& variances);

// Draws random batches from `data` as during learning, propagates them
// through the network with batch-normalized layers and collects per-layer
// samples of (mu - M)/sigma and sigma/S against the population statistics
// of a preliminary full pass. `data` is a [N,c,h,w] tensor.
EmpiricalNoiseStats measure_bn_noise(Network& network, const Tensor& data, int batch_size,
                                     int draws, Rng& rng);

}  // namespace stochnorm
