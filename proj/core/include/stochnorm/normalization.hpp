#pragma once

#include <utility>

#include "stochnorm/tensor.hpp"

namespace stochnorm {

enum class Mode { Train, Eval };

enum class NormKind { None, BatchNorm, WeightNorm, AnalyticNorm };

// Per-channel first and second central moments, carried as tensors so that
// statistics computed from weights or activations stay differentiable.
struct NormStats {
  Tensor mu;
  Tensor sigma;

  bool defined() const { return mu.defined() && sigma.defined(); }
};

// Per-input-channel mean and variance of the training set, used as the root
// of analytic moment propagation.
struct DatasetMoments {
  std::vector<double> mean;
  std::vector<double> var;

  bool defined() const { return !mean.empty(); }
};

// One linear unit (dense or conv) with its normalization and post-norm
// affine parameters. `bias` participates only when kind == None; normalized
// layers project the bias degree of freedom out. `u` is the pre-sigma of the
// variational scale posterior and is defined only for Bayesian runs.
struct NormalizedLayer {
  enum class LinearKind { Dense, Conv };

  LinearKind linear = LinearKind::Conv;
  NormKind kind = NormKind::BatchNorm;
  Tensor w;     // Dense: [out,in]; Conv: [out,in,kh,kw]
  Tensor bias;  // [out], None-normalization only
  Tensor s;     // [out] post-norm scale, initialized to 1
  Tensor b;     // [out] post-norm bias, initialized to 0
  Tensor u;     // [out] or [1] variational pre-sigma; undefined if deterministic
  NormStats running;  // detached running statistics (BatchNorm)
  double momentum = 0.1;
  double eps = 1e-5;
  int stride = 1;
  int pad = 0;

  int out_channels() const { return w.dim(0); }
  int in_features() const {
    int64_t n = 1;
    for (int d = 1; d < w.rank(); ++d) n *= w.dim(d);
    return static_cast<int>(n);
  }
  bool has_running() const { return running.defined(); }
};

// Per-channel mean and standard deviation over batch and spatial dimensions
// (n = k*h*w per channel), with the population 1/n variance convention.
// Fails when n < 2 since a single observation has no spread.
NormStats batch_stats(const Tensor& x);

// Exponential moving average of running statistics. The average is taken in
// variance space; `batch` and the result hold standard deviations.
NormStats update_running(const NormStats& running, const NormStats& batch, double momentum);

// Standardization half of batch normalization, without the affine. Train
// mode uses current batch statistics and backpropagates through them, and
// optionally updates layer.running; eval mode uses the running statistics.
Tensor bn_normalize(NormalizedLayer& layer, const Tensor& z, Mode mode,
                    bool update_running = true);

// Batch normalization of pre-normalization activations `z` (the linear layer
// output): bn_normalize followed by the (s, b) affine.
Tensor bn_forward(NormalizedLayer& layer, const Tensor& z, Mode mode);

// Weight normalization statistics: mu = 0, sigma = ||w|| per output channel
// (each output channel's weights flattened). Differentiable w.r.t. w.
NormStats weight_norm_stats(const Tensor& w);

// The unified normalized transform: (w x - mu)/sigma * s + b with the given
// statistics. `x` is the layer input; the linear op is applied inside.
Tensor normalized_forward(const NormalizedLayer& layer, const Tensor& x, const NormStats& stats);

// Applies only the linear part (dense matmul or conv) without bias.
Tensor linear_apply(const NormalizedLayer& layer, const Tensor& x);

// Mean/variance of leaky_relu(X) for X ~ N(mean, var), elementwise over
// per-channel moment tensors. Closed forms of the rectified Gaussian.
std::pair<Tensor, Tensor> rectified_gaussian_moments(const Tensor& mean, const Tensor& var,
                                                     double slope);

// Propagates per-channel input moments through the linear part of a layer
// under the assumption of independent inputs: mean via w * m, variance via
// w^2 * v. Returns per-output-channel (mean, variance).
std::pair<Tensor, Tensor> propagate_linear_moments(const NormalizedLayer& layer,
                                                   const Tensor& mean_in, const Tensor& var_in);

}  // namespace stochnorm
