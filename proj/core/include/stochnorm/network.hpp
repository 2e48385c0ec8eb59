#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stochnorm/normalization.hpp"
#include "stochnorm/optimizer.hpp"
#include "stochnorm/rng.hpp"
#include "stochnorm/stochastic.hpp"
#include "stochnorm/tensor.hpp"
#include "stochnorm/variational.hpp"

namespace stochnorm {

struct ConvSpec {
  int out_channels = 0;
  int ksize = 3;
  int stride = 1;
  int pad = 1;
};

struct ArchitectureSpec {
  int in_channels = 1;
  int image_hw = 8;
  int classes = 5;
  double leaky_slope = 0.01;
  std::vector<ConvSpec> convs;

  // Canonical description used for checkpoint compatibility hashes.
  std::string describe() const;
  uint64_t hash() const;
};

// The all-convolutional pattern (ksize 3,3,3,3,3,3,3,1,1 / stride
// 1,1,2,1,1,2,1,1,1 / widths 96,96,96,192,192,192,192,192,classes) with all
// widths divided by `width_divisor`.
ArchitectureSpec narrowed_allcnn(int in_channels, int image_hw, int classes,
                                 int width_divisor = 8);

enum class NoiseMode { None, FixedGaussian, ExactChi, Variational };

struct ForwardOptions {
  Mode mode = Mode::Eval;
  Tape* tape = nullptr;
  Rng* rng = nullptr;              // required when noise is sampled
  bool sample_in_eval = false;     // MC prediction: sample scales in eval mode
  bool update_running = true;      // train-mode BN running statistics update
  // Called with each layer's pre-normalization activations.
  std::function<void(size_t, const Tensor&)> observer;
};

// A feed-forward stack of normalized conv layers with leaky-ReLU activations
// after every layer but the last, global average pooling and log softmax.
class Network {
 public:
  Network() = default;

  static Network build(const ArchitectureSpec& arch, NormKind kind, NoiseMode noise,
                       ScaleGranularity granularity, Rng& init_rng, bool project = false);

  // Runs the stack and returns per-sample log-probabilities [k, classes].
  // When opt.tape is set, parameters and input are watched on it so a
  // backward pass fills their gradients.
  Tensor forward(const Tensor& x, const ForwardOptions& opt);

  // Runs only the first `num_layers` layers, returning feature maps.
  Tensor forward_features(const Tensor& x, size_t num_layers, const ForwardOptions& opt);

  std::vector<ParamRef> parameters();

  const ArchitectureSpec& arch() const { return arch_; }
  NormKind norm_kind() const { return norm_kind_; }
  NoiseMode noise_mode() const { return noise_mode_; }
  ScaleGranularity granularity() const { return granularity_; }
  bool projected() const { return project_; }

  std::vector<NormalizedLayer>& layers() { return layers_; }
  const std::vector<NormalizedLayer>& layers() const { return layers_; }

  NoiseConfig& noise_config() { return noise_cfg_; }
  const NoiseConfig& noise_config() const { return noise_cfg_; }

  void set_dataset_moments(DatasetMoments m) { moments_ = std::move(m); }
  const DatasetMoments& dataset_moments() const { return moments_; }

  // Per-layer analytic statistics obtained by propagating the dataset
  // moments through the stack. Differentiable w.r.t. the watched views.
  std::vector<NormStats> analytic_sweep(const std::vector<NormalizedLayer>& views) const;

 private:
  NormalizedLayer watched_view(const NormalizedLayer& layer, Tape* tape) const;
  Tensor layer_stage(size_t index, NormalizedLayer& view, const Tensor& input,
                     const ForwardOptions& opt, const std::vector<NormStats>& an_stats);

  ArchitectureSpec arch_;
  NormKind norm_kind_ = NormKind::BatchNorm;
  NoiseMode noise_mode_ = NoiseMode::None;
  ScaleGranularity granularity_ = ScaleGranularity::PerChannel;
  bool project_ = false;
  std::vector<NormalizedLayer> layers_;
  NoiseConfig noise_cfg_;
  DatasetMoments moments_;
};

// Per-layer analytic statistics of a freshly watched network; convenience
// wrapper over Network::analytic_sweep for callers outside forward().
std::vector<NormStats> analytic_norm_stats(Network& network, const DatasetMoments& moments,
                                           Tape* tape = nullptr);

// Folds the batch statistics of one forward pass on `batch` into each
// layer's (s, b) so the initialized network standardizes its first-batch
// activations; equivalent to one batch-normalization pass at zero learning
// rate. No gradient step is taken and weights are untouched.
void data_dependent_init(Network& network, const Tensor& batch);

}  // namespace stochnorm
