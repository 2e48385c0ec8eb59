#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stochnorm/dataset.hpp"
#include "stochnorm/network.hpp"
#include "stochnorm/optimizer.hpp"
#include "stochnorm/variational.hpp"

namespace stochnorm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Complete declarative description of one training/measurement run. Every
// field has a default; config files override fields, CLI --set overrides
// config files.
struct ExperimentConfig {
  int version = 1;
  uint64_t seed = 1;

  DatasetSpec dataset;

  // Architecture: the narrowed all-convolutional preset or an explicit list.
  std::string arch_preset = "allcnn";  // "allcnn" | "custom"
  int width_divisor = 8;
  std::vector<int> custom_widths;
  std::vector<int> custom_ksize;
  std::vector<int> custom_stride;
  double leaky_slope = 0.01;

  NormKind normalization = NormKind::BatchNorm;

  NoiseMode noise_mode = NoiseMode::None;
  std::vector<double> noise_sigma_v;
  std::vector<double> noise_sigma_u;
  std::vector<int64_t> noise_effective_n;  // exact-chi; empty = batch * spatial
  bool noise_spatial_correlated = true;

  int batch_size = 32;
  int normalization_batch_size = 0;  // 0 = train batch size
  int epochs = 20;
  bool augment = false;

  OptKind optimizer = OptKind::SgdNesterov;
  double lr0 = 0.1;
  bool lr_auto = false;  // run the 5-epoch search instead of using lr0
  double momentum = 0.9;
  int gamma_epochs_to_tenth = 600;
  bool project = true;

  double kl_factor = 1.0;
  ScaleGranularity granularity = ScaleGranularity::PerChannel;
  double prior_mean = 1.0;
  double prior_sigma = 10.0;
  double init_sigma = 0.05;
  int mc_eval_samples = 10;

  bool data_dependent_init = true;
  int init_batch = 128;

  ArchitectureSpec architecture(int in_channels, int image_hw, int classes) const;
  PriorConfig prior() const { return {prior_mean, prior_sigma, kl_factor}; }
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig config_from_file(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

// Applies one dotted-path override such as "optimizer.lr0=0.03" or
// "dataset.classes=3"; values are parsed according to the field type.
void apply_override(ExperimentConfig& config, const std::string& assignment);

// One row of the per-epoch metrics CSV. Wall-clock time is reported in the
// run summary and timing file, not here, so metrics files are byte-identical
// across repeated runs of the same (config, seed).
struct MetricsRecord {
  int epoch = 0;
  double train_loss = 0.0;            // train-mode minibatch average
  double train_loss_eval_mode = 0.0;  // evaluation-mode loss on the train set
  double val_loss = 0.0;
  double val_acc = 0.0;
  double evidence = 0.0;  // Bayesian runs; NaN otherwise
  double kl = 0.0;        // Bayesian runs; NaN otherwise
  double lr = 0.0;
};

std::string metrics_to_csv(const std::vector<MetricsRecord>& records);

struct RunResult {
  std::vector<MetricsRecord> metrics;
  bool diverged = false;
  std::string message;
  double chosen_lr0 = 0.0;
  double final_val_acc = 0.0;
  double final_val_loss = 0.0;
  double final_val_nll_single = 0.0;
  double final_val_nll_mc = 0.0;  // NaN unless variational with mc samples
  double wall_time_seconds = 0.0;
};

// Full training run; writes metrics.csv, summary.json, timing.csv,
// checkpoint.bin and (for Bayesian runs) elbo.csv into out_dir. Pass an
// empty out_dir to skip all file output.
RunResult run_training(const ExperimentConfig& config, const std::string& out_dir);

// The normalization-batch experiment: statistics are computed over
// norm_batch samples per step while the loss covers only the train batch,
// with full backpropagation through the statistics.
RunResult normalization_batch_experiment(const ExperimentConfig& config, int norm_batch,
                                         const std::string& out_dir);

// (completeness, error) curve: samples sorted by predictive entropy, error
// among the accepted fraction for each completeness level.
std::vector<std::pair<double, double>> error_coverage(Network& network, const Tensor& images,
                                                      const std::vector<int>& labels);
std::string coverage_to_csv(const std::vector<std::pair<double, double>>& curve);

enum class PerturbationKind { Gaussian, GradSign };

// Accuracy under input perturbations of increasing magnitude. Gaussian adds
// sigma * xi elementwise; GradSign is the fast gradient sign attack
// x + eps * sign(dNLL/dx), with sign(0) = 0.
std::vector<std::pair<double, double>> perturbation_sweep(Network& network, const Tensor& images,
                                                          const std::vector<int>& labels,
                                                          PerturbationKind kind,
                                                          const std::vector<double>& magnitudes,
                                                          Rng& rng);

// Per-epoch mean/std across seeds plus the within-run iterate std of the
// last window of epochs; emitted as CSV + summary.
struct SeedStabilityReport {
  std::vector<int> epochs;
  std::vector<double> mean_val_acc;
  std::vector<double> std_val_acc;
  std::vector<double> mean_val_loss;
  std::vector<double> std_val_loss;
  double mean_within_run_iterate_std = 0.0;
  double cross_seed_final_acc_std = 0.0;
  std::string to_csv() const;
};

SeedStabilityReport seed_stability_report(const ExperimentConfig& config,
                                          const std::vector<uint64_t>& seeds,
                                          const std::string& out_dir);

// Evaluation helpers shared by the harness and the tests.
double eval_nll(Network& network, const Tensor& images, const std::vector<int>& labels);
double eval_accuracy(Network& network, const Tensor& images, const std::vector<int>& labels);
double nll_of_probs(const Tensor& probs, const std::vector<int>& labels);

}  // namespace stochnorm
