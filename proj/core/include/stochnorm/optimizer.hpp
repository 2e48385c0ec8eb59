#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "stochnorm/rng.hpp"
#include "stochnorm/tensor.hpp"

namespace stochnorm {

// Raised when training produces non-finite values (loss or gradients).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptKind { SgdNesterov, Adam };

struct OptimizerConfig {
  OptKind kind = OptKind::SgdNesterov;
  double lr0 = 0.1;
  double momentum = 0.9;
  double gamma = 1.0;  // per-epoch learning rate decay, lr = lr0 * gamma^epoch
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Decay factor such that the learning rate reaches lr0/10 after `epochs`
// epochs.
inline double gamma_for_epochs_to_tenth(int epochs) {
  if (epochs <= 0) throw std::invalid_argument("epochs_to_tenth must be positive");
  return std::pow(0.1, 1.0 / epochs);
}

// A trainable tensor plus its constraint. Projected parameters are
// renormalized to unit norm per output channel (rows of dim 0) after every
// update; their gradient steps are orthogonal to the weight under
// normalization, so without the projection the norm only grows.
struct ParamRef {
  Tensor value;
  bool project = false;
  std::string name;
};

// SGD with Nesterov momentum or Adam, with the lr0 * gamma^epoch schedule
// and unit-norm projection. No weight decay: combined with scale-invariant
// normalization it would make the objective ill-posed in ||w||.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<ParamRef> params);

  // Applies one update using the gradients accumulated in the parameters,
  // then zeroes them. Throws DivergenceError on non-finite gradients.
  void step(int epoch);

  double learning_rate(int epoch) const;
  const std::vector<ParamRef>& params() const { return params_; }

  // Renormalizes the projected parameters; also used to establish the
  // constraint at initialization.
  void project_params();

 private:
  OptimizerConfig config_;
  std::vector<ParamRef> params_;
  std::vector<std::vector<double>> momentum_;  // per-param buffers
  std::vector<std::vector<double>> second_;    // Adam second moments
  int64_t adam_steps_ = 0;
};

// Uniform initialization in [-1/sqrt(c), 1/sqrt(c)] where c is the number of
// inputs per output (the product of all dims after the first).
Tensor init_weights(const Shape& shape, Rng& rng);

// Returns the learning rate from `grid` whose 5-epoch training loss is
// lowest. `train_fn` must run a fresh, seeded training and return the
// training loss achieved; non-finite losses mark a diverged candidate.
double lr_search(const std::function<double(double)>& train_fn, const std::vector<double>& grid);

// Log-spaced default grid for the search.
std::vector<double> default_lr_grid();

}  // namespace stochnorm
