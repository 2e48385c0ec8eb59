#include "stochnorm/optimizer.hpp"

#include <cmath>

namespace stochnorm {

Optimizer::Optimizer(OptimizerConfig config, std::vector<ParamRef> params)
    : config_(std::move(config)), params_(std::move(params)) {
  if (!(config_.lr0 > 0.0)) throw std::invalid_argument("optimizer: lr0 must be positive");
  if (!(config_.gamma > 0.0 && config_.gamma <= 1.0))
    throw std::invalid_argument("optimizer: gamma must be in (0,1]");
  if (!(config_.momentum >= 0.0 && config_.momentum < 1.0))
    throw std::invalid_argument("optimizer: momentum must be in [0,1)");
  momentum_.resize(params_.size());
  second_.resize(params_.size());
  for (size_t p = 0; p < params_.size(); ++p) {
    const size_t n = static_cast<size_t>(params_[p].value.size());
    momentum_[p].assign(n, 0.0);
    if (config_.kind == OptKind::Adam) second_[p].assign(n, 0.0);
  }
}

double Optimizer::learning_rate(int epoch) const {
  return config_.lr0 * std::pow(config_.gamma, epoch);
}

void Optimizer::project_params() {
  for (auto& p : params_) {
    if (!p.project) continue;
    const int rows = p.value.dim(0);
    const int64_t cols = p.value.size() / rows;
    double* w = p.value.data();
    for (int r = 0; r < rows; ++r) {
      double* row = w + r * cols;
      double norm2 = 0.0;
      for (int64_t j = 0; j < cols; ++j) norm2 += row[j] * row[j];
      if (!(norm2 > 0.0) || !std::isfinite(norm2))
        throw DivergenceError("projection: degenerate row norm in parameter " + p.name);
      const double inv = 1.0 / std::sqrt(norm2);
      for (int64_t j = 0; j < cols; ++j) row[j] *= inv;
    }
  }
}

void Optimizer::step(int epoch) {
  const double lr = learning_rate(epoch);
  if (config_.kind == OptKind::Adam) ++adam_steps_;
  for (size_t p = 0; p < params_.size(); ++p) {
    auto& param = params_[p];
    if (!param.value.requires_grad())
      throw std::logic_error("optimizer: parameter without gradient buffer: " + param.name);
    double* w = param.value.data();
    const double* g = param.value.grad();
    const int64_t n = param.value.size();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(g[i]))
        throw DivergenceError("non-finite gradient in parameter " + param.name);

    if (config_.kind == OptKind::SgdNesterov) {
      const double mu = config_.momentum;
      double* buf = momentum_[p].data();
      for (int64_t i = 0; i < n; ++i) {
        buf[i] = mu * buf[i] + g[i];
        w[i] -= lr * (g[i] + mu * buf[i]);
      }
    } else {
      const double b1 = config_.adam_beta1, b2 = config_.adam_beta2;
      const double corr1 = 1.0 - std::pow(b1, static_cast<double>(adam_steps_));
      const double corr2 = 1.0 - std::pow(b2, static_cast<double>(adam_steps_));
      double* m = momentum_[p].data();
      double* v = second_[p].data();
      for (int64_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        const double mhat = m[i] / corr1;
        const double vhat = v[i] / corr2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + config_.adam_eps);
      }
    }
    param.value.zero_grad();
  }
  project_params();
}

Tensor init_weights(const Shape& shape, Rng& rng) {
  if (shape.empty() || shape.size() < 2)
    throw ShapeError("init_weights expects at least rank 2 (out, in...) weights");
  int64_t c = 1;
  for (size_t d = 1; d < shape.size(); ++d) c *= shape[d];
  if (c <= 0) throw ShapeError("init_weights: zero fan-in");
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(shape, std::move(data), true);
}

double lr_search(const std::function<double(double)>& train_fn,
                 const std::vector<double>& grid) {
  if (grid.empty()) throw std::invalid_argument("lr_search: empty grid");
  double best_lr = 0.0;
  double best_loss = std::numeric_limits<double>::infinity();
  for (double lr : grid) {
    double loss;
    try {
      loss = train_fn(lr);
    } catch (const DivergenceError&) {
      continue;
    }
    if (!std::isfinite(loss)) continue;
    if (loss < best_loss) {
      best_loss = loss;
      best_lr = lr;
    }
  }
  if (!(best_lr > 0.0)) throw DivergenceError("lr_search: every candidate diverged");
  return best_lr;
}

std::vector<double> default_lr_grid() {
  return {1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0};
}

}  // namespace stochnorm
