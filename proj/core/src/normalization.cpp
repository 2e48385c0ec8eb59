#include "stochnorm/normalization.hpp"

#include <cmath>
#include <stdexcept>

namespace stochnorm {

namespace {

// Reduction dims covering batch and spatial axes of [k,c] or [k,c,h,w].
std::vector<int> stat_dims(const Tensor& x) {
  if (x.rank() == 2) return {0};
  if (x.rank() == 4) return {0, 2, 3};
  throw ShapeError("batch statistics expect [k,c] or [k,c,h,w], got " + shape_str(x.shape()));
}

int64_t stat_count(const Tensor& x) {
  int64_t n = x.dim(0);
  for (int d = 2; d < x.rank(); ++d) n *= x.dim(d);
  return n;
}

}  // namespace

NormStats batch_stats(const Tensor& x) {
  const auto dims = stat_dims(x);
  if (stat_count(x) < 2)
    throw std::invalid_argument(
        "batch_stats: need at least two observations per channel (singleton batch without "
        "spatial extent is degenerate)");
  Tensor mu = reduce_mean(x, dims);
  Tensor sigma = tensor_sqrt(reduce_var(x, dims));
  return {mu, sigma};
}

NormStats update_running(const NormStats& running, const NormStats& batch, double momentum) {
  if (!(momentum > 0.0 && momentum <= 1.0))
    throw std::invalid_argument("update_running: momentum must be in (0,1]");
  if (!batch.defined()) throw std::invalid_argument("update_running: undefined batch stats");
  const int64_t c = batch.mu.size();
  std::vector<double> mu(static_cast<size_t>(c));
  std::vector<double> sigma(static_cast<size_t>(c));
  for (int64_t i = 0; i < c; ++i) {
    const double bm = batch.mu.at(i);
    const double bv = batch.sigma.at(i) * batch.sigma.at(i);
    if (running.defined()) {
      const double rm = running.mu.at(i);
      const double rv = running.sigma.at(i) * running.sigma.at(i);
      mu[i] = (1.0 - momentum) * rm + momentum * bm;
      sigma[i] = std::sqrt((1.0 - momentum) * rv + momentum * bv);
    } else {
      mu[i] = bm;
      sigma[i] = std::sqrt(bv);
    }
  }
  return {Tensor::from(batch.mu.shape(), std::move(mu)),
          Tensor::from(batch.sigma.shape(), std::move(sigma))};
}

Tensor bn_normalize(NormalizedLayer& layer, const Tensor& z, Mode mode, bool update_running_stats) {
  const double eps2 = layer.eps * layer.eps;
  Tensor centered, denom;
  if (mode == Mode::Train) {
    const auto dims = stat_dims(z);
    if (stat_count(z) < 2) throw std::invalid_argument("bn_normalize: degenerate batch");
    Tensor m = reduce_mean(z, dims);
    Tensor v = reduce_var(z, dims);
    centered = sub_channel(z, m);
    denom = tensor_sqrt(add_scalar(v, eps2));
    if (update_running_stats) {
      // Running statistics are tracked outside the graph.
      NormStats batch{m.detached_copy(), tensor_sqrt(v.detached_copy())};
      layer.running = update_running(layer.running, batch, layer.momentum);
    }
  } else {
    if (!layer.has_running())
      throw std::logic_error("bn_normalize: eval mode requires populated running statistics");
    centered = sub_channel(z, layer.running.mu);
    std::vector<double> d(static_cast<size_t>(layer.running.sigma.size()));
    for (size_t i = 0; i < d.size(); ++i) {
      const double sg = layer.running.sigma.at(static_cast<int64_t>(i));
      d[i] = std::sqrt(sg * sg + eps2);
    }
    denom = Tensor::from(layer.running.sigma.shape(), std::move(d));
  }
  return div_channel(centered, denom);
}

Tensor bn_forward(NormalizedLayer& layer, const Tensor& z, Mode mode) {
  Tensor normalized = bn_normalize(layer, z, mode);
  return add_channel(mul_channel(normalized, layer.s), layer.b);
}

NormStats weight_norm_stats(const Tensor& w) {
  if (w.rank() < 2) throw ShapeError("weight_norm_stats expects at least rank 2 weights");
  std::vector<int> dims;
  for (int d = 1; d < w.rank(); ++d) dims.push_back(d);
  Tensor sq = reduce_sum(square(w), dims);
  for (int64_t i = 0; i < sq.size(); ++i)
    if (sq.at(i) <= 0.0)
      throw std::invalid_argument("weight_norm_stats: zero weight vector has no direction");
  Tensor sigma = tensor_sqrt(sq);
  return {Tensor::zeros({w.dim(0)}), sigma};
}

Tensor linear_apply(const NormalizedLayer& layer, const Tensor& x) {
  if (layer.linear == NormalizedLayer::LinearKind::Conv)
    return conv2d(x, layer.w, layer.stride, layer.pad);
  return matmul(x, transpose2d(layer.w));
}

Tensor normalized_forward(const NormalizedLayer& layer, const Tensor& x, const NormStats& stats) {
  if (!stats.defined()) throw std::invalid_argument("normalized_forward: undefined stats");
  for (int64_t i = 0; i < stats.sigma.size(); ++i)
    if (!(stats.sigma.at(i) > 0.0))
      throw std::invalid_argument("normalized_forward: sigma must be positive");
  Tensor z = linear_apply(layer, x);
  Tensor normalized = div_channel(sub_channel(z, stats.mu), stats.sigma);
  return add_channel(mul_channel(normalized, layer.s), layer.b);
}

std::pair<Tensor, Tensor> rectified_gaussian_moments(const Tensor& mean, const Tensor& var,
                                                     double slope) {
  // For X ~ N(m, v), y = leaky_relu(X), with z = m/sd, Phi and phi the
  // standard normal CDF/pdf:
  //   E[X 1{X>0}]   = m Phi(z) + sd phi(z)
  //   E[X^2 1{X>0}] = (m^2+v) Phi(z) + m sd phi(z)
  //   E[y]   = a m + (1-a) (m Phi(z) + sd phi(z))
  //   E[y^2] = a^2 (m^2+v) + (1-a^2) ((m^2+v) Phi(z) + m sd phi(z))
  constexpr double kVarFloor = 1e-12;
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt_2pi = 0.3989422804014326779;

  Tensor v = add_scalar(var, kVarFloor);
  Tensor sd = tensor_sqrt(v);
  Tensor z = divide(mean, sd);
  Tensor cdf = mul_scalar(add_scalar(tensor_erf(mul_scalar(z, inv_sqrt2)), 1.0), 0.5);
  Tensor pdf = mul_scalar(tensor_exp(mul_scalar(square(z), -0.5)), inv_sqrt_2pi);

  Tensor pos_mean = add(mul(mean, cdf), mul(sd, pdf));
  Tensor second = add(square(mean), v);
  Tensor pos_second = add(mul(second, cdf), mul(mul(mean, sd), pdf));

  Tensor out_mean = add(mul_scalar(mean, slope), mul_scalar(pos_mean, 1.0 - slope));
  Tensor out_second =
      add(mul_scalar(second, slope * slope), mul_scalar(pos_second, 1.0 - slope * slope));
  Tensor out_var = sub(out_second, square(out_mean));
  return {out_mean, out_var};
}

std::pair<Tensor, Tensor> propagate_linear_moments(const NormalizedLayer& layer,
                                                   const Tensor& mean_in, const Tensor& var_in) {
  if (mean_in.rank() != 1 || var_in.rank() != 1 || mean_in.dim(0) != var_in.dim(0))
    throw ShapeError("propagate_linear_moments: per-channel moment vectors expected");
  const int c = mean_in.dim(0);
  Tensor w2d;
  Tensor m_col, v_col;
  if (layer.linear == NormalizedLayer::LinearKind::Conv) {
    if (layer.w.dim(1) != c) throw ShapeError("propagate_linear_moments: channel mismatch");
    const int spatial = layer.w.dim(2) * layer.w.dim(3);
    w2d = reshape(layer.w, {layer.w.dim(0), c * spatial});
    m_col = reshape(repeat_each(mean_in, spatial), {c * spatial, 1});
    v_col = reshape(repeat_each(var_in, spatial), {c * spatial, 1});
  } else {
    if (layer.w.dim(1) != c) throw ShapeError("propagate_linear_moments: channel mismatch");
    w2d = layer.w;
    m_col = reshape(mean_in, {c, 1});
    v_col = reshape(var_in, {c, 1});
  }
  const int o = layer.w.dim(0);
  Tensor mean_out = reshape(matmul(w2d, m_col), {o});
  Tensor var_out = reshape(matmul(square(w2d), v_col), {o});
  return {mean_out, var_out};
}

}  // namespace stochnorm
