#include "stochnorm/variational.hpp"

#include <cmath>
#include <stdexcept>

#include "stochnorm/network.hpp"

namespace stochnorm {

double sigma_from_u(double u) { return u < 0.0 ? std::exp(u) : u + 1.0; }

double dsigma_du(double u) { return u < 0.0 ? std::exp(u) : 1.0; }

Tensor sigma_from_u(const Tensor& u) {
  return unary_map(
      u, [](double v) { return sigma_from_u(v); },
      [](double v, double) { return dsigma_du(v); });
}

double kl_scale_value(double s, double u, const PriorConfig& prior) {
  const double sigma = sigma_from_u(u);
  const double s0sq = prior.sigma0 * prior.sigma0;
  const double ds = s - prior.s0;
  return -std::log(sigma * sigma) + sigma * sigma / s0sq + ds * ds / s0sq;
}

Tensor kl_scale(const VariationalScale& vs, const PriorConfig& prior) {
  if (!(prior.sigma0 > 0.0)) throw std::invalid_argument("kl_scale: sigma0 must be positive");
  if (!(prior.kl_factor >= 0.0))
    throw std::invalid_argument("kl_scale: kl_factor must be non-negative");
  const double inv_s0sq = 1.0 / (prior.sigma0 * prior.sigma0);
  const int channels = vs.s.dim(0);

  Tensor sigma = sigma_from_u(vs.u);
  if (vs.granularity == ScaleGranularity::PerLayer && sigma.dim(0) == 1 && channels > 1)
    sigma = repeat_each(sigma, channels);
  Tensor sigma_sq = square(sigma);
  Tensor log_term = neg(tensor_log(sigma_sq));
  Tensor var_term = mul_scalar(sigma_sq, inv_s0sq);
  Tensor mean_term = mul_scalar(square(add_scalar(vs.s, -prior.s0)), inv_s0sq);
  return sum_all(add(add(log_term, var_term), mean_term));
}

Tensor sample_scale(const VariationalScale& vs, int batch, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("sample_scale: batch must be >= 1");
  const int channels = vs.s.dim(0);
  Tensor sigma = sigma_from_u(vs.u);
  if (vs.granularity == ScaleGranularity::PerLayer && sigma.dim(0) == 1 && channels > 1)
    sigma = repeat_each(sigma, channels);
  std::vector<double> noise(static_cast<size_t>(batch) * channels);
  for (auto& v : noise) v = rng.normal();
  Tensor xi = Tensor::from({batch, channels}, std::move(noise));
  return add(broadcast_rows(vs.s, batch), mul(broadcast_rows(sigma, batch), xi));
}

Tensor bayes_norm_forward(const Tensor& x_norm, const Tensor& b, const Tensor& scale) {
  Tensor shifted = add_channel(x_norm, b);
  if (scale.rank() == 2) return mul_sample_channel(shifted, scale);
  return mul_channel(shifted, scale);
}

ElboBreakdown evidence_objective(const Tensor& batch_nll_sum, int64_t dataset_size,
                                 int64_t batch_size, const Tensor& kl_sum,
                                 const PriorConfig& prior) {
  if (batch_size < 1) throw std::invalid_argument("evidence_objective: batch_size must be >= 1");
  if (dataset_size < 1)
    throw std::invalid_argument("evidence_objective: dataset_size must be >= 1");
  ElboBreakdown out;
  out.dataset_size = dataset_size;
  out.batch_size = batch_size;
  out.evidence = mul_scalar(batch_nll_sum,
                            static_cast<double>(dataset_size) / static_cast<double>(batch_size));
  out.kl = kl_sum;
  out.total = add(out.evidence, mul_scalar(kl_sum, prior.kl_factor));
  return out;
}

Tensor mc_predict(Network& network, const Tensor& x, int n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("mc_predict: n_samples must be >= 1");
  const int batch = x.dim(0);
  const int classes = network.arch().classes;
  std::vector<double> acc(static_cast<size_t>(batch) * classes, 0.0);
  for (int i = 0; i < n_samples; ++i) {
    ForwardOptions opt;
    opt.mode = Mode::Eval;
    opt.sample_in_eval = true;
    opt.rng = &rng;
    Tensor logp = network.forward(x, opt);
    const double* d = logp.data();
    for (size_t j = 0; j < acc.size(); ++j) acc[j] += std::exp(d[j]);
  }
  const double inv = 1.0 / n_samples;
  for (auto& v : acc) v *= inv;
  return Tensor::from({batch, classes}, std::move(acc));
}

std::pair<double, double> bn_equivalence_map(double s, double b, double u, double v) {
  const double us = u * s;
  if (us == 0.0) throw std::invalid_argument("bn_equivalence_map: U*s must be nonzero");
  return {us, v + b / us};
}

bool dropout_equivalence_check(const Tensor& w, const Tensor& bias, const Tensor& x,
                               const Tensor& scale) {
  if (w.rank() != 2 || x.rank() != 1 || scale.rank() != 1)
    throw ShapeError("dropout_equivalence_check: expected W[o,i], x[i], S[i]");
  const int o = w.dim(0), in = w.dim(1);
  if (x.dim(0) != in || scale.dim(0) != in || bias.dim(0) != o)
    throw ShapeError("dropout_equivalence_check: shape mismatch");
  for (int i = 0; i < o; ++i) {
    double lhs = bias.at(i), rhs = bias.at(i);
    for (int j = 0; j < in; ++j) {
      lhs += w.at(i * in + j) * (x.at(j) * scale.at(j));
      rhs += (w.at(i * in + j) * scale.at(j)) * x.at(j);
    }
    if (std::fabs(lhs - rhs) > 1e-12) return false;
  }
  return true;
}

}  // namespace stochnorm
