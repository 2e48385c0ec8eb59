#include "stochnorm/stochastic.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "stochnorm/network.hpp"
#include "stochnorm/special_functions.hpp"

namespace stochnorm {

NoiseConfig NoiseConfig::measured_bn_defaults() {
  NoiseConfig cfg;
  cfg.model = NoiseModel::Gaussian;
  // Average per-layer sigma_U measured in a BN-trained network; sigma_V was
  // not reported and defaults to zero.
  cfg.sigma_u = {0.05, 0.03, 0.026, 0.023, 0.02, 0.026, 0.041, 0.045, 0.071};
  cfg.sigma_v = {};
  cfg.spatial_correlated = true;
  return cfg;
}

namespace {

double pick(const std::vector<double>& v, size_t layer, double fallback) {
  if (v.empty()) return fallback;
  if (v.size() == 1) return v[0];
  if (layer >= v.size())
    throw std::out_of_range("noise config: no entry for layer " + std::to_string(layer));
  return v[layer];
}

}  // namespace

double NoiseConfig::layer_sigma_v(size_t layer) const { return pick(sigma_v, layer, 0.0); }
double NoiseConfig::layer_sigma_u(size_t layer) const { return pick(sigma_u, layer, 0.0); }

int64_t NoiseConfig::layer_n(size_t layer) const {
  if (effective_n.empty())
    throw std::logic_error("noise config: exact-chi model requires effective_n");
  if (effective_n.size() == 1) return effective_n[0];
  if (layer >= effective_n.size())
    throw std::out_of_range("noise config: no effective_n for layer " + std::to_string(layer));
  return effective_n[layer];
}

NoiseSample sample_bn_noise(int64_t n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("sample_bn_noise: n must be >= 2");
  NoiseSample s;
  s.n = n;
  const double sqrt_n = std::sqrt(static_cast<double>(n));
  s.v = rng.normal() / sqrt_n;
  const double chi2 = rng.chi_squared(static_cast<int>(n - 1));
  s.u = sqrt_n / std::sqrt(chi2);
  return s;
}

NoiseField draw_noise_field(const NoiseConfig& cfg, size_t layer, int batch, int channels,
                            Rng& rng) {
  if (batch < 1 || channels < 1) throw std::invalid_argument("draw_noise_field: bad shape");
  const size_t count = static_cast<size_t>(batch) * channels;
  std::vector<double> v(count), u(count);
  if (cfg.model == NoiseModel::ExactChi) {
    const int64_t n = cfg.layer_n(layer);
    for (size_t i = 0; i < count; ++i) {
      const NoiseSample s = sample_bn_noise(n, rng);
      v[i] = s.v;
      u[i] = s.u;
    }
  } else {
    const double sv = cfg.layer_sigma_v(layer);
    const double su = cfg.layer_sigma_u(layer);
    if (sv < 0.0 || su < 0.0) throw std::invalid_argument("draw_noise_field: negative sigma");
    for (size_t i = 0; i < count; ++i) {
      v[i] = sv == 0.0 ? 0.0 : rng.normal(0.0, sv);
      u[i] = su == 0.0 ? 1.0 : rng.normal(1.0, su);
    }
  }
  return {Tensor::from({batch, channels}, std::move(v)),
          Tensor::from({batch, channels}, std::move(u))};
}

Tensor noisy_normalize(const Tensor& x_norm, const Tensor& v, const Tensor& u) {
  if (v.shape() != u.shape()) throw ShapeError("noisy_normalize: V and U shapes differ");
  if (v.shape() == x_norm.shape())
    return mul(add(x_norm, v), u);  // per-position draws
  return mul_sample_channel(add_sample_channel(x_norm, v), u);
}

KsResult ks_test_chi2(const std::vector<double>& samples, int64_t n) {
  if (samples.size() < 1000)
    throw std::invalid_argument("ks_test_chi2: need at least 1000 samples");
  if (n < 2) throw std::invalid_argument("ks_test_chi2: n must be >= 2");
  std::vector<double> sorted(samples);
  std::sort(sorted.begin(), sorted.end());
  const double count = static_cast<double>(sorted.size());
  const int dof = static_cast<int>(n - 1);
  double d = 0.0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    const double cdf = chi_squared_cdf(sorted[i], dof);
    const double lo = static_cast<double>(i) / count;
    const double hi = static_cast<double>(i + 1) / count;
    d = std::max(d, std::max(cdf - lo, hi - cdf));
  }
  const double sq = std::sqrt(count);
  const double lambda = (sq + 0.12 + 0.11 / sq) * d;
  return {d, kolmogorov_survival(lambda)};
}

double variance_scaling_fit(const std::vector<double>& sizes,
                            const std::vector<double>& variances) {
  if (sizes.size() != variances.size() || sizes.size() < 3)
    throw std::invalid_argument("variance_scaling_fit: need >= 3 paired points");
  const size_t m = sizes.size();
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < m; ++i) {
    if (!(sizes[i] > 0.0) || !(variances[i] > 0.0))
      throw std::invalid_argument("variance_scaling_fit: inputs must be positive");
    const double x = std::log(sizes[i]);
    const double y = std::log(variances[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double denom = m * sxx - sx * sx;
  if (denom == 0.0) throw std::invalid_argument("variance_scaling_fit: degenerate x values");
  return (m * sxy - sx * sy) / denom;
}

std::string EmpiricalNoiseStats::to_csv() const {
  std::ostringstream os;
  os << "layer_index,k,z,var_V,var_U,n_draws\n";
  os.precision(12);
  for (const auto& l : layers)
    os << l.layer_index << ',' << l.batch_size << ',' << l.spatial_size << ',' << l.var_v << ','
       << l.var_u << ',' << l.n_draws << '\n';
  return os.str();
}

EmpiricalNoiseStats measure_bn_noise(Network& network, const Tensor& data, int batch_size,
                                     int draws, Rng& rng) {
  if (data.rank() != 4) throw ShapeError("measure_bn_noise: data must be [N,c,h,w]");
  const int total = data.dim(0);
  if (batch_size < 2 || batch_size > total)
    throw std::invalid_argument("measure_bn_noise: bad batch size");
  if (draws < 100) throw std::invalid_argument("measure_bn_noise: need at least 100 draws");

  const size_t num_layers = network.layers().size();

  // Population statistics per layer and channel from one full pass. The
  // preceding layers normalize by full-data statistics in this pass, which
  // plays the role of the running (population) estimates.
  std::vector<std::vector<double>> pop_mu(num_layers), pop_sigma(num_layers);
  std::vector<int64_t> spatial(num_layers, 1);
  {
    ForwardOptions opt;
    opt.mode = Mode::Train;
    opt.update_running = false;
    opt.observer = [&](size_t li, const Tensor& z) {
      NormStats st = batch_stats(z);
      const int c = z.dim(1);
      pop_mu[li].resize(static_cast<size_t>(c));
      pop_sigma[li].resize(static_cast<size_t>(c));
      for (int i = 0; i < c; ++i) {
        pop_mu[li][static_cast<size_t>(i)] = st.mu.at(i);
        pop_sigma[li][static_cast<size_t>(i)] = st.sigma.at(i);
      }
      spatial[li] = 1;
      for (int d = 2; d < z.rank(); ++d) spatial[li] *= z.dim(d);
    };
    network.forward(data, opt);
  }

  // Welford-style accumulation of the V and U samples per layer.
  struct Acc {
    int64_t count = 0;
    double mean_v = 0.0, m2_v = 0.0;
    double mean_u = 0.0, m2_u = 0.0;
    void push_v(double x) {
      ++count;
      const double d = x - mean_v;
      mean_v += d / count;
      m2_v += d * (x - mean_v);
    }
    void push_u(double x) {
      const double d = x - mean_u;
      mean_u += d / count;  // count already incremented by push_v
      m2_u += d * (x - mean_u);
    }
  };
  std::vector<Acc> acc(num_layers);

  const int64_t rows = static_cast<int64_t>(data.size()) / total;
  for (int t = 0; t < draws; ++t) {
    std::vector<double> chunk(static_cast<size_t>(batch_size) * rows);
    for (int i = 0; i < batch_size; ++i) {
      const int64_t pick_row = rng.uniform_int(total);
      std::copy(data.data() + pick_row * rows, data.data() + (pick_row + 1) * rows,
                chunk.begin() + static_cast<int64_t>(i) * rows);
    }
    Shape bshape = data.shape();
    bshape[0] = batch_size;
    Tensor batch = Tensor::from(bshape, std::move(chunk));

    ForwardOptions opt;
    opt.mode = Mode::Train;
    opt.update_running = false;
    opt.observer = [&](size_t li, const Tensor& z) {
      NormStats st = batch_stats(z);
      const int c = z.dim(1);
      for (int i = 0; i < c; ++i) {
        const double sigma = pop_sigma[li][static_cast<size_t>(i)];
        const double s_batch = st.sigma.at(i);
        if (!(sigma > 0.0) || !(s_batch > 0.0)) continue;
        acc[li].push_v((pop_mu[li][static_cast<size_t>(i)] - st.mu.at(i)) / sigma);
        acc[li].push_u(sigma / s_batch);
      }
    };
    network.forward(batch, opt);
  }

  EmpiricalNoiseStats out;
  for (size_t li = 0; li < num_layers; ++li) {
    EmpiricalNoiseStats::Layer l;
    l.layer_index = static_cast<int>(li);
    l.batch_size = batch_size;
    l.spatial_size = spatial[li];
    l.n_draws = draws;
    if (acc[li].count < 100)
      throw std::runtime_error("measure_bn_noise: insufficient samples collected");
    l.var_v = acc[li].m2_v / acc[li].count;
    l.var_u = acc[li].m2_u / acc[li].count;
    out.layers.push_back(l);
  }
  return out;
}

}  // namespace stochnorm
