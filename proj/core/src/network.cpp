#include "stochnorm/network.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace stochnorm {

std::string ArchitectureSpec::describe() const {
  std::ostringstream os;
  os << "in=" << in_channels << ";hw=" << image_hw << ";classes=" << classes
     << ";slope=" << leaky_slope;
  for (const auto& c : convs)
    os << ";conv(" << c.out_channels << ',' << c.ksize << ',' << c.stride << ',' << c.pad << ')';
  return os.str();
}

uint64_t ArchitectureSpec::hash() const {
  // FNV-1a over the canonical description.
  uint64_t h = 1469598103934665603ull;
  for (char ch : describe()) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h;
}

ArchitectureSpec narrowed_allcnn(int in_channels, int image_hw, int classes, int width_divisor) {
  if (width_divisor < 1) throw std::invalid_argument("narrowed_allcnn: bad width divisor");
  const int ksize[9] = {3, 3, 3, 3, 3, 3, 3, 1, 1};
  const int stride[9] = {1, 1, 2, 1, 1, 2, 1, 1, 1};
  const int depth[9] = {96, 96, 96, 192, 192, 192, 192, 192, 0};
  ArchitectureSpec a;
  a.in_channels = in_channels;
  a.image_hw = image_hw;
  a.classes = classes;
  a.leaky_slope = 0.01;
  for (int i = 0; i < 9; ++i) {
    ConvSpec c;
    c.ksize = ksize[i];
    c.stride = stride[i];
    c.pad = (ksize[i] - 1) / 2;
    c.out_channels = i == 8 ? classes : std::max(2, depth[i] / width_divisor);
    a.convs.push_back(c);
  }
  return a;
}

Network Network::build(const ArchitectureSpec& arch, NormKind kind, NoiseMode noise,
                       ScaleGranularity granularity, Rng& init_rng, bool project) {
  if (arch.convs.empty()) throw std::invalid_argument("network: empty architecture");
  if (arch.convs.back().out_channels != arch.classes)
    throw std::invalid_argument("network: final layer width must equal class count");
  Network net;
  net.arch_ = arch;
  net.norm_kind_ = kind;
  net.noise_mode_ = noise;
  net.granularity_ = granularity;
  net.project_ = project;
  int in_c = arch.in_channels;
  for (const auto& spec : arch.convs) {
    NormalizedLayer layer;
    layer.linear = NormalizedLayer::LinearKind::Conv;
    layer.kind = kind;
    layer.stride = spec.stride;
    layer.pad = spec.pad;
    layer.w = init_weights({spec.out_channels, in_c, spec.ksize, spec.ksize}, init_rng);
    if (kind == NormKind::None)
      layer.bias = Tensor::zeros({spec.out_channels}, true);
    layer.s = Tensor::filled({spec.out_channels}, 1.0, true);
    layer.b = Tensor::zeros({spec.out_channels}, true);
    if (noise == NoiseMode::Variational) {
      // sigma(u) = 0.05 at initialization: near-deterministic start.
      const double u0 = std::log(0.05);
      const int uc = granularity == ScaleGranularity::PerChannel ? spec.out_channels : 1;
      layer.u = Tensor::filled({uc}, u0, true);
    }
    net.layers_.push_back(std::move(layer));
    in_c = spec.out_channels;
  }
  if (project) {
    // Establish ||w|| = 1 per output channel from the start.
    auto params = net.parameters();
    Optimizer opt(OptimizerConfig{}, std::move(params));
    opt.project_params();
  }
  return net;
}

std::vector<ParamRef> Network::parameters() {
  std::vector<ParamRef> out;
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    const bool project_w = project_ && l.kind != NormKind::None;
    out.push_back({l.w, project_w, prefix + "w"});
    if (l.bias.defined()) out.push_back({l.bias, false, prefix + "bias"});
    out.push_back({l.s, false, prefix + "s"});
    out.push_back({l.b, false, prefix + "b"});
    if (l.u.defined()) out.push_back({l.u, false, prefix + "u"});
  }
  return out;
}

NormalizedLayer Network::watched_view(const NormalizedLayer& layer, Tape* tape) const {
  NormalizedLayer view = layer;
  if (tape) {
    view.w = tape->watch(layer.w);
    if (layer.bias.defined()) view.bias = tape->watch(layer.bias);
    view.s = tape->watch(layer.s);
    view.b = tape->watch(layer.b);
    if (layer.u.defined()) view.u = tape->watch(layer.u);
  }
  return view;
}

std::vector<NormStats> Network::analytic_sweep(const std::vector<NormalizedLayer>& views) const {
  if (!moments_.defined())
    throw std::logic_error("analytic normalization requires dataset moments");
  if (moments_.mean.size() != static_cast<size_t>(arch_.in_channels))
    throw ShapeError("dataset moments do not match input channels");
  for (double v : moments_.var)
    if (v < 0.0) throw std::invalid_argument("dataset moments: negative variance");

  std::vector<NormStats> stats;
  stats.reserve(views.size());
  Tensor mean = Tensor::from({arch_.in_channels}, moments_.mean);
  Tensor var = Tensor::from({arch_.in_channels}, moments_.var);
  for (size_t li = 0; li < views.size(); ++li) {
    const auto& view = views[li];
    auto [mz, vz] = propagate_linear_moments(view, mean, var);
    Tensor sigma = tensor_sqrt(add_scalar(vz, view.eps * view.eps));
    stats.push_back({mz, sigma});
    if (li + 1 == views.size()) break;
    // Post-normalization moments are (0,1) by construction; apply the affine
    // in the parametrization the forward pass uses, then the activation.
    Tensor m_aff, v_aff;
    if (noise_mode_ == NoiseMode::Variational) {
      m_aff = mul(view.b, view.s);  // (x + b) * s
      v_aff = square(view.s);
    } else {
      m_aff = view.b;  // x * s + b
      v_aff = square(view.s);
    }
    auto [m_act, v_act] = rectified_gaussian_moments(m_aff, v_aff, arch_.leaky_slope);
    mean = m_act;
    var = v_act;
  }
  return stats;
}

std::vector<NormStats> analytic_norm_stats(Network& network, const DatasetMoments& moments,
                                           Tape* tape) {
  network.set_dataset_moments(moments);
  std::vector<NormalizedLayer> views;
  views.reserve(network.layers().size());
  for (auto& l : network.layers()) {
    NormalizedLayer v = l;
    if (tape) {
      v.w = tape->watch(l.w);
      v.s = tape->watch(l.s);
      v.b = tape->watch(l.b);
    }
    views.push_back(std::move(v));
  }
  return network.analytic_sweep(views);
}

Tensor Network::layer_stage(size_t index, NormalizedLayer& view, const Tensor& input,
                            const ForwardOptions& opt, const std::vector<NormStats>& an_stats) {
  Tensor z = linear_apply(view, input);
  if (opt.observer) opt.observer(index, z);

  Tensor x_norm;
  switch (norm_kind_) {
    case NormKind::None:
      x_norm = add_channel(z, view.bias);
      break;
    case NormKind::BatchNorm:
      x_norm = bn_normalize(view, z, opt.mode, opt.mode == Mode::Train && opt.update_running);
      if (opt.mode == Mode::Train && opt.update_running) layers_[index].running = view.running;
      break;
    case NormKind::WeightNorm: {
      NormStats st = weight_norm_stats(view.w);
      x_norm = div_channel(z, st.sigma);
      break;
    }
    case NormKind::AnalyticNorm:
      x_norm = div_channel(sub_channel(z, an_stats[index].mu), an_stats[index].sigma);
      break;
  }

  const bool sample = opt.mode == Mode::Train || opt.sample_in_eval;
  const int batch = input.dim(0);
  switch (noise_mode_) {
    case NoiseMode::None:
      break;
    case NoiseMode::FixedGaussian:
    case NoiseMode::ExactChi:
      if (sample) {
        if (!opt.rng) throw std::logic_error("noise-injection forward requires an rng");
        NoiseField field =
            draw_noise_field(noise_cfg_, index, batch, view.out_channels(), *opt.rng);
        x_norm = noisy_normalize(x_norm, field.v, field.u);
      }
      break;
    case NoiseMode::Variational: {
      if (sample) {
        if (!opt.rng) throw std::logic_error("variational forward requires an rng");
        VariationalScale vs{view.s, view.u, granularity_};
        Tensor scale = sample_scale(vs, batch, *opt.rng);
        return bayes_norm_forward(x_norm, view.b, scale);
      }
      // Evaluation substitutes the mean scales.
      return mul_channel(add_channel(x_norm, view.b), view.s);
    }
  }
  return add_channel(mul_channel(x_norm, view.s), view.b);
}

Tensor Network::forward_features(const Tensor& x, size_t num_layers, const ForwardOptions& opt) {
  if (num_layers > layers_.size()) throw std::invalid_argument("forward_features: bad layer count");
  Tensor h = opt.tape ? opt.tape->watch(x) : x;
  std::vector<NormalizedLayer> views;
  views.reserve(layers_.size());
  for (auto& l : layers_) views.push_back(watched_view(l, opt.tape));
  std::vector<NormStats> an_stats;
  if (norm_kind_ == NormKind::AnalyticNorm) an_stats = analytic_sweep(views);
  for (size_t li = 0; li < num_layers; ++li) {
    h = layer_stage(li, views[li], h, opt, an_stats);
    if (li + 1 < layers_.size()) h = leaky_relu(h, arch_.leaky_slope);
  }
  return h;
}

Tensor Network::forward(const Tensor& x, const ForwardOptions& opt) {
  Tensor h = forward_features(x, layers_.size(), opt);
  return log_softmax(global_avg_pool(h));
}

void data_dependent_init(Network& network, const Tensor& batch) {
  auto& layers = network.layers();
  if (network.norm_kind() == NormKind::BatchNorm) return;  // BN standardizes by construction

  // The fold makes each layer's output on this batch equal the output of a
  // batch-normalization pass with s=1, b=0. Evaluation-mode forward keeps
  // the pass deterministic; weights never move (zero learning rate).
  ForwardOptions opt;
  opt.mode = Mode::Eval;
  const bool eq20 = network.noise_mode() == NoiseMode::Variational;  // (x_norm + b) * s form
  for (size_t li = 0; li < layers.size(); ++li) {
    Tensor h = network.forward_features(batch, li, opt);
    auto& layer = layers[li];
    Tensor z = linear_apply(layer, h);
    NormStats st = batch_stats(z);
    std::vector<NormStats> an_stats;
    if (layer.kind == NormKind::AnalyticNorm)
      an_stats = network.analytic_sweep(layers);
    const int c = layer.out_channels();
    const double eps2 = layer.eps * layer.eps;
    for (int i = 0; i < c; ++i) {
      const double m = st.mu.at(i);
      const double sd = st.sigma.at(i);
      const double denom = std::sqrt(sd * sd + eps2);
      if (!(denom > 0.0))
        throw std::invalid_argument("data_dependent_init: degenerate batch statistics");
      // Desired output: (z - m)/denom. Solve for (s, b) given the layer's
      // x_norm and affine parametrization.
      double gain = 0.0;  // x_norm = gain * z + shift
      double shift = 0.0;
      switch (layer.kind) {
        case NormKind::None:
          gain = 1.0;
          shift = layer.bias.at(i);
          break;
        case NormKind::WeightNorm: {
          double norm2 = 0.0;
          const int64_t cols = layer.w.size() / layer.w.dim(0);
          const double* row = layer.w.data() + i * cols;
          for (int64_t j = 0; j < cols; ++j) norm2 += row[j] * row[j];
          gain = 1.0 / std::sqrt(norm2);
          shift = 0.0;
          break;
        }
        case NormKind::AnalyticNorm:
          gain = 1.0 / an_stats[li].sigma.at(i);
          shift = -an_stats[li].mu.at(i) / an_stats[li].sigma.at(i);
          break;
        case NormKind::BatchNorm:
          gain = 1.0;  // unreachable
          break;
      }
      const double s_new = 1.0 / (denom * gain);
      if (eq20) {
        // (x_norm + b) * s = (z - m)/denom  =>  b = -(m*gain + shift*denom)/denom... solved below
        layer.s.data()[i] = s_new;
        layer.b.data()[i] = -(m / denom) / s_new - shift;
      } else {
        // x_norm * s + b = (z - m)/denom
        layer.s.data()[i] = s_new;
        layer.b.data()[i] = -m / denom - shift * s_new;
      }
    }
  }
}

}  // namespace stochnorm
