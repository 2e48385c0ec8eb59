#include "stochnorm/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "stochnorm/checkpoint.hpp"

namespace stochnorm {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// --- config <-> json -------------------------------------------------------

NormKind norm_from_string(const std::string& s) {
  if (s == "batch") return NormKind::BatchNorm;
  if (s == "weight") return NormKind::WeightNorm;
  if (s == "analytic") return NormKind::AnalyticNorm;
  if (s == "none") return NormKind::None;
  throw ConfigError("unknown normalization kind: " + s);
}

std::string norm_to_string(NormKind k) {
  switch (k) {
    case NormKind::BatchNorm: return "batch";
    case NormKind::WeightNorm: return "weight";
    case NormKind::AnalyticNorm: return "analytic";
    case NormKind::None: return "none";
  }
  return "none";
}

NoiseMode noise_from_string(const std::string& s) {
  if (s == "none") return NoiseMode::None;
  if (s == "fixed-gaussian") return NoiseMode::FixedGaussian;
  if (s == "exact-chi") return NoiseMode::ExactChi;
  if (s == "variational") return NoiseMode::Variational;
  throw ConfigError("unknown noise mode: " + s);
}

std::string noise_to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::None: return "none";
    case NoiseMode::FixedGaussian: return "fixed-gaussian";
    case NoiseMode::ExactChi: return "exact-chi";
    case NoiseMode::Variational: return "variational";
  }
  return "none";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "gaussian-clusters-images") return DatasetKind::GaussianClustersImages;
  if (s == "correlated-spatial") return DatasetKind::CorrelatedSpatial;
  throw ConfigError("unknown dataset kind: " + s);
}

std::string dataset_kind_to_string(DatasetKind k) {
  return k == DatasetKind::GaussianClustersImages ? "gaussian-clusters-images"
                                                  : "correlated-spatial";
}

void check_known_keys(const json& j, const std::vector<std::string>& known,
                      const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("unknown config key '" + it.key() + "' in " + where);
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("bad value for config key '") + key + "'");
    }
  }
}

void validate(const ExperimentConfig& c) {
  if (c.version != 1) throw ConfigError("unsupported config version");
  if (c.dataset.classes < 2) throw ConfigError("dataset.classes must be >= 2");
  if (c.dataset.train_size < c.batch_size)
    throw ConfigError("dataset.train_size smaller than the batch size");
  if (c.dataset.label_noise < 0.0 || c.dataset.label_noise > 1.0)
    throw ConfigError("dataset.label_noise must be in [0,1]");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.normalization_batch_size != 0 && c.normalization_batch_size < c.batch_size)
    throw ConfigError("normalization batch must be >= the train batch");
  if (c.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (!c.lr_auto && !(c.lr0 > 0.0)) throw ConfigError("optimizer.lr0 must be positive");
  if (c.gamma_epochs_to_tenth < 1) throw ConfigError("optimizer.gamma_epochs_to_tenth must be >= 1");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("optimizer.momentum must be in [0,1)");
  if (c.kl_factor < 0.0) throw ConfigError("variational.kl_factor must be >= 0");
  if (!(c.prior_sigma > 0.0)) throw ConfigError("variational.prior_sigma must be > 0");
  if (!(c.init_sigma > 0.0)) throw ConfigError("variational.init_sigma must be > 0");
  if (c.mc_eval_samples < 1) throw ConfigError("variational.mc_eval_samples must be >= 1");
  if (c.init_batch < 2) throw ConfigError("init.batch must be >= 2");
  if (c.arch_preset != "allcnn" && c.arch_preset != "custom")
    throw ConfigError("architecture.preset must be 'allcnn' or 'custom'");
  if (c.arch_preset == "custom") {
    if (c.custom_widths.empty() || c.custom_widths.size() != c.custom_ksize.size() ||
        c.custom_widths.size() != c.custom_stride.size())
      throw ConfigError("custom architecture needs equal-length widths/ksize/stride");
    if (c.custom_widths.back() != c.dataset.classes)
      throw ConfigError("last custom width must equal dataset.classes");
  }
}

ExperimentConfig config_from_json_object(const json& j) {
  ExperimentConfig c;
  check_known_keys(j, {"version", "seed", "dataset", "architecture", "normalization", "noise",
                       "train", "optimizer", "variational", "init"},
                   "top level");
  get_if(j, "version", c.version);
  get_if(j, "seed", c.seed);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_known_keys(d, {"kind", "image_hw", "channels", "classes", "train_size", "label_noise",
                         "cluster_sep", "within_std", "spatial_corr"},
                     "dataset");
    if (d.contains("kind")) c.dataset.kind = dataset_kind_from_string(d.at("kind").get<std::string>());
    get_if(d, "image_hw", c.dataset.image_hw);
    get_if(d, "channels", c.dataset.channels);
    get_if(d, "classes", c.dataset.classes);
    get_if(d, "train_size", c.dataset.train_size);
    get_if(d, "label_noise", c.dataset.label_noise);
    get_if(d, "cluster_sep", c.dataset.cluster_sep);
    get_if(d, "within_std", c.dataset.within_std);
    get_if(d, "spatial_corr", c.dataset.spatial_corr);
  }
  if (j.contains("architecture")) {
    const auto& a = j.at("architecture");
    check_known_keys(a, {"preset", "width_divisor", "widths", "ksize", "stride", "leaky_slope"},
                     "architecture");
    get_if(a, "preset", c.arch_preset);
    get_if(a, "width_divisor", c.width_divisor);
    get_if(a, "widths", c.custom_widths);
    get_if(a, "ksize", c.custom_ksize);
    get_if(a, "stride", c.custom_stride);
    get_if(a, "leaky_slope", c.leaky_slope);
  }
  if (j.contains("normalization"))
    c.normalization = norm_from_string(j.at("normalization").get<std::string>());
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    check_known_keys(n, {"mode", "sigma_v", "sigma_u", "effective_n", "spatial_correlated"},
                     "noise");
    if (n.contains("mode")) c.noise_mode = noise_from_string(n.at("mode").get<std::string>());
    get_if(n, "sigma_v", c.noise_sigma_v);
    get_if(n, "sigma_u", c.noise_sigma_u);
    get_if(n, "effective_n", c.noise_effective_n);
    get_if(n, "spatial_correlated", c.noise_spatial_correlated);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_known_keys(t, {"batch_size", "normalization_batch_size", "epochs", "augment"}, "train");
    get_if(t, "batch_size", c.batch_size);
    get_if(t, "normalization_batch_size", c.normalization_batch_size);
    get_if(t, "epochs", c.epochs);
    get_if(t, "augment", c.augment);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_known_keys(o, {"kind", "lr0", "momentum", "gamma_epochs_to_tenth", "project"},
                     "optimizer");
    if (o.contains("kind")) {
      const std::string k = o.at("kind").get<std::string>();
      if (k == "sgd_nesterov")
        c.optimizer = OptKind::SgdNesterov;
      else if (k == "adam")
        c.optimizer = OptKind::Adam;
      else
        throw ConfigError("unknown optimizer kind: " + k);
    }
    if (o.contains("lr0")) {
      if (o.at("lr0").is_string()) {
        if (o.at("lr0").get<std::string>() != "auto")
          throw ConfigError("optimizer.lr0 must be a number or \"auto\"");
        c.lr_auto = true;
      } else {
        c.lr0 = o.at("lr0").get<double>();
        c.lr_auto = false;
      }
    }
    get_if(o, "momentum", c.momentum);
    get_if(o, "gamma_epochs_to_tenth", c.gamma_epochs_to_tenth);
    get_if(o, "project", c.project);
  }
  if (j.contains("variational")) {
    const auto& v = j.at("variational");
    check_known_keys(v, {"kl_factor", "granularity", "prior_mean", "prior_sigma", "init_sigma",
                         "mc_eval_samples"},
                     "variational");
    get_if(v, "kl_factor", c.kl_factor);
    if (v.contains("granularity")) {
      const std::string g = v.at("granularity").get<std::string>();
      if (g == "per_channel")
        c.granularity = ScaleGranularity::PerChannel;
      else if (g == "per_layer")
        c.granularity = ScaleGranularity::PerLayer;
      else
        throw ConfigError("unknown granularity: " + g);
    }
    get_if(v, "prior_mean", c.prior_mean);
    get_if(v, "prior_sigma", c.prior_sigma);
    get_if(v, "init_sigma", c.init_sigma);
    get_if(v, "mc_eval_samples", c.mc_eval_samples);
  }
  if (j.contains("init")) {
    const auto& i = j.at("init");
    check_known_keys(i, {"data_dependent", "batch"}, "init");
    get_if(i, "data_dependent", c.data_dependent_init);
    get_if(i, "batch", c.init_batch);
  }
  validate(c);
  return c;
}

json config_to_json_object(const ExperimentConfig& c) {
  json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["dataset"] = {{"kind", dataset_kind_to_string(c.dataset.kind)},
                  {"image_hw", c.dataset.image_hw},
                  {"channels", c.dataset.channels},
                  {"classes", c.dataset.classes},
                  {"train_size", c.dataset.train_size},
                  {"label_noise", c.dataset.label_noise},
                  {"cluster_sep", c.dataset.cluster_sep},
                  {"within_std", c.dataset.within_std},
                  {"spatial_corr", c.dataset.spatial_corr}};
  j["architecture"] = {{"preset", c.arch_preset},
                       {"width_divisor", c.width_divisor},
                       {"widths", c.custom_widths},
                       {"ksize", c.custom_ksize},
                       {"stride", c.custom_stride},
                       {"leaky_slope", c.leaky_slope}};
  j["normalization"] = norm_to_string(c.normalization);
  j["noise"] = {{"mode", noise_to_string(c.noise_mode)},
                {"sigma_v", c.noise_sigma_v},
                {"sigma_u", c.noise_sigma_u},
                {"effective_n", c.noise_effective_n},
                {"spatial_correlated", c.noise_spatial_correlated}};
  j["train"] = {{"batch_size", c.batch_size},
                {"normalization_batch_size", c.normalization_batch_size},
                {"epochs", c.epochs},
                {"augment", c.augment}};
  j["optimizer"] = {{"kind", c.optimizer == OptKind::SgdNesterov ? "sgd_nesterov" : "adam"},
                    {"momentum", c.momentum},
                    {"gamma_epochs_to_tenth", c.gamma_epochs_to_tenth},
                    {"project", c.project}};
  if (c.lr_auto)
    j["optimizer"]["lr0"] = "auto";
  else
    j["optimizer"]["lr0"] = c.lr0;
  j["variational"] = {{"kl_factor", c.kl_factor},
                      {"granularity",
                       c.granularity == ScaleGranularity::PerChannel ? "per_channel" : "per_layer"},
                      {"prior_mean", c.prior_mean},
                      {"prior_sigma", c.prior_sigma},
                      {"init_sigma", c.init_sigma},
                      {"mc_eval_samples", c.mc_eval_samples}};
  j["init"] = {{"data_dependent", c.data_dependent_init}, {"batch", c.init_batch}};
  return j;
}

}  // namespace

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json_object(j);
}

ExperimentConfig config_from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ExperimentConfig& config) {
  return config_to_json_object(config).dump(2);
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json j = config_to_json_object(config);
  json* node = &j;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    const auto dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) throw ConfigError("unknown config key: " + path);
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw ConfigError("unknown config key: " + path);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // plain string
  }
  (*node)[parts.back()] = parsed;
  config = config_from_json_object(j);
}

ArchitectureSpec ExperimentConfig::architecture(int in_channels, int image_hw,
                                                int classes) const {
  ArchitectureSpec a;
  if (arch_preset == "allcnn") {
    a = narrowed_allcnn(in_channels, image_hw, classes, width_divisor);
  } else {
    a.in_channels = in_channels;
    a.image_hw = image_hw;
    a.classes = classes;
    for (size_t i = 0; i < custom_widths.size(); ++i) {
      ConvSpec cs;
      cs.out_channels = custom_widths[i];
      cs.ksize = custom_ksize[i];
      cs.stride = custom_stride[i];
      cs.pad = (custom_ksize[i] - 1) / 2;
      a.convs.push_back(cs);
    }
  }
  a.leaky_slope = leaky_slope;
  return a;
}

// --- metrics / csv ---------------------------------------------------------

std::string metrics_to_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << "epoch,train_loss,train_loss_eval_mode,val_loss,val_acc,evidence,kl,lr\n";
  for (const auto& r : records)
    os << r.epoch << ',' << fmt(r.train_loss) << ',' << fmt(r.train_loss_eval_mode) << ','
       << fmt(r.val_loss) << ',' << fmt(r.val_acc) << ',' << fmt(r.evidence) << ','
       << fmt(r.kl) << ',' << fmt(r.lr) << '\n';
  return os.str();
}

double eval_nll(Network& network, const Tensor& images, const std::vector<int>& labels) {
  ForwardOptions fo;
  fo.mode = Mode::Eval;
  Tensor logp = network.forward(images, fo);
  return nll_loss(logp, labels).item();
}

double eval_accuracy(Network& network, const Tensor& images, const std::vector<int>& labels) {
  ForwardOptions fo;
  fo.mode = Mode::Eval;
  Tensor logp = network.forward(images, fo);
  const int64_t k = logp.dim(0), c = logp.dim(1);
  int64_t correct = 0;
  for (int64_t r = 0; r < k; ++r) {
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (logp.at(r * c + j) > logp.at(r * c + best)) best = j;
    if (best == labels[static_cast<size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(k);
}

double nll_of_probs(const Tensor& probs, const std::vector<int>& labels) {
  const int64_t k = probs.dim(0), c = probs.dim(1);
  double acc = 0.0;
  for (int64_t r = 0; r < k; ++r) {
    const double p = std::max(probs.at(r * c + labels[static_cast<size_t>(r)]), 1e-300);
    acc -= std::log(p);
  }
  return acc / static_cast<double>(k);
}

// --- training --------------------------------------------------------------

namespace {

struct EpochEval {
  double train_eval = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

EpochEval evaluate(Network& net, const SyntheticDataset& ds) {
  EpochEval e;
  e.train_eval = eval_nll(net, ds.train_images(), ds.train_labels());
  e.val_loss = eval_nll(net, ds.val_images(), ds.val_labels());
  e.val_acc = eval_accuracy(net, ds.val_images(), ds.val_labels());
  return e;
}

RunResult train_once(const ExperimentConfig& cfg, const std::string& out_dir) {
  validate(cfg);
  const auto t_start = std::chrono::steady_clock::now();
  SyntheticDataset ds = SyntheticDataset::generate(cfg.dataset, cfg.seed);
  Rng init_rng(derive_seed(cfg.seed, 1));
  Rng train_rng(derive_seed(cfg.seed, 2));  // batch order, extra rows, augmentation
  Rng eval_rng(derive_seed(cfg.seed, 3));
  Rng noise_rng(derive_seed(cfg.seed, 4));  // forward-pass sampling only

  ArchitectureSpec arch =
      cfg.architecture(cfg.dataset.channels, cfg.dataset.image_hw, cfg.dataset.classes);
  Network net = Network::build(arch, cfg.normalization, cfg.noise_mode, cfg.granularity,
                               init_rng, cfg.project);

  if (cfg.noise_mode == NoiseMode::Variational) {
    const double u0 =
        cfg.init_sigma < 1.0 ? std::log(cfg.init_sigma) : cfg.init_sigma - 1.0;
    for (auto& l : net.layers())
      for (int64_t i = 0; i < l.u.size(); ++i) l.u.data()[i] = u0;
  }
  if (cfg.noise_mode == NoiseMode::FixedGaussian || cfg.noise_mode == NoiseMode::ExactChi) {
    auto& nc = net.noise_config();
    nc.model = cfg.noise_mode == NoiseMode::ExactChi ? NoiseModel::ExactChi : NoiseModel::Gaussian;
    nc.sigma_v = cfg.noise_sigma_v;
    nc.sigma_u = cfg.noise_sigma_u;
    nc.spatial_correlated = cfg.noise_spatial_correlated;
    nc.effective_n = cfg.noise_effective_n;
    if (nc.model == NoiseModel::ExactChi && nc.effective_n.empty()) {
      // Default n = batch * spatial size of each layer's output.
      int hw = arch.image_hw;
      for (const auto& conv : arch.convs) {
        hw = (hw + 2 * conv.pad - conv.ksize) / conv.stride + 1;
        nc.effective_n.push_back(static_cast<int64_t>(cfg.batch_size) * hw * hw);
      }
    }
  }
  if (cfg.normalization == NormKind::AnalyticNorm) net.set_dataset_moments(ds.input_moments());
  if (cfg.data_dependent_init && cfg.normalization != NormKind::BatchNorm) {
    const int ib = std::min<int64_t>(cfg.init_batch, ds.train_size());
    std::vector<int64_t> idx(static_cast<size_t>(ib));
    std::iota(idx.begin(), idx.end(), 0);
    data_dependent_init(net, ds.train_batch(idx));
  }

  OptimizerConfig ocfg;
  ocfg.kind = cfg.optimizer;
  ocfg.lr0 = cfg.lr0;
  ocfg.momentum = cfg.momentum;
  ocfg.gamma = gamma_for_epochs_to_tenth(cfg.gamma_epochs_to_tenth);
  Optimizer opt(ocfg, net.parameters());

  const bool bayes = cfg.noise_mode == NoiseMode::Variational;
  const PriorConfig prior = cfg.prior();
  const int M = cfg.batch_size;
  const int norm_k = cfg.normalization_batch_size > 0 ? cfg.normalization_batch_size : M;
  const int64_t dataset_size = ds.train_size();

  RunResult result;
  result.chosen_lr0 = cfg.lr0;
  std::ostringstream elbo_csv;
  elbo_csv << "step,evidence,kl,total\n";
  std::vector<double> epoch_seconds;
  int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs && !result.diverged; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    std::vector<int64_t> order(static_cast<size_t>(dataset_size));
    std::iota(order.begin(), order.end(), 0);
    train_rng.shuffle(order);

    double loss_sum = 0.0, ev_sum = 0.0, kl_sum = 0.0;
    int batches = 0;
    for (int64_t off = 0; off + M <= dataset_size && !result.diverged; off += M) {
      std::vector<int64_t> idx(order.begin() + off, order.begin() + off + M);
      auto labels = ds.train_batch_labels(idx);
      for (int extra = M; extra < norm_k; ++extra)
        idx.push_back(train_rng.uniform_int(dataset_size));
      Tensor batch = ds.train_batch(idx);
      if (cfg.augment) batch = augment_batch(batch, train_rng);

      try {
        Tape tape;
        ForwardOptions fo;
        fo.mode = Mode::Train;
        fo.tape = &tape;
        fo.rng = &noise_rng;
        Tensor logp = net.forward(batch, fo);
        Tensor logp_loss = norm_k > M ? narrow0(logp, 0, M) : logp;
        Tensor mean_nll = nll_loss(logp_loss, labels);
        const double loss_value = mean_nll.item();
        if (!std::isfinite(loss_value)) throw DivergenceError("non-finite training loss");

        Tensor objective = mean_nll;
        if (bayes) {
          Tensor kl_total;
          for (auto& l : net.layers()) {
            VariationalScale vs{tape.watch(l.s), tape.watch(l.u), cfg.granularity};
            Tensor kl_l = kl_scale(vs, prior);
            kl_total = kl_total.defined() ? add(kl_total, kl_l) : kl_l;
          }
          Tensor nll_sum = mul_scalar(mean_nll, static_cast<double>(M));
          ElboBreakdown elbo = evidence_objective(nll_sum, dataset_size, M, kl_total, prior);
          // Step on the per-example objective so kl_factor=0 reproduces
          // maximum likelihood exactly.
          objective = mul_scalar(elbo.total, 1.0 / static_cast<double>(dataset_size));
          ev_sum += elbo.evidence.item();
          kl_sum += elbo.kl.item();
          elbo_csv << step << ',' << fmt(elbo.evidence.item()) << ',' << fmt(elbo.kl.item())
                   << ',' << fmt(elbo.total.item()) << '\n';
        }
        tape.backward(objective);
        opt.step(epoch);
        loss_sum += loss_value;
        ++batches;
        ++step;
      } catch (const DivergenceError& e) {
        result.diverged = true;
        result.message = e.what();
      }
    }
    if (result.diverged) break;

    EpochEval ev = evaluate(net, ds);
    MetricsRecord rec;
    rec.epoch = epoch;
    rec.train_loss = batches > 0 ? loss_sum / batches : 0.0;
    rec.train_loss_eval_mode = ev.train_eval;
    rec.val_loss = ev.val_loss;
    rec.val_acc = ev.val_acc;
    rec.evidence = bayes && batches > 0 ? ev_sum / batches : std::nan("");
    rec.kl = bayes && batches > 0 ? kl_sum / batches : std::nan("");
    rec.lr = opt.learning_rate(epoch);
    result.metrics.push_back(rec);
    epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count());
  }

  if (!result.metrics.empty()) {
    result.final_val_acc = result.metrics.back().val_acc;
    result.final_val_loss = result.metrics.back().val_loss;
  }
  if (!result.diverged && cfg.epochs > 0) {
    result.final_val_nll_single = eval_nll(net, ds.val_images(), ds.val_labels());
    if (bayes && cfg.mc_eval_samples > 0) {
      Tensor probs = mc_predict(net, ds.val_images(), cfg.mc_eval_samples, eval_rng);
      result.final_val_nll_mc = nll_of_probs(probs, ds.val_labels());
    } else {
      result.final_val_nll_mc = std::nan("");
    }
  } else {
    result.final_val_nll_single = std::nan("");
    result.final_val_nll_mc = std::nan("");
  }
  result.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::ofstream(out_dir + "/metrics.csv") << metrics_to_csv(result.metrics);
    if (bayes) std::ofstream(out_dir + "/elbo.csv") << elbo_csv.str();
    {
      std::ostringstream timing;
      timing << "epoch,seconds\n";
      for (size_t i = 0; i < epoch_seconds.size(); ++i)
        timing << i << ',' << fmt(epoch_seconds[i]) << '\n';
      std::ofstream(out_dir + "/timing.csv") << timing.str();
    }
    checkpoint_save(net, out_dir + "/checkpoint.bin",
                    train_rng.serialize() + ";;" + noise_rng.serialize());
    json summary;
    summary["status"] = result.diverged ? "diverged" : "ok";
    summary["message"] = result.message;
    summary["config"] = json::parse(config_to_json(cfg));
    summary["chosen_lr0"] = result.chosen_lr0;
    summary["epochs_completed"] = result.metrics.size();
    summary["final_val_acc"] = result.final_val_acc;
    summary["final_val_loss"] = result.final_val_loss;
    summary["final_val_nll_single"] = result.final_val_nll_single;
    summary["final_val_nll_mc"] = result.final_val_nll_mc;
    summary["wall_time_seconds"] = result.wall_time_seconds;
    std::ofstream(out_dir + "/summary.json") << summary.dump(2) << '\n';
  }
  return result;
}

}  // namespace

RunResult run_training(const ExperimentConfig& config, const std::string& out_dir) {
  validate(config);
  if (!config.lr_auto) return train_once(config, out_dir);

  // Initial learning rate: numerical search optimizing the training loss
  // achieved in 5 epochs, individually per training case.
  ExperimentConfig probe = config;
  probe.lr_auto = false;
  probe.epochs = 5;
  const double chosen = lr_search(
      [&](double lr) {
        ExperimentConfig c = probe;
        c.lr0 = lr;
        RunResult r = train_once(c, "");
        if (r.diverged || r.metrics.empty()) throw DivergenceError("candidate diverged");
        return r.metrics.back().train_loss;
      },
      default_lr_grid());
  ExperimentConfig full = config;
  full.lr_auto = false;
  full.lr0 = chosen;
  RunResult result = train_once(full, out_dir);
  result.chosen_lr0 = chosen;
  return result;
}

RunResult normalization_batch_experiment(const ExperimentConfig& config, int norm_batch,
                                         const std::string& out_dir) {
  if (norm_batch < config.batch_size)
    throw ConfigError("normalization batch must be >= the train batch");
  ExperimentConfig c = config;
  c.normalization_batch_size = norm_batch;
  return run_training(c, out_dir);
}

std::vector<std::pair<double, double>> error_coverage(Network& network, const Tensor& images,
                                                      const std::vector<int>& labels) {
  ForwardOptions fo;
  fo.mode = Mode::Eval;
  Tensor logp = network.forward(images, fo);
  const int64_t k = logp.dim(0), c = logp.dim(1);
  std::vector<double> entropy(static_cast<size_t>(k));
  std::vector<char> wrong(static_cast<size_t>(k));
  for (int64_t r = 0; r < k; ++r) {
    double h = 0.0;
    int best = 0;
    for (int j = 0; j < c; ++j) {
      const double lp = logp.at(r * c + j);
      h -= std::exp(lp) * lp;
      if (lp > logp.at(r * c + best)) best = j;
    }
    entropy[static_cast<size_t>(r)] = h;
    wrong[static_cast<size_t>(r)] = best != labels[static_cast<size_t>(r)];
  }
  std::vector<int64_t> idx(static_cast<size_t>(k));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return entropy[static_cast<size_t>(a)] < entropy[static_cast<size_t>(b)];
  });
  std::vector<std::pair<double, double>> curve;
  curve.reserve(static_cast<size_t>(k));
  int64_t errors = 0;
  for (int64_t i = 0; i < k; ++i) {
    errors += wrong[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    curve.emplace_back(static_cast<double>(i + 1) / static_cast<double>(k),
                       static_cast<double>(errors) / static_cast<double>(i + 1));
  }
  return curve;
}

std::string coverage_to_csv(const std::vector<std::pair<double, double>>& curve) {
  std::ostringstream os;
  os << "completeness,error\n";
  for (const auto& [c, e] : curve) os << fmt(c) << ',' << fmt(e) << '\n';
  return os.str();
}

std::vector<std::pair<double, double>> perturbation_sweep(Network& network, const Tensor& images,
                                                          const std::vector<int>& labels,
                                                          PerturbationKind kind,
                                                          const std::vector<double>& magnitudes,
                                                          Rng& rng) {
  std::vector<std::pair<double, double>> out;
  std::vector<double> direction;
  if (kind == PerturbationKind::GradSign) {
    // Gradient of the NLL w.r.t. the input, at the clean input.
    Tensor x = Tensor::from(images.shape(),
                            std::vector<double>(images.data(), images.data() + images.size()),
                            true);
    Tape tape;
    ForwardOptions fo;
    fo.mode = Mode::Eval;
    fo.tape = &tape;
    Tensor logp = network.forward(tape.watch(x), fo);
    tape.backward(nll_loss(logp, labels));
    direction.resize(static_cast<size_t>(x.size()));
    for (int64_t i = 0; i < x.size(); ++i) {
      const double g = x.grad()[i];
      direction[static_cast<size_t>(i)] = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
    }
  }
  for (double eps : magnitudes) {
    std::vector<double> data(images.data(), images.data() + images.size());
    if (eps != 0.0) {
      if (kind == PerturbationKind::GradSign) {
        for (size_t i = 0; i < data.size(); ++i) data[i] += eps * direction[i];
      } else {
        for (auto& v : data) v += eps * rng.normal();
      }
    }
    Tensor perturbed = Tensor::from(images.shape(), std::move(data));
    out.emplace_back(eps, eval_accuracy(network, perturbed, labels));
  }
  return out;
}

std::string SeedStabilityReport::to_csv() const {
  std::ostringstream os;
  os << "epoch,mean_val_acc,std_val_acc,mean_val_loss,std_val_loss\n";
  for (size_t i = 0; i < epochs.size(); ++i)
    os << epochs[i] << ',' << fmt(mean_val_acc[i]) << ',' << fmt(std_val_acc[i]) << ','
       << fmt(mean_val_loss[i]) << ',' << fmt(std_val_loss[i]) << '\n';
  return os.str();
}

SeedStabilityReport seed_stability_report(const ExperimentConfig& config,
                                          const std::vector<uint64_t>& seeds,
                                          const std::string& out_dir) {
  if (seeds.size() < 3) throw ConfigError("seed_stability_report requires at least 3 seeds");
  std::vector<RunResult> runs;
  for (uint64_t s : seeds) {
    ExperimentConfig c = config;
    c.seed = s;
    runs.push_back(run_training(c, ""));
  }
  const size_t epochs = runs.front().metrics.size();
  for (const auto& r : runs)
    if (r.metrics.size() != epochs)
      throw std::runtime_error("seed report: runs have differing epoch counts");

  SeedStabilityReport rep;
  for (size_t e = 0; e < epochs; ++e) {
    double sum_a = 0, sum_l = 0;
    for (const auto& r : runs) {
      sum_a += r.metrics[e].val_acc;
      sum_l += r.metrics[e].val_loss;
    }
    const double ma = sum_a / runs.size(), ml = sum_l / runs.size();
    double va = 0, vl = 0;
    for (const auto& r : runs) {
      va += (r.metrics[e].val_acc - ma) * (r.metrics[e].val_acc - ma);
      vl += (r.metrics[e].val_loss - ml) * (r.metrics[e].val_loss - ml);
    }
    rep.epochs.push_back(static_cast<int>(e));
    rep.mean_val_acc.push_back(ma);
    rep.std_val_acc.push_back(std::sqrt(va / runs.size()));
    rep.mean_val_loss.push_back(ml);
    rep.std_val_loss.push_back(std::sqrt(vl / runs.size()));
  }
  // Within-run iterate spread: std of val_acc over the final window.
  const size_t window = std::min<size_t>(10, epochs);
  double within_sum = 0.0;
  for (const auto& r : runs) {
    double m = 0;
    for (size_t e = epochs - window; e < epochs; ++e) m += r.metrics[e].val_acc;
    m /= window;
    double v = 0;
    for (size_t e = epochs - window; e < epochs; ++e)
      v += (r.metrics[e].val_acc - m) * (r.metrics[e].val_acc - m);
    within_sum += std::sqrt(v / window);
  }
  rep.mean_within_run_iterate_std = within_sum / runs.size();
  rep.cross_seed_final_acc_std = epochs > 0 ? rep.std_val_acc.back() : 0.0;

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/seed_stability.csv") << rep.to_csv();
    json j;
    j["seeds"] = seeds;
    j["mean_within_run_iterate_std"] = rep.mean_within_run_iterate_std;
    j["cross_seed_final_acc_std"] = rep.cross_seed_final_acc_std;
    std::ofstream(out_dir + "/seed_stability.json") << j.dump(2) << '\n';
  }
  return rep;
}

}  // namespace stochnorm
