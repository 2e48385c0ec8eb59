// Command line harness for training and diagnostic experiments on synthetic
// image classification tasks.
//
// Exit codes: 0 success, 2 configuration error, 3 divergence, 1 other error.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "stochnorm/checkpoint.hpp"
#include "stochnorm/experiment.hpp"
#include "stochnorm/stochastic.hpp"

using namespace stochnorm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct CommonArgs {
  std::string config_path;
  uint64_t seed = 0;
  std::string out_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs* args, bool with_config = true) {
  if (with_config)
    cmd->add_option("--config", args->config_path, "JSON experiment config file");
  cmd->add_option("--seed", args->seed, "random seed for the run")->required();
  cmd->add_option("--out-dir", args->out_dir, "output directory")->required();
  cmd->add_option("--set", args->overrides,
                  "config override as key.path=value (repeatable)");
}

ExperimentConfig load_config(const CommonArgs& args) {
  ExperimentConfig cfg =
      args.config_path.empty() ? ExperimentConfig{} : config_from_file(args.config_path);
  for (const auto& o : args.overrides) apply_override(cfg, o);
  cfg.seed = args.seed;
  return cfg;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << content;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

int cmd_train(const CommonArgs& args) {
  ExperimentConfig cfg = load_config(args);
  std::filesystem::create_directories(args.out_dir);
  write_file(args.out_dir + "/config.json", config_to_json(cfg) + "\n");
  RunResult r = run_training(cfg, args.out_dir);
  if (r.diverged) {
    std::cerr << "training diverged: " << r.message << "\n";
    return kExitDivergence;
  }
  std::cout << "final val_acc " << r.final_val_acc << " val_loss " << r.final_val_loss
            << " (metrics in " << args.out_dir << "/metrics.csv)\n";
  return kExitOk;
}

int cmd_norm_batch(const CommonArgs& args, int norm_batch) {
  ExperimentConfig cfg = load_config(args);
  std::filesystem::create_directories(args.out_dir);
  RunResult r = normalization_batch_experiment(cfg, norm_batch, args.out_dir);
  write_file(args.out_dir + "/config.json", config_to_json(cfg) + "\n");
  if (r.diverged) {
    std::cerr << "training diverged: " << r.message << "\n";
    return kExitDivergence;
  }
  std::cout << "norm-batch " << norm_batch << ": final val_loss " << r.final_val_loss << "\n";
  return kExitOk;
}

int cmd_measure_noise(const CommonArgs& args, const std::string& checkpoint, int draws) {
  ExperimentConfig cfg = load_config(args);
  SyntheticDataset ds = SyntheticDataset::generate(cfg.dataset, cfg.seed);
  Network net;
  if (!checkpoint.empty()) {
    net = checkpoint_load(checkpoint);
  } else {
    Rng init_rng(derive_seed(cfg.seed, 1));
    ArchitectureSpec arch =
        cfg.architecture(cfg.dataset.channels, cfg.dataset.image_hw, cfg.dataset.classes);
    net = Network::build(arch, NormKind::BatchNorm, NoiseMode::None,
                         ScaleGranularity::PerChannel, init_rng, cfg.project);
  }
  if (net.norm_kind() != NormKind::BatchNorm)
    throw ConfigError("measure-noise requires a batch-normalized network");
  Rng rng(derive_seed(cfg.seed, 7));
  EmpiricalNoiseStats stats =
      measure_bn_noise(net, ds.train_images(), cfg.batch_size, draws, rng);
  std::filesystem::create_directories(args.out_dir);
  write_file(args.out_dir + "/noise.csv", stats.to_csv());
  std::cout << "wrote " << args.out_dir << "/noise.csv\n";
  return kExitOk;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
  ExperimentConfig cfg = load_config(args);
  SyntheticDataset ds = SyntheticDataset::generate(cfg.dataset, cfg.seed);
  Network net = checkpoint_load(checkpoint);
  Rng eval_rng(derive_seed(cfg.seed, 3));
  const double nll = eval_nll(net, ds.val_images(), ds.val_labels());
  const double acc = eval_accuracy(net, ds.val_images(), ds.val_labels());
  double mc_nll = std::nan("");
  if (net.noise_mode() == NoiseMode::Variational && cfg.mc_eval_samples > 0) {
    Tensor probs = mc_predict(net, ds.val_images(), cfg.mc_eval_samples, eval_rng);
    mc_nll = nll_of_probs(probs, ds.val_labels());
  }
  std::filesystem::create_directories(args.out_dir);
  std::ostringstream os;
  os << "{\n  \"val_nll_single\": " << nll << ",\n  \"val_acc\": " << acc
     << ",\n  \"val_nll_mc\": " << (std::isnan(mc_nll) ? "null" : std::to_string(mc_nll))
     << "\n}\n";
  write_file(args.out_dir + "/eval.json", os.str());
  std::cout << os.str();
  return kExitOk;
}

int cmd_error_coverage(const CommonArgs& args, const std::string& checkpoint) {
  ExperimentConfig cfg = load_config(args);
  SyntheticDataset ds = SyntheticDataset::generate(cfg.dataset, cfg.seed);
  Network net = checkpoint_load(checkpoint);
  auto curve = error_coverage(net, ds.val_images(), ds.val_labels());
  std::filesystem::create_directories(args.out_dir);
  write_file(args.out_dir + "/coverage.csv", coverage_to_csv(curve));
  std::cout << "wrote " << args.out_dir << "/coverage.csv\n";
  return kExitOk;
}

int cmd_perturb(const CommonArgs& args, const std::string& checkpoint, const std::string& kind,
                const std::string& magnitudes) {
  ExperimentConfig cfg = load_config(args);
  SyntheticDataset ds = SyntheticDataset::generate(cfg.dataset, cfg.seed);
  Network net = checkpoint_load(checkpoint);
  PerturbationKind pk;
  if (kind == "gaussian")
    pk = PerturbationKind::Gaussian;
  else if (kind == "grad-sign")
    pk = PerturbationKind::GradSign;
  else
    throw ConfigError("perturb kind must be 'gaussian' or 'grad-sign'");
  Rng rng(derive_seed(cfg.seed, 9));
  auto curve = perturbation_sweep(net, ds.val_images(), ds.val_labels(), pk,
                                  parse_double_list(magnitudes), rng);
  std::ostringstream os;
  os << "magnitude,accuracy\n";
  for (const auto& [eps, acc] : curve) os << eps << ',' << acc << '\n';
  std::filesystem::create_directories(args.out_dir);
  write_file(args.out_dir + "/perturbation.csv", os.str());
  std::cout << "wrote " << args.out_dir << "/perturbation.csv\n";
  return kExitOk;
}

int cmd_seed_report(const CommonArgs& args, const std::string& seeds_csv) {
  ExperimentConfig cfg = load_config(args);
  std::vector<uint64_t> seeds;
  if (seeds_csv.empty()) {
    for (uint64_t i = 0; i < 5; ++i) seeds.push_back(args.seed + i);
  } else {
    std::stringstream ss(seeds_csv);
    std::string item;
    while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
  }
  seed_stability_report(cfg, seeds, args.out_dir);
  std::cout << "wrote " << args.out_dir << "/seed_stability.csv\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stochastic normalization experiment harness"};
  app.require_subcommand(1);

  CommonArgs train_args;
  auto* train = app.add_subcommand("train", "full training run with metrics and checkpoint");
  add_common(train, &train_args);

  CommonArgs nb_args;
  int norm_batch = 0;
  auto* nb = app.add_subcommand("norm-batch",
                                "training with a larger normalization batch than the loss batch");
  add_common(nb, &nb_args);
  nb->add_option("--norm-batch", norm_batch, "normalization batch size")->required();

  CommonArgs mn_args;
  std::string mn_checkpoint;
  int mn_draws = 300;
  auto* mn = app.add_subcommand("measure-noise",
                                "measure per-layer variances of (mu-M)/sigma and sigma/S");
  add_common(mn, &mn_args);
  mn->add_option("--checkpoint", mn_checkpoint, "network checkpoint (default: fresh init)");
  mn->add_option("--draws", mn_draws, "number of random batches");

  CommonArgs ev_args;
  std::string ev_checkpoint;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  add_common(ev, &ev_args);
  ev->add_option("--checkpoint", ev_checkpoint, "network checkpoint")->required();

  CommonArgs ec_args;
  std::string ec_checkpoint;
  auto* ec = app.add_subcommand("error-coverage", "error vs completeness by predictive entropy");
  add_common(ec, &ec_args);
  ec->add_option("--checkpoint", ec_checkpoint, "network checkpoint")->required();

  CommonArgs pt_args;
  std::string pt_checkpoint, pt_kind = "gaussian", pt_magnitudes = "0,0.05,0.1,0.2,0.4";
  auto* pt = app.add_subcommand("perturb", "accuracy under gaussian or gradient-sign input noise");
  add_common(pt, &pt_args);
  pt->add_option("--checkpoint", pt_checkpoint, "network checkpoint")->required();
  pt->add_option("--kind", pt_kind, "gaussian | grad-sign");
  pt->add_option("--magnitudes", pt_magnitudes, "comma separated perturbation sizes");

  CommonArgs sr_args;
  std::string sr_seeds;
  auto* sr = app.add_subcommand("seed-report", "cross-seed stability of a configuration");
  add_common(sr, &sr_args);
  sr->add_option("--seeds", sr_seeds, "comma separated seeds (default: seed..seed+4)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (nb->parsed()) return cmd_norm_batch(nb_args, norm_batch);
    if (mn->parsed()) return cmd_measure_noise(mn_args, mn_checkpoint, mn_draws);
    if (ev->parsed()) return cmd_eval(ev_args, ev_checkpoint);
    if (ec->parsed()) return cmd_error_coverage(ec_args, ec_checkpoint);
    if (pt->parsed()) return cmd_perturb(pt_args, pt_checkpoint, pt_kind, pt_magnitudes);
    if (sr->parsed()) return cmd_seed_report(sr_args, sr_seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitOk;
}
