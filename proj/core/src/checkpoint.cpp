#include "stochnorm/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <vector>

namespace stochnorm {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'S', 'N', 'C', 'K', 'P', 'T', '0', '0'};
constexpr uint32_t kSchemaVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw CheckpointError("checkpoint truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw CheckpointError("checkpoint truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_doubles(std::ostream& os, const double* d, int64_t n) {
  // Little-endian IEEE754; byte-swap would go here on big-endian targets.
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(d), n * 8);
}

void read_doubles(std::istream& is, double* d, int64_t n) {
  is.read(reinterpret_cast<char*>(d), n * 8);
  if (!is) throw CheckpointError("checkpoint truncated while reading tensor data");
}

struct TensorEntry {
  std::string name;
  const Tensor* tensor;
};

std::vector<TensorEntry> tensor_directory(const Network& net) {
  std::vector<TensorEntry> dir;
  const auto& layers = net.layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    dir.push_back({p + "w", &l.w});
    if (l.bias.defined()) dir.push_back({p + "bias", &l.bias});
    dir.push_back({p + "s", &l.s});
    dir.push_back({p + "b", &l.b});
    if (l.u.defined()) dir.push_back({p + "u", &l.u});
    if (l.has_running()) {
      dir.push_back({p + "running_mu", &l.running.mu});
      dir.push_back({p + "running_sigma", &l.running.sigma});
    }
  }
  return dir;
}

json arch_to_json(const ArchitectureSpec& a) {
  json j;
  j["in_channels"] = a.in_channels;
  j["image_hw"] = a.image_hw;
  j["classes"] = a.classes;
  j["leaky_slope"] = a.leaky_slope;
  j["convs"] = json::array();
  for (const auto& c : a.convs)
    j["convs"].push_back({{"out", c.out_channels}, {"ksize", c.ksize}, {"stride", c.stride},
                          {"pad", c.pad}});
  return j;
}

ArchitectureSpec arch_from_json(const json& j) {
  ArchitectureSpec a;
  a.in_channels = j.at("in_channels").get<int>();
  a.image_hw = j.at("image_hw").get<int>();
  a.classes = j.at("classes").get<int>();
  a.leaky_slope = j.at("leaky_slope").get<double>();
  for (const auto& c : j.at("convs"))
    a.convs.push_back({c.at("out").get<int>(), c.at("ksize").get<int>(),
                       c.at("stride").get<int>(), c.at("pad").get<int>()});
  return a;
}

}  // namespace

void checkpoint_save(const Network& network, const std::string& path,
                     const std::string& rng_state) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["arch"] = arch_to_json(network.arch());
  manifest["arch_hash"] = network.arch().hash();
  manifest["norm_kind"] = static_cast<int>(network.norm_kind());
  manifest["noise_mode"] = static_cast<int>(network.noise_mode());
  manifest["granularity"] = static_cast<int>(network.granularity());
  manifest["projected"] = network.projected();
  manifest["rng_state"] = rng_state;
  const auto& cfg = network.noise_config();
  manifest["noise_config"] = {{"model", static_cast<int>(cfg.model)},
                              {"sigma_v", cfg.sigma_v},
                              {"sigma_u", cfg.sigma_u},
                              {"effective_n", cfg.effective_n},
                              {"spatial_correlated", cfg.spatial_correlated}};
  if (network.dataset_moments().defined())
    manifest["dataset_moments"] = {{"mean", network.dataset_moments().mean},
                                   {"var", network.dataset_moments().var}};
  json dir = json::array();
  auto entries = tensor_directory(network);
  for (const auto& e : entries)
    dir.push_back({{"name", e.name}, {"shape", e.tensor->shape()}});
  manifest["tensors"] = dir;

  const std::string mstr = manifest.dump();
  os.write(kMagic, 8);
  write_u32(os, kSchemaVersion);
  write_u64(os, mstr.size());
  os.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& e : entries) write_doubles(os, e.tensor->data(), e.tensor->size());
  if (!os) throw CheckpointError("checkpoint write failed: " + path);
}

namespace {

json read_manifest(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const uint32_t version = read_u32(is);
  if (version != kSchemaVersion)
    throw CheckpointError("unsupported checkpoint schema version " + std::to_string(version));
  const uint64_t mlen = read_u64(is);
  if (mlen > (1ull << 30)) throw CheckpointError("implausible manifest length");
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw CheckpointError("checkpoint truncated in manifest");
  try {
    return json::parse(mstr);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
}

void load_tensors(Network& net, const json& manifest, std::istream& is) {
  auto entries = tensor_directory(net);
  const auto& dir = manifest.at("tensors");
  if (dir.size() != entries.size())
    throw CheckpointError("checkpoint tensor directory does not match architecture");
  for (size_t i = 0; i < entries.size(); ++i) {
    const auto& meta = dir.at(i);
    if (meta.at("name").get<std::string>() != entries[i].name)
      throw CheckpointError("checkpoint tensor order mismatch at " + entries[i].name);
    const Shape shape = meta.at("shape").get<Shape>();
    if (shape != entries[i].tensor->shape())
      throw CheckpointError("checkpoint shape mismatch at " + entries[i].name);
    read_doubles(is, const_cast<Tensor*>(entries[i].tensor)->data(),
                 entries[i].tensor->size());
  }
}

}  // namespace

Network checkpoint_load(const std::string& path, std::string* rng_state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  json manifest = read_manifest(is);

  Rng dummy(0);
  ArchitectureSpec arch = arch_from_json(manifest.at("arch"));
  Network net = Network::build(arch, static_cast<NormKind>(manifest.at("norm_kind").get<int>()),
                               static_cast<NoiseMode>(manifest.at("noise_mode").get<int>()),
                               static_cast<ScaleGranularity>(manifest.at("granularity").get<int>()),
                               dummy, manifest.at("projected").get<bool>());
  const auto& nc = manifest.at("noise_config");
  net.noise_config().model = static_cast<NoiseModel>(nc.at("model").get<int>());
  net.noise_config().sigma_v = nc.at("sigma_v").get<std::vector<double>>();
  net.noise_config().sigma_u = nc.at("sigma_u").get<std::vector<double>>();
  net.noise_config().effective_n = nc.at("effective_n").get<std::vector<int64_t>>();
  net.noise_config().spatial_correlated = nc.at("spatial_correlated").get<bool>();
  if (manifest.contains("dataset_moments")) {
    DatasetMoments m;
    m.mean = manifest["dataset_moments"].at("mean").get<std::vector<double>>();
    m.var = manifest["dataset_moments"].at("var").get<std::vector<double>>();
    net.set_dataset_moments(std::move(m));
  }

  // Running statistics slots must exist before the directory comparison.
  for (size_t i = 0; i < net.layers().size(); ++i) {
    const std::string key = "layer" + std::to_string(i) + ".running_mu";
    bool has_running = false;
    for (const auto& t : manifest.at("tensors"))
      if (t.at("name").get<std::string>() == key) has_running = true;
    auto& l = net.layers()[i];
    if (has_running && !l.has_running()) {
      l.running.mu = Tensor::zeros({l.out_channels()});
      l.running.sigma = Tensor::filled({l.out_channels()}, 1.0);
    }
  }

  load_tensors(net, manifest, is);
  if (rng_state) *rng_state = manifest.at("rng_state").get<std::string>();
  return net;
}

void checkpoint_restore(Network& network, const std::string& path, std::string* rng_state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  json manifest = read_manifest(is);
  if (manifest.at("arch_hash").get<uint64_t>() != network.arch().hash())
    throw CheckpointError("checkpoint was written for a different architecture");
  network = checkpoint_load(path, rng_state);
}

}  // namespace stochnorm
