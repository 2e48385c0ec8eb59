#include <benchmark/benchmark.h>

#include "stochnorm/network.hpp"
#include "stochnorm/rng.hpp"
#include "stochnorm/tensor.hpp"

using namespace stochnorm;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal();
  return Tensor::from(shape, std::move(data), requires_grad);
}

void Conv2dForward(benchmark::State& state) {
  Rng rng(1);
  const int c = static_cast<int>(state.range(0));
  Tensor x = random_tensor({32, c, 8, 8}, rng);
  Tensor w = random_tensor({c, c, 3, 3}, rng);
  for (auto _ : state) {
    Tensor y = conv2d(x, w, 1, 1);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(Conv2dForward)->Arg(8)->Arg(16)->Arg(24);

void Conv2dTrainStep(benchmark::State& state) {
  Rng rng(2);
  const int c = static_cast<int>(state.range(0));
  Tensor x = random_tensor({32, c, 8, 8}, rng);
  Tensor w = random_tensor({c, c, 3, 3}, rng, true);
  for (auto _ : state) {
    Tape tape;
    Tensor y = conv2d(tape.watch(x), tape.watch(w), 1, 1);
    tape.backward(mean_all(y));
    benchmark::DoNotOptimize(w.grad());
    w.zero_grad();
  }
}
BENCHMARK(Conv2dTrainStep)->Arg(8)->Arg(16)->Arg(24);

void BatchNormTrainForward(benchmark::State& state) {
  Rng rng(3);
  Tensor z = random_tensor({32, 24, 8, 8}, rng);
  NormalizedLayer layer;
  layer.kind = NormKind::BatchNorm;
  layer.w = random_tensor({24, 24, 3, 3}, rng);
  layer.s = Tensor::filled({24}, 1.0);
  layer.b = Tensor::zeros({24});
  for (auto _ : state) {
    Tensor y = bn_forward(layer, z, Mode::Train);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BatchNormTrainForward);

void NetworkTrainStep(benchmark::State& state) {
  Rng rng(4);
  ArchitectureSpec arch = narrowed_allcnn(1, 8, 5, static_cast<int>(state.range(0)));
  Network net = Network::build(arch, NormKind::BatchNorm, NoiseMode::None,
                               ScaleGranularity::PerChannel, rng);
  Tensor x = random_tensor({32, 1, 8, 8}, rng);
  std::vector<int> labels(32);
  for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 5);
  Rng noise_rng(5);
  for (auto _ : state) {
    Tape tape;
    ForwardOptions fo;
    fo.mode = Mode::Train;
    fo.tape = &tape;
    fo.rng = &noise_rng;
    Tensor logp = net.forward(x, fo);
    tape.backward(nll_loss(logp, labels));
    for (auto& p : net.parameters()) p.value.zero_grad();
  }
}
BENCHMARK(NetworkTrainStep)->Arg(8)->Arg(16);

}  // namespace

BENCHMARK_MAIN();
