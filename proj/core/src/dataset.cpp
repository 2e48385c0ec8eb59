#include "stochnorm/dataset.hpp"

#include <cmath>
#include <stdexcept>

namespace stochnorm {

namespace {

// 3x3 box blur with zero padding, in place per channel plane.
void box_blur(std::vector<double>& img, int hw) {
  std::vector<double> out(img.size(), 0.0);
  for (int i = 0; i < hw; ++i)
    for (int j = 0; j < hw; ++j) {
      double acc = 0.0;
      int cnt = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= hw || jj < 0 || jj >= hw) continue;
          acc += img[static_cast<size_t>(ii * hw + jj)];
          ++cnt;
        }
      out[static_cast<size_t>(i * hw + j)] = acc / cnt;
    }
  img = std::move(out);
}

void normalize_to_unit_std(std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& x : v) x = (x - mean) * inv;
}

}  // namespace

SyntheticDataset SyntheticDataset::generate(const DatasetSpec& spec, uint64_t seed) {
  if (spec.classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  if (spec.train_size < spec.classes) throw std::invalid_argument("dataset: too few samples");
  Rng rng(derive_seed(seed, 101));

  const int hw = spec.image_hw;
  const int ch = spec.channels;
  const int64_t pixels = static_cast<int64_t>(ch) * hw * hw;
  const int64_t total = spec.train_size + std::max<int64_t>(1, spec.train_size / 9);

  // Smoothed unit-std prototypes, one per class.
  std::vector<std::vector<double>> protos(static_cast<size_t>(spec.classes));
  for (auto& p : protos) {
    p.resize(static_cast<size_t>(pixels));
    for (auto& v : p) v = rng.normal();
    for (int c = 0; c < ch; ++c) {
      std::vector<double> plane(p.begin() + c * hw * hw, p.begin() + (c + 1) * hw * hw);
      box_blur(plane, hw);
      std::copy(plane.begin(), plane.end(), p.begin() + c * hw * hw);
    }
    normalize_to_unit_std(p);
  }

  std::vector<double> images(static_cast<size_t>(total * pixels));
  std::vector<int> labels(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) {
    const int true_class = static_cast<int>(rng.uniform_int(spec.classes));
    double* img = images.data() + i * pixels;
    if (spec.kind == DatasetKind::GaussianClustersImages) {
      const auto& p = protos[static_cast<size_t>(true_class)];
      for (int64_t j = 0; j < pixels; ++j)
        img[j] = spec.cluster_sep * p[static_cast<size_t>(j)] + spec.within_std * rng.normal();
    } else {
      // Spatially correlated noise: one shared draw per sample and channel
      // mixed with per-pixel noise.
      const double rho = spec.spatial_corr;
      const auto& p = protos[static_cast<size_t>(true_class)];
      for (int c = 0; c < ch; ++c) {
        const double shared = rng.normal();
        for (int j = 0; j < hw * hw; ++j) {
          const int64_t at = c * hw * hw + j;
          img[at] = spec.cluster_sep * p[static_cast<size_t>(at)] +
                    spec.within_std * (std::sqrt(rho) * shared +
                                       std::sqrt(1.0 - rho) * rng.normal());
        }
      }
    }
    // Draws are consumed unconditionally so datasets generated from the same
    // seed stay sample-aligned across label_noise settings.
    const double flip_draw = rng.uniform();
    const int flip_target = static_cast<int>(rng.uniform_int(spec.classes));
    labels[static_cast<size_t>(i)] = flip_draw < spec.label_noise ? flip_target : true_class;
  }

  // Shuffle, then split 90/10; the index partition keeps the sets disjoint.
  std::vector<int64_t> order(static_cast<size_t>(total));
  for (int64_t i = 0; i < total; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);

  SyntheticDataset ds;
  ds.spec_ = spec;
  const int64_t n_train = spec.train_size;
  std::vector<double> trx(static_cast<size_t>(n_train * pixels));
  std::vector<double> vax(static_cast<size_t>((total - n_train) * pixels));
  ds.train_y_.resize(static_cast<size_t>(n_train));
  ds.val_y_.resize(static_cast<size_t>(total - n_train));
  for (int64_t i = 0; i < total; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    if (i < n_train) {
      std::copy(images.begin() + src * pixels, images.begin() + (src + 1) * pixels,
                trx.begin() + i * pixels);
      ds.train_y_[static_cast<size_t>(i)] = labels[static_cast<size_t>(src)];
    } else {
      const int64_t d = i - n_train;
      std::copy(images.begin() + src * pixels, images.begin() + (src + 1) * pixels,
                vax.begin() + d * pixels);
      ds.val_y_[static_cast<size_t>(d)] = labels[static_cast<size_t>(src)];
    }
  }
  ds.train_x_ = Tensor::from({static_cast<int>(n_train), ch, hw, hw}, std::move(trx));
  ds.val_x_ = Tensor::from({static_cast<int>(total - n_train), ch, hw, hw}, std::move(vax));
  return ds;
}

DatasetMoments SyntheticDataset::input_moments() const {
  DatasetMoments m;
  NormStats st = batch_stats(train_x_);
  const int c = train_x_.dim(1);
  m.mean.resize(static_cast<size_t>(c));
  m.var.resize(static_cast<size_t>(c));
  for (int i = 0; i < c; ++i) {
    m.mean[static_cast<size_t>(i)] = st.mu.at(i);
    m.var[static_cast<size_t>(i)] = st.sigma.at(i) * st.sigma.at(i);
  }
  return m;
}

Tensor gather_rows(const Tensor& data, const std::vector<int64_t>& indices) {
  const int64_t rows = data.size() / data.dim(0);
  std::vector<double> out(indices.size() * static_cast<size_t>(rows));
  for (size_t i = 0; i < indices.size(); ++i) {
    const int64_t src = indices[i];
    if (src < 0 || src >= data.dim(0)) throw std::out_of_range("gather_rows: bad index");
    std::copy(data.data() + src * rows, data.data() + (src + 1) * rows,
              out.begin() + static_cast<int64_t>(i) * rows);
  }
  Shape shape = data.shape();
  shape[0] = static_cast<int>(indices.size());
  return Tensor::from(shape, std::move(out));
}

Tensor SyntheticDataset::train_batch(const std::vector<int64_t>& indices) const {
  return gather_rows(train_x_, indices);
}

std::vector<int> SyntheticDataset::train_batch_labels(const std::vector<int64_t>& indices) const {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i)
    out[i] = train_y_[static_cast<size_t>(indices[i])];
  return out;
}

Tensor augment_batch(const Tensor& batch, Rng& rng) {
  if (batch.rank() != 4) throw ShapeError("augment_batch expects [k,c,h,w]");
  const int k = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::vector<double> out(static_cast<size_t>(batch.size()), 0.0);
  const double* src = batch.data();
  for (int n = 0; n < k; ++n) {
    const int dy = static_cast<int>(rng.uniform_int(5)) - 2;
    const int dx = static_cast<int>(rng.uniform_int(5)) - 2;
    const bool flip = rng.uniform() < 0.5;
    for (int ic = 0; ic < c; ++ic) {
      const double* plane = src + (static_cast<int64_t>(n) * c + ic) * h * w;
      double* oplane = out.data() + (static_cast<int64_t>(n) * c + ic) * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const int si = i - dy;
          int sj = j - dx;
          if (flip) sj = w - 1 - sj;
          if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
          oplane[i * w + j] = plane[si * w + sj];
        }
    }
  }
  return Tensor::from(batch.shape(), std::move(out));
}

}  // namespace stochnorm
