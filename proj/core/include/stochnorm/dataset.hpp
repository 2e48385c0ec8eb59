#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stochnorm/normalization.hpp"
#include "stochnorm/rng.hpp"
#include "stochnorm/tensor.hpp"

namespace stochnorm {

enum class DatasetKind { GaussianClustersImages, CorrelatedSpatial };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::GaussianClustersImages;
  int image_hw = 8;
  int channels = 1;
  int classes = 5;
  int train_size = 512;        // validation gets train_size/9 more (90/10 split)
  double label_noise = 0.1;    // probability of replacing a label uniformly
  double cluster_sep = 1.6;    // scale of the class prototypes
  double within_std = 1.0;     // within-class sample noise
  double spatial_corr = 0.5;   // shared-noise fraction for CorrelatedSpatial
};

// Desk-scale stand-in for an image classification set: classes are smoothed
// Gaussian prototypes in pixel space, samples add white within-class noise,
// labels are flipped at the configured rate. Fully reproducible from the
// seed; the train/validation split is disjoint by construction.
class SyntheticDataset {
 public:
  static SyntheticDataset generate(const DatasetSpec& spec, uint64_t seed);

  const DatasetSpec& spec() const { return spec_; }
  const Tensor& train_images() const { return train_x_; }
  const std::vector<int>& train_labels() const { return train_y_; }
  const Tensor& val_images() const { return val_x_; }
  const std::vector<int>& val_labels() const { return val_y_; }
  int64_t train_size() const { return train_x_.dim(0); }
  int64_t val_size() const { return val_x_.dim(0); }

  // Per-input-channel moments of the training images.
  DatasetMoments input_moments() const;

  // Rows of the training set by index, as one batch tensor.
  Tensor train_batch(const std::vector<int64_t>& indices) const;
  std::vector<int> train_batch_labels(const std::vector<int64_t>& indices) const;

 private:
  DatasetSpec spec_;
  Tensor train_x_;
  std::vector<int> train_y_;
  Tensor val_x_;
  std::vector<int> val_y_;
};

// Random +-2 pixel translation (zero padded) and horizontal flip, one
// independent draw per sample.
Tensor augment_batch(const Tensor& batch, Rng& rng);

// Copies the given rows of a [N,...] tensor into a new batch tensor.
Tensor gather_rows(const Tensor& data, const std::vector<int64_t>& indices);

}  // namespace stochnorm
