#pragma once

#include <cstdint>
#include <string>

#include "tfl/tensor.hpp"

namespace tfl {

/// One evaluation pass over a dataset, reported together.
struct MetricsReport {
  double accuracy = 0.0;
  double wing_loss = 0.0;
  double mae = 0.0;
  double mse = 0.0;
  int64_t n_samples = 0;

  static std::string tsv_header();
  std::string tsv_row() const;
};

/// Wing loss over landmark coordinates. Per scalar error e:
///   wing(e) = w * ln(1 + |e|/eps)   if |e| < w
///           = |e| - C               otherwise, C = w - w * ln(1 + w/eps)
/// Reduced as the mean over the batch of the sum over all per-sample
/// coordinates. Accepts B x 2 x N, or 2 x N treated as a batch of one.
Tensor wing_loss(const Tensor& pred, const Tensor& target, double w = 10.0, double eps = 2.0);

/// Mean absolute error over all coordinates.
Tensor mae(const Tensor& pred, const Tensor& target);

/// Mean squared error over all coordinates.
Tensor mse(const Tensor& pred, const Tensor& target);

/// Fraction of landmark points whose Euclidean distance to ground truth is at
/// most tau times the diagonal of that sample's ground-truth bounding box.
/// Coordinates are normalized to [0,1]; a degenerate box (all landmarks at one
/// point) falls back to the image diagonal sqrt(2). Accepts 2 x N or B x 2 x N.
double accuracy(const Tensor& pred, const Tensor& target, double tau = 0.25);

} // namespace tfl
