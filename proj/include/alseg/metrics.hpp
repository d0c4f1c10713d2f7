#ifndef ALSEG_METRICS_HPP
#define ALSEG_METRICS_HPP

#include "alseg/dataset.hpp"

#include <Eigen/Core>

namespace alseg {

/// counts(g, p) = pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  using Counts = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

  explicit ConfusionMatrix(int num_classes) : counts_(Counts::Zero(num_classes, num_classes)) {}
  explicit ConfusionMatrix(Counts counts);

  int num_classes() const { return static_cast<int>(counts_.rows()); }
  const Counts& counts() const { return counts_; }
  std::int64_t total() const { return counts_.sum(); }

  void add(int truth, int predicted, std::int64_t n = 1) { counts_(truth, predicted) += n; }
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

 private:
  Counts counts_;
};

/// Tallies pred against gt, skipping IGNORE ground-truth pixels.
ConfusionMatrix accumulate_confusion(const PixelMask& pred, const PixelMask& gt, int num_classes);

/// Per-class IoU; NaN marks classes absent from both prediction and truth.
Eigen::VectorXd per_class_iou(const ConfusionMatrix& cm);

/// Mean IoU over classes present in prediction or truth.
double miou(const ConfusionMatrix& cm);

using ClassPixelHistogram = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

/// -sum p_i ln p_i over class proportions.
double shannon_index(const ClassPixelHistogram& h);

/// 1 - sum n_i(n_i - 1) / (N(N - 1)) with N the total pixel count.
double simpson_inverse_index(const ClassPixelHistogram& h);

struct DiversityReport {
  ClassPixelHistogram histogram;
  double shannon = 0.0;
  double simpson = 0.0;
};

/// Pools the non-IGNORE pixels of every listed sample into one histogram.
DiversityReport diversity_report(std::span<const SampleId> manifest, const Dataset& dataset);

}  // namespace alseg

#endif  // ALSEG_METRICS_HPP
