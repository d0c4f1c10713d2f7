#include "alseg/metrics.hpp"

#include <cmath>
#include <limits>

namespace alseg {

ConfusionMatrix::ConfusionMatrix(Counts counts) : counts_(std::move(counts)) {
  if (counts_.rows() != counts_.cols() || counts_.rows() < 1) {
    throw std::invalid_argument("ConfusionMatrix: must be square and non-empty");
  }
  if ((counts_.array() < 0).any()) throw std::invalid_argument("ConfusionMatrix: negative count");
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes() != num_classes()) {
    throw std::invalid_argument("ConfusionMatrix: class count mismatch in merge");
  }
  counts_ += other.counts_;
  return *this;
}

ConfusionMatrix accumulate_confusion(const PixelMask& pred, const PixelMask& gt, int num_classes) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw std::invalid_argument("accumulate_confusion: prediction and truth extents differ");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i];
    if (g == kIgnore) continue;
    const int p = pred[i];
    if (g < 0 || g >= num_classes || p < 0 || p >= num_classes) {
      throw std::invalid_argument("accumulate_confusion: class index out of range");
    }
    cm.add(g, p);
  }
  return cm;
}

Eigen::VectorXd per_class_iou(const ConfusionMatrix& cm) {
  const auto& c = cm.counts();
  const Eigen::Index k = c.rows();
  Eigen::VectorXd iou(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto tp = static_cast<double>(c(i, i));
    const auto fn = static_cast<double>(c.row(i).sum()) - tp;
    const auto fp = static_cast<double>(c.col(i).sum()) - tp;
    const double denom = tp + fp + fn;
    iou(i) = denom > 0 ? tp / denom : std::numeric_limits<double>::quiet_NaN();
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() <= 0) throw std::invalid_argument("miou: empty confusion matrix");
  const Eigen::VectorXd iou = per_class_iou(cm);
  double sum = 0.0;
  int present = 0;
  for (Eigen::Index i = 0; i < iou.size(); ++i) {
    if (std::isnan(iou(i))) continue;
    sum += iou(i);
    ++present;
  }
  return sum / present;
}

double shannon_index(const ClassPixelHistogram& h) {
  if ((h.array() < 0).any()) throw std::invalid_argument("shannon_index: negative count");
  const auto total = static_cast<double>(h.sum());
  if (total <= 0) throw std::invalid_argument("shannon_index: empty histogram");
  double index = 0.0;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    if (h(i) == 0) continue;
    const double p = static_cast<double>(h(i)) / total;
    index -= p * std::log(p);
  }
  return index;
}

double simpson_inverse_index(const ClassPixelHistogram& h) {
  if ((h.array() < 0).any()) throw std::invalid_argument("simpson_inverse_index: negative count");
  const auto total = static_cast<double>(h.sum());
  if (total < 2) throw std::invalid_argument("simpson_inverse_index: need at least two pixels");
  double same = 0.0;
  for (Eigen::Index i = 0; i < h.size(); ++i) {
    const auto n = static_cast<double>(h(i));
    same += n * (n - 1.0);
  }
  return 1.0 - same / (total * (total - 1.0));
}

DiversityReport diversity_report(std::span<const SampleId> manifest, const Dataset& dataset) {
  DiversityReport report;
  report.histogram = ClassPixelHistogram::Zero(dataset.num_classes());
  for (const auto& id : manifest) {
    const ImageSample& s = dataset.sample(id);
    if (!s.mask) throw std::invalid_argument("diversity_report: sample " + id.str() + " has no mask");
    for (int c : s.mask->classes()) {
      if (c != kIgnore) ++report.histogram(c);
    }
  }
  report.shannon = shannon_index(report.histogram);
  report.simpson = simpson_inverse_index(report.histogram);
  return report;
}

}  // namespace alseg
