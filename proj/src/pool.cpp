#include "alseg/pool.hpp"

#include "alseg/seed.hpp"

#include <algorithm>
#include <cmath>

namespace alseg {

PixelMask::PixelMask(int height, int width, int num_classes, std::vector<int> classes)
    : height_(height), width_(width), num_classes_(num_classes), classes_(std::move(classes)) {
  if (height < 1 || width < 1) throw std::invalid_argument("PixelMask: empty extent");
  if (num_classes < 1 || num_classes >= kIgnore) {
    throw std::invalid_argument("PixelMask: class count must be in [1, 255)");
  }
  if (classes_.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("PixelMask: entry count does not match extent");
  }
  for (int c : classes_) {
    if (c != kIgnore && (c < 0 || c >= num_classes)) {
      throw std::invalid_argument("PixelMask: entry " + std::to_string(c) + " outside [0," +
                                  std::to_string(num_classes) + ") and not IGNORE");
    }
  }
}

ImageLabel::ImageLabel(int class_index, int num_image_classes) : class_index_(class_index) {
  if (class_index < 0 || class_index >= num_image_classes) {
    throw std::invalid_argument("ImageLabel: class " + std::to_string(class_index) +
                                " outside [0," + std::to_string(num_image_classes) + ")");
  }
}

void ImageSample::validate() const {
  if (mask && (mask->height() != pixels.height() || mask->width() != pixels.width())) {
    throw std::invalid_argument("sample " + id.str() + ": mask extent differs from image");
  }
}

LabeledRatio::LabeledRatio(double r) : r_(r) {
  if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("labeled ratio must lie in (0, 1]");
}

PoolPartition::PoolPartition(std::span<const SampleId> all) : all_(all.begin(), all.end()) {
  if (all_.size() != all.size()) throw std::invalid_argument("PoolPartition: duplicate sample id");
  unlabeled_ = all_;
}

void PoolPartition::mark_labeled(std::span<const SampleId> ids) {
  for (const auto& id : ids) {
    if (!unlabeled_.contains(id)) {
      throw std::invalid_argument("PoolPartition: " + id.str() + " is not in the unlabeled pool");
    }
  }
  for (const auto& id : ids) {
    unlabeled_.erase(id);
    labeled_.insert(id);
  }
}

bool PoolPartition::invariants_hold() const {
  if (labeled_.size() + unlabeled_.size() != all_.size()) return false;
  return std::all_of(labeled_.begin(), labeled_.end(),
                     [&](const SampleId& id) { return all_.contains(id) && !unlabeled_.contains(id); }) &&
         std::all_of(unlabeled_.begin(), unlabeled_.end(),
                     [&](const SampleId& id) { return all_.contains(id); });
}

ImageLabel derive_image_label(const PixelMask& mask) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(mask.num_classes()), 0);
  std::size_t scored = 0;
  for (int c : mask.classes()) {
    if (c == kIgnore) continue;
    ++counts[static_cast<std::size_t>(c)];
    ++scored;
  }
  if (scored == 0) throw std::invalid_argument("derive_image_label: mask has no labeled pixel");
  // max_element returns the first maximum, i.e. the lowest class index.
  const auto best = std::max_element(counts.begin(), counts.end()) - counts.begin();
  return ImageLabel(static_cast<int>(best), mask.num_classes());
}

std::size_t target_labeled_count(LabeledRatio ratio, std::size_t pool_size) {
  if (pool_size < 1) throw std::invalid_argument("target_labeled_count: empty pool");
  // Guard against R*N landing a hair under an integer (0.29 * 100 = 28.999...).
  const double exact = ratio.value() * static_cast<double>(pool_size);
  const auto n = static_cast<std::size_t>(std::floor(exact + 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(n, 1, pool_size);
}

TrainValSplit split_train_val(std::span<const SampleId> ids, double train_fraction,
                              std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split_train_val: train fraction must lie in (0, 1)");
  }
  if (ids.size() < 2) throw std::invalid_argument("split_train_val: need at least two ids");
  std::vector<SampleId> order(ids.begin(), ids.end());
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw std::invalid_argument("split_train_val: duplicate sample id");
  }
  Rng rng(seed);
  shuffle_in_place(order, rng);
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size()))), 1,
      order.size() - 1);
  TrainValSplit out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

}  // namespace alseg
