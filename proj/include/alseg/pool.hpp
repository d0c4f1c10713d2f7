#ifndef ALSEG_POOL_HPP
#define ALSEG_POOL_HPP

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace alseg {

/// Opaque sample token; ordered lexicographically for deterministic tie-breaks.
class SampleId {
 public:
  SampleId() = default;
  explicit SampleId(std::string token) : token_(std::move(token)) {}

  const std::string& str() const { return token_; }
  auto operator<=>(const SampleId&) const = default;

 private:
  std::string token_;
};

/// Mask pixel value excluded from counts, losses and metrics.
inline constexpr int kIgnore = 255;

/// Dense per-pixel class map, row-major.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(int height, int width, int num_classes, std::vector<int> classes);
  PixelMask(int height, int width, int num_classes, int fill)
      : PixelMask(height, width, num_classes,
                  std::vector<int>(static_cast<std::size_t>(height) * width, fill)) {}

  int height() const { return height_; }
  int width() const { return width_; }
  int num_classes() const { return num_classes_; }
  std::size_t size() const { return classes_.size(); }
  int at(int y, int x) const { return classes_[static_cast<std::size_t>(y) * width_ + x]; }
  int operator[](std::size_t i) const { return classes_[i]; }
  std::span<const int> classes() const { return classes_; }

 private:
  int height_ = 0;
  int width_ = 0;
  int num_classes_ = 0;
  std::vector<int> classes_;
};

/// Coarse image-level class.
class ImageLabel {
 public:
  ImageLabel() = default;
  ImageLabel(int class_index, int num_image_classes);
  int class_index() const { return class_index_; }
  friend bool operator==(const ImageLabel&, const ImageLabel&) = default;

 private:
  int class_index_ = 0;
};

/// H x W x C intensities in [0, 1], stored plane by plane (channel-major).
template <typename Scalar>
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, Eigen::Array<Scalar, Eigen::Dynamic, 1> planes)
      : height_(height), width_(width), channels_(channels), data_(std::move(planes)) {
    if (height < 1 || width < 1 || channels < 1) throw std::invalid_argument("Image: empty extent");
    if (data_.size() != static_cast<Eigen::Index>(height) * width * channels) {
      throw std::invalid_argument("Image: buffer size does not match extent");
    }
    if (!data_.isFinite().all() || (data_ < Scalar(0)).any() || (data_ > Scalar(1)).any()) {
      throw std::invalid_argument("Image: intensities must be finite and within [0,1]");
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  const Eigen::Array<Scalar, Eigen::Dynamic, 1>& planes() const { return data_; }
  Scalar at(int c, int y, int x) const {
    return data_((static_cast<Eigen::Index>(c) * height_ + y) * width_ + x);
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> data_;
};

using ImageF = Image<float>;

struct ImageSample {
  SampleId id;
  ImageF pixels;
  std::optional<ImageLabel> image_label;
  std::optional<PixelMask> mask;

  /// Throws when a present mask disagrees with the image extent.
  void validate() const;
};

/// Labeled-ratio R in (0, 1].
class LabeledRatio {
 public:
  explicit LabeledRatio(double r);
  double value() const { return r_; }

 private:
  double r_;
};

/// Disjoint labeled / unlabeled split of a fixed id set.
class PoolPartition {
 public:
  PoolPartition() = default;
  explicit PoolPartition(std::span<const SampleId> all);

  const std::set<SampleId>& all_ids() const { return all_; }
  const std::set<SampleId>& labeled_ids() const { return labeled_; }
  const std::set<SampleId>& unlabeled_ids() const { return unlabeled_; }

  /// Moves ids from the unlabeled pool into the labeled set.
  void mark_labeled(std::span<const SampleId> ids);
  bool invariants_hold() const;

 private:
  std::set<SampleId> all_;
  std::set<SampleId> labeled_;
  std::set<SampleId> unlabeled_;
};

/// Majority class over non-IGNORE pixels, lowest index on ties.
ImageLabel derive_image_label(const PixelMask& mask);

/// floor(R * N), at least 1.
std::size_t target_labeled_count(LabeledRatio ratio, std::size_t pool_size);

struct TrainValSplit {
  std::vector<SampleId> train;
  std::vector<SampleId> val;
};

/// Seeded shuffle split; |train| = round(train_fraction * |ids|). Both halves are sorted.
TrainValSplit split_train_val(std::span<const SampleId> ids, double train_fraction,
                              std::uint64_t seed);

}  // namespace alseg

#endif  // ALSEG_POOL_HPP
