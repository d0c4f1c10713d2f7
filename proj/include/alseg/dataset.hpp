#ifndef ALSEG_DATASET_HPP
#define ALSEG_DATASET_HPP

#include "alseg/pool.hpp"

#include <filesystem>
#include <map>

namespace alseg {

// Netpbm I/O: P5 (grey) and P6 (RGB), 8-bit. Masks are P5 with class values, 255 = IGNORE.
ImageF read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const ImageF& image);
PixelMask read_mask(const std::filesystem::path& path, int num_classes);
void write_mask(const std::filesystem::path& path, const PixelMask& mask);

/// One line of the sidecar index: `<id>\t<image>\t<mask|->\t<label|->`.
struct IndexRecord {
  SampleId id;
  std::string image_path;
  std::optional<std::string> mask_path;
  std::optional<int> image_label;
};

struct IndexFile {
  int num_classes = 0;        ///< pixel classes K
  int num_image_classes = 0;  ///< coarse image classes
  std::vector<IndexRecord> records;
};

inline constexpr const char* kIndexFileName = "index.tsv";

IndexFile parse_index(std::istream& in);
void write_index(std::ostream& out, const IndexFile& index);

/// In-memory dataset loaded from a directory holding `index.tsv`.
/// Missing image labels are derived from the mask majority class.
class Dataset {
 public:
  static Dataset load(const std::filesystem::path& dir);
  static Dataset from_samples(std::vector<ImageSample> samples, int num_classes,
                              int num_image_classes);

  int num_classes() const { return num_classes_; }
  int num_image_classes() const { return num_image_classes_; }
  std::size_t size() const { return samples_.size(); }

  /// Sorted ids.
  std::vector<SampleId> ids() const;
  bool contains(const SampleId& id) const { return by_id_.contains(id); }
  const ImageSample& sample(const SampleId& id) const;
  const std::vector<ImageSample>& samples() const { return samples_; }

 private:
  std::vector<ImageSample> samples_;
  std::map<SampleId, std::size_t> by_id_;
  int num_classes_ = 0;
  int num_image_classes_ = 0;
};

}  // namespace alseg

#endif  // ALSEG_DATASET_HPP
