#ifndef ALSEG_S4GAN_TRAINER_HPP
#define ALSEG_S4GAN_TRAINER_HPP

#include "alseg/dataset.hpp"
#include "alseg/metrics.hpp"
#include "alseg/s4gan.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <set>

namespace alseg {

struct GanConfig {
  double lambda_fm = 0.1;
  double lambda_st = 1.0;
  double tau = 0.6;
  int iterations = 2000;
  double gen_lr = 2.5e-4;
  double gen_momentum = 0.9;
  double gen_weight_decay = 5e-4;
  double disc_lr = 1e-4;
  bool poly_lr = false;
  double poly_power = 0.9;
  int batch_size = 4;            ///< labeled pairs per step
  int unlabeled_batch_size = 4;  ///< unlabeled images per step
  int pseudo_draw = 2;           ///< buffered pseudo-label pairs replayed per step
  int num_classes = 0;           ///< K; 0 takes the dataset's value
  int crop_h = 0;                ///< 0 trains on full images
  int crop_w = 0;
  FeatureNorm fm_norm = FeatureNorm::kL2;
  bool ephemeral_st = false;     ///< self-train per batch only, no persistent buffer
  SegmenterArch segmenter = SegmenterArch::kEncoderDecoder;
  int segmenter_width = 16;
  std::array<int, 4> disc_widths{16, 32, 64, 128};
  double disc_dropout = 0.5;
  int checkpoint_every = 0;      ///< 0 = final checkpoint only
  std::uint64_t seed = 0;

  void validate() const;
  /// Hash of every field that influences a training step (excludes the iteration budget
  /// unless the learning rate schedule depends on it).
  std::string step_hash() const;
};

struct PseudoLabel {
  PixelMask mask;
  double confidence = 0.0;
  std::size_t iteration = 0;
  int y0 = 0;  ///< crop window origin the mask refers to
  int x0 = 0;
};

/// Discriminator-accepted generator masks keyed by unlabeled sample id.
class PseudoLabelBuffer {
 public:
  PseudoLabelBuffer() = default;
  PseudoLabelBuffer(std::set<SampleId> allowed, double tau) : allowed_(std::move(allowed)), tau_(tau) {}

  /// Inserts when confidence >= tau and no stored entry is more confident.
  bool offer(const SampleId& id, PseudoLabel label);

  std::size_t size() const { return entries_.size(); }
  const std::map<SampleId, PseudoLabel>& entries() const { return entries_; }
  double tau() const { return tau_; }
  void clear() { entries_.clear(); }

  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  std::set<SampleId> allowed_;
  double tau_ = 0.6;
  std::map<SampleId, PseudoLabel> entries_;
};

struct StepMetrics {
  std::size_t iteration = 0;
  double ce = 0.0;
  double fm = 0.0;
  double st = 0.0;
  double d = 0.0;
  std::size_t buffer_size = 0;
  std::vector<std::pair<SampleId, double>> accepted;  ///< inserted or refreshed this step
};

/// `<iteration>\t<L_ce>\t<L_fm>\t<L_st>\t<L_D>\t<buffer_size>`
std::string format_log_row(const StepMetrics& m);
/// `<iteration>\t<sample_id>\t<confidence>` for every buffer insertion.
std::string format_pseudo_rows(const StepMetrics& m);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adversarial semi-supervised trainer. Every random draw is keyed by (seed, iteration),
/// so the full state is parameters, optimizer moments, the buffer and the iteration.
class S4GanTrainer {
 public:
  S4GanTrainer(const Dataset& dataset, std::vector<SampleId> labeled, std::vector<SampleId> unlabeled,
               GanConfig config);

  StepMetrics step();

  std::size_t iteration() const { return iteration_; }
  const GanConfig& config() const { return config_; }
  const SegmentationNet<float>& segmenter() const { return *segmenter_; }
  const Discriminator<float>& discriminator() const { return *discriminator_; }
  const PseudoLabelBuffer& buffer() const { return buffer_; }

  /// Writes `<base>` (binary state) and `<base>.txt` (text header).
  void save_checkpoint(const std::filesystem::path& base, const std::string& config_hash) const;
  void load_checkpoint(const std::filesystem::path& base);

 private:
  struct Window {
    int y0 = 0;
    int x0 = 0;
  };

  const SampleId& draw(const std::vector<SampleId>& ids, const std::string& stream, std::size_t position) const;
  Window window_for(const ImageF& image, Rng& rng) const;
  ImageF crop(const ImageF& image, Window w) const;
  PixelMask crop(const PixelMask& mask, Window w) const;
  double generator_lr() const;

  const Dataset& dataset_;
  std::vector<SampleId> labeled_;
  std::vector<SampleId> unlabeled_;
  GanConfig config_;
  int in_channels_ = 0;
  std::unique_ptr<SegmentationNet<float>> segmenter_;
  std::unique_ptr<Discriminator<float>> discriminator_;
  std::unique_ptr<nn::Sgd<float>> gen_opt_;
  std::unique_ptr<nn::Adam<float>> disc_opt_;
  PseudoLabelBuffer buffer_;
  std::size_t iteration_ = 0;
  mutable std::map<std::string, std::pair<std::size_t, std::vector<SampleId>>> epoch_cache_;
};

struct CheckpointHeader {
  std::size_t iteration = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string step_hash;
  int num_classes = 0;
  int in_channels = 0;
  SegmenterArch segmenter = SegmenterArch::kEncoderDecoder;
  int segmenter_width = 16;
};

CheckpointHeader read_checkpoint_header(const std::filesystem::path& base);

/// Rebuilds the segmentation network stored in a checkpoint.
SegmentationNet<float> load_segmenter(const std::filesystem::path& base);

/// Argmax masks for the listed samples.
std::vector<PixelMask> predict_masks(const SegmentationNet<float>& s, const Dataset& dataset,
                                     std::span<const SampleId> ids);

/// Confusion over the listed samples, full-image inference.
ConfusionMatrix evaluate_segmenter(const SegmentationNet<float>& s, const Dataset& dataset,
                                   std::span<const SampleId> ids);

struct TrainingSinks {
  std::ostream* log = nullptr;           ///< training log rows
  std::ostream* pseudo_log = nullptr;    ///< pseudo-label acceptance rows
  std::filesystem::path checkpoint;      ///< base path; empty disables checkpoints
  std::string config_hash;
};

/// Runs steps until the configured iteration budget. Aborts with a state dump on NaN.
void run_training(S4GanTrainer& trainer, const TrainingSinks& sinks);

}  // namespace alseg

#endif  // ALSEG_S4GAN_TRAINER_HPP
