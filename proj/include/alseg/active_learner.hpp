#ifndef ALSEG_ACTIVE_LEARNER_HPP
#define ALSEG_ACTIVE_LEARNER_HPP

#include "alseg/dataset.hpp"
#include "alseg/networks.hpp"
#include "alseg/strategies.hpp"

#include <functional>
#include <iosfwd>
#include <map>
#include <memory>

namespace alseg {

/// Image classifier trained during selection.
struct LearnerSpec {
  ClassifierArch architecture = ClassifierArch::kSmallCnn;
  int width = 16;
  int epochs_per_teach = 50;
  int batch_size = 4;
  double base_lr = 1e-3;
  double momentum = 0.9;
  int lr_step_epochs = 7;
  double lr_step_factor = 0.1;
  /// Positive values give the classifier unit-norm pooled features (times this scale) and a zero-initialised head.
  double feature_scale = 10.0;
  /// Start every teach step from fresh weights instead of the current ones.
  bool reinit_each_teach = false;

  void validate() const;
};

struct SelectionConfig {
  double labeled_ratio = 0.05;
  double alpha_init = 0.1;
  double beta_q = 0.5;
  Strategy strategy = Strategy::kEntropy;
  std::uint64_t seed = 0;
  LearnerSpec learner;

  void validate() const;
};

/// Simulated annotator: a total lookup from sample id to image label.
class Oracle {
 public:
  Oracle() = default;
  explicit Oracle(std::map<SampleId, ImageLabel> labels) : labels_(std::move(labels)) {}
  /// Requires a label for every id in `ids`.
  static Oracle from_dataset(const Dataset& dataset, std::span<const SampleId> ids);

  ImageLabel label(const SampleId& id) const;
  std::vector<ImageLabel> labels(std::span<const SampleId> ids) const;
  bool covers(const SampleId& id) const { return labels_.contains(id); }

 private:
  std::map<SampleId, ImageLabel> labels_;
};

/// Pool-based learner contract: probabilities over ids, and retraining on labeled ids.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual PredictionScores<float> predict(std::span<const SampleId> ids) = 0;
  virtual void teach(std::span<const SampleId> ids, std::span<const ImageLabel> labels) = 0;
};

/// Convolutional classifier over dataset images, trained with SGD + step decay.
class CnnLearner final : public Learner {
 public:
  CnnLearner(const Dataset& dataset, LearnerSpec spec, std::uint64_t seed);

  PredictionScores<float> predict(std::span<const SampleId> ids) override;
  void teach(std::span<const SampleId> ids, std::span<const ImageLabel> labels) override;

  /// Copy of the current weights, for tests.
  nn::Buffer<float> weights() const { return model_->parameters().flatten(); }
  /// Mean cross-entropy of the most recent teach epoch.
  double last_epoch_loss() const { return last_loss_; }

 private:
  void rebuild();

  const Dataset& dataset_;
  LearnerSpec spec_;
  std::uint64_t seed_;
  std::uint64_t teach_calls_ = 0;
  std::unique_ptr<Classifier<float>> model_;
  double last_loss_ = 0.0;
};

struct SelectionSizes {
  std::size_t target = 0;     ///< X_NL
  std::size_t init_size = 0;  ///< ceil(alpha * X_NL), within [1, X_NL]
  std::size_t per_query = 0;  ///< max(1, floor(beta * init_size))
};

SelectionSizes init_sizes(const SelectionConfig& config, std::size_t pool_size);
/// Same arithmetic for an explicitly given target X_NL.
SelectionSizes sizes_for_target(double alpha_init, double beta_q, std::size_t target);

struct LabeledBatch {
  std::vector<SampleId> ids;
  std::vector<ImageLabel> labels;
};

/// Draws the initial labeled pool uniformly without replacement and removes it from the pool.
LabeledBatch init_pool(const SelectionConfig& config, std::size_t init_size, PoolPartition& partition,
                       const Oracle& oracle);

struct QueryOutcome {
  LabeledBatch batch;
  double pool_accuracy = 0.0;  ///< learner accuracy over the pool before removal; NaN if unused
};

/// Ranks the unlabeled pool and labels the top min(n_q, remaining_needed, |pool|) ids.
/// `random_seed` drives the random strategy, which never consults the learner.
QueryOutcome query_step(Learner& learner, PoolPartition& partition, Strategy strategy,
                        std::size_t n_q, std::size_t remaining_needed, const Oracle& oracle,
                        std::uint64_t random_seed);

/// Retrains the learner on the accumulated labeled set.
void teach_step(Learner& learner, std::span<const SampleId> ids, std::span<const ImageLabel> labels);

struct IterationRecord {
  std::size_t iteration = 0;
  std::vector<SampleId> queried;
  std::size_t pool_size = 0;  ///< unlabeled pool size after the query
  double pool_accuracy = 0.0;
};

struct SelectionResult {
  std::vector<SampleId> labeled_ids;  ///< selection order, initial pool first
  std::vector<ImageLabel> labels;
  std::size_t iterations_run = 0;
  std::vector<IterationRecord> log;
};

/// Observer invoked after every mutation of the partition (for invariant audits).
using PartitionObserver = std::function<void(const PoolPartition&, const SelectionResult&)>;

/// Query/teach loop over `pool_ids`, until exactly X_NL ids are labeled.
SelectionResult run_active_selection(const SelectionConfig& config, std::span<const SampleId> pool_ids,
                                     const Oracle& oracle, Learner& learner,
                                     const PartitionObserver& observer = {});

/// Convenience overload building a CnnLearner over `dataset`.
SelectionResult run_active_selection(const SelectionConfig& config, const Dataset& dataset,
                                     std::span<const SampleId> pool_ids, const Oracle& oracle);

struct Manifest {
  std::vector<SampleId> ids;
  std::vector<ImageLabel> labels;
  std::string config_hash;
  std::uint64_t seed = 0;
};

void write_manifest(std::ostream& out, const SelectionResult& result, const std::string& config_hash,
                    std::uint64_t seed);
Manifest read_manifest(std::istream& in, int num_image_classes);

/// One tab-separated record per iteration: iteration, pool size, accuracy, queried ids.
void write_selection_log(std::ostream& out, const SelectionResult& result);

}  // namespace alseg

#endif  // ALSEG_ACTIVE_LEARNER_HPP
