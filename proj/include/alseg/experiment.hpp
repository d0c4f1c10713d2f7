#ifndef ALSEG_EXPERIMENT_HPP
#define ALSEG_EXPERIMENT_HPP

#include "alseg/active_learner.hpp"
#include "alseg/metrics.hpp"
#include "alseg/s4gan_trainer.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>

namespace alseg {

/// Bad configuration: unknown key, unparsable value, violated invariant.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  SelectionConfig selection;
  GanConfig gan;
  std::filesystem::path dataset_path;
  std::filesystem::path output_dir = ".";
  std::uint64_t seed = 0;
  double eval_split_fraction = 0.8;  ///< share of ids in the training pool

  /// Pushes the root seed into the nested configs and validates everything.
  void finalize();
};

using ConfigMap = std::map<std::string, std::string>;

/// Flat `key=value` lines; `#` starts a comment.
ConfigMap parse_config_text(std::istream& in);
ConfigMap read_config_file(const std::filesystem::path& path);
/// Hyperparameters bundled as `--preset paper`.
ConfigMap preset(std::string_view name);

/// Throws ConfigError on unknown keys or bad values.
void apply_config(ExperimentConfig& config, const ConfigMap& values);
ConfigMap to_config_map(const ExperimentConfig& config);
void write_config(std::ostream& out, const ExperimentConfig& config);
/// Hex digest of the effective configuration.
std::string config_hash(const ExperimentConfig& config);

/// Worker cap from ALS_SEG_THREADS, else hardware concurrency.
std::size_t worker_threads();

/// Train/val split of a dataset under a config.
TrainValSplit experiment_split(const ExperimentConfig& config, const Dataset& dataset);

// ---------------------------------------------------------------------------
// Synthetic imbalanced segmentation data.

enum class ShapeKind { kRectangle, kDisk, kStripes };

struct SynthSpec {
  int n_images = 200;
  int height = 32;
  int width = 32;
  int num_classes = 4;
  /// Weights for background and shape classes. The default leaves the last class to rare injection.
  std::vector<double> class_prior{0.4, 0.3, 0.3, 0.0};
  std::vector<ShapeKind> shapes{ShapeKind::kRectangle, ShapeKind::kDisk, ShapeKind::kStripes};
  /// Probability that an image receives one shape of the rare class (num_classes - 1).
  double rare_class_rate = 0.1;
  double noise = 0.08;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthSample {
  ImageF image;
  PixelMask mask;
};

SynthSample synthesize_image(const SynthSpec& spec, std::size_t index);
/// Writes images/, masks/ and index.tsv under `dir`.
void generate_synthetic_dataset(const SynthSpec& spec, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Run directory steps. Each writes only inside config.output_dir.

inline constexpr const char* kManifestFile = "manifest.tsv";
inline constexpr const char* kSelectionLogFile = "selection_log.tsv";
inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kTrainLogFile = "train_log.tsv";
inline constexpr const char* kPseudoLogFile = "pseudo_labels.tsv";
inline constexpr const char* kEvalFile = "eval.txt";
inline constexpr const char* kDiversityFile = "diversity.txt";

/// Throws when a manifest id appears in the validation split.
void check_no_leakage(std::span<const SampleId> manifest, std::span<const SampleId> val);

SelectionResult select_command(const ExperimentConfig& config, const Dataset& dataset);

struct TrainOptions {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> resume;  ///< checkpoint to continue from
};
void train_command(const ExperimentConfig& config, const Dataset& dataset, const TrainOptions& options);

using MaskPredictor = std::function<PixelMask(const ImageSample&)>;
/// Confusion of `predict` against ground truth over `ids`.
ConfusionMatrix score_predictions(const Dataset& dataset, std::span<const SampleId> ids,
                                  const MaskPredictor& predict, int num_classes);

struct EvalReport {
  double miou = 0.0;
  Eigen::VectorXd per_class;
  ConfusionMatrix confusion;
};
void write_eval_report(std::ostream& out, const EvalReport& report);

struct EvalOptions {
  std::filesystem::path checkpoint;
  std::string split = "val";  ///< val | train | all
  std::optional<std::filesystem::path> manifest;  ///< checked against the split for leakage
};
EvalReport eval_command(const ExperimentConfig& config, const Dataset& dataset, const EvalOptions& options);

DiversityReport diversity_command(const ExperimentConfig& config, const Dataset& dataset,
                                  const std::filesystem::path& manifest);

/// select, train, eval and diversity in one run directory.
void run_pipeline(const ExperimentConfig& config, const Dataset& dataset);

struct ReportRow {
  double ratio = 0.0;
  std::string strategy;
  std::uint64_t seed = 0;
  double miou = 0.0;
  double shannon = 0.0;
  double simpson = 0.0;
};

/// Reads one completed run directory; nullopt when required files are missing or malformed.
std::optional<ReportRow> read_run(const std::filesystem::path& run_dir, std::string* why = nullptr);
void write_report(std::ostream& out, std::span<const ReportRow> rows);
/// Mean and sample standard deviation per (ratio, strategy).
void write_report_summary(std::ostream& out, std::span<const ReportRow> rows);
/// Writes report.csv and report_summary.csv into `output_dir`; returns the rows used.
std::vector<ReportRow> report_command(std::span<const std::filesystem::path> run_dirs,
                                      const std::filesystem::path& output_dir);

struct SweepGrid {
  std::vector<double> alpha_init;
  std::vector<double> beta_q;
  std::vector<Strategy> strategy;
  bool train = false;  ///< also train, evaluate and score diversity per point
};

struct SweepPoint {
  std::string name;
  std::filesystem::path dir;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
};

std::string sweep_point_name(double alpha, double beta, Strategy strategy);
/// Runs every grid point in its own directory; failures are recorded, not thrown.
std::vector<SweepPoint> sweep_command(const ExperimentConfig& base, const Dataset& dataset, const SweepGrid& grid);

/// Writes through a temporary file and renames into place.
void write_file_atomically(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body);

}  // namespace alseg

#endif  // ALSEG_EXPERIMENT_HPP
