#include "alseg/experiment.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

namespace alseg {
namespace fs = std::filesystem;

namespace {

std::string render(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
std::string render(int v) { return std::to_string(v); }
std::string render(std::uint64_t v) { return std::to_string(v); }
std::string render(bool v) { return v ? "true" : "false"; }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
  } else {
    T v{};
    const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) {
      throw ConfigError(key + ": cannot parse '" + text + "'");
    }
    if constexpr (std::is_floating_point_v<T>) {
      if (!std::isfinite(v)) throw ConfigError(key + ": value must be finite");
    }
    return v;
  }
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename T, typename Access>
Field field(std::string key, Access access) {
  return {key,
          [access](const ExperimentConfig& c) { return render(access(const_cast<ExperimentConfig&>(c))); },
          [access, key](ExperimentConfig& c, const std::string& v) { access(c) = parse_value<T>(key, v); }};
}

template <typename Parse, typename Name, typename Access>
Field enum_field(std::string key, Access access, Parse parse, Name name) {
  return {key,
          [access, name](const ExperimentConfig& c) {
            return std::string(name(access(const_cast<ExperimentConfig&>(c))));
          },
          [access, parse, key](ExperimentConfig& c, const std::string& v) {
            try {
              access(c) = parse(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(key + ": " + e.what());
            }
          }};
}

#define ALSEG_FIELD(T, key, member) field<T>(key, [](ExperimentConfig& c) -> T& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"dataset", [](const ExperimentConfig& c) { return c.dataset_path.string(); },
                 [](ExperimentConfig& c, const std::string& v) { c.dataset_path = v; }});
    f.push_back({"output_dir", [](const ExperimentConfig& c) { return c.output_dir.string(); },
                 [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }});
    f.push_back(ALSEG_FIELD(std::uint64_t, "seed", seed));
    f.push_back(ALSEG_FIELD(double, "eval_split_fraction", eval_split_fraction));

    f.push_back(ALSEG_FIELD(double, "selection.labeled_ratio", selection.labeled_ratio));
    f.push_back(ALSEG_FIELD(double, "selection.alpha_init", selection.alpha_init));
    f.push_back(ALSEG_FIELD(double, "selection.beta_q", selection.beta_q));
    f.push_back(enum_field(
        "selection.strategy", [](ExperimentConfig& c) -> Strategy& { return c.selection.strategy; },
        [](const std::string& v) { return parse_strategy(v); }, [](Strategy s) { return strategy_name(s); }));

    f.push_back(enum_field(
        "learner.architecture",
        [](ExperimentConfig& c) -> ClassifierArch& { return c.selection.learner.architecture; },
        [](const std::string& v) { return parse_classifier_arch(v); },
        [](ClassifierArch a) { return classifier_arch_name(a); }));
    f.push_back(ALSEG_FIELD(int, "learner.width", selection.learner.width));
    f.push_back(ALSEG_FIELD(int, "learner.epochs_per_teach", selection.learner.epochs_per_teach));
    f.push_back(ALSEG_FIELD(int, "learner.batch_size", selection.learner.batch_size));
    f.push_back(ALSEG_FIELD(double, "learner.base_lr", selection.learner.base_lr));
    f.push_back(ALSEG_FIELD(double, "learner.momentum", selection.learner.momentum));
    f.push_back(ALSEG_FIELD(int, "learner.lr_step_epochs", selection.learner.lr_step_epochs));
    f.push_back(ALSEG_FIELD(double, "learner.lr_step_factor", selection.learner.lr_step_factor));
    f.push_back(ALSEG_FIELD(double, "learner.feature_scale", selection.learner.feature_scale));
    f.push_back(ALSEG_FIELD(bool, "learner.reinit_each_teach", selection.learner.reinit_each_teach));

    f.push_back(ALSEG_FIELD(double, "gan.lambda_fm", gan.lambda_fm));
    f.push_back(ALSEG_FIELD(double, "gan.lambda_st", gan.lambda_st));
    f.push_back(ALSEG_FIELD(double, "gan.tau", gan.tau));
    f.push_back(ALSEG_FIELD(int, "gan.iterations", gan.iterations));
    f.push_back(ALSEG_FIELD(double, "gan.gen_lr", gan.gen_lr));
    f.push_back(ALSEG_FIELD(double, "gan.gen_momentum", gan.gen_momentum));
    f.push_back(ALSEG_FIELD(double, "gan.gen_weight_decay", gan.gen_weight_decay));
    f.push_back(ALSEG_FIELD(double, "gan.disc_lr", gan.disc_lr));
    f.push_back(ALSEG_FIELD(bool, "gan.poly_lr", gan.poly_lr));
    f.push_back(ALSEG_FIELD(double, "gan.poly_power", gan.poly_power));
    f.push_back(ALSEG_FIELD(int, "gan.batch_size", gan.batch_size));
    f.push_back(ALSEG_FIELD(int, "gan.unlabeled_batch_size", gan.unlabeled_batch_size));
    f.push_back(ALSEG_FIELD(int, "gan.pseudo_draw", gan.pseudo_draw));
    f.push_back(ALSEG_FIELD(int, "gan.num_classes", gan.num_classes));
    f.push_back(ALSEG_FIELD(int, "gan.crop_h", gan.crop_h));
    f.push_back(ALSEG_FIELD(int, "gan.crop_w", gan.crop_w));
    f.push_back(enum_field(
        "gan.fm_norm", [](ExperimentConfig& c) -> FeatureNorm& { return c.gan.fm_norm; },
        [](const std::string& v) {
          if (v == "l2") return FeatureNorm::kL2;
          if (v == "l1") return FeatureNorm::kL1;
          throw std::invalid_argument("expected l1 or l2, got '" + v + "'");
        },
        [](FeatureNorm n) { return std::string_view(n == FeatureNorm::kL1 ? "l1" : "l2"); }));
    f.push_back(ALSEG_FIELD(bool, "gan.ephemeral_st", gan.ephemeral_st));
    f.push_back(enum_field(
        "gan.segmenter", [](ExperimentConfig& c) -> SegmenterArch& { return c.gan.segmenter; },
        [](const std::string& v) { return parse_segmenter_arch(v); },
        [](SegmenterArch a) { return segmenter_arch_name(a); }));
    f.push_back(ALSEG_FIELD(int, "gan.segmenter_width", gan.segmenter_width));
    f.push_back({"gan.disc_widths",
                 [](const ExperimentConfig& c) {
                   const auto& w = c.gan.disc_widths;
                   return render(w[0]) + ',' + render(w[1]) + ',' + render(w[2]) + ',' + render(w[3]);
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                   std::array<int, 4> w{};
                   std::istringstream in(v);
                   std::string part;
                   std::size_t i = 0;
                   while (std::getline(in, part, ',')) {
                     if (i == 4) throw ConfigError("gan.disc_widths: expected 4 comma-separated widths");
                     w[i++] = parse_value<int>("gan.disc_widths", trim(part));
                   }
                   if (i != 4) throw ConfigError("gan.disc_widths: expected 4 comma-separated widths");
                   c.gan.disc_widths = w;
                 }});
    f.push_back(ALSEG_FIELD(double, "gan.disc_dropout", gan.disc_dropout));
    f.push_back(ALSEG_FIELD(int, "gan.checkpoint_every", gan.checkpoint_every));
    return f;
  }();
  return table;
}

#undef ALSEG_FIELD

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return parse_config_text(in);
}

std::vector<SampleId> read_manifest_ids(const fs::path& path, const Dataset& dataset) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  return read_manifest(in, dataset.num_image_classes()).ids;
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::finalize() {
  selection.seed = seed;
  gan.seed = seed;
  try {
    selection.validate();
    gan.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(eval_split_fraction > 0.0 && eval_split_fraction < 1.0)) {
    throw ConfigError("eval_split_fraction must lie in (0, 1)");
  }
}

ConfigMap parse_config_text(std::istream& in) {
  ConfigMap out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
    }
    const std::string key = trim(body.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
    out[key] = trim(body.substr(eq + 1));
  }
  return out;
}

ConfigMap read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  return parse_config_text(in);
}

ConfigMap preset(std::string_view name) {
  if (name != "paper") throw ConfigError("unknown preset '" + std::string(name) + "'");
  return {
      {"selection.alpha_init", "0.1"},   {"selection.beta_q", "0.5"},     {"gan.tau", "0.6"},
      {"gan.lambda_fm", "0.1"},          {"gan.lambda_st", "1"},          {"gan.gen_lr", "0.00025"},
      {"gan.gen_momentum", "0.9"},       {"gan.gen_weight_decay", "0.0005"}, {"gan.disc_lr", "0.0001"},
      {"learner.base_lr", "0.001"},      {"learner.momentum", "0.9"},     {"learner.epochs_per_teach", "50"},
  };
}

void apply_config(ExperimentConfig& config, const ConfigMap& values) {
  for (const auto& [key, value] : values) {
    const auto& table = fields();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->set(config, value);
  }
}

ConfigMap to_config_map(const ExperimentConfig& config) {
  ConfigMap out;
  for (const auto& f : fields()) out[f.key] = f.get(config);
  return out;
}

void write_config(std::ostream& out, const ExperimentConfig& config) {
  for (const auto& f : fields()) out << f.key << '=' << f.get(config) << '\n';
}

std::string config_hash(const ExperimentConfig& config) {
  std::string text;
  for (const auto& f : fields()) {
    if (f.key == "dataset" || f.key == "output_dir") continue;
    text += f.key + '=' + f.get(config) + '\n';
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

std::size_t worker_threads() {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const char* env = std::getenv("ALS_SEG_THREADS");
  if (env == nullptr || *env == '\0') return hw;
  const int n = parse_value<int>("ALS_SEG_THREADS", env);
  if (n < 1) throw ConfigError("ALS_SEG_THREADS must be >= 1");
  return static_cast<std::size_t>(n);
}

TrainValSplit experiment_split(const ExperimentConfig& config, const Dataset& dataset) {
  const std::vector<SampleId> ids = dataset.ids();
  return split_train_val(ids, config.eval_split_fraction, derive_seed(config.seed, "split"));
}

// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (n_images < 10) throw ConfigError("synth: n_images must be >= 10");
  if (height < 4 || width < 4) throw ConfigError("synth: image extent must be at least 4x4");
  if (num_classes < 2 || num_classes >= kIgnore) throw ConfigError("synth: num_classes must be in [2, 254]");
  if (class_prior.size() != static_cast<std::size_t>(num_classes)) {
    throw ConfigError("synth: class_prior needs one weight per class");
  }
  double sum = 0.0;
  for (double p : class_prior) {
    if (!(p >= 0.0)) throw ConfigError("synth: class_prior weights must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("synth: class_prior must sum to 1");
  if (shapes.empty()) throw ConfigError("synth: shape vocabulary is empty");
  if (!(rare_class_rate >= 0.0 && rare_class_rate <= 1.0)) throw ConfigError("synth: rare_class_rate must be in [0,1]");
  if (!(noise >= 0.0)) throw ConfigError("synth: noise must be >= 0");
}

namespace {

struct Rgb {
  float r, g, b;
};

Rgb class_colour(int k, int num_classes) {
  const float hue = static_cast<float>(k) / static_cast<float>(num_classes) * 6.0f;
  const float s = 0.6f;
  const float v = 0.75f;
  const float c = v * s;
  const float x = c * (1.0f - std::abs(std::fmod(hue, 2.0f) - 1.0f));
  const float m = v - c;
  Rgb out{};
  switch (static_cast<int>(hue)) {
    case 0: out = {c, x, 0}; break;
    case 1: out = {x, c, 0}; break;
    case 2: out = {0, c, x}; break;
    case 3: out = {0, x, c}; break;
    case 4: out = {x, 0, c}; break;
    default: out = {c, 0, x}; break;
  }
  return {out.r + m, out.g + m, out.b + m};
}

void paint(std::vector<int>& cls, int h, int w, ShapeKind kind, int label, double scale, Rng& rng) {
  auto uni = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, std::max(lo, hi))(rng); };
  const int min_side = std::min(h, w);
  switch (kind) {
    case ShapeKind::kRectangle: {
      const int rh = std::max(2, static_cast<int>(uni(min_side / 5, min_side / 2) * scale));
      const int rw = std::max(2, static_cast<int>(uni(min_side / 5, min_side / 2) * scale));
      const int y0 = uni(0, h - rh);
      const int x0 = uni(0, w - rw);
      for (int y = y0; y < std::min(h, y0 + rh); ++y) {
        for (int x = x0; x < std::min(w, x0 + rw); ++x) cls[static_cast<std::size_t>(y) * w + x] = label;
      }
      break;
    }
    case ShapeKind::kDisk: {
      const double r = std::max(1.5, uni(min_side / 10, min_side / 4) * scale);
      const int cy = uni(0, h - 1);
      const int cx = uni(0, w - 1);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) cls[static_cast<std::size_t>(y) * w + x] = label;
        }
      }
      break;
    }
    case ShapeKind::kStripes: {
      const int rh = std::max(3, static_cast<int>(uni(min_side / 3, 2 * min_side / 3) * scale));
      const int rw = std::max(3, static_cast<int>(uni(min_side / 3, 2 * min_side / 3) * scale));
      const int y0 = uni(0, h - rh);
      const int x0 = uni(0, w - rw);
      const int period = uni(4, 8);
      const int orientation = uni(0, 2);
      for (int y = y0; y < std::min(h, y0 + rh); ++y) {
        for (int x = x0; x < std::min(w, x0 + rw); ++x) {
          const int t = orientation == 0 ? y : orientation == 1 ? x : x + y;
          if (t % period < period / 2) cls[static_cast<std::size_t>(y) * w + x] = label;
        }
      }
      break;
    }
  }
}

}  // namespace

SynthSample synthesize_image(const SynthSpec& spec, std::size_t index) {
  const int h = spec.height;
  const int w = spec.width;
  const int k = spec.num_classes;
  Rng rng(derive_seed(spec.seed, "synth", index));
  std::discrete_distribution<int> pick(spec.class_prior.begin(), spec.class_prior.end());
  std::uniform_int_distribution<std::size_t> pick_shape(0, spec.shapes.size() - 1);

  std::vector<int> cls(static_cast<std::size_t>(h) * w, pick(rng));
  const int n_shapes = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int s = 0; s < n_shapes; ++s) paint(cls, h, w, spec.shapes[pick_shape(rng)], pick(rng), 1.0, rng);
  if (std::bernoulli_distribution(spec.rare_class_rate)(rng)) {
    paint(cls, h, w, spec.shapes[pick_shape(rng)], k - 1, 0.6, rng);
  }

  const float gain = std::uniform_real_distribution<float>(0.85f, 1.15f)(rng);
  std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise));
  Eigen::ArrayXf planes(3 * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int c = cls[static_cast<std::size_t>(y) * w + x];
      const Rgb base = class_colour(c, k);
      const float freq = static_cast<float>(c + 1) / 8.0f;
      const float texture = 0.08f * std::sin(2.0f * std::numbers::pi_v<float> * freq * static_cast<float>(x + 2 * y));
      const float rgb[3] = {base.r, base.g, base.b};
      for (int ch = 0; ch < 3; ++ch) {
        const float v = gain * rgb[ch] + texture + noise(rng);
        planes((static_cast<Eigen::Index>(ch) * h + y) * w + x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return {ImageF(h, w, 3, std::move(planes)), PixelMask(h, w, k, std::move(cls))};
}

void generate_synthetic_dataset(const SynthSpec& spec, const fs::path& dir) {
  spec.validate();
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  IndexFile index;
  index.num_classes = spec.num_classes;
  index.num_image_classes = spec.num_classes;
  const int digits = std::max(4, static_cast<int>(std::to_string(spec.n_images - 1).size()));
  for (int i = 0; i < spec.n_images; ++i) {
    std::string num = std::to_string(i);
    const std::string id = "img_" + std::string(static_cast<std::size_t>(digits) - num.size(), '0') + num;
    const SynthSample s = synthesize_image(spec, static_cast<std::size_t>(i));
    const std::string image_rel = "images/" + id + ".ppm";
    const std::string mask_rel = "masks/" + id + ".pgm";
    write_image(dir / image_rel, s.image);
    write_mask(dir / mask_rel, s.mask);
    index.records.push_back({SampleId(id), image_rel, mask_rel, derive_image_label(s.mask).class_index()});
  }
  write_file_atomically(dir / kIndexFileName, [&](std::ostream& out) { write_index(out, index); });
}

// ---------------------------------------------------------------------------

void write_file_atomically(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".partial";
  try {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    body(out);
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + path.string());
  } catch (...) {
    std::error_code ec;
    fs::remove(tmp, ec);
    throw;
  }
  fs::rename(tmp, path);
}

void check_no_leakage(std::span<const SampleId> manifest, std::span<const SampleId> val) {
  const std::set<SampleId> v(val.begin(), val.end());
  for (const auto& id : manifest) {
    if (v.contains(id)) throw std::runtime_error("label leakage: manifest id " + id.str() + " is in the validation split");
  }
}

SelectionResult select_command(const ExperimentConfig& config, const Dataset& dataset) {
  const TrainValSplit split = experiment_split(config, dataset);
  const Oracle oracle = Oracle::from_dataset(dataset, split.train);
  SelectionResult result = run_active_selection(config.selection, dataset, split.train, oracle);
  check_no_leakage(result.labeled_ids, split.val);

  const fs::path& out = config.output_dir;
  write_file_atomically(out / kConfigFile, [&](std::ostream& os) { write_config(os, config); });
  write_file_atomically(out / kSelectionLogFile, [&](std::ostream& os) { write_selection_log(os, result); });
  write_file_atomically(out / kManifestFile,
                        [&](std::ostream& os) { write_manifest(os, result, config_hash(config), config.seed); });
  return result;
}

namespace {

// Keeps log rows whose leading iteration is below `limit`.
void trim_log(const fs::path& path, std::size_t limit) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t it = 0;
    const auto res = std::from_chars(line.data(), line.data() + line.size(), it);
    if (res.ec == std::errc{} && it < limit) kept += line + '\n';
  }
  in.close();
  write_file_atomically(path, [&](std::ostream& os) { os << kept; });
}

}  // namespace

void train_command(const ExperimentConfig& config, const Dataset& dataset, const TrainOptions& options) {
  const std::vector<SampleId> labeled = read_manifest_ids(options.manifest, dataset);
  for (const auto& id : labeled) {
    if (!dataset.contains(id)) throw std::runtime_error("manifest id " + id.str() + " is not in the dataset");
    if (!dataset.sample(id).mask) throw std::runtime_error("manifest id " + id.str() + " has no pixel mask");
  }
  const TrainValSplit split = experiment_split(config, dataset);
  check_no_leakage(labeled, split.val);
  const std::set<SampleId> chosen(labeled.begin(), labeled.end());
  std::vector<SampleId> unlabeled;
  for (const auto& id : split.train) {
    if (!chosen.contains(id)) unlabeled.push_back(id);
  }

  S4GanTrainer trainer(dataset, labeled, unlabeled, config.gan);
  const fs::path& out = config.output_dir;
  fs::create_directories(out);
  const fs::path log_path = out / kTrainLogFile;
  const fs::path pseudo_path = out / kPseudoLogFile;
  auto mode = std::ios::trunc;
  if (options.resume) {
    trainer.load_checkpoint(*options.resume);
    trim_log(log_path, trainer.iteration());
    trim_log(pseudo_path, trainer.iteration());
    mode = std::ios::app;
  }
  write_file_atomically(out / kConfigFile, [&](std::ostream& os) { write_config(os, config); });
  std::ofstream log(log_path, std::ios::out | mode);
  std::ofstream pseudo(pseudo_path, std::ios::out | mode);
  if (!log || !pseudo) throw std::runtime_error("cannot open training logs in " + out.string());
  run_training(trainer, TrainingSinks{&log, &pseudo, out / kCheckpointFile, config_hash(config)});
}

ConfusionMatrix score_predictions(const Dataset& dataset, std::span<const SampleId> ids,
                                  const MaskPredictor& predict, int num_classes) {
  ConfusionMatrix cm(num_classes);
  for (const auto& id : ids) {
    const ImageSample& s = dataset.sample(id);
    if (!s.mask) throw std::runtime_error("evaluation sample " + id.str() + " has no mask");
    cm += accumulate_confusion(predict(s), *s.mask, num_classes);
  }
  return cm;
}

void write_eval_report(std::ostream& out, const EvalReport& report) {
  out << "miou=" << render(report.miou) << '\n';
  out << "pixels=" << report.confusion.total() << '\n';
  for (Eigen::Index k = 0; k < report.per_class.size(); ++k) {
    out << "iou_" << k << '=' << (std::isnan(report.per_class(k)) ? "nan" : render(report.per_class(k))) << '\n';
  }
}

EvalReport eval_command(const ExperimentConfig& config, const Dataset& dataset, const EvalOptions& options) {
  const CheckpointHeader header = read_checkpoint_header(options.checkpoint);
  if (header.num_classes != dataset.num_classes()) {
    throw std::runtime_error("checkpoint predicts " + std::to_string(header.num_classes) +
                             " classes but the dataset has " + std::to_string(dataset.num_classes()));
  }
  const TrainValSplit split = experiment_split(config, dataset);
  std::vector<SampleId> ids;
  if (options.split == "val") {
    ids = split.val;
  } else if (options.split == "train") {
    ids = split.train;
  } else if (options.split == "all") {
    ids = dataset.ids();
  } else {
    throw ConfigError("unknown split '" + options.split + "' (val, train or all)");
  }
  std::optional<fs::path> manifest = options.manifest;
  if (!manifest && fs::exists(config.output_dir / kManifestFile)) manifest = config.output_dir / kManifestFile;
  if (manifest && options.split == "val") check_no_leakage(read_manifest_ids(*manifest, dataset), ids);

  const SegmentationNet<float> net = load_segmenter(options.checkpoint);
  EvalReport report{0.0, {}, score_predictions(
                                 dataset, ids,
                                 [&](const ImageSample& s) {
                                   nn::NoGradGuard no_grad;
                                   const ImageF* im[] = {&s.pixels};
                                   return PixelMask(s.pixels.height(), s.pixels.width(), net.num_classes(),
                                                    argmax_channels(net(image_batch<float>(im))));
                                 },
                                 net.num_classes())};
  report.miou = miou(report.confusion);
  report.per_class = per_class_iou(report.confusion);
  write_file_atomically(config.output_dir / kEvalFile, [&](std::ostream& os) {
    os << "split=" << options.split << '\n';
    write_eval_report(os, report);
  });
  return report;
}

DiversityReport diversity_command(const ExperimentConfig& config, const Dataset& dataset, const fs::path& manifest) {
  const std::vector<SampleId> ids = read_manifest_ids(manifest, dataset);
  const DiversityReport r = diversity_report(ids, dataset);
  write_file_atomically(config.output_dir / kDiversityFile, [&](std::ostream& os) {
    os << "shannon=" << render(r.shannon) << "\nsimpson=" << render(r.simpson) << "\nhistogram=";
    for (Eigen::Index k = 0; k < r.histogram.size(); ++k) os << (k ? "," : "") << r.histogram(k);
    os << '\n';
  });
  return r;
}

void run_pipeline(const ExperimentConfig& config, const Dataset& dataset) {
  select_command(config, dataset);
  const fs::path manifest = config.output_dir / kManifestFile;
  train_command(config, dataset, TrainOptions{manifest, std::nullopt});
  eval_command(config, dataset, EvalOptions{config.output_dir / kCheckpointFile, "val", manifest});
  diversity_command(config, dataset, manifest);
}

// ---------------------------------------------------------------------------

std::optional<ReportRow> read_run(const fs::path& run_dir, std::string* why) {
  const auto fail = [why](std::string msg) -> std::optional<ReportRow> {
    if (why) *why = std::move(msg);
    return std::nullopt;
  };
  std::map<std::string, std::string> values;
  for (const char* file : {kConfigFile, kEvalFile, kDiversityFile}) {
    if (!fs::exists(run_dir / file)) return fail(std::string("missing ") + file);
    try {
      const auto kv = read_key_values(run_dir / file);
      values.insert(kv.begin(), kv.end());
    } catch (const std::exception& e) {
      return fail(std::string(file) + ": " + e.what());
    }
  }
  ReportRow row;
  try {
    row.ratio = parse_value<double>("selection.labeled_ratio", values.at("selection.labeled_ratio"));
    row.strategy = values.at("selection.strategy");
    row.seed = parse_value<std::uint64_t>("seed", values.at("seed"));
    row.miou = parse_value<double>("miou", values.at("miou"));
    row.shannon = parse_value<double>("shannon", values.at("shannon"));
    row.simpson = parse_value<double>("simpson", values.at("simpson"));
  } catch (const std::out_of_range&) {
    return fail("missing a required key");
  } catch (const std::exception& e) {
    return fail(e.what());
  }
  return row;
}

namespace {

bool row_less(const ReportRow& a, const ReportRow& b) {
  return std::tie(a.ratio, a.strategy, a.seed) < std::tie(b.ratio, b.strategy, b.seed);
}

}  // namespace

void write_report(std::ostream& out, std::span<const ReportRow> rows) {
  std::vector<ReportRow> sorted(rows.begin(), rows.end());
  std::stable_sort(sorted.begin(), sorted.end(), row_less);
  out << "ratio,strategy,seed,miou,shannon,simpson\n";
  for (const auto& r : sorted) {
    out << render(r.ratio) << ',' << r.strategy << ',' << r.seed << ',' << render(r.miou) << ','
        << render(r.shannon) << ',' << render(r.simpson) << '\n';
  }
}

void write_report_summary(std::ostream& out, std::span<const ReportRow> rows) {
  std::map<std::pair<double, std::string>, std::vector<const ReportRow*>> groups;
  for (const auto& r : rows) groups[{r.ratio, r.strategy}].push_back(&r);
  out << "ratio,strategy,n,miou_mean,miou_std,shannon_mean,shannon_std,simpson_mean,simpson_std\n";
  for (const auto& [key, members] : groups) {
    out << render(key.first) << ',' << key.second << ',' << members.size();
    for (double ReportRow::*m : {&ReportRow::miou, &ReportRow::shannon, &ReportRow::simpson}) {
      double mean = 0.0;
      for (const ReportRow* r : members) mean += r->*m;
      mean /= static_cast<double>(members.size());
      double ss = 0.0;
      for (const ReportRow* r : members) ss += (r->*m - mean) * (r->*m - mean);
      const double sd = members.size() > 1 ? std::sqrt(ss / static_cast<double>(members.size() - 1))
                                           : std::numeric_limits<double>::quiet_NaN();
      out << ',' << render(mean) << ',' << (std::isnan(sd) ? std::string("nan") : render(sd));
    }
    out << '\n';
  }
}

std::vector<ReportRow> report_command(std::span<const fs::path> run_dirs, const fs::path& output_dir) {
  std::vector<ReportRow> rows;
  for (const auto& dir : run_dirs) {
    std::string why;
    if (auto row = read_run(dir, &why)) {
      rows.push_back(*row);
    } else {
      std::cerr << "warning: skipping " << dir.string() << ": " << why << '\n';
    }
  }
  if (rows.empty()) throw std::runtime_error("report: no valid run directories");
  write_file_atomically(output_dir / "report.csv", [&](std::ostream& os) { write_report(os, rows); });
  write_file_atomically(output_dir / "report_summary.csv", [&](std::ostream& os) { write_report_summary(os, rows); });
  return rows;
}

std::string sweep_point_name(double alpha, double beta, Strategy strategy) {
  return "a" + render(alpha) + "_b" + render(beta) + "_" + std::string(strategy_name(strategy));
}

std::vector<SweepPoint> sweep_command(const ExperimentConfig& base, const Dataset& dataset, const SweepGrid& grid) {
  if (grid.alpha_init.empty() || grid.beta_q.empty() || grid.strategy.empty()) {
    throw ConfigError("sweep: every grid axis needs at least one value");
  }
  std::vector<SweepPoint> points;
  std::vector<ExperimentConfig> configs;
  for (double a : grid.alpha_init) {
    for (double b : grid.beta_q) {
      for (Strategy s : grid.strategy) {
        SweepPoint p;
        p.name = sweep_point_name(a, b, s);
        p.dir = base.output_dir / p.name;
        p.seed = derive_seed(base.seed, p.name);
        ExperimentConfig c = base;
        c.selection.alpha_init = a;
        c.selection.beta_q = b;
        c.selection.strategy = s;
        c.seed = p.seed;
        c.output_dir = p.dir;
        c.finalize();
        points.push_back(std::move(p));
        configs.push_back(std::move(c));
      }
    }
  }

  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        if (grid.train) {
          run_pipeline(configs[i], dataset);
        } else {
          select_command(configs[i], dataset);
        }
        points[i].ok = true;
      } catch (const std::exception& e) {
        points[i].error = e.what();
      }
    }
  };
  const std::size_t n_workers = std::min(worker_threads(), points.size());
  std::vector<std::thread> workers;
  for (std::size_t t = 1; t < n_workers; ++t) workers.emplace_back(work);
  work();
  for (auto& t : workers) t.join();

  write_file_atomically(base.output_dir / "sweep_status.tsv", [&](std::ostream& os) {
    os << "# point\tseed\tstatus\terror\n";
    for (const auto& p : points) {
      os << p.name << '\t' << p.seed << '\t' << (p.ok ? "ok" : "failed") << '\t' << p.error << '\n';
    }
  });
  return points;
}

}  // namespace alseg
