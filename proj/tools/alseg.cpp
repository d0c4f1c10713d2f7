// alseg: active labeled-sample selection and semi-supervised segmentation training.

#include "alseg/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace fs = std::filesystem;
using namespace alseg;

namespace {

struct Common {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;
  std::map<std::string, std::string> flags;  // config key -> value, only when given
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file");
  cmd->add_option("--preset", c.preset, "bundled hyperparameter preset (paper)");
  cmd->add_option("--set", c.overrides, "extra key=value override, repeatable");
  cmd->add_option_function<std::string>("--seed", [&c](const std::string& v) { c.flags["seed"] = v; }, "root seed");
  cmd->add_option_function<std::string>(
      "--output-dir", [&c](const std::string& v) { c.flags["output_dir"] = v; }, "run directory");
}

void add_dataset(CLI::App* cmd, Common& c) {
  cmd->add_option_function<std::string>(
      "--dataset", [&c](const std::string& v) { c.flags["dataset"] = v; }, "dataset directory with index.tsv");
}

void add_flag(CLI::App* cmd, Common& c, const std::string& name, const std::string& key, const std::string& help) {
  cmd->add_option_function<std::string>(name, [&c, key](const std::string& v) { c.flags[key] = v; }, help);
}

ExperimentConfig build_config(const Common& c) {
  ExperimentConfig cfg;
  cfg.output_dir = "out";
  if (!c.preset.empty()) apply_config(cfg, preset(c.preset));
  if (!c.config.empty()) apply_config(cfg, read_config_file(c.config));
  ConfigMap overrides;
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    overrides[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  apply_config(cfg, overrides);
  apply_config(cfg, ConfigMap(c.flags.begin(), c.flags.end()));
  cfg.finalize();
  return cfg;
}

Dataset load_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset_path.empty()) throw ConfigError("no dataset given (--dataset or dataset=)");
  return Dataset::load(cfg.dataset_path);
}

std::vector<fs::path> expand_run_dirs(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    const fs::path p(a);
    if (fs::exists(p / kConfigFile) || !fs::is_directory(p)) {
      out.push_back(p);
      continue;
    }
    std::vector<fs::path> children;
    for (const auto& e : fs::directory_iterator(p)) {
      if (e.is_directory()) children.push_back(e.path());
    }
    std::sort(children.begin(), children.end());
    out.insert(out.end(), children.begin(), children.end());
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Active labeled-sample selection and adversarial semi-supervised segmentation"};
  app.require_subcommand(1);
  Common common;

  auto* select = app.add_subcommand("select", "choose the labeled subset with an active learner");
  add_common(select, common);
  add_dataset(select, common);
  add_flag(select, common, "--strategy", "selection.strategy", "entropy, margin or random");
  add_flag(select, common, "--labeled-ratio", "selection.labeled_ratio", "fraction of the pool to label");
  add_flag(select, common, "--alpha-init", "selection.alpha_init", "initial pool share of the target");
  add_flag(select, common, "--beta-q", "selection.beta_q", "query size as a share of the initial pool");
  add_flag(select, common, "--learner", "learner.architecture", "small_cnn, vgg_like, residual_50, residual_101");
  add_flag(select, common, "--epochs", "learner.epochs_per_teach", "epochs per teach step");

  std::string manifest;
  std::string resume;
  auto* train = app.add_subcommand("train", "train the segmentation GAN on a manifest");
  add_common(train, common);
  add_dataset(train, common);
  train->add_option("--manifest", manifest, "labeled manifest (default: <output-dir>/manifest.tsv)");
  train->add_option("--resume", resume, "checkpoint to continue from");
  add_flag(train, common, "--iterations", "gan.iterations", "training iterations");

  std::string checkpoint;
  std::string split = "val";
  auto* eval = app.add_subcommand("eval", "mIoU of a checkpoint on a split");
  add_common(eval, common);
  add_dataset(eval, common);
  eval->add_option("--checkpoint", checkpoint, "checkpoint (default: <output-dir>/checkpoint.bin)");
  eval->add_option("--split", split, "val, train or all")->check(CLI::IsMember({"val", "train", "all"}));
  eval->add_option("--manifest", manifest, "manifest checked for leakage into the split");

  auto* diversity = app.add_subcommand("diversity", "Shannon and inverse Simpson indices of a manifest");
  add_common(diversity, common);
  add_dataset(diversity, common);
  diversity->add_option("--manifest", manifest, "manifest (default: <output-dir>/manifest.tsv)");

  SynthSpec synth_spec;
  std::vector<double> prior;
  auto* synth = app.add_subcommand("synth", "write a synthetic imbalanced segmentation dataset");
  add_common(synth, common);
  synth->add_option("--n-images", synth_spec.n_images, "number of images");
  synth->add_option("--height", synth_spec.height, "image height");
  synth->add_option("--width", synth_spec.width, "image width");
  synth->add_option("--classes", synth_spec.num_classes, "pixel classes K");
  synth->add_option("--prior", prior, "class weights, comma separated")->delimiter(',');
  synth->add_option("--rare-rate", synth_spec.rare_class_rate, "share of images with a rare-class shape");
  synth->add_option("--noise", synth_spec.noise, "pixel noise standard deviation");

  std::vector<std::string> run_dirs;
  auto* report = app.add_subcommand("report", "merge run directories into report.csv");
  add_common(report, common);
  report->add_option("runs", run_dirs, "run directories, or parents of run directories")->required();

  SweepGrid grid;
  std::vector<std::string> strategies;
  auto* sweep = app.add_subcommand("sweep", "grid over alpha_init, beta_q and strategy");
  add_common(sweep, common);
  add_dataset(sweep, common);
  add_flag(sweep, common, "--labeled-ratio", "selection.labeled_ratio", "fraction of the pool to label");
  sweep->add_option("--alphas", grid.alpha_init, "alpha_init values")->delimiter(',')->required();
  sweep->add_option("--betas", grid.beta_q, "beta_q values")->delimiter(',')->required();
  sweep->add_option("--strategies", strategies, "strategies")->delimiter(',');
  sweep->add_flag("--train", grid.train, "also train, evaluate and score each point");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const ExperimentConfig cfg = build_config(common);
    const fs::path& out = cfg.output_dir;

    if (*select) {
      const Dataset ds = load_dataset(cfg);
      const SelectionResult r = select_command(cfg, ds);
      std::cout << "selected " << r.labeled_ids.size() << " samples in " << r.iterations_run << " queries -> "
                << (out / kManifestFile).string() << '\n';
    } else if (*train) {
      const Dataset ds = load_dataset(cfg);
      TrainOptions opt{manifest.empty() ? out / kManifestFile : fs::path(manifest), std::nullopt};
      if (!resume.empty()) opt.resume = fs::path(resume);
      train_command(cfg, ds, opt);
      std::cout << "checkpoint " << (out / kCheckpointFile).string() << '\n';
    } else if (*eval) {
      const Dataset ds = load_dataset(cfg);
      EvalOptions opt{checkpoint.empty() ? out / kCheckpointFile : fs::path(checkpoint), split, std::nullopt};
      if (!manifest.empty()) opt.manifest = fs::path(manifest);
      const EvalReport r = eval_command(cfg, ds, opt);
      write_eval_report(std::cout, r);
    } else if (*diversity) {
      const Dataset ds = load_dataset(cfg);
      const DiversityReport r = diversity_command(cfg, ds, manifest.empty() ? out / kManifestFile : fs::path(manifest));
      std::cout << "shannon=" << r.shannon << "\nsimpson=" << r.simpson << '\n';
    } else if (*synth) {
      synth_spec.seed = cfg.seed;
      if (!prior.empty()) {
        synth_spec.class_prior = prior;
      } else if (synth_spec.num_classes != 4) {
        // Uniform over the common classes, the last class left to rare injection.
        synth_spec.class_prior.assign(static_cast<std::size_t>(synth_spec.num_classes), 0.0);
        for (int k = 0; k + 1 < synth_spec.num_classes; ++k) {
          synth_spec.class_prior[static_cast<std::size_t>(k)] = 1.0 / (synth_spec.num_classes - 1);
        }
      }
      generate_synthetic_dataset(synth_spec, out);
      std::cout << "wrote " << synth_spec.n_images << " samples to " << out.string() << '\n';
    } else if (*report) {
      const std::vector<fs::path> dirs = expand_run_dirs(run_dirs);
      const auto rows = report_command(dirs, out);
      std::cout << rows.size() << " runs -> " << (out / "report.csv").string() << '\n';
    } else if (*sweep) {
      for (const auto& s : strategies) {
        try {
          grid.strategy.push_back(parse_strategy(s));
        } catch (const std::invalid_argument& e) {
          throw ConfigError(e.what());
        }
      }
      if (grid.strategy.empty()) grid.strategy.push_back(cfg.selection.strategy);
      const Dataset ds = load_dataset(cfg);
      const auto points = sweep_command(cfg, ds, grid);
      std::size_t failed = 0;
      for (const auto& p : points) {
        if (!p.ok) {
          ++failed;
          std::cerr << "point " << p.name << " failed: " << p.error << '\n';
        }
      }
      std::cout << points.size() - failed << '/' << points.size() << " points completed\n";
      if (failed == points.size()) return 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
