#include "alseg/active_learner.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace alseg {

void LearnerSpec::validate() const {
  if (epochs_per_teach < 1) throw std::invalid_argument("learner.epochs_per_teach must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("learner.batch_size must be >= 1");
  if (!(base_lr > 0.0)) throw std::invalid_argument("learner.base_lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("learner.momentum must be in [0,1)");
  if (lr_step_epochs < 1) throw std::invalid_argument("learner.lr_step_epochs must be >= 1");
  if (!(lr_step_factor > 0.0)) throw std::invalid_argument("learner.lr_step_factor must be > 0");
  if (width < 1) throw std::invalid_argument("learner.width must be >= 1");
  if (!(feature_scale >= 0.0)) throw std::invalid_argument("learner.feature_scale must be >= 0");
}

void SelectionConfig::validate() const {
  LabeledRatio{labeled_ratio};
  if (!(alpha_init > 0.0 && alpha_init <= 1.0)) throw std::invalid_argument("alpha_init must lie in (0, 1]");
  if (!(beta_q > 0.0 && beta_q <= 1.0)) throw std::invalid_argument("beta_q must lie in (0, 1]");
  learner.validate();
}

Oracle Oracle::from_dataset(const Dataset& dataset, std::span<const SampleId> ids) {
  std::map<SampleId, ImageLabel> labels;
  for (const auto& id : ids) {
    const ImageSample& s = dataset.sample(id);
    if (!s.image_label) throw std::invalid_argument("oracle: sample " + id.str() + " has no image label");
    labels.emplace(id, *s.image_label);
  }
  return Oracle(std::move(labels));
}

ImageLabel Oracle::label(const SampleId& id) const {
  const auto it = labels_.find(id);
  if (it == labels_.end()) throw std::out_of_range("oracle has no label for " + id.str());
  return it->second;
}

std::vector<ImageLabel> Oracle::labels(std::span<const SampleId> ids) const {
  std::vector<ImageLabel> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(label(id));
  return out;
}

// ---------------------------------------------------------------------------

CnnLearner::CnnLearner(const Dataset& dataset, LearnerSpec spec, std::uint64_t seed)
    : dataset_(dataset), spec_(spec), seed_(seed) {
  spec_.validate();
  rebuild();
}

void CnnLearner::rebuild() {
  const auto& first = dataset_.samples().front().pixels;
  model_ = std::make_unique<Classifier<float>>(spec_.architecture, first.channels(),
                                               dataset_.num_image_classes(),
                                               derive_seed(seed_, "learner_init", teach_calls_), spec_.width,
                                               spec_.feature_scale);
}

PredictionScores<float> CnnLearner::predict(std::span<const SampleId> ids) {
  nn::NoGradGuard no_grad;
  const int k = dataset_.num_image_classes();
  PredictionScores<float>::Matrix rows(static_cast<Index>(ids.size()), k);
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < ids.size(); start += kChunk) {
    const std::size_t end = std::min(ids.size(), start + kChunk);
    std::vector<const ImageF*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&dataset_.sample(ids[i]).pixels);
    const Var<float> probs = (*model_)(image_batch<float>(images));
    for (std::size_t i = start; i < end; ++i) {
      for (int c = 0; c < k; ++c) {
        rows(static_cast<Index>(i), c) = probs.value()(static_cast<Index>((i - start) * k + c));
      }
    }
  }
  return PredictionScores<float>(std::move(rows), std::vector<SampleId>(ids.begin(), ids.end()));
}

void CnnLearner::teach(std::span<const SampleId> ids, std::span<const ImageLabel> labels) {
  if (ids.empty()) throw std::invalid_argument("teach: no labeled samples");
  if (ids.size() != labels.size()) throw std::invalid_argument("teach: ids and labels misaligned");
  if (spec_.reinit_each_teach && teach_calls_ > 0) rebuild();

  nn::Sgd<float> opt(model_->parameters(), {spec_.base_lr, spec_.momentum, 0.0});
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto batch = static_cast<std::size_t>(spec_.batch_size);

  for (int epoch = 0; epoch < spec_.epochs_per_teach; ++epoch) {
    opt.set_lr(spec_.base_lr * std::pow(spec_.lr_step_factor, epoch / spec_.lr_step_epochs));
    Rng rng(derive_seed(seed_, "teach", teach_calls_ * 100003ULL + static_cast<std::uint64_t>(epoch)));
    shuffle_in_place(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      std::vector<const ImageF*> images;
      std::vector<int> targets;
      for (std::size_t i = start; i < end; ++i) {
        images.push_back(&dataset_.sample(ids[order[i]]).pixels);
        targets.push_back(labels[order[i]].class_index());
      }
      opt.zero_grad();
      const Var<float> loss = nn::pixel_nll((*model_)(image_batch<float>(images)),
                                            std::span<const int>(targets), -1);
      nn::backward(loss);
      opt.step();
      epoch_loss += static_cast<double>(loss.item()) * static_cast<double>(end - start);
    }
    last_loss_ = epoch_loss / static_cast<double>(order.size());
  }
  ++teach_calls_;
}

// ---------------------------------------------------------------------------

SelectionSizes sizes_for_target(double alpha_init, double beta_q, std::size_t target) {
  if (target < 1) throw std::invalid_argument("selection target must be >= 1");
  SelectionSizes s;
  s.target = target;
  const double init = alpha_init * static_cast<double>(target);
  // Tolerance keeps products like 0.1 * 30 = 3.0000000000000004 from rounding up.
  const auto ceiled = static_cast<std::size_t>(std::ceil(init - 1e-9 * std::max(1.0, init)));
  s.init_size = std::clamp<std::size_t>(ceiled, 1, target);
  const double nq = beta_q * static_cast<double>(s.init_size);
  s.per_query = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(nq + 1e-9 * std::max(1.0, nq))));
  return s;
}

SelectionSizes init_sizes(const SelectionConfig& config, std::size_t pool_size) {
  return sizes_for_target(config.alpha_init, config.beta_q,
                          target_labeled_count(LabeledRatio(config.labeled_ratio), pool_size));
}

LabeledBatch init_pool(const SelectionConfig& config, std::size_t init_size, PoolPartition& partition,
                       const Oracle& oracle) {
  const auto& pool = partition.unlabeled_ids();
  if (init_size < 1 || pool.size() < init_size) {
    throw std::invalid_argument("init_pool: pool of " + std::to_string(pool.size()) +
                                " cannot supply " + std::to_string(init_size) + " samples");
  }
  std::vector<SampleId> order(pool.begin(), pool.end());
  Rng rng(derive_seed(config.seed, "init_pool"));
  shuffle_in_place(order, rng);
  order.resize(init_size);
  LabeledBatch out;
  out.labels = oracle.labels(order);
  partition.mark_labeled(order);
  out.ids = std::move(order);
  return out;
}

QueryOutcome query_step(Learner& learner, PoolPartition& partition, Strategy strategy, std::size_t n_q,
                        std::size_t remaining_needed, const Oracle& oracle, std::uint64_t random_seed) {
  const auto& pool = partition.unlabeled_ids();
  if (pool.empty()) throw std::invalid_argument("query_step: unlabeled pool is empty");
  const std::vector<SampleId> pool_ids(pool.begin(), pool.end());
  const std::size_t take = std::min({n_q, remaining_needed, pool_ids.size()});
  if (take < 1) throw std::invalid_argument("query_step: nothing to query");

  QueryOutcome out;
  UncertaintyRanking ranking;
  if (strategy == Strategy::kRandom) {
    ranking = random_ranking(pool_ids, random_seed);
    out.pool_accuracy = std::numeric_limits<double>::quiet_NaN();
  } else {
    const PredictionScores<float> scores = learner.predict(pool_ids);
    std::size_t correct = 0;
    for (Index i = 0; i < scores.num_samples(); ++i) {
      Index best = 0;
      scores.rows().row(i).maxCoeff(&best);
      if (oracle.covers(pool_ids[static_cast<std::size_t>(i)]) &&
          oracle.label(pool_ids[static_cast<std::size_t>(i)]).class_index() == best) {
        ++correct;
      }
    }
    out.pool_accuracy = static_cast<double>(correct) / static_cast<double>(pool_ids.size());
    ranking = strategy == Strategy::kEntropy ? entropy_scores(scores) : margin_scores(scores);
  }
  out.batch.ids = select_top_q(ranking, take);
  out.batch.labels = oracle.labels(out.batch.ids);
  partition.mark_labeled(out.batch.ids);
  return out;
}

void teach_step(Learner& learner, std::span<const SampleId> ids, std::span<const ImageLabel> labels) {
  if (ids.empty()) throw std::invalid_argument("teach_step: labeled set is empty");
  if (ids.size() != labels.size()) throw std::invalid_argument("teach_step: ids and labels misaligned");
  learner.teach(ids, labels);
}

SelectionResult run_active_selection(const SelectionConfig& config, std::span<const SampleId> pool_ids,
                                     const Oracle& oracle, Learner& learner,
                                     const PartitionObserver& observer) {
  config.validate();
  const SelectionSizes sizes = init_sizes(config, pool_ids.size());
  PoolPartition partition(pool_ids);

  SelectionResult result;
  LabeledBatch init = init_pool(config, sizes.init_size, partition, oracle);
  result.labeled_ids = std::move(init.ids);
  result.labels = std::move(init.labels);
  if (observer) observer(partition, result);

  const bool uses_learner = config.strategy != Strategy::kRandom;
  if (uses_learner && result.labeled_ids.size() < sizes.target) {
    teach_step(learner, result.labeled_ids, result.labels);
  }

  while (result.labeled_ids.size() < sizes.target) {
    const std::size_t remaining = sizes.target - result.labeled_ids.size();
    QueryOutcome q = query_step(learner, partition, config.strategy, sizes.per_query, remaining, oracle,
                                derive_seed(config.seed, "query", result.iterations_run));
    result.labeled_ids.insert(result.labeled_ids.end(), q.batch.ids.begin(), q.batch.ids.end());
    result.labels.insert(result.labels.end(), q.batch.labels.begin(), q.batch.labels.end());
    result.log.push_back({result.iterations_run, q.batch.ids, partition.unlabeled_ids().size(), q.pool_accuracy});
    ++result.iterations_run;
    if (observer) observer(partition, result);
    // The teach after the final query cannot change the selection, so it is skipped.
    if (uses_learner && result.labeled_ids.size() < sizes.target) {
      teach_step(learner, result.labeled_ids, result.labels);
    }
  }
  return result;
}

SelectionResult run_active_selection(const SelectionConfig& config, const Dataset& dataset,
                                     std::span<const SampleId> pool_ids, const Oracle& oracle) {
  CnnLearner learner(dataset, config.learner, derive_seed(config.seed, "learner"));
  return run_active_selection(config, pool_ids, oracle, learner);
}

// ---------------------------------------------------------------------------

void write_manifest(std::ostream& out, const SelectionResult& result, const std::string& config_hash,
                    std::uint64_t seed) {
  out << "# config_hash=" << config_hash << " seed=" << seed << '\n';
  for (std::size_t i = 0; i < result.labeled_ids.size(); ++i) {
    out << result.labeled_ids[i].str() << '\t' << result.labels[i].class_index() << '\n';
  }
}

Manifest read_manifest(std::istream& in, int num_image_classes) {
  Manifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream meta(line.substr(1));
      std::string kv;
      while (meta >> kv) {
        if (kv.rfind("config_hash=", 0) == 0) m.config_hash = kv.substr(12);
        if (kv.rfind("seed=", 0) == 0) m.seed = std::stoull(kv.substr(5));
      }
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("manifest: malformed record '" + line + "'");
    m.ids.emplace_back(line.substr(0, tab));
    m.labels.emplace_back(std::stoi(line.substr(tab + 1)), num_image_classes);
  }
  std::vector<SampleId> sorted = m.ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw std::runtime_error("manifest: duplicate sample id");
  }
  return m;
}

void write_selection_log(std::ostream& out, const SelectionResult& result) {
  out << "# iteration\tpool_size\tlearner_accuracy\tqueried\n";
  for (const auto& r : result.log) {
    out << r.iteration << '\t' << r.pool_size << '\t';
    if (std::isnan(r.pool_accuracy)) {
      out << '-';
    } else {
      out << std::setprecision(6) << r.pool_accuracy;
    }
    out << '\t';
    for (std::size_t i = 0; i < r.queried.size(); ++i) out << (i ? "," : "") << r.queried[i].str();
    out << '\n';
  }
}

}  // namespace alseg
