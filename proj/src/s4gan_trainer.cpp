#include "alseg/s4gan_trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace alseg {
namespace {

constexpr char kCheckpointMagic[8] = {'A', 'L', 'S', 'E', 'G', 'C', 'K', '1'};

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated stream");
  return v;
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void GanConfig::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("gan.tau must lie in (0, 1)");
  if (iterations < 1) throw std::invalid_argument("gan.iterations must be >= 1");
  if (lambda_fm < 0.0 || lambda_st < 0.0) throw std::invalid_argument("gan loss weights must be >= 0");
  if (!(gen_lr > 0.0) || !(disc_lr > 0.0)) throw std::invalid_argument("gan learning rates must be > 0");
  if (batch_size < 1) throw std::invalid_argument("gan.batch_size must be >= 1");
  if (unlabeled_batch_size < 0 || pseudo_draw < 0) throw std::invalid_argument("gan batch sizes must be >= 0");
  if (crop_h < 0 || crop_w < 0) throw std::invalid_argument("gan crop size must be >= 0");
  if (disc_dropout < 0.0 || disc_dropout >= 1.0) throw std::invalid_argument("gan.disc_dropout must be in [0,1)");
  if (segmenter_width < 1) throw std::invalid_argument("gan.segmenter_width must be >= 1");
  for (int w : disc_widths) {
    if (w < 1) throw std::invalid_argument("gan.disc_widths entries must be >= 1");
  }
}

std::string GanConfig::step_hash() const {
  std::ostringstream os;
  os.precision(17);
  os << lambda_fm << ' ' << lambda_st << ' ' << tau << ' ' << gen_lr << ' ' << gen_momentum << ' '
     << gen_weight_decay << ' ' << disc_lr << ' ' << poly_lr << ' ' << poly_power << ' ' << batch_size << ' '
     << unlabeled_batch_size << ' ' << pseudo_draw << ' ' << num_classes << ' ' << crop_h << ' ' << crop_w
     << ' ' << static_cast<int>(fm_norm) << ' ' << ephemeral_st << ' ' << static_cast<int>(segmenter) << ' '
     << segmenter_width << ' ' << disc_widths[0] << ' ' << disc_widths[1] << ' ' << disc_widths[2] << ' '
     << disc_widths[3] << ' ' << disc_dropout << ' ' << seed;
  if (poly_lr) os << ' ' << iterations;
  return hex64(fnv1a64(os.str()));
}

// ---------------------------------------------------------------------------

bool PseudoLabelBuffer::offer(const SampleId& id, PseudoLabel label) {
  if (!allowed_.contains(id)) {
    throw std::invalid_argument("pseudo-label buffer: " + id.str() + " is not an unlabeled sample");
  }
  if (label.confidence < tau_) return false;
  const auto it = entries_.find(id);
  if (it != entries_.end() && it->second.confidence > label.confidence) return false;
  entries_.insert_or_assign(id, std::move(label));
  return true;
}

void PseudoLabelBuffer::save(std::ostream& os) const {
  put<std::uint64_t>(os, entries_.size());
  for (const auto& [id, e] : entries_) {
    put<std::uint64_t>(os, id.str().size());
    os.write(id.str().data(), static_cast<std::streamsize>(id.str().size()));
    put<std::int32_t>(os, e.mask.height());
    put<std::int32_t>(os, e.mask.width());
    put<std::int32_t>(os, e.mask.num_classes());
    for (int c : e.mask.classes()) put<std::uint8_t>(os, static_cast<std::uint8_t>(c));
    put<double>(os, e.confidence);
    put<std::uint64_t>(os, e.iteration);
    put<std::int32_t>(os, e.y0);
    put<std::int32_t>(os, e.x0);
  }
}

void PseudoLabelBuffer::load(std::istream& is) {
  entries_.clear();
  const auto n = get<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string token(get<std::uint64_t>(is), '\0');
    is.read(token.data(), static_cast<std::streamsize>(token.size()));
    const int h = get<std::int32_t>(is);
    const int w = get<std::int32_t>(is);
    const int k = get<std::int32_t>(is);
    std::vector<int> classes(static_cast<std::size_t>(h) * w);
    for (auto& c : classes) c = get<std::uint8_t>(is);
    PseudoLabel e;
    e.mask = PixelMask(h, w, k, std::move(classes));
    e.confidence = get<double>(is);
    e.iteration = get<std::uint64_t>(is);
    e.y0 = get<std::int32_t>(is);
    e.x0 = get<std::int32_t>(is);
    entries_.emplace(SampleId(std::move(token)), std::move(e));
  }
}

std::string format_log_row(const StepMetrics& m) {
  return std::to_string(m.iteration) + '\t' + fmt(m.ce) + '\t' + fmt(m.fm) + '\t' + fmt(m.st) + '\t' + fmt(m.d) +
         '\t' + std::to_string(m.buffer_size);
}

std::string format_pseudo_rows(const StepMetrics& m) {
  std::string out;
  for (const auto& [id, conf] : m.accepted) {
    out += std::to_string(m.iteration) + '\t' + id.str() + '\t' + fmt(conf) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------

S4GanTrainer::S4GanTrainer(const Dataset& dataset, std::vector<SampleId> labeled,
                           std::vector<SampleId> unlabeled, GanConfig config)
    : dataset_(dataset), labeled_(std::move(labeled)), unlabeled_(std::move(unlabeled)), config_(config) {
  config_.validate();
  if (config_.num_classes == 0) config_.num_classes = dataset.num_classes();
  if (config_.num_classes != dataset.num_classes()) {
    throw std::invalid_argument("gan.num_classes disagrees with the dataset class count");
  }
  if (labeled_.empty()) throw std::invalid_argument("training needs at least one labeled sample");
  std::sort(labeled_.begin(), labeled_.end());
  std::sort(unlabeled_.begin(), unlabeled_.end());
  for (const auto& id : labeled_) {
    if (!dataset.sample(id).mask) {
      throw std::invalid_argument("no pixel-wise label for labeled sample " + id.str());
    }
    if (std::binary_search(unlabeled_.begin(), unlabeled_.end(), id)) {
      throw std::invalid_argument("sample " + id.str() + " is both labeled and unlabeled");
    }
  }
  for (const auto& id : unlabeled_) (void)dataset.sample(id);

  in_channels_ = dataset.sample(labeled_.front()).pixels.channels();
  segmenter_ = std::make_unique<SegmentationNet<float>>(config_.segmenter, in_channels_, config_.num_classes,
                                                        derive_seed(config_.seed, "segmenter_init"),
                                                        config_.segmenter_width);
  discriminator_ = std::make_unique<Discriminator<float>>(in_channels_ + config_.num_classes, config_.disc_widths,
                                                          derive_seed(config_.seed, "disc_init"),
                                                          config_.disc_dropout);
  gen_opt_ = std::make_unique<nn::Sgd<float>>(
      segmenter_->parameters(),
      nn::Sgd<float>::Options{config_.gen_lr, config_.gen_momentum, config_.gen_weight_decay});
  disc_opt_ = std::make_unique<nn::Adam<float>>(discriminator_->parameters(),
                                                nn::Adam<float>::Options{config_.disc_lr});
  buffer_ = PseudoLabelBuffer(std::set<SampleId>(unlabeled_.begin(), unlabeled_.end()), config_.tau);
}

const SampleId& S4GanTrainer::draw(const std::vector<SampleId>& ids, const std::string& stream,
                                   std::size_t position) const {
  const std::size_t epoch = position / ids.size();
  auto& [cached_epoch, perm] = epoch_cache_[stream];
  if (perm.empty() || cached_epoch != epoch) {
    perm = ids;
    Rng rng(derive_seed(config_.seed, stream, epoch));
    shuffle_in_place(perm, rng);
    cached_epoch = epoch;
  }
  return perm[position % ids.size()];
}

S4GanTrainer::Window S4GanTrainer::window_for(const ImageF& image, Rng& rng) const {
  Window w;
  if (config_.crop_h > 0 && config_.crop_h < image.height()) {
    w.y0 = std::uniform_int_distribution<int>(0, image.height() - config_.crop_h)(rng);
  }
  if (config_.crop_w > 0 && config_.crop_w < image.width()) {
    w.x0 = std::uniform_int_distribution<int>(0, image.width() - config_.crop_w)(rng);
  }
  return w;
}

ImageF S4GanTrainer::crop(const ImageF& image, Window w) const {
  const int h = (config_.crop_h > 0 && config_.crop_h < image.height()) ? config_.crop_h : image.height();
  const int wd = (config_.crop_w > 0 && config_.crop_w < image.width()) ? config_.crop_w : image.width();
  if (h == image.height() && wd == image.width()) return image;
  Eigen::ArrayXf planes(static_cast<Index>(h) * wd * image.channels());
  for (int c = 0; c < image.channels(); ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < wd; ++x) planes((static_cast<Index>(c) * h + y) * wd + x) = image.at(c, w.y0 + y, w.x0 + x);
    }
  }
  return ImageF(h, wd, image.channels(), std::move(planes));
}

PixelMask S4GanTrainer::crop(const PixelMask& mask, Window w) const {
  const int h = (config_.crop_h > 0 && config_.crop_h < mask.height()) ? config_.crop_h : mask.height();
  const int wd = (config_.crop_w > 0 && config_.crop_w < mask.width()) ? config_.crop_w : mask.width();
  if (h == mask.height() && wd == mask.width()) return mask;
  std::vector<int> classes(static_cast<std::size_t>(h) * wd);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < wd; ++x) classes[static_cast<std::size_t>(y) * wd + x] = mask.at(w.y0 + y, w.x0 + x);
  }
  return PixelMask(h, wd, mask.num_classes(), std::move(classes));
}

double S4GanTrainer::generator_lr() const {
  if (!config_.poly_lr) return config_.gen_lr;
  const double progress = static_cast<double>(iteration_) / static_cast<double>(config_.iterations);
  return config_.gen_lr * std::pow(std::max(0.0, 1.0 - progress), config_.poly_power);
}

StepMetrics S4GanTrainer::step() {
  const std::size_t it = iteration_;
  const int k = config_.num_classes;
  Rng crop_rng(derive_seed(config_.seed, "crop", it));
  Rng dropout_rng(derive_seed(config_.seed, "dropout", it));

  std::vector<ImageF> l_images;
  std::vector<PixelMask> l_masks;
  const auto lb = static_cast<std::size_t>(config_.batch_size);
  for (std::size_t j = 0; j < lb; ++j) {
    const ImageSample& s = dataset_.sample(draw(labeled_, "labeled_loader", it * lb + j));
    const Window w = window_for(s.pixels, crop_rng);
    l_images.push_back(crop(s.pixels, w));
    l_masks.push_back(crop(*s.mask, w));
  }

  std::vector<SampleId> u_ids;
  std::vector<ImageF> u_images;
  std::vector<Window> u_windows;
  if (!unlabeled_.empty()) {
    const auto ub = static_cast<std::size_t>(config_.unlabeled_batch_size);
    for (std::size_t j = 0; j < ub; ++j) {
      const SampleId& id = draw(unlabeled_, "unlabeled_loader", it * ub + j);
      const ImageSample& s = dataset_.sample(id);
      const Window w = window_for(s.pixels, crop_rng);
      u_ids.push_back(id);
      u_images.push_back(crop(s.pixels, w));
      u_windows.push_back(w);
    }
  }

  std::vector<ImageF> x_images;
  std::vector<const PixelMask*> x_masks;
  if (!config_.ephemeral_st && config_.pseudo_draw > 0 && buffer_.size() > 0) {
    std::vector<SampleId> candidates;
    for (const auto& [id, e] : buffer_.entries()) {
      if (std::find(u_ids.begin(), u_ids.end(), id) == u_ids.end()) candidates.push_back(id);
    }
    Rng rng(derive_seed(config_.seed, "buffer_draw", it));
    shuffle_in_place(candidates, rng);
    candidates.resize(std::min(candidates.size(), static_cast<std::size_t>(config_.pseudo_draw)));
    for (const auto& id : candidates) {
      const PseudoLabel& e = buffer_.entries().at(id);
      x_images.push_back(crop(dataset_.sample(id).pixels, Window{e.y0, e.x0}));
      x_masks.push_back(&e.mask);
    }
  }

  const auto pointers = [](const auto& v) {
    std::vector<const typename std::decay_t<decltype(v)>::value_type*> out;
    for (const auto& x : v) out.push_back(&x);
    return out;
  };
  const auto l_img_ptrs = pointers(l_images);
  const auto l_mask_ptrs = pointers(l_masks);
  const LabeledTensors<float> labeled = make_labeled_tensors<float>(l_img_ptrs, l_mask_ptrs, k);
  LabeledTensors<float> extra;
  if (!x_images.empty()) extra = make_labeled_tensors<float>(pointers(x_images), x_masks, k);
  Var<float> x_u;
  if (!u_images.empty()) x_u = image_batch<float>(pointers(u_images));

  // Generator update.
  segmenter_->parameters().zero_grad();
  discriminator_->parameters().zero_grad();
  gen_opt_->set_lr(generator_lr());
  const GanLossWeights weights{config_.lambda_fm, config_.lambda_st, config_.tau, config_.fm_norm};
  const GeneratorTerms<float> terms =
      generator_objective(*segmenter_, *discriminator_, labeled, x_u, extra, weights, &dropout_rng);

  StepMetrics m;
  m.iteration = it;
  m.ce = terms.ce.item();
  m.fm = terms.fm.item();
  m.st = terms.st.item();
  if (!std::isfinite(terms.total.item())) {
    throw TrainingDiverged("generator loss is not finite at iteration " + std::to_string(it) + " (ce=" +
                           fmt(m.ce) + " fm=" + fmt(m.fm) + " st=" + fmt(m.st) + ")");
  }
  nn::backward(terms.total);
  gen_opt_->step();

  // Pseudo-labels come from the pre-update generator output that D judged.
  const Index plane = x_u.defined() ? x_u.shape().plane() : 0;
  for (Index row : terms.accepted) {
    const auto r = static_cast<std::size_t>(row);
    const double conf = terms.confidences[r];
    if (config_.ephemeral_st) {
      m.accepted.emplace_back(u_ids[r], conf);
      continue;
    }
    std::vector<int> classes(terms.pseudo_labels.begin() + row * plane,
                             terms.pseudo_labels.begin() + (row + 1) * plane);
    PseudoLabel label{PixelMask(static_cast<int>(x_u.shape().h), static_cast<int>(x_u.shape().w), k,
                                std::move(classes)),
                      conf, it, u_windows[r].y0, u_windows[r].x0};
    if (buffer_.offer(u_ids[r], std::move(label))) m.accepted.emplace_back(u_ids[r], conf);
  }

  // Discriminator update on the same batches, generator output held constant.
  discriminator_->parameters().zero_grad();
  Var<float> real_conf = terms.real_confidence;
  if (!real_conf.defined()) {
    real_conf = (*discriminator_)(nn::concat_channels(labeled.images, labeled.one_hot), &dropout_rng).confidence;
  }
  Var<float> fake_conf;
  if (x_u.defined()) {
    fake_conf = (*discriminator_)(nn::concat_channels(x_u, nn::detach(terms.unlabeled_probs)), &dropout_rng)
                    .confidence;
  }
  const Var<float> d_loss = discriminator_loss_from(real_conf, fake_conf);
  m.d = d_loss.item();
  if (!std::isfinite(m.d)) {
    throw TrainingDiverged("discriminator loss is not finite at iteration " + std::to_string(it));
  }
  nn::backward(d_loss);
  disc_opt_->step();

  ++iteration_;
  m.buffer_size = buffer_.size();
  return m;
}

void S4GanTrainer::save_checkpoint(const std::filesystem::path& base, const std::string& config_hash) const {
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  const std::filesystem::path tmp = base.string() + ".partial";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put<std::uint64_t>(os, iteration_);
    nn::write_buffer(os, segmenter_->parameters().flatten());
    nn::write_buffer(os, discriminator_->parameters().flatten());
    gen_opt_->save(os);
    disc_opt_->save(os);
    buffer_.save(os);
    if (!os) throw std::runtime_error("checkpoint write failed");
  }
  std::filesystem::rename(tmp, base);

  std::ofstream header(base.string() + ".txt");
  header << "iteration=" << iteration_ << "\nseed=" << config_.seed << "\nconfig_hash=" << config_hash
         << "\nstep_hash=" << config_.step_hash() << "\nnum_classes=" << config_.num_classes
         << "\nin_channels=" << in_channels_ << "\nsegmenter=" << segmenter_arch_name(config_.segmenter)
         << "\nsegmenter_width=" << config_.segmenter_width << '\n';
}

void S4GanTrainer::load_checkpoint(const std::filesystem::path& base) {
  const CheckpointHeader header = read_checkpoint_header(base);
  if (header.step_hash != config_.step_hash()) {
    throw std::invalid_argument("checkpoint was produced with different training settings");
  }
  std::ifstream is(base, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + base.string());
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + sizeof magic, kCheckpointMagic)) {
    throw std::runtime_error(base.string() + " is not a checkpoint");
  }
  iteration_ = get<std::uint64_t>(is);
  segmenter_->parameters().assign(nn::read_buffer<float>(is));
  discriminator_->parameters().assign(nn::read_buffer<float>(is));
  gen_opt_->load(is);
  disc_opt_->load(is);
  buffer_.load(is);
  epoch_cache_.clear();
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& base) {
  std::ifstream in(base.string() + ".txt");
  if (!in) throw std::runtime_error("missing checkpoint header " + base.string() + ".txt");
  CheckpointHeader h;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key == "iteration") h.iteration = std::stoull(value);
    if (key == "seed") h.seed = std::stoull(value);
    if (key == "config_hash") h.config_hash = value;
    if (key == "step_hash") h.step_hash = value;
    if (key == "num_classes") h.num_classes = std::stoi(value);
    if (key == "in_channels") h.in_channels = std::stoi(value);
    if (key == "segmenter") h.segmenter = parse_segmenter_arch(value);
    if (key == "segmenter_width") h.segmenter_width = std::stoi(value);
  }
  if (h.num_classes < 1 || h.in_channels < 1) throw std::runtime_error("incomplete checkpoint header");
  return h;
}

SegmentationNet<float> load_segmenter(const std::filesystem::path& base) {
  const CheckpointHeader h = read_checkpoint_header(base);
  SegmentationNet<float> s(h.segmenter, h.in_channels, h.num_classes, 0, h.segmenter_width);
  std::ifstream is(base, std::ios::binary);
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + sizeof magic, kCheckpointMagic)) {
    throw std::runtime_error(base.string() + " is not a checkpoint");
  }
  (void)get<std::uint64_t>(is);
  s.parameters().assign(nn::read_buffer<float>(is));
  return s;
}

std::vector<PixelMask> predict_masks(const SegmentationNet<float>& s, const Dataset& dataset,
                                     std::span<const SampleId> ids) {
  nn::NoGradGuard no_grad;
  std::vector<PixelMask> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const ImageF* img[] = {&dataset.sample(id).pixels};
    const Var<float> probs = s(image_batch<float>(img));
    out.emplace_back(static_cast<int>(probs.shape().h), static_cast<int>(probs.shape().w), s.num_classes(),
                     argmax_channels(probs));
  }
  return out;
}

ConfusionMatrix evaluate_segmenter(const SegmentationNet<float>& s, const Dataset& dataset,
                                   std::span<const SampleId> ids) {
  ConfusionMatrix cm(s.num_classes());
  const std::vector<PixelMask> preds = predict_masks(s, dataset, ids);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const ImageSample& sample = dataset.sample(ids[i]);
    if (!sample.mask) throw std::invalid_argument("evaluation sample " + ids[i].str() + " has no mask");
    cm += accumulate_confusion(preds[i], *sample.mask, s.num_classes());
  }
  return cm;
}

void run_training(S4GanTrainer& trainer, const TrainingSinks& sinks) {
  const auto total = static_cast<std::size_t>(trainer.config().iterations);
  const auto every = static_cast<std::size_t>(std::max(0, trainer.config().checkpoint_every));
  while (trainer.iteration() < total) {
    StepMetrics m;
    try {
      m = trainer.step();
    } catch (const TrainingDiverged& e) {
      if (!sinks.checkpoint.empty()) {
        const std::filesystem::path dump = sinks.checkpoint.string() + ".diverged";
        trainer.save_checkpoint(dump, sinks.config_hash);
        std::ofstream(dump.string() + ".reason") << e.what() << '\n';
      }
      throw;
    }
    if (sinks.log) *sinks.log << format_log_row(m) << '\n' << std::flush;
    if (sinks.pseudo_log) *sinks.pseudo_log << format_pseudo_rows(m) << std::flush;
    if (!sinks.checkpoint.empty() && every > 0 && trainer.iteration() % every == 0 && trainer.iteration() < total) {
      trainer.save_checkpoint(sinks.checkpoint, sinks.config_hash);
    }
  }
  if (!sinks.checkpoint.empty()) trainer.save_checkpoint(sinks.checkpoint, sinks.config_hash);
}

}  // namespace alseg
