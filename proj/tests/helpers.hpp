#ifndef ALSEG_TEST_HELPERS_HPP
#define ALSEG_TEST_HELPERS_HPP

#include "alseg/active_learner.hpp"
#include "alseg/dataset.hpp"
#include "alseg/s4gan.hpp"
#include "alseg/seed.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

namespace alseg::test {

inline std::vector<SampleId> make_ids(std::size_t n, const std::string& prefix = "s") {
  std::vector<SampleId> ids;
  for (std::size_t i = 0; i < n; ++i) {
    std::string num = std::to_string(i);
    ids.emplace_back(prefix + std::string(4 - std::min<std::size_t>(4, num.size()), '0') + num);
  }
  return ids;
}

/// Row-stochastic matrix; with `ties` some rows repeat exactly to exercise tie-breaks.
inline Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> random_probabilities(
    Eigen::Index n, Eigen::Index k, std::mt19937_64& rng, bool ties = true) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> p(n, k);
  std::gamma_distribution<double> g(0.7, 1.0);
  std::uniform_int_distribution<int> coin(0, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (ties && i > 0 && coin(rng) == 0) {
      p.row(i) = p.row(i - 1);
      continue;
    }
    for (Eigen::Index j = 0; j < k; ++j) p(i, j) = g(rng) + 1e-12;
    if (coin(rng) == 1) {  // a saturated one-hot row
      p.row(i).setZero();
      p(i, std::uniform_int_distribution<Eigen::Index>(0, k - 1)(rng)) = 1.0;
    }
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// Small in-memory dataset: each image is a flat colour per class region so labels are learnable.
inline Dataset tiny_dataset(std::size_t n, int h, int w, int k, std::uint64_t seed) {
  std::vector<ImageSample> samples;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cls(0, k - 1);
  std::uniform_real_distribution<float> noise(-0.05f, 0.05f);
  const auto ids = make_ids(n, "t");
  for (std::size_t i = 0; i < n; ++i) {
    const int a = cls(rng);
    const int b = cls(rng);
    const int split = std::uniform_int_distribution<int>(0, w)(rng);
    std::vector<int> mask(static_cast<std::size_t>(h) * w);
    Eigen::ArrayXf planes(3 * h * w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int c = x < split ? a : b;
        mask[static_cast<std::size_t>(y) * w + x] = c;
        for (int ch = 0; ch < 3; ++ch) {
          const float base = 0.15f + 0.7f * static_cast<float>((c + ch) % k) / static_cast<float>(std::max(1, k - 1));
          planes((ch * h + y) * w + x) = std::clamp(base + noise(rng), 0.0f, 1.0f);
        }
      }
    }
    ImageSample s;
    s.id = ids[i];
    s.pixels = ImageF(h, w, 3, std::move(planes));
    s.mask = PixelMask(h, w, k, std::move(mask));
    s.image_label = derive_image_label(*s.mask);
    samples.push_back(std::move(s));
  }
  return Dataset::from_samples(std::move(samples), k, k);
}

// Brute-force uncertainty ranking: per-row recomputation and a plain sort.
using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const PredictionScores<double>::Matrix& m) {
  Rows r(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.cols(); ++k) r[static_cast<std::size_t>(i)].push_back(m(i, k));
  }
  return r;
}

inline double naive_entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline double naive_margin(const std::vector<double>& row) {
  std::vector<double> p = row;
  std::sort(p.begin(), p.end(), std::greater<>());
  return -(p[0] - p[1]);
}

inline std::vector<SampleId> naive_order(const Rows& rows, const std::vector<SampleId>& ids,
                                         double (*score)(const std::vector<double>&)) {
  std::vector<std::pair<double, SampleId>> s;
  for (std::size_t i = 0; i < rows.size(); ++i) s.emplace_back(score(rows[i]), ids[i]);
  std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<SampleId> out;
  for (auto& [_, id] : s) out.push_back(id);
  return out;
}

// Deterministic stand-in: probabilities depend on the id and on how often it was taught.
class FakeLearner final : public Learner {
 public:
  explicit FakeLearner(int k) : k_(k) {}

  PredictionScores<float> predict(std::span<const SampleId> ids) override {
    ++predict_calls;
    PredictionScores<float>::Matrix m(static_cast<Eigen::Index>(ids.size()), k_);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      Rng rng(derive_seed(fnv1a64(ids[i].str()), "fake", teach_calls));
      double sum = 0.0;
      for (int c = 0; c < k_; ++c) sum += m(static_cast<Eigen::Index>(i), c) = static_cast<float>(1 + rng() % 100);
      m.row(static_cast<Eigen::Index>(i)) /= static_cast<float>(sum);
    }
    return PredictionScores<float>(std::move(m), std::vector<SampleId>(ids.begin(), ids.end()));
  }

  void teach(std::span<const SampleId> ids, std::span<const ImageLabel> labels) override {
    if (ids.size() != labels.size()) throw std::invalid_argument("FakeLearner: ids and labels misaligned");
    ++teach_calls;
    last_taught = ids.size();
  }

  int predict_calls = 0;
  std::uint64_t teach_calls = 0;
  std::size_t last_taught = 0;

 private:
  int k_;
};

inline Oracle hashed_oracle(std::span<const SampleId> ids, int k) {
  std::map<SampleId, ImageLabel> labels;
  for (const auto& id : ids) labels.emplace(id, ImageLabel(static_cast<int>(fnv1a64(id.str()) % k), k));
  return Oracle(std::move(labels));
}

/// Generator objective gradient against central differences on a toy segmenter and discriminator
/// (double precision, every unlabeled row accepted so all three loss terms contribute).
struct GradientCheck {
  Eigen::Index parameters = 0;
  double relative_error = 0.0;
  bool pseudo_labels_stable = false;
};

inline GradientCheck generator_gradient_check() {
  const int k = 2;
  SegmentationNet<double> s(SegmenterArch::kEncoderDecoder, 3, k, 5, 2);
  Discriminator<double> d(3 + k, {2, 2, 2, 2}, 6);
  {
    // Zero-initialised biases behind dead ReLU channels sit exactly on the kink.
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    nn::Buffer<double> theta = s.parameters().flatten();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += jitter(rng);
    s.parameters().assign(theta);
  }
  const Dataset ds = tiny_dataset(5, 16, 16, k, 3);
  const auto ids = ds.ids();
  auto tensors = [&](std::size_t from, std::size_t to) {
    std::vector<const ImageF*> im;
    std::vector<const PixelMask*> m;
    for (std::size_t i = from; i < to; ++i) {
      im.push_back(&ds.sample(ids[i]).pixels);
      m.push_back(&*ds.sample(ids[i]).mask);
    }
    return make_labeled_tensors<double>(im, m, k);
  };
  const auto labeled = tensors(0, 2);
  const auto extra = tensors(2, 3);
  const Var<double> unlabeled = tensors(3, 5).images;
  GanLossWeights w;
  w.tau = 0.0;
  auto objective = [&] { return generator_objective(s, d, labeled, unlabeled, extra, w, nullptr); };

  s.parameters().zero_grad();
  const auto terms = objective();
  nn::backward(terms.total);
  const nn::Buffer<double> analytic = s.parameters().flatten_grad();
  nn::Buffer<double> numeric(analytic.size());
  nn::Buffer<double> theta = s.parameters().flatten();
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double keep = theta(i);
    theta(i) = keep + h;
    s.parameters().assign(theta);
    const double up = objective().total.item();
    theta(i) = keep - h;
    s.parameters().assign(theta);
    const double down = objective().total.item();
    theta(i) = keep;
    numeric(i) = (up - down) / (2 * h);
  }
  s.parameters().assign(theta);

  GradientCheck out;
  out.parameters = s.parameters().count() + d.parameters().count();
  out.pseudo_labels_stable = terms.accepted.size() == 2 && objective().pseudo_labels == terms.pseudo_labels;
  out.relative_error = (analytic - numeric).matrix().norm() / std::max(analytic.matrix().norm(), 1e-12);
  return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("alseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace alseg::test

#endif  // ALSEG_TEST_HELPERS_HPP
