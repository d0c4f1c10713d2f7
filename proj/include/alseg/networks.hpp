#ifndef ALSEG_NETWORKS_HPP
#define ALSEG_NETWORKS_HPP

#include "alseg/nn/optim.hpp"
#include "alseg/pool.hpp"
#include "alseg/seed.hpp"

#include <array>
#include <string_view>

namespace alseg {

using nn::Index;
using nn::Shape;
using nn::Var;

/// Stacks images into an (N, C, H, W) constant.
template <typename Scalar>
Var<Scalar> image_batch(std::span<const ImageF* const> images) {
  if (images.empty()) throw std::invalid_argument("image_batch: empty batch");
  const auto& first = *images.front();
  const Shape s{static_cast<Index>(images.size()), first.channels(), first.height(), first.width()};
  nn::Buffer<Scalar> data(s.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = *images[i];
    if (im.channels() != s.c || im.height() != s.h || im.width() != s.w) {
      throw std::invalid_argument("image_batch: images differ in extent");
    }
    data.segment(static_cast<Index>(i) * s.per_sample(), s.per_sample()) = im.planes().template cast<Scalar>();
  }
  return nn::constant<Scalar>(s, std::move(data));
}

/// One-hot (N, K, H, W) encoding; IGNORE pixels map to all-zero class channels.
template <typename Scalar>
Var<Scalar> one_hot_batch(std::span<const PixelMask* const> masks, int num_classes) {
  if (masks.empty()) throw std::invalid_argument("one_hot_batch: empty batch");
  const Shape s{static_cast<Index>(masks.size()), num_classes, masks.front()->height(),
                masks.front()->width()};
  nn::Buffer<Scalar> data = nn::Buffer<Scalar>::Zero(s.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    const auto& m = *masks[i];
    if (m.height() != s.h || m.width() != s.w) throw std::invalid_argument("one_hot_batch: extents differ");
    for (Index p = 0; p < s.plane(); ++p) {
      const int c = m[static_cast<std::size_t>(p)];
      if (c == kIgnore) continue;
      if (c < 0 || c >= num_classes) throw std::invalid_argument("one_hot_batch: class out of range");
      data(static_cast<Index>(i) * s.per_sample() + c * s.plane() + p) = Scalar(1);
    }
  }
  return nn::constant<Scalar>(s, std::move(data));
}

/// Image channels followed by the one-hot mask channels.
template <typename Scalar>
Var<Scalar> one_hot_concat(const ImageF& image, const PixelMask& mask, int num_classes) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw std::invalid_argument("one_hot_concat: image and mask extents differ");
  }
  const ImageF* im[] = {&image};
  const PixelMask* m[] = {&mask};
  return nn::concat_channels(image_batch<Scalar>(im), one_hot_batch<Scalar>(m, num_classes));
}

/// Per-pixel argmax of a probability field (N, K, H, W), sample-major.
template <typename Scalar>
std::vector<int> argmax_channels(const Var<Scalar>& probs) {
  const Shape s = probs.shape();
  std::vector<int> out(static_cast<std::size_t>(s.n * s.plane()));
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* base = probs.value().data() + n * s.per_sample();
    for (Index p = 0; p < s.plane(); ++p) {
      int best = 0;
      for (Index c = 1; c < s.c; ++c) {
        if (base[c * s.plane() + p] > base[best * s.plane() + p]) best = static_cast<int>(c);
      }
      out[static_cast<std::size_t>(n * s.plane() + p)] = best;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image classifiers used as the active learner.

enum class ClassifierArch { kSmallCnn, kResidual50, kResidual101, kVggLike };

ClassifierArch parse_classifier_arch(std::string_view name);
std::string_view classifier_arch_name(ClassifierArch a);

template <typename Scalar>
class Classifier {
 public:
  /// `width` is the channel count of the first stage. A positive `feature_scale` feeds a
  /// zero-initialised head with unit-norm pooled features times that scale.
  Classifier(ClassifierArch arch, int in_channels, int num_classes, std::uint64_t seed, int width = 16,
             double feature_scale = 0.0)
      : arch_(arch), feature_scale_(static_cast<Scalar>(feature_scale)) {
    Rng rng(seed);
    const nn::ConvOptions same{1, 1, 1};
    switch (arch) {
      case ClassifierArch::kSmallCnn:
        convs_.emplace_back(in_channels, width, 3, same, rng);
        convs_.emplace_back(width, 2 * width, 3, same, rng);
        features_ = 2 * width;
        break;
      case ClassifierArch::kVggLike: {
        Index in = in_channels;
        for (int stage = 0; stage < 3; ++stage) {
          const Index w = width << stage;
          convs_.emplace_back(in, w, 3, same, rng);
          convs_.emplace_back(w, w, 3, same, rng);
          in = w;
        }
        features_ = in;
        break;
      }
      case ClassifierArch::kResidual50:
      case ClassifierArch::kResidual101: {
        const std::array<int, 4> depth = arch == ClassifierArch::kResidual50 ? std::array{3, 4, 6, 3}
                                                                              : std::array{3, 4, 23, 3};
        stem_ = nn::Conv2d<Scalar>(in_channels, width, 3, same, rng);
        Index in = width;
        for (int stage = 0; stage < 4; ++stage) {
          const Index mid = width << stage;
          for (int b = 0; b < depth[static_cast<std::size_t>(stage)]; ++b) {
            const Index stride = (b == 0 && stage > 0) ? 2 : 1;
            Bottleneck blk;
            blk.reduce = nn::Conv2d<Scalar>(in, mid, 1, {1, 0, 1}, rng);
            blk.spatial = nn::Conv2d<Scalar>(mid, mid, 3, {stride, 1, 1}, rng);
            // Zero-initialised expansion: every block starts as its shortcut.
            blk.expand = nn::Conv2d<Scalar>(mid, 4 * mid, 1, {1, 0, 1}, rng, Scalar(0));
            if (stride != 1 || in != 4 * mid) {
              blk.projection = nn::Conv2d<Scalar>(in, 4 * mid, 1, {stride, 0, 1}, rng);
              blk.has_projection = true;
            }
            blocks_.push_back(std::move(blk));
            in = 4 * mid;
          }
        }
        features_ = in;
        break;
      }
    }
    head_ = nn::Linear<Scalar>(features_, num_classes, rng, feature_scale_ > Scalar(0) ? Scalar(0) : Scalar(1));
    register_parameters();
  }

  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;
  Classifier(Classifier&&) = default;
  Classifier& operator=(Classifier&&) = default;

  /// Class probabilities, shape (N, K, 1, 1).
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    Var<Scalar> h = x;
    switch (arch_) {
      case ClassifierArch::kSmallCnn:
        for (const auto& c : convs_) h = nn::max_pool2(nn::relu(c(h)));
        break;
      case ClassifierArch::kVggLike:
        for (std::size_t i = 0; i < convs_.size(); i += 2) {
          h = nn::relu(convs_[i + 1](nn::relu(convs_[i](h))));
          if (h.shape().h >= 2 && h.shape().w >= 2) h = nn::max_pool2(h);
        }
        break;
      case ClassifierArch::kResidual50:
      case ClassifierArch::kResidual101:
        h = nn::relu(stem_(h));
        for (const auto& b : blocks_) {
          Var<Scalar> r = b.expand(nn::relu(b.spatial(nn::relu(b.reduce(h)))));
          h = nn::relu(nn::add(r, b.has_projection ? b.projection(h) : h));
        }
        break;
    }
    Var<Scalar> pooled = nn::global_avg_pool(h);
    if (feature_scale_ > Scalar(0)) pooled = nn::scale(nn::normalize_samples(pooled), feature_scale_);
    return nn::softmax_channels(head_(pooled));
  }

  nn::ParameterList<Scalar>& parameters() { return params_; }
  const nn::ParameterList<Scalar>& parameters() const { return params_; }

 private:
  struct Bottleneck {
    nn::Conv2d<Scalar> reduce;
    nn::Conv2d<Scalar> spatial;
    nn::Conv2d<Scalar> expand;
    nn::Conv2d<Scalar> projection;
    bool has_projection = false;
  };

  void register_parameters() {
    if (arch_ == ClassifierArch::kResidual50 || arch_ == ClassifierArch::kResidual101) {
      stem_.register_into(params_);
    }
    for (const auto& c : convs_) c.register_into(params_);
    for (const auto& b : blocks_) {
      b.reduce.register_into(params_);
      b.spatial.register_into(params_);
      b.expand.register_into(params_);
      if (b.has_projection) b.projection.register_into(params_);
    }
    head_.register_into(params_);
  }

  ClassifierArch arch_;
  Scalar feature_scale_;
  nn::Conv2d<Scalar> stem_;
  std::vector<nn::Conv2d<Scalar>> convs_;
  std::vector<Bottleneck> blocks_;
  nn::Linear<Scalar> head_;
  Index features_ = 0;
  nn::ParameterList<Scalar> params_;
};

// ---------------------------------------------------------------------------
// Segmentation network (generator).

enum class SegmenterArch { kEncoderDecoder, kDilatedResidual };

SegmenterArch parse_segmenter_arch(std::string_view name);
std::string_view segmenter_arch_name(SegmenterArch a);

template <typename Scalar>
class SegmentationNet {
 public:
  SegmentationNet(SegmenterArch arch, int in_channels, int num_classes, std::uint64_t seed, int width = 16)
      : arch_(arch), num_classes_(num_classes) {
    Rng rng(seed);
    const nn::ConvOptions same{1, 1, 1};
    if (arch == SegmenterArch::kEncoderDecoder) {
      layers_.emplace_back(in_channels, width, 3, same, rng);         // enc1
      layers_.emplace_back(width, 2 * width, 3, nn::ConvOptions{2, 1, 1}, rng);  // enc2, /2
      layers_.emplace_back(2 * width, 2 * width, 3, same, rng);       // bottleneck
      layers_.emplace_back(3 * width, width, 3, same, rng);           // decoder after skip concat
      layers_.emplace_back(width, num_classes, 1, nn::ConvOptions{1, 0, 1}, rng);
    } else {
      layers_.emplace_back(in_channels, width, 3, same, rng);  // stem
      for (Index d : {1, 2, 4}) {
        layers_.emplace_back(width, width, 3, nn::ConvOptions{1, d, d}, rng);
        layers_.emplace_back(width, width, 3, same, rng, Scalar(0));
      }
      // Atrous pyramid: parallel dilated classifiers summed.
      for (Index d : {1, 2, 4, 8}) layers_.emplace_back(width, num_classes, 3, nn::ConvOptions{1, d, d}, rng);
    }
    for (const auto& l : layers_) l.register_into(params_);
  }

  SegmentationNet(const SegmentationNet&) = delete;
  SegmentationNet& operator=(const SegmentationNet&) = delete;
  SegmentationNet(SegmentationNet&&) = default;
  SegmentationNet& operator=(SegmentationNet&&) = default;

  int num_classes() const { return num_classes_; }
  SegmenterArch arch() const { return arch_; }

  /// Per-pixel class probabilities (N, K, H, W).
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    if (arch_ == SegmenterArch::kEncoderDecoder) {
      if (x.shape().h % 2 != 0 || x.shape().w % 2 != 0) {
        throw std::invalid_argument("encoder-decoder segmenter needs even image extents");
      }
      const Var<Scalar> e1 = nn::relu(layers_[0](x));
      const Var<Scalar> e2 = nn::relu(layers_[1](e1));
      const Var<Scalar> b = nn::relu(layers_[2](e2));
      const Var<Scalar> d = nn::relu(layers_[3](nn::concat_channels(nn::upsample_nearest(b, 2), e1)));
      return nn::softmax_channels(layers_[4](d));
    }
    Var<Scalar> h = nn::relu(layers_[0](x));
    for (std::size_t i = 1; i < 7; i += 2) {
      h = nn::relu(nn::add(h, layers_[i + 1](nn::relu(layers_[i](h)))));
    }
    Var<Scalar> logits = layers_[7](h);
    for (std::size_t i = 8; i < layers_.size(); ++i) logits = nn::add(logits, layers_[i](h));
    return nn::softmax_channels(logits);
  }

  nn::ParameterList<Scalar>& parameters() { return params_; }
  const nn::ParameterList<Scalar>& parameters() const { return params_; }

 private:
  SegmenterArch arch_;
  int num_classes_;
  std::vector<nn::Conv2d<Scalar>> layers_;
  nn::ParameterList<Scalar> params_;
};

// ---------------------------------------------------------------------------
// Image-wise discriminator over image (+) one-hot mask.

template <typename Scalar>
struct DiscriminatorOutput {
  Var<Scalar> confidence;  ///< (N, 1, 1, 1), in (0, 1)
  Var<Scalar> features;    ///< (N, F, 1, 1) pooled last-block activations
};

template <typename Scalar>
class Discriminator {
 public:
  Discriminator(int in_channels, std::array<int, 4> widths, std::uint64_t seed, double dropout = 0.5,
                double leak = 0.2)
      : dropout_(static_cast<Scalar>(dropout)), leak_(static_cast<Scalar>(leak)) {
    Rng rng(seed);
    Index in = in_channels;
    for (int w : widths) {
      convs_.emplace_back(in, w, 4, nn::ConvOptions{2, 1, 1}, rng);
      in = w;
    }
    head_ = nn::Linear<Scalar>(in, 1, rng);
    for (const auto& c : convs_) c.register_into(params_);
    head_.register_into(params_);
  }

  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;
  Discriminator(Discriminator&&) = default;
  Discriminator& operator=(Discriminator&&) = default;

  /// Dropout is applied only when `rng` is non-null.
  DiscriminatorOutput<Scalar> operator()(const Var<Scalar>& x, Rng* rng) const {
    Var<Scalar> h = x;
    for (const auto& c : convs_) {
      h = nn::leaky_relu(c(h), leak_);
      if (rng != nullptr) h = nn::dropout(h, dropout_, *rng);
    }
    DiscriminatorOutput<Scalar> out;
    out.features = nn::global_avg_pool(h);
    out.confidence = nn::sigmoid(head_(out.features));
    return out;
  }

  nn::ParameterList<Scalar>& parameters() { return params_; }
  const nn::ParameterList<Scalar>& parameters() const { return params_; }

 private:
  std::vector<nn::Conv2d<Scalar>> convs_;
  nn::Linear<Scalar> head_;
  Scalar dropout_;
  Scalar leak_;
  nn::ParameterList<Scalar> params_;
};

}  // namespace alseg

#endif  // ALSEG_NETWORKS_HPP
