#ifndef ALSEG_S4GAN_HPP
#define ALSEG_S4GAN_HPP

#include "alseg/networks.hpp"

#include <algorithm>

namespace alseg {

enum class FeatureNorm { kL2, kL1 };

/// Labeled pairs stacked as tensors.
template <typename Scalar>
struct LabeledTensors {
  Var<Scalar> images;    ///< (N, C, H, W)
  Var<Scalar> one_hot;   ///< (N, K, H, W)
  std::vector<int> targets;  ///< N*H*W class indices (IGNORE allowed)

  Index size() const { return images.defined() ? images.shape().n : 0; }
};

template <typename Scalar>
LabeledTensors<Scalar> make_labeled_tensors(std::span<const ImageF* const> images,
                                            std::span<const PixelMask* const> masks, int num_classes) {
  if (images.size() != masks.size()) throw std::invalid_argument("labeled batch: images and masks misaligned");
  LabeledTensors<Scalar> t;
  t.images = image_batch<Scalar>(images);
  t.one_hot = one_hot_batch<Scalar>(masks, num_classes);
  for (const PixelMask* m : masks) t.targets.insert(t.targets.end(), m->classes().begin(), m->classes().end());
  return t;
}

/// Pixel-wise cross-entropy: mean of -ln p[true class] over non-IGNORE pixels.
template <typename Scalar>
Var<Scalar> cross_entropy_loss(const Var<Scalar>& probs, std::span<const int> targets) {
  return nn::pixel_nll(probs, targets, kIgnore);
}

template <typename Scalar>
Var<Scalar> cross_entropy_loss(const Var<Scalar>& probs, const PixelMask& mask) {
  return cross_entropy_loss(probs, mask.classes());
}

/// Distance between batch means of discriminator features on real and generated pairs.
template <typename Scalar>
Var<Scalar> feature_matching_from(const Var<Scalar>& real_features, const Var<Scalar>& fake_features,
                                  FeatureNorm norm = FeatureNorm::kL2) {
  if (real_features.shape().n < 1 || fake_features.shape().n < 1) {
    throw std::invalid_argument("feature_matching_loss: empty batch");
  }
  return nn::norm(nn::sub(nn::mean_batch(real_features), nn::mean_batch(fake_features)),
                  norm == FeatureNorm::kL1);
}

/// Feature matching with the segmenter in the loop; only S receives a meaningful gradient.
template <typename Scalar>
Var<Scalar> feature_matching_loss(const Discriminator<Scalar>& d, const LabeledTensors<Scalar>& labeled,
                                  const Var<Scalar>& unlabeled_images, const SegmentationNet<Scalar>& s,
                                  FeatureNorm norm = FeatureNorm::kL2, Rng* dropout_rng = nullptr) {
  if (labeled.size() < 1 || !unlabeled_images.defined() || unlabeled_images.shape().n < 1) {
    throw std::invalid_argument("feature_matching_loss: empty batch");
  }
  const auto real = d(nn::concat_channels(labeled.images, labeled.one_hot), dropout_rng);
  const auto fake = d(nn::concat_channels(unlabeled_images, s(unlabeled_images)), dropout_rng);
  return feature_matching_from(real.features, fake.features, norm);
}

/// Self-training term for one generated map: CE against its own argmax when the
/// discriminator confidence reaches tau, exactly zero otherwise.
template <typename Scalar>
Var<Scalar> self_training_loss(const Var<Scalar>& probs, double d_conf, double tau) {
  if (d_conf < tau) return nn::constant<Scalar>(Shape{}, Scalar(0));
  const std::vector<int> pseudo = argmax_channels(probs);
  return nn::pixel_nll(probs, std::span<const int>(pseudo), kIgnore);
}

/// L_ce + lambda_fm * L_fm + lambda_st * L_st.
inline double generator_loss(double ce, double fm, double st, double lambda_fm, double lambda_st) {
  return ce + lambda_fm * fm + lambda_st * st;
}

template <typename Scalar>
Var<Scalar> generator_loss(const Var<Scalar>& ce, const Var<Scalar>& fm, const Var<Scalar>& st,
                           double lambda_fm, double lambda_st) {
  return nn::add(ce, nn::add(nn::scale(fm, static_cast<Scalar>(lambda_fm)),
                             nn::scale(st, static_cast<Scalar>(lambda_st))));
}

inline constexpr double kDiscriminatorEps = 1e-7;

/// -[mean ln D(real) + mean ln(1 - D(fake))]; an undefined `fake` drops the second term.
template <typename Scalar>
Var<Scalar> discriminator_loss_from(const Var<Scalar>& real_conf, const Var<Scalar>& fake_conf) {
  const auto eps = static_cast<Scalar>(kDiscriminatorEps);
  Var<Scalar> sum = nn::mean_all(nn::log_clamped(real_conf, eps));
  if (fake_conf.defined() && fake_conf.shape().n > 0) {
    sum = nn::add(sum, nn::mean_all(nn::log_clamped(nn::one_minus(fake_conf), eps)));
  }
  return nn::scale(sum, Scalar(-1));
}

/// Discriminator objective with the segmenter output held constant.
template <typename Scalar>
Var<Scalar> discriminator_loss(const Discriminator<Scalar>& d, const LabeledTensors<Scalar>& labeled,
                               const Var<Scalar>& unlabeled_images, const SegmentationNet<Scalar>& s,
                               Rng* dropout_rng = nullptr) {
  if (labeled.size() < 1 || !unlabeled_images.defined() || unlabeled_images.shape().n < 1) {
    throw std::invalid_argument("discriminator_loss: empty batch");
  }
  Var<Scalar> generated;
  {
    nn::NoGradGuard no_grad;
    generated = s(unlabeled_images);
  }
  const auto real = d(nn::concat_channels(labeled.images, labeled.one_hot), dropout_rng);
  const auto fake = d(nn::concat_channels(unlabeled_images, nn::detach(generated)), dropout_rng);
  return discriminator_loss_from(real.confidence, fake.confidence);
}

struct GanLossWeights {
  double lambda_fm = 0.1;
  double lambda_st = 1.0;
  double tau = 0.6;
  FeatureNorm norm = FeatureNorm::kL2;
};

/// Everything the generator update needs from one forward pass.
template <typename Scalar>
struct GeneratorTerms {
  Var<Scalar> ce;
  Var<Scalar> fm;
  Var<Scalar> st;
  Var<Scalar> total;
  Var<Scalar> unlabeled_probs;          ///< S(x_U), on the tape
  std::vector<double> confidences;      ///< D(x_U (+) S(x_U)) per unlabeled sample
  std::vector<Index> accepted;          ///< rows with confidence >= tau
  std::vector<int> pseudo_labels;       ///< argmax of S(x_U), all rows
  Var<Scalar> real_confidence;          ///< D on labeled pairs
};

/// Generator objective. `extra` holds previously accepted pseudo-label pairs routed
/// through the self-training term; it may be empty.
template <typename Scalar>
GeneratorTerms<Scalar> generator_objective(const SegmentationNet<Scalar>& s, const Discriminator<Scalar>& d,
                                           const LabeledTensors<Scalar>& labeled,
                                           const Var<Scalar>& unlabeled_images,
                                           const LabeledTensors<Scalar>& extra, const GanLossWeights& w,
                                           Rng* dropout_rng) {
  if (labeled.size() < 1) throw std::invalid_argument("generator_objective: no labeled samples");
  GeneratorTerms<Scalar> t;
  t.ce = cross_entropy_loss(s(labeled.images), std::span<const int>(labeled.targets));
  const Var<Scalar> zero = nn::constant<Scalar>(Shape{}, Scalar(0));
  const bool has_unlabeled = unlabeled_images.defined() && unlabeled_images.shape().n > 0;

  std::vector<Var<Scalar>> st_terms;
  std::vector<Scalar> st_counts;
  if (has_unlabeled) {
    const auto real = d(nn::concat_channels(labeled.images, labeled.one_hot), dropout_rng);
    t.real_confidence = real.confidence;
    t.unlabeled_probs = s(unlabeled_images);
    const auto fake = d(nn::concat_channels(unlabeled_images, t.unlabeled_probs), dropout_rng);
    t.fm = feature_matching_from(real.features, fake.features, w.norm);

    t.pseudo_labels = argmax_channels(t.unlabeled_probs);
    const Index plane = t.unlabeled_probs.shape().plane();
    std::vector<int> accepted_targets;
    for (Index i = 0; i < fake.confidence.shape().n; ++i) {
      const double c = static_cast<double>(fake.confidence.value()(i));
      t.confidences.push_back(c);
      if (c >= w.tau) {
        t.accepted.push_back(i);
        const auto first = t.pseudo_labels.begin() + i * plane;
        accepted_targets.insert(accepted_targets.end(), first, first + plane);
      }
    }
    if (!t.accepted.empty()) {
      st_terms.push_back(nn::pixel_nll(nn::select_samples(t.unlabeled_probs, std::span<const Index>(t.accepted)),
                                       std::span<const int>(accepted_targets), kIgnore));
      st_counts.push_back(static_cast<Scalar>(t.accepted.size()));
    }
  } else {
    t.fm = zero;
  }
  if (extra.size() > 0) {
    st_terms.push_back(cross_entropy_loss(s(extra.images), std::span<const int>(extra.targets)));
    st_counts.push_back(static_cast<Scalar>(extra.size()));
  }

  if (st_terms.empty()) {
    t.st = zero;
  } else {
    Scalar total = 0;
    for (Scalar c : st_counts) total += c;
    t.st = nn::scale(st_terms[0], st_counts[0] / total);
    for (std::size_t i = 1; i < st_terms.size(); ++i) {
      t.st = nn::add(t.st, nn::scale(st_terms[i], st_counts[i] / total));
    }
  }
  t.total = generator_loss(t.ce, t.fm, t.st, w.lambda_fm, w.lambda_st);
  return t;
}

}  // namespace alseg

#endif  // ALSEG_S4GAN_HPP
