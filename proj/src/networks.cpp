#include "alseg/networks.hpp"

#include <stdexcept>
#include <string>

namespace alseg {

ClassifierArch parse_classifier_arch(std::string_view name) {
  if (name == "small_cnn") return ClassifierArch::kSmallCnn;
  if (name == "residual_50") return ClassifierArch::kResidual50;
  if (name == "residual_101") return ClassifierArch::kResidual101;
  if (name == "vgg_like") return ClassifierArch::kVggLike;
  throw std::invalid_argument("unknown learner architecture '" + std::string(name) + "'");
}

std::string_view classifier_arch_name(ClassifierArch a) {
  switch (a) {
    case ClassifierArch::kSmallCnn: return "small_cnn";
    case ClassifierArch::kResidual50: return "residual_50";
    case ClassifierArch::kResidual101: return "residual_101";
    case ClassifierArch::kVggLike: return "vgg_like";
  }
  return "small_cnn";
}

SegmenterArch parse_segmenter_arch(std::string_view name) {
  if (name == "encoder_decoder") return SegmenterArch::kEncoderDecoder;
  if (name == "dilated_residual") return SegmenterArch::kDilatedResidual;
  throw std::invalid_argument("unknown segmenter architecture '" + std::string(name) + "'");
}

std::string_view segmenter_arch_name(SegmenterArch a) {
  return a == SegmenterArch::kDilatedResidual ? "dilated_residual" : "encoder_decoder";
}

}  // namespace alseg
