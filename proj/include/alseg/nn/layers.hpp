#ifndef ALSEG_NN_LAYERS_HPP
#define ALSEG_NN_LAYERS_HPP

#include "alseg/nn/ops.hpp"

#include <cstdint>
#include <istream>
#include <ostream>
#include <random>

namespace alseg::nn {

/// Flat registry of trainable tensors owned by a model.
template <typename Scalar>
class ParameterList {
 public:
  void add(Var<Scalar> p) { params_.push_back(std::move(p)); }
  void extend(const ParameterList& other) {
    params_.insert(params_.end(), other.params_.begin(), other.params_.end());
  }

  std::vector<Var<Scalar>>& items() { return params_; }
  const std::vector<Var<Scalar>>& items() const { return params_; }

  Index count() const {
    Index total = 0;
    for (const auto& p : params_) total += p.value().size();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Concatenated parameter values, in registration order.
  Buffer<Scalar> flatten() const {
    Buffer<Scalar> out(count());
    Index off = 0;
    for (const auto& p : params_) {
      out.segment(off, p.value().size()) = p.value();
      off += p.value().size();
    }
    return out;
  }

  void assign(const Buffer<Scalar>& flat) {
    if (flat.size() != count()) throw std::invalid_argument("assign: parameter count mismatch");
    Index off = 0;
    for (auto& p : params_) {
      p.value() = flat.segment(off, p.value().size());
      off += p.value().size();
    }
  }

  Buffer<Scalar> flatten_grad() const {
    Buffer<Scalar> out = Buffer<Scalar>::Zero(count());
    Index off = 0;
    for (const auto& p : params_) {
      if (p.grad().size() == p.value().size()) out.segment(off, p.value().size()) = p.grad();
      off += p.value().size();
    }
    return out;
  }

 private:
  std::vector<Var<Scalar>> params_;
};

/// He-uniform weights for a layer with the given fan-in.
template <typename Scalar, typename Rng>
Buffer<Scalar> he_uniform(Index size, Index fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Buffer<Scalar> out(size);
  for (Index i = 0; i < size; ++i) out(i) = static_cast<Scalar>(dist(rng));
  return out;
}

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  template <typename Rng>
  Conv2d(Index in, Index out, Index kernel, ConvOptions opt, Rng& rng, Scalar init_gain = 1)
      : opt_(opt) {
    const Index fan_in = in * kernel * kernel;
    Buffer<Scalar> w = he_uniform<Scalar>(out * fan_in, fan_in, rng) * init_gain;
    weight_ = parameter<Scalar>(Shape{out, in, kernel, kernel}, std::move(w));
    bias_ = parameter<Scalar>(Shape{1, out, 1, 1}, Buffer<Scalar>::Zero(out));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight_, bias_, opt_); }

  void register_into(ParameterList<Scalar>& list) const {
    list.add(weight_);
    list.add(bias_);
  }
  Index out_channels() const { return weight_.shape().n; }

 private:
  Var<Scalar> weight_;
  Var<Scalar> bias_;
  ConvOptions opt_;
};

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  template <typename Rng>
  Linear(Index in, Index out, Rng& rng, Scalar init_gain = Scalar(1)) {
    const double bound = static_cast<double>(init_gain) / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Buffer<Scalar> w(out * in);
    for (Index i = 0; i < w.size(); ++i) w(i) = static_cast<Scalar>(dist(rng));
    weight_ = parameter<Scalar>(Shape{out, in, 1, 1}, std::move(w));
    bias_ = parameter<Scalar>(Shape{1, out, 1, 1}, Buffer<Scalar>::Zero(out));
  }

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight_, bias_); }

  void register_into(ParameterList<Scalar>& list) const {
    list.add(weight_);
    list.add(bias_);
  }

 private:
  Var<Scalar> weight_;
  Var<Scalar> bias_;
};

// Raw little-endian-native blobs; checkpoints are only read back on the same platform.
template <typename Scalar>
void write_buffer(std::ostream& os, const Buffer<Scalar>& b) {
  const std::int64_t n = b.size();
  os.write(reinterpret_cast<const char*>(&n), sizeof n);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(n * sizeof(Scalar)));
}

template <typename Scalar>
Buffer<Scalar> read_buffer(std::istream& is) {
  std::int64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!is || n < 0) throw std::runtime_error("read_buffer: truncated stream");
  Buffer<Scalar> b(n);
  is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(n * sizeof(Scalar)));
  if (!is) throw std::runtime_error("read_buffer: truncated stream");
  return b;
}

}  // namespace alseg::nn

#endif  // ALSEG_NN_LAYERS_HPP
