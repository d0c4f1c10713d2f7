#ifndef ALSEG_NN_OPTIM_HPP
#define ALSEG_NN_OPTIM_HPP

#include "alseg/nn/layers.hpp"

#include <cstdint>

namespace alseg::nn {

/// SGD with classical momentum and L2 weight decay folded into the gradient.
template <typename Scalar>
class Sgd {
 public:
  struct Options {
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 0.0;
  };

  Sgd(ParameterList<Scalar> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_.items()) velocity_.push_back(Buffer<Scalar>::Zero(p.value().size()));
  }

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }

  void step() {
    const auto lr = static_cast<Scalar>(opt_.lr);
    const auto mu = static_cast<Scalar>(opt_.momentum);
    const auto wd = static_cast<Scalar>(opt_.weight_decay);
    auto& ps = params_.items();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      if (p.grad().size() != p.value().size()) continue;
      Buffer<Scalar> g = p.grad() + wd * p.value();
      velocity_[i] = mu * velocity_[i] + g;
      p.value() -= lr * velocity_[i];
    }
  }

  void zero_grad() { params_.zero_grad(); }

  void save(std::ostream& os) const {
    for (const auto& v : velocity_) write_buffer(os, v);
  }
  void load(std::istream& is) {
    for (auto& v : velocity_) v = read_buffer<Scalar>(is);
  }

 private:
  ParameterList<Scalar> params_;
  Options opt_;
  std::vector<Buffer<Scalar>> velocity_;
};

/// Adam with bias correction.
template <typename Scalar>
class Adam {
 public:
  struct Options {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(ParameterList<Scalar> params, Options opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_.items()) {
      m_.push_back(Buffer<Scalar>::Zero(p.value().size()));
      v_.push_back(Buffer<Scalar>::Zero(p.value().size()));
    }
  }

  void set_lr(double lr) { opt_.lr = lr; }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(opt_.beta1);
    const auto b2 = static_cast<Scalar>(opt_.beta2);
    const auto step = static_cast<Scalar>(opt_.lr / c1);
    const auto root_c2 = static_cast<Scalar>(std::sqrt(c2));
    const auto eps = static_cast<Scalar>(opt_.eps);
    auto& ps = params_.items();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      if (p.grad().size() != p.value().size()) continue;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad();
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad().square();
      p.value() -= step * m_[i] / (v_[i].sqrt() / root_c2 + eps);
    }
  }

  void zero_grad() { params_.zero_grad(); }

  void save(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(&t_), sizeof t_);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      write_buffer(os, m_[i]);
      write_buffer(os, v_[i]);
    }
  }
  void load(std::istream& is) {
    is.read(reinterpret_cast<char*>(&t_), sizeof t_);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      m_[i] = read_buffer<Scalar>(is);
      v_[i] = read_buffer<Scalar>(is);
    }
  }

 private:
  ParameterList<Scalar> params_;
  Options opt_;
  std::vector<Buffer<Scalar>> m_;
  std::vector<Buffer<Scalar>> v_;
  std::int64_t t_ = 0;
};

}  // namespace alseg::nn

#endif  // ALSEG_NN_OPTIM_HPP
