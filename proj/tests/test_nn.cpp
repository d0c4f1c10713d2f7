#include "alseg/nn/optim.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace alseg;
using namespace alseg::nn;
using V = Var<double>;

namespace {

Buffer<double> random_buffer(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Buffer<double> b(n);
  for (Index i = 0; i < n; ++i) b(i) = d(rng);
  return b;
}

V random_param(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return parameter<double>(s, random_buffer(s.size(), rng, lo, hi));
}

// Collapses any tensor to a scalar through a fixed random projection per sample.
struct Projector {
  explicit Projector(std::uint64_t seed) : rng(seed) {}
  V operator()(const V& x) {
    if (!w.defined() || w.shape().c != x.shape().per_sample()) {
      w = constant<double>(Shape{1, x.shape().per_sample(), 1, 1}, random_buffer(x.shape().per_sample(), rng));
    }
    return mean_all(linear(x, w, V()));
  }
  std::mt19937_64 rng;
  V w;
};

// Central differences against the tape, for every element of every input.
template <typename F>
void expect_gradients(F f, std::vector<V> inputs, double h = 1e-6, double tol = 1e-6) {
  for (auto& in : inputs) in.zero_grad();
  const V loss = f();
  backward(loss);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    V& in = inputs[k];
    const Buffer<double> analytic = in.grad();
    for (Index i = 0; i < in.value().size(); ++i) {
      const double keep = in.value()(i);
      in.value()(i) = keep + h;
      const double up = f().item();
      in.value()(i) = keep - h;
      const double down = f().item();
      in.value()(i) = keep;
      const double numeric = (up - down) / (2 * h);
      ASSERT_NEAR(analytic(i), numeric, tol * std::max(1.0, std::abs(numeric)))
          << "input " << k << " element " << i;
    }
  }
}

}  // namespace

TEST(Gradients, Conv2dStridePaddingDilation) {
  std::mt19937_64 rng(1);
  for (const ConvOptions o : {ConvOptions{1, 0, 1}, ConvOptions{2, 1, 1}, ConvOptions{1, 2, 2}}) {
    V x = random_param(Shape{2, 3, 6, 5}, rng);
    V w = random_param(Shape{4, 3, 3, 3}, rng);
    V b = random_param(Shape{1, 4, 1, 1}, rng);
    Projector p(2);
    expect_gradients([&] { return p(conv2d(x, w, b, o)); }, {x, w, b});
  }
}

TEST(Gradients, LinearAndActivations) {
  std::mt19937_64 rng(2);
  V x = random_param(Shape{3, 5, 1, 1}, rng);
  V w = random_param(Shape{4, 5, 1, 1}, rng);
  V b = random_param(Shape{1, 4, 1, 1}, rng);
  Projector p(3);
  expect_gradients([&] { return p(sigmoid(linear(x, w, b))); }, {x, w, b});
  expect_gradients([&] { return p(leaky_relu(linear(x, w, b), 0.2)); }, {x, w, b});
  expect_gradients([&] { return p(relu(linear(x, w, b))); }, {x, w, b});
}

TEST(Gradients, LogOneMinusScaleAddSub) {
  std::mt19937_64 rng(3);
  V a = random_param(Shape{2, 3, 2, 2}, rng, 0.1, 0.9);
  V b = random_param(Shape{2, 3, 2, 2}, rng, 0.1, 0.9);
  Projector p(4);
  expect_gradients([&] { return p(log_clamped(one_minus(a), 1e-7)); }, {a});
  expect_gradients([&] { return p(sub(scale(a, 2.5), add(a, b))); }, {a, b});
}

TEST(Gradients, Reductions) {
  std::mt19937_64 rng(4);
  V x = random_param(Shape{3, 4, 3, 2}, rng);
  Projector p(5);
  expect_gradients([&] { return mean_all(x); }, {x});
  expect_gradients([&] { return p(mean_batch(x)); }, {x});
  expect_gradients([&] { return p(global_avg_pool(x)); }, {x});
  expect_gradients([&] { return norm(mean_batch(x)); }, {x});
  expect_gradients([&] { return norm(mean_batch(x), true); }, {x});
  expect_gradients([&] { return p(normalize_samples(x)); }, {x});
}

TEST(Gradients, SoftmaxUpsampleConcatSelect) {
  std::mt19937_64 rng(5);
  V x = random_param(Shape{3, 4, 2, 3}, rng);
  V y = random_param(Shape{3, 2, 2, 3}, rng);
  Projector p(6);
  expect_gradients([&] { return p(softmax_channels(x)); }, {x});
  expect_gradients([&] { return p(upsample_nearest(x, 2)); }, {x});
  expect_gradients([&] { return p(concat_channels(x, y)); }, {x, y});
  const std::vector<Index> rows{2, 0};
  expect_gradients([&] { return p(select_samples(x, std::span<const Index>(rows))); }, {x});
}

TEST(Gradients, PixelNllThroughSoftmax) {
  std::mt19937_64 rng(6);
  V x = random_param(Shape{2, 3, 2, 2}, rng);
  const std::vector<int> targets{0, 1, 2, 255, 2, 2, 1, 0};
  expect_gradients([&] { return pixel_nll(softmax_channels(x), std::span<const int>(targets), 255); }, {x});
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(7);
  V x = constant<double>(Shape{2, 5, 3, 3}, random_buffer(90, rng, -30, 30));
  const V s = softmax_channels(x);
  for (Index n = 0; n < 2; ++n) {
    for (Index y = 0; y < 3; ++y) {
      for (Index xx = 0; xx < 3; ++xx) {
        double sum = 0;
        for (Index c = 0; c < 5; ++c) sum += s.at(n, c, y, xx);
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
    }
  }
}

TEST(Ops, ConvMatchesDirectSum) {
  std::mt19937_64 rng(8);
  V x = constant<double>(Shape{1, 2, 5, 5}, random_buffer(50, rng));
  V w = constant<double>(Shape{3, 2, 3, 3}, random_buffer(54, rng));
  const ConvOptions o{2, 1, 1};
  const V y = conv2d(x, w, V(), o);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (Index oc = 0; oc < 3; ++oc) {
    for (Index oy = 0; oy < 3; ++oy) {
      for (Index ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (Index ic = 0; ic < 2; ++ic) {
          for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
              const Index iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x.at(0, ic, iy, ix) * w.value()(((oc * 2 + ic) * 3 + ky) * 3 + kx);
            }
          }
        }
        EXPECT_NEAR(y.at(0, oc, oy, ox), acc, 1e-12);
      }
    }
  }
}

TEST(Ops, NoGradGuardStopsRecording) {
  std::mt19937_64 rng(9);
  V x = random_param(Shape{1, 2, 1, 1}, rng);
  NoGradGuard guard;
  EXPECT_FALSE(scale(x, 2.0).requires_grad());
}

TEST(Optim, SgdMatchesHandComputedSteps) {
  V p = parameter<double>(Shape{1, 2, 1, 1}, Buffer<double>::Constant(2, 1.0));
  ParameterList<double> list;
  list.add(p);
  Sgd<double> opt(list, {0.1, 0.9, 0.01});
  double value = 1.0, velocity = 0.0;
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    backward(mean_all(scale(p, 4.0)));  // d/dp = 2 per element
    opt.step();
    velocity = 0.9 * velocity + (2.0 + 0.01 * value);
    value -= 0.1 * velocity;
    EXPECT_NEAR(p.value()(0), value, 1e-14);
  }
}

TEST(Optim, AdamFirstStepIsLrTimesSign) {
  V p = parameter<double>(Shape{1, 2, 1, 1}, Buffer<double>::Zero(2));
  ParameterList<double> list;
  list.add(p);
  Adam<double> opt(list, {0.01, 0.9, 0.999, 1e-12});
  p.grad() << 3.0, -0.5;
  opt.step();
  EXPECT_NEAR(p.value()(0), -0.01, 1e-9);
  EXPECT_NEAR(p.value()(1), 0.01, 1e-9);
}
