#ifndef ALSEG_NN_OPS_HPP
#define ALSEG_NN_OPS_HPP

#include "alseg/nn/var.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>

namespace alseg::nn {

struct ConvOptions {
  Index stride = 1;
  Index padding = 0;
  Index dilation = 1;
};

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                                to_string(b));
  }
}

inline Index conv_out_extent(Index in, Index k, const ConvOptions& o) {
  return (in + 2 * o.padding - o.dilation * (k - 1) - 1) / o.stride + 1;
}

// Patch matrix of one sample, laid out (out_h*out_w) x (C*kh*kw), column-major.
template <typename Scalar>
void im2col(const Scalar* x, Index c, Index h, Index w, Index kh, Index kw, Index oh, Index ow,
            const ConvOptions& o, Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& col) {
  col.resize(oh * ow, c * kh * kw);
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar* plane = x + ch * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        Scalar* dst = col.data() + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * o.stride - o.padding + ky * o.dilation;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * o.stride - o.padding + kx * o.dilation;
            dst[oy * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& col, Index c, Index h,
                Index w, Index kh, Index kw, Index oh, Index ow, const ConvOptions& o, Scalar* gx) {
  for (Index ch = 0; ch < c; ++ch) {
    Scalar* plane = gx + ch * h * w;
    for (Index ky = 0; ky < kh; ++ky) {
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* src = col.data() + ((ch * kh + ky) * kw + kx) * oh * ow;
        for (Index oy = 0; oy < oh; ++oy) {
          const Index iy = oy * o.stride - o.padding + ky * o.dilation;
          if (iy < 0 || iy >= h) continue;
          for (Index ox = 0; ox < ow; ++ox) {
            const Index ix = ox * o.stride - o.padding + kx * o.dilation;
            if (ix >= 0 && ix < w) plane[iy * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> unary(const Var<Scalar>& x, Fwd fwd, Deriv deriv) {
  Buffer<Scalar> out = x.value().unaryExpr(fwd);
  auto xp = x.ptr();
  return make_result<Scalar>(x.shape(), std::move(out), {xp},
                             [xn = xp.get(), deriv](Node<Scalar>& self) {
                               if (!xn->requires_grad) return;
                               auto g = xn->grad_map();
                               for (Index i = 0; i < g.size(); ++i) {
                                 g(i) += self.grad(i) * deriv(xn->value(i), self.value(i));
                               }
                             });
}

}  // namespace detail

/// 2-D convolution. weight is (out, in, kh, kw); bias may be undefined.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const ConvOptions& opt = {}) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != xs.c) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(xs.c) +
                                " channels, kernel expects " + std::to_string(ws.c));
  }
  const Index oh = detail::conv_out_extent(xs.h, ws.h, opt);
  const Index ow = detail::conv_out_extent(xs.w, ws.w, opt);
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: input smaller than kernel footprint");
  const Index patch = ws.c * ws.h * ws.w;
  const Index out_ch = ws.n;
  const Shape os{xs.n, out_ch, oh, ow};

  Buffer<Scalar> out(os.size());
  Eigen::Map<const Mat> wmat(weight.value().data(), patch, out_ch);
  Mat col;
  for (Index n = 0; n < xs.n; ++n) {
    detail::im2col(x.value().data() + n * xs.per_sample(), xs.c, xs.h, xs.w, ws.h, ws.w, oh, ow,
                   opt, col);
    Eigen::Map<Mat> o(out.data() + n * os.per_sample(), oh * ow, out_ch);
    o.noalias() = col * wmat;
    if (bias.defined()) o.rowwise() += bias.value().matrix().transpose();
  }

  std::vector<std::shared_ptr<Node<Scalar>>> parents{x.ptr(), weight.ptr()};
  if (bias.defined()) parents.push_back(bias.ptr());
  return detail::make_result<Scalar>(
      os, std::move(out), std::move(parents),
      [xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr, xs, ws, os,
       oh, ow, patch, out_ch, opt](Node<Scalar>& self) {
        Eigen::Map<const Mat> wmat(wn->value.data(), patch, out_ch);
        Mat col;
        Mat gcol;
        for (Index n = 0; n < xs.n; ++n) {
          Eigen::Map<const Mat> g(self.grad.data() + n * os.per_sample(), oh * ow, out_ch);
          if (wn->requires_grad || xn->requires_grad) {
            detail::im2col(xn->value.data() + n * xs.per_sample(), xs.c, xs.h, xs.w, ws.h, ws.w,
                           oh, ow, opt, col);
          }
          if (wn->requires_grad) {
            Eigen::Map<Mat> gw(wn->grad_data(), patch, out_ch);
            gw.noalias() += col.transpose() * g;
          }
          if (bn && bn->requires_grad) {
            bn->grad_map() += g.colwise().sum().transpose().array();
          }
          if (xn->requires_grad) {
            gcol.noalias() = g * wmat.transpose();
            detail::col2im_add(gcol, xs.c, xs.h, xs.w, ws.h, ws.w, oh, ow, opt,
                               xn->grad_data() + n * xs.per_sample());
          }
        }
      });
}

/// Fully connected map of each flattened sample. weight is (out, in).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Shape xs = x.shape();
  const Index in = xs.per_sample();
  const Index out_dim = weight.shape().n;
  if (weight.shape().c != in) {
    throw std::invalid_argument("linear: input width " + std::to_string(in) + " vs weight " +
                                std::to_string(weight.shape().c));
  }
  const Shape os{xs.n, out_dim, 1, 1};
  Buffer<Scalar> out(os.size());
  Eigen::Map<const Mat> xm(x.value().data(), in, xs.n);
  Eigen::Map<const Mat> wt(weight.value().data(), in, out_dim);
  Eigen::Map<Mat> om(out.data(), out_dim, xs.n);
  om.noalias() = wt.transpose() * xm;
  if (bias.defined()) om.colwise() += bias.value().matrix();

  std::vector<std::shared_ptr<Node<Scalar>>> parents{x.ptr(), weight.ptr()};
  if (bias.defined()) parents.push_back(bias.ptr());
  return detail::make_result<Scalar>(
      os, std::move(out), std::move(parents),
      [xn = x.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr, in, out_dim,
       batch = xs.n](Node<Scalar>& self) {
        Eigen::Map<const Mat> g(self.grad.data(), out_dim, batch);
        Eigen::Map<const Mat> xm(xn->value.data(), in, batch);
        Eigen::Map<const Mat> wt(wn->value.data(), in, out_dim);
        if (wn->requires_grad) {
          Eigen::Map<Mat>(wn->grad_data(), in, out_dim).noalias() += xm * g.transpose();
        }
        if (bn && bn->requires_grad) bn->grad_map() += g.rowwise().sum().array();
        if (xn->requires_grad) Eigen::Map<Mat>(xn->grad_data(), in, batch).noalias() += wt * g;
      });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope) {
  return detail::unary<Scalar>(
      x, [slope](Scalar v) { return v > Scalar(0) ? v : slope * v; },
      [slope](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : slope; });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      x,
      [](Scalar v) {
        return v >= Scalar(0) ? Scalar(1) / (Scalar(1) + std::exp(-v))
                              : std::exp(v) / (Scalar(1) + std::exp(v));
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

/// ln(clamp(x, eps, 1 - eps)); zero gradient where the clamp is active.
template <typename Scalar>
Var<Scalar> log_clamped(const Var<Scalar>& x, Scalar eps) {
  const Scalar lo = eps;
  const Scalar hi = Scalar(1) - eps;
  return detail::unary<Scalar>(
      x, [lo, hi](Scalar v) { return std::log(std::clamp(v, lo, hi)); },
      [lo, hi](Scalar v, Scalar) { return (v < lo || v > hi) ? Scalar(0) : Scalar(1) / v; });
}

template <typename Scalar>
Var<Scalar> one_minus(const Var<Scalar>& x) {
  return detail::unary<Scalar>(
      x, [](Scalar v) { return Scalar(1) - v; }, [](Scalar, Scalar) { return Scalar(-1); });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar s) {
  return detail::unary<Scalar>(
      x, [s](Scalar v) { return s * v; }, [s](Scalar, Scalar) { return s; });
}

/// Inverted dropout; the mask is drawn from `rng`.
template <typename Scalar, typename Rng>
Var<Scalar> dropout(const Var<Scalar>& x, Scalar p, Rng& rng) {
  if (p <= Scalar(0)) return x;
  if (p >= Scalar(1)) throw std::invalid_argument("dropout: probability must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const Scalar gain = Scalar(1) / (Scalar(1) - p);
  Buffer<Scalar> mask(x.value().size());
  for (Index i = 0; i < mask.size(); ++i) mask(i) = keep(rng) ? gain : Scalar(0);
  Buffer<Scalar> out = x.value() * mask;
  return detail::make_result<Scalar>(x.shape(), std::move(out), {x.ptr()},
                                     [xn = x.node(), mask = std::move(mask)](Node<Scalar>& self) {
                                       xn->grad_map() += self.grad * mask;
                                     });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Buffer<Scalar> out = a.value() + b.value();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a.ptr(), b.ptr()},
                                     [an = a.node(), bn = b.node()](Node<Scalar>& self) {
                                       if (an->requires_grad) an->grad_map() += self.grad;
                                       if (bn->requires_grad) bn->grad_map() += self.grad;
                                     });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Buffer<Scalar> out = a.value() - b.value();
  return detail::make_result<Scalar>(a.shape(), std::move(out), {a.ptr(), b.ptr()},
                                     [an = a.node(), bn = b.node()](Node<Scalar>& self) {
                                       if (an->requires_grad) an->grad_map() += self.grad;
                                       if (bn->requires_grad) bn->grad_map() -= self.grad;
                                     });
}

template <typename Scalar>
Var<Scalar> mean_all(const Var<Scalar>& x) {
  const Index count = x.value().size();
  if (count == 0) throw std::invalid_argument("mean_all: empty tensor");
  Buffer<Scalar> out(1);
  out(0) = x.value().sum() / Scalar(count);
  return detail::make_result<Scalar>(Shape{}, std::move(out), {x.ptr()},
                                     [xn = x.node(), count](Node<Scalar>& self) {
                                       xn->grad_map() += self.grad(0) / Scalar(count);
                                     });
}

/// Mean over the batch axis: (N,C,H,W) -> (1,C,H,W).
template <typename Scalar>
Var<Scalar> mean_batch(const Var<Scalar>& x) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Shape xs = x.shape();
  if (xs.n == 0) throw std::invalid_argument("mean_batch: empty batch");
  const Index f = xs.per_sample();
  Buffer<Scalar> out = Eigen::Map<const Mat>(x.value().data(), f, xs.n).rowwise().mean().array();
  return detail::make_result<Scalar>(
      Shape{1, xs.c, xs.h, xs.w}, std::move(out), {x.ptr()},
      [xn = x.node(), f, batch = xs.n](Node<Scalar>& self) {
        Eigen::Map<Mat> g(xn->grad_data(), f, batch);
        g.colwise() += (self.grad / Scalar(batch)).matrix();
      });
}

/// Euclidean (or L1) norm of all entries as a scalar.
template <typename Scalar>
Var<Scalar> norm(const Var<Scalar>& x, bool l1 = false) {
  Buffer<Scalar> out(1);
  out(0) = l1 ? x.value().abs().sum() : std::sqrt(x.value().square().sum());
  const Scalar n = out(0);
  return detail::make_result<Scalar>(Shape{}, std::move(out), {x.ptr()},
                                     [xn = x.node(), n, l1](Node<Scalar>& self) {
                                       if (l1) {
                                         xn->grad_map() += self.grad(0) * xn->value.sign();
                                       } else if (n > Scalar(0)) {
                                         xn->grad_map() += self.grad(0) * xn->value / n;
                                       }
                                     });
}

/// Softmax across channels independently at every pixel.
template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& x) {
  const Shape s = x.shape();
  const Index hw = s.plane();
  Buffer<Scalar> out(s.size());
  for (Index n = 0; n < s.n; ++n) {
    const Scalar* in = x.value().data() + n * s.per_sample();
    Scalar* o = out.data() + n * s.per_sample();
    for (Index p = 0; p < hw; ++p) {
      Scalar m = in[p];
      for (Index c = 1; c < s.c; ++c) m = std::max(m, in[c * hw + p]);
      Scalar z = 0;
      for (Index c = 0; c < s.c; ++c) {
        o[c * hw + p] = std::exp(in[c * hw + p] - m);
        z += o[c * hw + p];
      }
      for (Index c = 0; c < s.c; ++c) o[c * hw + p] /= z;
    }
  }
  return detail::make_result<Scalar>(s, std::move(out), {x.ptr()},
                                     [xn = x.node(), s, hw](Node<Scalar>& self) {
                                       Scalar* gx = xn->grad_data();
                                       for (Index n = 0; n < s.n; ++n) {
                                         const Index base = n * s.per_sample();
                                         for (Index p = 0; p < hw; ++p) {
                                           Scalar dot = 0;
                                           for (Index c = 0; c < s.c; ++c) {
                                             const Index i = base + c * hw + p;
                                             dot += self.grad(i) * self.value(i);
                                           }
                                           for (Index c = 0; c < s.c; ++c) {
                                             const Index i = base + c * hw + p;
                                             gx[i] += self.value(i) * (self.grad(i) - dot);
                                           }
                                         }
                                       }
                                     });
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Var<Scalar> upsample_nearest(const Var<Scalar>& x, Index factor) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h * factor, s.w * factor};
  Buffer<Scalar> out(os.size());
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    for (Index y = 0; y < os.h; ++y) {
      for (Index xx = 0; xx < os.w; ++xx) {
        out(nc * os.plane() + y * os.w + xx) =
            x.value()(nc * s.plane() + (y / factor) * s.w + xx / factor);
      }
    }
  }
  return detail::make_result<Scalar>(os, std::move(out), {x.ptr()},
                                     [xn = x.node(), s, os, factor](Node<Scalar>& self) {
                                       Scalar* gx = xn->grad_data();
                                       for (Index nc = 0; nc < s.n * s.c; ++nc) {
                                         for (Index y = 0; y < os.h; ++y) {
                                           for (Index xx = 0; xx < os.w; ++xx) {
                                             gx[nc * s.plane() + (y / factor) * s.w +
                                                xx / factor] +=
                                                 self.grad(nc * os.plane() + y * os.w + xx);
                                           }
                                         }
                                       }
                                     });
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x) {
  const Shape s = x.shape();
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  if (os.h < 1 || os.w < 1) throw std::invalid_argument("max_pool2: input too small");
  Buffer<Scalar> out(os.size());
  std::vector<Index> argmax(static_cast<std::size_t>(os.size()));
  for (Index nc = 0; nc < s.n * s.c; ++nc) {
    for (Index y = 0; y < os.h; ++y) {
      for (Index xx = 0; xx < os.w; ++xx) {
        Index best = nc * s.plane() + 2 * y * s.w + 2 * xx;
        for (Index dy = 0; dy < 2; ++dy) {
          for (Index dx = 0; dx < 2; ++dx) {
            const Index i = nc * s.plane() + (2 * y + dy) * s.w + 2 * xx + dx;
            if (x.value()(i) > x.value()(best)) best = i;
          }
        }
        const Index o = nc * os.plane() + y * os.w + xx;
        out(o) = x.value()(best);
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return detail::make_result<Scalar>(
      os, std::move(out), {x.ptr()},
      [xn = x.node(), argmax = std::move(argmax)](Node<Scalar>& self) {
        Scalar* gx = xn->grad_data();
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad(Index(o));
      });
}

/// Spatial mean: (N,C,H,W) -> (N,C,1,1).
template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Shape s = x.shape();
  const Index hw = s.plane();
  Buffer<Scalar> out = Eigen::Map<const Mat>(x.value().data(), hw, s.n * s.c).colwise().mean()
                           .transpose().array();
  return detail::make_result<Scalar>(Shape{s.n, s.c, 1, 1}, std::move(out), {x.ptr()},
                                     [xn = x.node(), s, hw](Node<Scalar>& self) {
                                       Eigen::Map<Mat> g(xn->grad_data(), hw, s.n * s.c);
                                       g.rowwise() +=
                                           (self.grad / Scalar(hw)).matrix().transpose();
                                     });
}

/// Scales every sample to unit L2 norm: x / sqrt(|x|^2 + eps).
template <typename Scalar>
Var<Scalar> normalize_samples(const Var<Scalar>& x, Scalar eps = Scalar(1e-12)) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  const Shape s = x.shape();
  const Index d = s.per_sample();
  Eigen::Map<const Mat> xm(x.value().data(), d, s.n);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> radius = (xm.colwise().squaredNorm().array() + eps).sqrt().transpose();
  Buffer<Scalar> out(s.size());
  Eigen::Map<Mat> om(out.data(), d, s.n);
  om = xm * radius.inverse().matrix().asDiagonal();
  return detail::make_result<Scalar>(s, std::move(out), {x.ptr()},
                                     [xn = x.node(), d, n = s.n, radius](Node<Scalar>& self) {
                                       Eigen::Map<const Mat> y(self.value.data(), d, n);
                                       Eigen::Map<const Mat> g(self.grad.data(), d, n);
                                       Eigen::Map<Mat> gx(xn->grad_data(), d, n);
                                       for (Index i = 0; i < n; ++i) {
                                         gx.col(i) += (g.col(i) - y.col(i) * y.col(i).dot(g.col(i))) / radius(i);
                                       }
                                     });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    throw std::invalid_argument("concat_channels: " + to_string(as) + " vs " + to_string(bs));
  }
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  Buffer<Scalar> out(os.size());
  for (Index n = 0; n < as.n; ++n) {
    out.segment(n * os.per_sample(), as.per_sample()) =
        a.value().segment(n * as.per_sample(), as.per_sample());
    out.segment(n * os.per_sample() + as.per_sample(), bs.per_sample()) =
        b.value().segment(n * bs.per_sample(), bs.per_sample());
  }
  return detail::make_result<Scalar>(
      os, std::move(out), {a.ptr(), b.ptr()},
      [an = a.node(), bn = b.node(), as, bs, os](Node<Scalar>& self) {
        for (Index n = 0; n < as.n; ++n) {
          if (an->requires_grad) {
            an->grad_map().segment(n * as.per_sample(), as.per_sample()) +=
                self.grad.segment(n * os.per_sample(), as.per_sample());
          }
          if (bn->requires_grad) {
            bn->grad_map().segment(n * bs.per_sample(), bs.per_sample()) +=
                self.grad.segment(n * os.per_sample() + as.per_sample(), bs.per_sample());
          }
        }
      });
}

/// Gathers samples along the batch axis.
template <typename Scalar>
Var<Scalar> select_samples(const Var<Scalar>& x, std::span<const Index> rows) {
  const Shape s = x.shape();
  const Index f = s.per_sample();
  const Shape os{static_cast<Index>(rows.size()), s.c, s.h, s.w};
  Buffer<Scalar> out(os.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= s.n) throw std::out_of_range("select_samples: bad row");
    out.segment(Index(i) * f, f) = x.value().segment(rows[i] * f, f);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return detail::make_result<Scalar>(os, std::move(out), {x.ptr()},
                                     [xn = x.node(), idx = std::move(idx), f](Node<Scalar>& self) {
                                       auto g = xn->grad_map();
                                       for (std::size_t i = 0; i < idx.size(); ++i) {
                                         g.segment(idx[i] * f, f) +=
                                             self.grad.segment(Index(i) * f, f);
                                       }
                                     });
}

/// Mean negative log-likelihood of per-pixel class probabilities.
/// `targets` holds one class per pixel (N*H*W, sample-major); entries equal to
/// `ignore` are skipped. Throws when no pixel is scored.
template <typename Scalar>
Var<Scalar> pixel_nll(const Var<Scalar>& probs, std::span<const int> targets, int ignore) {
  const Shape s = probs.shape();
  const Index hw = s.plane();
  if (static_cast<Index>(targets.size()) != s.n * hw) {
    throw std::invalid_argument("pixel_nll: target count does not match prediction");
  }
  const Scalar floor_p = std::numeric_limits<Scalar>::min();
  Scalar total = 0;
  Index count = 0;
  for (Index n = 0; n < s.n; ++n) {
    for (Index p = 0; p < hw; ++p) {
      const int t = targets[static_cast<std::size_t>(n * hw + p)];
      if (t == ignore) continue;
      if (t < 0 || t >= s.c) throw std::invalid_argument("pixel_nll: class index out of range");
      total -= std::log(std::max(probs.value()(n * s.per_sample() + t * hw + p), floor_p));
      ++count;
    }
  }
  if (count == 0) throw std::invalid_argument("pixel_nll: every pixel is IGNORE");
  Buffer<Scalar> out(1);
  out(0) = total / Scalar(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  return detail::make_result<Scalar>(
      Shape{}, std::move(out), {probs.ptr()},
      [pn = probs.node(), tgt = std::move(tgt), s, hw, count, ignore, floor_p](Node<Scalar>& self) {
        Scalar* g = pn->grad_data();
        const Scalar w = self.grad(0) / Scalar(count);
        for (Index n = 0; n < s.n; ++n) {
          for (Index p = 0; p < hw; ++p) {
            const int t = tgt[static_cast<std::size_t>(n * hw + p)];
            if (t == ignore) continue;
            const Index i = n * s.per_sample() + t * hw + p;
            const Scalar v = pn->value(i);
            if (v > floor_p) g[i] -= w / v;
          }
        }
      });
}

}  // namespace alseg::nn

#endif  // ALSEG_NN_OPS_HPP
