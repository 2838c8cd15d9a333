#include "grasp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace grasp {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_volume(const Shape& s, const char* op) {
  if (s.size() != 5) throw ShapeError(std::string(op) + ": expected (B, C, H, W, D), got " + shape_str(s));
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (auto* g = parent_grad(self, i)) g->array() += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.value().array() - b.value().array());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array();
    if (auto* g = parent_grad(self, 1)) g->array() -= self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.value().array() * b.value().array());
  return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array() * parent_value(self, 1).array();
    if (auto* g = parent_grad(self, 1)) g->array() += self.grad.array() * parent_value(self, 0).array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.value().array() * factor);
  return make_result<Scalar>(std::move(out), {a}, [factor](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad.array() * factor;
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out(Shape{1}, a.value().array().sum());
  return make_result<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.value().array().max(Scalar(0)));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      g->array() += (parent_value(self, 0).array() > Scalar(0)).select(self.grad.array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& x, Scalar slope) {
  const auto& xv = x.value().array();
  Tensor<Scalar> out(x.shape(), (xv > Scalar(0)).select(xv, xv * slope));
  return make_result<Scalar>(std::move(out), {x}, [slope](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      g->array() += (parent_value(self, 0).array() > Scalar(0)).select(self.grad.array(), self.grad.array() * slope);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), Scalar(1) / (Scalar(1) + (-x.value().array()).exp()));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      g->array() += self.grad.array() * self.value.array() * (Scalar(1) - self.value.array());
  });
}

// --- convolution -----------------------------------------------------------------

namespace {

// Same-padded convolution evaluated as one GEMM per kernel offset over a zero-padded copy
// of the input. Outputs live on the padded grid strides; positions past a row end are
// computed and discarded.
struct ConvGeometry {
  Index cin, cout, h, w, d, k, pad;
  Index hp() const { return h + 2 * pad; }
  Index wp() const { return w + 2 * pad; }
  Index dp() const { return d + 2 * pad; }
  Index padded() const { return hp() * wp() * dp(); }
  Index span() const { return ((h - 1) * wp() + (w - 1)) * dp() + d; }
  Index taps() const { return k * k * k; }
  Index offset(Index t) const {
    const Index i = t / (k * k), j = (t / k) % k, l = t % k;
    return (i * wp() + j) * dp() + l;
  }
};

template <typename Scalar>
void pad_input(const Scalar* x, const ConvGeometry& g, Scalar* xp) {
  std::fill(xp, xp + g.cin * g.padded(), Scalar(0));
  for (Index c = 0; c < g.cin; ++c)
    for (Index i = 0; i < g.h; ++i)
      for (Index j = 0; j < g.w; ++j) {
        const Scalar* src = x + ((c * g.h + i) * g.w + j) * g.d;
        std::copy(src, src + g.d, xp + c * g.padded() + ((i + g.pad) * g.wp() + j + g.pad) * g.dp() + g.pad);
      }
}

// Copies between the dense (C, H, W, D) layout and the span layout (C, span) with padded strides.
template <typename Scalar>
void span_to_dense(const Scalar* s, Index channels, Index stride, const ConvGeometry& g, Scalar* dense) {
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < g.h; ++i)
      for (Index j = 0; j < g.w; ++j) {
        const Scalar* src = s + c * stride + (i * g.wp() + j) * g.dp();
        std::copy(src, src + g.d, dense + ((c * g.h + i) * g.w + j) * g.d);
      }
}

template <typename Scalar>
void dense_to_span(const Scalar* dense, Index channels, Index stride, const ConvGeometry& g, Scalar* s) {
  std::fill(s, s + channels * stride, Scalar(0));
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < g.h; ++i)
      for (Index j = 0; j < g.w; ++j) {
        const Scalar* src = dense + ((c * g.h + i) * g.w + j) * g.d;
        std::copy(src, src + g.d, s + c * stride + (i * g.wp() + j) * g.dp());
      }
}

// (Cout, Cin, k, k, k) -> taps x (Cout, Cin) and back.
template <typename Scalar>
std::vector<Scalar> split_taps(const Tensor<Scalar>& wt, const ConvGeometry& g) {
  std::vector<Scalar> out(static_cast<std::size_t>(wt.size()));
  const Index oc = g.cout * g.cin;
  for (Index p = 0; p < oc; ++p)
    for (Index t = 0; t < g.taps(); ++t) out[static_cast<std::size_t>(t * oc + p)] = wt[p * g.taps() + t];
  return out;
}

}  // namespace

template <typename Scalar>
Var<Scalar> conv3d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require_volume(x.shape(), "conv3d");
  const Shape& ws = weight.shape();
  if (ws.size() != 5 || ws[1] != x.dim(1) || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0)
    throw ShapeError("conv3d: weight " + shape_str(ws) + " incompatible with input " + shape_str(x.shape()));
  if (bias.defined() && bias.value().size() != ws[0]) throw ShapeError("conv3d: bias length mismatch");

  const Index batch = x.dim(0), cout = ws[0];
  const ConvGeometry g{x.dim(1), cout, x.dim(2), x.dim(3), x.dim(4), ws[2], ws[2] / 2};
  const Index n = g.h * g.w * g.d;

  Tensor<Scalar> out(Shape{batch, cout, g.h, g.w, g.d});
  if (g.k == 1) {
    const auto wmat = weight.value().matrix(cout, g.cin);
    for (Index b = 0; b < batch; ++b)
      out.matrix(cout, n, b * cout * n).noalias() = wmat * ConstMatrixMap<Scalar>(x.value().data() + b * g.cin * n, g.cin, n);
  } else {
    const auto taps = split_taps(weight.value(), g);
    std::vector<Scalar> xp(static_cast<std::size_t>(g.cin * g.padded()));
    std::vector<Scalar> ys(static_cast<std::size_t>(cout * g.span()));
    for (Index b = 0; b < batch; ++b) {
      pad_input(x.value().data() + b * g.cin * n, g, xp.data());
      MatrixMap<Scalar> y(ys.data(), cout, g.span());
      const ConstMatrixMap<Scalar> xm(xp.data(), g.cin, g.padded());
      for (Index t = 0; t < g.taps(); ++t) {
        const ConstMatrixMap<Scalar> wt(taps.data() + t * cout * g.cin, cout, g.cin);
        if (t == 0)
          y.noalias() = wt * xm.middleCols(g.offset(t), g.span());
        else
          y.noalias() += wt * xm.middleCols(g.offset(t), g.span());
      }
      span_to_dense(ys.data(), cout, g.span(), g, out.data() + b * cout * n);
    }
  }
  if (bias.defined())
    for (Index b = 0; b < batch; ++b) out.matrix(cout, n, b * cout * n).colwise() += bias.value().array().matrix();

  return make_result<Scalar>(std::move(out), {x, weight, bias}, [g, batch, n](Node<Scalar>& self) {
    Tensor<Scalar>* gx = parent_grad(self, 0);
    Tensor<Scalar>* gw = parent_grad(self, 1);
    Tensor<Scalar>* gb = self.parents[2] ? parent_grad(self, 2) : nullptr;
    const auto& xv = parent_value(self, 0);
    const Index cout = g.cout;
    if (gb)
      for (Index b = 0; b < batch; ++b) gb->array().matrix() += self.grad.matrix(cout, n, b * cout * n).rowwise().sum();
    if (g.k == 1) {
      const auto wmat = parent_value(self, 1).matrix(cout, g.cin);
      for (Index b = 0; b < batch; ++b) {
        const auto dy = self.grad.matrix(cout, n, b * cout * n);
        if (gw) gw->matrix(cout, g.cin).noalias() += dy * ConstMatrixMap<Scalar>(xv.data() + b * g.cin * n, g.cin, n).transpose();
        if (gx) gx->matrix(g.cin, n, b * g.cin * n).noalias() += wmat.transpose() * dy;
      }
      return;
    }
    if (!gx && !gw) return;
    const auto taps = split_taps(parent_value(self, 1), g);
    std::vector<Scalar> dtaps(gw ? taps.size() : 0, Scalar(0));
    std::vector<Scalar> xp(gw ? static_cast<std::size_t>(g.cin * g.padded()) : 0);
    std::vector<Scalar> dxp(gx ? static_cast<std::size_t>(g.cin * g.padded()) : 0);
    std::vector<Scalar> dys(static_cast<std::size_t>(cout * g.span()));
    Tensor<Scalar> dense(Shape{g.cin, g.h, g.w, g.d});
    for (Index b = 0; b < batch; ++b) {
      dense_to_span(self.grad.data() + b * cout * n, cout, g.span(), g, dys.data());
      const ConstMatrixMap<Scalar> dy(dys.data(), cout, g.span());
      if (gw) pad_input(xv.data() + b * g.cin * n, g, xp.data());
      if (gx) std::fill(dxp.begin(), dxp.end(), Scalar(0));
      for (Index t = 0; t < g.taps(); ++t) {
        const Index off = g.offset(t);
        if (gw) {
          const ConstMatrixMap<Scalar> xm(xp.data(), g.cin, g.padded());
          MatrixMap<Scalar>(dtaps.data() + t * cout * g.cin, cout, g.cin).noalias() +=
              dy * xm.middleCols(off, g.span()).transpose();
        }
        if (gx) {
          const ConstMatrixMap<Scalar> wt(taps.data() + t * cout * g.cin, cout, g.cin);
          MatrixMap<Scalar>(dxp.data(), g.cin, g.padded()).middleCols(off, g.span()).noalias() += wt.transpose() * dy;
        }
      }
      if (gx) {
        // Interior of the padded gradient, read with the span helper shifted by the pad origin.
        const Index origin = (g.pad * g.wp() + g.pad) * g.dp() + g.pad;
        span_to_dense(dxp.data() + origin, g.cin, g.padded(), g, dense.data());
        gx->array().segment(b * g.cin * n, g.cin * n) += dense.array();
      }
    }
    if (gw) {
      const Index oc = cout * g.cin;
      for (Index p = 0; p < oc; ++p)
        for (Index t = 0; t < g.taps(); ++t) (*gw)[p * g.taps() + t] += dtaps[static_cast<std::size_t>(t * oc + p)];
    }
  });
}

// --- pooling / resampling ----------------------------------------------------------

template <typename Scalar>
Var<Scalar> max_pool2(const Var<Scalar>& x) {
  require_volume(x.shape(), "max_pool2");
  const Index bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), d = x.dim(4);
  if (h % 2 || w % 2 || d % 2) throw ShapeError("max_pool2: odd spatial extent in " + shape_str(x.shape()));
  const Index oh = h / 2, ow = w / 2, od = d / 2;
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), oh, ow, od});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* xv = x.value().data();
  Index o = 0;
  for (Index p = 0; p < bc; ++p)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j)
        for (Index l = 0; l < od; ++l, ++o) {
          Index best = ((p * h + 2 * i) * w + 2 * j) * d + 2 * l;
          for (Index a = 0; a < 2; ++a)
            for (Index bb = 0; bb < 2; ++bb)
              for (Index c = 0; c < 2; ++c) {
                const Index idx = ((p * h + 2 * i + a) * w + 2 * j + bb) * d + 2 * l + c;
                if (xv[idx] > xv[best]) best = idx;
              }
          out[o] = xv[best];
          argmax[static_cast<std::size_t>(o)] = best;
        }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax)](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[static_cast<Index>(o)];
  });
}

namespace {

// Linear x2 upsampling along one axis of a tensor viewed as (outer, len, inner).
template <typename Scalar>
void upsample_axis(const Scalar* in, Scalar* out, Index outer, Index len, Index inner) {
  for (Index o = 0; o < outer; ++o) {
    const Scalar* src = in + o * len * inner;
    Scalar* dst = out + o * 2 * len * inner;
    for (Index i = 0; i < len; ++i) {
      const Index lo = std::max<Index>(i - 1, 0), hi = std::min<Index>(i + 1, len - 1);
      Scalar* even = dst + 2 * i * inner;
      Scalar* odd = even + inner;
      const Scalar* c = src + i * inner;
      const Scalar* l = src + lo * inner;
      const Scalar* r = src + hi * inner;
      for (Index t = 0; t < inner; ++t) {
        even[t] = Scalar(0.25) * l[t] + Scalar(0.75) * c[t];
        odd[t] = Scalar(0.75) * c[t] + Scalar(0.25) * r[t];
      }
    }
  }
}

template <typename Scalar>
void upsample_axis_adjoint(const Scalar* gout, Scalar* gin, Index outer, Index len, Index inner) {
  for (Index o = 0; o < outer; ++o) {
    const Scalar* src = gout + o * 2 * len * inner;
    Scalar* dst = gin + o * len * inner;
    for (Index i = 0; i < len; ++i) {
      const Index lo = std::max<Index>(i - 1, 0), hi = std::min<Index>(i + 1, len - 1);
      const Scalar* even = src + 2 * i * inner;
      const Scalar* odd = even + inner;
      for (Index t = 0; t < inner; ++t) {
        dst[lo * inner + t] += Scalar(0.25) * even[t];
        dst[i * inner + t] += Scalar(0.75) * (even[t] + odd[t]);
        dst[hi * inner + t] += Scalar(0.25) * odd[t];
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x) {
  require_volume(x.shape(), "upsample2");
  const Index bc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), d = x.dim(4);
  Tensor<Scalar> t1(Shape{bc, h, w, 2 * d});
  upsample_axis(x.value().data(), t1.data(), bc * h * w, d, 1);
  Tensor<Scalar> t2(Shape{bc, h, 2 * w, 2 * d});
  upsample_axis(t1.data(), t2.data(), bc * h, w, 2 * d);
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), 2 * h, 2 * w, 2 * d});
  upsample_axis(t2.data(), out.data(), bc, h, 4 * w * d);
  return make_result<Scalar>(std::move(out), {x}, [bc, h, w, d](Node<Scalar>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    Tensor<Scalar> g2(Shape{bc, h, 2 * w, 2 * d});
    upsample_axis_adjoint(self.grad.data(), g2.data(), bc, h, 4 * w * d);
    Tensor<Scalar> g1(Shape{bc, h, w, 2 * d});
    upsample_axis_adjoint(g2.data(), g1.data(), bc * h, w, 2 * d);
    upsample_axis_adjoint(g1.data(), g->data(), bc * h * w, d, 1);
  });
}

template <typename Scalar>
Var<Scalar> adaptive_avg_pool(const Var<Scalar>& x, const std::array<Index, 3>& out_extent) {
  require_volume(x.shape(), "adaptive_avg_pool");
  for (Index e : out_extent)
    if (e < 1) throw ShapeError("adaptive_avg_pool: target extent must be >= 1");
  const Index bc = x.dim(0) * x.dim(1);
  const std::array<Index, 3> in{x.dim(2), x.dim(3), x.dim(4)};
  auto window = [in, out_extent](int axis, Index i) {
    const Index lo = (i * in[axis]) / out_extent[axis];
    const Index hi = ((i + 1) * in[axis] + out_extent[axis] - 1) / out_extent[axis];
    return std::pair{lo, hi};
  };
  auto visit = [=](auto&& fn) {
    Index o = 0;
    for (Index p = 0; p < bc; ++p)
      for (Index i = 0; i < out_extent[0]; ++i)
        for (Index j = 0; j < out_extent[1]; ++j)
          for (Index l = 0; l < out_extent[2]; ++l, ++o) {
            const auto [h0, h1] = window(0, i);
            const auto [w0, w1] = window(1, j);
            const auto [d0, d1] = window(2, l);
            const Scalar inv = Scalar(1) / static_cast<Scalar>((h1 - h0) * (w1 - w0) * (d1 - d0));
            for (Index a = h0; a < h1; ++a)
              for (Index b = w0; b < w1; ++b)
                for (Index c = d0; c < d1; ++c) fn(o, ((p * in[0] + a) * in[1] + b) * in[2] + c, inv);
          }
  };
  Tensor<Scalar> out(Shape{x.dim(0), x.dim(1), out_extent[0], out_extent[1], out_extent[2]});
  const Scalar* xv = x.value().data();
  visit([&](Index o, Index idx, Scalar inv) { out[o] += xv[idx] * inv; });
  return make_result<Scalar>(std::move(out), {x}, [visit](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) visit([&](Index o, Index idx, Scalar inv) { (*g)[idx] += self.grad[o] * inv; });
  });
}

// --- normalization -------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> instance_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Index batch = x.dim(0), ch = x.dim(1), n = spatial_size(x.value());
  if (gamma.value().size() != ch || beta.value().size() != ch) throw ShapeError("instance_norm: affine length mismatch");
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  std::vector<Scalar> inv_std(static_cast<std::size_t>(batch * ch));
  for (Index p = 0; p < batch * ch; ++p) {
    const auto xs = x.value().array().segment(p * n, n);
    const double mu = xs.template cast<double>().mean();
    const double var = (xs.template cast<double>() - mu).square().mean();
    const Scalar inv = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(p)] = inv;
    xhat.array().segment(p * n, n) = (xs - static_cast<Scalar>(mu)) * inv;
    const Index c = p % ch;
    out.array().segment(p * n, n) = xhat.array().segment(p * n, n) * gamma.value()[c] + beta.value()[c];
  }
  return make_result<Scalar>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch, n](Node<Scalar>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gbeta = parent_grad(self, 2);
        const auto& gamma_v = parent_value(self, 1);
        for (Index p = 0; p < batch * ch; ++p) {
          const Index c = p % ch;
          const auto dy = self.grad.array().segment(p * n, n);
          const auto xh = xhat.array().segment(p * n, n);
          if (gbeta) (*gbeta)[c] += dy.sum();
          if (gg) (*gg)[c] += (dy * xh).sum();
          if (gx) {
            const Scalar sum_dxh = dy.sum() * gamma_v[c];
            const Scalar sum_dxh_xh = (dy * xh).sum() * gamma_v[c];
            const Scalar k = inv_std[static_cast<std::size_t>(p)] / static_cast<Scalar>(n);
            gx->array().segment(p * n, n) +=
                k * (static_cast<Scalar>(n) * gamma_v[c] * dy - sum_dxh - xh * sum_dxh_xh);
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> layer_norm_channels(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Index batch = x.dim(0), ch = x.dim(1), n = spatial_size(x.value());
  if (gamma.value().size() != ch || beta.value().size() != ch) throw ShapeError("layer_norm: affine length mismatch");
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> inv_std(Shape{batch, n});
  const auto gv = gamma.value().array().matrix();
  const auto bv = beta.value().array().matrix();
  for (Index b = 0; b < batch; ++b) {
    const auto xm = x.value().matrix(ch, n, b * ch * n);
    const RowMatrix<Scalar> mu = xm.colwise().mean();
    RowMatrix<Scalar> centered = xm.rowwise() - mu.row(0);
    const RowMatrix<Scalar> inv =
        ((centered.array().square().colwise().sum() / static_cast<Scalar>(ch)) + eps).rsqrt().matrix();
    inv_std.matrix(1, n, b * n) = inv;
    auto xh = xhat.matrix(ch, n, b * ch * n);
    xh = centered.array().rowwise() * inv.row(0).array();
    out.matrix(ch, n, b * ch * n) = (xh.array().colwise() * gv.array()).colwise() + bv.array();
  }
  return make_result<Scalar>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), batch, ch, n](Node<Scalar>& self) {
        auto* gx = parent_grad(self, 0);
        auto* gg = parent_grad(self, 1);
        auto* gbeta = parent_grad(self, 2);
        const auto gv = parent_value(self, 1).array().matrix();
        for (Index b = 0; b < batch; ++b) {
          const auto dy = self.grad.matrix(ch, n, b * ch * n);
          const auto xh = xhat.matrix(ch, n, b * ch * n);
          if (gbeta) gbeta->array().matrix() += dy.rowwise().sum();
          if (gg) gg->array().matrix() += dy.cwiseProduct(xh).rowwise().sum();
          if (gx) {
            const RowMatrix<Scalar> dxh = dy.array().colwise() * gv.array();
            const RowMatrix<Scalar> s1 = dxh.colwise().sum();
            const RowMatrix<Scalar> s2 = dxh.cwiseProduct(xh).colwise().sum();
            const auto inv = inv_std.matrix(1, n, b * n);
            RowMatrix<Scalar> t = (dxh * static_cast<Scalar>(ch)).rowwise() - s1.row(0);
            t -= (xh.array().rowwise() * s2.row(0).array()).matrix();
            gx->matrix(ch, n, b * ch * n) +=
                ((t.array().rowwise() * inv.row(0).array()) / static_cast<Scalar>(ch)).matrix();
          }
        }
      });
}

// --- channel plumbing ---------------------------------------------------------------

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape().size() != b.shape().size() || a.dim(0) != b.dim(0) || spatial_shape(a.shape()) != spatial_shape(b.shape()))
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Index batch = a.dim(0), n = spatial_size(a.value());
  const Index ca = a.dim(1) * n, cb = b.dim(1) * n;
  Shape s = a.shape();
  s[1] = a.dim(1) + b.dim(1);
  Tensor<Scalar> out(s);
  for (Index i = 0; i < batch; ++i) {
    out.array().segment(i * (ca + cb), ca) = a.value().array().segment(i * ca, ca);
    out.array().segment(i * (ca + cb) + ca, cb) = b.value().array().segment(i * cb, cb);
  }
  return make_result<Scalar>(std::move(out), {a, b}, [batch, ca, cb](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      for (Index i = 0; i < batch; ++i) g->array().segment(i * ca, ca) += self.grad.array().segment(i * (ca + cb), ca);
    if (auto* g = parent_grad(self, 1))
      for (Index i = 0; i < batch; ++i)
        g->array().segment(i * cb, cb) += self.grad.array().segment(i * (ca + cb) + ca, cb);
  });
}

template <typename Scalar>
Var<Scalar> select_channel(const Var<Scalar>& x, Index c) {
  const Index batch = x.dim(0), ch = x.dim(1), n = spatial_size(x.value());
  if (c < 0 || c >= ch) throw ShapeError("select_channel: channel out of range");
  Shape s = x.shape();
  s[1] = 1;
  Tensor<Scalar> out(s);
  for (Index b = 0; b < batch; ++b) out.array().segment(b * n, n) = x.value().array().segment((b * ch + c) * n, n);
  return make_result<Scalar>(std::move(out), {x}, [batch, ch, n, c](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      for (Index b = 0; b < batch; ++b) g->array().segment((b * ch + c) * n, n) += self.grad.array().segment(b * n, n);
  });
}

template <typename Scalar>
Var<Scalar> select_batch(const Var<Scalar>& x, Index b) {
  if (b < 0 || b >= x.dim(0)) throw ShapeError("select_batch: index out of range");
  const Index per = x.value().stride(0);
  Shape s = x.shape();
  s[0] = 1;
  Tensor<Scalar> out(s, x.value().array().segment(b * per, per));
  return make_result<Scalar>(std::move(out), {x}, [per, b](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array().segment(b * per, per) += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> channel_mean_max(const Var<Scalar>& x) {
  const Index batch = x.dim(0), ch = x.dim(1), n = spatial_size(x.value());
  Shape s = x.shape();
  s[1] = 2;
  Tensor<Scalar> out(s);
  std::vector<Index> argmax(static_cast<std::size_t>(batch * n));
  for (Index b = 0; b < batch; ++b) {
    const auto xm = x.value().matrix(ch, n, b * ch * n);
    out.matrix(1, n, b * 2 * n) = xm.colwise().mean();
    for (Index t = 0; t < n; ++t) {
      Index best = 0;
      for (Index c = 1; c < ch; ++c)
        if (xm(c, t) > xm(best, t)) best = c;
      argmax[static_cast<std::size_t>(b * n + t)] = best;
      out[b * 2 * n + n + t] = xm(best, t);
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax), batch, ch, n](Node<Scalar>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    for (Index b = 0; b < batch; ++b) {
      auto gm = g->matrix(ch, n, b * ch * n);
      const auto dmean = self.grad.matrix(1, n, b * 2 * n);
      gm.rowwise() += dmean.row(0) / static_cast<Scalar>(ch);
      for (Index t = 0; t < n; ++t) gm(argmax[static_cast<std::size_t>(b * n + t)], t) += self.grad[b * 2 * n + n + t];
    }
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Index batch = x.dim(0), ch = x.dim(1), n = spatial_size(x.value());
  Tensor<Scalar> out(Shape{batch, ch});
  out.matrix(batch * ch, 1) = x.value().matrix(batch * ch, n).rowwise().mean();
  return make_result<Scalar>(std::move(out), {x}, [batch, ch, n](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0))
      g->matrix(batch * ch, n).colwise() += self.grad.matrix(batch * ch, 1).col(0) / static_cast<Scalar>(n);
  });
}

template <typename Scalar>
Var<Scalar> mul_spatial(const Var<Scalar>& z, const Var<Scalar>& m) {
  const Index batch = z.dim(0), ch = z.dim(1), n = spatial_size(z.value());
  if (m.dim(0) != batch || m.dim(1) != 1 || spatial_size(m.value()) != n)
    throw ShapeError("mul_spatial: map " + shape_str(m.shape()) + " does not broadcast over " + shape_str(z.shape()));
  Tensor<Scalar> out(z.shape());
  for (Index b = 0; b < batch; ++b)
    out.matrix(ch, n, b * ch * n) =
        z.value().matrix(ch, n, b * ch * n).array().rowwise() * m.value().matrix(1, n, b * n).row(0).array();
  return make_result<Scalar>(std::move(out), {z, m}, [batch, ch, n](Node<Scalar>& self) {
    auto* gz = parent_grad(self, 0);
    auto* gm = parent_grad(self, 1);
    for (Index b = 0; b < batch; ++b) {
      const auto dy = self.grad.matrix(ch, n, b * ch * n);
      if (gz)
        gz->matrix(ch, n, b * ch * n).array() +=
            dy.array().rowwise() * parent_value(self, 1).matrix(1, n, b * n).row(0).array();
      if (gm) gm->matrix(1, n, b * n) += dy.cwiseProduct(parent_value(self, 0).matrix(ch, n, b * ch * n)).colwise().sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> mul_channel(const Var<Scalar>& z, const Var<Scalar>& s) {
  const Index batch = z.dim(0), ch = z.dim(1), n = spatial_size(z.value());
  if (s.shape() != Shape{batch, ch}) throw ShapeError("mul_channel: scale " + shape_str(s.shape()) + " mismatch");
  Tensor<Scalar> out(z.shape());
  out.matrix(batch * ch, n) = z.value().matrix(batch * ch, n).array().colwise() * s.value().array();
  return make_result<Scalar>(std::move(out), {z, s}, [batch, ch, n](Node<Scalar>& self) {
    const auto dy = self.grad.matrix(batch * ch, n);
    if (auto* g = parent_grad(self, 0))
      g->matrix(batch * ch, n).array() += dy.array().colwise() * parent_value(self, 1).array();
    if (auto* g = parent_grad(self, 1))
      g->matrix(batch * ch, 1) += dy.cwiseProduct(parent_value(self, 0).matrix(batch * ch, n)).rowwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const Index batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (x.shape().size() != 2 || weight.dim(1) != cin || bias.value().size() != cout)
    throw ShapeError("linear: incompatible shapes");
  Tensor<Scalar> out(Shape{batch, cout});
  auto y = out.matrix(batch, cout);
  y.noalias() = x.value().matrix(batch, cin) * weight.value().matrix(cout, cin).transpose();
  y.rowwise() += bias.value().matrix(1, cout).row(0);
  return make_result<Scalar>(std::move(out), {x, weight, bias}, [batch, cin, cout](Node<Scalar>& self) {
    const auto dy = self.grad.matrix(batch, cout);
    if (auto* g = parent_grad(self, 0)) g->matrix(batch, cin).noalias() += dy * parent_value(self, 1).matrix(cout, cin);
    if (auto* g = parent_grad(self, 1)) g->matrix(cout, cin).noalias() += dy.transpose() * parent_value(self, 0).matrix(batch, cin);
    if (auto* g = parent_grad(self, 2)) g->matrix(1, cout) += dy.colwise().sum();
  });
}

// --- attention -----------------------------------------------------------------------

namespace {

template <typename Scalar>
void softmax_rows(RowMatrix<Scalar>& s) {
  for (Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> attention_weights(const Tensor<Scalar>& q, const Tensor<Scalar>& k, int heads) {
  const Index batch = q.dim(0), ch = q.dim(1), nq = spatial_size(q), nk = spatial_size(k);
  if (heads < 1 || ch % heads) throw ShapeError("attention: channels not divisible by heads");
  const Index dh = ch / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Tensor<Scalar> out(Shape{batch, heads, nq, nk});
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      const auto qh = q.matrix(ch, nq, b * ch * nq).middleRows(h * dh, dh);
      const auto kh = k.matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh);
      RowMatrix<Scalar> s = (qh.transpose() * kh) * sc;
      softmax_rows(s);
      out.matrix(nq, nk, (b * heads + h) * nq * nk) = s;
    }
  return out;
}

template <typename Scalar>
Var<Scalar> multi_head_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads) {
  const Index batch = q.dim(0), ch = q.dim(1), nq = spatial_size(q.value()), nk = spatial_size(k.value());
  if (k.dim(0) != batch || k.dim(1) != ch) throw ShapeError("attention: key shape " + shape_str(k.shape()));
  require_same_shape(k.shape(), v.shape(), "attention (keys vs values)");
  Tensor<Scalar> probs = attention_weights(q.value(), k.value(), heads);
  const Index dh = ch / heads;
  Tensor<Scalar> out(q.shape());
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      const auto vh = v.value().matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh);
      const auto a = probs.matrix(nq, nk, (b * heads + h) * nq * nk);
      out.matrix(ch, nq, b * ch * nq).middleRows(h * dh, dh).noalias() = vh * a.transpose();
    }
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  return make_result<Scalar>(
      std::move(out), {q, k, v}, [probs = std::move(probs), batch, ch, nq, nk, heads, dh, sc](Node<Scalar>& self) {
        auto* gq = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        auto* gv = parent_grad(self, 2);
        for (Index b = 0; b < batch; ++b)
          for (Index h = 0; h < heads; ++h) {
            const auto dout = self.grad.matrix(ch, nq, b * ch * nq).middleRows(h * dh, dh);
            const auto a = probs.matrix(nq, nk, (b * heads + h) * nq * nk);
            const auto qh = parent_value(self, 0).matrix(ch, nq, b * ch * nq).middleRows(h * dh, dh);
            const auto kh = parent_value(self, 1).matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh);
            const auto vh = parent_value(self, 2).matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh);
            if (gv) gv->matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh).noalias() += dout * a;
            if (!gq && !gk) continue;
            const RowMatrix<Scalar> da = dout.transpose() * vh;
            RowMatrix<Scalar> ds = a.cwiseProduct(da);
            const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rowdot = ds.rowwise().sum();
            ds -= (a.array().colwise() * rowdot.array()).matrix();
            ds *= sc;
            if (gq) gq->matrix(ch, nq, b * ch * nq).middleRows(h * dh, dh).noalias() += kh * ds.transpose();
            if (gk) gk->matrix(ch, nk, b * ch * nk).middleRows(h * dh, dh).noalias() += qh * ds;
          }
      });
}

template <typename Scalar>
Var<Scalar> gated_sum(const Var<Scalar>& o, const Var<Scalar>& z, const Var<Scalar>& w) {
  require_same_shape(o.shape(), z.shape(), "gated_sum");
  if (w.value().size() != 1) throw ShapeError("gated_sum: gate must be a scalar");
  const Scalar delta = Scalar(1) / (Scalar(1) + std::exp(-w.value()[0]));
  Tensor<Scalar> out(o.shape(), delta * o.value().array() + (Scalar(1) - delta) * z.value().array());
  return make_result<Scalar>(std::move(out), {o, z, w}, [delta](Node<Scalar>& self) {
    if (auto* g = parent_grad(self, 0)) g->array() += delta * self.grad.array();
    if (auto* g = parent_grad(self, 1)) g->array() += (Scalar(1) - delta) * self.grad.array();
    if (auto* g = parent_grad(self, 2))
      (*g)[0] += delta * (Scalar(1) - delta) *
                 (self.grad.array() * (parent_value(self, 0).array() - parent_value(self, 1).array())).sum();
  });
}

#define GRASP_INSTANTIATE_OPS(S)                                                                       \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                   \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                   \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                   \
  template Var<S> scale(const Var<S>&, S);                                                             \
  template Var<S> sum(const Var<S>&);                                                                  \
  template Var<S> mean(const Var<S>&);                                                                 \
  template Var<S> relu(const Var<S>&);                                                                 \
  template Var<S> leaky_relu(const Var<S>&, S);                                                        \
  template Var<S> sigmoid(const Var<S>&);                                                              \
  template Var<S> conv3d(const Var<S>&, const Var<S>&, const Var<S>&);                                 \
  template Var<S> max_pool2(const Var<S>&);                                                            \
  template Var<S> upsample2(const Var<S>&);                                                            \
  template Var<S> adaptive_avg_pool(const Var<S>&, const std::array<Index, 3>&);                       \
  template Var<S> instance_norm(const Var<S>&, const Var<S>&, const Var<S>&, S);                       \
  template Var<S> layer_norm_channels(const Var<S>&, const Var<S>&, const Var<S>&, S);                 \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                                       \
  template Var<S> select_channel(const Var<S>&, Index);                                                \
  template Var<S> select_batch(const Var<S>&, Index);                                                  \
  template Var<S> channel_mean_max(const Var<S>&);                                                     \
  template Var<S> global_avg_pool(const Var<S>&);                                                      \
  template Var<S> mul_spatial(const Var<S>&, const Var<S>&);                                           \
  template Var<S> mul_channel(const Var<S>&, const Var<S>&);                                           \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                 \
  template Tensor<S> attention_weights(const Tensor<S>&, const Tensor<S>&, int);                       \
  template Var<S> multi_head_attention(const Var<S>&, const Var<S>&, const Var<S>&, int);              \
  template Var<S> gated_sum(const Var<S>&, const Var<S>&, const Var<S>&);

GRASP_INSTANTIATE_OPS(float)
GRASP_INSTANTIATE_OPS(double)

}  // namespace grasp
