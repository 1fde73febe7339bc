#pragma once

#include <Eigen/Core>

#include "alignps/autodiff.hpp"

namespace alignps {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapM = Eigen::Map<const MatRM<T>>;

inline int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

template <typename T>
void im2col(const T *x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow,
            T *col) {
  const std::int64_t ncols = static_cast<std::int64_t>(oh) * ow;
  for (int cc = 0; cc < c; ++cc)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        T *dst = col + (static_cast<std::int64_t>(cc) * kh * kw + ki * kw + kj) * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            dst += ow;
            continue;
          }
          const T *src = x + (static_cast<std::int64_t>(cc) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            *dst++ = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T *col, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
                int ow, T *gx) {
  const std::int64_t ncols = static_cast<std::int64_t>(oh) * ow;
  for (int cc = 0; cc < c; ++cc)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const T *src = col + (static_cast<std::int64_t>(cc) * kh * kw + ki * kw + kj) * ncols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) {
            src += ow;
            continue;
          }
          T *dst = gx + (static_cast<std::int64_t>(cc) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
          src += ow;
        }
      }
}

}  // namespace detail

/// 2D convolution (NCHW). Weight is CoutxCinxKhxKw; bias may be empty.
/// Output spatial size follows floor arithmetic; 3x3 stride-2 pad-1 layers
/// therefore produce ceil(H/2) maps, which keeps pyramid levels in exact
/// 2x relation for any input size.
template <typename T>
Var<T> conv2d(const Var<T> &x, const Var<T> &weight, const Var<T> &bias, int stride = 1,
              int pad = 0) {
  const int n = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int cout = weight->value.dim(0), kh = weight->value.dim(2), kw = weight->value.dim(3);
  APS_CHECK(weight->value.dim(1) == cin,
            "conv2d: weight expects " + std::to_string(weight->value.dim(1)) + " input channels, got " +
                std::to_string(cin));
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(w, kw, stride, pad);
  APS_CHECK(oh > 0 && ow > 0, "conv2d: output would be empty");
  const std::int64_t ncols = static_cast<std::int64_t>(oh) * ow;
  const int krows = cin * kh * kw;
  const bool is_1x1 = (kh == 1 && kw == 1 && stride == 1 && pad == 0);
  const bool with_bias = bias && bias->value.numel() > 0;

  TensorT<T> out({n, cout, oh, ow});
  TensorT<T> cols;  // saved for backward when training; empty for 1x1
  if (!is_1x1) cols = TensorT<T>({n, krows, static_cast<int>(ncols)});

  CMapM<T> wmat(weight->value.data(), cout, krows);
  for (int b = 0; b < n; ++b) {
    const T *xb = x->value.data() + static_cast<std::int64_t>(b) * cin * h * w;
    T *ob = out.data() + static_cast<std::int64_t>(b) * cout * ncols;
    MapM<T> omat(ob, cout, ncols);
    if (is_1x1) {
      CMapM<T> xmat(xb, cin, ncols);
      omat.noalias() = wmat * xmat;
    } else {
      T *cb = cols.data() + static_cast<std::int64_t>(b) * krows * ncols;
      detail::im2col(xb, cin, h, w, kh, kw, stride, pad, oh, ow, cb);
      CMapM<T> cmat(cb, krows, ncols);
      omat.noalias() = wmat * cmat;
    }
    if (with_bias)
      for (int co = 0; co < cout; ++co)
        omat.row(co).array() += bias->value[co];
  }

  auto cols_holder = std::make_shared<TensorT<T>>(std::move(cols));
  return make_op<T>(
      std::move(out), {x, weight, bias ? bias : make_const(TensorT<T>())},
      [x, weight, bias, cols_holder, n, cin, h, w, cout, kh, kw, stride, pad, oh, ow, ncols, krows,
       is_1x1, with_bias](VarNode<T> &self) {
        CMapM<T> wmat(weight->value.data(), cout, krows);
        TensorT<T> gcol;
        if (!is_1x1 && x->requires_grad) gcol = TensorT<T>({krows, static_cast<int>(ncols)});
        for (int b = 0; b < n; ++b) {
          CMapM<T> gmat(self.grad.data() + static_cast<std::int64_t>(b) * cout * ncols, cout,
                        ncols);
          if (weight->requires_grad) {
            MapM<T> gw(weight->grad_buf().data(), cout, krows);
            if (is_1x1) {
              CMapM<T> xmat(x->value.data() + static_cast<std::int64_t>(b) * cin * h * w, cin,
                            ncols);
              gw.noalias() += gmat * xmat.transpose();
            } else {
              CMapM<T> cmat(cols_holder->data() + static_cast<std::int64_t>(b) * krows * ncols,
                            krows, ncols);
              gw.noalias() += gmat * cmat.transpose();
            }
          }
          if (with_bias && bias->requires_grad) {
            T *gb = bias->grad_buf().data();
            for (int co = 0; co < cout; ++co) gb[co] += gmat.row(co).sum();
          }
          if (x->requires_grad) {
            T *gx = x->grad_buf().data() + static_cast<std::int64_t>(b) * cin * h * w;
            if (is_1x1) {
              MapM<T> gxmat(gx, cin, ncols);
              gxmat.noalias() += wmat.transpose() * gmat;
            } else {
              MapM<T> gcmat(gcol.data(), krows, ncols);
              gcmat.noalias() = wmat.transpose() * gmat;
              detail::col2im_acc(gcol.data(), cin, h, w, kh, kw, stride, pad, oh, ow, gx);
            }
          }
        }
      });
}

}  // namespace alignps
