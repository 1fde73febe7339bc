#pragma once

#include <Eigen/Core>
#include <cmath>

#include "alignps/autodiff.hpp"
#include "alignps/conv.hpp"

namespace alignps {

namespace detail {

/// Bilinear read of one channel plane at continuous (y, x). Out-of-bounds
/// taps read zero; corners falling outside contribute zero.
template <typename T>
T bilinear_at(const T *plane, int h, int w, T y, T x) {
  if (y <= T(-1) || y >= static_cast<T>(h) || x <= T(-1) || x >= static_cast<T>(w)) return T(0);
  const int h_low = static_cast<int>(std::floor(y));
  const int w_low = static_cast<int>(std::floor(x));
  const int h_high = h_low + 1;
  const int w_high = w_low + 1;
  const T lh = y - static_cast<T>(h_low), lw = x - static_cast<T>(w_low);
  const T hh = T(1) - lh, hw = T(1) - lw;
  T v1 = T(0), v2 = T(0), v3 = T(0), v4 = T(0);
  if (h_low >= 0 && w_low >= 0) v1 = plane[h_low * w + w_low];
  if (h_low >= 0 && w_high <= w - 1) v2 = plane[h_low * w + w_high];
  if (h_high <= h - 1 && w_low >= 0) v3 = plane[h_high * w + w_low];
  if (h_high <= h - 1 && w_high <= w - 1) v4 = plane[h_high * w + w_high];
  return hh * hw * v1 + hh * lw * v2 + lh * hw * v3 + lh * lw * v4;
}

}  // namespace detail

/// Bilinear interpolation of all channels of a CxHxW map at continuous
/// image-space coordinates (x, y) in feature-grid units.
template <typename T>
std::vector<T> bilinear_sample(const TensorT<T> &fm, T x, T y) {
  APS_CHECK(fm.ndim() == 3, "bilinear_sample: expected CxHxW map");
  const int c = fm.dim(0), h = fm.dim(1), w = fm.dim(2);
  std::vector<T> out(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch)
    out[static_cast<size_t>(ch)] =
        detail::bilinear_at(fm.data() + static_cast<std::int64_t>(ch) * h * w, h, w, y, x);
  return out;
}

/// 3x3 deformable convolution (v1 semantics: no modulation, one offset
/// group), stride 1, pad 1. Offset layout is Nx18xHxW with channel
/// 2*(ki*3+kj) holding dy and 2*(ki*3+kj)+1 holding dx for kernel tap
/// (ki, kj). Gradients flow to the input, the weights, the offsets and the
/// bias.
template <typename T>
Var<T> deform_conv2d(const Var<T> &x, const Var<T> &weight, const Var<T> &offset,
                     const Var<T> &bias) {
  const int n = x->value.dim(0), cin = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  const int cout = weight->value.dim(0);
  APS_CHECK(weight->value.ndim() == 4 && weight->value.dim(1) == cin &&
                weight->value.dim(2) == 3 && weight->value.dim(3) == 3,
            "deform_conv2d: weight must be Coutx" + std::to_string(cin) + "x3x3, got " +
                shape_str(weight->value.shape()));
  APS_CHECK(offset->value.ndim() == 4 && offset->value.dim(0) == n &&
                offset->value.dim(1) == 18 && offset->value.dim(2) == h &&
                offset->value.dim(3) == w,
            "deform_conv2d: offset must be Nx18xHxW matching the input, got " +
                shape_str(offset->value.shape()));
  const bool with_bias = bias && bias->value.numel() > 0;
  if (with_bias)
    APS_CHECK(bias->value.numel() == cout, "deform_conv2d: bias size mismatch");

  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const int krows = cin * 9;
  TensorT<T> out({n, cout, h, w});
  TensorT<T> cols({n, krows, static_cast<int>(plane)});

  CMapM<T> wmat(weight->value.data(), cout, krows);
  for (int b = 0; b < n; ++b) {
    const T *xb = x->value.data() + static_cast<std::int64_t>(b) * cin * plane;
    const T *ob = offset->value.data() + static_cast<std::int64_t>(b) * 18 * plane;
    T *cb = cols.data() + static_cast<std::int64_t>(b) * krows * plane;
    for (int t = 0; t < 9; ++t) {
      const int ki = t / 3, kj = t % 3;
      const T *off_y = ob + (2 * t) * plane;
      const T *off_x = ob + (2 * t + 1) * plane;
      for (int oy = 0; oy < h; ++oy)
        for (int ox = 0; ox < w; ++ox) {
          const std::int64_t loc = static_cast<std::int64_t>(oy) * w + ox;
          const T sy = static_cast<T>(oy - 1 + ki) + off_y[loc];
          const T sx = static_cast<T>(ox - 1 + kj) + off_x[loc];
          if (sy <= T(-1) || sy >= static_cast<T>(h) || sx <= T(-1) || sx >= static_cast<T>(w)) {
            for (int ci = 0; ci < cin; ++ci) cb[(static_cast<std::int64_t>(ci) * 9 + t) * plane + loc] = T(0);
            continue;
          }
          const int h_low = static_cast<int>(std::floor(sy));
          const int w_low = static_cast<int>(std::floor(sx));
          const T lh = sy - static_cast<T>(h_low), lw = sx - static_cast<T>(w_low);
          const T hh = T(1) - lh, hw = T(1) - lw;
          const bool v1_ok = h_low >= 0 && w_low >= 0;
          const bool v2_ok = h_low >= 0 && w_low + 1 <= w - 1;
          const bool v3_ok = h_low + 1 <= h - 1 && w_low >= 0;
          const bool v4_ok = h_low + 1 <= h - 1 && w_low + 1 <= w - 1;
          const std::int64_t base = static_cast<std::int64_t>(h_low) * w + w_low;
          for (int ci = 0; ci < cin; ++ci) {
            const T *pl = xb + static_cast<std::int64_t>(ci) * plane;
            T v = T(0);
            if (v1_ok) v += hh * hw * pl[base];
            if (v2_ok) v += hh * lw * pl[base + 1];
            if (v3_ok) v += lh * hw * pl[base + w];
            if (v4_ok) v += lh * lw * pl[base + w + 1];
            cb[(static_cast<std::int64_t>(ci) * 9 + t) * plane + loc] = v;
          }
        }
    }
    MapM<T> omat(out.data() + static_cast<std::int64_t>(b) * cout * plane, cout, plane);
    CMapM<T> cmat(cb, krows, plane);
    omat.noalias() = wmat * cmat;
    if (with_bias)
      for (int co = 0; co < cout; ++co) omat.row(co).array() += bias->value[co];
  }

  auto cols_holder = std::make_shared<TensorT<T>>(std::move(cols));
  return make_op<T>(
      std::move(out), {x, weight, offset, bias ? bias : make_const(TensorT<T>())},
      [x, weight, offset, bias, cols_holder, n, cin, h, w, cout, plane, krows,
       with_bias](VarNode<T> &self) {
        CMapM<T> wmat(weight->value.data(), cout, krows);
        TensorT<T> gcol({krows, static_cast<int>(plane)});
        const bool need_x = x->requires_grad;
        const bool need_off = offset->requires_grad;
        for (int b = 0; b < n; ++b) {
          CMapM<T> gmat(self.grad.data() + static_cast<std::int64_t>(b) * cout * plane, cout,
                        plane);
          if (weight->requires_grad) {
            MapM<T> gw(weight->grad_buf().data(), cout, krows);
            CMapM<T> cmat(cols_holder->data() + static_cast<std::int64_t>(b) * krows * plane,
                          krows, plane);
            gw.noalias() += gmat * cmat.transpose();
          }
          if (with_bias && bias->requires_grad) {
            T *gb = bias->grad_buf().data();
            for (int co = 0; co < cout; ++co) gb[co] += gmat.row(co).sum();
          }
          if (!need_x && !need_off) continue;

          MapM<T> gcmat(gcol.data(), krows, plane);
          gcmat.noalias() = wmat.transpose() * gmat;

          const T *xb = x->value.data() + static_cast<std::int64_t>(b) * cin * plane;
          const T *ob = offset->value.data() + static_cast<std::int64_t>(b) * 18 * plane;
          T *gxb = need_x ? x->grad_buf().data() + static_cast<std::int64_t>(b) * cin * plane
                          : nullptr;
          T *gob = need_off
                       ? offset->grad_buf().data() + static_cast<std::int64_t>(b) * 18 * plane
                       : nullptr;
          for (int t = 0; t < 9; ++t) {
            const int ki = t / 3, kj = t % 3;
            const T *off_y = ob + (2 * t) * plane;
            const T *off_x = ob + (2 * t + 1) * plane;
            for (int oy = 0; oy < h; ++oy)
              for (int ox = 0; ox < w; ++ox) {
                const std::int64_t loc = static_cast<std::int64_t>(oy) * w + ox;
                const T sy = static_cast<T>(oy - 1 + ki) + off_y[loc];
                const T sx = static_cast<T>(ox - 1 + kj) + off_x[loc];
                if (sy <= T(-1) || sy >= static_cast<T>(h) || sx <= T(-1) ||
                    sx >= static_cast<T>(w))
                  continue;
                const int h_low = static_cast<int>(std::floor(sy));
                const int w_low = static_cast<int>(std::floor(sx));
                const T lh = sy - static_cast<T>(h_low), lw = sx - static_cast<T>(w_low);
                const T hh = T(1) - lh, hw = T(1) - lw;
                const bool v1_ok = h_low >= 0 && w_low >= 0;
                const bool v2_ok = h_low >= 0 && w_low + 1 <= w - 1;
                const bool v3_ok = h_low + 1 <= h - 1 && w_low >= 0;
                const bool v4_ok = h_low + 1 <= h - 1 && w_low + 1 <= w - 1;
                const std::int64_t base = static_cast<std::int64_t>(h_low) * w + w_low;
                T gy_acc = T(0), gx_acc = T(0);
                for (int ci = 0; ci < cin; ++ci) {
                  const T g = gcol[(static_cast<std::int64_t>(ci) * 9 + t) * plane + loc];
                  if (g == T(0)) continue;
                  const T *pl = xb + static_cast<std::int64_t>(ci) * plane;
                  if (need_x) {
                    T *gpl = gxb + static_cast<std::int64_t>(ci) * plane;
                    if (v1_ok) gpl[base] += g * hh * hw;
                    if (v2_ok) gpl[base + 1] += g * hh * lw;
                    if (v3_ok) gpl[base + w] += g * lh * hw;
                    if (v4_ok) gpl[base + w + 1] += g * lh * lw;
                  }
                  if (need_off) {
                    const T v1 = v1_ok ? pl[base] : T(0);
                    const T v2 = v2_ok ? pl[base + 1] : T(0);
                    const T v3 = v3_ok ? pl[base + w] : T(0);
                    const T v4 = v4_ok ? pl[base + w + 1] : T(0);
                    gy_acc += g * (-hw * v1 - lw * v2 + hw * v3 + lw * v4);
                    gx_acc += g * (-hh * v1 + hh * v2 - lh * v3 + lh * v4);
                  }
                }
                if (need_off) {
                  gob[(2 * t) * plane + loc] += gy_acc;
                  gob[(2 * t + 1) * plane + loc] += gx_acc;
                }
              }
          }
        }
      });
}

}  // namespace alignps
