#pragma once

#include <cmath>
#include <vector>

#include "alignps/autodiff.hpp"

namespace alignps {

/// Feature-map location in batch coordinates (grid indices, not pixels).
struct GridLoc {
  int n;
  int y;
  int x;
};

template <typename T>
Var<T> add(const Var<T> &a, const Var<T> &b) {
  APS_CHECK(a->value.same_shape(b->value), "add: shape mismatch");
  TensorT<T> out(a->value.shape());
  const T *pa = a->value.data(), *pb = b->value.data();
  T *po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op<T>(std::move(out), {a, b}, [a, b](VarNode<T> &self) {
    const T *g = self.grad.data();
    const std::int64_t m = self.grad.numel();
    if (a->requires_grad) {
      T *ga = a->grad_buf().data();
      for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i];
    }
    if (b->requires_grad) {
      T *gb = b->grad_buf().data();
      for (std::int64_t i = 0; i < m; ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T> &a, T s) {
  TensorT<T> out(a->value.shape());
  const T *pa = a->value.data();
  T *po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  return make_op<T>(std::move(out), {a}, [a, s](VarNode<T> &self) {
    if (!a->requires_grad) return;
    const T *g = self.grad.data();
    T *ga = a->grad_buf().data();
    const std::int64_t m = self.grad.numel();
    for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i] * s;
  });
}

template <typename T>
Var<T> relu(const Var<T> &a) {
  TensorT<T> out(a->value.shape());
  const T *pa = a->value.data();
  T *po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  return make_op<T>(std::move(out), {a}, [a](VarNode<T> &self) {
    if (!a->requires_grad) return;
    const T *g = self.grad.data();
    const T *pa = a->value.data();
    T *ga = a->grad_buf().data();
    const std::int64_t m = self.grad.numel();
    for (std::int64_t i = 0; i < m; ++i)
      if (pa[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var<T> sum_all(const Var<T> &a) {
  T acc = T(0);
  const T *pa = a->value.data();
  const std::int64_t n = a->value.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += pa[i];
  return make_op<T>(TensorT<T>::scalar(acc), {a}, [a](VarNode<T> &self) {
    if (!a->requires_grad) return;
    const T g = self.grad[0];
    T *ga = a->grad_buf().data();
    const std::int64_t m = a->value.numel();
    for (std::int64_t i = 0; i < m; ++i) ga[i] += g;
  });
}

/// Concatenate NCHW maps along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>> &xs) {
  APS_CHECK(!xs.empty(), "concat: empty input");
  const int n = xs[0]->value.dim(0), h = xs[0]->value.dim(2), w = xs[0]->value.dim(3);
  int c_total = 0;
  for (const auto &x : xs) {
    APS_CHECK(x->value.ndim() == 4 && x->value.dim(0) == n && x->value.dim(2) == h &&
                  x->value.dim(3) == w,
              "concat: incompatible shapes");
    c_total += x->value.dim(1);
  }
  TensorT<T> out({n, c_total, h, w});
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    std::int64_t c_off = 0;
    for (const auto &x : xs) {
      const int c = x->value.dim(1);
      const T *src = x->value.data() + static_cast<std::int64_t>(b) * c * plane;
      T *dst = out.data() + (static_cast<std::int64_t>(b) * c_total + c_off) * plane;
      std::copy(src, src + static_cast<std::int64_t>(c) * plane, dst);
      c_off += c;
    }
  }
  return make_op<T>(std::move(out), xs, [xs, n, c_total, plane](VarNode<T> &self) {
    for (int b = 0; b < n; ++b) {
      std::int64_t c_off = 0;
      for (const auto &x : xs) {
        const int c = x->value.dim(1);
        if (x->requires_grad) {
          const T *g = self.grad.data() + (static_cast<std::int64_t>(b) * c_total + c_off) * plane;
          T *gx = x->grad_buf().data() + static_cast<std::int64_t>(b) * c * plane;
          const std::int64_t m = static_cast<std::int64_t>(c) * plane;
          for (std::int64_t i = 0; i < m; ++i) gx[i] += g[i];
        }
        c_off += c;
      }
    }
  });
}

/// Nearest-neighbor 2x upsampling; out size may be 2H or 2H-1 per axis so
/// that top-down fusion matches ceil-divided lateral sizes.
template <typename T>
Var<T> upsample2x_nearest(const Var<T> &a, int out_h, int out_w) {
  const int n = a->value.dim(0), c = a->value.dim(1), h = a->value.dim(2), w = a->value.dim(3);
  APS_CHECK(out_h >= 2 * h - 1 && out_h <= 2 * h && out_w >= 2 * w - 1 && out_w <= 2 * w,
            "upsample2x: target size is not a 2x relation");
  TensorT<T> out({n, c, out_h, out_w});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < out_h; ++y) {
        const T *row = &a->value.at4(b, ch, y >> 1, 0);
        T *orow = &out.at4(b, ch, y, 0);
        for (int x = 0; x < out_w; ++x) orow[x] = row[x >> 1];
      }
  return make_op<T>(std::move(out), {a}, [a, n, c, out_h, out_w](VarNode<T> &self) {
    if (!a->requires_grad) return;
    TensorT<T> &ga = a->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_h; ++y) {
          const T *grow = &self.grad.at4(b, ch, y, 0);
          T *garow = &ga.at4(b, ch, y >> 1, 0);
          for (int x = 0; x < out_w; ++x) garow[x >> 1] += grow[x];
        }
  });
}

/// Gather channel vectors at grid locations from an NCHW map; result is KxC.
template <typename T>
Var<T> gather_locations(const Var<T> &map, const std::vector<GridLoc> &locs) {
  const int c = map->value.dim(1);
  const int k = static_cast<int>(locs.size());
  TensorT<T> out({k, c});
  for (int i = 0; i < k; ++i)
    for (int ch = 0; ch < c; ++ch)
      out.at2(i, ch) = map->value.at4(locs[i].n, ch, locs[i].y, locs[i].x);
  return make_op<T>(std::move(out), {map}, [map, locs, c, k](VarNode<T> &self) {
    if (!map->requires_grad) return;
    TensorT<T> &gm = map->grad_buf();
    for (int i = 0; i < k; ++i)
      for (int ch = 0; ch < c; ++ch)
        gm.at4(locs[i].n, ch, locs[i].y, locs[i].x) += self.grad.at2(i, ch);
  });
}

/// Row-wise L2 normalization of a KxD matrix.
template <typename T>
Var<T> l2_normalize_rows(const Var<T> &m, T eps = T(1e-12)) {
  const int k = m->value.dim(0), d = m->value.dim(1);
  TensorT<T> out({k, d});
  std::vector<T> inv_norm(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    T s = T(0);
    const T *row = &m->value.at2(i, 0);
    for (int j = 0; j < d; ++j) s += row[j] * row[j];
    const T inv = T(1) / (std::sqrt(s) + eps);
    inv_norm[static_cast<size_t>(i)] = inv;
    T *orow = &out.at2(i, 0);
    for (int j = 0; j < d; ++j) orow[j] = row[j] * inv;
  }
  return make_op<T>(std::move(out), {m}, [m, k, d, inv_norm](VarNode<T> &self) {
    if (!m->requires_grad) return;
    TensorT<T> &gm = m->grad_buf();
    for (int i = 0; i < k; ++i) {
      const T *g = &self.grad.at2(i, 0);
      const T *y = &self.value.at2(i, 0);
      T dot = T(0);
      for (int j = 0; j < d; ++j) dot += g[j] * y[j];
      const T inv = inv_norm[static_cast<size_t>(i)];
      T *grow = &gm.at2(i, 0);
      for (int j = 0; j < d; ++j) grow[j] += (g[j] - y[j] * dot) * inv;
    }
  });
}

/// Elementwise exp(s * x) with a learnable scalar s (FCOS-style box scale).
template <typename T>
Var<T> exp_scale(const Var<T> &x, const Var<T> &s) {
  APS_CHECK(s->value.numel() == 1, "exp_scale: s must be scalar");
  const T sv = s->value[0];
  TensorT<T> out(x->value.shape());
  const T *px = x->value.data();
  T *po = out.data();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = std::exp(sv * px[i]);
  return make_op<T>(std::move(out), {x, s}, [x, s, sv](VarNode<T> &self) {
    const T *g = self.grad.data();
    const T *po = self.value.data();
    const T *px = x->value.data();
    const std::int64_t m = self.grad.numel();
    if (x->requires_grad) {
      T *gx = x->grad_buf().data();
      for (std::int64_t i = 0; i < m; ++i) gx[i] += g[i] * po[i] * sv;
    }
    if (s->requires_grad) {
      T acc = T(0);
      for (std::int64_t i = 0; i < m; ++i) acc += g[i] * po[i] * px[i];
      s->grad_buf()[0] += acc;
    }
  });
}

/// Group normalization over NCHW input.
template <typename T>
Var<T> group_norm(const Var<T> &x, const Var<T> &gamma, const Var<T> &beta, int groups,
                  T eps = T(1e-5)) {
  const int n = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
  APS_CHECK(c % groups == 0, "group_norm: channels not divisible by groups");
  const int cpg = c / groups;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t gsize = cpg * plane;

  TensorT<T> out({n, c, h, w});
  std::vector<T> mean(static_cast<size_t>(n) * groups), inv_std(static_cast<size_t>(n) * groups);
  for (int b = 0; b < n; ++b)
    for (int g = 0; g < groups; ++g) {
      const T *px = &x->value.at4(b, g * cpg, 0, 0);
      T mu = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) mu += px[i];
      mu /= static_cast<T>(gsize);
      T var = T(0);
      for (std::int64_t i = 0; i < gsize; ++i) {
        const T d = px[i] - mu;
        var += d * d;
      }
      var /= static_cast<T>(gsize);
      const T istd = T(1) / std::sqrt(var + eps);
      mean[static_cast<size_t>(b) * groups + g] = mu;
      inv_std[static_cast<size_t>(b) * groups + g] = istd;
      T *po = &out.at4(b, g * cpg, 0, 0);
      for (int cc = 0; cc < cpg; ++cc) {
        const T ga = gamma->value[g * cpg + cc];
        const T be = beta->value[g * cpg + cc];
        for (std::int64_t i = 0; i < plane; ++i) {
          const std::int64_t idx = cc * plane + i;
          po[idx] = (px[idx] - mu) * istd * ga + be;
        }
      }
    }

  return make_op<T>(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, n, c, groups, cpg, plane, gsize, mean, inv_std](VarNode<T> &self) {
        for (int b = 0; b < n; ++b)
          for (int g = 0; g < groups; ++g) {
            const T mu = mean[static_cast<size_t>(b) * groups + g];
            const T istd = inv_std[static_cast<size_t>(b) * groups + g];
            const T *px = &x->value.at4(b, g * cpg, 0, 0);
            const T *pg = &self.grad.at4(b, g * cpg, 0, 0);

            // dgamma/dbeta and the within-group reductions for dx.
            T sum_gh = T(0), sum_gh_xh = T(0);
            for (int cc = 0; cc < cpg; ++cc) {
              const T ga = gamma->value[g * cpg + cc];
              T dga = T(0), dbe = T(0);
              for (std::int64_t i = 0; i < plane; ++i) {
                const std::int64_t idx = cc * plane + i;
                const T xh = (px[idx] - mu) * istd;
                dga += pg[idx] * xh;
                dbe += pg[idx];
                sum_gh += pg[idx] * ga;
                sum_gh_xh += pg[idx] * ga * xh;
              }
              if (gamma->requires_grad) gamma->grad_buf()[g * cpg + cc] += dga;
              if (beta->requires_grad) beta->grad_buf()[g * cpg + cc] += dbe;
            }
            if (!x->requires_grad) continue;
            const T mean_gh = sum_gh / static_cast<T>(gsize);
            const T mean_gh_xh = sum_gh_xh / static_cast<T>(gsize);
            T *gx = &x->grad_buf().at4(b, g * cpg, 0, 0);
            for (int cc = 0; cc < cpg; ++cc) {
              const T ga = gamma->value[g * cpg + cc];
              for (std::int64_t i = 0; i < plane; ++i) {
                const std::int64_t idx = cc * plane + i;
                const T xh = (px[idx] - mu) * istd;
                gx[idx] += istd * (pg[idx] * ga - mean_gh - xh * mean_gh_xh);
              }
            }
          }
      });
}

}  // namespace alignps
