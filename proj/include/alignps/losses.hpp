#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "alignps/autodiff.hpp"

namespace alignps {

template <typename T>
T softplus(T z) {
  return std::log1p(std::exp(-std::fabs(z))) + std::max(z, T(0));
}

/// Sigmoid focal loss over every element of a logit map, masked by `valid`
/// (0 on image padding) and scaled by `inv_norm` (caller passes
/// 1/max(1, #positives) across the whole batch). `targets` holds 0/1 labels.
///
/// Per element: p_t = target ? sigmoid(z) : 1-sigmoid(z), alpha_t likewise,
/// term = -alpha_t * (1-p_t)^gamma * log(p_t). log(p_t) is computed as a
/// softplus so extreme logits stay finite, and the backward folds the 1/p_t
/// factor into dp_t/dz analytically:
///   dterm/dz = alpha_t * sign * [gamma*(1-p_t)^gamma * p_t * log(p_t)
///                                - (1-p_t)^(gamma+1)]
/// with sign = +1 for target 1 and -1 for target 0 (gamma=0 recovers the
/// plain BCE gradient).
template <typename T>
Var<T> sigmoid_focal_loss(const Var<T> &logits, TensorT<T> targets, TensorT<T> valid, T alpha,
                          T gamma, T inv_norm) {
  const std::int64_t n = logits->value.numel();
  APS_CHECK(targets.numel() == n && valid.numel() == n, "focal loss: target/mask size mismatch");
  auto tgt = std::make_shared<TensorT<T>>(std::move(targets));
  auto msk = std::make_shared<TensorT<T>>(std::move(valid));

  const T *pz = logits->value.data();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (msk->data()[i] == T(0)) continue;
    const bool pos = tgt->data()[i] > T(0.5);
    const T z = pz[i];
    const T log_pt = pos ? -softplus(-z) : -softplus(z);
    const T pt = std::exp(log_pt);
    const T at = pos ? alpha : T(1) - alpha;
    acc += -at * std::pow(T(1) - pt, gamma) * log_pt;
  }
  return make_op<T>(TensorT<T>::scalar(acc * inv_norm), {logits},
                    [logits, tgt, msk, alpha, gamma, inv_norm, n](VarNode<T> &self) {
                      if (!logits->requires_grad) return;
                      const T g = self.grad[0] * inv_norm;
                      const T *pz = logits->value.data();
                      T *gz = logits->grad_buf().data();
                      for (std::int64_t i = 0; i < n; ++i) {
                        if (msk->data()[i] == T(0)) continue;
                        const bool pos = tgt->data()[i] > T(0.5);
                        const T z = pz[i];
                        const T log_pt = pos ? -softplus(-z) : -softplus(z);
                        const T pt = std::exp(log_pt);
                        const T at = pos ? alpha : T(1) - alpha;
                        const T sign = pos ? T(1) : T(-1);
                        const T omp = T(1) - pt;
                        const T d = at * sign *
                                    (gamma * std::pow(omp, gamma) * pt * log_pt -
                                     std::pow(omp, gamma + T(1)));
                        gz[i] += g * d;
                      }
                    });
}

/// Weighted GIoU loss over K (l,t,r,b) box predictions against targets at
/// the same locations: sum_k w_k * (1 - GIoU_k) * inv_denom. Inputs must be
/// positive (the head's exp mapping guarantees it), which keeps intersection
/// and enclosing extents strictly positive.
template <typename T>
Var<T> giou_loss(const Var<T> &pred_ltrb, TensorT<T> target_ltrb, std::vector<T> weights,
                 T inv_denom) {
  const int k = pred_ltrb->value.dim(0);
  APS_CHECK(pred_ltrb->value.ndim() == 2 && pred_ltrb->value.dim(1) == 4,
            "giou_loss: predictions must be Kx4");
  APS_CHECK(target_ltrb.numel() == static_cast<std::int64_t>(k) * 4 &&
                static_cast<int>(weights.size()) == k,
            "giou_loss: target/weight size mismatch");
  auto tgt = std::make_shared<TensorT<T>>(std::move(target_ltrb));
  auto wts = std::make_shared<std::vector<T>>(std::move(weights));

  auto giou_of = [](const T *p, const T *q, T *dgdp) {
    const T iw = std::min(p[0], q[0]) + std::min(p[2], q[2]);
    const T ih = std::min(p[1], q[1]) + std::min(p[3], q[3]);
    const T cw = std::max(p[0], q[0]) + std::max(p[2], q[2]);
    const T ch = std::max(p[1], q[1]) + std::max(p[3], q[3]);
    const T ap = (p[0] + p[2]) * (p[1] + p[3]);
    const T aq = (q[0] + q[2]) * (q[1] + q[3]);
    const T inter = iw * ih;
    const T uni = ap + aq - inter;
    const T enc = cw * ch;
    const T giou = inter / uni - (enc - uni) / enc;  // = I/U - 1 + U/C
    if (dgdp) {
      const T dg_di = T(1) / uni;
      const T dg_du = -inter / (uni * uni) + T(1) / enc;
      const T dg_dc = -uni / (enc * enc);
      for (int j = 0; j < 4; ++j) {
        const bool horizontal = (j % 2 == 0);
        const T di = (p[j] < q[j] ? T(1) : T(0)) * (horizontal ? ih : iw);
        const T dc = (p[j] > q[j] ? T(1) : T(0)) * (horizontal ? ch : cw);
        const T da = horizontal ? (p[1] + p[3]) : (p[0] + p[2]);
        const T du = da - di;
        dgdp[j] = dg_di * di + dg_du * du + dg_dc * dc;
      }
    }
    return giou;
  };

  T acc = T(0);
  for (int i = 0; i < k; ++i)
    acc += (*wts)[static_cast<size_t>(i)] *
           (T(1) - giou_of(&pred_ltrb->value.at2(i, 0), &tgt->at2(i, 0), nullptr));
  return make_op<T>(TensorT<T>::scalar(acc * inv_denom), {pred_ltrb},
                    [pred_ltrb, tgt, wts, inv_denom, k, giou_of](VarNode<T> &self) {
                      if (!pred_ltrb->requires_grad) return;
                      const T g = self.grad[0] * inv_denom;
                      for (int i = 0; i < k; ++i) {
                        T dgdp[4];
                        giou_of(&pred_ltrb->value.at2(i, 0), &tgt->at2(i, 0), dgdp);
                        T *gp = &pred_ltrb->grad_buf().at2(i, 0);
                        const T w = (*wts)[static_cast<size_t>(i)];
                        for (int j = 0; j < 4; ++j) gp[j] += -g * w * dgdp[j];
                      }
                    });
}

/// Mean binary cross-entropy with logits over a flat vector, scaled by
/// inv_norm (1/max(1,#positives)). Targets may be soft (centerness in [0,1]).
template <typename T>
Var<T> bce_with_logits(const Var<T> &logits, std::vector<T> targets, T inv_norm) {
  const std::int64_t n = logits->value.numel();
  APS_CHECK(static_cast<std::int64_t>(targets.size()) == n, "bce: target size mismatch");
  auto tgt = std::make_shared<std::vector<T>>(std::move(targets));
  const T *pz = logits->value.data();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += softplus(pz[i]) - (*tgt)[static_cast<size_t>(i)] * pz[i];
  return make_op<T>(TensorT<T>::scalar(acc * inv_norm), {logits},
                    [logits, tgt, inv_norm, n](VarNode<T> &self) {
                      if (!logits->requires_grad) return;
                      const T g = self.grad[0] * inv_norm;
                      const T *pz = logits->value.data();
                      T *gz = logits->grad_buf().data();
                      for (std::int64_t i = 0; i < n; ++i) {
                        const T p = T(1) / (T(1) + std::exp(-pz[i]));
                        gz[i] += g * (p - (*tgt)[static_cast<size_t>(i)]);
                      }
                    });
}

}  // namespace alignps
