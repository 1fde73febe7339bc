#pragma once

#include <cmath>
#include <vector>

#include "alignps/core.hpp"
#include "alignps/losses.hpp"
#include "alignps/nn.hpp"
#include "alignps/targets.hpp"

namespace alignps {

struct HeadConfig {
  int channels = 256;       // matches the aggregated map's D
  int tower_depth = 4;
  int num_levels = 1;       // one learnable box scale per emitted level
  float prior_prob = 0.01f;
  float radius = 1.5f;      // center-sampling radius in strides
  float focal_alpha = 0.25f, focal_gamma = 2.f;
  bool ctr_weighted_reg = true;  // weight GIoU terms by centerness targets
  float score_thresh = 0.05f, nms_thresh = 0.5f;
  int max_detections = 100;
};

template <typename T>
struct HeadOut {
  Var<T> cls_logits;  // Nx1xHxW
  Var<T> ctr_logits;  // Nx1xHxW (regression branch)
  Var<T> reg;         // Nx4xHxW, strictly positive via exp(scale * raw)
  Var<T> reg_tower;   // NxDxHxW, tapped by the T1 wiring
  Var<T> cls_tower;   // NxDxHxW, tapped by the T2 wiring
};

/// Two four-conv towers over the aggregated map: the regression branch emits
/// 4-channel box offsets (exponentiated with a per-level learnable scale)
/// plus centerness, the classification branch a single person logit whose
/// bias starts at log(p/(1-p)) so initial scores sit near the prior.
template <typename T>
class FcosHead {
 public:
  FcosHead() = default;
  FcosHead(const HeadConfig &cfg, Rng &rng) : cfg_(cfg) {
    const int d = cfg.channels;
    for (int i = 0; i < cfg.tower_depth; ++i) {
      reg_tower_.emplace_back(d, d, 3, 1, 1, rng);
      cls_tower_.emplace_back(d, d, 3, 1, 1, rng);
    }
    reg_pred_ = Conv2dLayer<T>(d, 4, 3, 1, 1, rng, T(0.01));
    ctr_pred_ = Conv2dLayer<T>(d, 1, 3, 1, 1, rng, T(0.01));
    const T prior_bias = std::log(T(cfg.prior_prob) / (T(1) - T(cfg.prior_prob)));
    cls_pred_ = Conv2dLayer<T>(d, 1, 3, 1, 1, rng, T(0.01), prior_bias);
    for (int i = 0; i < cfg.num_levels; ++i)
      scales_.push_back(make_leaf<T>(TensorT<T>::scalar(T(1))));
  }

  HeadOut<T> forward(const Var<T> &p, int level_idx) const {
    APS_CHECK(level_idx >= 0 && level_idx < static_cast<int>(scales_.size()),
              "head: level index out of range");
    HeadOut<T> out;
    Var<T> r = p, c = p;
    for (const auto &blk : reg_tower_) r = blk.forward(r);
    for (const auto &blk : cls_tower_) c = blk.forward(c);
    out.reg_tower = r;
    out.cls_tower = c;
    out.reg = exp_scale(reg_pred_.forward(r), scales_[static_cast<size_t>(level_idx)]);
    out.ctr_logits = ctr_pred_.forward(r);
    out.cls_logits = cls_pred_.forward(c);
    return out;
  }

  void register_params(ParamSet<T> &ps) {
    for (size_t i = 0; i < reg_tower_.size(); ++i)
      reg_tower_[i].register_params("head.reg_tower." + std::to_string(i), ps);
    for (size_t i = 0; i < cls_tower_.size(); ++i)
      cls_tower_[i].register_params("head.cls_tower." + std::to_string(i), ps);
    reg_pred_.register_params("head.reg_pred", ps);
    ctr_pred_.register_params("head.ctr_pred", ps);
    cls_pred_.register_params("head.cls_pred", ps);
    for (size_t i = 0; i < scales_.size(); ++i)
      ps.add("head.scale." + std::to_string(i), scales_[i]);
  }

  const HeadConfig &config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  std::vector<ConvBlock<T>> reg_tower_, cls_tower_;
  Conv2dLayer<T> reg_pred_, ctr_pred_, cls_pred_;
  std::vector<Var<T>> scales_;
};

template <typename T>
struct DetectionLossOut {
  Var<T> cls, reg, ctr;
  int num_pos = 0;
};

/// FCOS loss composition across the emitted levels: focal classification over
/// every valid location normalized by the global positive count, GIoU over
/// positives (optionally centerness-weighted, normalized by the weight sum),
/// and BCE on centerness at positives.
template <typename T>
DetectionLossOut<T> detection_loss(const std::vector<HeadOut<T>> &heads,
                                   const std::vector<LevelTargets> &targets,
                                   const HeadConfig &cfg) {
  APS_CHECK(heads.size() == targets.size(), "detection_loss: level count mismatch");
  int num_pos = 0;
  T weight_sum = T(0);
  for (const LevelTargets &lt : targets) {
    num_pos += lt.num_pos();
    for (float c : lt.pos_centerness) weight_sum += cfg.ctr_weighted_reg ? T(c) : T(1);
  }
  const T inv_pos = T(1) / static_cast<T>(std::max(1, num_pos));
  const T inv_wsum = weight_sum > T(0) ? T(1) / weight_sum : T(0);

  DetectionLossOut<T> out;
  out.num_pos = num_pos;
  for (size_t li = 0; li < heads.size(); ++li) {
    const LevelTargets &lt = targets[li];
    const HeadOut<T> &hd = heads[li];
    const std::int64_t n = static_cast<std::int64_t>(lt.batch) * lt.h * lt.w;
    APS_CHECK(hd.cls_logits->value.numel() == n, "detection_loss: target grid mismatch");

    TensorT<T> tgt({static_cast<int>(n)}), msk({static_cast<int>(n)});
    for (std::int64_t i = 0; i < n; ++i) {
      tgt[i] = static_cast<T>(lt.is_pos[static_cast<size_t>(i)]);
      msk[i] = static_cast<T>(lt.is_valid[static_cast<size_t>(i)]);
    }
    Var<T> cls = sigmoid_focal_loss(hd.cls_logits, std::move(tgt), std::move(msk),
                                    T(cfg.focal_alpha), T(cfg.focal_gamma), inv_pos);
    out.cls = out.cls ? add(out.cls, cls) : cls;

    if (lt.num_pos() == 0) continue;
    const int k = lt.num_pos();
    Var<T> pred = gather_locations(hd.reg, lt.pos_locs);
    TensorT<T> bt({k, 4});
    std::vector<T> w(static_cast<size_t>(k));
    std::vector<T> ctr_t(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < 4; ++j) bt.at2(i, j) = T(lt.pos_ltrb[static_cast<size_t>(i) * 4 + j]);
      w[static_cast<size_t>(i)] = cfg.ctr_weighted_reg ? T(lt.pos_centerness[static_cast<size_t>(i)]) : T(1);
      ctr_t[static_cast<size_t>(i)] = T(lt.pos_centerness[static_cast<size_t>(i)]);
    }
    Var<T> reg = giou_loss(pred, std::move(bt), std::move(w), inv_wsum);
    out.reg = out.reg ? add(out.reg, reg) : reg;

    Var<T> ctr_pred = gather_locations(hd.ctr_logits, lt.pos_locs);
    Var<T> ctr = bce_with_logits(ctr_pred, std::move(ctr_t), inv_pos);
    out.ctr = out.ctr ? add(out.ctr, ctr) : ctr;
  }
  if (!out.reg) out.reg = make_const<T>(TensorT<T>::scalar(T(0)));
  if (!out.ctr) out.ctr = make_const<T>(TensorT<T>::scalar(T(0)));
  return out;
}

/// Value-only view of one level's maps for inference-time decoding.
struct LevelMaps {
  const Tensor *cls = nullptr;    // Nx1xHxW logits
  const Tensor *ctr = nullptr;    // Nx1xHxW logits
  const Tensor *reg = nullptr;    // Nx4xHxW positive offsets
  const Tensor *embed = nullptr;  // NxDxHxW raw embedding field
  int stride = 8;
};

/// Decode per-image detections: final_score = sigmoid(cls)*sigmoid(ctr),
/// thresholded, boxes unfolded around location centers and clipped to the
/// valid region, greedy NMS, then top max_detections. Each detection carries
/// the L2-normalized embedding from its location.
std::vector<std::vector<Detection>> decode_detections(
    const std::vector<LevelMaps> &levels, const std::vector<std::pair<int, int>> &valid_wh,
    const HeadConfig &cfg);

}  // namespace alignps
