#pragma once

#include <utility>
#include <vector>

#include "alignps/model.hpp"
#include "alignps/reid.hpp"
#include "alignps/targets.hpp"

namespace alignps {

/// Identity-matching loss composition knobs. `embed_dim` and the memory
/// geometry live in ReidMemory itself; these are the per-step choices.
struct ReidLossConfig {
  bool focal = true;       // focal-modulated softmax term
  float focal_gamma = 2.f;
  bool use_triplet = true;     // off = plain softmax-memory loss only
  bool triplet_use_lut = true; // include the stored identity centers as set elements
  float margin = 0.3f;
  int samples_per_person = 5;  // S locations nearest the person center
};

/// Stack 2D (K_i x D) row blocks into one (sum K_i) x D matrix.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>> &parts) {
  APS_CHECK(!parts.empty(), "concat_rows: no inputs");
  if (parts.size() == 1) return parts[0];
  const int d = parts[0]->value.dim(1);
  int rows = 0;
  for (const auto &p : parts) {
    APS_CHECK(p->value.ndim() == 2 && p->value.dim(1) == d, "concat_rows: column mismatch");
    rows += p->value.dim(0);
  }
  TensorT<T> out({rows, d});
  int at = 0;
  for (const auto &p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.numel(), &out.at2(at, 0));
    at += p->value.dim(0);
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return make_op<T>(std::move(out), inputs, [parts, d](VarNode<T> &self) {
    int at = 0;
    for (const auto &p : parts) {
      const int k = p->value.dim(0);
      if (p->requires_grad) {
        T *g = p->grad_buf().data();
        const T *s = &self.grad.at2(at, 0);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(k) * d; ++i) g[i] += s[i];
      }
      at += k;
    }
  });
}

/// Batch images into one NCHW tensor (zero-padded bottom/right to the max
/// extent) and per-image metadata for target assignment. Pixels are shifted
/// to [-1, 1]; padding stays 0 and is masked out of losses via the metas.
template <typename T>
std::pair<TensorT<T>, std::vector<ImageMeta>> batch_to_tensor(
    const std::vector<SceneImage> &batch) {
  APS_CHECK(!batch.empty(), "batch_to_tensor: empty batch");
  int hmax = 0, wmax = 0;
  for (const auto &img : batch) {
    hmax = std::max(hmax, img.height());
    wmax = std::max(wmax, img.width());
  }
  TensorT<T> x({static_cast<int>(batch.size()), 3, hmax, wmax});
  std::vector<ImageMeta> metas;
  for (size_t n = 0; n < batch.size(); ++n) {
    const SceneImage &img = batch[n];
    const int vw = img.valid_width > 0 ? img.valid_width : img.width();
    const int vh = img.valid_height > 0 ? img.valid_height : img.height();
    for (int y = 0; y < img.height(); ++y)
      for (int xx = 0; xx < img.width(); ++xx)
        for (int c = 0; c < 3; ++c)
          x.at4(static_cast<int>(n), c, y, xx) =
              T(2) * static_cast<T>(img.pixels.at3(y, xx, c)) - T(1);
    metas.push_back({&img.annotations, vw, vh});
  }
  return {std::move(x), std::move(metas)};
}

// The metas point into the batch's annotation vectors, so a temporary batch
// would leave them dangling; require an lvalue.
template <typename T>
std::pair<TensorT<T>, std::vector<ImageMeta>> batch_to_tensor(std::vector<SceneImage> &&) = delete;

/// Everything one optimizer step needs: loss terms plus the feature payload
/// for the post-step memory update (one center-most embedding per person;
/// labeled ones fold into the identity table, unlabeled ones into the queue).
template <typename T>
struct LossBundle {
  DetectionLossOut<T> det;
  Var<T> reid_softmax;  // scalar (zero const when no labeled persons)
  Var<T> reid_triplet;  // scalar (zero const when disabled / undefined)
  Var<T> total;
  std::vector<std::pair<int, std::vector<T>>> labeled_feats;
  std::vector<std::vector<T>> unlabeled_feats;
  std::vector<LevelTargets> targets;
};

/// Joint loss: w_det * (cls + reg + ctr) + w_reid * (softmax-memory term
/// [+ triplet term]). Per person, the up-to-S positive locations nearest its
/// center are sampled from the embedding field of the level the box is
/// routed to; every sampled location of a labeled person is a softmax-loss
/// sample, and per-identity sets (pooled across the batch, optionally with
/// the stored center) feed the triplet term.
template <typename T>
LossBundle<T> compute_losses(const typename PersonSearchModel<T>::Out &out,
                             const std::vector<ImageMeta> &metas, const ReidMemoryT<T> &mem,
                             const ModelConfig &mcfg, const ReidLossConfig &rcfg, T w_det,
                             T w_reid) {
  LossBundle<T> lb;
  const int num_levels = static_cast<int>(out.levels.size());

  for (int li = 0; li < num_levels; ++li) {
    const auto &m = out.heads[static_cast<size_t>(li)].cls_logits->value;
    lb.targets.push_back(assign_targets(metas, m.dim(2), m.dim(3), out.levels[static_cast<size_t>(li)].stride,
                                        mcfg.head.radius, li, mcfg.afa));
  }
  lb.det = detection_loss(out.heads, lb.targets, mcfg.head);

  // Gather per-person sample locations, level by level.
  struct PersonRows {
    int identity = kUnlabeledId;
    int row = 0, count = 0;  // rows within the stacked embedding matrix
  };
  std::vector<PersonRows> persons;
  std::vector<Var<T>> blocks;
  int row_base = 0;
  for (int li = 0; li < num_levels; ++li) {
    std::vector<GridLoc> locs;
    const LevelTargets &lt = lb.targets[static_cast<size_t>(li)];
    for (size_t n = 0; n < metas.size(); ++n) {
      const auto &anns = *metas[n].annotations;
      for (size_t a = 0; a < anns.size(); ++a) {
        if (assign_level(anns[a].box.width(), anns[a].box.height(), mcfg.afa) != li) continue;
        auto pl = person_sample_locations(lt, static_cast<int>(n), static_cast<int>(a),
                                          anns[a].box, rcfg.samples_per_person);
        if (pl.empty()) continue;
        persons.push_back({anns[a].identity, row_base, static_cast<int>(pl.size())});
        row_base += static_cast<int>(pl.size());
        locs.insert(locs.end(), pl.begin(), pl.end());
      }
    }
    if (!locs.empty())
      blocks.push_back(extract_embeddings(out.embed[static_cast<size_t>(li)], locs));
  }

  Var<T> feats;
  if (!blocks.empty()) feats = concat_rows(blocks);

  // Memory-update payload: the center-most (first-sampled) location of each
  // person, one entry per annotation.
  if (feats) {
    const int d = feats->value.dim(1);
    for (const PersonRows &p : persons) {
      std::vector<T> e(static_cast<size_t>(d));
      std::copy(&feats->value.at2(p.row, 0), &feats->value.at2(p.row, 0) + d, e.begin());
      if (p.identity >= 0)
        lb.labeled_feats.emplace_back(p.identity, std::move(e));
      else
        lb.unlabeled_feats.push_back(std::move(e));
    }
  }

  // Softmax-memory term over every sampled location of labeled persons.
  std::vector<int> row_ids;
  std::vector<int> labeled_rows;
  for (const PersonRows &p : persons) {
    if (p.identity < 0) continue;
    for (int r = 0; r < p.count; ++r) {
      labeled_rows.push_back(p.row + r);
      row_ids.push_back(p.identity);
    }
  }
  if (feats && !labeled_rows.empty()) {
    // Slice the labeled rows out (unlabeled persons sit between them).
    std::vector<GridLoc> ident;  // reuse gather via a 4D reshape-free path
    Var<T> labeled_mat;
    if (static_cast<int>(labeled_rows.size()) == feats->value.dim(0)) {
      labeled_mat = feats;
    } else {
      const int d = feats->value.dim(1);
      TensorT<T> sel({static_cast<int>(labeled_rows.size()), d});
      for (size_t i = 0; i < labeled_rows.size(); ++i)
        std::copy(&feats->value.at2(labeled_rows[i], 0), &feats->value.at2(labeled_rows[i], 0) + d,
                  &sel.at2(static_cast<int>(i), 0));
      Var<T> src = feats;
      auto rows = labeled_rows;
      labeled_mat = make_op<T>(std::move(sel), {src}, [src, rows, d](VarNode<T> &self) {
        if (!src->requires_grad) return;
        for (size_t i = 0; i < rows.size(); ++i) {
          T *g = &src->grad_buf().at2(rows[i], 0);
          const T *s = &self.grad.at2(static_cast<int>(i), 0);
          for (int c = 0; c < d; ++c) g[c] += s[c];
        }
      });
    }
    lb.reid_softmax = oim_loss(labeled_mat, row_ids, mem, rcfg.focal, T(rcfg.focal_gamma));
  } else {
    lb.reid_softmax = make_const<T>(TensorT<T>::scalar(T(0)));
  }

  // Triplet term over per-identity sets pooled across the batch.
  if (feats && rcfg.use_triplet) {
    TripletSets sets;
    std::vector<int> set_of_id;
    for (const PersonRows &p : persons) {
      if (p.identity < 0) continue;
      int si = -1;
      for (size_t s = 0; s < sets.lut_rows.size(); ++s)
        if (set_of_id[s] == p.identity) si = static_cast<int>(s);
      if (si < 0) {
        si = static_cast<int>(sets.feat_rows.size());
        sets.feat_rows.emplace_back();
        sets.lut_rows.push_back(rcfg.triplet_use_lut ? p.identity : -1);
        set_of_id.push_back(p.identity);
      }
      for (int r = 0; r < p.count; ++r) sets.feat_rows[static_cast<size_t>(si)].push_back(p.row + r);
    }
    lb.reid_triplet = triplet_loss(feats, sets, mem.lut, T(rcfg.margin));
  } else {
    lb.reid_triplet = make_const<T>(TensorT<T>::scalar(T(0)));
  }

  Var<T> det_total = add(add(lb.det.cls, lb.det.reg), lb.det.ctr);
  Var<T> reid_total = add(lb.reid_softmax, lb.reid_triplet);
  lb.total = add(scale(det_total, w_det), scale(reid_total, w_reid));
  return lb;
}

}  // namespace alignps
