#include "alignps/targets.hpp"

#include <algorithm>
#include <cmath>

namespace alignps {

float centerness_of(float l, float t, float r, float b) {
  const float lr = std::min(l, r) / std::max(l, r);
  const float tb = std::min(t, b) / std::max(t, b);
  return std::sqrt(lr * tb);
}

LevelTargets assign_targets(const std::vector<ImageMeta> &batch, int h, int w, int stride,
                            float radius, int level_idx, const AfaConfig &afa) {
  LevelTargets lt;
  lt.batch = static_cast<int>(batch.size());
  lt.h = h;
  lt.w = w;
  lt.stride = stride;
  const std::int64_t total = static_cast<std::int64_t>(lt.batch) * h * w;
  lt.is_pos.assign(total, 0);
  lt.is_valid.assign(total, 0);
  lt.owner.assign(total, -1);

  for (int n = 0; n < lt.batch; ++n) {
    const ImageMeta &meta = batch[static_cast<size_t>(n)];
    const auto &anns = *meta.annotations;
    for (int y = 0; y < h; ++y) {
      const float py = grid_to_px(y, stride);
      for (int x = 0; x < w; ++x) {
        const float px = grid_to_px(x, stride);
        const std::int64_t li = lt.idx(n, y, x);
        if (px >= static_cast<float>(meta.valid_w) || py >= static_cast<float>(meta.valid_h))
          continue;
        lt.is_valid[li] = 1;

        int best = -1;
        float best_area = 0;
        for (int a = 0; a < static_cast<int>(anns.size()); ++a) {
          const BoundingBox &bx = anns[static_cast<size_t>(a)].box;
          if (assign_level(bx.width(), bx.height(), afa) != level_idx) continue;
          if (std::fabs(px - bx.center_x()) > radius * stride ||
              std::fabs(py - bx.center_y()) > radius * stride)
            continue;
          const float l = px - bx.x1, t = py - bx.y1, r = bx.x2 - px, b = bx.y2 - py;
          if (l <= 0 || t <= 0 || r <= 0 || b <= 0) continue;
          const float area = bx.area();
          if (best < 0 || area < best_area) {
            best = a;
            best_area = area;
          }
        }
        if (best < 0) continue;

        const BoundingBox &bx = anns[static_cast<size_t>(best)].box;
        lt.is_pos[li] = 1;
        lt.owner[li] = best;
        lt.pos_locs.push_back({n, y, x});
        lt.pos_ltrb.push_back(px - bx.x1);
        lt.pos_ltrb.push_back(py - bx.y1);
        lt.pos_ltrb.push_back(bx.x2 - px);
        lt.pos_ltrb.push_back(bx.y2 - py);
        lt.pos_centerness.push_back(
            centerness_of(px - bx.x1, py - bx.y1, bx.x2 - px, bx.y2 - py));
        lt.pos_ann.push_back(best);
      }
    }
  }
  return lt;
}

std::vector<GridLoc> person_sample_locations(const LevelTargets &lt, int image_idx, int ann_idx,
                                             const BoundingBox &box, int s) {
  struct Cand {
    float dist;
    GridLoc loc;
  };
  std::vector<Cand> cands;
  const float cx = box.center_x(), cy = box.center_y();
  for (size_t i = 0; i < lt.pos_locs.size(); ++i) {
    const GridLoc &g = lt.pos_locs[i];
    if (g.n != image_idx || lt.pos_ann[i] != ann_idx) continue;
    const float px = grid_to_px(g.x, lt.stride), py = grid_to_px(g.y, lt.stride);
    cands.push_back({std::max(std::fabs(px - cx), std::fabs(py - cy)), g});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand &a, const Cand &b) { return a.dist < b.dist; });
  std::vector<GridLoc> out;
  for (const Cand &c : cands) {
    if (static_cast<int>(out.size()) >= s) break;
    out.push_back(c.loc);
  }
  if (out.empty()) {
    // Person too small (or fully shadowed by an overlap) to own a positive
    // location: take the grid cell nearest its center.
    int gx = static_cast<int>(std::lround((cx - 0.5f * lt.stride) / lt.stride));
    int gy = static_cast<int>(std::lround((cy - 0.5f * lt.stride) / lt.stride));
    gx = std::clamp(gx, 0, lt.w - 1);
    gy = std::clamp(gy, 0, lt.h - 1);
    out.push_back({image_idx, gy, gx});
  }
  return out;
}

}  // namespace alignps
