#include "alignps/head.hpp"

#include <algorithm>
#include <cmath>

namespace alignps {

namespace {

inline float sigmoid(float z) { return 1.f / (1.f + std::exp(-z)); }

}  // namespace

std::vector<std::vector<Detection>> decode_detections(
    const std::vector<LevelMaps> &levels, const std::vector<std::pair<int, int>> &valid_wh,
    const HeadConfig &cfg) {
  const int batch = static_cast<int>(valid_wh.size());
  std::vector<std::vector<Detection>> out(static_cast<size_t>(batch));

  for (int n = 0; n < batch; ++n) {
    const float vw = static_cast<float>(valid_wh[static_cast<size_t>(n)].first);
    const float vh = static_cast<float>(valid_wh[static_cast<size_t>(n)].second);
    std::vector<Detection> cands;
    for (const LevelMaps &lv : levels) {
      const int h = lv.cls->dim(2), w = lv.cls->dim(3), d = lv.embed->dim(1);
      for (int y = 0; y < h; ++y) {
        const float py = grid_to_px(y, lv.stride);
        if (py >= vh) continue;
        for (int x = 0; x < w; ++x) {
          const float px = grid_to_px(x, lv.stride);
          if (px >= vw) continue;
          Detection det;
          det.cls_score = sigmoid(lv.cls->at4(n, 0, y, x));
          det.centerness = sigmoid(lv.ctr->at4(n, 0, y, x));
          det.final_score = det.cls_score * det.centerness;
          if (det.final_score < cfg.score_thresh) continue;
          const float l = lv.reg->at4(n, 0, y, x), t = lv.reg->at4(n, 1, y, x);
          const float r = lv.reg->at4(n, 2, y, x), b = lv.reg->at4(n, 3, y, x);
          det.box = clip_box({px - l, py - t, px + r, py + b}, vw, vh);
          if (!det.box.valid()) continue;
          det.embedding.resize(static_cast<size_t>(d));
          float norm = 0.f;
          for (int c = 0; c < d; ++c) {
            const float v = lv.embed->at4(n, c, y, x);
            det.embedding[static_cast<size_t>(c)] = v;
            norm += v * v;
          }
          const float inv = 1.f / (std::sqrt(norm) + 1e-12f);
          for (float &v : det.embedding) v *= inv;
          cands.push_back(std::move(det));
        }
      }
    }
    std::vector<Detection> kept = nms(cands, cfg.nms_thresh);
    if (static_cast<int>(kept.size()) > cfg.max_detections)
      kept.resize(static_cast<size_t>(cfg.max_detections));
    out[static_cast<size_t>(n)] = std::move(kept);
  }
  return out;
}

}  // namespace alignps
