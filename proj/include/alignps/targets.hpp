#pragma once

#include <cstdint>
#include <vector>

#include "alignps/afa.hpp"
#include "alignps/core.hpp"
#include "alignps/ops.hpp"

namespace alignps {

/// View of one batch image for target assignment: its annotations plus the
/// un-padded content size (locations on padding are excluded from losses).
struct ImageMeta {
  const std::vector<PersonAnnotation> *annotations = nullptr;
  int valid_w = 0, valid_h = 0;
};

inline float grid_to_px(int i, int stride) { return 0.5f * stride + static_cast<float>(i) * stride; }

/// Per-location classification/regression targets for one pyramid level.
/// Positives carry (l,t,r,b) distances in pixels and a centerness score;
/// `owner` resolves overlapping boxes to the smaller one so re-id sampling
/// and detection supervision agree on which person a location belongs to.
struct LevelTargets {
  int batch = 0, h = 0, w = 0, stride = 8;
  std::vector<std::int8_t> is_pos;   // batch*h*w
  std::vector<std::int8_t> is_valid; // batch*h*w, 0 on padding
  std::vector<int> owner;            // annotation index within the image, -1 none

  std::vector<GridLoc> pos_locs;
  std::vector<float> pos_ltrb;        // 4 per positive
  std::vector<float> pos_centerness;  // 1 per positive
  std::vector<int> pos_ann;           // annotation index per positive

  std::int64_t idx(int n, int y, int x) const {
    return (static_cast<std::int64_t>(n) * h + y) * w + x;
  }
  int num_pos() const { return static_cast<int>(pos_locs.size()); }
};

/// FCOS-style assignment with center sampling: a location is positive iff it
/// lies within `radius`*stride (Chebyshev) of a ground-truth center and
/// strictly inside that box; overlaps resolve to the smaller box. In
/// multi-level configs only the annotations routed to `level_idx` by
/// assign_level participate.
LevelTargets assign_targets(const std::vector<ImageMeta> &batch, int h, int w, int stride,
                            float radius, int level_idx, const AfaConfig &afa);

float centerness_of(float l, float t, float r, float b);

/// The up-to-S positive locations owned by one annotation, ordered by
/// Chebyshev distance to the box center (ties row-major). Falls back to the
/// single grid location nearest the center when the annotation owns none.
std::vector<GridLoc> person_sample_locations(const LevelTargets &lt, int image_idx, int ann_idx,
                                             const BoundingBox &box, int s);

}  // namespace alignps
