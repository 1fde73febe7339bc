#pragma once

#include <string>
#include <vector>

#include "alignps/tensor.hpp"

namespace alignps {

/// Pixel-space box, corner format. x2/y2 are exclusive-ish continuous
/// coordinates (width = x2 - x1), not inclusive pixel indices.
struct BoundingBox {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  float area() const { return width() > 0 && height() > 0 ? width() * height() : 0.f; }
  float center_x() const { return 0.5f * (x1 + x2); }
  float center_y() const { return 0.5f * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }
};

/// Identity label for annotated persons without a usable identity.
inline constexpr int kUnlabeledId = -1;

struct PersonAnnotation {
  BoundingBox box;
  int identity = kUnlabeledId;
  bool labeled() const { return identity >= 0; }
};

/// One image plus its annotations. `pixels` is HxWx3 float in [0,1].
/// valid_width/valid_height mark the real content region when the image has
/// been zero-padded (batching); they equal the tensor dims otherwise.
struct SceneImage {
  Tensor pixels;
  std::string image_id;
  std::vector<PersonAnnotation> annotations;
  int valid_width = 0, valid_height = 0;

  int width() const { return pixels.ndim() == 3 ? pixels.dim(1) : 0; }
  int height() const { return pixels.ndim() == 3 ? pixels.dim(0) : 0; }
};

struct Detection {
  BoundingBox box;
  float cls_score = 0, centerness = 0, final_score = 0;
  std::vector<float> embedding;
};

float iou(const BoundingBox &a, const BoundingBox &b);

/// Greedy NMS by descending final_score; suppresses any box whose IoU with an
/// already kept box exceeds `iou_thresh`. Ties in score break by input order.
std::vector<Detection> nms(const std::vector<Detection> &dets, float iou_thresh);

BoundingBox clip_box(const BoundingBox &b, float width, float height);

/// Ratio-preserving bilinear resize so the longer side equals
/// `target_long_side`; annotation boxes are scaled by the realized per-axis
/// factors so a resize there-and-back moves corners by < 0.5 px.
SceneImage resize_with_boxes(const SceneImage &img, int target_long_side);

/// Horizontal flip of pixels and boxes (train-time augmentation).
SceneImage flip_horizontal(const SceneImage &img);

/// Zero-pad bottom/right to exactly height x width; records the valid region.
SceneImage pad_to(const SceneImage &img, int height, int width);

}  // namespace alignps
