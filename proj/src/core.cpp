#include "alignps/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace alignps {

float iou(const BoundingBox &a, const BoundingBox &b) {
  const float ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const float ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  const float iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0 || ih <= 0) return 0.f;
  const float inter = iw * ih;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.f;
}

std::vector<Detection> nms(const std::vector<Detection> &dets, float iou_thresh) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[a].final_score > dets[b].final_score;
  });
  std::vector<Detection> kept;
  for (int idx : order) {
    bool suppressed = false;
    for (const Detection &k : kept) {
      if (iou(dets[idx].box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

BoundingBox clip_box(const BoundingBox &b, float width, float height) {
  BoundingBox r;
  r.x1 = std::clamp(b.x1, 0.f, width);
  r.y1 = std::clamp(b.y1, 0.f, height);
  r.x2 = std::clamp(b.x2, 0.f, width);
  r.y2 = std::clamp(b.y2, 0.f, height);
  return r;
}

namespace {

// Bilinear sample of an HxWx3 image with edge clamping, align-corners=false
// convention: output pixel center maps to input coordinate (i + 0.5)/s - 0.5.
float sample_channel(const Tensor &px, float y, float x, int c) {
  const int h = px.dim(0), w = px.dim(1);
  const float yc = std::clamp(y, 0.f, static_cast<float>(h - 1));
  const float xc = std::clamp(x, 0.f, static_cast<float>(w - 1));
  const int y0 = static_cast<int>(std::floor(yc)), x0 = static_cast<int>(std::floor(xc));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const float fy = yc - y0, fx = xc - x0;
  auto at = [&](int yy, int xx) { return px.data()[(yy * w + xx) * 3 + c]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
         fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

SceneImage resize_with_boxes(const SceneImage &img, int target_long_side) {
  APS_CHECK(img.pixels.ndim() == 3 && img.pixels.dim(2) == 3,
            "resize_with_boxes: expected HxWx3 pixels, got " + shape_str(img.pixels.shape()));
  const int h = img.height(), w = img.width();
  APS_CHECK(h > 0 && w > 0, "resize_with_boxes: empty image");
  const float scale = static_cast<float>(target_long_side) / std::max(h, w);
  int nh, nw;
  if (h >= w) {
    nh = target_long_side;
    nw = std::max(1, static_cast<int>(std::lround(w * scale)));
  } else {
    nw = target_long_side;
    nh = std::max(1, static_cast<int>(std::lround(h * scale)));
  }
  const float sy = static_cast<float>(nh) / h, sx = static_cast<float>(nw) / w;

  SceneImage out;
  out.image_id = img.image_id;
  out.pixels = Tensor({nh, nw, 3});
  float *dst = out.pixels.data();
  for (int y = 0; y < nh; ++y) {
    const float syc = (y + 0.5f) / sy - 0.5f;
    for (int x = 0; x < nw; ++x) {
      const float sxc = (x + 0.5f) / sx - 0.5f;
      for (int c = 0; c < 3; ++c) dst[(y * nw + x) * 3 + c] = sample_channel(img.pixels, syc, sxc, c);
    }
  }
  out.annotations = img.annotations;
  for (PersonAnnotation &a : out.annotations) {
    a.box.x1 *= sx;
    a.box.x2 *= sx;
    a.box.y1 *= sy;
    a.box.y2 *= sy;
  }
  out.valid_width = nw;
  out.valid_height = nh;
  return out;
}

SceneImage flip_horizontal(const SceneImage &img) {
  const int h = img.height(), w = img.width();
  SceneImage out;
  out.image_id = img.image_id;
  out.pixels = Tensor({h, w, 3});
  const float *src = img.pixels.data();
  float *dst = out.pixels.data();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) dst[(y * w + x) * 3 + c] = src[(y * w + (w - 1 - x)) * 3 + c];
  out.annotations = img.annotations;
  for (PersonAnnotation &a : out.annotations) {
    const float x1 = a.box.x1, x2 = a.box.x2;
    a.box.x1 = w - x2;
    a.box.x2 = w - x1;
  }
  out.valid_width = img.valid_width;
  out.valid_height = img.valid_height;
  return out;
}

SceneImage pad_to(const SceneImage &img, int height, int width) {
  const int h = img.height(), w = img.width();
  APS_CHECK(height >= h && width >= w,
            "pad_to: target smaller than image (" + std::to_string(h) + "x" + std::to_string(w) +
                " -> " + std::to_string(height) + "x" + std::to_string(width) + ")");
  SceneImage out;
  out.image_id = img.image_id;
  out.annotations = img.annotations;
  out.pixels = Tensor::zeros({height, width, 3});
  const float *src = img.pixels.data();
  float *dst = out.pixels.data();
  for (int y = 0; y < h; ++y)
    std::copy(src + y * w * 3, src + (y + 1) * w * 3, dst + y * width * 3);
  out.valid_width = img.valid_width > 0 ? img.valid_width : w;
  out.valid_height = img.valid_height > 0 ? img.valid_height : h;
  return out;
}

}  // namespace alignps
