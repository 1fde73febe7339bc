#include "alignps/infer.hpp"

#include <algorithm>
#include <cmath>

#include "alignps/pipeline.hpp"

namespace alignps {

namespace {

// Nearest map cell for a pixel coordinate (cell centers sit at s/2 + i*s).
int nearest_cell(float px, int stride, int extent) {
  const int i = static_cast<int>(std::lround((px - 0.5f * stride) / static_cast<float>(stride)));
  return std::clamp(i, 0, extent - 1);
}

std::vector<float> embedding_at_cell(const Tensor &embed, int iy, int ix) {
  const int d = embed.dim(1);
  std::vector<float> vec(static_cast<size_t>(d));
  double norm = 0;
  for (int c = 0; c < d; ++c) {
    vec[static_cast<size_t>(c)] = embed.at4(0, c, iy, ix);
    norm += static_cast<double>(vec[static_cast<size_t>(c)]) * vec[static_cast<size_t>(c)];
  }
  norm = std::sqrt(std::max(norm, 1e-24));
  for (float &v : vec) v = static_cast<float>(v / norm);
  return vec;
}

}  // namespace

PredictionSet predict_dataset(const Model &model, const DatasetManifest &m,
                              const std::string &image_dir, const TransformConfig &tcfg) {
  PredictionSet preds;
  preds.queries.resize(m.queries.size());

  for (size_t i = 0; i < m.images.size(); ++i) {
    SceneImage scene = load_scene(m, image_dir, static_cast<int>(i));
    const int orig_w = scene.width(), orig_h = scene.height();
    SceneImage t = test_transform(scene, tcfg);
    const int valid_w = t.valid_width, valid_h = t.valid_height;
    // Realized resize factors (padding adds nothing beyond the valid region).
    const float rx = static_cast<float>(valid_w) / static_cast<float>(orig_w);
    const float ry = static_cast<float>(valid_h) / static_cast<float>(orig_h);

    std::vector<SceneImage> batch;
    batch.push_back(std::move(t));
    auto [x, metas] = batch_to_tensor<float>(batch);
    const auto out = model.forward(make_const<float>(std::move(x)));

    std::vector<LevelMaps> maps;
    for (size_t li = 0; li < out.levels.size(); ++li) {
      LevelMaps lm;
      lm.cls = &out.heads[li].cls_logits->value;
      lm.ctr = &out.heads[li].ctr_logits->value;
      lm.reg = &out.heads[li].reg->value;
      lm.embed = &out.embed[li]->value;
      lm.stride = out.levels[li].stride;
      maps.push_back(lm);
    }
    const auto dets = decode_detections(maps, {{valid_w, valid_h}}, model.config().head);

    ImagePredictions ip;
    ip.image = m.images[i].file;
    for (const Detection &d : dets[0]) {
      PredictedBox pb;
      pb.box = {d.box.x1 / rx, d.box.y1 / ry, d.box.x2 / rx, d.box.y2 / ry};
      pb.score = d.final_score;
      pb.embedding = d.embedding;
      ip.detections.push_back(std::move(pb));
    }
    preds.images.push_back(std::move(ip));

    // Serve queries anchored on this image from the same forward pass.
    for (size_t qi = 0; qi < m.queries.size(); ++qi) {
      const ManifestQuery &q = m.queries[qi];
      if (q.image != m.images[i].file) continue;
      const Tensor &embed = out.embed[0]->value;  // finest level
      const int stride = out.levels[0].stride;
      const int ix = nearest_cell(q.bbox.center_x() * rx, stride, embed.dim(3));
      const int iy = nearest_cell(q.bbox.center_y() * ry, stride, embed.dim(2));
      preds.queries[qi] = {q.image, q.identity, embedding_at_cell(embed, iy, ix)};
    }
  }
  return preds;
}

}  // namespace alignps
