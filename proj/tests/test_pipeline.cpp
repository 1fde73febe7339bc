#include <cmath>
#include <vector>

#include "alignps/data.hpp"
#include "alignps/pipeline.hpp"
#include "alignps/random.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace alignps;

namespace {

ModelConfig tiny_model_cfg(int d) {
  ModelConfig mc;
  mc.backbone.c3 = 8;
  mc.backbone.c4 = 12;
  mc.backbone.c5 = 16;
  mc.afa.out_channels = d;
  mc.head.tower_depth = 1;
  return mc;
}

SceneImage scene_with(const std::vector<PersonAnnotation> &anns, int h, int w, Rng &rng) {
  SceneImage img;
  img.pixels = Tensor({h, w, 3});
  for (std::int64_t i = 0; i < img.pixels.numel(); ++i)
    img.pixels[i] = static_cast<float>(rng.uniform());
  img.annotations = anns;
  img.valid_width = w;
  img.valid_height = h;
  return img;
}

template <typename T>
T scalar_of(const Var<T> &v) {
  return v->value[0];
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("batching pads to the max extent and shifts pixels to [-1,1]") {
    Rng rng(8);
    const SceneImage a = scene_with({}, 16, 24, rng);
    const SceneImage b = scene_with({}, 32, 20, rng);
    const std::vector<SceneImage> batch = {a, b};
    const auto [x, metas] = batch_to_tensor<float>(batch);
    REQUIRE(x.ndim() == 4);
    CHECK(x.dim(0) == 2);
    CHECK(x.dim(1) == 3);
    CHECK(x.dim(2) == 32);
    CHECK(x.dim(3) == 24);
    CHECK(x.at4(0, 1, 5, 7) == doctest::Approx(2.f * a.pixels.at3(5, 7, 1) - 1.f));
    CHECK(x.at4(1, 2, 30, 19) == doctest::Approx(2.f * b.pixels.at3(30, 19, 2) - 1.f));
    // Padding regions stay zero: rows below image a, columns right of image b.
    CHECK(x.at4(0, 0, 20, 5) == 0.f);
    CHECK(x.at4(1, 0, 5, 21) == 0.f);
    REQUIRE(metas.size() == 2);
    CHECK(metas[0].valid_w == 24);
    CHECK(metas[0].valid_h == 16);
    CHECK(metas[1].valid_w == 20);
    CHECK(metas[1].valid_h == 32);
  }

  TEST_CASE("joint loss decomposes into weighted detection and matching terms") {
    Rng rng(21);
    const ModelConfig mc = tiny_model_cfg(16);
    Model model(mc, rng);
    ReidMemory mem = ReidMemory::random_init(6, 8, 16, rng);

    Rng drng(22);
    std::vector<PersonAnnotation> anns0 = {{{10, 8, 34, 60}, 0}, {{50, 20, 78, 80}, 3}};
    std::vector<PersonAnnotation> anns1 = {{{20, 30, 48, 88}, 0}, {{60, 10, 82, 58}, kUnlabeledId}};
    const SceneImage i0 = scene_with(anns0, 96, 96, drng);
    const SceneImage i1 = scene_with(anns1, 96, 96, drng);

    const std::vector<SceneImage> batch = {i0, i1};
    const auto [x, metas] = batch_to_tensor<float>(batch);
    const auto out = model.forward(make_const<float>(x));
    ReidLossConfig rcfg;

    const auto lb = compute_losses<float>(out, metas, mem, mc, rcfg, 1.f, 1.f);
    const float det_sum = scalar_of(lb.det.cls) + scalar_of(lb.det.reg) + scalar_of(lb.det.ctr);
    const float reid_sum = scalar_of(lb.reid_softmax) + scalar_of(lb.reid_triplet);
    CHECK(std::isfinite(scalar_of(lb.total)));
    CHECK(scalar_of(lb.total) == doctest::Approx(det_sum + reid_sum).epsilon(1e-5));
    CHECK(scalar_of(lb.reid_softmax) > 0.f);

    // Three labeled persons feed the identity table, one unlabeled the queue.
    CHECK(lb.labeled_feats.size() == 3);
    CHECK(lb.unlabeled_feats.size() == 1);
    for (const auto &[id, e] : lb.labeled_feats) {
      CHECK(id >= 0);
      double n = 0;
      for (float v : e) n += static_cast<double>(v) * v;
      CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-4));
    }

    // Loss weights gate each family exactly.
    const auto det_only = compute_losses<float>(out, metas, mem, mc, rcfg, 1.f, 0.f);
    CHECK(scalar_of(det_only.total) == doctest::Approx(det_sum).epsilon(1e-5));
    const auto reid_only = compute_losses<float>(out, metas, mem, mc, rcfg, 0.f, 1.f);
    CHECK(scalar_of(reid_only.total) == doctest::Approx(reid_sum).epsilon(1e-5));

    // Identical inputs give bitwise-identical totals.
    Rng rng2(21);
    Model model2(tiny_model_cfg(16), rng2);
    Rng drng2(22);
    const SceneImage j0 = scene_with(anns0, 96, 96, drng2);
    const SceneImage j1 = scene_with(anns1, 96, 96, drng2);
    Rng mrng1(100), mrng2(100);
    ReidMemory mem1 = ReidMemory::random_init(6, 8, 16, mrng1);
    ReidMemory mem2 = ReidMemory::random_init(6, 8, 16, mrng2);
    const std::vector<SceneImage> batch2 = {j0, j1};
    const auto [x2, metas2] = batch_to_tensor<float>(batch2);
    const auto out2 = model2.forward(make_const<float>(x2));
    const auto la = compute_losses<float>(out, metas, mem1, mc, rcfg, 1.f, 1.f);
    const auto lc = compute_losses<float>(out2, metas2, mem2, mc, rcfg, 1.f, 1.f);
    CHECK(scalar_of(la.total) == scalar_of(lc.total));
  }

  TEST_CASE("images without labeled persons still produce a usable loss") {
    Rng rng(31);
    const ModelConfig mc = tiny_model_cfg(12);
    Model model(mc, rng);
    ReidMemory mem = ReidMemory::random_init(4, 4, 12, rng);
    Rng drng(32);
    std::vector<PersonAnnotation> anns = {{{12, 12, 40, 70}, kUnlabeledId}};
    const SceneImage img = scene_with(anns, 96, 96, drng);
    const std::vector<SceneImage> batch = {img};
    const auto [x, metas] = batch_to_tensor<float>(batch);
    const auto out = model.forward(make_const<float>(x));
    ReidLossConfig rcfg;
    const auto lb = compute_losses<float>(out, metas, mem, mc, rcfg, 1.f, 1.f);
    CHECK(scalar_of(lb.reid_softmax) == 0.f);   // nothing labeled to classify
    CHECK(scalar_of(lb.reid_triplet) == 0.f);   // fewer than two identity sets
    CHECK(lb.labeled_feats.empty());
    CHECK(lb.unlabeled_feats.size() == 1);
    CHECK(std::isfinite(scalar_of(lb.total)));
    CHECK(scalar_of(lb.total) > 0.f);
  }

  TEST_CASE("end-to-end gradients match finite differences") {
    Rng rng(41);
    ModelConfig mc = tiny_model_cfg(8);
    mc.backbone.c3 = 6;
    mc.backbone.c4 = 8;
    mc.backbone.c5 = 10;
    PersonSearchModel<double> model(mc, rng);
    ReidMemoryT<double> mem = ReidMemoryT<double>::random_init(4, 4, 8, rng);

    ParamSet<double> ps = model.params();
    // Zero-init deform offsets sit exactly on the pixel lattice where the
    // bilinear sampler has kinks; nudge them into the smooth regime so the
    // finite differences are meaningful.
    for (auto &[name, v] : ps.items) {
      if (name.find("offset_bias") != std::string::npos)
        for (std::int64_t i = 0; i < v->value.numel(); ++i)
          v->value[i] = rng.uniform(0.12, 0.37);
      if (name.find("offset_weight") != std::string::npos)
        for (std::int64_t i = 0; i < v->value.numel(); ++i)
          v->value[i] = rng.normal() * 0.01;
    }

    std::vector<PersonAnnotation> anns = {{{6, 4, 22, 40}, 0}, {{26, 8, 44, 44}, 2}};
    SceneImage img;
    img.pixels = Tensor({48, 48, 3});
    Rng drng(42);
    for (std::int64_t i = 0; i < img.pixels.numel(); ++i)
      img.pixels[i] = static_cast<float>(drng.uniform());
    img.annotations = anns;
    img.valid_width = 48;
    img.valid_height = 48;
    const std::vector<SceneImage> batch = {img};
    const auto [xf, metas] = batch_to_tensor<double>(batch);

    ReidLossConfig rcfg;
    rcfg.samples_per_person = 3;
    auto loss_fn = [&]() {
      const auto out = model.forward(make_const<double>(xf));
      return compute_losses<double>(out, metas, mem, mc, rcfg, 1.0, 1.0).total;
    };

    std::vector<Var<double>> leaves;
    for (auto &[n, v] : ps.items) leaves.push_back(v);
    testutil::GradCheck gc;
    gc.max_probes = 6;
    CHECK(gc.max_rel_error(leaves, loss_fn) < 2e-3);
  }
}
