#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "alignps/data.hpp"
#include "alignps/eval.hpp"
#include "alignps/head.hpp"
#include "alignps/random.hpp"
#include "alignps/targets.hpp"
#include "doctest.h"

using namespace alignps;

namespace {

std::string temp_dir(const std::string &tag) {
  const auto p = std::filesystem::temp_directory_path() / ("alignps_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

SyntheticSpec small_spec() {
  SyntheticSpec s;
  s.width = 200;
  s.height = 160;
  s.identity_count = 6;
  s.max_persons = 3;
  return s;
}

// Scale/phase-invariant appearance descriptor: mean color of the brighter
// and of the darker pixel rows inside the box. Recovers the two stripe
// colors regardless of how many stripes the box shows.
std::vector<float> appearance_descriptor(const Tensor &pixels, const BoundingBox &b) {
  const int h = pixels.dim(0), w = pixels.dim(1);
  const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, w - 1);
  const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, h - 1);
  const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)), x1 + 1, w);
  const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)), y1 + 1, h);
  std::vector<float> row_lum(static_cast<size_t>(y2 - y1), 0.f);
  std::vector<std::array<float, 3>> row_mean(static_cast<size_t>(y2 - y1), {0, 0, 0});
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x)
      for (int c = 0; c < 3; ++c) row_mean[static_cast<size_t>(y - y1)][static_cast<size_t>(c)] += pixels.at3(y, x, c);
    for (int c = 0; c < 3; ++c) row_mean[static_cast<size_t>(y - y1)][static_cast<size_t>(c)] /= static_cast<float>(x2 - x1);
    row_lum[static_cast<size_t>(y - y1)] =
        row_mean[static_cast<size_t>(y - y1)][0] + row_mean[static_cast<size_t>(y - y1)][1] + row_mean[static_cast<size_t>(y - y1)][2];
  }
  std::vector<float> sorted = row_lum;
  std::sort(sorted.begin(), sorted.end());
  const float median = sorted[sorted.size() / 2];
  std::array<double, 3> hi{0, 0, 0}, lo{0, 0, 0};
  int nhi = 0, nlo = 0;
  for (size_t r = 0; r < row_lum.size(); ++r) {
    if (row_lum[r] >= median) {
      for (int c = 0; c < 3; ++c) hi[static_cast<size_t>(c)] += row_mean[r][static_cast<size_t>(c)];
      ++nhi;
    } else {
      for (int c = 0; c < 3; ++c) lo[static_cast<size_t>(c)] += row_mean[r][static_cast<size_t>(c)];
      ++nlo;
    }
  }
  std::vector<float> desc(6);
  for (int c = 0; c < 3; ++c) {
    desc[static_cast<size_t>(c)] = nhi ? static_cast<float>(hi[static_cast<size_t>(c)] / nhi) : 0.f;
    desc[static_cast<size_t>(3 + c)] = nlo ? static_cast<float>(lo[static_cast<size_t>(c)] / nlo) : desc[static_cast<size_t>(c)];
  }
  return desc;
}

AfaConfig p3_only() {
  AfaConfig a;
  a.levels = OutputLevels::kP3Only;
  return a;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("same seed generates byte-identical manifests and pixels") {
    const SyntheticSpec spec = small_spec();
    const SyntheticDataset a = generate_synthetic(spec, 6, false, 99);
    const SyntheticDataset b = generate_synthetic(spec, 6, false, 99);
    CHECK(serialize_manifest(a.manifest) == serialize_manifest(b.manifest));
    REQUIRE(a.images.size() == b.images.size());
    for (size_t i = 0; i < a.images.size(); ++i) {
      const Tensor &pa = a.images[i].pixels, &pb = b.images[i].pixels;
      REQUIRE(pa.numel() == pb.numel());
      for (std::int64_t k = 0; k < pa.numel(); ++k) REQUIRE(pa[k] == pb[k]);
    }
    const SyntheticDataset c = generate_synthetic(spec, 6, false, 100);
    CHECK(serialize_manifest(a.manifest) != serialize_manifest(c.manifest));
  }

  TEST_CASE("labels stay inside the configured identity range") {
    SyntheticSpec spec = small_spec();
    spec.identity_count = 2;
    const SyntheticDataset ds = generate_synthetic(spec, 10, false, 7);
    int seen = 0;
    for (const ManifestImage &img : ds.manifest.images)
      for (const ManifestPerson &p : img.persons) {
        ++seen;
        CHECK((p.identity == kUnlabeledId || p.identity == 0 || p.identity == 1));
      }
    CHECK(seen > 0);
  }

  TEST_CASE("zero occlusion probability means disjoint person boxes") {
    SyntheticSpec spec = small_spec();
    spec.max_persons = 4;
    const SyntheticDataset ds = generate_synthetic(spec, 12, false, 3);
    for (const ManifestImage &img : ds.manifest.images)
      for (size_t i = 0; i < img.persons.size(); ++i)
        for (size_t j = i + 1; j < img.persons.size(); ++j)
          CHECK(iou(img.persons[i].bbox, img.persons[j].bbox) == 0.f);
  }

  TEST_CASE("manifest survives a serialize/parse round trip") {
    const SyntheticDataset ds = generate_synthetic(small_spec(), 5, true, 11);
    const std::string text = serialize_manifest(ds.manifest);
    const DatasetManifest back = parse_manifest(text);
    CHECK(serialize_manifest(back) == text);
    REQUIRE(back.images.size() == ds.manifest.images.size());
    REQUIRE(back.queries.size() == ds.manifest.queries.size());
    CHECK(back.split == "test");
    CHECK(back.labeled_identity_count == ds.manifest.labeled_identity_count);
    for (size_t i = 0; i < back.images.size(); ++i) {
      CHECK(back.images[i].file == ds.manifest.images[i].file);
      REQUIRE(back.images[i].persons.size() == ds.manifest.images[i].persons.size());
      for (size_t p = 0; p < back.images[i].persons.size(); ++p) {
        CHECK(back.images[i].persons[p].identity == ds.manifest.images[i].persons[p].identity);
        CHECK(back.images[i].persons[p].bbox.x1 == ds.manifest.images[i].persons[p].bbox.x1);
      }
    }
  }

  TEST_CASE("unlabeled persons serialize as null identity") {
    DatasetManifest m;
    m.split = "train";
    m.labeled_identity_count = 1;
    m.images.push_back({"a.ppm", {{{1, 2, 3, 4}, kUnlabeledId}, {{5, 6, 7, 8}, 0}}});
    const std::string text = serialize_manifest(m);
    CHECK(text.find("null") != std::string::npos);
    const DatasetManifest back = parse_manifest(text);
    CHECK(back.images[0].persons[0].identity == kUnlabeledId);
    CHECK(back.images[0].persons[1].identity == 0);
  }

  TEST_CASE("ppm io round trip is exact up to 8-bit quantization") {
    Rng rng(5);
    Tensor img({23, 17, 3});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<float>(rng.uniform());
    const std::string dir = temp_dir("ppm");
    const std::string path = dir + "/x.ppm";
    write_ppm(img, path);
    const Tensor back = read_ppm(path);
    REQUIRE(back.dim(0) == 23);
    REQUIRE(back.dim(1) == 17);
    float max_err = 0;
    for (std::int64_t i = 0; i < img.numel(); ++i)
      max_err = std::max(max_err, std::abs(img[i] - back[i]));
    CHECK(max_err <= 0.5f / 255.f + 1e-6f);
    // A second write of the read-back image is byte-stable.
    write_ppm(back, dir + "/y.ppm");
    CHECK(read_ppm(dir + "/y.ppm")[0] == back[0]);
  }

  TEST_CASE("saved dataset loads back with identical annotations") {
    const SyntheticDataset ds = generate_synthetic(small_spec(), 4, false, 21);
    const std::string dir = temp_dir("dataset");
    const std::string mpath = save_dataset(ds, dir);
    const DatasetManifest m = load_manifest(mpath);
    CHECK(serialize_manifest(m) == serialize_manifest(ds.manifest));
    const SceneImage scene = load_scene(m, dir, 2);
    REQUIRE(scene.annotations.size() == ds.images[2].annotations.size());
    for (size_t i = 0; i < scene.annotations.size(); ++i) {
      CHECK(scene.annotations[i].identity == ds.images[2].annotations[i].identity);
      CHECK(scene.annotations[i].box.x2 == ds.images[2].annotations[i].box.x2);
    }
    float max_err = 0;
    for (std::int64_t i = 0; i < scene.pixels.numel(); ++i)
      max_err = std::max(max_err, std::abs(scene.pixels[i] - ds.images[2].pixels[i]));
    CHECK(max_err <= 0.5f / 255.f + 1e-6f);
  }

  TEST_CASE("appearance signatures are pairwise distinct") {
    for (int a = 0; a < 16; ++a)
      for (int b = a + 1; b < 16; ++b) {
        const AppearanceSig sa = identity_appearance(a), sb = identity_appearance(b);
        float c1_gap = 0;
        for (int c = 0; c < 3; ++c) c1_gap += std::abs(sa.c1[c] - sb.c1[c]);
        CHECK((c1_gap > 0.05f || sa.period != sb.period));
      }
  }

  TEST_CASE("degenerate resize range is deterministic and flips mirror boxes") {
    const SyntheticDataset ds = generate_synthetic(small_spec(), 1, false, 31);
    TransformConfig cfg;
    cfg.train_min_long = 400;
    cfg.train_max_long = 400;

    cfg.flip_prob = 0.f;
    Rng r1(1);
    const SceneImage plain = train_transform(ds.images[0], cfg, r1);
    CHECK(std::max(plain.width(), plain.height()) == 400);
    const SceneImage ref = resize_with_boxes(ds.images[0], 400);
    REQUIRE(plain.annotations.size() == ref.annotations.size());
    for (size_t i = 0; i < plain.annotations.size(); ++i)
      CHECK(plain.annotations[i].box.x1 == ref.annotations[i].box.x1);

    cfg.flip_prob = 1.f;
    Rng r2(1);
    const SceneImage flipped = train_transform(ds.images[0], cfg, r2);
    const SceneImage ref_flip = flip_horizontal(ref);
    for (size_t i = 0; i < flipped.annotations.size(); ++i) {
      CHECK(flipped.annotations[i].box.x1 == doctest::Approx(ref_flip.annotations[i].box.x1));
      CHECK(flipped.annotations[i].box.x2 == doctest::Approx(ref_flip.annotations[i].box.x2));
    }
  }

  TEST_CASE("test transform emits the canonical canvas with a ratio-true valid region") {
    const SyntheticDataset ds = generate_synthetic(small_spec(), 1, false, 41);
    const TransformConfig cfg = desk_transforms();
    const SceneImage t = test_transform(ds.images[0], cfg);
    CHECK(t.width() == cfg.test_w);
    CHECK(t.height() == cfg.test_h);
    CHECK(t.valid_width <= cfg.test_w);
    CHECK(t.valid_height <= cfg.test_h);
    // One axis binds (up to the resize rounding the other by a pixel).
    CHECK((t.valid_width >= cfg.test_w - 1 || t.valid_height >= cfg.test_h - 1));
    const float rx = static_cast<float>(t.valid_width) / static_cast<float>(ds.images[0].width());
    const float ry = static_cast<float>(t.valid_height) / static_cast<float>(ds.images[0].height());
    CHECK(std::abs(rx - ry) < 0.02f);
    for (const PersonAnnotation &a : t.annotations) {
      CHECK(a.box.x2 <= static_cast<float>(t.valid_width) + 0.5f);
      CHECK(a.box.y2 <= static_cast<float>(t.valid_height) + 0.5f);
    }
    // Extreme aspect ratios still fit the canvas after rounding.
    SceneImage skinny;
    skinny.pixels = Tensor::zeros({639, 33, 3});
    const SceneImage ts = test_transform(skinny, cfg);
    CHECK(ts.width() == cfg.test_w);
    CHECK(ts.height() == cfg.test_h);
  }

  TEST_CASE("padded grid cells are excluded from the detection loss") {
    // Two copies of the same image, both padded inside an 8x8 stride-8 grid;
    // the second copy gets garbage logits in the padding. If masking works,
    // the batch loss equals the single-image loss exactly.
    std::vector<PersonAnnotation> anns = {{{8, 8, 34, 36}, 0}};
    const std::vector<ImageMeta> one = {{&anns, 40, 40}};
    const std::vector<ImageMeta> two = {{&anns, 40, 40}, {&anns, 40, 40}};
    HeadConfig hcfg;

    Rng rng(13);
    auto fill = [&rng](Tensor &t, float lo, float hi) {
      for (std::int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.uniform(lo, hi));
    };
    Tensor cls1({1, 1, 8, 8}), ctr1({1, 1, 8, 8}), reg1({1, 4, 8, 8});
    fill(cls1, -3, 3);
    fill(ctr1, -2, 2);
    fill(reg1, 1, 30);

    auto duplicate = [](const Tensor &src) {
      std::vector<int> shp = src.shape();
      shp[0] = 2;
      Tensor out(shp);
      const std::int64_t n = src.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        out[i] = src[i];
        out[n + i] = src[i];
      }
      return out;
    };
    Tensor cls2 = duplicate(cls1), ctr2 = duplicate(ctr1), reg2 = duplicate(reg1);
    // Poison the second image's classification logits outside the valid
    // region (cell centers at 4 + 8i; valid means center < 40, so i >= 5).
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (y >= 5 || x >= 5) cls2.at4(1, 0, y, x) = 40.f;

    auto head_out = [](Tensor cls, Tensor ctr, Tensor reg) {
      HeadOut<float> h;
      h.cls_logits = make_const<float>(std::move(cls));
      h.ctr_logits = make_const<float>(std::move(ctr));
      h.reg = make_const<float>(std::move(reg));
      return h;
    };
    const auto t1 = assign_targets(one, 8, 8, 8, 1.5f, 0, p3_only());
    const auto t2 = assign_targets(two, 8, 8, 8, 1.5f, 0, p3_only());
    REQUIRE(t1.num_pos() > 0);
    REQUIRE(t2.num_pos() == 2 * t1.num_pos());

    const auto l1 = detection_loss<float>({head_out(cls1, ctr1, reg1)}, {t1}, hcfg);
    const auto l2 = detection_loss<float>({head_out(cls2, ctr2, reg2)}, {t2}, hcfg);
    CHECK(l2.cls->value[0] == doctest::Approx(l1.cls->value[0]).epsilon(1e-5));
    CHECK(l2.reg->value[0] == doctest::Approx(l1.reg->value[0]).epsilon(1e-5));
    CHECK(l2.ctr->value[0] == doctest::Approx(l1.ctr->value[0]).epsilon(1e-5));

    // Sanity: the same garbage inside the valid region does change the loss.
    Tensor cls3 = duplicate(cls1);
    cls3.at4(1, 0, 2, 2) = 40.f;
    const auto l3 = detection_loss<float>({head_out(cls3, ctr2, reg2)}, {t2}, hcfg);
    CHECK(std::abs(l3.cls->value[0] - l1.cls->value[0]) > 1e-3f);
  }

  TEST_CASE("test split queries always have galleries excluding their own image") {
    const SyntheticDataset ds = generate_synthetic(small_spec(), 10, true, 77);
    REQUIRE(!ds.manifest.queries.empty());
    for (const ManifestQuery &q : ds.manifest.queries) {
      CHECK(q.identity >= 0);
      CHECK(!q.gallery.empty());
      for (const std::string &g : q.gallery) CHECK(g != q.image);
      // The queried identity exists somewhere in the gallery.
      int gt = 0;
      for (const ManifestImage &img : ds.manifest.images)
        if (std::find(q.gallery.begin(), q.gallery.end(), img.file) != q.gallery.end())
          for (const ManifestPerson &p : img.persons)
            if (p.identity == q.identity) ++gt;
      CHECK(gt >= 1);
    }
  }

  TEST_CASE("nearest-appearance retrieval solves the synthetic benchmark perfectly") {
    SyntheticSpec spec = small_spec();
    spec.unlabeled_prob = 0.f;  // isolate the evaluator: no distractor persons
    const SyntheticDataset ds = generate_synthetic(spec, 16, true, 2024);
    REQUIRE(ds.manifest.queries.size() >= 3);

    PredictionSet preds;
    preds.queries.resize(ds.manifest.queries.size());
    for (size_t i = 0; i < ds.images.size(); ++i) {
      ImagePredictions ip;
      ip.image = ds.manifest.images[i].file;
      for (const PersonAnnotation &a : ds.images[i].annotations)
        ip.detections.push_back(
            {a.box, 1.f, appearance_descriptor(ds.images[i].pixels, a.box)});
      preds.images.push_back(std::move(ip));
      for (size_t qi = 0; qi < ds.manifest.queries.size(); ++qi)
        if (ds.manifest.queries[qi].image == ds.manifest.images[i].file)
          preds.queries[qi] = {ds.manifest.queries[qi].image, ds.manifest.queries[qi].identity,
                               appearance_descriptor(ds.images[i].pixels,
                                                     ds.manifest.queries[qi].bbox)};
    }

    std::vector<GalleryMatch> matches;
    for (size_t qi = 0; qi < ds.manifest.queries.size(); ++qi)
      matches.push_back(search(preds, ds.manifest, static_cast<int>(qi)));
    const SearchMetrics sm = person_search_map(matches);
    CHECK(sm.skipped == 0);
    CHECK(sm.map == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(sm.top1 == doctest::Approx(1.0).epsilon(1e-6));

    const DetectionMetrics dm = detection_metrics(preds, ds.manifest);
    CHECK(dm.recall == doctest::Approx(1.0));
    CHECK(dm.ap == doctest::Approx(1.0));
  }
}
