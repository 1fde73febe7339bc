#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "alignps/data.hpp"
#include "alignps/eval.hpp"
#include "alignps/random.hpp"
#include "doctest.h"

using namespace alignps;

namespace {

// Orthogonal-ish embeddings whose pairwise cosine we can dial exactly: the
// query points along e0, a candidate at angle a has cosine cos(a).
std::vector<float> dial(float cosine) {
  const float s = std::sqrt(std::max(0.f, 1.f - cosine * cosine));
  return {cosine, s};
}

// AP recomputed from the precision/recall sequence instead of the running
// hit count, as an independent check of average_precision.
double ap_oracle(const std::vector<bool> &correct_in_rank_order, int total_gt) {
  if (total_gt == 0) return 0;
  double ap = 0;
  int tp = 0;
  for (size_t k = 0; k < correct_in_rank_order.size(); ++k) {
    const int prev_tp = tp;
    if (correct_in_rank_order[k]) ++tp;
    const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
    const double d_recall = static_cast<double>(tp - prev_tp) / static_cast<double>(total_gt);
    ap += precision * d_recall;
  }
  return ap;
}

GalleryMatch fake_match(const std::vector<bool> &flags, int total_gt) {
  GalleryMatch m;
  m.total_gt = total_gt;
  float sim = 1.f;
  for (bool f : flags) {
    RankedEntry e;
    e.similarity = sim -= 0.01f;
    e.correct = f;
    m.ranking.push_back(e);
  }
  return m;
}

// A one-identity world: each gallery image holds one 10x10 ground-truth box
// at a caller-chosen spot plus whatever detections the test injects.
struct World {
  DatasetManifest m;
  PredictionSet preds;

  World() {
    m.split = "test";
    m.labeled_identity_count = 4;
  }

  void add_image(const std::string &file, const std::vector<ManifestPerson> &persons) {
    m.images.push_back({file, persons});
    preds.images.push_back({file, {}});
  }

  void add_det(const std::string &file, const BoundingBox &b, float score, float cosine) {
    for (ImagePredictions &ip : preds.images)
      if (ip.image == file) ip.detections.push_back({b, score, dial(cosine)});
  }

  void add_query(const std::string &image, const BoundingBox &b, int identity,
                 std::vector<std::string> gallery) {
    m.queries.push_back({image, b, identity, std::move(gallery)});
    preds.queries.push_back({image, identity, dial(1.f)});
  }
};

BoundingBox box_at(float x, float y) { return {x, y, x + 10, y + 10}; }

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("hits at ranks 1 and 3 over two ground-truth instances give ap 5/6") {
    World w;
    w.add_image("q.ppm", {{box_at(0, 0), 1}});
    w.add_image("g1.ppm", {{box_at(0, 0), 1}});
    w.add_image("g2.ppm", {{box_at(50, 50), 1}, {box_at(0, 0), 2}});
    w.add_query("q.ppm", box_at(0, 0), 1, {"g1.ppm", "g2.ppm"});

    w.add_det("g1.ppm", box_at(0, 0), 0.9f, 0.95f);   // rank 1, correct
    w.add_det("g2.ppm", box_at(0, 0), 0.9f, 0.80f);   // rank 2, wrong identity's box
    w.add_det("g2.ppm", box_at(50, 50), 0.9f, 0.60f); // rank 3, correct

    const GalleryMatch match = search(w.preds, w.m, 0);
    REQUIRE(match.total_gt == 2);
    REQUIRE(match.ranking.size() == 3);
    CHECK(match.ranking[0].correct);
    CHECK(!match.ranking[1].correct);
    CHECK(match.ranking[2].correct);
    CHECK(average_precision(match) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));

    const SearchMetrics sm = person_search_map({match});
    CHECK(sm.map == doctest::Approx(5.0 / 6.0));
    CHECK(sm.top1 == doctest::Approx(1.0));
  }

  TEST_CASE("one correct high-similarity detection plus a low distractor is perfect") {
    World w;
    w.add_image("q.ppm", {{box_at(0, 0), 0}});
    w.add_image("g.ppm", {{box_at(20, 20), 0}});
    w.add_query("q.ppm", box_at(0, 0), 0, {"g.ppm"});
    w.add_det("g.ppm", box_at(20, 20), 1.f, 0.9f);
    w.add_det("g.ppm", box_at(70, 70), 1.f, 0.2f);
    const GalleryMatch match = search(w.preds, w.m, 0);
    CHECK(average_precision(match) == doctest::Approx(1.0));
  }

  TEST_CASE("all-perfect queries score map 1 and top1 1") {
    std::vector<GalleryMatch> matches;
    matches.push_back(fake_match({true, true}, 2));
    matches.push_back(fake_match({true}, 1));
    const SearchMetrics sm = person_search_map(matches);
    CHECK(sm.map == doctest::Approx(1.0));
    CHECK(sm.top1 == doctest::Approx(1.0));
    CHECK(sm.evaluated == 2);
    CHECK(sm.skipped == 0);
  }

  TEST_CASE("queries with no gallery ground truth are excluded") {
    std::vector<GalleryMatch> matches;
    matches.push_back(fake_match({true}, 1));
    matches.push_back(fake_match({false, false}, 0));  // nothing to find
    const SearchMetrics sm = person_search_map(matches);
    CHECK(sm.evaluated == 1);
    CHECK(sm.skipped == 1);
    CHECK(sm.map == doctest::Approx(1.0));
  }

  TEST_CASE("average precision matches the precision-recall oracle on random rankings") {
    Rng rng(400);
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 1 + static_cast<int>(rng.uniform_int(0, 11));
      std::vector<bool> flags(static_cast<size_t>(n));
      int hits = 0;
      for (size_t i = 0; i < flags.size(); ++i) {
        flags[i] = rng.bernoulli(0.4);
        hits += flags[i] ? 1 : 0;
      }
      const int total_gt = hits + static_cast<int>(rng.uniform_int(0, 3));
      if (total_gt == 0) continue;
      const GalleryMatch m = fake_match(flags, total_gt);
      CHECK(average_precision(m) == doctest::Approx(ap_oracle(flags, total_gt)).epsilon(1e-9));
    }
  }

  TEST_CASE("search matches a from-scratch ranking oracle on random worlds") {
    Rng rng(71);
    for (int trial = 0; trial < 30; ++trial) {
      World w;
      const int n_img = 3 + static_cast<int>(rng.uniform_int(0, 3));
      std::vector<std::string> gallery;
      for (int i = 0; i < n_img; ++i) {
        const std::string file = "img" + std::to_string(i) + ".ppm";
        std::vector<ManifestPerson> persons;
        const int np = static_cast<int>(rng.uniform_int(0, 2));
        for (int p = 0; p < np; ++p)
          persons.push_back({box_at(static_cast<float>(30 * p), static_cast<float>(20 * i)),
                             static_cast<int>(rng.uniform_int(0, 2))});
        w.add_image(file, persons);
        if (i > 0) gallery.push_back(file);
      }
      w.add_query("img0.ppm", box_at(0, 0), 1, gallery);
      for (int i = 1; i < n_img; ++i)
        for (int d = 0; d < 3; ++d) {
          // Boxes sometimes coincide with a ground-truth slot, sometimes not.
          const float x = static_cast<float>(30 * static_cast<int>(rng.uniform_int(0, 2)));
          const float y = static_cast<float>(20 * i) + (rng.bernoulli(0.3) ? 7.f : 0.f);
          w.add_det("img" + std::to_string(i) + ".ppm", box_at(x, y), 1.f,
                    static_cast<float>(rng.uniform(-0.9, 0.9)));
        }

      const GalleryMatch got = search(w.preds, w.m, 0);

      // Oracle: flatten, sort by similarity, greedily claim best-IoU
      // ground-truth boxes of the query identity.
      struct Entry {
        int img, det;
        float sim;
      };
      std::vector<Entry> entries;
      int total_gt = 0;
      for (int i = 1; i < n_img; ++i) {
        for (const ManifestPerson &p : w.m.images[static_cast<size_t>(i)].persons)
          if (p.identity == 1) ++total_gt;
        const ImagePredictions &ip = w.preds.images[static_cast<size_t>(i)];
        for (size_t d = 0; d < ip.detections.size(); ++d)
          entries.push_back({i, static_cast<int>(d),
                             cosine_similarity(w.preds.queries[0].embedding,
                                               ip.detections[d].embedding)});
      }
      std::stable_sort(entries.begin(), entries.end(),
                       [](const Entry &a, const Entry &b) { return a.sim > b.sim; });
      std::map<std::pair<int, int>, bool> used;
      std::vector<bool> correct;
      for (const Entry &e : entries) {
        const ManifestImage &img = w.m.images[static_cast<size_t>(e.img)];
        float best = 0.5f;
        int pick = -1;
        for (size_t p = 0; p < img.persons.size(); ++p) {
          if (img.persons[p].identity != 1 || used[{e.img, static_cast<int>(p)}]) continue;
          const float v = iou(w.preds.images[static_cast<size_t>(e.img)]
                                  .detections[static_cast<size_t>(e.det)]
                                  .box,
                              img.persons[p].bbox);
          if (v >= best) {
            best = v;
            pick = static_cast<int>(p);
          }
        }
        if (pick >= 0) used[{e.img, pick}] = true;
        correct.push_back(pick >= 0);
      }

      REQUIRE(got.total_gt == total_gt);
      REQUIRE(got.ranking.size() == entries.size());
      for (size_t k = 0; k < entries.size(); ++k) {
        CHECK(got.ranking[k].similarity == doctest::Approx(entries[k].sim));
        CHECK(got.ranking[k].correct == correct[k]);
      }
      if (total_gt > 0)
        CHECK(average_precision(got) == doctest::Approx(ap_oracle(correct, total_gt)).epsilon(1e-9));
    }
  }

  TEST_CASE("metrics are invariant to gallery order and identity relabeling") {
    World w;
    w.add_image("q.ppm", {{box_at(0, 0), 2}});
    w.add_image("a.ppm", {{box_at(0, 0), 2}, {box_at(40, 0), 3}});
    w.add_image("b.ppm", {{box_at(0, 40), 2}});
    w.add_query("q.ppm", box_at(0, 0), 2, {"a.ppm", "b.ppm"});
    w.add_det("a.ppm", box_at(0, 0), 1.f, 0.9f);
    w.add_det("a.ppm", box_at(40, 0), 1.f, 0.7f);
    w.add_det("b.ppm", box_at(0, 40), 1.f, 0.5f);
    const float base = average_precision(search(w.preds, w.m, 0));

    std::vector<std::string> reversed = {"b.ppm", "a.ppm"};
    CHECK(average_precision(search(w.preds, w.m, 0, &reversed)) == doctest::Approx(base));

    // Swap identity labels 2 <-> 3 everywhere; similarity structure is
    // untouched so the metrics cannot move.
    World relabeled = w;
    for (ManifestImage &img : relabeled.m.images)
      for (ManifestPerson &p : img.persons) p.identity = p.identity == 2 ? 3 : 2;
    relabeled.m.queries[0].identity = 3;
    relabeled.preds.queries[0].identity = 3;
    CHECK(average_precision(search(relabeled.preds, relabeled.m, 0)) == doctest::Approx(base));
  }

  TEST_CASE("detection metrics: perfect, empty, and a crafted 3-of-2 case") {
    World w;
    w.add_image("a.ppm", {{box_at(0, 0), 0}, {box_at(40, 0), 1}});
    w.add_image("b.ppm", {{box_at(0, 40), 0}});

    SUBCASE("perfect detections") {
      w.add_det("a.ppm", box_at(0, 0), 0.9f, 0.f);
      w.add_det("a.ppm", box_at(40, 0), 0.8f, 0.f);
      w.add_det("b.ppm", box_at(0, 40), 0.7f, 0.f);
      const DetectionMetrics dm = detection_metrics(w.preds, w.m);
      CHECK(dm.recall == doctest::Approx(1.0));
      CHECK(dm.ap == doctest::Approx(1.0));
    }

    SUBCASE("no detections") {
      const DetectionMetrics dm = detection_metrics(w.preds, w.m);
      CHECK(dm.recall == doctest::Approx(0.0));
      CHECK(dm.ap == doctest::Approx(0.0));
    }

    SUBCASE("three detections over two boxes in one image") {
      // Scores order them TP, FP (duplicate of the first box), TP.
      World v;
      v.add_image("a.ppm", {{box_at(0, 0), 0}, {box_at(40, 0), 1}});
      v.add_det("a.ppm", box_at(0, 0), 0.9f, 0.f);
      v.add_det("a.ppm", box_at(2, 0), 0.8f, 0.f);   // IoU 0.67 with the claimed box
      v.add_det("a.ppm", box_at(40, 0), 0.7f, 0.f);
      const DetectionMetrics dm = detection_metrics(v.preds, v.m);
      CHECK(dm.recall == doctest::Approx(1.0));
      // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3); envelope makes the
      // middle point 2/3, so AP = 0.5*1 + 0.5*(2/3).
      CHECK(dm.ap == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0));
    }
  }

  TEST_CASE("prediction sets survive a serialize/parse round trip") {
    World w;
    w.add_image("a.ppm", {{box_at(0, 0), 0}});
    w.add_query("a.ppm", box_at(0, 0), 0, {});
    w.add_det("a.ppm", {1.25f, 2.5f, 11.25f, 12.5f}, 0.625f, 0.33f);
    const std::string text = serialize_predictions(w.preds);
    const PredictionSet back = parse_predictions(text);
    REQUIRE(back.images.size() == 1);
    REQUIRE(back.images[0].detections.size() == 1);
    CHECK(back.images[0].detections[0].box.x1 == 1.25f);
    CHECK(back.images[0].detections[0].score == 0.625f);
    REQUIRE(back.queries.size() == 1);
    CHECK(back.queries[0].identity == 0);
    CHECK(serialize_predictions(back) == text);
  }

  TEST_CASE("gallery sweep keeps true instances, caps oversize requests, and never improves with distractors") {
    World w;
    w.add_image("q.ppm", {{box_at(0, 0), 1}});
    w.add_image("gt.ppm", {{box_at(0, 0), 1}});
    for (int i = 0; i < 6; ++i) w.add_image("d" + std::to_string(i) + ".ppm", {});
    std::vector<std::string> gallery = {"gt.ppm"};
    for (int i = 0; i < 6; ++i) gallery.push_back("d" + std::to_string(i) + ".ppm");
    w.add_query("q.ppm", box_at(0, 0), 1, gallery);

    w.add_det("gt.ppm", box_at(0, 0), 1.f, 0.9f);
    for (int i = 0; i < 6; ++i)
      w.add_det("d" + std::to_string(i) + ".ppm", box_at(30, 30), 1.f, 0.95f);  // hard distractors

    const std::vector<SweepRow> rows = gallery_sweep(w.preds, w.m, {1, 3, 7, 50}, 9);
    REQUIRE(rows.size() == 4);
    // Size 1 keeps only the true instance: perfect retrieval.
    CHECK(rows[0].map == doctest::Approx(1.0));
    CHECK(rows[0].top1 == doctest::Approx(1.0));
    // Distractor-only growth can never raise AP.
    for (size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].map <= rows[i - 1].map + 1e-9f);
    // Oversize request behaves exactly like the full pool.
    CHECK(rows[3].map == doctest::Approx(rows[2].map));
    CHECK(rows[3].gallery_size == 50);

    const std::string csv = sweep_csv(rows);
    CHECK(csv.rfind("gallery_size,map,top1\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  }
}
