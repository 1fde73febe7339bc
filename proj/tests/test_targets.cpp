#include <cmath>
#include <vector>

#include "alignps/targets.hpp"
#include "doctest.h"

using namespace alignps;

namespace {

// A batch of one image with the given annotations and a fully valid region.
struct Scene {
  std::vector<PersonAnnotation> anns;
  std::vector<ImageMeta> metas;
  Scene(std::vector<PersonAnnotation> a, int w, int h) : anns(std::move(a)) {
    metas.push_back({&anns, w, h});
  }
};

AfaConfig p3_only() {
  AfaConfig cfg;
  cfg.levels = OutputLevels::kP3Only;
  return cfg;
}

}  // namespace

TEST_SUITE("targets") {
  TEST_CASE("grid locations map to stride-centered pixels") {
    CHECK(grid_to_px(0, 8) == doctest::Approx(4));
    CHECK(grid_to_px(3, 8) == doctest::Approx(28));
    CHECK(grid_to_px(2, 16) == doctest::Approx(40));
  }

  TEST_CASE("location at the exact box center is positive with symmetric targets") {
    // Box centered at (28, 28) = grid cell (3,3) at stride 8.
    Scene sc({{{8, 8, 48, 48}, 0}}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    const std::int64_t li = lt.idx(0, 3, 3);
    CHECK(lt.is_pos[li] == 1);
    bool found = false;
    for (size_t i = 0; i < lt.pos_locs.size(); ++i) {
      if (lt.pos_locs[i].y != 3 || lt.pos_locs[i].x != 3) continue;
      found = true;
      CHECK(lt.pos_ltrb[4 * i + 0] == doctest::Approx(lt.pos_ltrb[4 * i + 2]));  // l == r
      CHECK(lt.pos_ltrb[4 * i + 1] == doctest::Approx(lt.pos_ltrb[4 * i + 3]));  // t == b
      CHECK(lt.pos_centerness[i] == doctest::Approx(1.0));
    }
    CHECK(found);
  }

  TEST_CASE("centerness of (1,1,3,3) is one third") {
    CHECK(centerness_of(1, 1, 3, 3) == doctest::Approx(1.0 / 3.0));
    CHECK(centerness_of(5, 5, 5, 5) == doctest::Approx(1.0));
    // Bounded in (0, 1] for positive offsets.
    CHECK(centerness_of(0.5f, 7, 9, 1) > 0.f);
    CHECK(centerness_of(0.5f, 7, 9, 1) <= 1.f);
  }

  TEST_CASE("positives respect the center-sampling radius and box interior") {
    // Wide box: center sampling limits positives to a Chebyshev window
    // around the center even though the box spans many cells.
    Scene sc({{{0, 16, 128, 48}, 0}}, 128, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 16, 8, 1.5f, 0, p3_only());
    const float cx = 64, cy = 32;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x) {
        const bool pos = lt.is_pos[lt.idx(0, y, x)] != 0;
        const float px = grid_to_px(x, 8), py = grid_to_px(y, 8);
        const bool in_window = std::fabs(px - cx) <= 12.f && std::fabs(py - cy) <= 12.f;
        const bool inside = px > 0 && px < 128 && py > 16 && py < 48;
        CHECK(pos == (in_window && inside));
      }
  }

  TEST_CASE("overlapping boxes resolve to the smaller area") {
    // Small box nested inside a big one, sharing the same center.
    Scene sc({{{8, 8, 56, 56}, 0}, {{24, 24, 40, 40}, 1}}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    const std::int64_t center = lt.idx(0, 3, 3);  // pixel (28,28), inside both
    CHECK(lt.is_pos[center] == 1);
    CHECK(lt.owner[center] == 1);
  }

  TEST_CASE("zero annotations give all-background but valid locations") {
    Scene sc({}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    CHECK(lt.num_pos() == 0);
    for (std::int8_t v : lt.is_pos) CHECK(v == 0);
    for (std::int8_t v : lt.is_valid) CHECK(v == 1);
  }

  TEST_CASE("locations on padding are invalid and never positive") {
    // Valid content is 40x40 inside a 64x64 padded frame; the box pokes into
    // the frame but grid cells beyond the content must stay background.
    Scene sc({{{16, 16, 38, 38}, 0}}, 40, 40);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const float px = grid_to_px(x, 8), py = grid_to_px(y, 8);
        const bool valid = px < 40 && py < 40;
        CHECK((lt.is_valid[lt.idx(0, y, x)] != 0) == valid);
        if (!valid) CHECK(lt.is_pos[lt.idx(0, y, x)] == 0);
      }
    CHECK(lt.num_pos() > 0);
  }

  TEST_CASE("multi-level assignment routes boxes by extent") {
    AfaConfig cfg;
    cfg.levels = OutputLevels::kP3P4P5;
    // extent = max(w,h)/2 against ranges (128, 256]
    CHECK(assign_level(100, 80, cfg) == 0);
    CHECK(assign_level(256, 100, cfg) == 0);   // boundary goes to the finer level
    CHECK(assign_level(300, 100, cfg) == 1);
    CHECK(assign_level(512, 100, cfg) == 1);   // boundary again
    CHECK(assign_level(600, 700, cfg) == 2);
    cfg.levels = OutputLevels::kP3P4;
    CHECK(assign_level(600, 700, cfg) == 1);
    cfg.levels = OutputLevels::kP3Only;
    CHECK(assign_level(600, 700, cfg) == 0);

    // A big box must not produce positives on the fine level of a pyramid.
    std::vector<PersonAnnotation> anns{{{0, 0, 600, 600}, 0}};
    std::vector<ImageMeta> metas{{&anns, 640, 640}};
    AfaConfig pyr;
    pyr.levels = OutputLevels::kP3P4P5;
    CHECK(assign_targets(metas, 80, 80, 8, 1.5f, 0, pyr).num_pos() == 0);
    CHECK(assign_targets(metas, 20, 20, 32, 1.5f, 2, pyr).num_pos() > 0);
  }

  TEST_CASE("sampled person locations are the S nearest to the center") {
    Scene sc({{{0, 0, 64, 64}, 0}}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    // Enumerate-and-sort oracle over this person's positive locations.
    struct D {
      float d;
      GridLoc g;
    };
    std::vector<D> all;
    for (size_t i = 0; i < lt.pos_locs.size(); ++i) {
      const GridLoc &g = lt.pos_locs[i];
      all.push_back({std::max(std::fabs(grid_to_px(g.x, 8) - 32.f),
                              std::fabs(grid_to_px(g.y, 8) - 32.f)),
                     g});
    }
    std::stable_sort(all.begin(), all.end(), [](const D &a, const D &b) { return a.d < b.d; });

    auto got5 = person_sample_locations(lt, 0, 0, sc.anns[0].box, 5);
    REQUIRE(got5.size() == 5);
    for (int i = 0; i < 5; ++i) {
      CHECK(got5[static_cast<size_t>(i)].y == all[static_cast<size_t>(i)].g.y);
      CHECK(got5[static_cast<size_t>(i)].x == all[static_cast<size_t>(i)].g.x);
    }

    auto got1 = person_sample_locations(lt, 0, 0, sc.anns[0].box, 1);
    REQUIRE(got1.size() == 1);
    CHECK(got1[0].y == all[0].g.y);
    CHECK(got1[0].x == all[0].g.x);
  }

  TEST_CASE("a box owning no location falls back to the nearest grid cell") {
    // 3px box between grid centers: no location lies strictly inside.
    Scene sc({{{9, 9, 12, 12}, 0}}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    CHECK(lt.num_pos() == 0);
    auto locs = person_sample_locations(lt, 0, 0, sc.anns[0].box, 5);
    REQUIRE(locs.size() == 1);
    // Center (10.5, 10.5) → nearest grid cell (1,1) at pixel (12,12).
    CHECK(locs[0].y == 1);
    CHECK(locs[0].x == 1);
  }

  TEST_CASE("overlapping persons get disjoint sample sets") {
    Scene sc({{{8, 8, 56, 56}, 0}, {{20, 20, 44, 44}, 1}}, 64, 64);
    LevelTargets lt = assign_targets(sc.metas, 8, 8, 8, 1.5f, 0, p3_only());
    auto a = person_sample_locations(lt, 0, 0, sc.anns[0].box, 5);
    auto b = person_sample_locations(lt, 0, 1, sc.anns[1].box, 5);
    for (const GridLoc &ga : a)
      for (const GridLoc &gb : b)
        CHECK((ga.y != gb.y || ga.x != gb.x));
  }
}
