#include <cmath>
#include <set>

#include "core/synthworld.h"
#include "doctest.h"
#include "test_util.h"

using namespace m2repa;
using namespace m2repa::test;

namespace {

// mask centroid x on one channel
double mask_centroid_x(const Tensor& mask, int channel) {
    const std::int64_t h = mask.dim(1), w = mask.dim(2);
    const float* p = mask.values().data() + channel * h * w;
    double sx = 0.0, total = 0.0;
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            const float v = p[y * w + x];
            sx += v * (static_cast<double>(x) + 0.5);
            total += v;
        }
    }
    REQUIRE(total > 0.0);
    return sx / total;
}

}  // namespace

TEST_CASE("generate_scene is deterministic and validates inputs") {
    SceneConfig cfg;
    SceneState a = generate_scene(7, cfg);
    SceneState b = generate_scene(7, cfg);
    REQUIRE(a.objects.size() == b.objects.size());
    for (std::size_t i = 0; i < a.objects.size(); ++i) {
        CHECK(a.objects[i].cx == b.objects[i].cx);
        CHECK(a.objects[i].depth == b.objects[i].depth);
        CHECK(a.objects[i].r == b.objects[i].r);
    }

    SceneConfig zero = cfg;
    zero.object_count = 0;
    CHECK_THROWS_AS(generate_scene(1, zero), std::runtime_error);
    SceneConfig toomany = cfg;
    toomany.object_count = 5;
    toomany.mask_channels = 3;
    CHECK_THROWS_WITH_AS(generate_scene(1, toomany), doctest::Contains("mask channels"),
                         std::runtime_error);
}

TEST_CASE("seed 7 with 3 objects gives 3 distinct depth planes") {
    SceneConfig cfg;
    cfg.object_count = 3;
    SceneState s = generate_scene(7, cfg);
    std::set<float> depths;
    for (const auto& o : s.objects) depths.insert(o.depth);
    CHECK(depths.size() == 3);
    for (float d : depths) {
        CHECK(d > 0.0f);
        CHECK(d < 1.0f);
    }
}

TEST_CASE("single static object renders identical frames with identity controls") {
    SceneConfig cfg;
    cfg.object_count = 1;
    cfg.mask_channels = 1;
    cfg.motion = MotionModel::Static;
    SceneState s = generate_scene(3, cfg);
    TriModalClip clip = render_clip(s, 4);
    for (int i = 1; i < clip.t(); ++i) {
        CHECK(max_abs_diff(clip.frames[static_cast<std::size_t>(i)].rgb, clip.frames[0].rgb) == 0.0);
        CHECK(max_abs_diff(clip.frames[static_cast<std::size_t>(i)].depth, clip.frames[0].depth) ==
              0.0);
        CHECK(clip.controls[static_cast<std::size_t>(i)].pose == std::array<float, 6>{});
    }
}

TEST_CASE("object moving right advances mask centroid by one pixel per frame") {
    SceneConfig cfg;
    cfg.object_count = 1;
    cfg.mask_channels = 1;
    cfg.motion = MotionModel::Static;
    SceneState s = generate_scene(11, cfg);
    // pin a fully interior object moving right 1 px/frame
    s.objects[0].shape = 0;
    s.objects[0].cx = 4.0f;
    s.objects[0].cy = 8.0f;
    s.objects[0].half_w = 2.0f;
    s.objects[0].half_h = 2.0f;
    s.objects[0].vx = 1.0f;
    s.objects[0].vy = 0.0f;
    TriModalClip clip = render_clip(s, 5);
    double prev = mask_centroid_x(clip.frames[0].mask, 0);
    for (int i = 1; i < clip.t(); ++i) {
        double cur = mask_centroid_x(clip.frames[static_cast<std::size_t>(i)].mask, 0);
        CHECK(cur - prev == doctest::Approx(1.0).epsilon(1e-9));
        prev = cur;
    }
}

TEST_CASE("overlap takes the nearer object's depth (painter's rule)") {
    SceneConfig cfg;
    cfg.object_count = 2;
    cfg.mask_channels = 2;
    cfg.motion = MotionModel::Static;
    SceneState s = generate_scene(5, cfg);
    s.objects[0].shape = 0;
    s.objects[0].cx = 8.0f;
    s.objects[0].cy = 8.0f;
    s.objects[0].half_w = 3.0f;
    s.objects[0].half_h = 3.0f;
    s.objects[1] = s.objects[0];
    s.objects[1].depth = s.objects[0].depth + 0.3f;
    TriModalFrame f = render_frame(s);
    const float* depth = f.depth.values().data();
    const float* mask = f.mask.values().data();
    const std::int64_t hw = 16 * 16;
    for (std::int64_t pix = 0; pix < hw; ++pix) {
        if (mask[pix] > 0.5f) {
            CHECK(depth[pix] == s.objects[0].depth);   // nearer plane wins
            CHECK(mask[hw + pix] == 0.0f);             // occluded object not visible
        }
    }
}

TEST_CASE("cross-modal consistency at singly covered pixels") {
    SceneConfig cfg;
    cfg.object_count = 3;
    SceneState s = generate_scene(21, cfg);
    TriModalFrame f = render_frame(s);
    const std::int64_t hw = 16 * 16;
    const float* mask = f.mask.values().data();
    const float* depth = f.depth.values().data();
    for (std::int64_t pix = 0; pix < hw; ++pix) {
        int argmax = -1;
        int covered = 0;
        for (int c = 0; c < 3; ++c) {
            if (mask[c * hw + pix] > 0.5f) {
                ++covered;
                argmax = c;
            }
        }
        if (covered == 1) {
            CHECK(std::abs(depth[pix] - s.objects[static_cast<std::size_t>(argmax)].depth) < 1e-6f);
        }
    }
}

TEST_CASE("temporal consistency: re-simulating from state reproduces frames") {
    SceneConfig cfg;
    cfg.motion = MotionModel::Pan;
    SceneState s = generate_scene(31, cfg);
    TriModalClip clip = render_clip(s, 6);
    SceneState state = s;
    for (int i = 1; i < clip.t(); ++i) {
        state = step_scene(state, clip.controls[static_cast<std::size_t>(i)]);
        TriModalFrame f = render_frame(state);
        CHECK(max_abs_diff(f.rgb, clip.frames[static_cast<std::size_t>(i)].rgb) == 0.0);
        CHECK(max_abs_diff(f.depth, clip.frames[static_cast<std::size_t>(i)].depth) == 0.0);
        CHECK(max_abs_diff(f.mask, clip.frames[static_cast<std::size_t>(i)].mask) == 0.0);
    }
}

TEST_CASE("dataset split arithmetic and determinism") {
    SceneConfig cfg;
    ClipDataset a = make_dataset(9, 10, 0.5, cfg, 4, 1);
    CHECK(a.train.size() == 5);
    CHECK(a.val.size() == 5);

    ClipDataset b = make_dataset(9, 10, 0.5, cfg, 4, 1);
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].seed == b.train[i].seed);
        CHECK(max_abs_diff(a.train[i].frames[0].rgb, b.train[i].frames[0].rgb) == 0.0);
    }

    std::set<std::uint64_t> seeds;
    for (const auto& c : a.train) seeds.insert(c.seed);
    for (const auto& c : a.val) seeds.insert(c.seed);
    CHECK(seeds.size() == 10);  // disjoint

    ClipDataset big = make_dataset(9, 100, 0.9, cfg, 4, 1);
    CHECK(big.train.size() == 90);
    CHECK(big.val.size() == 10);

    CHECK_THROWS_AS(make_dataset(9, 1, 0.5, cfg, 4, 1), std::runtime_error);
    CHECK_THROWS_AS(make_dataset(9, 10, 1.5, cfg, 4, 1), std::runtime_error);
}

TEST_CASE("clip tensor round trip keeps modality ranges") {
    SceneConfig cfg;
    SceneState s = generate_scene(17, cfg);
    TriModalClip clip = render_clip(s, 4);
    Tensor t = clip.to_tensor();
    CHECK(t.shape() == Shape{4, 7, 16, 16});
    TriModalClip back = clip_from_tensor(t, 3);
    for (int i = 0; i < clip.t(); ++i) {
        CHECK(max_abs_diff(back.frames[static_cast<std::size_t>(i)].rgb,
                           clip.frames[static_cast<std::size_t>(i)].rgb) == 0.0);
        CHECK(max_abs_diff(back.frames[static_cast<std::size_t>(i)].depth,
                           clip.frames[static_cast<std::size_t>(i)].depth) == 0.0);
    }
    for (float v : clip.frames[0].depth.values()) {
        CHECK(v > 0.0f);
        CHECK(v <= 1.0f);
    }
}
