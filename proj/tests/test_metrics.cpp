#include <cmath>

#include "core/metrics.h"
#include "core/rng.h"
#include "doctest.h"
#include "test_util.h"

using namespace m2repa;
using namespace m2repa::test;

namespace {

// masks as 1D strips [lo, hi) on a 1 x width grid
Tensor strip_masks(const std::vector<std::pair<int, int>>& strips, int width) {
    std::vector<float> data(strips.size() * static_cast<std::size_t>(width), 0.0f);
    for (std::size_t m = 0; m < strips.size(); ++m) {
        for (int x = strips[m].first; x < strips[m].second; ++x) {
            data[m * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)] = 1.0f;
        }
    }
    return Tensor::from_data({static_cast<std::int64_t>(strips.size()), 1, width},
                             std::move(data));
}

Tensor random_masks(int count, int h, int w, Rng& rng) {
    std::vector<float> data(static_cast<std::size_t>(count * h * w), 0.0f);
    for (int m = 0; m < count; ++m) {
        const int x0 = static_cast<int>(rng.uniform_int(w - 2));
        const int y0 = static_cast<int>(rng.uniform_int(h - 2));
        const int x1 = x0 + 1 + static_cast<int>(rng.uniform_int(w - x0 - 1));
        const int y1 = y0 + 1 + static_cast<int>(rng.uniform_int(h - y0 - 1));
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                data[static_cast<std::size_t>((m * h + y) * w + x)] = 1.0f;
            }
        }
    }
    return Tensor::from_data({count, h, w}, std::move(data));
}

}  // namespace

TEST_CASE("psnr anchors") {
    Tensor img = random_tensor({3, 8, 8}, 1, 0.0f, 1.0f);
    CHECK(psnr(img, img, 1.0) == 99.0);

    Tensor zeros = Tensor::zeros({4, 4});
    Tensor ones = Tensor::full({4, 4}, 1.0f);
    CHECK(psnr(ones, zeros, 1.0) == doctest::Approx(0.0));

    Tensor shifted = add(img, 0.1f);
    CHECK(psnr(shifted, img, 1.0) == doctest::Approx(20.0).epsilon(1e-4));

    CHECK_THROWS_AS(psnr(img, Tensor::zeros({3, 8, 9}), 1.0), std::runtime_error);
}

TEST_CASE("ssim anchors") {
    Tensor img = random_tensor({16, 16}, 3, 0.0f, 1.0f);
    CHECK(ssim(img, img) == doctest::Approx(1.0));

    Tensor c1 = Tensor::full({8, 8}, 0.37f);
    Tensor c2 = Tensor::full({8, 8}, 0.37f);
    CHECK(ssim(c1, c2) == doctest::Approx(1.0));

    // binary image against its inversion: strongly negative structure
    Rng rng(5);
    std::vector<float> bits(16 * 16);
    for (auto& b : bits) b = rng.uniform() < 0.5f ? 0.0f : 1.0f;
    Tensor binary = Tensor::from_data({16, 16}, std::move(bits));
    Tensor inverted = sub(1.0f, binary);
    CHECK(ssim(inverted, binary) < 0.5);

    CHECK_THROWS_WITH_AS(ssim(Tensor::zeros({4, 4}), Tensor::zeros({4, 4})),
                         doctest::Contains("window"), std::runtime_error);
}

TEST_CASE("scale-shift alignment inverts affine maps") {
    Tensor gt = random_tensor({2, 1, 6, 6}, 7, 0.2f, 0.9f);
    Tensor pred = add(mul(gt, 2.0f), 1.0f);
    ScaleShift fit = align_scale_shift(pred, gt);
    CHECK(fit.a == doctest::Approx(0.5).epsilon(1e-5));
    CHECK(fit.b == doctest::Approx(-0.5).epsilon(1e-5));
    CHECK_FALSE(fit.degenerate);

    ScaleShift identity = align_scale_shift(gt, gt);
    CHECK(identity.a == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(identity.b == doctest::Approx(0.0).epsilon(1e-4));

    Tensor flat = Tensor::full(gt.shape(), 0.4f);
    ScaleShift degenerate = align_scale_shift(flat, gt);
    CHECK(degenerate.degenerate);
    CHECK(degenerate.a == 0.0);
    double mean_gt = 0.0;
    for (float v : gt.values()) mean_gt += v;
    mean_gt /= static_cast<double>(gt.size());
    CHECK(degenerate.b == doctest::Approx(mean_gt).epsilon(1e-6));
}

TEST_CASE("scale-shift residual is locally minimal") {
    Tensor gt = random_tensor({40}, 11, 0.2f, 1.0f);
    Tensor pred = random_tensor({40}, 12, 0.1f, 1.0f);
    ScaleShift fit = align_scale_shift(pred, gt);
    auto residual = [&](double a, double b) {
        double r = 0.0;
        auto p = pred.values();
        auto g = gt.values();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d = a * p[i] + b - g[i];
            r += d * d;
        }
        return r;
    };
    const double base = residual(fit.a, fit.b);
    for (double da : {-1e-3, 1e-3}) {
        for (double db : {-1e-3, 0.0, 1e-3}) {
            if (da == 0.0 && db == 0.0) continue;
            CHECK(residual(fit.a + da, fit.b + db) >= base - 1e-12);
        }
    }
}

TEST_CASE("depth metric anchors and boundaries") {
    Tensor gt = random_tensor({30}, 13, 0.3f, 1.0f);
    DepthEvalResult same = depth_metrics(gt, gt);
    CHECK(same.abs_rel == 0.0);
    CHECK(same.delta1 == 1.0);

    // dyadic depths keep 1.25*g exactly representable, so the ratio sits
    // exactly on the boundary and the strict '<' rejects it
    Tensor dyadic = Tensor::from_data({4}, {0.5f, 0.25f, 0.75f, 1.0f});
    DepthEvalResult boundary = depth_metrics(mul(dyadic, 1.25f), dyadic);
    CHECK(boundary.delta1 == 0.0);

    DepthEvalResult close_pred = depth_metrics(mul(gt, 1.1f), gt);
    CHECK(close_pred.abs_rel == doctest::Approx(0.1).epsilon(1e-5));
    CHECK(close_pred.delta1 == 1.0);

    // negative aligned predictions fail delta1 and still count in AbsRel
    Tensor neg = mul(gt, -1.0f);
    DepthEvalResult bad = depth_metrics(neg, gt);
    CHECK(bad.delta1 == 0.0);
    CHECK(bad.abs_rel == doctest::Approx(2.0).epsilon(1e-5));

    CHECK_THROWS_AS(depth_metrics(gt, mul(gt, 0.0f)), std::runtime_error);

    DepthEvalResult full = eval_depth_video(add(mul(gt, 2.0f), 1.0f), gt);
    CHECK(full.abs_rel < 1e-6);
    CHECK(full.delta1 == 1.0);
}

TEST_CASE("greedy matching follows the documented trace") {
    // IoU(g1,p1)=0.8, IoU(g1,p2)=0.6, IoU(g2,p2)=0.7
    Tensor preds = strip_masks({{20, 100}, {40, 100}}, 200);
    Tensor gts = strip_masks({{0, 100}, {44, 120}}, 200);
    FrameMaskResult r = greedy_miou_frame(preds, gts);
    REQUIRE(r.matches.size() == 2);
    CHECK(r.matches[0].gt == 0);
    CHECK(r.matches[0].pred == 0);
    CHECK(r.matches[0].iou == doctest::Approx(0.8));
    CHECK(r.matches[1].gt == 1);
    CHECK(r.matches[1].pred == 1);
    CHECK(r.matches[1].iou == doctest::Approx(0.7));
    CHECK(r.miou == doctest::Approx(0.75));
    CHECK(r.matched_fraction == 1.0);
}

TEST_CASE("greedy identity and disjoint anchors") {
    Tensor masks = strip_masks({{0, 20}, {30, 60}, {70, 90}}, 100);
    FrameMaskResult ident = greedy_miou_frame(masks, masks);
    CHECK(ident.miou == 1.0);
    CHECK(ident.matched_fraction == 1.0);
    CHECK(optimal_miou_oracle(masks, masks) == doctest::Approx(1.0));

    Tensor left = strip_masks({{0, 10}, {20, 30}}, 100);
    Tensor right = strip_masks({{50, 60}, {70, 80}}, 100);
    FrameMaskResult none = greedy_miou_frame(left, right);
    CHECK(none.miou == 0.0);
    CHECK(none.matches.empty());
}

TEST_CASE("greedy is invariant to prediction order but sensitive to gt order") {
    // p2 is everyone's favourite
    Tensor preds = strip_masks({{0, 54}, {0, 90}}, 200);   // p1, p2
    Tensor gts = strip_masks({{0, 81}, {18, 90}}, 200);    // g1, g2
    FrameMaskResult fwd = greedy_miou_frame(preds, gts);
    // g1 grabs p2 (0.9); g2 only sees p1 at 0.4 -> unmatched
    REQUIRE(fwd.matches.size() == 1);
    CHECK(fwd.miou == doctest::Approx(0.9));

    // permuting the prediction list changes nothing
    Tensor preds_swapped = strip_masks({{0, 90}, {0, 54}}, 200);
    FrameMaskResult swapped = greedy_miou_frame(preds_swapped, gts);
    CHECK(swapped.miou == doctest::Approx(fwd.miou));
    CHECK(swapped.matched_fraction == doctest::Approx(fwd.matched_fraction));

    // reversing gt order changes the outcome (documented sensitivity)
    Tensor gts_rev = strip_masks({{18, 90}, {0, 81}}, 200);
    FrameMaskResult rev = greedy_miou_frame(preds, gts_rev);
    REQUIRE(rev.matches.size() == 2);
    CHECK(rev.miou == doctest::Approx((0.8 + 54.0 / 81.0) / 2.0));
    CHECK(rev.miou != doctest::Approx(fwd.miou));

    // the oracle bounds both orderings on total matched IoU per gt mask
    const double oracle = optimal_miou_oracle(preds, gts);
    CHECK(fwd.matched_total / 2.0 <= oracle + 1e-9);
    CHECK(rev.matched_total / 2.0 <= optimal_miou_oracle(preds, gts_rev) + 1e-9);
}

TEST_CASE("greedy never beats the exhaustive oracle") {
    Rng rng(21);
    int equal = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        const int np = 1 + static_cast<int>(rng.uniform_int(4));
        const int ng = 1 + static_cast<int>(rng.uniform_int(4));
        Tensor preds = random_masks(np, 8, 8, rng);
        Tensor gts = random_masks(ng, 8, 8, rng);
        FrameMaskResult g = greedy_miou_frame(preds, gts);
        const double oracle = optimal_miou_oracle(preds, gts);
        const double greedy_norm = g.matched_total / static_cast<double>(ng);
        CHECK(greedy_norm <= oracle + 1e-9);
        if (std::abs(greedy_norm - oracle) < 1e-9) ++equal;
    }
    // greedy usually matches the optimum on these instances
    CHECK(equal > trials / 2);
}

TEST_CASE("overall miou is the mean of per-frame scores") {
    Rng rng(31);
    std::vector<Tensor> preds, gts;
    for (int f = 0; f < 4; ++f) {
        preds.push_back(random_masks(3, 8, 8, rng));
        gts.push_back(random_masks(3, 8, 8, rng));
    }
    MaskEvalResult r = greedy_miou(preds, gts);
    double mean = 0.0;
    for (int f = 0; f < 4; ++f) {
        mean += greedy_miou_frame(preds[static_cast<std::size_t>(f)],
                                  gts[static_cast<std::size_t>(f)])
                    .miou;
    }
    mean /= 4.0;
    CHECK(r.overall == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("clip evaluation on a perfect prediction") {
    SceneConfig cfg;
    SceneState s = generate_scene(41, cfg);
    TriModalClip clip = render_clip(s, 6, 1);
    ClipMetrics m = evaluate_clip(clip, clip, 1);
    CHECK(m.psnr == 99.0);
    CHECK(m.ssim == doctest::Approx(1.0));
    CHECK(m.abs_rel < 1e-6);
    CHECK(m.delta1 == 1.0);
    CHECK(m.miou == 1.0);
    CHECK(m.matched_fraction == 1.0);
}
