#include <cmath>

#include "core/flow.h"
#include "doctest.h"
#include "test_util.h"

using namespace m2repa;
using namespace m2repa::test;

namespace {

// Exact-velocity oracle: v = (x1 - x)/(1 - t) keeps x on the straight path
// to the ground-truth frame and lands exactly on it at t=1.
class OracleVelocity : public VelocityField {
public:
    explicit OracleVelocity(Tensor gt) : gt_(std::move(gt)) {}

    Tensor velocity(const Tensor& x, const std::vector<float>& t_vec,
                    std::span<const ControlSignal>, int window_start) override {
        const std::int64_t frame = x.dim(1) * x.dim(2) * x.dim(3);
        std::vector<float> v(static_cast<std::size_t>(x.size()), 0.0f);
        const float* px = x.values().data();
        const float* pg = gt_.values().data() + window_start * frame;
        for (std::int64_t i = 0; i < x.dim(0); ++i) {
            const float t = t_vec[static_cast<std::size_t>(i)];
            if (t >= 1.0f) continue;  // clean frames need no velocity
            for (std::int64_t j = 0; j < frame; ++j) {
                const std::int64_t k = i * frame + j;
                v[static_cast<std::size_t>(k)] = (pg[k] - px[k]) / (1.0f - t);
            }
        }
        return Tensor::from_data(x.shape(), std::move(v));
    }

private:
    Tensor gt_;
};

}  // namespace

TEST_CASE("interpolate endpoints and hand value") {
    Tensor x1 = random_tensor({3, 2, 4, 4}, 1);
    Tensor x0 = random_normal_tensor({3, 2, 4, 4}, 2);

    FlowState all1 = interpolate(x1, x0, {1, 1, 1});
    CHECK(max_abs_diff(all1.x_t, x1) == 0.0);
    FlowState all0 = interpolate(x1, x0, {0, 0, 0});
    CHECK(max_abs_diff(all0.x_t, x0) == 0.0);

    Tensor a = Tensor::from_data({1, 1, 1, 1}, {4.0f});
    Tensor b = Tensor::from_data({1, 1, 1, 1}, {0.0f});
    FlowState quarter = interpolate(a, b, {0.25f});
    CHECK(quarter.x_t.values()[0] == doctest::Approx(1.0f));

    CHECK_THROWS_AS(interpolate(x1, random_tensor({3, 2, 4, 5}, 3), {1, 1, 1}),
                    std::runtime_error);
    CHECK_THROWS_WITH_AS(interpolate(x1, x0, {0.5f, 1.2f, 0.5f}), doctest::Contains("[0,1]"),
                         std::runtime_error);
}

TEST_CASE("interpolate satisfies the mixing identity") {
    Tensor x1 = random_tensor({4, 3, 4, 4}, 5);
    Tensor x0 = random_normal_tensor({4, 3, 4, 4}, 6);
    Rng rng(7);
    auto t_vec = sample_timesteps(4, TimestepMode::UniformIid, rng);
    FlowState fs = interpolate(x1, x0, t_vec);

    const std::int64_t frame = 3 * 4 * 4;
    const float* p1 = x1.values().data();
    const float* p0 = x0.values().data();
    const float* pt = fs.x_t.values().data();
    const float* pv = fs.v_target.values().data();
    for (std::int64_t i = 0; i < 4; ++i) {
        const float t = t_vec[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < frame; ++j) {
            const std::int64_t k = i * frame + j;
            CHECK(std::abs(pt[k] - (t * p1[k] + (1 - t) * p0[k])) < 1e-6f);
            CHECK(pv[k] == p1[k] - p0[k]);
        }
    }
}

TEST_CASE("shared timestep mode degenerates to single-t flow matching") {
    Rng rng(11);
    auto shared = sample_timesteps(6, TimestepMode::Shared, rng);
    for (float t : shared) CHECK(t == shared[0]);

    Rng rng2(11);
    auto a = sample_timesteps(6, TimestepMode::UniformIid, rng2);
    Rng rng3(11);
    auto b = sample_timesteps(6, TimestepMode::UniformIid, rng3);
    CHECK(a == b);
}

TEST_CASE("uniform-iid timesteps have the right mean") {
    Rng rng(13);
    double sum = 0.0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        auto t = sample_timesteps(4, TimestepMode::UniformIid, rng);
        for (float v : t) sum += v;
    }
    const double mean = sum / (4.0 * draws);
    CHECK(mean > 0.48);
    CHECK(mean < 0.52);
}

TEST_CASE("fm_loss anchors") {
    Tensor v = random_tensor({2, 3}, 17);
    CHECK(fm_loss(v, v).scalar_value() == 0.0f);

    Tensor shifted = add(v, 1.0f);
    CHECK(fm_loss(shifted, v).scalar_value() == doctest::Approx(1.0f));

    Tensor p = tensor1d({0, 0});
    Tensor t = tensor1d({1, 3});
    CHECK(fm_loss(p, t).scalar_value() == doctest::Approx(5.0f));

    CHECK(fm_loss(random_tensor({4}, 18), random_tensor({4}, 19)).scalar_value() > 0.0f);
    CHECK_THROWS_AS(fm_loss(random_tensor({3}, 20), random_tensor({4}, 21)), std::runtime_error);
}

TEST_CASE("euler_step linearity and oracle reconstruction") {
    Tensor x0 = random_normal_tensor({2, 8}, 23);
    Tensor x1 = random_tensor({2, 8}, 24);
    Tensor v = sub(x1, x0);

    Tensor one_step = euler_step(x0, v, 1.0f);
    CHECK(max_abs_diff(one_step, x1) < 1e-6);

    Tensor two_half = euler_step(euler_step(x0, v, 0.5f), v, 0.5f);
    CHECK(max_abs_diff(two_half, one_step) < 1e-6);

    CHECK_THROWS_AS(euler_step(x0, v, 0.0f), std::runtime_error);
}

TEST_CASE("rollout with oracle velocity reproduces ground truth") {
    SceneConfig cfg;
    cfg.motion = MotionModel::Pan;
    const int horizon = 12;
    SceneState scene = generate_scene(41, cfg);
    TriModalClip gt = render_clip(scene, 1 + horizon, 1);
    OracleVelocity oracle(gt.to_tensor());

    RolloutConfig rcfg;
    rcfg.window = 6;
    rcfg.euler_steps = 8;
    TriModalClip out = rollout(oracle, gt, horizon, rcfg, 99);

    CHECK(out.t() == 1 + horizon);
    // context bitwise unchanged
    CHECK(max_abs_diff(out.frames[0].rgb, gt.frames[0].rgb) == 0.0);
    // generated frames match ground truth
    Tensor got = out.to_tensor();
    Tensor want = gt.to_tensor();
    CHECK(max_abs_diff(got, want) < 1e-5);
}

TEST_CASE("rollout is deterministic and respects horizon limits") {
    SceneConfig cfg;
    SceneState scene = generate_scene(43, cfg);
    TriModalClip gt = render_clip(scene, 9, 1);
    OracleVelocity oracle(gt.to_tensor());
    RolloutConfig rcfg;
    rcfg.window = 4;

    TriModalClip a = rollout(oracle, gt, 8, rcfg, 7);
    TriModalClip b = rollout(oracle, gt, 8, rcfg, 7);
    CHECK(max_abs_diff(a.to_tensor(), b.to_tensor()) == 0.0);

    TriModalClip zero = rollout(oracle, gt, 0, rcfg, 7);
    CHECK(zero.t() == 1);
    CHECK(max_abs_diff(zero.frames[0].rgb, gt.frames[0].rgb) == 0.0);

    RolloutConfig tiny = rcfg;
    tiny.max_horizon = 4;
    CHECK_THROWS_WITH_AS(rollout(oracle, gt, 8, tiny, 7), doctest::Contains("max"),
                         std::runtime_error);
}
