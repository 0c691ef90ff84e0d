#include "flow.h"

#include <cstring>
#include <stdexcept>
#include <string>

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("flowmatch: " + msg);
}

}  // namespace

std::vector<float> sample_timesteps(int t_frames, TimestepMode mode, Rng& rng) {
    if (t_frames < 1) fail("sample_timesteps needs T >= 1");
    std::vector<float> t(static_cast<std::size_t>(t_frames));
    if (mode == TimestepMode::Shared) {
        const float shared = rng.uniform();
        for (auto& v : t) v = shared;
    } else {
        for (auto& v : t) v = rng.uniform();
    }
    return t;
}

FlowState interpolate(const Tensor& x1, const Tensor& x0, const std::vector<float>& t_vec) {
    if (x1.shape() != x0.shape()) {
        fail("interpolate shape mismatch: x1 " + shape_str(x1.shape()) + " vs x0 " +
             shape_str(x0.shape()));
    }
    if (x1.rank() < 1 || x1.dim(0) != static_cast<std::int64_t>(t_vec.size())) {
        fail("interpolate needs one timestep per frame: got " + std::to_string(t_vec.size()) +
             " timesteps for " + shape_str(x1.shape()));
    }
    for (float t : t_vec) {
        if (!(t >= 0.0f && t <= 1.0f)) {
            fail("timestep " + std::to_string(t) + " outside [0,1]");
        }
    }

    FlowState fs;
    fs.t_vec = t_vec;
    fs.x1 = x1;
    fs.x0 = x0;
    fs.v_target = sub(x1, x0);

    Shape scale_shape(static_cast<std::size_t>(x1.rank()), 1);
    scale_shape[0] = x1.dim(0);
    Tensor t = Tensor::from_data(scale_shape, std::vector<float>(t_vec.begin(), t_vec.end()));
    fs.x_t = add(mul(x1, t), mul(x0, sub(1.0f, t)));
    return fs;
}

Tensor fm_loss(const Tensor& v_pred, const Tensor& v_target) {
    if (v_pred.shape() != v_target.shape()) {
        fail("fm_loss shape mismatch: " + shape_str(v_pred.shape()) + " vs " +
             shape_str(v_target.shape()));
    }
    Tensor diff = sub(v_pred, v_target);
    return mean(mul(diff, diff));
}

Tensor euler_step(const Tensor& x, const Tensor& v, float dt) {
    if (!(dt > 0.0f)) fail("euler_step needs dt > 0");
    if (x.shape() != v.shape()) {
        fail("euler_step shape mismatch: " + shape_str(x.shape()) + " vs " +
             shape_str(v.shape()));
    }
    return add(x, mul(v, dt));
}

Tensor rollout_frames(VelocityField& model, const Tensor& context,
                      std::span<const ControlSignal> controls, int horizon,
                      const RolloutConfig& cfg, std::uint64_t noise_seed) {
    if (context.rank() != 4) fail("rollout context must be [N_ctx, ch, H, W]");
    const int n_ctx = static_cast<int>(context.dim(0));
    if (n_ctx < 1) fail("rollout needs N_ctx >= 1");
    if (horizon < 0) fail("rollout horizon must be >= 0");
    if (horizon > cfg.max_horizon) {
        fail("horizon " + std::to_string(horizon) + " exceeds configured max " +
             std::to_string(cfg.max_horizon));
    }
    if (cfg.window <= n_ctx) fail("rollout window must exceed the context length");
    if (cfg.euler_steps < 1) fail("rollout needs at least one Euler step");
    const int total = n_ctx + horizon;
    if (static_cast<int>(controls.size()) < total) {
        fail("rollout needs a control per frame: have " + std::to_string(controls.size()) +
             ", need " + std::to_string(total));
    }

    const std::int64_t ch = context.dim(1), h = context.dim(2), w = context.dim(3);
    const std::int64_t frame_elems = ch * h * w;

    std::vector<float> out(static_cast<std::size_t>(total * frame_elems));
    std::memcpy(out.data(), context.values().data(),
                static_cast<std::size_t>(n_ctx * frame_elems) * sizeof(float));

    Rng noise(derive_seed(noise_seed, "rollout-noise"));
    const float dt = 1.0f / static_cast<float>(cfg.euler_steps);

    int pos = n_ctx;  // next frame to generate
    while (pos < total) {
        const int win_start = pos - n_ctx;
        const int win_len = std::min(cfg.window, total - win_start);
        const int gen_count = win_len - n_ctx;

        std::vector<float> win(static_cast<std::size_t>(win_len * frame_elems));
        std::memcpy(win.data(), out.data() + win_start * frame_elems,
                    static_cast<std::size_t>(n_ctx * frame_elems) * sizeof(float));
        for (std::int64_t i = n_ctx * frame_elems; i < win_len * frame_elems; ++i) {
            win[static_cast<std::size_t>(i)] = noise.normal();
        }

        std::vector<float> t_vec(static_cast<std::size_t>(win_len), 1.0f);
        Tensor x = Tensor::from_data({win_len, ch, h, w}, std::move(win));
        for (int k = 0; k < cfg.euler_steps; ++k) {
            const float t_gen = static_cast<float>(k) * dt;
            for (int i = n_ctx; i < win_len; ++i) t_vec[static_cast<std::size_t>(i)] = t_gen;
            Tensor v = model.velocity(x, t_vec,
                                      controls.subspan(static_cast<std::size_t>(win_start),
                                                       static_cast<std::size_t>(win_len)),
                                      win_start);
            if (v.shape() != x.shape()) {
                fail("model velocity shape " + shape_str(v.shape()) +
                     " does not match window " + shape_str(x.shape()));
            }
            // context frames stay clean: integrate generated frames only
            std::vector<float> next(x.values().begin(), x.values().end());
            const float* pv = v.values().data();
            for (std::int64_t i = n_ctx * frame_elems; i < win_len * frame_elems; ++i) {
                next[static_cast<std::size_t>(i)] += dt * pv[i];
            }
            x = Tensor::from_data(x.shape(), std::move(next));
        }
        std::memcpy(out.data() + pos * frame_elems,
                    x.values().data() + n_ctx * frame_elems,
                    static_cast<std::size_t>(gen_count * frame_elems) * sizeof(float));
        pos += gen_count;
    }
    return Tensor::from_data({total, ch, h, w}, std::move(out));
}

TriModalClip rollout(VelocityField& model, const TriModalClip& clip, int horizon,
                     const RolloutConfig& cfg, std::uint64_t noise_seed) {
    if (clip.t() < clip.context_count) fail("clip shorter than its context");
    const int n_ctx = clip.context_count;
    Tensor full = clip.to_tensor();
    std::int64_t sizes[] = {n_ctx, full.dim(0) - n_ctx};
    Tensor context = n_ctx == clip.t() ? full : split(full, 0, sizes)[0];
    const int mask_channels = static_cast<int>(clip.frames[0].mask.dim(0));

    Tensor frames = rollout_frames(model, context, clip.controls, horizon, cfg, noise_seed);
    TriModalClip result = clip_from_tensor(frames, mask_channels);
    result.context_count = n_ctx;
    result.seed = clip.seed;
    result.controls.assign(clip.controls.begin(),
                           clip.controls.begin() + result.t());
    return result;
}

}  // namespace m2repa
