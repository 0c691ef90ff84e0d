#include "synthworld.h"

#include <cmath>
#include <stdexcept>
#include <string>

#include "rng.h"

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("synthworld: " + msg);
}

float wrap_pos(float x, float extent) {
    float w = std::fmod(x, extent);
    if (w < 0) w += extent;
    return w;
}

// Signed displacement on the torus, in [-extent/2, extent/2).
float wrap_delta(float d, float extent) {
    return d - extent * std::floor(d / extent + 0.5f);
}

bool covers(const SceneObject& obj, float px, float py, float cam_x, float cam_y, float w,
            float h) {
    const float dx = wrap_delta(px - (obj.cx - cam_x), w);
    const float dy = wrap_delta(py - (obj.cy - cam_y), h);
    if (obj.shape == 0) {
        return std::abs(dx) <= obj.half_w && std::abs(dy) <= obj.half_h;
    }
    return dx * dx + dy * dy <= obj.half_w * obj.half_w;
}

std::array<float, 2> control_delta(const ControlSignal& c) {
    if (c.kind == ControlKind::CameraPose) return {c.pose[0], c.pose[1]};
    switch (c.action) {
        case 1: return {-1.0f, 0.0f};
        case 2: return {1.0f, 0.0f};
        case 3: return {0.0f, -1.0f};
        case 4: return {0.0f, 1.0f};
        default: return {0.0f, 0.0f};
    }
}

ControlSignal identity_control(ControlKind kind) {
    ControlSignal c;
    c.kind = kind;
    return c;
}

ControlSignal draw_control(const SceneConfig& cfg, Rng& rng) {
    ControlSignal c;
    c.kind = cfg.control;
    if (cfg.motion != MotionModel::Pan) return c;  // identity; objects self-move
    if (cfg.control == ControlKind::CameraPose) {
        c.pose[0] = static_cast<float>(rng.uniform_int(3) - 1);
        c.pose[1] = static_cast<float>(rng.uniform_int(3) - 1);
    } else {
        c.action = static_cast<int>(rng.uniform_int(cfg.action_alphabet));
    }
    return c;
}

}  // namespace

Tensor TriModalClip::to_tensor() const {
    if (frames.empty()) fail("to_tensor on empty clip");
    const auto& f0 = frames[0];
    const std::int64_t h = f0.rgb.dim(1), w = f0.rgb.dim(2);
    const std::int64_t c_mask = f0.mask.dim(0);
    const std::int64_t ch = 3 + 1 + c_mask;
    std::vector<float> data(static_cast<std::size_t>(t() * ch * h * w));
    const std::int64_t frame_elems = ch * h * w;
    for (int i = 0; i < t(); ++i) {
        float* dst = data.data() + i * frame_elems;
        auto rgb = frames[static_cast<std::size_t>(i)].rgb.values();
        auto dep = frames[static_cast<std::size_t>(i)].depth.values();
        auto msk = frames[static_cast<std::size_t>(i)].mask.values();
        std::copy(rgb.begin(), rgb.end(), dst);
        std::copy(dep.begin(), dep.end(), dst + 3 * h * w);
        std::copy(msk.begin(), msk.end(), dst + 4 * h * w);
    }
    return Tensor::from_data({t(), ch, h, w}, std::move(data));
}

TriModalClip clip_from_tensor(const Tensor& clip, int mask_channels) {
    if (clip.rank() != 4) fail("clip_from_tensor expects [T,ch,H,W]");
    const std::int64_t t_frames = clip.dim(0), ch = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    if (ch != 4 + mask_channels) {
        fail("clip tensor has " + std::to_string(ch) + " channels, expected " +
             std::to_string(4 + mask_channels));
    }
    TriModalClip out;
    const float* p = clip.values().data();
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < t_frames; ++i) {
        const float* base = p + i * ch * plane;
        TriModalFrame f;
        f.rgb = Tensor::from_data({3, h, w}, std::vector<float>(base, base + 3 * plane));
        f.depth =
            Tensor::from_data({1, h, w}, std::vector<float>(base + 3 * plane, base + 4 * plane));
        f.mask = Tensor::from_data({mask_channels, h, w},
                                   std::vector<float>(base + 4 * plane, base + ch * plane));
        out.frames.push_back(std::move(f));
    }
    out.controls.assign(static_cast<std::size_t>(t_frames),
                        identity_control(ControlKind::CameraPose));
    return out;
}

SceneState generate_scene(std::uint64_t seed, const SceneConfig& config) {
    if (config.object_count < 1) fail("object count must be >= 1");
    if (config.object_count > config.mask_channels) {
        fail("object count " + std::to_string(config.object_count) + " exceeds " +
             std::to_string(config.mask_channels) + " mask channels");
    }
    if (config.height < 8 || config.width < 8) fail("scene needs at least 8x8 pixels");

    SceneState s;
    s.config = config;
    s.seed = seed;
    Rng rng(derive_seed(seed, "scene"));
    s.bg_r = rng.uniform(0.05f, 0.25f);
    s.bg_g = rng.uniform(0.05f, 0.25f);
    s.bg_b = rng.uniform(0.05f, 0.25f);

    const float max_half = std::max(2.0f, static_cast<float>(std::min(config.height, config.width)) / 4.0f);
    for (int c = 0; c < config.object_count; ++c) {
        SceneObject o;
        o.shape = static_cast<int>(rng.uniform_int(2));
        o.cx = rng.uniform(0.0f, static_cast<float>(config.width));
        o.cy = rng.uniform(0.0f, static_cast<float>(config.height));
        o.half_w = rng.uniform(1.5f, max_half);
        o.half_h = o.shape == 0 ? rng.uniform(1.5f, max_half) : o.half_w;
        // one distinct depth plane per object, all nearer than the background
        o.depth = 0.2f + 0.6f * static_cast<float>(c) /
                             static_cast<float>(std::max(config.object_count - 1, 1));
        if (config.motion == MotionModel::Linear) {
            do {
                o.vx = static_cast<float>(rng.uniform_int(3) - 1);
                o.vy = static_cast<float>(rng.uniform_int(3) - 1);
            } while (o.vx == 0.0f && o.vy == 0.0f);
        }
        o.r = rng.uniform(0.4f, 1.0f);
        o.g = rng.uniform(0.4f, 1.0f);
        o.b = rng.uniform(0.4f, 1.0f);
        s.objects.push_back(o);
    }
    return s;
}

SceneState step_scene(const SceneState& s, const ControlSignal& control) {
    SceneState next = s;
    const auto [dx, dy] = control_delta(control);
    next.cam_x = wrap_pos(next.cam_x + dx, static_cast<float>(s.config.width));
    next.cam_y = wrap_pos(next.cam_y + dy, static_cast<float>(s.config.height));
    for (auto& o : next.objects) {
        o.cx = wrap_pos(o.cx + o.vx, static_cast<float>(s.config.width));
        o.cy = wrap_pos(o.cy + o.vy, static_cast<float>(s.config.height));
    }
    return next;
}

TriModalFrame render_frame(const SceneState& s) {
    const int h = s.config.height, w = s.config.width;
    const int c_mask = s.config.mask_channels;
    std::vector<float> rgb(static_cast<std::size_t>(3 * h * w));
    std::vector<float> depth(static_cast<std::size_t>(h * w));
    std::vector<float> mask(static_cast<std::size_t>(c_mask * h * w), 0.0f);

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const float px = static_cast<float>(x) + 0.5f;
            const float py = static_cast<float>(y) + 0.5f;
            int nearest = -1;
            float best = 1.0f;  // background depth D_max
            for (std::size_t i = 0; i < s.objects.size(); ++i) {
                const auto& o = s.objects[i];
                if (o.depth < best &&
                    covers(o, px, py, s.cam_x, s.cam_y, static_cast<float>(w),
                           static_cast<float>(h))) {
                    best = o.depth;
                    nearest = static_cast<int>(i);
                }
            }
            const std::size_t pix = static_cast<std::size_t>(y * w + x);
            depth[pix] = best;
            if (nearest >= 0) {
                const auto& o = s.objects[static_cast<std::size_t>(nearest)];
                rgb[pix] = o.r;
                rgb[static_cast<std::size_t>(h * w) + pix] = o.g;
                rgb[static_cast<std::size_t>(2 * h * w) + pix] = o.b;
                mask[static_cast<std::size_t>(nearest * h * w) + pix] = 1.0f;
            } else {
                rgb[pix] = s.bg_r;
                rgb[static_cast<std::size_t>(h * w) + pix] = s.bg_g;
                rgb[static_cast<std::size_t>(2 * h * w) + pix] = s.bg_b;
            }
        }
    }
    TriModalFrame f;
    f.rgb = Tensor::from_data({3, h, w}, std::move(rgb));
    f.depth = Tensor::from_data({1, h, w}, std::move(depth));
    f.mask = Tensor::from_data({c_mask, h, w}, std::move(mask));
    return f;
}

TriModalClip render_clip(const SceneState& scene, int t_frames, int context_count) {
    if (t_frames < 2) fail("render_clip needs T >= 2");
    if (context_count < 1 || context_count >= t_frames) {
        fail("context_count must satisfy 1 <= context < T");
    }
    TriModalClip clip;
    clip.seed = scene.seed;
    clip.context_count = context_count;
    Rng control_rng(derive_seed(scene.seed, "controls"));

    SceneState state = scene;
    clip.controls.push_back(identity_control(scene.config.control));
    clip.frames.push_back(render_frame(state));
    for (int i = 1; i < t_frames; ++i) {
        ControlSignal c = draw_control(scene.config, control_rng);
        state = step_scene(state, c);
        clip.controls.push_back(c);
        clip.frames.push_back(render_frame(state));
    }
    return clip;
}

ClipDataset make_dataset(std::uint64_t seed, int n_clips, double split_ratio,
                         const SceneConfig& config, int t_frames, int context_count) {
    if (n_clips < 2) fail("dataset needs at least 2 clips");
    if (!(split_ratio > 0.0 && split_ratio < 1.0)) fail("split_ratio must be in (0,1)");
    auto n_train = static_cast<int>(std::llround(split_ratio * n_clips));
    n_train = std::max(1, std::min(n_clips - 1, n_train));

    ClipDataset ds;
    for (int i = 0; i < n_clips; ++i) {
        const std::uint64_t clip_seed = derive_seed(seed, "clip", static_cast<std::uint64_t>(i));
        SceneState scene = generate_scene(clip_seed, config);
        TriModalClip clip = render_clip(scene, t_frames, context_count);
        if (i < n_train) {
            ds.train.push_back(std::move(clip));
        } else {
            ds.val.push_back(std::move(clip));
        }
    }
    return ds;
}

}  // namespace m2repa
