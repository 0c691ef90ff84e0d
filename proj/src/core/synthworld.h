#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "tensor.h"

namespace m2repa {

enum class ControlKind { CameraPose, DiscreteAction };

// controls[i] maps frame i-1 to frame i; exactly one payload is meaningful
// per kind.
struct ControlSignal {
    ControlKind kind = ControlKind::CameraPose;
    std::array<float, 6> pose{};  // translation xyz, Euler rotation xyz
    int action = 0;
};

enum class MotionModel { Static, Linear, Pan };

struct SceneConfig {
    int height = 16;
    int width = 16;
    int object_count = 3;
    int mask_channels = 3;  // C; object_count must fit
    MotionModel motion = MotionModel::Pan;
    ControlKind control = ControlKind::CameraPose;
    int action_alphabet = 5;  // stay, left, right, up, down
};

struct SceneObject {
    int shape = 0;  // 0 rectangle, 1 disc
    float cx = 0, cy = 0;
    float half_w = 0, half_h = 0;  // disc radius carried in half_w
    float depth = 0;               // plane in (0,1); background is 1
    float vx = 0, vy = 0;          // own motion in px/frame
    float r = 0, g = 0, b = 0;
};

struct SceneState {
    SceneConfig config;
    std::vector<SceneObject> objects;
    float cam_x = 0, cam_y = 0;
    float bg_r = 0, bg_g = 0, bg_b = 0;
    std::uint64_t seed = 0;
};

struct TriModalFrame {
    Tensor rgb;    // [3,H,W] in [0,1]
    Tensor depth;  // [1,H,W] in (0,1], background 1
    Tensor mask;   // [C,H,W] in [0,1], visible occupancy per object channel
};

struct TriModalClip {
    std::vector<TriModalFrame> frames;
    std::vector<ControlSignal> controls;
    int context_count = 1;
    std::uint64_t seed = 0;

    int t() const { return static_cast<int>(frames.size()); }
    // [T, 3+1+C, H, W]: channels are rgb, depth, then C mask channels.
    Tensor to_tensor() const;
};

// Split a [T, 3+1+C, H, W] tensor back into per-modality frames.
TriModalClip clip_from_tensor(const Tensor& clip, int mask_channels);

SceneState generate_scene(std::uint64_t seed, const SceneConfig& config);

// One transition. The control moves the camera; objects advance by their own
// velocities. Positions wrap around the frame.
SceneState step_scene(const SceneState& s, const ControlSignal& control);

TriModalFrame render_frame(const SceneState& s);

// T frames; controls[0] is the identity by convention.
TriModalClip render_clip(const SceneState& scene, int t_frames, int context_count = 1);

struct ClipDataset {
    std::vector<TriModalClip> train;
    std::vector<TriModalClip> val;
};

// Disjoint deterministic splits; clip i uses derive_seed(seed, "clip", i) and
// the first round(n_clips * split_ratio) clips become the train set.
ClipDataset make_dataset(std::uint64_t seed, int n_clips, double split_ratio,
                         const SceneConfig& config, int t_frames, int context_count);

}  // namespace m2repa
