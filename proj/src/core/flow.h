#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rng.h"
#include "synthworld.h"
#include "tensor.h"

namespace m2repa {

enum class TimestepMode { UniformIid, Shared };

// Noised clip with per-frame timesteps. x_t[i] = t[i]*x1[i] + (1-t[i])*x0[i],
// v_target = x1 - x0 exactly.
struct FlowState {
    Tensor x_t;                // [T, ch, H, W]
    std::vector<float> t_vec;  // T entries in [0,1]
    Tensor x0;
    Tensor x1;
    Tensor v_target;
};

std::vector<float> sample_timesteps(int t_frames, TimestepMode mode, Rng& rng);

FlowState interpolate(const Tensor& x1, const Tensor& x0, const std::vector<float>& t_vec);

// Mean squared error over all elements; differentiable w.r.t. v_pred.
Tensor fm_loss(const Tensor& v_pred, const Tensor& v_target);

Tensor euler_step(const Tensor& x, const Tensor& v, float dt);

// Velocity model seen by the sampler. window_start is the absolute index of
// the window's first frame (real models ignore it; test oracles use it).
class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual Tensor velocity(const Tensor& x_window, const std::vector<float>& t_vec,
                            std::span<const ControlSignal> controls, int window_start) = 0;
};

struct RolloutConfig {
    int window = 8;       // frames per window, trained clip length
    int euler_steps = 8;  // Euler steps per window
    int max_horizon = 512;
};

// Sliding-window autoregressive sampling on raw clip tensors. context holds
// the first N_ctx frames clean at t=1 for the whole run; each window
// integrates its generated frames from t=0 to t=1, then the last N_ctx
// generated frames seed the next window. Output is [N_ctx + horizon, ...]
// with the context prefix bitwise untouched.
Tensor rollout_frames(VelocityField& model, const Tensor& context,
                      std::span<const ControlSignal> controls, int horizon,
                      const RolloutConfig& cfg, std::uint64_t noise_seed);

// Pixel-space convenience wrapper over rollout_frames.
TriModalClip rollout(VelocityField& model, const TriModalClip& clip, int horizon,
                     const RolloutConfig& cfg, std::uint64_t noise_seed);

}  // namespace m2repa
