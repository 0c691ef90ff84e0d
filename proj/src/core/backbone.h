#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "synthworld.h"
#include "tensor.h"

namespace m2repa {

enum class ArchVariant { PixelConcat, LatentSum };
enum class ConditioningKind { Pose, Action };

struct BackboneConfig {
    int height = 16;
    int width = 16;
    int mask_channels = 3;  // C
    int embed_dim = 32;     // d
    int depth = 6;          // L trunk blocks
    int tap_layer = 2;      // alignment tap, 1-based in [1, L]
    int patch = 4;          // pixel-variant patch size
    ArchVariant variant = ArchVariant::PixelConcat;
    ConditioningKind conditioning = ConditioningKind::Pose;
    int action_alphabet = 5;

    // latent-sum codec geometry
    int latent_patch = 2;       // token patch on the latent grid
    int latent_dim = 4;         // latent channels per modality (<= 4)
    int aux_conv_channels = 8;  // local-mixing Conv3D width
    bool rgb_only = false;      // single-modality latent model (extension source)

    int pixel_channels() const { return 4 + mask_channels; }
    int latent_height() const { return height / 2; }
    int latent_width() const { return width / 2; }
    // channels of the tensor the model noises and predicts velocities for
    int state_channels() const;
    int state_height() const;
    int state_width() const;
    int tokens_per_frame() const;  // N

    void validate() const;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Fixed random semi-orthogonal linear codec over 2x2 pixel patches, one
// projection per modality (inputs are 12-dim RGB/mask patches and 4-dim
// depth patches). decode is the transpose map, so encode(decode(z)) == z up
// to f32 rounding.
class LatentCodec {
public:
    LatentCodec(const BackboneConfig& cfg, std::uint64_t seed);

    // [F, 4+C, H, W] pixels -> [F, 3*latent_dim, H/2, W/2]
    Tensor encode(const Tensor& pixel_clip) const;
    // transpose projection back to pixel space
    Tensor decode(const Tensor& latents) const;

    // [F, latent_dim, H/2, W/2] for a single modality channel slice
    Tensor encode_modality(const Tensor& pixel_clip, int which) const;

private:
    BackboneConfig cfg_;
    Tensor proj_[3];  // [12, latent_dim], orthonormal columns
};

struct ForwardResult {
    Tensor velocity;    // same shape as the model's state tensor
    Tensor hidden_tap;  // [B*T, N, d] captured after block tap_layer
};

// Tri-modal velocity-prediction network. Two instantiations share the trunk:
//   pixel-concat: per-modality patch encoders, channel-concat fusion MLP,
//     split MLP and per-modality decoders back to pixel velocities.
//   latent-sum: per-modality latent patch projections aggregated by gated
//     summation, an RGB head, and an auxiliary Conv3D branch that turns
//     noisy latents + denoised RGB features into depth/mask velocities.
class Backbone {
public:
    Backbone(const BackboneConfig& cfg, std::uint64_t seed);

    // Zero-init extension of a single-modality latent model: trunk, RGB
    // projection and RGB head are copied; depth/mask input projections are
    // duplicates of the RGB one behind zero gates; the aux branch output
    // projections start at zero. The extended model's RGB velocity equals
    // the source model's output exactly at initialization.
    static Backbone extend_from_rgb(const Backbone& rgb_model, std::uint64_t seed);

    // x: [B*T, ch, H', W'] state tensor (pixels for pixel-concat, latents
    // otherwise); t_vec and controls carry one entry per frame, batch-major.
    ForwardResult forward(const Tensor& x, int batch, const std::vector<float>& t_vec,
                          std::span<const ControlSignal> controls) const;

    // Spec surface, also used internally by forward().
    Tensor encode(const Tensor& x) const;  // -> [B*T, N, d] fused embedding
    std::pair<Tensor, Tensor> trunk(const Tensor& tokens, int batch,
                                    const std::vector<float>& t_vec,
                                    std::span<const ControlSignal> controls) const;
    std::vector<Tensor> decode(const Tensor& v_tokens) const;  // per-modality fields
    std::pair<Tensor, Tensor> aux_branch(const Tensor& noisy_latents, const Tensor& v_rgb,
                                         const Tensor& hidden, int batch,
                                         const std::vector<float>& t_vec) const;

    const BackboneConfig& config() const { return cfg_; }
    const NamedParams& parameters() const { return params_; }
    NamedParams& parameters() { return params_; }
    Tensor param(std::string_view name) const;

    void load_parameters(const NamedParams& source);  // match by name and shape

private:
    Backbone() = default;
    void build(std::uint64_t seed);
    Tensor add_param(const std::string& name, Shape shape, float scale, std::uint64_t seed);
    Tensor add_const_param(const std::string& name, Shape shape, float value);

    BackboneConfig cfg_;
    NamedParams params_;
};

}  // namespace m2repa
