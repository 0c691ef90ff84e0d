#pragma once

#include <cstdint>
#include <string>

#include "backbone.h"
#include "synthworld.h"

namespace m2repa {

// Plain-text configuration: sections [model] [train] [data] [align] [eval]
// of "key = value" lines. '#' and ';' start comments. Unknown sections or
// keys are errors; parse errors carry line numbers.
struct Config {
    // [model]
    std::string arch = "pixel-concat";  // pixel-concat | latent-sum
    int embed_dim = 32;
    int depth = 6;
    int tap_layer = 2;
    int patch = 4;
    std::string conditioning = "pose";  // pose | action
    int latent_dim = 4;
    int latent_patch = 2;
    int aux_conv_channels = 8;

    // [data]
    int height = 16;
    int width = 16;
    int mask_channels = 3;
    int frames = 8;  // training clip length T
    int context = 1;
    int n_clips = 24;
    double split_ratio = 0.75;
    std::string motion = "pan";  // static | linear | pan
    int objects = 3;
    int action_alphabet = 5;

    // [train]
    std::string variant = "m2repa-cka";
    int steps = 500;
    int batch = 8;
    double lr = 1e-3;  // desk-scale; the reference setup uses 8e-6 on large pretrained backbones
    std::uint64_t seed = 1;
    double lambda_align = 0.5;
    double lambda_decouple = 0.05;
    std::string optimizer = "adam";          // adam | sgd
    std::string timestep_mode = "uniform-iid";  // uniform-iid | shared

    // [align]
    int expert_dim = 24;
    int expert_depth = 2;
    int projector_depth = 3;
    std::uint64_t expert_seed_rgb = 101;
    std::uint64_t expert_seed_depth = 202;
    std::uint64_t expert_seed_mask = 303;
    int cka_max_rows = 1024;

    // [eval]
    int horizon_short = 8;
    int horizon_long = 40;
    int euler_steps = 8;
    int eval_clips = 4;
    int max_horizon = 256;
    std::string horizons = "short,long";
};

Config load_config(const std::string& path);
void apply_config_line(Config& cfg, const std::string& section, const std::string& key,
                       const std::string& value);
std::string get_config_value(const Config& cfg, const std::string& section,
                             const std::string& key);
// Full round-trippable echo with every documented key.
std::string config_to_text(const Config& cfg);
Config config_from_text(const std::string& text);

void validate_config(const Config& cfg);

BackboneConfig make_backbone_config(const Config& cfg);
SceneConfig make_scene_config(const Config& cfg);

}  // namespace m2repa
