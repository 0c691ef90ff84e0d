// Command-line front end over the m2repa C API.

#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "m2repa/m2repa.h"

namespace {

struct ConfigHandle {
    m2_config* ptr = nullptr;
    ~ConfigHandle() { m2_config_destroy(ptr); }
};

int report(m2_status status, const char* what) {
    if (status == M2_OK) return 0;
    std::fprintf(stderr, "m2repa %s failed (%s): %s\n", what, m2_status_name(status),
                 m2_last_error());
    return 1;
}

int load_or_default(const std::string& config_path, ConfigHandle& handle) {
    const m2_status st = config_path.empty() ? m2_config_create(&handle.ptr)
                                             : m2_config_load(config_path.c_str(), &handle.ptr);
    return report(st, "config");
}

int apply_override(ConfigHandle& handle, const char* section, const char* key,
                   const std::string& value) {
    if (value.empty()) return 0;
    return report(m2_config_set(handle.ptr, section, key, value.c_str()), "config override");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tri-modal flow-matching world model with decoupled multi-expert "
                 "representation alignment"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("m2repa build ") + m2_build_id());

    std::string config_path, out_dir, checkpoint, frames = "short,long", seeds = "1";
    std::string variant, axis, values;
    std::int64_t seed = -1;
    std::uint64_t clip_seed = 7;
    int tap_layer = 0;
    int clip_frames = 8;

    auto* train = app.add_subcommand("train", "Train one run and write checkpoint + reports");
    train->add_option("--config", config_path, "Config file path");
    train->add_option("--seed", seed, "Override train seed");
    train->add_option("--variant", variant,
                      "Override training variant (baseline | repa-rgb | repa-depth | repa-mask "
                      "| naive-multi | m2repa-cos2 | m2repa-cka)");
    train->add_option("--out", out_dir, "Output directory")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
    eval->add_option("--frames", frames, "Horizons: short | long | short,long");
    eval->add_option("--out", out_dir, "Output directory")->required();

    auto* ablate = app.add_subcommand("ablate", "Run all seven variants over the given seeds");
    ablate->add_option("--config", config_path, "Config file path");
    ablate->add_option("--seeds", seeds, "Comma-separated seed list, e.g. 1,2,3");
    ablate->add_option("--out", out_dir, "Output directory")->required();

    auto* exp = app.add_subcommand("export-features",
                                   "Export hidden/projected/expert features with PCA images");
    exp->add_option("--checkpoint", checkpoint, "Checkpoint path")->required();
    exp->add_option("--layer", tap_layer, "Alignment tap layer (0 keeps the checkpoint's)");
    exp->add_option("--clip", clip_seed, "Clip seed");
    exp->add_option("--out", out_dir, "Output directory")->required();

    auto* expclip = app.add_subcommand("export-clip", "Export one synthetic clip to disk");
    expclip->add_option("--config", config_path, "Config file path");
    expclip->add_option("--clip", clip_seed, "Clip seed");
    expclip->add_option("--frames-count", clip_frames, "Frames to render");
    expclip->add_option("--out", out_dir, "Output directory")->required();

    auto* sw = app.add_subcommand("sweep", "Sweep one hyperparameter axis");
    sw->add_option("--config", config_path, "Config file path");
    sw->add_option("--axis", axis, "lambda-decouple | tap-layer | projector-depth")->required();
    sw->add_option("--values", values, "Comma-separated values")->required();
    sw->add_option("--out", out_dir, "Output directory")->required();

    auto* verify = app.add_subcommand("verify", "CRC-validate a checkpoint or tensor file");
    verify->add_option("--checkpoint", checkpoint, "File path")->required();

    CLI11_PARSE(app, argc, argv);

    if (train->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_or_default(config_path, cfg)) return rc;
        if (seed >= 0 &&
            apply_override(cfg, "train", "seed", std::to_string(seed))) {
            return 1;
        }
        if (int rc = apply_override(cfg, "train", "variant", variant)) return rc;
        return report(m2_train(cfg.ptr, out_dir.c_str()), "train");
    }
    if (eval->parsed()) {
        return report(m2_eval(checkpoint.c_str(), frames.c_str(), out_dir.c_str()), "eval");
    }
    if (ablate->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_or_default(config_path, cfg)) return rc;
        return report(m2_ablate(cfg.ptr, seeds.c_str(), out_dir.c_str()), "ablate");
    }
    if (exp->parsed()) {
        return report(m2_export_features(checkpoint.c_str(), tap_layer, clip_seed,
                                         out_dir.c_str()),
                      "export-features");
    }
    if (expclip->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_or_default(config_path, cfg)) return rc;
        return report(m2_export_clip(cfg.ptr, clip_seed, clip_frames, out_dir.c_str()),
                      "export-clip");
    }
    if (sw->parsed()) {
        ConfigHandle cfg;
        if (int rc = load_or_default(config_path, cfg)) return rc;
        return report(m2_sweep(cfg.ptr, axis.c_str(), values.c_str(), out_dir.c_str()),
                      "sweep");
    }
    if (verify->parsed()) {
        return report(m2_checkpoint_verify(checkpoint.c_str()), "verify");
    }
    return 1;
}
