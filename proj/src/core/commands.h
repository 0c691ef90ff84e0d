#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "config.h"

namespace m2repa {

// Operational entry points behind the CLI and the C API. Each writes its
// artifacts into out_dir (created if needed) and throws on any failure.

// checkpoint.m2rp + loss.csv + summary.txt
void cmd_train(const Config& cfg, const std::string& out_dir);

// metrics.csv with columns variant,horizon,psnr,ssim,abs_rel,delta1,miou,
// matched_fraction; horizons is "short", "long", or "short,long".
void cmd_eval(const std::string& checkpoint_path, const std::string& horizons,
              const std::string& out_dir);

// All seven variants per seed on a shared split: per-run artifacts under
// out_dir/<variant>/seed-<s>/, plus ablation.csv and ablation_summary.txt.
// Runs execute concurrently up to the M2REPA_THREADS cap.
void cmd_ablate(const Config& base, const std::vector<std::uint64_t>& seeds,
                const std::string& out_dir);

// Hidden-tap, projected, and expert feature tensors for one clip, each with
// a 3-channel PCA rendering (PPM), plus pairwise expert CKA in cka.txt.
void cmd_export_features(const std::string& checkpoint_path, int tap_layer,
                         std::uint64_t clip_seed, const std::string& out_dir);

// One directory per clip: per-frame tensor files and a controls.txt with one
// line per frame ("pose x y z rx ry rz" or "action k").
void cmd_export_clip(const Config& cfg, std::uint64_t clip_seed, int frames,
                     const std::string& out_dir);

// One seeded run per axis value; consolidated sweep.csv.
void cmd_sweep(const Config& base, const std::string& axis, const std::vector<double>& values,
               const std::string& out_dir);

}  // namespace m2repa
