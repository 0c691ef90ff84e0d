/*
 * m2repa — tri-modal flow-matching video model with decoupled multi-expert
 * representation alignment, desk scale.
 *
 * C API over the shared library: opaque handles and status codes. All
 * functions returning m2_status leave a thread-local message readable via
 * m2_last_error() on failure. Strings are UTF-8, paths are filesystem paths.
 */
#ifndef M2REPA_H
#define M2REPA_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define M2_API __declspec(dllexport)
#else
#define M2_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum m2_status {
    M2_OK = 0,
    M2_ERR_INVALID_ARGUMENT = 1,
    M2_ERR_IO = 2,
    M2_ERR_PARSE = 3,
    M2_ERR_CORRUPT = 4,
    M2_ERR_NUMERIC = 5,
    M2_ERR_INTERNAL = 6,
} m2_status;

M2_API const char* m2_status_name(m2_status status);

/* Thread-local message describing the most recent failure; empty string when
 * the last call on this thread succeeded. */
M2_API const char* m2_last_error(void);

M2_API const char* m2_build_id(void);
M2_API uint32_t m2_abi_version(void);

/* ------------------------------------------------------------------ */
/* Configuration                                                        */
/* ------------------------------------------------------------------ */

typedef struct m2_config m2_config; /* opaque */

/* Defaults for the desk-scale setup. */
M2_API m2_status m2_config_create(m2_config** out);
/* Parse a [model]/[train]/[data]/[align]/[eval] key = value file. */
M2_API m2_status m2_config_load(const char* path, m2_config** out);
M2_API void m2_config_destroy(m2_config* cfg);

M2_API m2_status m2_config_set(m2_config* cfg, const char* section, const char* key,
                               const char* value);
/* Copies the value into buffer (NUL-terminated); fails if too small. */
M2_API m2_status m2_config_get(const m2_config* cfg, const char* section, const char* key,
                               char* buffer, size_t buffer_len);

/* ------------------------------------------------------------------ */
/* Operations (artifacts land in out_dir)                               */
/* ------------------------------------------------------------------ */

/* Train one run: checkpoint.m2rp, loss.csv, summary.txt. */
M2_API m2_status m2_train(const m2_config* cfg, const char* out_dir);

/* Evaluate a checkpoint: metrics.csv. horizons is "short", "long",
 * "short,long", or NULL/"" for the checkpoint's configured set. */
M2_API m2_status m2_eval(const char* checkpoint_path, const char* horizons,
                         const char* out_dir);

/* Run all seven training variants per seed ("1,2,3"): ablation.csv,
 * ablation_summary.txt, per-run directories. */
M2_API m2_status m2_ablate(const m2_config* cfg, const char* seeds_csv, const char* out_dir);

/* Export hidden-tap / projected / expert features for one clip as tensor
 * files plus PCA renderings (PPM). tap_layer <= 0 keeps the checkpoint's. */
M2_API m2_status m2_export_features(const char* checkpoint_path, int tap_layer,
                                    uint64_t clip_seed, const char* out_dir);

/* Export one synthetic clip: frame_###.m2rt tensors and controls.txt. */
M2_API m2_status m2_export_clip(const m2_config* cfg, uint64_t clip_seed, int frames,
                                const char* out_dir);

/* Hyperparameter sweep ("lambda-decouple" | "tap-layer" | "projector-depth")
 * over comma-separated values: sweep.csv. */
M2_API m2_status m2_sweep(const m2_config* cfg, const char* axis, const char* values_csv,
                          const char* out_dir);

/* Structural + CRC32 validation of a checkpoint or tensor file. */
M2_API m2_status m2_checkpoint_verify(const char* path);

#ifdef __cplusplus
}
#endif

#endif /* M2REPA_H */
