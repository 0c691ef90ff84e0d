#include "m2repa/m2repa.h"

#include <cstring>
#include <string>
#include <vector>

#include "core/checkpoint.h"
#include "core/commands.h"
#include "core/config.h"

#ifndef M2REPA_BUILD_ID
#define M2REPA_BUILD_ID "unversioned"
#endif

struct m2_config {
    m2repa::Config cfg;
};

namespace {

thread_local std::string g_last_error;

m2_status classify(const std::string& what) {
    auto has = [&](const char* s) { return what.find(s) != std::string::npos; };
    if (has("CRC") || has("truncated") || has("magic") || has("dtype tag")) return M2_ERR_CORRUPT;
    if (has("cannot open") || has("failed writing") || has("failed reading") ||
        has("cannot create")) {
        return M2_ERR_IO;
    }
    if (has("config:")) return M2_ERR_PARSE;
    if (has("non-finite") || has("not finite")) return M2_ERR_NUMERIC;
    return M2_ERR_INVALID_ARGUMENT;
}

template <typename Fn>
m2_status guard(Fn&& fn) {
    try {
        fn();
        g_last_error.clear();
        return M2_OK;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return classify(g_last_error);
    } catch (...) {
        g_last_error = "unknown error";
        return M2_ERR_INTERNAL;
    }
}

std::vector<std::uint64_t> parse_seed_list(const char* csv) {
    std::vector<std::uint64_t> seeds;
    std::string s = csv ? csv : "";
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string item = s.substr(pos, comma - pos);
        if (!item.empty()) seeds.push_back(std::stoull(item));
        pos = comma + 1;
    }
    return seeds;
}

std::vector<double> parse_value_list(const char* csv) {
    std::vector<double> values;
    std::string s = csv ? csv : "";
    std::size_t pos = 0;
    while (pos < s.size()) {
        std::size_t comma = s.find(',', pos);
        if (comma == std::string::npos) comma = s.size();
        const std::string item = s.substr(pos, comma - pos);
        if (!item.empty()) values.push_back(std::stod(item));
        pos = comma + 1;
    }
    return values;
}

}  // namespace

extern "C" {

const char* m2_status_name(m2_status status) {
    switch (status) {
        case M2_OK: return "ok";
        case M2_ERR_INVALID_ARGUMENT: return "invalid argument";
        case M2_ERR_IO: return "io error";
        case M2_ERR_PARSE: return "parse error";
        case M2_ERR_CORRUPT: return "corrupt file";
        case M2_ERR_NUMERIC: return "numeric error";
        case M2_ERR_INTERNAL: return "internal error";
    }
    return "unknown";
}

const char* m2_last_error(void) { return g_last_error.c_str(); }

const char* m2_build_id(void) { return M2REPA_BUILD_ID; }

uint32_t m2_abi_version(void) { return 1; }

m2_status m2_config_create(m2_config** out) {
    if (!out) {
        g_last_error = "null output pointer";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { *out = new m2_config{}; });
}

m2_status m2_config_load(const char* path, m2_config** out) {
    if (!path || !out) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { *out = new m2_config{m2repa::load_config(path)}; });
}

void m2_config_destroy(m2_config* cfg) { delete cfg; }

m2_status m2_config_set(m2_config* cfg, const char* section, const char* key,
                        const char* value) {
    if (!cfg || !section || !key || !value) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { m2repa::apply_config_line(cfg->cfg, section, key, value); });
}

m2_status m2_config_get(const m2_config* cfg, const char* section, const char* key,
                        char* buffer, size_t buffer_len) {
    if (!cfg || !section || !key || !buffer) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] {
        const std::string v = m2repa::get_config_value(cfg->cfg, section, key);
        if (v.size() + 1 > buffer_len) {
            throw std::runtime_error("buffer too small for value of '" + std::string(key) + "'");
        }
        std::memcpy(buffer, v.c_str(), v.size() + 1);
    });
}

m2_status m2_train(const m2_config* cfg, const char* out_dir) {
    if (!cfg || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { m2repa::cmd_train(cfg->cfg, out_dir); });
}

m2_status m2_eval(const char* checkpoint_path, const char* horizons, const char* out_dir) {
    if (!checkpoint_path || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] {
        m2repa::cmd_eval(checkpoint_path, horizons ? horizons : "", out_dir);
    });
}

m2_status m2_ablate(const m2_config* cfg, const char* seeds_csv, const char* out_dir) {
    if (!cfg || !seeds_csv || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { m2repa::cmd_ablate(cfg->cfg, parse_seed_list(seeds_csv), out_dir); });
}

m2_status m2_export_features(const char* checkpoint_path, int tap_layer, uint64_t clip_seed,
                             const char* out_dir) {
    if (!checkpoint_path || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] {
        m2repa::cmd_export_features(checkpoint_path, tap_layer, clip_seed, out_dir);
    });
}

m2_status m2_export_clip(const m2_config* cfg, uint64_t clip_seed, int frames,
                         const char* out_dir) {
    if (!cfg || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { m2repa::cmd_export_clip(cfg->cfg, clip_seed, frames, out_dir); });
}

m2_status m2_sweep(const m2_config* cfg, const char* axis, const char* values_csv,
                   const char* out_dir) {
    if (!cfg || !axis || !values_csv || !out_dir) {
        g_last_error = "null argument";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] {
        m2repa::cmd_sweep(cfg->cfg, axis, parse_value_list(values_csv), out_dir);
    });
}

m2_status m2_checkpoint_verify(const char* path) {
    if (!path) {
        g_last_error = "null path";
        return M2_ERR_INVALID_ARGUMENT;
    }
    return guard([&] { m2repa::verify_bundle(path); });
}

}  // extern "C"
