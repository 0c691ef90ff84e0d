#include "config.h"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("config: " + msg);
}

struct Entry {
    const char* section;
    const char* key;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, const std::string&)> set;
};

// shortest representation that round-trips
std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) fail("cannot format a double");
    return std::string(buf, p);
}

long long parse_int(const std::string& v, const char* key) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        fail(std::string("key '") + key + "' needs an integer, got '" + v + "'");
    }
    return out;
}

double parse_double(const std::string& v, const char* key) {
    try {
        std::size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail(std::string("key '") + key + "' needs a number, got '" + v + "'");
    }
}

void check_choice(const std::string& v, const std::vector<std::string>& allowed,
                  const char* key) {
    for (const auto& a : allowed) {
        if (v == a) return;
    }
    std::string opts;
    for (const auto& a : allowed) {
        if (!opts.empty()) opts += " | ";
        opts += a;
    }
    fail(std::string("key '") + key + "' must be one of {" + opts + "}, got '" + v + "'");
}

const std::vector<Entry>& registry() {
    static const std::vector<Entry> entries = [] {
        std::vector<Entry> r;
        auto add_int = [&r](const char* sec, const char* key, int Config::* field) {
            r.push_back({sec, key,
                         [field](const Config& c) { return std::to_string(c.*field); },
                         [field, key](Config& c, const std::string& v) {
                             c.*field = static_cast<int>(parse_int(v, key));
                         }});
        };
        auto add_u64 = [&r](const char* sec, const char* key, std::uint64_t Config::* field) {
            r.push_back({sec, key,
                         [field](const Config& c) { return std::to_string(c.*field); },
                         [field, key](Config& c, const std::string& v) {
                             c.*field = static_cast<std::uint64_t>(parse_int(v, key));
                         }});
        };
        auto add_double = [&r](const char* sec, const char* key, double Config::* field) {
            r.push_back({sec, key, [field](const Config& c) { return fmt_double(c.*field); },
                         [field, key](Config& c, const std::string& v) {
                             c.*field = parse_double(v, key);
                         }});
        };
        auto add_choice = [&r](const char* sec, const char* key, std::string Config::* field,
                               std::vector<std::string> allowed) {
            r.push_back({sec, key, [field](const Config& c) { return c.*field; },
                         [field, key, opts = std::move(allowed)](Config& c,
                                                                 const std::string& v) {
                             check_choice(v, opts, key);
                             c.*field = v;
                         }});
        };

        add_choice("model", "arch", &Config::arch, {"pixel-concat", "latent-sum"});
        add_int("model", "embed_dim", &Config::embed_dim);
        add_int("model", "depth", &Config::depth);
        add_int("model", "tap_layer", &Config::tap_layer);
        add_int("model", "patch", &Config::patch);
        add_choice("model", "conditioning", &Config::conditioning, {"pose", "action"});
        add_int("model", "latent_dim", &Config::latent_dim);
        add_int("model", "latent_patch", &Config::latent_patch);
        add_int("model", "aux_conv_channels", &Config::aux_conv_channels);

        add_int("data", "height", &Config::height);
        add_int("data", "width", &Config::width);
        add_int("data", "mask_channels", &Config::mask_channels);
        add_int("data", "frames", &Config::frames);
        add_int("data", "context", &Config::context);
        add_int("data", "n_clips", &Config::n_clips);
        add_double("data", "split_ratio", &Config::split_ratio);
        add_choice("data", "motion", &Config::motion, {"static", "linear", "pan"});
        add_int("data", "objects", &Config::objects);
        add_int("data", "action_alphabet", &Config::action_alphabet);

        add_choice("train", "variant", &Config::variant,
                   {"baseline", "repa-rgb", "repa-depth", "repa-mask", "naive-multi",
                    "m2repa-cos2", "m2repa-cka"});
        add_int("train", "steps", &Config::steps);
        add_int("train", "batch", &Config::batch);
        add_double("train", "lr", &Config::lr);
        add_u64("train", "seed", &Config::seed);
        add_double("train", "lambda_align", &Config::lambda_align);
        add_double("train", "lambda_decouple", &Config::lambda_decouple);
        add_choice("train", "optimizer", &Config::optimizer, {"adam", "sgd"});
        add_choice("train", "timestep_mode", &Config::timestep_mode,
                   {"uniform-iid", "shared"});

        add_int("align", "expert_dim", &Config::expert_dim);
        add_int("align", "expert_depth", &Config::expert_depth);
        add_int("align", "projector_depth", &Config::projector_depth);
        add_u64("align", "expert_seed_rgb", &Config::expert_seed_rgb);
        add_u64("align", "expert_seed_depth", &Config::expert_seed_depth);
        add_u64("align", "expert_seed_mask", &Config::expert_seed_mask);
        add_int("align", "cka_max_rows", &Config::cka_max_rows);

        add_int("eval", "horizon_short", &Config::horizon_short);
        add_int("eval", "horizon_long", &Config::horizon_long);
        add_int("eval", "euler_steps", &Config::euler_steps);
        add_int("eval", "eval_clips", &Config::eval_clips);
        add_int("eval", "max_horizon", &Config::max_horizon);
        r.push_back({"eval", "horizons", [](const Config& c) { return c.horizons; },
                     [](Config& c, const std::string& v) {
                         if (v != "short" && v != "long" && v != "short,long") {
                             fail("key 'horizons' must be short, long, or short,long");
                         }
                         c.horizons = v;
                     }});
        return r;
    }();
    return entries;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

Config parse_stream(std::istream& in, const std::string& origin) {
    Config cfg;
    std::string line;
    std::string section;
    int line_no = 0;
    static const std::set<std::string> sections = {"model", "train", "data", "align", "eval"};
    while (std::getline(in, line)) {
        ++line_no;
        const auto cut = line.find_first_of("#;");
        if (cut != std::string::npos) line = line.substr(0, cut);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                fail(origin + ":" + std::to_string(line_no) + ": malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            if (!sections.count(section)) {
                fail(origin + ":" + std::to_string(line_no) + ": unknown section [" + section +
                     "]");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail(origin + ":" + std::to_string(line_no) + ": expected key = value");
        }
        if (section.empty()) {
            fail(origin + ":" + std::to_string(line_no) + ": key before any [section]");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            apply_config_line(cfg, section, key, value);
        } catch (const std::exception& e) {
            fail(origin + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

}  // namespace

void apply_config_line(Config& cfg, const std::string& section, const std::string& key,
                       const std::string& value) {
    for (const auto& e : registry()) {
        if (section == e.section && key == e.key) {
            e.set(cfg, value);
            return;
        }
    }
    fail("unknown key '" + key + "' in section [" + section + "]");
}

std::string get_config_value(const Config& cfg, const std::string& section,
                             const std::string& key) {
    for (const auto& e : registry()) {
        if (section == e.section && key == e.key) return e.get(cfg);
    }
    fail("unknown key '" + key + "' in section [" + section + "]");
}

Config load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open config file '" + path + "'");
    Config cfg = parse_stream(in, path);
    validate_config(cfg);
    return cfg;
}

std::string config_to_text(const Config& cfg) {
    std::ostringstream os;
    const char* last_section = "";
    for (const auto& e : registry()) {
        if (std::string(last_section) != e.section) {
            if (*last_section) os << "\n";
            os << "[" << e.section << "]\n";
            last_section = e.section;
        }
        os << e.key << " = " << e.get(cfg) << "\n";
    }
    return os.str();
}

Config config_from_text(const std::string& text) {
    std::istringstream in(text);
    Config cfg = parse_stream(in, "<embedded>");
    validate_config(cfg);
    return cfg;
}

void validate_config(const Config& cfg) {
    if (cfg.height < 8 || cfg.width < 8) fail("height/width must be >= 8");
    if (cfg.height != 16 && cfg.height != 32 && cfg.height != 64) {
        fail("height must be one of {16, 32, 64}");
    }
    if (cfg.width != 16 && cfg.width != 32 && cfg.width != 64) {
        fail("width must be one of {16, 32, 64}");
    }
    if (cfg.frames < 2) fail("frames must be >= 2");
    if (cfg.context < 1 || cfg.context >= cfg.frames) fail("context must be in [1, frames)");
    if (cfg.objects < 1 || cfg.objects > cfg.mask_channels) {
        fail("objects must be in [1, mask_channels]");
    }
    if (cfg.batch < 1) fail("batch must be >= 1");
    if (cfg.steps < 1) fail("steps must be >= 1");
    if (cfg.lambda_align < 0 || cfg.lambda_decouple < 0) fail("loss weights must be >= 0");
    if (cfg.n_clips < 2) fail("n_clips must be >= 2");
    if (!(cfg.split_ratio > 0.0 && cfg.split_ratio < 1.0)) fail("split_ratio must be in (0,1)");
    if (cfg.eval_clips < 1) fail("eval_clips must be >= 1");
    if (cfg.horizon_short < 1 || cfg.horizon_long < 1) fail("horizons must be >= 1");
    if (cfg.euler_steps < 1) fail("euler_steps must be >= 1");
    make_backbone_config(cfg).validate();
}

BackboneConfig make_backbone_config(const Config& cfg) {
    BackboneConfig b;
    b.height = cfg.height;
    b.width = cfg.width;
    b.mask_channels = cfg.mask_channels;
    b.embed_dim = cfg.embed_dim;
    b.depth = cfg.depth;
    b.tap_layer = cfg.tap_layer;
    b.patch = cfg.patch;
    b.variant = cfg.arch == "pixel-concat" ? ArchVariant::PixelConcat : ArchVariant::LatentSum;
    b.conditioning =
        cfg.conditioning == "pose" ? ConditioningKind::Pose : ConditioningKind::Action;
    b.action_alphabet = cfg.action_alphabet;
    b.latent_dim = cfg.latent_dim;
    b.latent_patch = cfg.latent_patch;
    b.aux_conv_channels = cfg.aux_conv_channels;
    return b;
}

SceneConfig make_scene_config(const Config& cfg) {
    SceneConfig s;
    s.height = cfg.height;
    s.width = cfg.width;
    s.object_count = cfg.objects;
    s.mask_channels = cfg.mask_channels;
    s.motion = cfg.motion == "static" ? MotionModel::Static
               : cfg.motion == "linear" ? MotionModel::Linear
                                        : MotionModel::Pan;
    s.control = cfg.conditioning == "pose" ? ControlKind::CameraPose
                                           : ControlKind::DiscreteAction;
    s.action_alphabet = cfg.action_alphabet;
    return s;
}

}  // namespace m2repa
