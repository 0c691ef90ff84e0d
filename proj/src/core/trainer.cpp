#include "trainer.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "checkpoint.h"
#include "rng.h"

#ifndef M2REPA_BUILD_ID
#define M2REPA_BUILD_ID "unversioned"
#endif

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("trainer: " + msg);
}

Tensor encode_config_text(const std::string& text) {
    std::vector<float> data(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        data[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
    }
    return Tensor::from_data({static_cast<std::int64_t>(text.size())}, std::move(data));
}

std::string decode_config_text(const Tensor& t) {
    std::string text;
    text.reserve(static_cast<std::size_t>(t.size()));
    for (float v : t.values()) {
        text.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v))));
    }
    return text;
}

}  // namespace

TrainVariant parse_variant(const std::string& name) {
    if (name == "baseline") return TrainVariant::Baseline;
    if (name == "repa-rgb") return TrainVariant::RepaRgb;
    if (name == "repa-depth") return TrainVariant::RepaDepth;
    if (name == "repa-mask") return TrainVariant::RepaMask;
    if (name == "naive-multi") return TrainVariant::NaiveMulti;
    if (name == "m2repa-cos2") return TrainVariant::M2RepaCos2;
    if (name == "m2repa-cka") return TrainVariant::M2RepaCka;
    fail("unknown training variant '" + name + "'");
}

const char* variant_name(TrainVariant v) {
    switch (v) {
        case TrainVariant::Baseline: return "baseline";
        case TrainVariant::RepaRgb: return "repa-rgb";
        case TrainVariant::RepaDepth: return "repa-depth";
        case TrainVariant::RepaMask: return "repa-mask";
        case TrainVariant::NaiveMulti: return "naive-multi";
        case TrainVariant::M2RepaCos2: return "m2repa-cos2";
        case TrainVariant::M2RepaCka: return "m2repa-cka";
    }
    return "?";
}

std::vector<TrainVariant> all_variants() {
    return {TrainVariant::Baseline,  TrainVariant::RepaRgb,    TrainVariant::RepaDepth,
            TrainVariant::RepaMask,  TrainVariant::NaiveMulti, TrainVariant::M2RepaCos2,
            TrainVariant::M2RepaCka};
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

Optimizer::Optimizer(std::string kind, double lr, const NamedParams& trainable)
    : kind_(std::move(kind)), lr_(lr) {
    for (const auto& [name, t] : trainable) {
        names_.push_back(name);
        m_.emplace_back(static_cast<std::size_t>(t.size()), 0.0f);
        v_.emplace_back(static_cast<std::size_t>(t.size()), 0.0f);
    }
}

int Optimizer::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
        if (names_[i] == name) return static_cast<int>(i);
    }
    fail("optimizer has no state for parameter '" + name + "'");
}

std::vector<float>& Optimizer::moment_m(const std::string& name) {
    return m_[static_cast<std::size_t>(index_of(name))];
}

std::vector<float>& Optimizer::moment_v(const std::string& name) {
    return v_[static_cast<std::size_t>(index_of(name))];
}

const std::vector<float>& Optimizer::moment_m(const std::string& name) const {
    return m_[static_cast<std::size_t>(index_of(name))];
}

const std::vector<float>& Optimizer::moment_v(const std::string& name) const {
    return v_[static_cast<std::size_t>(index_of(name))];
}

void Optimizer::update(const std::vector<std::pair<std::string, Tensor>>& params,
                       const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) fail("optimizer got mismatched grads");
    ++step_;
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor t = params[p].second;
        auto& data = t.mutable_values();
        auto g = grads[p].values();
        if (kind_ == "sgd") {
            for (std::size_t i = 0; i < data.size(); ++i) {
                data[i] -= static_cast<float>(lr_ * g[i]);
            }
            continue;
        }
        const int idx = index_of(params[p].first);
        auto& m = m_[static_cast<std::size_t>(idx)];
        auto& v = v_[static_cast<std::size_t>(idx)];
        for (std::size_t i = 0; i < data.size(); ++i) {
            m[i] = static_cast<float>(beta1 * m[i] + (1.0 - beta1) * g[i]);
            v[i] = static_cast<float>(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            data[i] -= static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps));
        }
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

Trainer::Trainer(const Config& cfg)
    : cfg_(cfg),
      variant_(parse_variant(cfg.variant)),
      model_cfg_(make_backbone_config(cfg)),
      model_((validate_config(cfg), model_cfg_), derive_seed(cfg.seed, "model")),
      bank_(cfg.embed_dim,
            {cfg.expert_dim, cfg.expert_dim, cfg.expert_dim},
            cfg.projector_depth, derive_seed(cfg.seed, "bank")),
      opt_("pending", 0.0, {}) {
    if (model_cfg_.variant == ArchVariant::LatentSum) {
        codec_ = std::make_unique<LatentCodec>(model_cfg_, derive_seed(cfg.seed, "codec"));
    }

    const int n_tokens = model_cfg_.tokens_per_frame();
    const Modality mods[3] = {Modality::Rgb, Modality::Depth, Modality::Mask};
    const std::uint64_t seeds[3] = {cfg.expert_seed_rgb, cfg.expert_seed_depth,
                                    cfg.expert_seed_mask};
    for (int k = 0; k < 3; ++k) {
        ExpertSpec spec;
        spec.modality = mods[k];
        spec.seed = seeds[k];
        spec.feature_dim = cfg.expert_dim;
        spec.token_grid = n_tokens;
        spec.depth = cfg.expert_depth;
        experts_.emplace_back(spec, cfg.mask_channels, cfg.height, cfg.width);
    }

    data_ = make_dataset(cfg.seed, cfg.n_clips, cfg.split_ratio, make_scene_config(cfg),
                         cfg.frames, cfg.context);
    for (const auto& clip : data_.train) {
        Tensor pixels = clip.to_tensor();
        train_pixels_.push_back(pixels);
        train_states_.push_back(codec_ ? codec_->encode(pixels) : pixels);
    }
    expert_cache_.assign(3, std::vector<Tensor>(train_pixels_.size()));

    trainable_ = model_.parameters();
    for (const auto& p : bank_.parameters()) trainable_.push_back(p);
    opt_ = Optimizer(cfg.optimizer, cfg.lr, trainable_);
}

std::vector<int> Trainer::active_experts() const {
    switch (variant_) {
        case TrainVariant::Baseline: return {};
        case TrainVariant::RepaRgb: return {0};
        case TrainVariant::RepaDepth: return {1};
        case TrainVariant::RepaMask: return {2};
        default: return {0, 1, 2};
    }
}

Tensor Trainer::stack_states(const std::vector<int>& clip_idx) const {
    const Tensor& first = train_states_[static_cast<std::size_t>(clip_idx[0])];
    const std::int64_t per_clip = first.size();
    std::vector<float> data(clip_idx.size() * static_cast<std::size_t>(per_clip));
    for (std::size_t i = 0; i < clip_idx.size(); ++i) {
        auto src = train_states_[static_cast<std::size_t>(clip_idx[i])].values();
        std::copy(src.begin(), src.end(), data.begin() + i * static_cast<std::size_t>(per_clip));
    }
    Shape shape = first.shape();
    shape[0] *= static_cast<std::int64_t>(clip_idx.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor Trainer::stack_pixels(const std::vector<int>& clip_idx) const {
    const Tensor& first = train_pixels_[static_cast<std::size_t>(clip_idx[0])];
    const std::int64_t per_clip = first.size();
    std::vector<float> data(clip_idx.size() * static_cast<std::size_t>(per_clip));
    for (std::size_t i = 0; i < clip_idx.size(); ++i) {
        auto src = train_pixels_[static_cast<std::size_t>(clip_idx[i])].values();
        std::copy(src.begin(), src.end(), data.begin() + i * static_cast<std::size_t>(per_clip));
    }
    Shape shape = first.shape();
    shape[0] *= static_cast<std::int64_t>(clip_idx.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

std::vector<ControlSignal> Trainer::stack_controls(const std::vector<int>& clip_idx) const {
    std::vector<ControlSignal> out;
    for (int idx : clip_idx) {
        const auto& c = data_.train[static_cast<std::size_t>(idx)].controls;
        out.insert(out.end(), c.begin(), c.end());
    }
    return out;
}

Tensor Trainer::expert_targets(int which, const std::vector<int>& clip_idx) {
    auto& cache = expert_cache_[static_cast<std::size_t>(which)];
    std::vector<float> data;
    Shape shape;
    for (std::size_t i = 0; i < clip_idx.size(); ++i) {
        auto& slot = cache[static_cast<std::size_t>(clip_idx[i])];
        if (!slot.defined()) {
            slot = experts_[static_cast<std::size_t>(which)].extract(
                train_pixels_[static_cast<std::size_t>(clip_idx[i])]);
        }
        auto src = slot.values();
        if (i == 0) {
            shape = slot.shape();
            data.reserve(src.size() * clip_idx.size());
        }
        data.insert(data.end(), src.begin(), src.end());
    }
    shape[0] *= static_cast<std::int64_t>(clip_idx.size());
    return Tensor::from_data(std::move(shape), std::move(data));
}

LossBreakdown Trainer::run_step(int step) {
    const int b = cfg_.batch;
    const int t = cfg_.frames;
    Rng batch_rng(derive_seed(cfg_.seed, "batch", static_cast<std::uint64_t>(step)));
    Rng t_rng(derive_seed(cfg_.seed, "tsteps", static_cast<std::uint64_t>(step)));
    Rng noise_rng(derive_seed(cfg_.seed, "noise", static_cast<std::uint64_t>(step)));

    std::vector<int> clip_idx(static_cast<std::size_t>(b));
    for (auto& idx : clip_idx) {
        idx = static_cast<int>(batch_rng.uniform_int(static_cast<std::int64_t>(train_states_.size())));
    }

    Tensor x1 = stack_states(clip_idx);
    auto controls = stack_controls(clip_idx);

    const TimestepMode mode =
        cfg_.timestep_mode == "shared" ? TimestepMode::Shared : TimestepMode::UniformIid;
    std::vector<float> t_flat;
    t_flat.reserve(static_cast<std::size_t>(b * t));
    for (int i = 0; i < b; ++i) {
        auto per_clip = sample_timesteps(t, mode, t_rng);
        t_flat.insert(t_flat.end(), per_clip.begin(), per_clip.end());
    }

    std::vector<float> noise(static_cast<std::size_t>(x1.size()));
    for (auto& v : noise) v = noise_rng.normal();
    Tensor x0 = Tensor::from_data(x1.shape(), std::move(noise));

    FlowState fs = interpolate(x1, x0, t_flat);
#ifndef NDEBUG
    {
        // per-frame mixing identity, recomputed independently
        const std::int64_t frame = x1.size() / x1.dim(0);
        auto xt = fs.x_t.values();
        auto a = x1.values();
        auto c = x0.values();
        for (std::int64_t i = 0; i < x1.dim(0); ++i) {
            const float ti = t_flat[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < frame; ++j) {
                const std::int64_t k = i * frame + j;
                const float want = ti * a[k] + (1 - ti) * c[k];
                if (std::abs(xt[k] - want) > 1e-6f) fail("flow state violates the mixing identity");
            }
        }
    }
#endif

    auto guarded = [&](const char* term, auto&& fn) -> Tensor {
        try {
            Tensor value = fn();
            if (!std::isfinite(value.scalar_value())) {
                fail("step " + std::to_string(step) + ": loss term '" + term +
                     "' is not finite");
            }
            return value;
        } catch (const std::exception& e) {
            fail("step " + std::to_string(step) + ": loss term '" + term + "': " + e.what());
        }
    };

    GradTape tape;
    ForwardResult fwd;
    Tensor fm = guarded("fm", [&] {
        fwd = model_.forward(fs.x_t, b, t_flat, controls);
        return fm_loss(fwd.velocity, fs.v_target);
    });

    const auto active = active_experts();
    Tensor align_term = Tensor::scalar(0.0f);
    Tensor decouple_term = Tensor::scalar(0.0f);
    std::vector<Tensor> projected;
    if (!active.empty()) {
        projected = bank_.project(fwd.hidden_tap);
        align_term = guarded("align", [&] {
            std::vector<Tensor> proj_active, targets;
            for (int k : active) {
                proj_active.push_back(projected[static_cast<std::size_t>(k)]);
                targets.push_back(expert_targets(k, clip_idx));
            }
            return m2repa_loss(proj_active, targets);
        });
        if (variant_ == TrainVariant::M2RepaCka) {
            decouple_term = guarded("decouple", [&] {
                return decouple_loss(projected, cfg_.cka_max_rows,
                                     derive_seed(cfg_.seed, "cka-rows", static_cast<std::uint64_t>(step)));
            });
        } else if (variant_ == TrainVariant::M2RepaCos2) {
            decouple_term = guarded("decouple", [&] { return cos2_decouple_loss(projected); });
        }
    }

    Tensor total = guarded("total", [&] {
        return total_loss(fm, align_term, decouple_term,
                          static_cast<float>(cfg_.lambda_align),
                          static_cast<float>(cfg_.lambda_decouple));
    });

    // variant gating decides which parameters the step may touch
    std::vector<std::pair<std::string, Tensor>> params;
    for (const auto& p : model_.parameters()) params.push_back(p);
    if (!active.empty()) {
        for (const auto& p : bank_.parameters()) {
            for (int k : active) {
                if (p.first.rfind("proj/" + std::to_string(k) + "/", 0) == 0) {
                    params.push_back(p);
                    break;
                }
            }
        }
    }
    std::vector<Tensor> handles;
    handles.reserve(params.size());
    for (const auto& p : params) handles.push_back(p.second);
    auto grads = tape.grad(total, handles);
    opt_.update(params, grads);

    return make_breakdown(fm, align_term, decouple_term, total,
                          static_cast<float>(cfg_.lambda_align),
                          static_cast<float>(cfg_.lambda_decouple));
}

namespace {

// Wraps the backbone for the sampler. The clip enters as one batch item.
class BackboneField : public VelocityField {
public:
    BackboneField(const Backbone& model, ControlKind expected) : model_(model), kind_(expected) {}

    Tensor velocity(const Tensor& x_window, const std::vector<float>& t_vec,
                    std::span<const ControlSignal> controls, int) override {
        (void)kind_;
        return model_.forward(x_window, 1, t_vec, controls).velocity;
    }

private:
    const Backbone& model_;
    ControlKind kind_;
};

}  // namespace

EvalResult Trainer::evaluate(const std::string& horizon_name) {
    EvalResult result;
    result.horizon_name = horizon_name;
    if (horizon_name == "short") {
        result.horizon = cfg_.horizon_short;
    } else if (horizon_name == "long") {
        result.horizon = cfg_.horizon_long;
    } else {
        fail("unknown horizon '" + horizon_name + "' (want short or long)");
    }
    if (result.horizon > cfg_.max_horizon) {
        fail("horizon " + std::to_string(result.horizon) + " exceeds max_horizon " +
             std::to_string(cfg_.max_horizon));
    }

    RolloutConfig rcfg;
    rcfg.window = cfg_.frames;
    rcfg.euler_steps = cfg_.euler_steps;
    rcfg.max_horizon = cfg_.max_horizon;

    const int clips = std::min<int>(cfg_.eval_clips, static_cast<int>(data_.val.size()));
    if (clips < 1) fail("no validation clips available for evaluation");

    BackboneField field(model_, make_scene_config(cfg_).control);
    ClipMetrics sum;
    for (int i = 0; i < clips; ++i) {
        const auto& val_clip = data_.val[static_cast<std::size_t>(i)];
        SceneState scene = generate_scene(val_clip.seed, make_scene_config(cfg_));
        TriModalClip gt = render_clip(scene, cfg_.context + result.horizon, cfg_.context);
        const std::uint64_t noise_seed =
            derive_seed(cfg_.seed, "eval-noise", static_cast<std::uint64_t>(i));

        TriModalClip pred;
        if (codec_) {
            Tensor gt_pixels = gt.to_tensor();
            std::int64_t sizes[] = {cfg_.context, gt_pixels.dim(0) - cfg_.context};
            Tensor ctx_pixels = split(gt_pixels, 0, sizes)[0];
            Tensor ctx_latents = codec_->encode(ctx_pixels);
            Tensor latents = rollout_frames(field, ctx_latents, gt.controls, result.horizon,
                                            rcfg, noise_seed);
            Tensor pixels = codec_->decode(latents);
            pred = clip_from_tensor(pixels, cfg_.mask_channels);
            pred.context_count = cfg_.context;
            // decoding is lossy; keep the true context frames for metrics hygiene
            for (int f = 0; f < cfg_.context; ++f) {
                pred.frames[static_cast<std::size_t>(f)] = gt.frames[static_cast<std::size_t>(f)];
            }
        } else {
            pred = rollout(field, gt, result.horizon, rcfg, noise_seed);
        }
        ClipMetrics m = evaluate_clip(pred, gt, cfg_.context);
        sum.psnr += m.psnr;
        sum.ssim += m.ssim;
        sum.abs_rel += m.abs_rel;
        sum.delta1 += m.delta1;
        sum.miou += m.miou;
        sum.matched_fraction += m.matched_fraction;
    }
    sum.psnr /= clips;
    sum.ssim /= clips;
    sum.abs_rel /= clips;
    sum.delta1 /= clips;
    sum.miou /= clips;
    sum.matched_fraction /= clips;
    result.metrics = sum;
    return result;
}

double Trainer::mean_pairwise_cka() {
    // fixed probe: first training clips, seeded noise, mid-trajectory t
    const int b = std::min<int>(2, static_cast<int>(train_states_.size()));
    std::vector<int> clip_idx;
    for (int i = 0; i < b; ++i) clip_idx.push_back(i);
    Tensor x1 = stack_states(clip_idx);
    Rng noise_rng(derive_seed(cfg_.seed, "cka-diag"));
    std::vector<float> noise(static_cast<std::size_t>(x1.size()));
    for (auto& v : noise) v = noise_rng.normal();
    Tensor x0 = Tensor::from_data(x1.shape(), std::move(noise));
    std::vector<float> t_flat(static_cast<std::size_t>(b * cfg_.frames), 0.5f);
    FlowState fs = interpolate(x1, x0, t_flat);
    auto controls = stack_controls(clip_idx);
    ForwardResult fwd = model_.forward(fs.x_t, b, t_flat, controls);
    auto projected = bank_.project(fwd.hidden_tap);
    return decouple_loss(projected, cfg_.cka_max_rows, derive_seed(cfg_.seed, "cka-diag-rows"))
        .scalar_value();
}

Tensor Trainer::hidden_tap_for_clip(const TriModalClip& clip, const std::vector<float>& t_vec,
                                    std::uint64_t noise_seed) {
    Tensor pixels = clip.to_tensor();
    Tensor state = codec_ ? codec_->encode(pixels) : pixels;
    Rng noise_rng(derive_seed(noise_seed, "tap-noise"));
    std::vector<float> noise(static_cast<std::size_t>(state.size()));
    for (auto& v : noise) v = noise_rng.normal();
    Tensor x0 = Tensor::from_data(state.shape(), std::move(noise));
    FlowState fs = interpolate(state, x0, t_vec);
    return model_.forward(fs.x_t, 1, t_vec, clip.controls).hidden_tap;
}

RunReport Trainer::run_loop() {
    RunReport report;
    report.variant = cfg_.variant;
    report.seed = cfg_.seed;
    report.config_echo = config_to_text(cfg_);
    report.build_id = M2REPA_BUILD_ID;
    const auto start = std::chrono::steady_clock::now();
    for (int s = 0; s < cfg_.steps; ++s) {
        report.history.push_back(run_step(s));
    }
    report.mean_pairwise_cka = mean_pairwise_cka();
    if (!data_.val.empty()) {
        report.final_metrics = evaluate("short").metrics;
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

std::vector<std::uint32_t> Trainer::expert_checksums() const {
    std::vector<std::uint32_t> sums;
    for (const auto& e : experts_) sums.push_back(e.weight_checksum());
    return sums;
}

void Trainer::save_checkpoint(const std::string& path) const {
    std::vector<TensorRecord> records;
    records.push_back({"meta/config_text", encode_config_text(config_to_text(cfg_))});
    records.push_back(
        {"meta/opt_step",
         Tensor::from_data({1}, {static_cast<float>(opt_.step_count())})});
    for (const auto& [name, t] : trainable_) records.push_back({"param/" + name, t});
    for (const auto& [name, t] : trainable_) {
        records.push_back({"opt/m/" + name, Tensor::from_data(t.shape(), opt_.moment_m(name))});
        records.push_back({"opt/v/" + name, Tensor::from_data(t.shape(), opt_.moment_v(name))});
    }
    write_bundle(path, records);
}

void Trainer::load_checkpoint(const std::string& path) {
    auto records = read_bundle(path);
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& r : records) {
            if (r.name == name) return r.tensor;
        }
        fail("checkpoint '" + path + "' is missing record '" + name + "'");
    };
    for (auto& [name, t] : trainable_) {
        const Tensor& src = find("param/" + name);
        if (src.shape() != t.shape()) {
            fail("checkpoint parameter '" + name + "' has shape " + shape_str(src.shape()) +
                 ", expected " + shape_str(t.shape()));
        }
        auto sv = src.values();
        std::copy(sv.begin(), sv.end(), t.mutable_values().begin());
        auto mv = find("opt/m/" + name).values();
        auto vv = find("opt/v/" + name).values();
        std::copy(mv.begin(), mv.end(), opt_.moment_m(name).begin());
        std::copy(vv.begin(), vv.end(), opt_.moment_v(name).begin());
    }
    opt_.set_step_count(static_cast<std::int64_t>(std::lround(find("meta/opt_step").scalar_value())));
}

Config Trainer::checkpoint_config(const std::string& path) {
    auto records = read_bundle(path);
    for (const auto& r : records) {
        if (r.name == "meta/config_text") return config_from_text(decode_config_text(r.tensor));
    }
    fail("checkpoint '" + path + "' carries no embedded config");
}

std::vector<SweepPoint> sweep(const Config& base, const std::string& axis,
                              std::span<const double> values) {
    if (values.empty()) fail("sweep needs at least one value");
    std::vector<SweepPoint> points;
    for (double v : values) {
        Config cfg = base;
        if (axis == "lambda-decouple") {
            cfg.lambda_decouple = v;
        } else if (axis == "tap-layer") {
            cfg.tap_layer = static_cast<int>(std::lround(v));
        } else if (axis == "projector-depth") {
            cfg.projector_depth = static_cast<int>(std::lround(v));
        } else {
            fail("unknown sweep axis '" + axis + "' (want lambda-decouple | tap-layer | "
                 "projector-depth)");
        }
        validate_config(cfg);
        Trainer trainer(cfg);
        SweepPoint point;
        point.value = v;
        point.report = trainer.run_loop();
        point.eval_short = trainer.evaluate("short");
        points.push_back(std::move(point));
    }
    return points;
}

}  // namespace m2repa
