#include "backbone.h"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "rng.h"

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("backbone: " + msg);
}

constexpr int kCodecPatch = 2;   // codec works on 2x2 pixel patches
constexpr int kTimeFeats = 16;   // sinusoidal features of t

// Orthonormal columns [rows, cols] via Gram-Schmidt in double.
Tensor orthonormal_columns(int rows, int cols, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < cols) {
        std::vector<double> v(static_cast<std::size_t>(rows));
        for (auto& x : v) x = rng.normal();
        for (const auto& b : basis) {
            double dot = 0.0;
            for (int i = 0; i < rows; ++i) dot += v[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
            for (int i = 0; i < rows; ++i) v[static_cast<std::size_t>(i)] -= dot * b[static_cast<std::size_t>(i)];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (auto& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    std::vector<float> data(static_cast<std::size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i) {
        for (int c = 0; c < cols; ++c) {
            data[static_cast<std::size_t>(i * cols + c)] =
                static_cast<float>(basis[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)]);
        }
    }
    return Tensor::from_data({rows, cols}, std::move(data));
}

// [rows, d] linear layer applied to rank-3 tokens [B, S, d_in].
Tensor linear3(const Tensor& x, const Tensor& w, const Tensor& b) {
    const std::int64_t b0 = x.dim(0), s = x.dim(1), d_in = x.dim(2);
    Tensor flat = reshape(x, {b0 * s, d_in});
    return reshape(add(matmul(flat, w), b), {b0, s, w.dim(1)});
}

Tensor sinusoidal_features(const std::vector<float>& t_vec) {
    const auto f = static_cast<std::int64_t>(t_vec.size());
    std::vector<float> feats(static_cast<std::size_t>(f * kTimeFeats));
    for (std::int64_t i = 0; i < f; ++i) {
        const double t = 1000.0 * t_vec[static_cast<std::size_t>(i)];
        for (int j = 0; j < kTimeFeats / 2; ++j) {
            const double omega = std::pow(10000.0, -static_cast<double>(j) / (kTimeFeats / 2.0));
            feats[static_cast<std::size_t>(i * kTimeFeats + 2 * j)] =
                static_cast<float>(std::sin(t * omega));
            feats[static_cast<std::size_t>(i * kTimeFeats + 2 * j + 1)] =
                static_cast<float>(std::cos(t * omega));
        }
    }
    return Tensor::from_data({f, kTimeFeats}, std::move(feats));
}

}  // namespace

// ---------------------------------------------------------------------------
// BackboneConfig
// ---------------------------------------------------------------------------

int BackboneConfig::state_channels() const {
    if (variant == ArchVariant::PixelConcat) return pixel_channels();
    return rgb_only ? latent_dim : 3 * latent_dim;
}

int BackboneConfig::state_height() const {
    return variant == ArchVariant::PixelConcat ? height : latent_height();
}

int BackboneConfig::state_width() const {
    return variant == ArchVariant::PixelConcat ? width : latent_width();
}

int BackboneConfig::tokens_per_frame() const {
    if (variant == ArchVariant::PixelConcat) return (height / patch) * (width / patch);
    return (latent_height() / latent_patch) * (latent_width() / latent_patch);
}

void BackboneConfig::validate() const {
    if (tap_layer < 1 || tap_layer > depth) {
        fail("tap layer " + std::to_string(tap_layer) + " outside [1," + std::to_string(depth) +
             "]");
    }
    if (embed_dim < 4) fail("embed dim too small");
    if (variant == ArchVariant::PixelConcat) {
        if (height % patch != 0 || width % patch != 0) {
            fail("image does not tile into patches of " + std::to_string(patch));
        }
        if (rgb_only) fail("rgb_only is a latent-sum mode");
    } else {
        if (height % (2 * latent_patch) != 0 || width % (2 * latent_patch) != 0) {
            fail("latent grid does not tile into patches of " + std::to_string(latent_patch));
        }
        if (mask_channels != 3) {
            fail("latent-sum variant requires exactly 3 mask channels (codec input)");
        }
        if (latent_dim < 1 || latent_dim > kCodecPatch * kCodecPatch) {
            fail("latent_dim must be at most the depth patch rank of " +
                 std::to_string(kCodecPatch * kCodecPatch));
        }
    }
}

// ---------------------------------------------------------------------------
// LatentCodec
// ---------------------------------------------------------------------------

LatentCodec::LatentCodec(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    const int p2 = kCodecPatch * kCodecPatch;
    const int in_dims[3] = {3 * p2, 1 * p2, cfg.mask_channels * p2};
    for (int m = 0; m < 3; ++m) {
        proj_[m] = orthonormal_columns(in_dims[m], cfg.latent_dim,
                                       derive_seed(seed, "codec", static_cast<std::uint64_t>(m)));
    }
}

Tensor LatentCodec::encode_modality(const Tensor& pixel_clip, int which) const {
    const std::int64_t f = pixel_clip.dim(0);
    const int hl = cfg_.latent_height(), wl = cfg_.latent_width();
    const int c0 = which == 0 ? 0 : which == 1 ? 3 : 4;
    const int c1 = which == 0 ? 3 : which == 1 ? 4 : 4 + cfg_.mask_channels;
    Tensor patches = im2patches(pixel_clip, kCodecPatch, c0, c1);
    Tensor flat = reshape(patches, {f * patches.dim(1), patches.dim(2)});
    Tensor z = matmul(flat, proj_[which]);
    Tensor tokens = reshape(z, {f, patches.dim(1), cfg_.latent_dim});
    return patches2im(tokens, 1, cfg_.latent_dim, hl, wl);
}

Tensor LatentCodec::encode(const Tensor& pixel_clip) const {
    if (pixel_clip.rank() != 4 || pixel_clip.dim(1) != cfg_.pixel_channels()) {
        fail("codec encode expects [F," + std::to_string(cfg_.pixel_channels()) + ",H,W], got " +
             shape_str(pixel_clip.shape()));
    }
    Tensor parts[] = {encode_modality(pixel_clip, 0), encode_modality(pixel_clip, 1),
                      encode_modality(pixel_clip, 2)};
    return concat(parts, 1);
}

Tensor LatentCodec::decode(const Tensor& latents) const {
    if (latents.rank() != 4 || latents.dim(1) != 3 * cfg_.latent_dim) {
        fail("codec decode expects [F," + std::to_string(3 * cfg_.latent_dim) + ",hl,wl], got " +
             shape_str(latents.shape()));
    }
    const std::int64_t f = latents.dim(0);
    const int hl = cfg_.latent_height(), wl = cfg_.latent_width();
    std::int64_t sizes[] = {cfg_.latent_dim, cfg_.latent_dim, cfg_.latent_dim};
    auto per_mod = split(latents, 1, sizes);
    const int chans[3] = {3, 1, cfg_.mask_channels};
    std::vector<Tensor> pixels;
    for (int m = 0; m < 3; ++m) {
        Tensor tokens = im2patches(per_mod[static_cast<std::size_t>(m)], 1, 0, cfg_.latent_dim);
        Tensor flat = reshape(tokens, {f * tokens.dim(1), cfg_.latent_dim});
        Tensor back = matmul(flat, transpose(proj_[m]));
        pixels.push_back(patches2im(reshape(back, {f, tokens.dim(1), back.dim(1)}), kCodecPatch,
                                    chans[m], cfg_.height, cfg_.width));
    }
    return concat(pixels, 1);
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Tensor Backbone::add_param(const std::string& name, Shape shape, float scale,
                           std::uint64_t seed) {
    Rng rng(derive_seed(seed, name));
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = scale * rng.normal();
    Tensor t = Tensor::from_data(std::move(shape), std::move(v));
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
}

Tensor Backbone::add_const_param(const std::string& name, Shape shape, float value) {
    Tensor t = Tensor::full(std::move(shape), value);
    t.set_requires_grad(true);
    params_.emplace_back(name, t);
    return t;
}

Backbone::Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
}

void Backbone::build(std::uint64_t seed) {
    const int d = cfg_.embed_dim;
    const float inv_d = 1.0f / std::sqrt(static_cast<float>(d));

    if (cfg_.variant == ArchVariant::PixelConcat) {
        const int p2 = cfg_.patch * cfg_.patch;
        const int dims[3] = {3 * p2, 1 * p2, cfg_.mask_channels * p2};
        const char* names[3] = {"enc/rgb", "enc/depth", "enc/mask"};
        for (int m = 0; m < 3; ++m) {
            add_param(std::string(names[m]) + "/w", {dims[m], d},
                      1.0f / std::sqrt(static_cast<float>(dims[m])), seed);
            add_const_param(std::string(names[m]) + "/b", {d}, 0.0f);
        }
        add_param("fuse/w", {3 * d, d}, 1.0f / std::sqrt(3.0f * d), seed);
        add_const_param("fuse/b", {d}, 0.0f);
    } else {
        const int in_dim = cfg_.latent_dim * cfg_.latent_patch * cfg_.latent_patch;
        add_param("in/rgb/w", {in_dim, d}, 1.0f / std::sqrt(static_cast<float>(in_dim)), seed);
        add_const_param("in/rgb/b", {d}, 0.0f);
        if (!cfg_.rgb_only) {
            add_param("in/depth/w", {in_dim, d}, 1.0f / std::sqrt(static_cast<float>(in_dim)),
                      seed);
            add_const_param("in/depth/b", {d}, 0.0f);
            add_param("in/mask/w", {in_dim, d}, 1.0f / std::sqrt(static_cast<float>(in_dim)),
                      seed);
            add_const_param("in/mask/b", {d}, 0.0f);
            add_const_param("gate/depth", {d}, 1.0f);
            add_const_param("gate/mask", {d}, 1.0f);
        }
    }

    add_param("t/w1", {kTimeFeats, d}, 1.0f / std::sqrt(static_cast<float>(kTimeFeats)), seed);
    add_const_param("t/b1", {d}, 0.0f);
    add_param("t/w2", {d, d}, inv_d, seed);
    add_const_param("t/b2", {d}, 0.0f);

    if (cfg_.conditioning == ConditioningKind::Pose) {
        add_param("cond/w1", {6, d}, 1.0f / std::sqrt(6.0f), seed);
        add_const_param("cond/b1", {d}, 0.0f);
        add_param("cond/w2", {d, d}, inv_d, seed);
        add_const_param("cond/b2", {d}, 0.0f);
    } else {
        add_param("cond/table", {cfg_.action_alphabet, d}, 0.5f, seed);
    }

    const float res_scale = inv_d / std::sqrt(2.0f * cfg_.depth);
    for (int l = 0; l < cfg_.depth; ++l) {
        const std::string p = "blk" + std::to_string(l) + "/";
        add_const_param(p + "ln1/g", {d}, 1.0f);
        add_const_param(p + "ln1/b", {d}, 0.0f);
        add_param(p + "wq", {d, d}, inv_d, seed);
        add_const_param(p + "bq", {d}, 0.0f);
        add_param(p + "wk", {d, d}, inv_d, seed);
        add_const_param(p + "bk", {d}, 0.0f);
        add_param(p + "wv", {d, d}, inv_d, seed);
        add_const_param(p + "bv", {d}, 0.0f);
        add_param(p + "wo", {d, d}, res_scale, seed);
        add_const_param(p + "bo", {d}, 0.0f);
        add_const_param(p + "ln2/g", {d}, 1.0f);
        add_const_param(p + "ln2/b", {d}, 0.0f);
        add_param(p + "mlp/w1", {d, 2 * d}, inv_d, seed);
        add_const_param(p + "mlp/b1", {2 * d}, 0.0f);
        add_param(p + "mlp/w2", {2 * d, d}, res_scale * 0.7071f, seed);
        add_const_param(p + "mlp/b2", {d}, 0.0f);
    }
    if (cfg_.variant == ArchVariant::PixelConcat) {
        const int p2 = cfg_.patch * cfg_.patch;
        add_param("split/w", {d, 3 * d}, inv_d, seed);
        add_const_param("split/b", {3 * d}, 0.0f);
        const int dims[3] = {3 * p2, 1 * p2, cfg_.mask_channels * p2};
        const char* names[3] = {"dec/rgb", "dec/depth", "dec/mask"};
        for (int m = 0; m < 3; ++m) {
            add_param(std::string(names[m]) + "/w", {d, dims[m]}, inv_d, seed);
            add_const_param(std::string(names[m]) + "/b", {dims[m]}, 0.0f);
        }
    } else {
        const int out_dim = cfg_.latent_dim * cfg_.latent_patch * cfg_.latent_patch;
        add_param("head/rgb/w", {d, out_dim}, inv_d, seed);
        add_const_param("head/rgb/b", {out_dim}, 0.0f);
        if (!cfg_.rgb_only) {
            const int conv_in = 4 * cfg_.latent_dim * 27;
            add_param("aux/conv/w", {conv_in, cfg_.aux_conv_channels},
                      1.0f / std::sqrt(static_cast<float>(conv_in)), seed);
            add_const_param("aux/conv/b", {cfg_.aux_conv_channels}, 0.0f);
            const int cat_dim =
                cfg_.aux_conv_channels * cfg_.latent_patch * cfg_.latent_patch + d;
            add_param("aux/out/depth/w", {cat_dim, out_dim},
                      1.0f / std::sqrt(static_cast<float>(cat_dim)), seed);
            add_const_param("aux/out/depth/b", {out_dim}, 0.0f);
            add_param("aux/out/mask/w", {cat_dim, out_dim},
                      1.0f / std::sqrt(static_cast<float>(cat_dim)), seed);
            add_const_param("aux/out/mask/b", {out_dim}, 0.0f);
        }
    }
}

Tensor Backbone::param(std::string_view name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) return t;
    }
    fail("unknown parameter '" + std::string(name) + "'");
}

void Backbone::load_parameters(const NamedParams& source) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [n, t] : source) by_name.emplace(n, &t);
    for (auto& [n, t] : params_) {
        auto it = by_name.find(n);
        if (it == by_name.end()) fail("checkpoint is missing parameter '" + n + "'");
        if (it->second->shape() != t.shape()) {
            fail("parameter '" + n + "' has shape " + shape_str(it->second->shape()) +
                 ", expected " + shape_str(t.shape()));
        }
        auto src = it->second->values();
        auto& dst = t.mutable_values();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

Backbone Backbone::extend_from_rgb(const Backbone& rgb_model, std::uint64_t seed) {
    const auto& src_cfg = rgb_model.config();
    if (src_cfg.variant != ArchVariant::LatentSum || !src_cfg.rgb_only) {
        fail("extend_from_rgb needs a latent-sum rgb_only source model");
    }
    BackboneConfig cfg = src_cfg;
    cfg.rgb_only = false;
    Backbone ext(cfg, seed);

    std::unordered_map<std::string, const Tensor*> src;
    for (const auto& [n, t] : rgb_model.parameters()) src.emplace(n, &t);

    auto copy_from = [&](const std::string& dst_name, const std::string& src_name) {
        auto it = src.find(src_name);
        if (it == src.end()) fail("source model lacks parameter '" + src_name + "'");
        Tensor dst = ext.param(dst_name);
        if (it->second->shape() != dst.shape()) {
            fail("parameter '" + src_name + "' shape mismatch during extension");
        }
        auto sv = it->second->values();
        std::copy(sv.begin(), sv.end(), dst.mutable_values().begin());
    };

    for (const auto& [n, t] : rgb_model.parameters()) copy_from(n, n);
    // depth/mask embedders start as duplicates of the RGB projection,
    // silenced by zero gates; aux output projections start at zero so the
    // new modalities emit exactly zero velocity at initialization.
    copy_from("in/depth/w", "in/rgb/w");
    copy_from("in/depth/b", "in/rgb/b");
    copy_from("in/mask/w", "in/rgb/w");
    copy_from("in/mask/b", "in/rgb/b");
    for (const char* name : {"gate/depth", "gate/mask", "aux/out/depth/w", "aux/out/depth/b",
                             "aux/out/mask/w", "aux/out/mask/b"}) {
        Tensor t = ext.param(name);
        auto& v = t.mutable_values();
        std::fill(v.begin(), v.end(), 0.0f);
    }
    return ext;
}

Tensor Backbone::encode(const Tensor& x) const {
    const std::int64_t f = x.dim(0);
    const std::int64_t n = cfg_.tokens_per_frame();
    const int d = cfg_.embed_dim;

    if (cfg_.variant == ArchVariant::PixelConcat) {
        if (x.dim(1) != cfg_.pixel_channels() || x.dim(2) != cfg_.height ||
            x.dim(3) != cfg_.width) {
            fail("encode input " + shape_str(x.shape()) + " does not match configured [F," +
                 std::to_string(cfg_.pixel_channels()) + "," + std::to_string(cfg_.height) + "," +
                 std::to_string(cfg_.width) + "]");
        }
        auto embed = [&](const char* name, int c0, int c1) {
            Tensor p = im2patches(x, cfg_.patch, c0, c1);
            Tensor flat = reshape(p, {f * n, p.dim(2)});
            return add(matmul(flat, param(std::string(name) + "/w")),
                       param(std::string(name) + "/b"));
        };
        Tensor e_rgb = embed("enc/rgb", 0, 3);
        Tensor e_depth = embed("enc/depth", 3, 4);
        Tensor e_mask = embed("enc/mask", 4, 4 + cfg_.mask_channels);
        Tensor cat_parts[] = {e_rgb, e_depth, e_mask};
        Tensor fused = add(matmul(concat(cat_parts, 1), param("fuse/w")), param("fuse/b"));
        return reshape(fused, {f, n, d});
    }

    if (x.dim(1) != cfg_.state_channels() || x.dim(2) != cfg_.latent_height() ||
        x.dim(3) != cfg_.latent_width()) {
        fail("encode input " + shape_str(x.shape()) + " does not match latent state [F," +
             std::to_string(cfg_.state_channels()) + "," + std::to_string(cfg_.latent_height()) +
             "," + std::to_string(cfg_.latent_width()) + "]");
    }
    const int ld = cfg_.latent_dim;
    auto embed = [&](const char* name, int c0, int c1) {
        Tensor p = im2patches(x, cfg_.latent_patch, c0, c1);
        Tensor flat = reshape(p, {f * n, p.dim(2)});
        return add(matmul(flat, param(std::string(name) + "/w")),
                   param(std::string(name) + "/b"));
    };
    Tensor tok = embed("in/rgb", 0, ld);
    if (!cfg_.rgb_only) {
        Tensor tok_d = mul(embed("in/depth", ld, 2 * ld), param("gate/depth"));
        Tensor tok_m = mul(embed("in/mask", 2 * ld, 3 * ld), param("gate/mask"));
        tok = add(add(tok, tok_d), tok_m);
    }
    return reshape(tok, {f, n, d});
}

std::pair<Tensor, Tensor> Backbone::trunk(const Tensor& tokens, int batch,
                                          const std::vector<float>& t_vec,
                                          std::span<const ControlSignal> controls) const {
    const std::int64_t f = tokens.dim(0);
    const std::int64_t n = tokens.dim(1);
    const int d = cfg_.embed_dim;
    if (batch < 1 || f % batch != 0) fail("frame count not divisible by batch");
    if (static_cast<std::int64_t>(t_vec.size()) != f) {
        fail("trunk got " + std::to_string(t_vec.size()) + " timesteps for " + std::to_string(f) +
             " frames");
    }
    if (static_cast<std::int64_t>(controls.size()) != f) {
        fail("trunk got " + std::to_string(controls.size()) + " controls for " +
             std::to_string(f) + " frames");
    }
    const std::int64_t t_frames = f / batch;
    const std::int64_t s = t_frames * n;

    Tensor temb = add(
        matmul(relu(add(matmul(sinusoidal_features(t_vec), param("t/w1")), param("t/b1"))),
               param("t/w2")),
        param("t/b2"));

    Tensor cemb;
    if (cfg_.conditioning == ConditioningKind::Pose) {
        std::vector<float> pose(static_cast<std::size_t>(f) * 6);
        for (std::int64_t i = 0; i < f; ++i) {
            const auto& c = controls[static_cast<std::size_t>(i)];
            if (c.kind != ControlKind::CameraPose) {
                fail("model is pose-conditioned but control " + std::to_string(i) +
                     " is an action");
            }
            for (int j = 0; j < 6; ++j) pose[static_cast<std::size_t>(i * 6 + j)] = c.pose[static_cast<std::size_t>(j)];
        }
        Tensor pt = Tensor::from_data({f, 6}, std::move(pose));
        cemb = add(matmul(relu(add(matmul(pt, param("cond/w1")), param("cond/b1"))),
                          param("cond/w2")),
                   param("cond/b2"));
    } else {
        std::vector<std::int64_t> idx(static_cast<std::size_t>(f));
        for (std::int64_t i = 0; i < f; ++i) {
            const auto& c = controls[static_cast<std::size_t>(i)];
            if (c.kind != ControlKind::DiscreteAction) {
                fail("model is action-conditioned but control " + std::to_string(i) +
                     " is a pose");
            }
            if (c.action < 0 || c.action >= cfg_.action_alphabet) {
                fail("action " + std::to_string(c.action) + " outside the alphabet");
            }
            idx[static_cast<std::size_t>(i)] = c.action;
        }
        cemb = gather_rows(param("cond/table"), idx);
    }

    Tensor frame_emb = reshape(add(temb, cemb), {f, 1, d});
    Tensor x3 = reshape(add(tokens, frame_emb), {batch, s, d});

    const float attn_scale = 1.0f / std::sqrt(static_cast<float>(d));
    Tensor tap;
    for (int l = 0; l < cfg_.depth; ++l) {
        const std::string p = "blk" + std::to_string(l) + "/";
        Tensor h = layer_norm(x3, param(p + "ln1/g"), param(p + "ln1/b"));
        Tensor q = linear3(h, param(p + "wq"), param(p + "bq"));
        Tensor k = linear3(h, param(p + "wk"), param(p + "bk"));
        Tensor v = linear3(h, param(p + "wv"), param(p + "bv"));
        Tensor scores = mul(matmul(q, transpose(k)), attn_scale);
        Tensor attn = softmax_last(scores);
        Tensor mixed = linear3(matmul(attn, v), param(p + "wo"), param(p + "bo"));
        x3 = add(x3, mixed);
        Tensor h2 = layer_norm(x3, param(p + "ln2/g"), param(p + "ln2/b"));
        Tensor m1 = relu(linear3(h2, param(p + "mlp/w1"), param(p + "mlp/b1")));
        x3 = add(x3, linear3(m1, param(p + "mlp/w2"), param(p + "mlp/b2")));
        if (l + 1 == cfg_.tap_layer) tap = reshape(x3, {f, n, d});
    }
    return {reshape(x3, {f, n, d}), tap};
}

std::vector<Tensor> Backbone::decode(const Tensor& v_tokens) const {
    const std::int64_t f = v_tokens.dim(0);
    const std::int64_t n = v_tokens.dim(1);
    if (n != cfg_.tokens_per_frame()) {
        fail("decode token count " + std::to_string(n) + " does not match the spatial grid " +
             std::to_string(cfg_.tokens_per_frame()));
    }
    const int d = cfg_.embed_dim;
    Tensor flat = reshape(v_tokens, {f * n, d});

    if (cfg_.variant == ArchVariant::PixelConcat) {
        Tensor mixed = add(matmul(flat, param("split/w")), param("split/b"));
        std::int64_t sizes[] = {d, d, d};
        auto parts = split(mixed, 1, sizes);
        const char* names[3] = {"dec/rgb", "dec/depth", "dec/mask"};
        const int chans[3] = {3, 1, cfg_.mask_channels};
        std::vector<Tensor> fields;
        for (int m = 0; m < 3; ++m) {
            Tensor tok = add(matmul(parts[static_cast<std::size_t>(m)],
                                    param(std::string(names[m]) + "/w")),
                             param(std::string(names[m]) + "/b"));
            fields.push_back(patches2im(reshape(tok, {f, n, tok.dim(1)}), cfg_.patch, chans[m],
                                        cfg_.height, cfg_.width));
        }
        return fields;
    }

    Tensor tok = add(matmul(flat, param("head/rgb/w")), param("head/rgb/b"));
    Tensor v_rgb = patches2im(reshape(tok, {f, n, tok.dim(1)}), cfg_.latent_patch,
                              cfg_.latent_dim, cfg_.latent_height(), cfg_.latent_width());
    return {v_rgb};
}

std::pair<Tensor, Tensor> Backbone::aux_branch(const Tensor& noisy_latents, const Tensor& v_rgb,
                                               const Tensor& hidden, int batch,
                                               const std::vector<float>& t_vec) const {
    if (cfg_.variant != ArchVariant::LatentSum || cfg_.rgb_only) {
        fail("aux_branch exists only on the full latent-sum variant");
    }
    const std::int64_t f = noisy_latents.dim(0);
    const std::int64_t n = cfg_.tokens_per_frame();
    const int ld = cfg_.latent_dim;
    const std::int64_t t_frames = f / batch;

    std::int64_t mod_sizes[] = {ld, 2 * ld};
    Tensor z_rgb = split(noisy_latents, 1, mod_sizes)[0];

    std::vector<float> omt(static_cast<std::size_t>(f));
    for (std::int64_t i = 0; i < f; ++i) omt[static_cast<std::size_t>(i)] = 1.0f - t_vec[static_cast<std::size_t>(i)];
    Tensor omt_t = Tensor::from_data({f, 1, 1, 1}, std::move(omt));
    Tensor denoised = add(z_rgb, mul(v_rgb, omt_t));

    Tensor cat_in_parts[] = {noisy_latents, denoised};
    Tensor cat = concat(cat_in_parts, 1);  // [F, 4*ld, hl, wl]

    // clip-local 3x3x3 mixing; batch boundaries never blend
    std::vector<std::int64_t> clip_sizes(static_cast<std::size_t>(batch), t_frames);
    auto clips = split(cat, 0, clip_sizes);
    std::vector<Tensor> cols;
    for (auto& c : clips) cols.push_back(vol2col3(c));
    Tensor col = cols.size() == 1 ? cols[0] : concat(cols, 0);  // [F*hl*wl, 4*ld*27]
    Tensor conv = relu(add(matmul(col, param("aux/conv/w")), param("aux/conv/b")));
    const std::int64_t hl = cfg_.latent_height(), wl = cfg_.latent_width();
    Tensor grid = reshape(conv, {f, hl, wl, cfg_.aux_conv_channels});
    int to_chw[] = {0, 3, 1, 2};
    Tensor conv_img = permute(grid, to_chw);  // [F, conv_ch, hl, wl]
    Tensor conv_tok = im2patches(conv_img, cfg_.latent_patch, 0, cfg_.aux_conv_channels);

    Tensor cat2_parts[] = {conv_tok, hidden};
    Tensor cat2 = concat(cat2_parts, 2);  // [F, N, conv_ch*lp^2 + d]
    Tensor flat = reshape(cat2, {f * n, cat2.dim(2)});

    auto head = [&](const char* name) {
        Tensor tok = add(matmul(flat, param(std::string(name) + "/w")),
                         param(std::string(name) + "/b"));
        return patches2im(reshape(tok, {f, n, tok.dim(1)}), cfg_.latent_patch, ld,
                          cfg_.latent_height(), cfg_.latent_width());
    };
    return {head("aux/out/depth"), head("aux/out/mask")};
}

ForwardResult Backbone::forward(const Tensor& x, int batch, const std::vector<float>& t_vec,
                                std::span<const ControlSignal> controls) const {
    Tensor tokens = encode(x);
    auto [hidden, tap] = trunk(tokens, batch, t_vec, controls);
    auto fields = decode(hidden);

    ForwardResult r;
    r.hidden_tap = tap;
    if (cfg_.variant == ArchVariant::PixelConcat) {
        r.velocity = concat(fields, 1);
    } else if (cfg_.rgb_only) {
        r.velocity = fields[0];
    } else {
        auto [v_d, v_m] = aux_branch(x, fields[0], hidden, batch, t_vec);
        Tensor parts[] = {fields[0], v_d, v_m};
        r.velocity = concat(parts, 1);
    }
    return r;
}

}  // namespace m2repa
