#include "experts.h"

#include <cmath>
#include <stdexcept>

#include "checkpoint.h"
#include "rng.h"

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("experts: " + msg);
}

Tensor gaussian(Shape shape, Rng& rng, float scale) {
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v));
}

// Shared-matrix token mixing: Y[f] = M * X[f] for every frame, done as one
// matmul on a token-major reshape.
Tensor token_mix(const Tensor& x, const Tensor& m) {
    const std::int64_t f = x.dim(0), n = x.dim(1), d = x.dim(2);
    int to_token_major[] = {1, 0, 2};
    Tensor xt = reshape(permute(x, to_token_major), {n, f * d});
    Tensor mixed = reshape(matmul(m, xt), {n, f, d});
    int back[] = {1, 0, 2};
    return permute(mixed, back);
}

}  // namespace

const char* modality_name(Modality m) {
    switch (m) {
        case Modality::Rgb: return "rgb";
        case Modality::Depth: return "depth";
        case Modality::Mask: return "mask";
    }
    return "?";
}

Expert::Expert(const ExpertSpec& spec, int mask_channels, int image_h, int image_w)
    : spec_(spec), h_(image_h), w_(image_w), channels_(3 + 1 + mask_channels) {
    if (spec.feature_dim < 4) fail("expert feature dim must be >= 4");
    if (spec.depth < 1) fail("expert depth must be >= 1");
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spec.token_grid))));
    if (grid * grid != spec.token_grid) fail("token grid must be a square count");
    if (image_h % grid != 0 || image_w % grid != 0 || image_h / grid != image_w / grid) {
        fail("image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
             " does not tile into a " + std::to_string(grid) + "x" + std::to_string(grid) +
             " token grid");
    }
    patch_ = image_h / grid;

    switch (spec.modality) {
        case Modality::Rgb: c0_ = 0; c1_ = 3; break;
        case Modality::Depth: c0_ = 3; c1_ = 4; break;
        case Modality::Mask: c0_ = 4; c1_ = 4 + mask_channels; break;
    }

    Rng rng(derive_seed(spec.seed, "expert-init"));
    const int in_dim = (c1_ - c0_) * patch_ * patch_;
    const int d = spec.feature_dim;
    embed_w_ = gaussian({in_dim, d}, rng, 1.0f / std::sqrt(static_cast<float>(in_dim)));
    embed_b_ = gaussian({d}, rng, 0.1f);
    for (int l = 0; l < spec.depth; ++l) {
        Block b;
        b.mix = gaussian({spec.token_grid, spec.token_grid}, rng,
                         1.0f / std::sqrt(static_cast<float>(spec.token_grid)));
        b.w1 = gaussian({d, d}, rng, 1.0f / std::sqrt(static_cast<float>(d)));
        b.b1 = gaussian({d}, rng, 0.1f);
        b.w2 = gaussian({d, d}, rng, 1.0f / std::sqrt(static_cast<float>(d)));
        b.b2 = gaussian({d}, rng, 0.1f);
        blocks_.push_back(std::move(b));
    }
}

Tensor Expert::extract(const Tensor& clean_frames) const {
    if (clean_frames.rank() != 4) fail("extract expects [F, ch, H, W]");
    if (clean_frames.dim(1) != channels_ || clean_frames.dim(2) != h_ ||
        clean_frames.dim(3) != w_) {
        fail("clip shape " + shape_str(clean_frames.shape()) + " does not match expert grid [F," +
             std::to_string(channels_) + "," + std::to_string(h_) + "," + std::to_string(w_) +
             "]");
    }
    const std::int64_t f = clean_frames.dim(0);
    const std::int64_t n = spec_.token_grid;
    const std::int64_t d = spec_.feature_dim;

    // Targets are constants: never record expert math on a tape.
    Tensor patches = im2patches(detach(clean_frames), patch_, c0_, c1_);
    Tensor tokens = reshape(patches, {f * n, patches.dim(2)});
    Tensor x = add(matmul(tokens, embed_w_), embed_b_);
    x = reshape(x, {f, n, d});
    for (const auto& b : blocks_) {
        x = add(x, token_mix(x, b.mix));
        Tensor rows = reshape(x, {f * n, d});
        Tensor hidden = relu(add(matmul(rows, b.w1), b.b1));
        Tensor delta = add(matmul(hidden, b.w2), b.b2);
        x = add(x, reshape(delta, {f, n, d}));
    }
    return x;
}

Tensor Expert::extract(const TriModalClip& clip) const { return extract(clip.to_tensor()); }

std::uint32_t Expert::weight_checksum() const {
    std::vector<unsigned char> bytes;
    auto absorb = [&bytes](const Tensor& t) {
        auto v = t.values();
        const auto* p = reinterpret_cast<const unsigned char*>(v.data());
        bytes.insert(bytes.end(), p, p + v.size() * sizeof(float));
    };
    absorb(embed_w_);
    absorb(embed_b_);
    for (const auto& b : blocks_) {
        absorb(b.mix);
        absorb(b.w1);
        absorb(b.b1);
        absorb(b.w2);
        absorb(b.b2);
    }
    return crc32(bytes.data(), bytes.size());
}

Tensor ingest_features(const std::string& path, std::int64_t expected_n,
                       std::int64_t expected_dim) {
    TensorRecord rec = read_tensor_file(path);
    const Tensor& t = rec.tensor;
    if (t.rank() != 3) {
        fail("feature file '" + path + "' has rank " + std::to_string(t.rank()) +
             ", expected 3 extents [B*T, N, D]");
    }
    if (t.dim(1) != expected_n) {
        fail("feature file '" + path + "' has N=" + std::to_string(t.dim(1)) +
             " tokens, expected N=" + std::to_string(expected_n));
    }
    if (expected_dim >= 0 && t.dim(2) != expected_dim) {
        fail("feature file '" + path + "' has D=" + std::to_string(t.dim(2)) +
             ", expected D=" + std::to_string(expected_dim));
    }
    for (float v : t.values()) {
        if (!std::isfinite(v)) fail("feature file '" + path + "' contains non-finite values");
    }
    return t;
}

}  // namespace m2repa
