#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "synthworld.h"
#include "tensor.h"

namespace m2repa {

enum class Modality { Rgb, Depth, Mask };

const char* modality_name(Modality m);

struct ExpertSpec {
    Modality modality = Modality::Rgb;
    std::uint64_t seed = 0;
    int feature_dim = 24;  // D_k
    int token_grid = 16;   // N, must match the backbone token count
    int depth = 2;         // mixing blocks
};

// Frozen mock modality expert: a fixed-seed patch embedding followed by
// `depth` token-mixing blocks. Consumes only its own modality's channels of
// the clean clip; weights never receive gradients.
class Expert {
public:
    Expert(const ExpertSpec& spec, int mask_channels, int image_h, int image_w);

    // [F, 3+1+C, H, W] clean frames -> [F, N, D_k] feature tokens.
    Tensor extract(const Tensor& clean_frames) const;
    Tensor extract(const TriModalClip& clip) const;

    const ExpertSpec& spec() const { return spec_; }
    std::uint32_t weight_checksum() const;

private:
    ExpertSpec spec_;
    int c0_ = 0, c1_ = 3;  // channel slice of this modality
    int patch_ = 4;
    int h_ = 16, w_ = 16;
    int channels_ = 7;

    Tensor embed_w_, embed_b_;
    struct Block {
        Tensor mix;            // [N, N] token mixing
        Tensor w1, b1, w2, b2; // per-token MLP
    };
    std::vector<Block> blocks_;
};

// Precomputed feature ingestion: a single-record tensor file with a 3-extent
// header [B*T, N, D_k]. expected_dim < 0 accepts any feature width.
Tensor ingest_features(const std::string& path, std::int64_t expected_n,
                       std::int64_t expected_dim = -1);

}  // namespace m2repa
