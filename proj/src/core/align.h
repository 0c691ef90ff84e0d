#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tensor.h"

namespace m2repa {

// One trainable decoupling MLP per expert, mapping shared trunk features
// (width trunk_dim) into that expert's feature space. depth = number of
// linear layers; hidden layers stay at trunk_dim with relu between layers.
class ProjectorBank {
public:
    ProjectorBank(int trunk_dim, std::vector<int> expert_dims, int depth, std::uint64_t seed);

    // [F, N, d] trunk features -> K projected token sets [F, N, D_k].
    std::vector<Tensor> project(const Tensor& hidden) const;

    int count() const { return static_cast<int>(projectors_.size()); }
    int output_dim(int k) const;

    // Named trainable parameters; handles share storage with the bank.
    std::vector<std::pair<std::string, Tensor>> parameters() const;

private:
    struct Mlp {
        std::vector<Tensor> weights;
        std::vector<Tensor> biases;
    };
    int trunk_dim_;
    std::vector<Mlp> projectors_;
};

// Per-token cosine between two [F, N, D] (or [R, D]) feature sets, averaged
// over everything: mean_rows (1/N) sum_n cos. Tokens with L2 norm < 1e-8
// contribute cosine 0.
Tensor token_cosine_mean(const Tensor& a, const Tensor& b);

// Multi-modal alignment loss: -(1/K) sum_k E[(1/N) sum_n cos(y*, h_proj)]
// with both sides L2-normalized per token. Targets are treated as constants;
// gradients reach only the projected features.
Tensor m2repa_loss(std::span<const Tensor> projected, std::span<const Tensor> targets);

// Linear CKA on column-centered features: |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F).
// Scalar in [0,1]; differentiable w.r.t. both arguments. An all-zero centered
// matrix yields 0 (logged) instead of dividing by zero.
Tensor linear_cka(const Tensor& x, const Tensor& y);

// Pairwise-CKA decoupling regularizer, coefficient 2/(K(K-1)) (the mean over
// unordered pairs). Token features are flattened to rows; at most max_rows
// shared rows are kept by seeded uniform subsampling.
Tensor decouple_loss(std::span<const Tensor> projected, int max_rows = 1024,
                     std::uint64_t subsample_seed = 0);

// Ablation variant: (1/3) sum_{i<j} mean_token cos^2. Requires K == 3; if
// feature widths differ, the wider side is mean-pooled down to the narrower.
Tensor cos2_decouple_loss(std::span<const Tensor> projected);

struct LossBreakdown {
    float fm = 0.0f;
    float align = 0.0f;
    float decouple = 0.0f;
    float total = 0.0f;
    float lambda_align = 0.0f;
    float lambda_decouple = 0.0f;
};

// total = fm + lambda_align * align + lambda_decouple * decouple, composed on
// the tape so one backward covers every term.
Tensor total_loss(const Tensor& fm, const Tensor& align, const Tensor& decouple,
                  float lambda_align, float lambda_decouple);

LossBreakdown make_breakdown(const Tensor& fm, const Tensor& align, const Tensor& decouple,
                             const Tensor& total, float lambda_align, float lambda_decouple);

}  // namespace m2repa
