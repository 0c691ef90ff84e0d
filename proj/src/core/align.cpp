#include "align.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "rng.h"

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("align: " + msg);
}

Tensor gaussian(Shape shape, Rng& rng, float scale) {
    std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = scale * rng.normal();
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor flatten_rows(const Tensor& t) {
    if (t.rank() == 2) return t;
    if (t.rank() == 3) return reshape(t, {t.dim(0) * t.dim(1), t.dim(2)});
    fail("expected [R,D] or [F,N,D] features, got " + shape_str(t.shape()));
}

// Constant [d_big, d_small] matrix that mean-pools column groups.
Tensor pooling_matrix(std::int64_t d_big, std::int64_t d_small) {
    std::vector<float> m(static_cast<std::size_t>(d_big * d_small), 0.0f);
    for (std::int64_t g = 0; g < d_small; ++g) {
        const std::int64_t lo = g * d_big / d_small;
        const std::int64_t hi = (g + 1) * d_big / d_small;
        for (std::int64_t c = lo; c < hi; ++c) {
            m[static_cast<std::size_t>(c * d_small + g)] = 1.0f / static_cast<float>(hi - lo);
        }
    }
    return Tensor::from_data({d_big, d_small}, std::move(m));
}

}  // namespace

// ---------------------------------------------------------------------------
// ProjectorBank
// ---------------------------------------------------------------------------

ProjectorBank::ProjectorBank(int trunk_dim, std::vector<int> expert_dims, int depth,
                             std::uint64_t seed)
    : trunk_dim_(trunk_dim) {
    if (expert_dims.empty()) fail("projector bank needs at least one expert dim");
    if (depth < 1) fail("projector depth must be >= 1");
    for (std::size_t k = 0; k < expert_dims.size(); ++k) {
        Rng rng(derive_seed(seed, "projector", k));
        Mlp mlp;
        for (int l = 0; l < depth; ++l) {
            const int in = trunk_dim;
            const int out = l == depth - 1 ? expert_dims[k] : trunk_dim;
            mlp.weights.push_back(
                gaussian({in, out}, rng, 1.0f / std::sqrt(static_cast<float>(in))));
            mlp.biases.push_back(Tensor::zeros({out}));
            mlp.weights.back().set_requires_grad(true);
            mlp.biases.back().set_requires_grad(true);
        }
        projectors_.push_back(std::move(mlp));
    }
}

int ProjectorBank::output_dim(int k) const {
    const auto& w = projectors_.at(static_cast<std::size_t>(k)).weights.back();
    return static_cast<int>(w.dim(1));
}

std::vector<Tensor> ProjectorBank::project(const Tensor& hidden) const {
    if (hidden.rank() != 3 || hidden.dim(2) != trunk_dim_) {
        fail("project expects [F, N, " + std::to_string(trunk_dim_) + "], got " +
             shape_str(hidden.shape()));
    }
    const std::int64_t f = hidden.dim(0), n = hidden.dim(1);
    Tensor rows = reshape(hidden, {f * n, trunk_dim_});
    std::vector<Tensor> out;
    for (const auto& mlp : projectors_) {
        Tensor x = rows;
        for (std::size_t l = 0; l < mlp.weights.size(); ++l) {
            x = add(matmul(x, mlp.weights[l]), mlp.biases[l]);
            if (l + 1 < mlp.weights.size()) x = relu(x);
        }
        out.push_back(reshape(x, {f, n, x.dim(1)}));
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> ProjectorBank::parameters() const {
    std::vector<std::pair<std::string, Tensor>> params;
    for (std::size_t k = 0; k < projectors_.size(); ++k) {
        for (std::size_t l = 0; l < projectors_[k].weights.size(); ++l) {
            params.emplace_back("proj/" + std::to_string(k) + "/w" + std::to_string(l),
                                projectors_[k].weights[l]);
            params.emplace_back("proj/" + std::to_string(k) + "/b" + std::to_string(l),
                                projectors_[k].biases[l]);
        }
    }
    return params;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tensor token_cosine_mean(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail("token cosine shape mismatch: " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
    Tensor u = l2_normalize(flatten_rows(a));
    Tensor v = l2_normalize(flatten_rows(b));
    return mean(sum_axis(mul(u, v), -1, false));
}

Tensor m2repa_loss(std::span<const Tensor> projected, std::span<const Tensor> targets) {
    if (projected.empty()) fail("m2repa_loss needs K >= 1 experts");
    if (projected.size() != targets.size()) {
        fail("m2repa_loss got " + std::to_string(projected.size()) + " projections for " +
             std::to_string(targets.size()) + " targets");
    }
    Tensor acc;
    for (std::size_t k = 0; k < projected.size(); ++k) {
        Tensor cos_k = token_cosine_mean(projected[k], detach(targets[k]));
        acc = k == 0 ? cos_k : add(acc, cos_k);
    }
    return mul(acc, -1.0f / static_cast<float>(projected.size()));
}

Tensor linear_cka(const Tensor& x, const Tensor& y) {
    if (x.rank() != 2 || y.rank() != 2) {
        fail("linear_cka expects [n,p] matrices, got " + shape_str(x.shape()) + " and " +
             shape_str(y.shape()));
    }
    if (x.dim(0) != y.dim(0)) {
        fail("linear_cka sample counts differ: " + shape_str(x.shape()) + " vs " +
             shape_str(y.shape()));
    }
    if (x.dim(0) < 2) fail("linear_cka needs n >= 2 samples");

    Tensor xc = sub(x, mean_axis(x, 0, true));
    Tensor yc = sub(y, mean_axis(y, 0, true));

    Tensor gx = matmul(transpose(xc), xc);  // [p1,p1]
    Tensor gy = matmul(transpose(yc), yc);  // [p2,p2]
    Tensor dx2 = sum(mul(gx, gx));
    Tensor dy2 = sum(mul(gy, gy));
    if (dx2.scalar_value_f64() < 1e-24 || dy2.scalar_value_f64() < 1e-24) {
        std::fprintf(stderr,
                     "align: linear_cka saw an all-zero centered matrix; returning 0\n");
        return Tensor::scalar(0.0f);
    }
    Tensor cross = matmul(transpose(yc), xc);  // [p2,p1]
    Tensor num = sum(mul(cross, cross));
    return div(num, mul(sqrt_op(dx2), sqrt_op(dy2)));
}

Tensor decouple_loss(std::span<const Tensor> projected, int max_rows,
                     std::uint64_t subsample_seed) {
    const int k = static_cast<int>(projected.size());
    if (k < 2) fail("decouple_loss needs K >= 2 feature sets");
    if (max_rows < 2) fail("decouple_loss row cap must be >= 2");

    std::vector<Tensor> rows;
    for (const auto& p : projected) rows.push_back(flatten_rows(p));
    const std::int64_t n = rows[0].dim(0);
    for (const auto& r : rows) {
        if (r.dim(0) != n) fail("decouple_loss feature sets disagree on sample count");
    }

    if (n > max_rows) {
        // shared subsample so row correspondence across experts survives
        Rng rng(derive_seed(subsample_seed, "cka-rows"));
        std::vector<std::int64_t> pool(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < max_rows; ++i) {
            const auto j = i + rng.uniform_int(n - i);
            std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
        }
        pool.resize(static_cast<std::size_t>(max_rows));
        for (auto& r : rows) r = gather_rows(r, pool);
    }

    Tensor acc = Tensor::scalar(0.0f);
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            acc = add(acc, linear_cka(rows[static_cast<std::size_t>(i)],
                                      rows[static_cast<std::size_t>(j)]));
        }
    }
    return mul(acc, 2.0f / (static_cast<float>(k) * static_cast<float>(k - 1)));
}

Tensor cos2_decouple_loss(std::span<const Tensor> projected) {
    if (projected.size() != 3) {
        fail("cos2_decouple_loss is defined for K == 3, got K = " +
             std::to_string(projected.size()));
    }
    std::vector<Tensor> rows;
    for (const auto& p : projected) rows.push_back(flatten_rows(p));
    const std::int64_t n = rows[0].dim(0);
    for (const auto& r : rows) {
        if (r.dim(0) != n) fail("cos2_decouple_loss feature sets disagree on sample count");
    }

    Tensor acc = Tensor::scalar(0.0f);
    for (int i = 0; i < 3; ++i) {
        for (int j = i + 1; j < 3; ++j) {
            Tensor a = rows[static_cast<std::size_t>(i)];
            Tensor b = rows[static_cast<std::size_t>(j)];
            if (a.dim(1) != b.dim(1)) {
                // pool the wider side down so tokens stay comparable
                if (a.dim(1) > b.dim(1)) {
                    a = matmul(a, pooling_matrix(a.dim(1), b.dim(1)));
                } else {
                    b = matmul(b, pooling_matrix(b.dim(1), a.dim(1)));
                }
            }
            Tensor cos = sum_axis(mul(l2_normalize(a), l2_normalize(b)), -1, false);
            acc = add(acc, mean(mul(cos, cos)));
        }
    }
    return mul(acc, 1.0f / 3.0f);
}

Tensor total_loss(const Tensor& fm, const Tensor& align, const Tensor& decouple,
                  float lambda_align, float lambda_decouple) {
    if (lambda_align < 0.0f || lambda_decouple < 0.0f) {
        fail("loss weights must be non-negative");
    }
    return add(fm, add(mul(align, lambda_align), mul(decouple, lambda_decouple)));
}

LossBreakdown make_breakdown(const Tensor& fm, const Tensor& align, const Tensor& decouple,
                             const Tensor& total, float lambda_align, float lambda_decouple) {
    LossBreakdown b;
    b.fm = fm.scalar_value();
    b.align = align.scalar_value();
    b.decouple = decouple.scalar_value();
    b.total = total.scalar_value();
    b.lambda_align = lambda_align;
    b.lambda_decouple = lambda_decouple;
    return b;
}

}  // namespace m2repa
