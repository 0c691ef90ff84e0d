#include <cmath>
#include <vector>

#include "core/align.h"
#include "core/experts.h"
#include "core/rng.h"
#include "core/synthworld.h"
#include "doctest.h"
#include "test_util.h"

using namespace m2repa;
using namespace m2repa::test;

namespace {

// Brute-force HSIC ratio oracle in double: Gram matrices, explicit H
// centering, tr(K~ L~) / sqrt(tr(K~ K~) tr(L~ L~)).
double cka_gram_oracle(const Tensor& x, const Tensor& y) {
    const std::int64_t n = x.dim(0);
    auto gram = [n](const Tensor& t) {
        const std::int64_t p = t.dim(1);
        std::vector<double> g(static_cast<std::size_t>(n * n), 0.0);
        const float* d = t.values().data();
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::int64_t c = 0; c < p; ++c) {
                    acc += static_cast<double>(d[i * p + c]) * d[j * p + c];
                }
                g[static_cast<std::size_t>(i * n + j)] = acc;
            }
        }
        return g;
    };
    auto center = [n](std::vector<double> g) {
        // H G H with H = I - 11^T/n
        std::vector<double> row(static_cast<std::size_t>(n), 0.0);
        std::vector<double> col(static_cast<std::size_t>(n), 0.0);
        double total = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                const double v = g[static_cast<std::size_t>(i * n + j)];
                row[static_cast<std::size_t>(i)] += v;
                col[static_cast<std::size_t>(j)] += v;
                total += v;
            }
        }
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                g[static_cast<std::size_t>(i * n + j)] +=
                    -row[static_cast<std::size_t>(i)] / n - col[static_cast<std::size_t>(j)] / n +
                    total / (static_cast<double>(n) * n);
            }
        }
        return g;
    };
    auto k = center(gram(x));
    auto l = center(gram(y));
    double kl = 0.0, kk = 0.0, ll = 0.0;
    for (std::int64_t i = 0; i < n * n; ++i) {
        kl += k[static_cast<std::size_t>(i)] * l[static_cast<std::size_t>(i)];
        kk += k[static_cast<std::size_t>(i)] * k[static_cast<std::size_t>(i)];
        ll += l[static_cast<std::size_t>(i)] * l[static_cast<std::size_t>(i)];
    }
    return kl / std::sqrt(kk * ll);
}

// Columns of an orthonormal basis via Gram-Schmidt in double. When
// `lead_with_ones` is set, the first basis vector is the constant vector so
// every returned column has zero mean.
std::vector<std::vector<double>> orthonormal_columns(std::int64_t n, int count,
                                                     std::uint64_t seed, bool lead_with_ones) {
    Rng rng(seed);
    std::vector<std::vector<double>> basis;
    int wanted = count + (lead_with_ones ? 1 : 0);
    while (static_cast<int>(basis.size()) < wanted) {
        std::vector<double> v(static_cast<std::size_t>(n));
        if (basis.empty() && lead_with_ones) {
            for (auto& x : v) x = 1.0;
        } else {
            for (auto& x : v) x = rng.normal();
        }
        for (const auto& b : basis) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < n; ++i) dot += v[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(i)];
            for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] -= dot * b[static_cast<std::size_t>(i)];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;
        for (auto& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    if (lead_with_ones) basis.erase(basis.begin());
    return basis;
}

Tensor matrix_from_columns(std::int64_t n, const std::vector<std::vector<double>>& cols) {
    std::vector<float> data(static_cast<std::size_t>(n) * cols.size());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < cols.size(); ++c) {
            data[static_cast<std::size_t>(i) * cols.size() + c] =
                static_cast<float>(cols[c][static_cast<std::size_t>(i)]);
        }
    }
    return Tensor::from_data({n, static_cast<std::int64_t>(cols.size())}, std::move(data));
}

Tensor orthogonal_matrix(std::int64_t p, std::uint64_t seed) {
    return matrix_from_columns(p, orthonormal_columns(p, static_cast<int>(p), seed, false));
}

}  // namespace

TEST_CASE("m2repa loss anchors") {
    Tensor f = random_tensor({2, 4, 6}, 1, 0.2f, 1.0f);
    Tensor fs[] = {f};
    Tensor ts[] = {f};
    CHECK(m2repa_loss(fs, ts).scalar_value() == doctest::Approx(-1.0f).epsilon(1e-6));

    // per-token orthogonal pairs
    std::vector<float> a(2 * 4 * 4, 0.0f), b(2 * 4 * 4, 0.0f);
    for (int row = 0; row < 8; ++row) {
        a[static_cast<std::size_t>(row * 4)] = 1.0f;      // e0
        b[static_cast<std::size_t>(row * 4 + 1)] = 1.0f;  // e1
    }
    Tensor ta = Tensor::from_data({2, 4, 4}, std::move(a));
    Tensor tb = Tensor::from_data({2, 4, 4}, std::move(b));
    Tensor ps[] = {ta};
    Tensor qs[] = {tb};
    CHECK(m2repa_loss(ps, qs).scalar_value() == doctest::Approx(0.0f));

    // K=2: one modality at cos=1, the other at cos=0 -> -0.5
    Tensor p2[] = {f, ta};
    Tensor t2[] = {f, tb};
    CHECK(m2repa_loss(p2, t2).scalar_value() == doctest::Approx(-0.5f).epsilon(1e-6));
}

TEST_CASE("m2repa loss equals the K-average of per-expert cosines") {
    std::vector<Tensor> proj, targ;
    for (int k = 0; k < 3; ++k) {
        proj.push_back(random_normal_tensor({2, 5, 7}, 100 + static_cast<unsigned>(k)));
        targ.push_back(random_normal_tensor({2, 5, 7}, 200 + static_cast<unsigned>(k)));
    }
    float loss = m2repa_loss(proj, targ).scalar_value();

    // independent recomputation in double
    double acc = 0.0;
    for (int k = 0; k < 3; ++k) {
        const float* p = proj[static_cast<std::size_t>(k)].values().data();
        const float* t = targ[static_cast<std::size_t>(k)].values().data();
        double mean_cos = 0.0;
        for (int row = 0; row < 10; ++row) {
            double dot = 0.0, np = 0.0, nt = 0.0;
            for (int c = 0; c < 7; ++c) {
                dot += static_cast<double>(p[row * 7 + c]) * t[row * 7 + c];
                np += static_cast<double>(p[row * 7 + c]) * p[row * 7 + c];
                nt += static_cast<double>(t[row * 7 + c]) * t[row * 7 + c];
            }
            if (np >= 1e-16 && nt >= 1e-16) mean_cos += dot / std::sqrt(np * nt);
        }
        acc += mean_cos / 10.0;
    }
    CHECK(loss == doctest::Approx(-acc / 3.0).epsilon(1e-5));
}

TEST_CASE("m2repa targets are detached and gradients reach projections") {
    Tensor proj = random_normal_tensor({1, 4, 6}, 7);
    Tensor targ = random_normal_tensor({1, 4, 6}, 8);
    proj.set_requires_grad(true);
    targ.set_requires_grad(true);
    GradTape tape;
    Tensor ps[] = {proj};
    Tensor ts[] = {targ};
    Tensor loss = m2repa_loss(ps, ts);
    Tensor want_grad[] = {proj};
    auto grads = tape.grad(loss, want_grad);
    double norm = 0.0;
    for (float g : grads[0].values()) norm += std::abs(g);
    CHECK(norm > 0.0);

    GradTape tape2;
    Tensor loss2 = m2repa_loss(ps, ts);
    Tensor want_target[] = {targ};
    CHECK_THROWS_WITH_AS(tape2.grad(loss2, want_target), doctest::Contains("not on the tape"),
                         std::runtime_error);
}

TEST_CASE("linear CKA identities and invariances") {
    Tensor x = random_normal_tensor({8, 4}, 11);
    Tensor y = random_normal_tensor({8, 5}, 12);

    CHECK(linear_cka(x, x).scalar_value() == doctest::Approx(1.0f).epsilon(1e-6));
    CHECK(linear_cka(x, y).scalar_value() ==
          doctest::Approx(linear_cka(y, x).scalar_value()).epsilon(1e-6));

    const double base = linear_cka(x, y).scalar_value();
    CHECK(base == doctest::Approx(cka_gram_oracle(x, y)).epsilon(1e-5));

    Tensor q = orthogonal_matrix(4, 13);
    CHECK(linear_cka(matmul(x, q), y).scalar_value() == doctest::Approx(base).epsilon(1e-5));
    CHECK(linear_cka(matmul(x, q), x).scalar_value() == doctest::Approx(1.0).epsilon(1e-5));

    CHECK(linear_cka(mul(x, 3.7f), mul(y, 0.2f)).scalar_value() ==
          doctest::Approx(base).epsilon(1e-5));

    // permutation of the shared sample order
    std::vector<std::int64_t> perm = {5, 2, 7, 1, 0, 6, 3, 4};
    CHECK(linear_cka(gather_rows(x, perm), gather_rows(y, perm)).scalar_value() ==
          doctest::Approx(base).epsilon(1e-5));

    CHECK(linear_cka(Tensor::zeros({8, 4}), y).scalar_value() == 0.0f);
    CHECK_THROWS_AS(linear_cka(random_tensor({1, 4}, 14), random_tensor({1, 4}, 15)),
                    std::runtime_error);
}

TEST_CASE("decouple loss coefficient, bounds, and orthogonal-complement zero") {
    Tensor f = random_normal_tensor({3, 4, 6}, 21);
    Tensor same[] = {f, f.clone(), f.clone()};
    CHECK(decouple_loss(same).scalar_value() == doctest::Approx(1.0f).epsilon(1e-5));

    // coefficient: K=3 gives mean over the 3 pairs
    Tensor a = random_normal_tensor({3, 4, 6}, 22);
    Tensor b = random_normal_tensor({3, 4, 6}, 23);
    Tensor c = random_normal_tensor({3, 4, 6}, 24);
    Tensor abc[] = {a, b, c};
    auto flat = [](const Tensor& t) { return reshape(t, {12, 6}); };
    const double pair_sum = linear_cka(flat(a), flat(b)).scalar_value() +
                            linear_cka(flat(a), flat(c)).scalar_value() +
                            linear_cka(flat(b), flat(c)).scalar_value();
    CHECK(decouple_loss(abc).scalar_value() == doctest::Approx(pair_sum / 3.0).epsilon(1e-6));

    // K=2 with mutually orthogonal centered column spaces
    auto cols = orthonormal_columns(12, 7, 31, true);
    std::vector<std::vector<double>> cx(cols.begin(), cols.begin() + 3);
    std::vector<std::vector<double>> cy(cols.begin() + 3, cols.begin() + 7);
    Tensor ox = reshape(matrix_from_columns(12, cx), {3, 4, 3});
    Tensor oy = reshape(matrix_from_columns(12, cy), {3, 4, 4});
    Tensor pair[] = {ox, oy};
    CHECK(decouple_loss(pair).scalar_value() == doctest::Approx(0.0).epsilon(1e-9));

    Tensor solo[] = {f};
    CHECK_THROWS_AS(decouple_loss(solo), std::runtime_error);
}

TEST_CASE("decouple loss subsampling is deterministic and stays in bounds") {
    Tensor a = random_normal_tensor({8, 16, 5}, 41);
    Tensor b = random_normal_tensor({8, 16, 5}, 42);
    Tensor c = random_normal_tensor({8, 16, 5}, 43);
    Tensor fs[] = {a, b, c};
    float v1 = decouple_loss(fs, 64, 9).scalar_value();
    float v2 = decouple_loss(fs, 64, 9).scalar_value();
    CHECK(v1 == v2);
    CHECK(v1 >= 0.0f);
    CHECK(v1 <= 1.0f + 1e-6f);
    // different subsample seed gives a (generally) different estimate
    float v3 = decouple_loss(fs, 64, 10).scalar_value();
    CHECK(v3 >= 0.0f);
}

TEST_CASE("cos2 decouple variant") {
    Tensor f = random_normal_tensor({2, 4, 6}, 51);
    Tensor same[] = {f, f.clone(), f.clone()};
    CHECK(cos2_decouple_loss(same).scalar_value() == doctest::Approx(1.0f).epsilon(1e-6));

    // orthogonal features
    std::vector<float> a(8 * 6, 0.0f), b(8 * 6, 0.0f), c(8 * 6, 0.0f);
    for (int row = 0; row < 8; ++row) {
        a[static_cast<std::size_t>(row * 6 + 0)] = 1.0f;
        b[static_cast<std::size_t>(row * 6 + 1)] = 1.0f;
        c[static_cast<std::size_t>(row * 6 + 2)] = 1.0f;
    }
    Tensor oa = Tensor::from_data({2, 4, 6}, std::move(a));
    Tensor ob = Tensor::from_data({2, 4, 6}, std::move(b));
    Tensor oc = Tensor::from_data({2, 4, 6}, std::move(c));
    Tensor ortho[] = {oa, ob, oc};
    CHECK(cos2_decouple_loss(ortho).scalar_value() == doctest::Approx(0.0f));

    // sign flip leaves cos^2 unchanged
    Tensor flipped[] = {mul(f, -1.0f), f.clone(), f.clone()};
    CHECK(cos2_decouple_loss(flipped).scalar_value() ==
          doctest::Approx(cos2_decouple_loss(same).scalar_value()).epsilon(1e-6));

    // unequal widths go through mean pooling
    Tensor wide = random_normal_tensor({2, 4, 12}, 52);
    Tensor mixed[] = {wide, f.clone(), f.clone()};
    CHECK(std::isfinite(cos2_decouple_loss(mixed).scalar_value()));

    Tensor two[] = {f, f.clone()};
    CHECK_THROWS_WITH_AS(cos2_decouple_loss(two), doctest::Contains("K == 3"),
                         std::runtime_error);
}

TEST_CASE("total loss composition") {
    Tensor fm = Tensor::scalar(1.0f);
    Tensor align = Tensor::scalar(-1.0f);
    Tensor dec = Tensor::scalar(0.3f);
    Tensor total = total_loss(fm, align, dec, 0.5f, 0.05f);
    CHECK(total.scalar_value() == doctest::Approx(0.515f).epsilon(1e-6));

    Tensor baseline = total_loss(fm, align, dec, 0.0f, 0.0f);
    CHECK(baseline.scalar_value() == 1.0f);

    CHECK_THROWS_AS(total_loss(fm, align, dec, -0.1f, 0.0f), std::runtime_error);

    auto b = make_breakdown(fm, align, dec, total, 0.5f, 0.05f);
    CHECK(std::abs(b.total - (b.fm + 0.5f * b.align + 0.05f * b.decouple)) < 1e-6f);
}

TEST_CASE("projector bank shape contract and gradients") {
    ProjectorBank bank(8, {6, 6, 6}, 3, 77);
    CHECK(bank.count() == 3);

    Tensor h = random_normal_tensor({2, 4, 8}, 61);
    auto projected = bank.project(h);
    REQUIRE(projected.size() == 3);
    for (const auto& p : projected) CHECK(p.shape() == Shape{2, 4, 6});

    // zero-weight projector maps to zero features
    ProjectorBank zero_bank(8, {6}, 1, 78);
    auto params = zero_bank.parameters();
    for (auto& [name, t] : params) {
        auto& v = t.mutable_values();
        std::fill(v.begin(), v.end(), 0.0f);
    }
    auto zp = zero_bank.project(h);
    for (float v : zp[0].values()) CHECK(v == 0.0f);

    // finite differences through the align loss on every projector parameter
    std::vector<Tensor> targets;
    for (int k = 0; k < 3; ++k) {
        targets.push_back(random_normal_tensor({2, 4, 6}, 300 + static_cast<unsigned>(k)));
    }
    auto loss_fn = [&]() {
        auto proj = bank.project(h);
        return m2repa_loss(proj, targets);
    };
    auto bank_params = bank.parameters();
    GradTape tape;
    Tensor loss = loss_fn();
    std::vector<Tensor> handles;
    for (auto& [name, t] : bank_params) handles.push_back(t);
    auto grads = tape.grad(loss, handles);
    for (std::size_t i = 0; i < handles.size(); ++i) {
        double err = finite_diff_check_param([&]() { return loss_fn().scalar_value_f64(); },
                                             handles[i], grads[i].values(), 1e-3f);
        INFO("projector param ", bank_params[i].first, " rel err ", err);
        CHECK(err < 1e-3);
    }
}

TEST_CASE("different-seed experts have pairwise CKA below 0.9") {
    SceneConfig cfg;
    SceneState s = generate_scene(71, cfg);
    Tensor frames = render_clip(s, 4).to_tensor();

    ExpertSpec ra;
    ra.seed = 1;
    ExpertSpec rb;
    rb.seed = 2;
    rb.modality = Modality::Depth;
    ExpertSpec rc;
    rc.seed = 3;
    rc.modality = Modality::Mask;
    Expert ea(ra, 3, 16, 16), eb(rb, 3, 16, 16), ec(rc, 3, 16, 16);

    auto flat = [](const Tensor& t) { return reshape(t, {t.dim(0) * t.dim(1), t.dim(2)}); };
    Tensor fa = flat(ea.extract(frames));
    Tensor fb = flat(eb.extract(frames));
    Tensor fc = flat(ec.extract(frames));
    CHECK(linear_cka(fa, fb).scalar_value() < 0.9f);
    CHECK(linear_cka(fa, fc).scalar_value() < 0.9f);
    CHECK(linear_cka(fb, fc).scalar_value() < 0.9f);
}
