#include "metrics.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace m2repa {

namespace {

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("metrics: " + msg);
}

constexpr double kPsnrCap = 99.0;
constexpr int kSsimWindow = 7;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        fail(std::string(what) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

// binarize at probability 0.5
std::vector<bool> binarize(std::span<const float> v) {
    std::vector<bool> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.5f;
    return out;
}

double mask_iou(const std::vector<bool>& a, const std::vector<bool>& b, std::size_t offset_a,
                std::size_t offset_b, std::size_t plane) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        const bool pa = a[offset_a + i];
        const bool pb = b[offset_b + i];
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

double psnr(const Tensor& pred, const Tensor& gt, double peak) {
    require_same_shape(pred, gt, "psnr");
    if (!(peak > 0.0)) fail("psnr peak must be positive");
    auto p = pred.values();
    auto g = gt.values();
    double mse = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = static_cast<double>(p[i]) - g[i];
        mse += d * d;
    }
    mse /= static_cast<double>(p.size());
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Tensor& pred, const Tensor& gt) {
    require_same_shape(pred, gt, "ssim");
    const int rank = pred.rank();
    if (rank != 2 && rank != 3) fail("ssim expects [H,W] or [C,H,W]");
    const std::int64_t c = rank == 3 ? pred.dim(0) : 1;
    const std::int64_t h = pred.dim(rank - 2), w = pred.dim(rank - 1);
    if (h < kSsimWindow || w < kSsimWindow) {
        fail("image " + std::to_string(h) + "x" + std::to_string(w) +
             " is smaller than the " + std::to_string(kSsimWindow) + "x" +
             std::to_string(kSsimWindow) + " SSIM window");
    }
    const double n = static_cast<double>(kSsimWindow) * kSsimWindow;
    const float* pp = pred.values().data();
    const float* pg = gt.values().data();

    double total = 0.0;
    std::int64_t windows = 0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* x = pp + ch * h * w;
        const float* y = pg + ch * h * w;
        for (std::int64_t wy = 0; wy + kSsimWindow <= h; ++wy) {
            for (std::int64_t wx = 0; wx + kSsimWindow <= w; ++wx) {
                double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
                for (int dy = 0; dy < kSsimWindow; ++dy) {
                    for (int dx = 0; dx < kSsimWindow; ++dx) {
                        const double vx = x[(wy + dy) * w + wx + dx];
                        const double vy = y[(wy + dy) * w + wx + dx];
                        sx += vx;
                        sy += vy;
                        sxx += vx * vx;
                        syy += vy * vy;
                        sxy += vx * vy;
                    }
                }
                const double mx = sx / n, my = sy / n;
                const double vx = sxx / n - mx * mx;
                const double vy = syy / n - my * my;
                const double cov = sxy / n - mx * my;
                total += ((2 * mx * my + kSsimC1) * (2 * cov + kSsimC2)) /
                         ((mx * mx + my * my + kSsimC1) * (vx + vy + kSsimC2));
                ++windows;
            }
        }
    }
    return total / static_cast<double>(windows);
}

ScaleShift align_scale_shift(const Tensor& pred, const Tensor& gt) {
    require_same_shape(pred, gt, "align_scale_shift");
    auto p = pred.values();
    auto g = gt.values();
    for (float v : g) {
        if (!(v > 1e-6f)) fail("align_scale_shift needs gt > 1e-6 on evaluated pixels");
    }
    const double n = static_cast<double>(p.size());
    double sp = 0, spp = 0, sg = 0, spg = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        spp += static_cast<double>(p[i]) * p[i];
        sg += g[i];
        spg += static_cast<double>(p[i]) * g[i];
    }
    const double det = spp * n - sp * sp;  // n * Var(pred) * n
    ScaleShift result;
    if (det <= 1e-12 * std::max(1.0, spp * n)) {
        result.a = 0.0;
        result.b = sg / n;
        result.degenerate = true;
        return result;
    }
    result.a = (spg * n - sp * sg) / det;
    result.b = (spp * sg - sp * spg) / det;
    return result;
}

DepthEvalResult depth_metrics(const Tensor& aligned_pred, const Tensor& gt) {
    require_same_shape(aligned_pred, gt, "depth_metrics");
    auto p = aligned_pred.values();
    auto g = gt.values();
    DepthEvalResult r;
    double abs_rel = 0.0;
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(g[i] > 0.0f)) fail("depth_metrics needs strictly positive ground truth");
        const double pi = p[i], gi = g[i];
        abs_rel += std::abs(pi - gi) / gi;
        if (pi > 0.0) {
            const double ratio = std::max(pi / gi, gi / pi);
            if (ratio < 1.25) ++hits;
        }
    }
    r.abs_rel = abs_rel / static_cast<double>(p.size());
    r.delta1 = static_cast<double>(hits) / static_cast<double>(p.size());
    return r;
}

DepthEvalResult eval_depth_video(const Tensor& pred, const Tensor& gt) {
    ScaleShift fit = align_scale_shift(pred, gt);
    std::vector<float> aligned(pred.values().begin(), pred.values().end());
    for (auto& v : aligned) v = static_cast<float>(fit.a * v + fit.b);
    DepthEvalResult r = depth_metrics(Tensor::from_data(pred.shape(), std::move(aligned)), gt);
    r.scale = fit.a;
    r.shift = fit.b;
    r.degenerate = fit.degenerate;
    return r;
}

FrameMaskResult greedy_miou_frame(const Tensor& pred_masks, const Tensor& gt_masks,
                                  double threshold) {
    if (pred_masks.rank() != 3 || gt_masks.rank() != 3) {
        fail("greedy_miou_frame expects [N,H,W] mask stacks");
    }
    if (pred_masks.dim(1) != gt_masks.dim(1) || pred_masks.dim(2) != gt_masks.dim(2)) {
        fail("greedy_miou_frame spatial shapes differ: " + shape_str(pred_masks.shape()) +
             " vs " + shape_str(gt_masks.shape()));
    }
    const std::size_t plane = static_cast<std::size_t>(pred_masks.dim(1) * pred_masks.dim(2));
    const int n_pred = static_cast<int>(pred_masks.dim(0));
    const int n_gt = static_cast<int>(gt_masks.dim(0));
    auto pb = binarize(pred_masks.values());
    auto gb = binarize(gt_masks.values());

    FrameMaskResult r;
    std::vector<bool> taken(static_cast<std::size_t>(n_pred), false);
    for (int j = 0; j < n_gt; ++j) {
        int best = -1;
        double best_iou = -1.0;
        for (int i = 0; i < n_pred; ++i) {
            if (taken[static_cast<std::size_t>(i)]) continue;
            const double iou = mask_iou(pb, gb, static_cast<std::size_t>(i) * plane,
                                        static_cast<std::size_t>(j) * plane, plane);
            if (iou > best_iou) {
                best_iou = iou;
                best = i;
            }
        }
        if (best >= 0 && best_iou > threshold) {
            taken[static_cast<std::size_t>(best)] = true;
            r.matches.push_back({best, j, best_iou});
            r.matched_total += best_iou;
        }
    }
    const auto k = static_cast<double>(r.matches.size());
    r.miou = k > 0 ? r.matched_total / k : 0.0;
    r.matched_fraction = n_gt > 0 ? k / static_cast<double>(n_gt) : 0.0;
    return r;
}

MaskEvalResult greedy_miou(std::span<const Tensor> pred_frames,
                           std::span<const Tensor> gt_frames, double threshold) {
    if (pred_frames.size() != gt_frames.size()) {
        fail("greedy_miou needs matching frame counts");
    }
    if (pred_frames.empty()) fail("greedy_miou on zero frames");
    MaskEvalResult r;
    double total = 0.0, frac = 0.0;
    for (std::size_t i = 0; i < pred_frames.size(); ++i) {
        FrameMaskResult fr = greedy_miou_frame(pred_frames[i], gt_frames[i], threshold);
        total += fr.miou;
        frac += fr.matched_fraction;
        r.frame_mious.push_back(fr.miou);
        r.frame_matched_fractions.push_back(fr.matched_fraction);
        r.frame_matches.push_back(std::move(fr.matches));
    }
    r.overall = total / static_cast<double>(pred_frames.size());
    r.matched_fraction = frac / static_cast<double>(pred_frames.size());
    return r;
}

double optimal_miou_oracle(const Tensor& pred_masks, const Tensor& gt_masks, double threshold) {
    const int n_pred = static_cast<int>(pred_masks.dim(0));
    const int n_gt = static_cast<int>(gt_masks.dim(0));
    if (n_pred > 6 || n_gt > 6) fail("optimal_miou_oracle only handles up to 6 masks per side");
    const std::size_t plane = static_cast<std::size_t>(pred_masks.dim(1) * pred_masks.dim(2));
    auto pb = binarize(pred_masks.values());
    auto gb = binarize(gt_masks.values());

    std::vector<std::vector<double>> iou(static_cast<std::size_t>(n_gt),
                                         std::vector<double>(static_cast<std::size_t>(n_pred)));
    for (int j = 0; j < n_gt; ++j) {
        for (int i = 0; i < n_pred; ++i) {
            iou[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] =
                mask_iou(pb, gb, static_cast<std::size_t>(i) * plane,
                         static_cast<std::size_t>(j) * plane, plane);
        }
    }

    double best_total = 0.0;
    std::vector<bool> used(static_cast<std::size_t>(n_pred), false);
    auto search = [&](auto&& self, int j, double total) -> void {
        if (j == n_gt) {
            best_total = std::max(best_total, total);
            return;
        }
        self(self, j + 1, total);  // leave this gt unmatched
        for (int i = 0; i < n_pred; ++i) {
            if (used[static_cast<std::size_t>(i)]) continue;
            const double v = iou[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
            if (v > threshold) {
                used[static_cast<std::size_t>(i)] = true;
                self(self, j + 1, total + v);
                used[static_cast<std::size_t>(i)] = false;
            }
        }
    };
    search(search, 0, 0.0);
    return n_gt > 0 ? best_total / static_cast<double>(n_gt) : 0.0;
}

ClipMetrics evaluate_clip(const TriModalClip& pred, const TriModalClip& gt, int context_count) {
    if (pred.t() != gt.t()) fail("evaluate_clip frame counts differ");
    if (context_count < 0 || context_count >= pred.t()) {
        fail("evaluate_clip context_count out of range");
    }
    const int t0 = context_count;
    const int frames = pred.t() - t0;

    ClipMetrics m;
    std::vector<Tensor> pred_masks, gt_masks;
    std::vector<float> pred_depth, gt_depth;
    for (int i = t0; i < pred.t(); ++i) {
        const auto& pf = pred.frames[static_cast<std::size_t>(i)];
        const auto& gf = gt.frames[static_cast<std::size_t>(i)];
        m.psnr += psnr(pf.rgb, gf.rgb, 1.0);
        m.ssim += ssim(pf.rgb, gf.rgb);
        pred_masks.push_back(pf.mask);
        gt_masks.push_back(gf.mask);
        auto pd = pf.depth.values();
        auto gd = gf.depth.values();
        pred_depth.insert(pred_depth.end(), pd.begin(), pd.end());
        gt_depth.insert(gt_depth.end(), gd.begin(), gd.end());
    }
    m.psnr /= frames;
    m.ssim /= frames;

    const auto n = static_cast<std::int64_t>(pred_depth.size());
    DepthEvalResult d = eval_depth_video(Tensor::from_data({n}, std::move(pred_depth)),
                                         Tensor::from_data({n}, std::move(gt_depth)));
    m.abs_rel = d.abs_rel;
    m.delta1 = d.delta1;

    MaskEvalResult mm = greedy_miou(pred_masks, gt_masks);
    m.miou = mm.overall;
    m.matched_fraction = mm.matched_fraction;
    return m;
}

}  // namespace m2repa
