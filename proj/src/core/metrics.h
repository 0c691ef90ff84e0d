#pragma once

#include <span>
#include <vector>

#include "synthworld.h"
#include "tensor.h"

namespace m2repa {

// 10*log10(peak^2 / MSE), capped at 99 dB (exact matches included).
double psnr(const Tensor& pred, const Tensor& gt, double peak);

// Mean local SSIM over valid 7x7 uniform windows at unit dynamic range,
// C1=(0.01)^2, C2=(0.03)^2; multi-channel inputs are channel-averaged.
double ssim(const Tensor& pred, const Tensor& gt);

struct ScaleShift {
    double a = 1.0;
    double b = 0.0;
    bool degenerate = false;  // zero-variance prediction: a=0, b=mean(gt)
};

// Least-squares (a,b) minimizing sum (a*pred + b - gt)^2 over all elements
// jointly (video-level alignment).
ScaleShift align_scale_shift(const Tensor& pred, const Tensor& gt);

struct DepthEvalResult {
    double abs_rel = 0.0;
    double delta1 = 0.0;
    double scale = 1.0;
    double shift = 0.0;
    bool degenerate = false;
};

// AbsRel = mean |p-g|/g; delta1 = fraction with max(p/g, g/p) < 1.25
// (strict). Aligned predictions <= 0 count as delta1 failures and still
// contribute |p-g|/g. gt must be strictly positive.
DepthEvalResult depth_metrics(const Tensor& aligned_pred, const Tensor& gt);

// Fit video-level scale/shift on pred, apply it, then score.
DepthEvalResult eval_depth_video(const Tensor& pred, const Tensor& gt);

struct MaskMatch {
    int pred = -1;
    int gt = -1;
    double iou = 0.0;
};

struct FrameMaskResult {
    double miou = 0.0;              // mean IoU over matched pairs, 0 if none
    double matched_fraction = 0.0;  // matched pairs / max(gt count, 1)
    double matched_total = 0.0;     // sum of accepted IoUs
    std::vector<MaskMatch> matches;
};

// Greedy protocol: ground-truth masks in ascending index order each take the
// unmatched prediction of maximum IoU; the pair counts iff IoU > threshold.
// Maps are binarized at probability 0.5 first.
FrameMaskResult greedy_miou_frame(const Tensor& pred_masks, const Tensor& gt_masks,
                                  double threshold = 0.5);

struct MaskEvalResult {
    std::vector<double> frame_mious;
    std::vector<double> frame_matched_fractions;
    std::vector<std::vector<MaskMatch>> frame_matches;
    double overall = 0.0;
    double matched_fraction = 0.0;
};

MaskEvalResult greedy_miou(std::span<const Tensor> pred_frames,
                           std::span<const Tensor> gt_frames, double threshold = 0.5);

// Test oracle: exhaustive one-to-one matching maximizing total accepted IoU
// under the same threshold rule, normalized by the ground-truth mask count.
// Only valid for N, M <= 6.
double optimal_miou_oracle(const Tensor& pred_masks, const Tensor& gt_masks,
                           double threshold = 0.5);

struct ClipMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    double abs_rel = 0.0;
    double delta1 = 0.0;
    double miou = 0.0;
    double matched_fraction = 0.0;
};

// Full per-clip evaluation on generated (non-context) frames only. RGB
// metrics average over frames; depth alignment is fitted across the whole
// generated span jointly.
ClipMetrics evaluate_clip(const TriModalClip& pred, const TriModalClip& gt, int context_count);

}  // namespace m2repa
