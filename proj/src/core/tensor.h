#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2repa {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class GradTape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<float>> data;
    bool requires_grad = false;
    std::uint64_t id = 0;
    // Scalar reductions also carry their double-precision accumulator so
    // finite-difference checks are not limited by f32 quantization of the
    // final loss value. Storage stays f32 everywhere.
    double scalar_acc = 0.0;
    bool has_scalar_acc = false;
    // Optional double-precision mirror, populated only inside a
    // PrecisionScope (see below).
    std::shared_ptr<std::vector<double>> shadow;
};

}  // namespace detail

// While alive on a thread, every op also evaluates a double-precision mirror
// of its output next to the canonical f32 data. The finite-difference oracle
// uses this to measure derivatives of the graph without f32 forward noise;
// normal execution never pays for it.
class PrecisionScope {
public:
    PrecisionScope();
    ~PrecisionScope();
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;
};

// Dense row-major f32 tensor. Value-semantic handle: copies share the
// immutable payload. Any operation that would produce NaN/Inf throws.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor from_data(Shape shape, std::vector<float> data);
    static Tensor scalar(float value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int rank() const { return static_cast<int>(shape().size()); }
    std::int64_t dim(int axis) const;
    std::int64_t size() const;

    std::span<const float> values() const;
    // In-place write access for parameter updates. Never call while a tape
    // that saw this tensor is still alive.
    std::vector<float>& mutable_values();

    float scalar_value() const;        // requires size() == 1
    double scalar_value_f64() const;   // double accumulator when available

    bool requires_grad() const;
    Tensor& set_requires_grad(bool enabled);

    std::uint64_t id() const;

    Tensor clone() const;  // deep copy, new identity, no grad flag

private:
    friend class GradTape;
    friend struct OpAccess;
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. Construction activates recording on this thread;
// grad() (or destruction) deactivates it. One tape per training step.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    // Gradient of a scalar output w.r.t. each input, same shapes as inputs.
    // Single use: the tape stops recording and replays backward once.
    std::vector<Tensor> grad(const Tensor& scalar_out, std::span<const Tensor> inputs);

    std::size_t node_count() const;

    static bool recording();

    struct Node;   // defined in tensor.cpp
    struct State;

private:
    friend struct OpAccess;
    std::unique_ptr<State> state_;
};

// ---------------------------------------------------------------------------
// Primitive operations. All record gradient rules on the active tape when an
// input requires grad. Elementwise ops broadcast with right-aligned shapes
// (each trailing dimension must match or be 1).
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float b);
Tensor sub(const Tensor& a, float b);
Tensor sub(float a, const Tensor& b);
Tensor mul(const Tensor& a, float b);
Tensor div(const Tensor& a, float b);

Tensor pow_scalar(const Tensor& a, float exponent);
Tensor exp_op(const Tensor& a);
Tensor log_op(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis, bool keepdims);
Tensor mean_axis(const Tensor& a, int axis, bool keepdims);

// Rank-2 matrix product, or batched rank-3 with equal leading dimension.
Tensor matmul(const Tensor& a, const Tensor& b);
// Swap the last two axes (rank >= 2).
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
std::vector<Tensor> split(const Tensor& a, int axis, std::span<const std::int64_t> sizes);

// x / ||x||_2 along the last axis; tokens with norm < 1e-8 map to zero.
Tensor l2_normalize(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);
Tensor softmax_last(const Tensor& a);

// Row gather from a [R, D] table; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices);

// [F, C, H, W] -> [F, N, (c1-c0)*p*p] token patches over channels [c0, c1).
Tensor im2patches(const Tensor& x, int patch, int c0, int c1);
// Inverse arrangement: [F, N, C*p*p] -> [F, C, H, W].
Tensor patches2im(const Tensor& tokens, int patch, int channels, int h, int w);
// 3x3x3 zero-padded unfold of [T, C, H, W] into [T*H*W, C*27] for conv-as-matmul.
Tensor vol2col3(const Tensor& x);
Tensor permute(const Tensor& a, std::span<const int> dims);

// Constant (non-differentiable) views/helpers.
Tensor detach(const Tensor& a);
Tensor max_last_detached(const Tensor& a);        // [..., 1], constant
Tensor ge_mask_detached(const Tensor& a, float threshold);  // 0/1, constant

// ---------------------------------------------------------------------------
// Verification oracle. f maps a tensor to a scalar tensor through tape ops.
// The analytic gradient is taken from a fresh tape, then compared coordinate
// by coordinate against central differences; returns
//   max_i |analytic_i - central_i| / (|central_i| + 1e-8).
// The differencing reads f through the double accumulator of the final
// reduction so the check is not limited by f32 quantization of the output.
// ---------------------------------------------------------------------------
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, float h);

// Same comparison for a live parameter tensor: `evaluate` recomputes the
// scalar from current state (no tape), `param` is perturbed in place and
// restored, `analytic_grad` comes from a prior tape backward.
double finite_diff_check_param(const std::function<double()>& evaluate, Tensor param,
                               std::span<const float> analytic_grad, float h);

}  // namespace m2repa
