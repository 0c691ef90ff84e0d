#include "tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace m2repa {

namespace {

std::atomic<std::uint64_t> g_next_tensor_id{1};
thread_local int g_precision_depth = 0;

bool shadow_mode() { return g_precision_depth > 0; }

[[noreturn]] void fail(const std::string& msg) {
    throw std::runtime_error("m2repa: " + msg);
}

void ensure_finite(const std::vector<float>& v, const char* op) {
    for (float x : v) {
        if (!std::isfinite(x)) {
            fail(std::string("op '") + op + "' produced a non-finite value");
        }
    }
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        st[i] = st[i + 1] * shape[i + 1];
    }
    return st;
}

// Right-aligned broadcast: trailing dims must match or be 1.
struct BcastPlan {
    Shape out_shape;
    std::vector<std::int64_t> stride_a;  // per out dim, 0 where broadcast
    std::vector<std::int64_t> stride_b;
    std::int64_t out_size = 0;
};

BcastPlan make_bcast(const Shape& a, const Shape& b, const char* op) {
    BcastPlan plan;
    const int rank = static_cast<int>(std::max(a.size(), b.size()));
    plan.out_shape.resize(rank);
    auto sa = row_major_strides(a);
    auto sb = row_major_strides(b);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    for (int i = 0; i < rank; ++i) {
        const int ia = static_cast<int>(a.size()) - rank + i;
        const int ib = static_cast<int>(b.size()) - rank + i;
        const std::int64_t da = ia >= 0 ? a[ia] : 1;
        const std::int64_t db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1) {
            fail(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                 " are not broadcast-compatible");
        }
        plan.out_shape[i] = std::max(da, db);
        if (ia >= 0 && da != 1) plan.stride_a[i] = sa[ia];
        if (ib >= 0 && db != 1) plan.stride_b[i] = sb[ib];
    }
    plan.out_size = shape_numel(plan.out_shape);
    return plan;
}

// Odometer over the broadcast output space tracking flat offsets into both
// operands. fn(out_flat, a_flat, b_flat).
template <typename Fn>
void bcast_iterate(const BcastPlan& plan, Fn&& fn) {
    const int rank = static_cast<int>(plan.out_shape.size());
    if (plan.out_size == 0) return;
    std::vector<std::int64_t> idx(rank, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t o = 0;; ++o) {
        fn(o, oa, ob);
        int d = rank - 1;
        for (; d >= 0; --d) {
            ++idx[d];
            oa += plan.stride_a[d];
            ob += plan.stride_b[d];
            if (idx[d] < plan.out_shape[d]) break;
            oa -= plan.stride_a[d] * plan.out_shape[d];
            ob -= plan.stride_b[d] * plan.out_shape[d];
            idx[d] = 0;
        }
        if (d < 0) break;
    }
}

std::shared_ptr<std::vector<float>> copy_payload(const Tensor& t) {
    return std::make_shared<std::vector<float>>(t.values().begin(), t.values().end());
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

PrecisionScope::PrecisionScope() { ++g_precision_depth; }
PrecisionScope::~PrecisionScope() { --g_precision_depth; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

static std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<float> data) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    for (auto d : impl->shape) {
        if (d <= 0) fail("tensor extents must be positive, got " + shape_str(impl->shape));
    }
    if (shape_numel(impl->shape) != static_cast<std::int64_t>(data.size())) {
        fail("data length " + std::to_string(data.size()) + " does not match shape " +
             shape_str(impl->shape));
    }
    impl->data = std::make_shared<std::vector<float>>(std::move(data));
    impl->id = g_next_tensor_id.fetch_add(1, std::memory_order_relaxed);
    return impl;
}

Tensor Tensor::zeros(Shape shape) {
    Tensor t;
    auto n = shape_numel(shape);
    t.impl_ = make_impl(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), 0.0f));
    return t;
}

Tensor Tensor::full(Shape shape, float value) {
    Tensor t;
    auto n = shape_numel(shape);
    t.impl_ = make_impl(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value));
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
    Tensor t;
    t.impl_ = make_impl(std::move(shape), std::move(data));
    return t;
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const {
    if (!impl_) fail("using an undefined tensor");
    return impl_->shape;
}

std::int64_t Tensor::dim(int axis) const {
    const auto& s = shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size())) fail("dim axis out of range");
    return s[axis];
}

std::int64_t Tensor::size() const { return shape_numel(shape()); }

std::span<const float> Tensor::values() const {
    if (!impl_) fail("using an undefined tensor");
    return {impl_->data->data(), impl_->data->size()};
}

std::vector<float>& Tensor::mutable_values() {
    if (!impl_) fail("using an undefined tensor");
    impl_->has_scalar_acc = false;
    impl_->shadow.reset();
    return *impl_->data;
}

float Tensor::scalar_value() const {
    if (size() != 1) fail("scalar_value on tensor of shape " + shape_str(shape()));
    return (*impl_->data)[0];
}

double Tensor::scalar_value_f64() const {
    if (size() != 1) fail("scalar_value_f64 on tensor of shape " + shape_str(shape()));
    if (impl_->shadow) return (*impl_->shadow)[0];
    return impl_->has_scalar_acc ? impl_->scalar_acc : static_cast<double>((*impl_->data)[0]);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool enabled) {
    if (!impl_) fail("set_requires_grad on undefined tensor");
    impl_->requires_grad = enabled;
    return *this;
}

std::uint64_t Tensor::id() const {
    if (!impl_) fail("id of undefined tensor");
    return impl_->id;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.impl_ = make_impl(shape(), *impl_->data);
    return t;
}

// ---------------------------------------------------------------------------
// GradTape
// ---------------------------------------------------------------------------

struct GradTape::Node {
    std::function<void(const std::vector<float>&, State&)> backward;  // null for leaves
    std::int64_t out_size = 0;
};

struct GradTape::State {
    std::vector<Node> nodes;
    std::unordered_map<std::uint64_t, int> node_of;  // tensor id -> node index
    std::vector<std::vector<float>> grads;
    bool recording = true;
    bool used = false;

    void accum(int node, const float* g, std::int64_t n) {
        auto& buf = grads[static_cast<std::size_t>(node)];
        if (buf.empty()) buf.assign(static_cast<std::size_t>(n), 0.0f);
        for (std::int64_t i = 0; i < n; ++i) buf[static_cast<std::size_t>(i)] += g[i];
    }
};

namespace {
thread_local GradTape::State* g_active_tape = nullptr;
}

GradTape::GradTape() : state_(std::make_unique<State>()) {
    if (g_active_tape) fail("a GradTape is already active on this thread");
    g_active_tape = state_.get();
}

GradTape::~GradTape() {
    if (g_active_tape == state_.get()) g_active_tape = nullptr;
}

std::size_t GradTape::node_count() const { return state_->nodes.size(); }

bool GradTape::recording() { return g_active_tape != nullptr && g_active_tape->recording; }

// Op-side access to tensors' internals and the active tape.
struct OpAccess {
    using State = GradTape::State;
    using Node = GradTape::Node;

    static bool active() { return g_active_tape != nullptr && g_active_tape->recording; }

    static int input_node(const Tensor& t) {
        State* st = g_active_tape;
        if (!st || !st->recording || !t.impl_) return -1;
        auto it = st->node_of.find(t.impl_->id);
        if (it != st->node_of.end()) return it->second;
        if (!t.impl_->requires_grad) return -1;
        st->nodes.push_back(Node{nullptr, t.size()});
        int idx = static_cast<int>(st->nodes.size()) - 1;
        st->node_of.emplace(t.impl_->id, idx);
        return idx;
    }

    static void record(Tensor& out, std::function<void(const std::vector<float>&, State&)> bw) {
        State* st = g_active_tape;
        if (!st || !st->recording) fail("record without active tape");
        st->nodes.push_back(Node{std::move(bw), out.size()});
        st->node_of.emplace(out.impl_->id, static_cast<int>(st->nodes.size()) - 1);
        out.impl_->requires_grad = true;
    }

    static void set_acc(Tensor& t, double v) {
        t.impl_->scalar_acc = v;
        t.impl_->has_scalar_acc = true;
    }

    // Double mirror of the payload; lazily widened from f32 and cached.
    static const std::vector<double>& shadow(const Tensor& t) {
        auto& impl = *t.impl_;
        if (!impl.shadow) {
            impl.shadow = std::make_shared<std::vector<double>>(impl.data->begin(),
                                                                impl.data->end());
        }
        return *impl.shadow;
    }

    static void attach_shadow(Tensor& t, std::vector<double> sh) {
        t.impl_->shadow = std::make_shared<std::vector<double>>(std::move(sh));
    }
};

using TapeState = GradTape::State;

std::vector<Tensor> GradTape::grad(const Tensor& scalar_out, std::span<const Tensor> inputs) {
    State* st = state_.get();
    if (st->used) fail("GradTape::grad may only be called once");
    st->used = true;
    st->recording = false;
    if (g_active_tape == st) g_active_tape = nullptr;

    if (scalar_out.size() != 1) {
        fail("grad requires a scalar output, got shape " + shape_str(scalar_out.shape()));
    }
    auto out_it = st->node_of.find(scalar_out.id());
    if (out_it == st->node_of.end()) fail("grad output was not produced on this tape");

    st->grads.assign(st->nodes.size(), {});
    st->grads[static_cast<std::size_t>(out_it->second)] = {1.0f};

    // Reverse creation order is a valid topological order.
    for (int i = static_cast<int>(st->nodes.size()) - 1; i >= 0; --i) {
        auto& g = st->grads[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        auto& node = st->nodes[static_cast<std::size_t>(i)];
        if (node.backward) node.backward(g, *st);
    }

    std::vector<Tensor> result;
    result.reserve(inputs.size());
    for (const auto& in : inputs) {
        auto it = st->node_of.find(in.id());
        if (it == st->node_of.end()) {
            fail("grad input (id " + std::to_string(in.id()) + ") is not on the tape");
        }
        auto& g = st->grads[static_cast<std::size_t>(it->second)];
        if (g.empty()) {
            result.push_back(Tensor::zeros(in.shape()));
        } else {
            result.push_back(Tensor::from_data(in.shape(), g));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// fwd(a,b)->out in double; dfa/dfb give d out/d a and d out/d b at (a, b, out).
template <typename F, typename DA, typename DB>
Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, F fwd, DA dfa,
                          DB dfb) {
    const bool same_shape = a.shape() == b.shape();
    auto plan = make_bcast(a.shape(), b.shape(), name);
    std::vector<float> out(static_cast<std::size_t>(plan.out_size));
    const float* pa = a.values().data();
    const float* pb = b.values().data();

    // broadcast index tables, built once and shared with the backward pass
    std::shared_ptr<std::vector<std::int64_t>> tab_a, tab_b;
    if (same_shape) {
        for (std::int64_t i = 0; i < plan.out_size; ++i) {
            out[static_cast<std::size_t>(i)] = static_cast<float>(fwd(pa[i], pb[i]));
        }
    } else {
        tab_a = std::make_shared<std::vector<std::int64_t>>(
            static_cast<std::size_t>(plan.out_size));
        tab_b = std::make_shared<std::vector<std::int64_t>>(
            static_cast<std::size_t>(plan.out_size));
        bcast_iterate(plan, [&](std::int64_t o, std::int64_t oa, std::int64_t ob) {
            (*tab_a)[static_cast<std::size_t>(o)] = oa;
            (*tab_b)[static_cast<std::size_t>(o)] = ob;
            out[static_cast<std::size_t>(o)] = static_cast<float>(fwd(pa[oa], pb[ob]));
        });
    }
    ensure_finite(out, name);
    Tensor result = Tensor::from_data(plan.out_shape, std::move(out));
    if (result.size() == 1 && a.size() == 1 && b.size() == 1) {
        OpAccess::set_acc(result, fwd(a.scalar_value_f64(), b.scalar_value_f64()));
    }
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        const auto& sb = OpAccess::shadow(b);
        std::vector<double> sh(static_cast<std::size_t>(plan.out_size));
        for (std::int64_t o = 0; o < plan.out_size; ++o) {
            const std::int64_t oa = same_shape ? o : (*tab_a)[static_cast<std::size_t>(o)];
            const std::int64_t ob = same_shape ? o : (*tab_b)[static_cast<std::size_t>(o)];
            sh[static_cast<std::size_t>(o)] =
                fwd(sa[static_cast<std::size_t>(oa)], sb[static_cast<std::size_t>(ob)]);
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        int nb = OpAccess::input_node(b);
        if (na >= 0 || nb >= 0) {
            auto da = copy_payload(a);
            auto db = copy_payload(b);
            std::int64_t asize = a.size(), bsize = b.size();
            std::int64_t out_size = plan.out_size;
            auto dout = copy_payload(result);
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga, gb;
                if (na >= 0) ga.assign(static_cast<std::size_t>(asize), 0.0f);
                if (nb >= 0) gb.assign(static_cast<std::size_t>(bsize), 0.0f);
                const float* pda = da->data();
                const float* pdb = db->data();
                const float* pdo = dout->data();
                for (std::int64_t o = 0; o < out_size; ++o) {
                    const std::int64_t oa = tab_a ? (*tab_a)[static_cast<std::size_t>(o)] : o;
                    const std::int64_t ob = tab_b ? (*tab_b)[static_cast<std::size_t>(o)] : o;
                    const float g = og[static_cast<std::size_t>(o)];
                    if (na >= 0) ga[static_cast<std::size_t>(oa)] += g * dfa(pda[oa], pdb[ob], pdo[o]);
                    if (nb >= 0) gb[static_cast<std::size_t>(ob)] += g * dfb(pda[oa], pdb[ob], pdo[o]);
                }
                if (na >= 0) st.accum(na, ga.data(), asize);
                if (nb >= 0) st.accum(nb, gb.data(), bsize);
            });
        }
    }
    return result;
}

template <typename F, typename DA>
Tensor unary_elementwise(const char* name, const Tensor& a, F fwd, DA dfa) {
    std::vector<float> out(static_cast<std::size_t>(a.size()));
    const float* pa = a.values().data();
    for (std::int64_t i = 0; i < a.size(); ++i) {
        out[static_cast<std::size_t>(i)] = static_cast<float>(fwd(pa[i]));
    }
    ensure_finite(out, name);
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    if (result.size() == 1) {
        OpAccess::set_acc(result, fwd(a.scalar_value_f64()));
    }
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        std::vector<double> sh(sa.size());
        for (std::size_t i = 0; i < sa.size(); ++i) sh[i] = fwd(sa[i]);
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            auto da = copy_payload(a);
            auto dout = copy_payload(result);
            std::int64_t n = a.size();
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga(static_cast<std::size_t>(n));
                for (std::int64_t i = 0; i < n; ++i) {
                    ga[static_cast<std::size_t>(i)] =
                        og[static_cast<std::size_t>(i)] *
                        dfa((*da)[static_cast<std::size_t>(i)],
                            (*dout)[static_cast<std::size_t>(i)]);
                }
                st.accum(na, ga.data(), n);
            });
        }
    }
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](float, float, float) { return 1.0f; }, [](float, float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](float, float, float) { return 1.0f; }, [](float, float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        "div", a, b, [](double x, double y) { return x / y; },
        [](float, float y, float) { return 1.0f / y; },
        [](float x, float y, float) { return -x / (y * y); });
}

Tensor add(const Tensor& a, float b) {
    return unary_elementwise(
        "add_scalar", a, [b](double x) { return x + b; }, [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, float b) { return add(a, -b); }

Tensor sub(float a, const Tensor& b) {
    return unary_elementwise(
        "rsub_scalar", b, [a](double x) { return a - x; }, [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, float b) {
    return unary_elementwise(
        "mul_scalar", a, [b](double x) { return x * b; }, [b](float, float) { return b; });
}

Tensor div(const Tensor& a, float b) {
    if (b == 0.0f) fail("div_scalar: division by zero");
    return mul(a, 1.0f / b);
}

Tensor pow_scalar(const Tensor& a, float exponent) {
    return unary_elementwise(
        "pow", a,
        [exponent](double x) { return std::pow(x, static_cast<double>(exponent)); },
        [exponent](float x, float) { return exponent * std::pow(x, exponent - 1.0f); });
}

Tensor exp_op(const Tensor& a) {
    return unary_elementwise(
        "exp", a, [](double x) { return std::exp(x); }, [](float, float out) { return out; });
}

Tensor log_op(const Tensor& a) {
    return unary_elementwise(
        "log", a, [](double x) { return std::log(x); }, [](float x, float) { return 1.0f / x; });
}

Tensor sqrt_op(const Tensor& a) {
    return unary_elementwise(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](float, float out) { return 0.5f / out; });
}

Tensor relu(const Tensor& a) {
    return unary_elementwise(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

Tensor full_reduce(const char* name, const Tensor& a, bool take_mean) {
    const float* p = a.values().data();
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += p[i];
    if (take_mean) acc /= static_cast<double>(a.size());
    const float v = static_cast<float>(acc);
    if (!std::isfinite(v)) fail(std::string("op '") + name + "' produced a non-finite value");
    Tensor result = Tensor::from_data({1}, {v});
    OpAccess::set_acc(result, acc);
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        double sacc = 0.0;
        for (double x : sa) sacc += x;
        if (take_mean) sacc /= static_cast<double>(sa.size());
        OpAccess::attach_shadow(result, {sacc});
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            std::int64_t n = a.size();
            float scale = take_mean ? 1.0f / static_cast<float>(n) : 1.0f;
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga(static_cast<std::size_t>(n), og[0] * scale);
                st.accum(na, ga.data(), n);
            });
        }
    }
    return result;
}

Tensor axis_reduce(const char* name, const Tensor& a, int axis, bool keepdims, bool take_mean) {
    const auto& s = a.shape();
    int rank = a.rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) fail(std::string(name) + ": axis out of range");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < rank; ++i) inner *= s[i];
    const std::int64_t extent = s[axis];

    Shape out_shape;
    for (int i = 0; i < rank; ++i) {
        if (i == axis) {
            if (keepdims) out_shape.push_back(1);
        } else {
            out_shape.push_back(s[i]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);

    const float* p = a.values().data();
    std::vector<float> out(static_cast<std::size_t>(outer * inner));
    double last_acc = 0.0;
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            double acc = 0.0;
            const float* base = p + o * extent * inner + in;
            for (std::int64_t k = 0; k < extent; ++k) acc += base[k * inner];
            if (take_mean) acc /= static_cast<double>(extent);
            out[static_cast<std::size_t>(o * inner + in)] = static_cast<float>(acc);
            last_acc = acc;
        }
    }
    ensure_finite(out, name);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    if (result.size() == 1) OpAccess::set_acc(result, last_acc);
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        std::vector<double> sh(static_cast<std::size_t>(outer * inner));
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                double acc = 0.0;
                const double* base = sa.data() + o * extent * inner + in;
                for (std::int64_t k = 0; k < extent; ++k) acc += base[k * inner];
                if (take_mean) acc /= static_cast<double>(extent);
                sh[static_cast<std::size_t>(o * inner + in)] = acc;
            }
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            std::int64_t n = a.size();
            float scale = take_mean ? 1.0f / static_cast<float>(extent) : 1.0f;
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga(static_cast<std::size_t>(n));
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t in = 0; in < inner; ++in) {
                        const float g = og[static_cast<std::size_t>(o * inner + in)] * scale;
                        float* base = ga.data() + o * extent * inner + in;
                        for (std::int64_t k = 0; k < extent; ++k) base[k * inner] = g;
                    }
                }
                st.accum(na, ga.data(), n);
            });
        }
    }
    return result;
}

}  // namespace

Tensor sum(const Tensor& a) { return full_reduce("sum", a, false); }
Tensor mean(const Tensor& a) { return full_reduce("mean", a, true); }
Tensor sum_axis(const Tensor& a, int axis, bool keepdims) {
    return axis_reduce("sum_axis", a, axis, keepdims, false);
}
Tensor mean_axis(const Tensor& a, int axis, bool keepdims) {
    return axis_reduce("mean_axis", a, axis, keepdims, true);
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace {

thread_local std::vector<double> g_matmul_scratch;

// C[m,n] = A[m,k] * B[k,n], double accumulation (p-major order per row).
template <typename S>
void matmul_kernel(const S* a, const S* b, S* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    auto& row = g_matmul_scratch;
    row.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < m; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        const S* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const S* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) row[static_cast<std::size_t>(j)] += av * brow[j];
        }
        S* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] = static_cast<S>(row[static_cast<std::size_t>(j)]);
    }
}

// Gradient kernels accumulate in f32: they feed parameter updates, not the
// precision-sensitive forward values, and the narrower accumulator keeps the
// hot loops vectorizable.

// C[m,n] += A[m,k] * B[n,k]^T
void matmul_nt_kernel(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const float* brow = b + j * k;
            float acc = 0.0f;
            for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void matmul_tn_kernel(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        const float* brow = b + i * n;
        for (std::int64_t p = 0; p < k; ++p) {
            const float av = arow[p];
            float* crow = c + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const int ra = a.rank(), rb = b.rank();
    if (!((ra == 2 && rb == 2) || (ra == 3 && rb == 3))) {
        fail("matmul supports [m,k]x[k,n] or batched [B,m,k]x[B,k,n]; got " +
             shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::int64_t batch = ra == 3 ? a.dim(0) : 1;
    if (ra == 3 && a.dim(0) != b.dim(0)) {
        fail("matmul batch dims differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(ra - 2), k = a.dim(ra - 1);
    const std::int64_t kb = b.dim(rb - 2), n = b.dim(rb - 1);
    if (k != kb) {
        fail("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
             shape_str(b.shape()));
    }

    Shape out_shape = ra == 3 ? Shape{batch, m, n} : Shape{m, n};
    std::vector<float> out(static_cast<std::size_t>(batch * m * n), 0.0f);
    const float* pa = a.values().data();
    const float* pb = b.values().data();
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        matmul_kernel(pa + bi * m * k, pb + bi * k * n, out.data() + bi * m * n, m, k, n);
    }
    ensure_finite(out, "matmul");
    Tensor result = Tensor::from_data(out_shape, std::move(out));
    if (result.size() == 1) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < k; ++p) acc += static_cast<double>(pa[p]) * pb[p];
        OpAccess::set_acc(result, acc);
    }
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        const auto& sb = OpAccess::shadow(b);
        std::vector<double> sh(static_cast<std::size_t>(batch * m * n), 0.0);
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            matmul_kernel(sa.data() + bi * m * k, sb.data() + bi * k * n, sh.data() + bi * m * n,
                          m, k, n);
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }

    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        int nb = OpAccess::input_node(b);
        if (na >= 0 || nb >= 0) {
            auto da = copy_payload(a);
            auto db = copy_payload(b);
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                if (na >= 0) {
                    std::vector<float> ga(static_cast<std::size_t>(batch * m * k), 0.0f);
                    for (std::int64_t bi = 0; bi < batch; ++bi) {
                        matmul_nt_kernel(og.data() + bi * m * n, db->data() + bi * k * n,
                                         ga.data() + bi * m * k, m, n, k);
                    }
                    st.accum(na, ga.data(), batch * m * k);
                }
                if (nb >= 0) {
                    std::vector<float> gb(static_cast<std::size_t>(batch * k * n), 0.0f);
                    for (std::int64_t bi = 0; bi < batch; ++bi) {
                        matmul_tn_kernel(da->data() + bi * m * k, og.data() + bi * m * n,
                                         gb.data() + bi * k * n, m, k, n);
                    }
                    st.accum(nb, gb.data(), batch * k * n);
                }
            });
        }
    }
    return result;
}

namespace {

template <typename S>
void transpose_copy(const S* src, S* dst, std::int64_t batch, std::int64_t rows,
                    std::int64_t cols) {
    for (std::int64_t bi = 0; bi < batch; ++bi) {
        const S* s = src + bi * rows * cols;
        S* d = dst + bi * rows * cols;
        for (std::int64_t i = 0; i < rows; ++i) {
            for (std::int64_t j = 0; j < cols; ++j) d[j * rows + i] = s[i * cols + j];
        }
    }
}

}  // namespace

Tensor transpose(const Tensor& a) {
    const int r = a.rank();
    if (r < 2) fail("transpose needs rank >= 2, got " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    std::swap(out_shape[r - 1], out_shape[r - 2]);
    const std::int64_t rows = a.dim(r - 2), cols = a.dim(r - 1);
    const std::int64_t batch = a.size() / (rows * cols);
    std::vector<float> out(static_cast<std::size_t>(a.size()));
    transpose_copy(a.values().data(), out.data(), batch, rows, cols);
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        std::vector<double> sh(sa.size());
        transpose_copy(sa.data(), sh.data(), batch, rows, cols);
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            std::int64_t n = a.size();
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga(static_cast<std::size_t>(n));
                transpose_copy(og.data(), ga.data(), batch, cols, rows);
                st.accum(na, ga.data(), n);
            });
        }
    }
    return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        fail("reshape from " + shape_str(a.shape()) + " to " + shape_str(shape) +
             " changes element count");
    }
    Tensor result = Tensor::from_data(std::move(shape),
                                      std::vector<float>(a.values().begin(), a.values().end()));
    if (shadow_mode()) {
        OpAccess::attach_shadow(result, OpAccess::shadow(a));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            std::int64_t n = a.size();
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                st.accum(na, og.data(), n);
            });
        }
    }
    return result;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) fail("concat of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) fail("concat axis out of range");
    Shape out_shape = parts[0].shape();
    std::int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) fail("concat rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && p.dim(i) != out_shape[i]) {
                fail("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                     shape_str(parts[0].shape()) + " on non-concat axis " + std::to_string(i));
            }
        }
        total_axis += p.dim(axis);
    }
    out_shape[axis] = total_axis;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= out_shape[i];

    std::vector<float> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<double> sh;
    if (shadow_mode()) sh.resize(out.size());
    std::int64_t offset = 0;
    std::vector<std::int64_t> part_extents;
    for (const auto& p : parts) {
        const std::int64_t ext = p.dim(axis);
        part_extents.push_back(ext);
        const float* src = p.values().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(out.data() + (o * total_axis + offset) * inner, src + o * ext * inner,
                        static_cast<std::size_t>(ext * inner) * sizeof(float));
        }
        if (shadow_mode()) {
            const auto& sp = OpAccess::shadow(p);
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy(sp.begin() + o * ext * inner, sp.begin() + (o + 1) * ext * inner,
                          sh.begin() + (o * total_axis + offset) * inner);
            }
        }
        offset += ext;
    }
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    if (shadow_mode()) OpAccess::attach_shadow(result, std::move(sh));
    if (OpAccess::active()) {
        std::vector<int> nodes;
        std::vector<std::int64_t> sizes;
        bool any = false;
        for (const auto& p : parts) {
            nodes.push_back(OpAccess::input_node(p));
            sizes.push_back(p.size());
            any = any || nodes.back() >= 0;
        }
        if (any) {
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::int64_t off = 0;
                for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                    const std::int64_t ext = part_extents[pi];
                    if (nodes[pi] >= 0) {
                        std::vector<float> gp(static_cast<std::size_t>(sizes[pi]));
                        for (std::int64_t o = 0; o < outer; ++o) {
                            std::memcpy(gp.data() + o * ext * inner,
                                        og.data() + (o * total_axis + off) * inner,
                                        static_cast<std::size_t>(ext * inner) * sizeof(float));
                        }
                        st.accum(nodes[pi], gp.data(), sizes[pi]);
                    }
                    off += ext;
                }
            });
        }
    }
    return result;
}

std::vector<Tensor> split(const Tensor& a, int axis, std::span<const std::int64_t> sizes) {
    const int rank = a.rank();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) fail("split axis out of range");
    std::int64_t total = 0;
    for (auto s : sizes) total += s;
    if (total != a.dim(axis)) {
        fail("split sizes sum to " + std::to_string(total) + " but axis extent is " +
             std::to_string(a.dim(axis)));
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < rank; ++i) inner *= a.dim(i);
    const std::int64_t axis_extent = a.dim(axis);

    std::vector<Tensor> result;
    const float* src = a.values().data();
    std::int64_t offset = 0;
    for (auto ext : sizes) {
        Shape shp = a.shape();
        shp[axis] = ext;
        std::vector<float> part(static_cast<std::size_t>(outer * ext * inner));
        for (std::int64_t o = 0; o < outer; ++o) {
            std::memcpy(part.data() + o * ext * inner, src + (o * axis_extent + offset) * inner,
                        static_cast<std::size_t>(ext * inner) * sizeof(float));
        }
        Tensor piece = Tensor::from_data(std::move(shp), std::move(part));
        if (shadow_mode()) {
            const auto& sa = OpAccess::shadow(a);
            std::vector<double> sh(static_cast<std::size_t>(outer * ext * inner));
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy(sa.begin() + (o * axis_extent + offset) * inner,
                          sa.begin() + (o * axis_extent + offset) * inner + ext * inner,
                          sh.begin() + o * ext * inner);
            }
            OpAccess::attach_shadow(piece, std::move(sh));
        }
        if (OpAccess::active()) {
            int na = OpAccess::input_node(a);
            if (na >= 0) {
                std::int64_t n = a.size();
                std::int64_t off = offset;
                OpAccess::record(piece, [=](const std::vector<float>& og, TapeState& st) {
                    std::vector<float> ga(static_cast<std::size_t>(n), 0.0f);
                    for (std::int64_t o = 0; o < outer; ++o) {
                        std::memcpy(ga.data() + (o * axis_extent + off) * inner,
                                    og.data() + o * ext * inner,
                                    static_cast<std::size_t>(ext * inner) * sizeof(float));
                    }
                    st.accum(na, ga.data(), n);
                });
            }
        }
        result.push_back(std::move(piece));
        offset += ext;
    }
    return result;
}

// ---------------------------------------------------------------------------
// Composites
// ---------------------------------------------------------------------------

Tensor l2_normalize(const Tensor& a) {
    Tensor n2 = sum_axis(mul(a, a), -1, true);
    // rows below the norm floor map to exactly zero (mask is constant)
    Tensor mask = ge_mask_detached(n2, 1e-16f);
    Tensor safe = add(mul(n2, mask), sub(1.0f, mask));
    Tensor inv = div(mask, sqrt_op(safe));
    return mul(a, inv);
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps) {
    Tensor mu = mean_axis(a, -1, true);
    Tensor xc = sub(a, mu);
    Tensor var = mean_axis(mul(xc, xc), -1, true);
    Tensor y = div(xc, sqrt_op(add(var, eps)));
    return add(mul(y, gamma), beta);
}

Tensor softmax_last(const Tensor& a) {
    Tensor shifted = sub(a, max_last_detached(a));
    Tensor e = exp_op(shifted);
    return div(e, sum_axis(e, -1, true));
}

// ---------------------------------------------------------------------------
// Indexing / layout ops
// ---------------------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices) {
    if (table.rank() != 2) fail("gather_rows expects a rank-2 table");
    const std::int64_t rows = table.dim(0), width = table.dim(1);
    for (auto ix : indices) {
        if (ix < 0 || ix >= rows) {
            fail("gather_rows index " + std::to_string(ix) + " out of range [0," +
                 std::to_string(rows) + ")");
        }
    }
    std::vector<float> out(indices.size() * static_cast<std::size_t>(width));
    const float* src = table.values().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(out.data() + i * static_cast<std::size_t>(width), src + indices[i] * width,
                    static_cast<std::size_t>(width) * sizeof(float));
    }
    Tensor result =
        Tensor::from_data({static_cast<std::int64_t>(indices.size()), width}, std::move(out));
    if (shadow_mode()) {
        const auto& st = OpAccess::shadow(table);
        std::vector<double> sh(indices.size() * static_cast<std::size_t>(width));
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy(st.begin() + indices[i] * width, st.begin() + (indices[i] + 1) * width,
                      sh.begin() + i * static_cast<std::size_t>(width));
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int nt = OpAccess::input_node(table);
        if (nt >= 0) {
            std::vector<std::int64_t> idx(indices.begin(), indices.end());
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> gt(static_cast<std::size_t>(rows * width), 0.0f);
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const float* g = og.data() + i * static_cast<std::size_t>(width);
                    float* dst = gt.data() + idx[i] * width;
                    for (std::int64_t j = 0; j < width; ++j) dst[j] += g[j];
                }
                st.accum(nt, gt.data(), rows * width);
            });
        }
    }
    return result;
}

namespace {

// Flat source offset in [C,H,W] for each token feature element, frame-local.
std::vector<std::int64_t> patch_index_map(std::int64_t c_count, std::int64_t c0, int patch,
                                          std::int64_t h, std::int64_t w) {
    const std::int64_t gh = h / patch, gw = w / patch;
    std::vector<std::int64_t> map(static_cast<std::size_t>(gh * gw * c_count * patch * patch));
    std::size_t k = 0;
    for (std::int64_t gy = 0; gy < gh; ++gy) {
        for (std::int64_t gx = 0; gx < gw; ++gx) {
            for (std::int64_t c = 0; c < c_count; ++c) {
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        const std::int64_t yy = gy * patch + py;
                        const std::int64_t xx = gx * patch + px;
                        map[k++] = ((c0 + c) * h + yy) * w + xx;
                    }
                }
            }
        }
    }
    return map;
}

}  // namespace

Tensor im2patches(const Tensor& x, int patch, int c0, int c1) {
    if (x.rank() != 4) fail("im2patches expects [F,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t f = x.dim(0), channels = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c0 < 0 || c1 > channels || c0 >= c1) fail("im2patches channel range invalid");
    if (h % patch != 0 || w % patch != 0) {
        fail("im2patches: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
             " not divisible by patch " + std::to_string(patch));
    }
    const std::int64_t cc = c1 - c0;
    const std::int64_t n_tok = (h / patch) * (w / patch);
    const std::int64_t feat = cc * patch * patch;
    auto map = patch_index_map(cc, c0, patch, h, w);

    const std::int64_t frame = channels * h * w;
    std::vector<float> out(static_cast<std::size_t>(f * n_tok * feat));
    const float* src = x.values().data();
    for (std::int64_t fi = 0; fi < f; ++fi) {
        const float* base = src + fi * frame;
        float* dst = out.data() + fi * n_tok * feat;
        for (std::size_t k = 0; k < map.size(); ++k) dst[k] = base[map[k]];
    }
    Tensor result = Tensor::from_data({f, n_tok, feat}, std::move(out));
    if (shadow_mode()) {
        const auto& sx = OpAccess::shadow(x);
        std::vector<double> sh(static_cast<std::size_t>(f * n_tok * feat));
        for (std::int64_t fi = 0; fi < f; ++fi) {
            const double* base = sx.data() + fi * frame;
            double* dst = sh.data() + fi * n_tok * feat;
            for (std::size_t k = 0; k < map.size(); ++k) dst[k] = base[map[k]];
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int nx = OpAccess::input_node(x);
        if (nx >= 0) {
            std::int64_t n = x.size();
            auto map_ptr = std::make_shared<std::vector<std::int64_t>>(std::move(map));
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> gx(static_cast<std::size_t>(n), 0.0f);
                for (std::int64_t fi = 0; fi < f; ++fi) {
                    float* base = gx.data() + fi * frame;
                    const float* g = og.data() + fi * n_tok * feat;
                    for (std::size_t k = 0; k < map_ptr->size(); ++k) base[(*map_ptr)[k]] += g[k];
                }
                st.accum(nx, gx.data(), n);
            });
        }
    }
    return result;
}

Tensor patches2im(const Tensor& tokens, int patch, int channels, int h, int w) {
    if (tokens.rank() != 3) fail("patches2im expects [F,N,feat], got " + shape_str(tokens.shape()));
    const std::int64_t f = tokens.dim(0), n_tok = tokens.dim(1), feat = tokens.dim(2);
    if (h % patch != 0 || w % patch != 0) fail("patches2im: dims not divisible by patch");
    if (n_tok != (h / patch) * static_cast<std::int64_t>(w / patch)) {
        fail("patches2im: token count " + std::to_string(n_tok) + " does not match grid");
    }
    if (feat != static_cast<std::int64_t>(channels) * patch * patch) {
        fail("patches2im: feature dim " + std::to_string(feat) + " != channels*patch^2");
    }
    auto map = patch_index_map(channels, 0, patch, h, w);
    const std::int64_t frame = static_cast<std::int64_t>(channels) * h * w;
    std::vector<float> out(static_cast<std::size_t>(f * frame));
    const float* src = tokens.values().data();
    for (std::int64_t fi = 0; fi < f; ++fi) {
        const float* tok = src + fi * n_tok * feat;
        float* base = out.data() + fi * frame;
        for (std::size_t k = 0; k < map.size(); ++k) base[map[k]] = tok[k];
    }
    Tensor result = Tensor::from_data({f, channels, h, w}, std::move(out));
    if (shadow_mode()) {
        const auto& stok = OpAccess::shadow(tokens);
        std::vector<double> sh(static_cast<std::size_t>(f * frame));
        for (std::int64_t fi = 0; fi < f; ++fi) {
            const double* tok = stok.data() + fi * n_tok * feat;
            double* base = sh.data() + fi * frame;
            for (std::size_t k = 0; k < map.size(); ++k) base[map[k]] = tok[k];
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int nx = OpAccess::input_node(tokens);
        if (nx >= 0) {
            std::int64_t n = tokens.size();
            auto map_ptr = std::make_shared<std::vector<std::int64_t>>(std::move(map));
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> gt(static_cast<std::size_t>(n));
                for (std::int64_t fi = 0; fi < f; ++fi) {
                    const float* base = og.data() + fi * frame;
                    float* tok = gt.data() + fi * n_tok * feat;
                    for (std::size_t k = 0; k < map_ptr->size(); ++k) tok[k] = base[(*map_ptr)[k]];
                }
                st.accum(nx, gt.data(), n);
            });
        }
    }
    return result;
}

namespace {

template <typename S>
void vol2col_fwd(const S* src, S* dst, std::int64_t t, std::int64_t c, std::int64_t h,
                 std::int64_t w) {
    const std::int64_t cols = c * 27;
    for (std::int64_t ti = 0; ti < t; ++ti) {
        for (std::int64_t hi = 0; hi < h; ++hi) {
            for (std::int64_t wi = 0; wi < w; ++wi) {
                S* row = dst + ((ti * h + hi) * w + wi) * cols;
                for (std::int64_t ci = 0; ci < c; ++ci) {
                    for (int dt = -1; dt <= 1; ++dt) {
                        for (int dh = -1; dh <= 1; ++dh) {
                            for (int dw = -1; dw <= 1; ++dw) {
                                const std::int64_t tt = ti + dt, hh = hi + dh, ww = wi + dw;
                                const std::int64_t col =
                                    ci * 27 + (dt + 1) * 9 + (dh + 1) * 3 + (dw + 1);
                                if (tt >= 0 && tt < t && hh >= 0 && hh < h && ww >= 0 && ww < w) {
                                    row[col] = src[((tt * c + ci) * h + hh) * w + ww];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor vol2col3(const Tensor& x) {
    if (x.rank() != 4) fail("vol2col3 expects [T,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t t = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t rows = t * h * w, cols = c * 27;
    std::vector<float> out(static_cast<std::size_t>(rows * cols), 0.0f);
    vol2col_fwd(x.values().data(), out.data(), t, c, h, w);
    Tensor result = Tensor::from_data({rows, cols}, std::move(out));
    if (shadow_mode()) {
        std::vector<double> sh(static_cast<std::size_t>(rows * cols), 0.0);
        vol2col_fwd(OpAccess::shadow(x).data(), sh.data(), t, c, h, w);
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int nx = OpAccess::input_node(x);
        if (nx >= 0) {
            std::int64_t n = x.size();
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> gx(static_cast<std::size_t>(n), 0.0f);
                for (std::int64_t ti = 0; ti < t; ++ti) {
                    for (std::int64_t hi = 0; hi < h; ++hi) {
                        for (std::int64_t wi = 0; wi < w; ++wi) {
                            const float* row = og.data() + ((ti * h + hi) * w + wi) * cols;
                            for (std::int64_t ci = 0; ci < c; ++ci) {
                                for (int dt = -1; dt <= 1; ++dt) {
                                    for (int dh = -1; dh <= 1; ++dh) {
                                        for (int dw = -1; dw <= 1; ++dw) {
                                            const std::int64_t tt = ti + dt, hh = hi + dh,
                                                               ww = wi + dw;
                                            if (tt < 0 || tt >= t || hh < 0 || hh >= h || ww < 0 ||
                                                ww >= w) {
                                                continue;
                                            }
                                            const std::int64_t col = ci * 27 + (dt + 1) * 9 +
                                                                     (dh + 1) * 3 + (dw + 1);
                                            gx[static_cast<std::size_t>(
                                                ((tt * c + ci) * h + hh) * w + ww)] += row[col];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                st.accum(nx, gx.data(), n);
            });
        }
    }
    return result;
}

Tensor permute(const Tensor& a, std::span<const int> dims) {
    const int rank = a.rank();
    if (static_cast<int>(dims.size()) != rank) fail("permute dims size mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(rank), false);
    for (int d : dims) {
        if (d < 0 || d >= rank || seen[static_cast<std::size_t>(d)]) fail("permute dims invalid");
        seen[static_cast<std::size_t>(d)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) out_shape[static_cast<std::size_t>(i)] = a.dim(dims[i]);
    auto in_strides = row_major_strides(a.shape());
    std::vector<std::int64_t> strides(static_cast<std::size_t>(rank));
    for (int i = 0; i < rank; ++i) strides[static_cast<std::size_t>(i)] = in_strides[dims[i]];

    const std::int64_t n = a.size();
    std::vector<float> out(static_cast<std::size_t>(n));
    std::vector<std::int64_t> fwd_map(static_cast<std::size_t>(n));
    const float* src = a.values().data();
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t src_off = 0;
    for (std::int64_t o = 0;; ++o) {
        out[static_cast<std::size_t>(o)] = src[src_off];
        fwd_map[static_cast<std::size_t>(o)] = src_off;
        int d = rank - 1;
        for (; d >= 0; --d) {
            ++idx[static_cast<std::size_t>(d)];
            src_off += strides[static_cast<std::size_t>(d)];
            if (idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
            src_off -=
                strides[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
            idx[static_cast<std::size_t>(d)] = 0;
        }
        if (d < 0) break;
    }
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        std::vector<double> sh(static_cast<std::size_t>(n));
        for (std::int64_t o = 0; o < n; ++o) {
            sh[static_cast<std::size_t>(o)] =
                sa[static_cast<std::size_t>(fwd_map[static_cast<std::size_t>(o)])];
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    if (OpAccess::active()) {
        int na = OpAccess::input_node(a);
        if (na >= 0) {
            auto map_ptr = std::make_shared<std::vector<std::int64_t>>(std::move(fwd_map));
            OpAccess::record(result, [=](const std::vector<float>& og, TapeState& st) {
                std::vector<float> ga(static_cast<std::size_t>(n));
                for (std::int64_t o = 0; o < n; ++o) {
                    ga[static_cast<std::size_t>((*map_ptr)[static_cast<std::size_t>(o)])] =
                        og[static_cast<std::size_t>(o)];
                }
                st.accum(na, ga.data(), n);
            });
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

Tensor detach(const Tensor& a) {
    Tensor result =
        Tensor::from_data(a.shape(), std::vector<float>(a.values().begin(), a.values().end()));
    if (shadow_mode()) OpAccess::attach_shadow(result, OpAccess::shadow(a));
    return result;
}

Tensor max_last_detached(const Tensor& a) {
    const int rank = a.rank();
    const std::int64_t extent = a.dim(rank - 1);
    const std::int64_t rows = a.size() / extent;
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(rank - 1)] = 1;
    std::vector<float> out(static_cast<std::size_t>(rows));
    const float* p = a.values().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        float m = p[r * extent];
        for (std::int64_t k = 1; k < extent; ++k) m = std::max(m, p[r * extent + k]);
        out[static_cast<std::size_t>(r)] = m;
    }
    Tensor result = Tensor::from_data(std::move(out_shape), std::move(out));
    if (shadow_mode()) {
        const auto& sa = OpAccess::shadow(a);
        std::vector<double> sh(static_cast<std::size_t>(rows));
        for (std::int64_t r = 0; r < rows; ++r) {
            double m = sa[static_cast<std::size_t>(r * extent)];
            for (std::int64_t k = 1; k < extent; ++k) {
                m = std::max(m, sa[static_cast<std::size_t>(r * extent + k)]);
            }
            sh[static_cast<std::size_t>(r)] = m;
        }
        OpAccess::attach_shadow(result, std::move(sh));
    }
    return result;
}

Tensor ge_mask_detached(const Tensor& a, float threshold) {
    std::vector<float> out(static_cast<std::size_t>(a.size()));
    const float* p = a.values().data();
    for (std::int64_t i = 0; i < a.size(); ++i) {
        out[static_cast<std::size_t>(i)] = p[i] >= threshold ? 1.0f : 0.0f;
    }
    Tensor result = Tensor::from_data(a.shape(), std::move(out));
    if (shadow_mode()) {
        // The mask is semantics, not precision: both paths use the f32 decision.
        const auto v = result.values();
        OpAccess::attach_shadow(result, std::vector<double>(v.begin(), v.end()));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         float h) {
    Tensor analytic;
    {
        // the analytic side runs the plain f32 pipeline under test
        Tensor probe = x.clone();
        probe.set_requires_grad(true);
        GradTape tape;
        Tensor out = f(probe);
        if (out.size() != 1) fail("finite_diff_check: f must return a scalar");
        Tensor probes[] = {probe};
        analytic = tape.grad(out, probes)[0];
    }

    PrecisionScope precise;
    auto eval = [&](const Tensor& probe) -> double {
        Tensor out = f(probe);
        double v = out.scalar_value_f64();
        if (!std::isfinite(v)) fail("finite_diff_check: f returned a non-finite value");
        return v;
    };

    const float* ga = analytic.values().data();
    double max_err = 0.0;
    Tensor probe = x.clone();
    auto& data = probe.mutable_values();
    for (std::int64_t i = 0; i < x.size(); ++i) {
        const float orig = data[static_cast<std::size_t>(i)];
        data[static_cast<std::size_t>(i)] = orig + h;
        probe.mutable_values();  // drop the stale shadow after each write
        const double hi = data[static_cast<std::size_t>(i)];
        const double fp = eval(probe);
        data[static_cast<std::size_t>(i)] = orig - h;
        probe.mutable_values();
        const double lo = data[static_cast<std::size_t>(i)];
        const double fm = eval(probe);
        data[static_cast<std::size_t>(i)] = orig;
        probe.mutable_values();
        const double central = (fp - fm) / (hi - lo);
        const double err =
            std::abs(static_cast<double>(ga[i]) - central) / (std::abs(central) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

double finite_diff_check_param(const std::function<double()>& evaluate, Tensor param,
                               std::span<const float> analytic_grad, float h) {
    if (static_cast<std::int64_t>(analytic_grad.size()) != param.size()) {
        fail("finite_diff_check_param: gradient size does not match the parameter");
    }
    PrecisionScope precise;
    double max_err = 0.0;
    for (std::size_t i = 0; i < analytic_grad.size(); ++i) {
        auto& data = param.mutable_values();  // also invalidates cached shadows
        const float orig = data[i];
        data[i] = orig + h;
        const double hi = data[i];
        const double fp = evaluate();
        param.mutable_values()[i] = orig - h;
        const double lo = param.values()[i];
        const double fm = evaluate();
        param.mutable_values()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            fail("finite_diff_check_param: evaluation returned a non-finite value");
        }
        const double central = (fp - fm) / (hi - lo);
        const double err =
            std::abs(static_cast<double>(analytic_grad[i]) - central) / (std::abs(central) + 1e-8);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace m2repa
