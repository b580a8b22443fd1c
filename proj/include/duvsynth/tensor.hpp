#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <cblas.h>

#include "errors.hpp"
#include "rng.hpp"

extern "C" void openblas_set_num_threads(int);

namespace duvsynth {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shapes_equal(const Shape& a, const Shape& b, const char* op) {
    if (a != b)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    uint64_t id = 0;  // creation order; tape entries are topological by id
};

namespace detail {

inline std::atomic<uint64_t>& tensor_id_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}

inline void ensure_grad(TensorData& d) {
    if (d.grad.empty()) d.grad.assign(d.value.size(), 0.0);
}

}  // namespace detail

// Shared-handle dense tensor: 64-bit floats, row-major. Values are written
// once at creation; training code mutates leaf parameters only through the
// explicit data() pointer, outside any recording scope.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : d_(std::make_shared<TensorData>()) {
        for (int64_t dim : shape)
            if (dim <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        d_->shape = std::move(shape);
        d_->value.assign(shape_numel(d_->shape), fill);
        d_->requires_grad = requires_grad;
        d_->id = ++detail::tensor_id_counter();
    }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : d_(std::make_shared<TensorData>()) {
        for (int64_t dim : shape)
            if (dim <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_str(shape));
        d_->shape = std::move(shape);
        d_->value = std::move(data);
        d_->requires_grad = requires_grad;
        d_->id = ++detail::tensor_id_counter();
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t(std::move(shape));
        for (double& x : t.d_->value) x = mean + stddev * rng.normal();
        return t;
    }

    static Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : t.d_->value) x = rng.uniform(lo, hi);
        return t;
    }

    // Leaf parameter: requires_grad and Gaussian init.
    static Tensor param(Shape shape, Rng& rng, double stddev) {
        Tensor t = randn(std::move(shape), rng, stddev);
        t.d_->requires_grad = true;
        return t;
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int64_t dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }

    double* data() { return d_->value.data(); }
    const double* data() const { return d_->value.data(); }
    std::vector<double>& values() { return d_->value; }
    const std::vector<double>& values() const { return d_->value; }

    double item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, shape is " + shape_str(shape()));
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        d_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (d_->grad.empty()) throw StateError("tensor has no gradient; run backward() first");
        return d_->grad;
    }
    std::vector<double>& grad_mut() {
        detail::ensure_grad(*d_);
        return d_->grad;
    }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    bool all_finite() const {
        for (double x : d_->value)
            if (!std::isfinite(x)) return false;
        return true;
    }

    // Deep copy of values; the copy is a fresh leaf.
    Tensor clone() const {
        Tensor t(d_->shape, d_->value, d_->requires_grad);
        return t;
    }

    uint64_t id() const { return d_->id; }
    const std::shared_ptr<TensorData>& impl() const { return d_; }

  private:
    std::shared_ptr<TensorData> d_;
};

inline void assert_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw ContractError(std::string(what) + ": non-finite values encountered");
}

/* ------------------------------------------------------------------ tape */

struct TapeEntry {
    std::shared_ptr<TensorData> out;
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::function<void()> backward;
};

// Ordered record of primitive ops. Define-by-run: entries are appended in
// execution order, which is topological by construction. One tape per
// thread; activate with TapeScope.
class GradTape {
  public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    size_t size() const { return entries_.size(); }
    const std::vector<TapeEntry>& entries() const { return entries_; }

    void record(TapeEntry e) { entries_.push_back(std::move(e)); }

    // Seeds d(loss)/d(loss) = 1 and sweeps the record once, in reverse.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss, shape is " + shape_str(loss.shape()));
        bool reachable = false;
        for (const auto& e : entries_)
            if (e.out == loss.impl()) reachable = true;
        if (!reachable) throw ContractError("backward(): loss tensor was not produced on this tape");
        detail::ensure_grad(*loss.impl());
        loss.impl()->grad[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->out->grad.empty()) continue;  // nothing flowed into this op
            it->backward();
        }
    }

    static GradTape*& active_slot() {
        thread_local GradTape* active = nullptr;
        return active;
    }
    static GradTape* active() { return active_slot(); }

  private:
    std::vector<TapeEntry> entries_;
};

// RAII activation of a fresh tape on the current thread.
class TapeScope {
  public:
    TapeScope() : prev_(GradTape::active_slot()) { GradTape::active_slot() = &tape_; }
    ~TapeScope() { GradTape::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    GradTape& tape() { return tape_; }

  private:
    GradTape tape_;
    GradTape* prev_;
};

// Suspends recording (teacher forwards, sampling, metric computation).
class NoGradScope {
  public:
    NoGradScope() : prev_(GradTape::active_slot()) { GradTape::active_slot() = nullptr; }
    ~NoGradScope() { GradTape::active_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

  private:
    GradTape* prev_;
};

inline void backward(const Tensor& loss) {
    GradTape* t = GradTape::active();
    if (!t) throw StateError("backward(): no active GradTape on this thread");
    t->backward(loss);
}

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!GradTape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline void record(Tensor& out, std::initializer_list<const Tensor*> inputs, std::function<void()> bw) {
    out.set_requires_grad(true);
    TapeEntry e;
    e.out = out.impl();
    for (const Tensor* t : inputs) e.inputs.push_back(t->impl());
    e.backward = std::move(bw);
    GradTape::active()->record(std::move(e));
}

// Row-major dgemm: C = alpha * op(A) * op(B) + beta * C. BLAS is pinned to
// one thread: reductions stay deterministic and sample-level parallelism is
// not oversubscribed.
inline void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
                 const double* b, double beta, double* c) {
    static const bool blas_init = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)blas_init;
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
                static_cast<int>(trans_a ? m : k), b, static_cast<int>(trans_b ? k : n), beta, c,
                static_cast<int>(n));
}

}  // namespace detail

/* ------------------------------------------------------------ primitives */

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_shapes_equal(a.shape(), b.shape(), "add");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    if (detail::should_record({&a, &b})) {
        detail::record(out, {&a, &b}, [ad = a.impl(), bd = b.impl(), od = out.impl()]() {
            const auto& g = od->grad;
            if (ad->requires_grad) {
                detail::ensure_grad(*ad);
                for (size_t i = 0; i < g.size(); ++i) ad->grad[i] += g[i];
            }
            if (bd->requires_grad) {
                detail::ensure_grad(*bd);
                for (size_t i = 0; i < g.size(); ++i) bd->grad[i] += g[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_shapes_equal(a.shape(), b.shape(), "sub");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    if (detail::should_record({&a, &b})) {
        detail::record(out, {&a, &b}, [ad = a.impl(), bd = b.impl(), od = out.impl()]() {
            const auto& g = od->grad;
            if (ad->requires_grad) {
                detail::ensure_grad(*ad);
                for (size_t i = 0; i < g.size(); ++i) ad->grad[i] += g[i];
            }
            if (bd->requires_grad) {
                detail::ensure_grad(*bd);
                for (size_t i = 0; i < g.size(); ++i) bd->grad[i] -= g[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_shapes_equal(a.shape(), b.shape(), "mul");
    Tensor out(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    if (detail::should_record({&a, &b})) {
        detail::record(out, {&a, &b}, [ad = a.impl(), bd = b.impl(), od = out.impl()]() {
            const auto& g = od->grad;
            if (ad->requires_grad) {
                detail::ensure_grad(*ad);
                for (size_t i = 0; i < g.size(); ++i) ad->grad[i] += g[i] * bd->value[i];
            }
            if (bd->requires_grad) {
                detail::ensure_grad(*bd);
                for (size_t i = 0; i < g.size(); ++i) bd->grad[i] += g[i] * ad->value[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = c * pa[i];
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl(), c]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += c * od->grad[i];
        });
    }
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::exp(pa[i]);
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl()]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * od->value[i];
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl()]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) {
                double s = od->value[i];
                ad->grad[i] += od->grad[i] * s * (1.0 - s);
            }
        });
    }
    return out;
}

namespace detail {
inline constexpr double kGeluA = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluB = 0.044715;
inline constexpr double kProbClamp = 1e-12;
}  // namespace detail

// tanh-approximation GELU, as used by the transformer blocks.
inline Tensor gelu(const Tensor& a) {
    constexpr double kA = detail::kGeluA;
    constexpr double kB = detail::kGeluB;
    Tensor out(a.shape());
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = pa[i];
        po[i] = 0.5 * x * (1.0 + std::tanh(kA * (x + kB * x * x * x)));
    }
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl()]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) {
                double x = ad->value[i];
                double u = detail::kGeluA * (x + detail::kGeluB * x * x * x);
                double t = std::tanh(u);
                double du = detail::kGeluA * (1.0 + 3.0 * detail::kGeluB * x * x);
                double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                ad->grad[i] += od->grad[i] * d;
            }
        });
    }
    return out;
}

// x: [rows... x n], v: [n] broadcast-added over leading axes.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    if (v.rank() != 1) throw DimensionError("add_rowvec: v must be rank 1, got " + shape_str(v.shape()));
    int64_t n = v.numel();
    if (x.rank() < 1 || x.shape().back() != n)
        throw DimensionError("add_rowvec: trailing axis of x " + shape_str(x.shape()) + " != " + std::to_string(n));
    int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    const double* px = x.data();
    const double* pv = v.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) po[r * n + j] = px[r * n + j] + pv[j];
    if (detail::should_record({&x, &v})) {
        detail::record(out, {&x, &v}, [xd = x.impl(), vd = v.impl(), od = out.impl(), rows, n]() {
            const auto& g = od->grad;
            if (xd->requires_grad) {
                detail::ensure_grad(*xd);
                for (size_t i = 0; i < g.size(); ++i) xd->grad[i] += g[i];
            }
            if (vd->requires_grad) {
                detail::ensure_grad(*vd);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < n; ++j) vd->grad[j] += g[r * n + j];
            }
        });
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out(Shape{m, n});
    detail::gemm(false, false, m, n, k, 1.0, a.data(), b.data(), 0.0, out.data());
    if (detail::should_record({&a, &b})) {
        detail::record(out, {&a, &b}, [ad = a.impl(), bd = b.impl(), od = out.impl(), m, n, k]() {
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                detail::ensure_grad(*ad);
                // dA += dOut * B^T
                detail::gemm(false, true, m, k, n, 1.0, g, bd->value.data(), 1.0, ad->grad.data());
            }
            if (bd->requires_grad) {
                detail::ensure_grad(*bd);
                // dB += A^T * dOut
                detail::gemm(true, false, k, n, m, 1.0, ad->value.data(), g, 1.0, bd->grad.data());
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expects rank-2 tensor, got " + shape_str(a.shape()));
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{n, m});
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl(), m, n]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ad->grad[i * n + j] += od->grad[j * m + i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel())
        throw DimensionError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                             shape_str(new_shape));
    Tensor out(new_shape, a.values());
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl()]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor concat(const Tensor& a, const Tensor& b, int axis) {
    if (a.rank() != b.rank()) throw DimensionError("concat: rank mismatch");
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) throw ParameterError("concat: axis out of range");
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw DimensionError("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                 " differ off-axis");
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] += b.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    int64_t wa = a.dim(axis) * inner, wb = b.dim(axis) * inner;
    Tensor out(os);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        std::memcpy(po + o * (wa + wb), pa + o * wa, static_cast<size_t>(wa) * sizeof(double));
        std::memcpy(po + o * (wa + wb) + wa, pb + o * wb, static_cast<size_t>(wb) * sizeof(double));
    }
    if (detail::should_record({&a, &b})) {
        detail::record(out, {&a, &b}, [ad = a.impl(), bd = b.impl(), od = out.impl(), outer, wa, wb]() {
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                detail::ensure_grad(*ad);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < wa; ++i) ad->grad[o * wa + i] += g[o * (wa + wb) + i];
            }
            if (bd->requires_grad) {
                detail::ensure_grad(*bd);
                for (int64_t o = 0; o < outer; ++o)
                    for (int64_t i = 0; i < wb; ++i) bd->grad[o * wb + i] += g[o * (wa + wb) + wa + i];
            }
        });
    }
    return out;
}

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
    if (axis < 0) axis += a.rank();
    if (axis < 0 || axis >= a.rank()) throw ParameterError("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw ParameterError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                             ") out of bounds for axis size " + std::to_string(a.dim(axis)));
    Shape os = a.shape();
    os[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    int64_t wa = a.dim(axis) * inner, wo = len * inner, off = start * inner;
    Tensor out(os);
    const double* pa = a.data();
    double* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * wo, pa + o * wa + off, static_cast<size_t>(wo) * sizeof(double));
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl(), outer, wa, wo, off]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < wo; ++i) ad->grad[o * wa + off + i] += od->grad[o * wo + i];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.data();
    for (int64_t i = 0; i < a.numel(); ++i) s += pa[i];
    Tensor out = Tensor::scalar(s);
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl()]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            double g = od->grad[0];
            for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) s += pa[i];
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    if (detail::should_record({&a})) {
        detail::record(out, {&a}, [ad = a.impl(), od = out.impl(), n]() {
            if (!ad->requires_grad) return;
            detail::ensure_grad(*ad);
            double g = od->grad[0] / static_cast<double>(n);
            for (size_t i = 0; i < ad->grad.size(); ++i) ad->grad[i] += g;
        });
    }
    return out;
}

// Temperature softmax over the trailing axis, stabilized by max-subtraction.
inline Tensor softmax_temperature(const Tensor& logits, double tau) {
    if (tau <= 0.0) throw ParameterError("softmax_temperature: tau must be positive, got " + std::to_string(tau));
    int64_t v = logits.shape().back();
    int64_t rows = logits.numel() / v;
    Tensor out(logits.shape());
    const double* pl = logits.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* z = pl + r * v;
        double* y = po + r * v;
        double zmax = z[0];
        for (int64_t j = 1; j < v; ++j) zmax = std::max(zmax, z[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) {
            y[j] = std::exp((z[j] - zmax) / tau);
            denom += y[j];
        }
        for (int64_t j = 0; j < v; ++j) y[j] /= denom;
    }
    if (detail::should_record({&logits})) {
        detail::record(out, {&logits}, [ld = logits.impl(), od = out.impl(), rows, v, tau]() {
            if (!ld->requires_grad) return;
            detail::ensure_grad(*ld);
            for (int64_t r = 0; r < rows; ++r) {
                const double* y = od->value.data() + r * v;
                const double* g = od->grad.data() + r * v;
                double dot = 0.0;
                for (int64_t j = 0; j < v; ++j) dot += g[j] * y[j];
                for (int64_t j = 0; j < v; ++j) ld->grad[r * v + j] += y[j] * (g[j] - dot) / tau;
            }
        });
    }
    return out;
}

// H(a, b) = -sum_v a_v log b_v over probability vectors; b clamped at 1e-12
// before the log.
inline Tensor cross_entropy(const Tensor& target_probs, const Tensor& pred_probs) {
    check_shapes_equal(target_probs.shape(), pred_probs.shape(), "cross_entropy");
    constexpr double kClamp = detail::kProbClamp;
    constexpr double kNormTol = 1e-6;
    double st = 0.0, sp = 0.0;
    const double* pt = target_probs.data();
    const double* pp = pred_probs.data();
    int64_t n = target_probs.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (pt[i] < 0.0 || pp[i] < 0.0) throw ContractError("cross_entropy: negative probability component");
        st += pt[i];
        sp += pp[i];
    }
    if (std::abs(st - 1.0) > kNormTol || std::abs(sp - 1.0) > kNormTol)
        throw ContractError("cross_entropy: inputs are not normalized probability vectors");
    double h = 0.0;
    for (int64_t i = 0; i < n; ++i) h -= pt[i] * std::log(std::max(pp[i], kClamp));
    Tensor out = Tensor::scalar(h);
    if (detail::should_record({&target_probs, &pred_probs})) {
        detail::record(out, {&target_probs, &pred_probs},
                       [td = target_probs.impl(), pd = pred_probs.impl(), od = out.impl(), n]() {
                           double g = od->grad[0];
                           if (td->requires_grad) {
                               detail::ensure_grad(*td);
                               for (int64_t i = 0; i < n; ++i)
                                   td->grad[i] -= g * std::log(std::max(pd->value[i], detail::kProbClamp));
                           }
                           if (pd->requires_grad) {
                               detail::ensure_grad(*pd);
                               for (int64_t i = 0; i < n; ++i) {
                                   if (pd->value[i] > detail::kProbClamp)
                                       pd->grad[i] -= g * td->value[i] / pd->value[i];
                               }
                           }
                       });
    }
    return out;
}

// Layer normalization over the trailing axis with learned gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    int64_t n = x.shape().back();
    if (gamma.rank() != 1 || gamma.numel() != n || beta.rank() != 1 || beta.numel() != n)
        throw DimensionError("layer_norm: gamma/beta must be rank-1 of size " + std::to_string(n));
    int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    auto mean_v = std::make_shared<std::vector<double>>(rows);
    auto rstd_v = std::make_shared<std::vector<double>>(rows);
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    double* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double m = 0.0;
        for (int64_t j = 0; j < n; ++j) m += xr[j];
        m /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= static_cast<double>(n);
        double rs = 1.0 / std::sqrt(var + eps);
        (*mean_v)[r] = m;
        (*rstd_v)[r] = rs;
        for (int64_t j = 0; j < n; ++j) po[r * n + j] = pg[j] * (xr[j] - m) * rs + pb[j];
    }
    if (detail::should_record({&x, &gamma, &beta})) {
        detail::record(out, {&x, &gamma, &beta},
                       [xd = x.impl(), gd = gamma.impl(), bd = beta.impl(), od = out.impl(), mean_v, rstd_v, rows,
                        n]() {
                           for (int64_t r = 0; r < rows; ++r) {
                               const double* xr = xd->value.data() + r * n;
                               const double* g = od->grad.data() + r * n;
                               double m = (*mean_v)[r], rs = (*rstd_v)[r];
                               if (gd->requires_grad) {
                                   detail::ensure_grad(*gd);
                                   for (int64_t j = 0; j < n; ++j) gd->grad[j] += g[j] * (xr[j] - m) * rs;
                               }
                               if (bd->requires_grad) {
                                   detail::ensure_grad(*bd);
                                   for (int64_t j = 0; j < n; ++j) bd->grad[j] += g[j];
                               }
                               if (xd->requires_grad) {
                                   detail::ensure_grad(*xd);
                                   double mean_dg = 0.0, mean_dgx = 0.0;
                                   for (int64_t j = 0; j < n; ++j) {
                                       double dg = g[j] * gd->value[j];
                                       double xh = (xr[j] - m) * rs;
                                       mean_dg += dg;
                                       mean_dgx += dg * xh;
                                   }
                                   mean_dg /= static_cast<double>(n);
                                   mean_dgx /= static_cast<double>(n);
                                   for (int64_t j = 0; j < n; ++j) {
                                       double dg = g[j] * gd->value[j];
                                       double xh = (xr[j] - m) * rs;
                                       xd->grad[r * n + j] += rs * (dg - mean_dg - xh * mean_dgx);
                                   }
                               }
                           }
                       });
    }
    return out;
}

namespace detail {

// im2col for channel-last [H x W x C] input; col is [Ho*Wo x kh*kw*C].
inline void im2col(const double* x, int64_t h, int64_t w, int64_t c, int64_t kh, int64_t kw, int64_t stride,
                   int64_t pad, int64_t ho, int64_t wo, double* col) {
    int64_t k = kh * kw * c;
    for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
            double* dst = col + (oy * wo + ox) * k;
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = oy * stride + ky - pad;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride + kx - pad;
                    double* d = dst + (ky * kw + kx) * c;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill(d, d + c, 0.0);
                    } else {
                        std::memcpy(d, x + (iy * w + ix) * c, static_cast<size_t>(c) * sizeof(double));
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, int64_t h, int64_t w, int64_t c, int64_t kh, int64_t kw, int64_t stride,
                       int64_t pad, int64_t ho, int64_t wo, double* dx) {
    int64_t k = kh * kw * c;
    for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
            const double* src = col + (oy * wo + ox) * k;
            for (int64_t ky = 0; ky < kh; ++ky) {
                int64_t iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    int64_t ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= w) continue;
                    const double* s = src + (ky * kw + kx) * c;
                    double* d = dx + (iy * w + ix) * c;
                    for (int64_t ci = 0; ci < c; ++ci) d[ci] += s[ci];
                }
            }
        }
    }
}

}  // namespace detail

// 2-D convolution on channel-last input [H x W x Cin] with weights
// [kh x kw x Cin x Cout] and bias [Cout]. Zero padding.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad) {
    if (x.rank() != 3 || w.rank() != 4)
        throw DimensionError("conv2d: expects x[HxWxC], w[khxkwxCinxCout], got " + shape_str(x.shape()) + ", " +
                             shape_str(w.shape()));
    if (stride != 1 && stride != 2) throw ParameterError("conv2d: stride must be 1 or 2");
    int64_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2);
    int64_t kh = w.dim(0), kw = w.dim(1), wcin = w.dim(2), cout = w.dim(3);
    if (wcin != cin) throw DimensionError("conv2d: input channels disagree");
    if (b.rank() != 1 || b.numel() != cout) throw DimensionError("conv2d: bias must be [Cout]");
    int64_t ho = (h + 2 * pad - kh) / stride + 1;
    int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: output would be empty");
    int64_t k = kh * kw * cin;
    auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(ho * wo * k));
    detail::im2col(x.data(), h, wd, cin, kh, kw, stride, pad, ho, wo, col->data());
    Tensor out(Shape{ho, wo, cout});
    detail::gemm(false, false, ho * wo, cout, k, 1.0, col->data(), w.data(), 0.0, out.data());
    {
        double* po = out.data();
        const double* pb = b.data();
        for (int64_t r = 0; r < ho * wo; ++r)
            for (int64_t j = 0; j < cout; ++j) po[r * cout + j] += pb[j];
    }
    if (detail::should_record({&x, &w, &b})) {
        detail::record(out, {&x, &w, &b},
                       [xd = x.impl(), wdp = w.impl(), bd = b.impl(), od = out.impl(), col, h, wd, cin, kh, kw,
                        stride, pad, ho, wo, cout, k]() {
                           const double* g = od->grad.data();
                           if (bd->requires_grad) {
                               detail::ensure_grad(*bd);
                               for (int64_t r = 0; r < ho * wo; ++r)
                                   for (int64_t j = 0; j < cout; ++j) bd->grad[j] += g[r * cout + j];
                           }
                           if (wdp->requires_grad) {
                               detail::ensure_grad(*wdp);
                               // dW += col^T * dOut
                               detail::gemm(true, false, k, cout, ho * wo, 1.0, col->data(), g, 1.0,
                                            wdp->grad.data());
                           }
                           if (xd->requires_grad) {
                               detail::ensure_grad(*xd);
                               std::vector<double> dcol(static_cast<size_t>(ho * wo * k));
                               // dcol = dOut * W^T
                               detail::gemm(false, true, ho * wo, k, cout, 1.0, g, wdp->value.data(), 0.0,
                                            dcol.data());
                               detail::col2im_add(dcol.data(), h, wd, cin, kh, kw, stride, pad, ho, wo,
                                                  xd->grad.data());
                           }
                       });
    }
    return out;
}

// Nearest-neighbor 2x upsample of [H x W x C].
inline Tensor upsample_nearest_2x(const Tensor& x) {
    if (x.rank() != 3) throw DimensionError("upsample_nearest_2x: expects [HxWxC], got " + shape_str(x.shape()));
    int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor out(Shape{2 * h, 2 * w, c});
    const double* px = x.data();
    double* po = out.data();
    for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xw = 0; xw < 2 * w; ++xw)
            std::memcpy(po + (y * 2 * w + xw) * c, px + ((y / 2) * w + (xw / 2)) * c,
                        static_cast<size_t>(c) * sizeof(double));
    if (detail::should_record({&x})) {
        detail::record(out, {&x}, [xd = x.impl(), od = out.impl(), h, w, c]() {
            if (!xd->requires_grad) return;
            detail::ensure_grad(*xd);
            for (int64_t y = 0; y < 2 * h; ++y)
                for (int64_t xw = 0; xw < 2 * w; ++xw)
                    for (int64_t ci = 0; ci < c; ++ci)
                        xd->grad[((y / 2) * w + (xw / 2)) * c + ci] += od->grad[(y * 2 * w + xw) * c + ci];
        });
    }
    return out;
}

// softmax(Q K^T / sqrt(d)) V, composed from recorded primitives so gradients
// flow through all three inputs.
inline Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("attention: Q, K, V must be rank-2");
    if (q.dim(1) != k.dim(1)) throw DimensionError("attention: Q and K widths disagree");
    if (k.dim(0) != v.dim(0)) throw DimensionError("attention: K and V row counts disagree");
    Tensor logits = matmul(q, transpose(k));
    Tensor weights = softmax_temperature(logits, std::sqrt(static_cast<double>(q.dim(1))));
    return matmul(weights, v);
}

// Sinusoidal timestep embedding, dim must be even. Pure function of t; not a
// gradient path.
inline Tensor timestep_embedding(int64_t t, int64_t dim) {
    if (dim <= 0 || dim % 2 != 0) throw ParameterError("timestep_embedding: dim must be positive and even");
    Tensor out(Shape{dim});
    double* po = out.data();
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        po[i] = std::sin(static_cast<double>(t) * freq);
        po[half + i] = std::cos(static_cast<double>(t) * freq);
    }
    return out;
}

}  // namespace duvsynth
