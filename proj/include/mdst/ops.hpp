#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mdst/errors.hpp"
#include "mdst/random.hpp"
#include "mdst/tensor.hpp"

namespace mdst {

namespace detail {

template <class... T>
bool tracking(const T&... ts) {
    return active_tape() != nullptr && (ts.requires_grad() || ...);
}

inline void record(Tensor& out, const char* op, Tape::Rule rule) {
    out.set_requires_grad(true);
    active_tape()->record(op, std::move(rule));
}

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

inline Tensor empty_like(const Shape& shape) { return Tensor::zeros(shape); }

// Maps output positions of a broadcast binary op back to operand positions.
struct BroadcastPlan {
    enum class Kind { Same, ScalarB, ScalarA, General } kind = Kind::Same;
    Shape out;
    std::vector<std::uint32_t> ia, ib;

    std::size_t a(std::size_t i) const {
        switch (kind) {
            case Kind::Same:
            case Kind::ScalarB: return i;
            case Kind::ScalarA: return 0;
            default: return ia[i];
        }
    }
    std::size_t b(std::size_t i) const {
        switch (kind) {
            case Kind::Same:
            case Kind::ScalarA: return i;
            case Kind::ScalarB: return 0;
            default: return ib[i];
        }
    }
};

inline BroadcastPlan broadcast_plan(const Shape& sa, const Shape& sb, const char* op) {
    BroadcastPlan p;
    if (sa == sb) {
        p.kind = BroadcastPlan::Kind::Same;
        p.out = sa;
        return p;
    }
    if (numel(sb) == 1 && sb.size() <= sa.size()) {
        p.kind = BroadcastPlan::Kind::ScalarB;
        p.out = sa;
        return p;
    }
    if (numel(sa) == 1 && sa.size() <= sb.size()) {
        p.kind = BroadcastPlan::Kind::ScalarA;
        p.out = sb;
        return p;
    }
    p.kind = BroadcastPlan::Kind::General;
    const std::size_t r = std::max(sa.size(), sb.size());
    Shape a(r, 1), b(r, 1);
    std::copy(sa.begin(), sa.end(), a.begin() + static_cast<std::ptrdiff_t>(r - sa.size()));
    std::copy(sb.begin(), sb.end(), b.begin() + static_cast<std::ptrdiff_t>(r - sb.size()));
    p.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + to_string(sa) + " with " + to_string(sb));
        }
        p.out[i] = std::max(a[i], b[i]);
    }
    std::vector<std::size_t> stride_a(r), stride_b(r);
    std::size_t sa_acc = 1, sb_acc = 1;
    for (std::size_t i = r; i-- > 0;) {
        stride_a[i] = a[i] == 1 ? 0 : sa_acc;
        stride_b[i] = b[i] == 1 ? 0 : sb_acc;
        sa_acc *= a[i];
        sb_acc *= b[i];
    }
    const std::size_t n = numel(p.out);
    p.ia.resize(n);
    p.ib.resize(n);
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < n; ++i) {
        p.ia[i] = static_cast<std::uint32_t>(oa);
        p.ib[i] = static_cast<std::uint32_t>(ob);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            oa += stride_a[d];
            ob += stride_b[d];
            if (idx[d] < p.out[d]) break;
            oa -= stride_a[d] * idx[d];
            ob -= stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
    return p;
}

template <class F, class D>
Tensor unary(const Tensor& x, const char* name, F f, D deriv) {
    Tensor out = empty_like(x.shape());
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = f(xv[i]);
    check_finite(out, name);
    if (tracking(x)) {
        record(out, name, [xs = x.storage(), os = out.storage(), deriv] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < xs->value.size(); ++i) {
                xs->grad[i] += os->grad[i] * deriv(xs->value[i], os->value[i]);
            }
        });
    }
    return out;
}

// deriv_a / deriv_b receive (a, b, out) and return the partial derivative.
template <class F, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA deriv_a, DB deriv_b) {
    auto plan = std::make_shared<BroadcastPlan>(broadcast_plan(a.shape(), b.shape(), name));
    Tensor out = empty_like(plan->out);
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[plan->a(i)], bv[plan->b(i)]);
    check_finite(out, name);
    if (tracking(a, b)) {
        record(out, name, [as = a.storage(), bs = b.storage(), os = out.storage(), plan, deriv_a, deriv_b] {
            if (os->grad.empty()) return;
            const bool ga = as->requires_grad;
            const bool gb = bs->requires_grad;
            if (ga) as->ensure_grad();
            if (gb) bs->ensure_grad();
            for (std::size_t i = 0; i < os->value.size(); ++i) {
                const auto ia = plan->a(i);
                const auto ib = plan->b(i);
                const double g = os->grad[i];
                if (ga) as->grad[ia] += g * deriv_a(as->value[ia], bs->value[ib], os->value[i]);
                if (gb) bs->grad[ib] += g * deriv_b(as->value[ia], bs->value[ib], os->value[i]);
            }
        });
    }
    return out;
}

// View of a tensor as [outer, n, inner] around one axis.
struct AxisView {
    std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    v.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape r = s;
    if (keepdim) {
        r[axis] = 1;
    } else {
        r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
        if (r.empty()) r.push_back(1);
    }
    return r;
}

inline double sigmoid_scalar(double x) {
    if (x >= 0) {
        const double z = std::exp(-x);
        return 1.0 / (1.0 + z);
    }
    const double z = std::exp(x);
    return z / (1.0 + z);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(
        x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
    return detail::unary(
        x, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// c - x
inline Tensor rsub_scalar(double c, const Tensor& x) {
    return detail::unary(
        x, "rsub_scalar", [c](double v) { return c - v; }, [](double, double) { return -1.0; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor exp(const Tensor& x) {
    return detail::unary(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

inline constexpr double kLogClamp = 1e-8;

// Natural log of max(x, 1e-8). NaN inputs are rejected.
inline Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (std::isnan(v)) throw NumericError("log of NaN");
    }
    return detail::unary(
        x, "log", [](double v) { return std::log(std::max(v, kLogClamp)); },
        [](double v, double) { return v > kLogClamp ? 1.0 / v : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid", [](double v) { return detail::sigmoid_scalar(v); },
        [](double, double o) { return o * (1.0 - o); });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        x, "relu", [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor softplus(const Tensor& x) {
    return detail::unary(
        x, "softplus", [](double v) { return v > 30 ? v : std::log1p(std::exp(v)); },
        [](double v, double) { return detail::sigmoid_scalar(v); });
}

inline Tensor square(const Tensor& x) {
    return detail::unary(
        x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
    return detail::unary(
        x, "clamp", [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(double c, const Tensor& a) { return rsub_scalar(c, a); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Spike nonlinearity

enum class SpikeForward { Step, Surrogate };

inline SpikeForward& spike_forward_mode() {
    thread_local SpikeForward mode = SpikeForward::Step;
    return mode;
}

// Replaces the hard step by its smooth surrogate in the forward pass so that
// finite differences see the same function the backward pass differentiates.
class SurrogateForwardScope {
   public:
    SurrogateForwardScope() : prev_(spike_forward_mode()) { spike_forward_mode() = SpikeForward::Surrogate; }
    ~SurrogateForwardScope() { spike_forward_mode() = prev_; }
    SurrogateForwardScope(const SurrogateForwardScope&) = delete;
    SurrogateForwardScope& operator=(const SurrogateForwardScope&) = delete;

   private:
    SpikeForward prev_;
};

inline constexpr double kDefaultSurrogateSlope = 4.0;

// Forward: 1 where x >= 0, else 0. Backward: d/dx sigmoid(alpha * x).
inline Tensor heaviside(const Tensor& x, double alpha = kDefaultSurrogateSlope) {
    const bool smooth = spike_forward_mode() == SpikeForward::Surrogate;
    return detail::unary(
        x, "heaviside",
        [alpha, smooth](double v) {
            if (smooth) return detail::sigmoid_scalar(alpha * v);
            return v >= 0.0 ? 1.0 : 0.0;
        },
        [alpha](double v, double) {
            const double s = detail::sigmoid_scalar(alpha * v);
            return alpha * s * (1.0 - s);
        });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [..., m, k] x [..., k, n]. Batch extents must agree, or one side is a plain
// matrix shared across the other's batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    if (k != k2) {
        throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Shape batch;
    if (batch_a == batch_b || batch_b.empty()) {
        batch = batch_a;
    } else if (batch_a.empty()) {
        batch = batch_b;
    } else {
        throw DimensionError("matmul batch extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t nb = numel(batch);
    const bool a_batched = !batch_a.empty();
    const bool b_batched = !batch_b.empty();
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out = detail::empty_like(out_shape);
    {
        const double* ap = a.values().data();
        const double* bp = b.values().data();
        double* op = out.mutable_values().data();
        for (std::size_t t = 0; t < nb; ++t) {
            const double* A = ap + (a_batched ? t * m * k : 0);
            const double* B = bp + (b_batched ? t * k * n : 0);
            double* C = op + t * m * n;
            for (std::size_t i = 0; i < m; ++i) {
                double* crow = C + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    const double* brow = B + p * n;
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
    detail::check_finite(out, "matmul");
    if (detail::tracking(a, b)) {
        detail::record(out, "matmul",
                       [as = a.storage(), bs = b.storage(), os = out.storage(), m, k, n, nb, a_batched, b_batched] {
                           if (os->grad.empty()) return;
                           const bool ga = as->requires_grad, gb = bs->requires_grad;
                           if (ga) as->ensure_grad();
                           if (gb) bs->ensure_grad();
                           for (std::size_t t = 0; t < nb; ++t) {
                               const double* A = as->value.data() + (a_batched ? t * m * k : 0);
                               const double* B = bs->value.data() + (b_batched ? t * k * n : 0);
                               const double* G = os->grad.data() + t * m * n;
                               if (ga) {
                                   double* dA = as->grad.data() + (a_batched ? t * m * k : 0);
                                   for (std::size_t i = 0; i < m; ++i) {
                                       for (std::size_t p = 0; p < k; ++p) {
                                           double acc = 0.0;
                                           const double* brow = B + p * n;
                                           const double* grow = G + i * n;
                                           for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                           dA[i * k + p] += acc;
                                       }
                                   }
                               }
                               if (gb) {
                                   double* dB = bs->grad.data() + (b_batched ? t * k * n : 0);
                                   for (std::size_t i = 0; i < m; ++i) {
                                       const double* grow = G + i * n;
                                       for (std::size_t p = 0; p < k; ++p) {
                                           const double av = A[i * k + p];
                                           double* drow = dB + p * n;
                                           for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                                       }
                                   }
                               }
                           }
                       });
    }
    return out;
}

// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + to_string(x.shape()));
    const std::size_t m = x.dim(-2), n = x.dim(-1);
    const std::size_t nb = x.size() / (m * n);
    Shape s = x.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    Tensor out = detail::empty_like(s);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t t = 0; t < nb; ++t) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) ov[t * m * n + j * m + i] = xv[t * m * n + i * n + j];
        }
    }
    if (detail::tracking(x)) {
        detail::record(out, "transpose", [xs = x.storage(), os = out.storage(), m, n, nb] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t t = 0; t < nb; ++t) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        xs->grad[t * m * n + i * n + j] += os->grad[t * m * n + j * m + i];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw DimensionError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    Tensor out(std::move(shape), x.to_vector());
    if (detail::tracking(x)) {
        detail::record(out, "reshape", [xs = x.storage(), os = out.storage()] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[i] += os->grad[i];
        });
    }
    return out;
}

inline Tensor slice(const Tensor& x, std::ptrdiff_t axis, std::size_t start, std::size_t length) {
    const auto ax = x.normalize_axis(axis);
    if (length == 0 || start + length > x.shape()[ax]) {
        throw IndexError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                         to_string(x.shape()));
    }
    const auto v = detail::axis_view(x.shape(), ax);
    Shape s = x.shape();
    s[ax] = length;
    Tensor out = detail::empty_like(s);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t o = 0; o < v.outer; ++o) {
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.n + start) * v.inner), length * v.inner,
                    ov.begin() + static_cast<std::ptrdiff_t>(o * length * v.inner));
    }
    if (detail::tracking(x)) {
        detail::record(out, "slice", [xs = x.storage(), os = out.storage(), v, start, length] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < length * v.inner; ++i) {
                    xs->grad[(o * v.n + start) * v.inner + i] += os->grad[o * length * v.inner + i];
                }
            }
        });
    }
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::ptrdiff_t axis) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    const auto ax = parts.front().normalize_axis(axis);
    Shape s = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = s;
        if (a.size() != b.size()) throw DimensionError("concat rank mismatch");
        a[ax] = b[ax] = 0;
        if (a != b) throw DimensionError("concat shape mismatch: " + to_string(p.shape()) + " vs " + to_string(s));
        total += p.shape()[ax];
    }
    s[ax] = total;
    Tensor out = detail::empty_like(s);
    const auto vo = detail::axis_view(s, ax);
    auto ov = out.mutable_values();
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[ax];
        auto pv = p.values();
        for (std::size_t o = 0; o < vo.outer; ++o) {
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * vo.inner), len * vo.inner,
                        ov.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * vo.inner));
        }
        offsets.push_back(offset);
        offset += len;
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::tracking(p);
    if (any) {
        std::vector<std::shared_ptr<detail::Storage>> stores;
        for (const auto& p : parts) stores.push_back(p.storage());
        detail::record(out, "concat", [stores, offsets, os = out.storage(), vo, total, ax] {
            if (os->grad.empty()) return;
            for (std::size_t pi = 0; pi < stores.size(); ++pi) {
                auto& ps = *stores[pi];
                if (!ps.requires_grad) continue;
                ps.ensure_grad();
                const std::size_t len = ps.shape[ax];
                for (std::size_t o = 0; o < vo.outer; ++o) {
                    for (std::size_t i = 0; i < len * vo.inner; ++i) {
                        ps.grad[o * len * vo.inner + i] += os->grad[(o * total + offsets[pi]) * vo.inner + i];
                    }
                }
            }
        });
    }
    return out;
}

// Gathers slices along axis 0.
inline Tensor index_select(const Tensor& x, const std::vector<std::size_t>& rows) {
    if (rows.empty()) throw DimensionError("index_select with no indices");
    const std::size_t n0 = x.dim(0);
    const std::size_t inner = x.size() / n0;
    Shape s = x.shape();
    s[0] = rows.size();
    Tensor out = detail::empty_like(s);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n0) throw IndexError("index_select row " + std::to_string(rows[r]) + " >= " + std::to_string(n0));
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * inner), inner,
                    ov.begin() + static_cast<std::ptrdiff_t>(r * inner));
    }
    if (detail::tracking(x)) {
        detail::record(out, "index_select", [xs = x.storage(), os = out.storage(), rows, inner] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t r = 0; r < rows.size(); ++r) {
                for (std::size_t i = 0; i < inner; ++i) xs->grad[rows[r] * inner + i] += os->grad[r * inner + i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor out = Tensor::scalar(acc);
    detail::check_finite(out, "sum");
    if (detail::tracking(x)) {
        detail::record(out, "sum_all", [xs = x.storage(), os = out.storage()] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (auto& g : xs->grad) g += os->grad[0];
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.size())); }

inline Tensor sum(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
    const auto ax = x.normalize_axis(axis);
    const auto v = detail::axis_view(x.shape(), ax);
    Tensor out = detail::empty_like(detail::reduced_shape(x.shape(), ax, keepdim));
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t k = 0; k < v.n; ++k) {
            for (std::size_t i = 0; i < v.inner; ++i) ov[o * v.inner + i] += xv[(o * v.n + k) * v.inner + i];
        }
    }
    detail::check_finite(out, "sum");
    if (detail::tracking(x)) {
        detail::record(out, "sum", [xs = x.storage(), os = out.storage(), v] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t k = 0; k < v.n; ++k) {
                    for (std::size_t i = 0; i < v.inner; ++i) {
                        xs->grad[(o * v.n + k) * v.inner + i] += os->grad[o * v.inner + i];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor mean(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
    const auto n = x.dim(axis);
    return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

// Average pooling over one axis.
inline Tensor mean_pool(const Tensor& x, std::ptrdiff_t axis) { return mean(x, axis, false); }

namespace detail {

template <class Better>
Tensor extremum(const Tensor& x, std::ptrdiff_t axis, bool keepdim, const char* name, Better better) {
    const auto ax = x.normalize_axis(axis);
    const auto v = axis_view(x.shape(), ax);
    Tensor out = empty_like(reduced_shape(x.shape(), ax, keepdim));
    std::vector<std::size_t> arg(v.outer * v.inner);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            std::size_t best = o * v.n * v.inner + i;
            for (std::size_t k = 1; k < v.n; ++k) {
                const std::size_t pos = (o * v.n + k) * v.inner + i;
                if (better(xv[pos], xv[best])) best = pos;
            }
            arg[o * v.inner + i] = best;
            ov[o * v.inner + i] = xv[best];
        }
    }
    if (tracking(x)) {
        record(out, name, [xs = x.storage(), os = out.storage(), arg = std::move(arg)] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t j = 0; j < arg.size(); ++j) xs->grad[arg[j]] += os->grad[j];
        });
    }
    return out;
}

}  // namespace detail

inline Tensor max(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
    return detail::extremum(x, axis, keepdim, "max", [](double a, double b) { return a > b; });
}

inline Tensor min(const Tensor& x, std::ptrdiff_t axis, bool keepdim = false) {
    return detail::extremum(x, axis, keepdim, "min", [](double a, double b) { return a < b; });
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& x) {
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.size() / n;
    Tensor out = detail::empty_like(x.shape());
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double* yr = ov.data() + r * n;
        const double mx = *std::max_element(xr, xr + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
    }
    if (detail::tracking(x)) {
        detail::record(out, "softmax", [xs = x.storage(), os = out.storage(), n, rows] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = os->value.data() + r * n;
                const double* g = os->grad.data() + r * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < n; ++j) xs->grad[r * n + j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

// Attention-style scaling without softmax normalization.
inline Tensor softmax_free_scale(const Tensor& x, double s) { return scale(x, s); }

inline constexpr double kNormEpsilon = 1e-5;

// Normalizes the last axis to zero mean / unit variance, then applies the
// optional per-feature gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain = {}, const Tensor& bias = {}, double eps = kNormEpsilon) {
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.size() / n;
    if (gain.defined() && gain.size() != n) throw DimensionError("layer_norm gain width mismatch");
    if (bias.defined() && bias.size() != n) throw DimensionError("layer_norm bias width mismatch");
    Tensor out = detail::empty_like(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mu) * is;
            (*xhat)[r * n + j] = h;
            double y = h;
            if (gain.defined()) y *= gain.values()[j];
            if (bias.defined()) y += bias.values()[j];
            ov[r * n + j] = y;
        }
    }
    detail::check_finite(out, "layer_norm");
    const bool tg = gain.defined() && detail::tracking(gain);
    const bool tb = bias.defined() && detail::tracking(bias);
    if (detail::tracking(x) || tg || tb) {
        detail::record(out, "layer_norm",
                       [xs = x.storage(), gs = gain.defined() ? gain.storage() : nullptr,
                        bs = bias.defined() ? bias.storage() : nullptr, os = out.storage(), xhat, inv_std, n, rows] {
                           if (os->grad.empty()) return;
                           const bool gx = xs->requires_grad;
                           const bool gg = gs && gs->requires_grad;
                           const bool gb = bs && bs->requires_grad;
                           if (gx) xs->ensure_grad();
                           if (gg) gs->ensure_grad();
                           if (gb) bs->ensure_grad();
                           std::vector<double> dh(n);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double mean_dh = 0.0, mean_dh_h = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double g = os->grad[r * n + j];
                                   const double h = (*xhat)[r * n + j];
                                   if (gg) gs->grad[j] += g * h;
                                   if (gb) bs->grad[j] += g;
                                   dh[j] = gs ? g * gs->value[j] : g;
                                   mean_dh += dh[j];
                                   mean_dh_h += dh[j] * h;
                               }
                               if (!gx) continue;
                               mean_dh /= static_cast<double>(n);
                               mean_dh_h /= static_cast<double>(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double h = (*xhat)[r * n + j];
                                   xs->grad[r * n + j] += (*inv_std)[r] * (dh[j] - mean_dh - h * mean_dh_h);
                               }
                           }
                       });
    }
    return out;
}

// Per-feature (last axis) normalization over every leading position. In
// training mode batch statistics are used and the running buffers are
// updated in place; otherwise the running statistics normalize.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, bool training, double momentum = 0.1, double eps = kNormEpsilon) {
    const std::size_t f = x.dim(-1);
    const std::size_t count = x.size() / f;
    if (gamma.size() != f || beta.size() != f || running_mean.size() != f || running_var.size() != f) {
        throw DimensionError("batch_norm parameter width mismatch for input " + to_string(x.shape()));
    }
    auto xv = x.values();
    std::vector<double> mu(f, 0.0), var(f, 0.0);
    if (training) {
        for (std::size_t r = 0; r < count; ++r) {
            for (std::size_t j = 0; j < f; ++j) mu[j] += xv[r * f + j];
        }
        for (auto& m : mu) m /= static_cast<double>(count);
        for (std::size_t r = 0; r < count; ++r) {
            for (std::size_t j = 0; j < f; ++j) {
                const double d = xv[r * f + j] - mu[j];
                var[j] += d * d;
            }
        }
        auto rm = running_mean.mutable_values();
        auto rv = running_var.mutable_values();
        for (std::size_t j = 0; j < f; ++j) {
            const double unbiased = count > 1 ? var[j] / static_cast<double>(count - 1) : 0.0;
            var[j] /= static_cast<double>(count);
            rm[j] = (1.0 - momentum) * rm[j] + momentum * mu[j];
            rv[j] = (1.0 - momentum) * rv[j] + momentum * unbiased;
        }
    } else {
        for (std::size_t j = 0; j < f; ++j) {
            mu[j] = running_mean.values()[j];
            var[j] = running_var.values()[j];
        }
    }
    auto inv_std = std::make_shared<std::vector<double>>(f);
    for (std::size_t j = 0; j < f; ++j) (*inv_std)[j] = 1.0 / std::sqrt(var[j] + eps);
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    Tensor out = detail::empty_like(x.shape());
    auto ov = out.mutable_values();
    auto gv = gamma.values();
    auto bv = beta.values();
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t j = 0; j < f; ++j) {
            const double h = (xv[r * f + j] - mu[j]) * (*inv_std)[j];
            (*xhat)[r * f + j] = h;
            ov[r * f + j] = h * gv[j] + bv[j];
        }
    }
    detail::check_finite(out, "batch_norm");
    if (detail::tracking(x, gamma, beta)) {
        detail::record(out, "batch_norm",
                       [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage(), xhat, inv_std,
                        f, count, training] {
                           if (os->grad.empty()) return;
                           const bool gx = xs->requires_grad, gg = gs->requires_grad, gb = bs->requires_grad;
                           if (gx) xs->ensure_grad();
                           if (gg) gs->ensure_grad();
                           if (gb) bs->ensure_grad();
                           std::vector<double> mean_dh(f, 0.0), mean_dh_h(f, 0.0);
                           for (std::size_t r = 0; r < count; ++r) {
                               for (std::size_t j = 0; j < f; ++j) {
                                   const double g = os->grad[r * f + j];
                                   const double h = (*xhat)[r * f + j];
                                   if (gg) gs->grad[j] += g * h;
                                   if (gb) bs->grad[j] += g;
                                   const double dh = g * gs->value[j];
                                   mean_dh[j] += dh;
                                   mean_dh_h[j] += dh * h;
                               }
                           }
                           if (!gx) return;
                           for (std::size_t j = 0; j < f; ++j) {
                               mean_dh[j] /= static_cast<double>(count);
                               mean_dh_h[j] /= static_cast<double>(count);
                           }
                           for (std::size_t r = 0; r < count; ++r) {
                               for (std::size_t j = 0; j < f; ++j) {
                                   const double dh = os->grad[r * f + j] * gs->value[j];
                                   if (training) {
                                       const double h = (*xhat)[r * f + j];
                                       xs->grad[r * f + j] += (*inv_std)[j] * (dh - mean_dh[j] - h * mean_dh_h[j]);
                                   } else {
                                       xs->grad[r * f + j] += (*inv_std)[j] * dh;
                                   }
                               }
                           }
                       });
    }
    return out;
}

// Min-max normalization of each last-axis row into [eps, 1]. Rows with no
// spread map to 1 everywhere.
inline Tensor minmax_normalize(const Tensor& x, double eps) {
    const std::size_t n = x.dim(-1);
    const std::size_t rows = x.size() / n;
    auto xv = x.values();
    Tensor out = detail::empty_like(x.shape());
    auto ov = out.mutable_values();
    struct RowInfo {
        std::size_t lo, hi;
        double range;
    };
    auto info = std::make_shared<std::vector<RowInfo>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        std::size_t lo = 0, hi = 0;
        for (std::size_t j = 1; j < n; ++j) {
            if (xr[j] < xr[lo]) lo = j;
            if (xr[j] > xr[hi]) hi = j;
        }
        const double range = xr[hi] - xr[lo];
        (*info)[r] = {lo, hi, range};
        for (std::size_t j = 0; j < n; ++j) {
            ov[r * n + j] = range > 1e-12 ? eps + (1.0 - eps) * (xr[j] - xr[lo]) / range : 1.0;
        }
    }
    if (detail::tracking(x)) {
        detail::record(out, "minmax_normalize", [xs = x.storage(), os = out.storage(), info, n, rows, eps] {
            if (os->grad.empty()) return;
            xs->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const auto [lo, hi, range] = (*info)[r];
                if (range <= 1e-12) continue;
                const double* xr = xs->value.data() + r * n;
                const double* g = os->grad.data() + r * n;
                double* dx = xs->grad.data() + r * n;
                const double k = (1.0 - eps) / range;
                double gsum = 0.0, cross = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dx[j] += g[j] * k;
                    gsum += g[j];
                    cross += g[j] * (xr[j] - xr[lo]);
                }
                cross *= k / range;
                dx[lo] += -gsum * k + cross;
                dx[hi] += -cross;
            }
        });
    }
    return out;
}

// Train-time inverted dropout: Bernoulli keep-mask scaled by 1/(1-p);
// identity at evaluation.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw ContractError("dropout rate must be < 1");
    std::vector<double> mask(x.size());
    const double keep = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep;
    return mul(x, Tensor(x.shape(), std::move(mask)));
}

// Squared Euclidean distance along the last axis.
inline Tensor squared_distance(const Tensor& a, const Tensor& b) { return sum(square(sub(a, b)), -1); }

}  // namespace mdst
