#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdst/errors.hpp"

namespace mdst {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace detail {

struct Storage {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major array of doubles. Copies share storage; values are treated
// as immutable once an op has consumed them, except for parameters that the
// optimizer updates between tapes.
class Tensor {
   public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : s_(std::make_shared<detail::Storage>()) {
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
        }
        if (numel(shape) != values.size()) {
            throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                                 " values, got " + std::to_string(values.size()));
        }
        s_->shape = std::move(shape);
        s_->value = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static Tensor full(Shape shape, double v) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor parameter(Shape shape, std::vector<double> values) {
        return Tensor(std::move(shape), std::move(values), true);
    }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> v;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) throw DimensionError("ragged matrix literal");
            v.insert(v.end(), r.begin(), r.end());
        }
        return Tensor({rows.size(), cols}, std::move(v));
    }
    static Tensor vector(std::vector<double> v) {
        const auto n = v.size();
        return Tensor({n}, std::move(v));
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t size() const { return s_->value.size(); }

    // Extent of an axis; negative axes count from the end.
    std::size_t dim(std::ptrdiff_t axis) const { return s_->shape[normalize_axis(axis)]; }

    std::size_t normalize_axis(std::ptrdiff_t axis) const {
        const auto r = static_cast<std::ptrdiff_t>(rank());
        const auto a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
        }
        return static_cast<std::size_t>(a);
    }

    std::span<const double> values() const { return s_->value; }
    std::span<double> mutable_values() { return s_->value; }
    std::vector<double> to_vector() const { return s_->value; }

    double item() const {
        if (size() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
        return s_->value[0];
    }

    double at(std::initializer_list<std::size_t> index) const {
        if (index.size() != rank()) throw DimensionError("index rank mismatch for shape " + to_string(shape()));
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (auto i : index) {
            if (i >= s_->shape[axis]) throw IndexError("index out of range for shape " + to_string(shape()));
            flat = flat * s_->shape[axis] + i;
            ++axis;
        }
        return s_->value[flat];
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) { s_->requires_grad = on; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const double> grad() const { return s_->grad; }
    std::span<double> mutable_grad() {
        s_->ensure_grad();
        return s_->grad;
    }
    void zero_grad() { s_->grad.clear(); }

    // Value copy detached from any tape.
    Tensor detach() const { return Tensor(shape(), s_->value); }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    const std::shared_ptr<detail::Storage>& storage() const { return s_; }

   private:
    std::shared_ptr<detail::Storage> s_;
};

// Ordered record of differentiable operations. backward() replays the
// recorded rules in exact reverse order. One writer per tape.
class Tape {
   public:
    using Rule = std::function<void()>;

    void record(const char* op, Rule rule) {
        ops_.push_back(op);
        rules_.push_back(std::move(rule));
    }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.size() != 1) throw DimensionError("backward() needs a scalar loss");
        if (!std::isfinite(loss.item())) throw NumericError("backward() on non-finite loss");
        if (!loss.requires_grad()) return;
        auto& s = *loss.storage();
        s.ensure_grad();
        s.grad[0] += 1.0;
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return rules_.size(); }
    const std::vector<const char*>& ops() const { return ops_; }

    void clear() {
        rules_.clear();
        ops_.clear();
    }

   private:
    std::vector<const char*> ops_;
    std::vector<Rule> rules_;
};

namespace detail {

inline Tape*& active_tape() {
    thread_local Tape* tape = nullptr;
    return tape;
}

}  // namespace detail

// Routes operations on the current thread onto a tape for the scope's life.
class TapeScope {
   public:
    explicit TapeScope(Tape& tape) : prev_(detail::active_tape()) { detail::active_tape() = &tape; }
    ~TapeScope() { detail::active_tape() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape* prev_;
};

class NoGradScope {
   public:
    NoGradScope() : prev_(detail::active_tape()) { detail::active_tape() = nullptr; }
    ~NoGradScope() { detail::active_tape() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape* prev_;
};

}  // namespace mdst
