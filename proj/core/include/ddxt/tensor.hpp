#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ddxt/errors.hpp"

namespace ddxt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    for (int64_t d : s) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
    }
}

// Integer id/label array, row-major. Carries token ids, class labels and
// anything else that never participates in differentiation.
struct IntTensor {
    Shape shape;
    std::vector<int32_t> data;

    IntTensor() = default;
    IntTensor(Shape s, std::vector<int32_t> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape_valid(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("IntTensor shape " + shape_str(shape) + " does not match data size " +
                                 std::to_string(data.size()));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

    static IntTensor vec(std::vector<int32_t> v) {
        Shape s{static_cast<int64_t>(v.size())};
        return IntTensor(std::move(s), std::move(v));
    }
};

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
};

// Dense row-major tensor with shared storage. Copies are handles onto the
// same buffer; backward closures capture these handles.
template <typename T>
class Tensor {
public:
    Tensor() : st_(std::make_shared<TensorStorage<T>>()) { st_->shape = {}; st_->data.assign(1, T(0)); }

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : st_(std::make_shared<TensorStorage<T>>()) {
        check_shape_valid(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("tensor shape " + shape_str(shape) + " does not match data size " +
                                 std::to_string(data.size()));
        st_->shape = std::move(shape);
        st_->data = std::move(data);
        st_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)), T(0));
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)), value);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    static Tensor uniform(Shape shape, T lo, T hi, std::mt19937_64& rng, bool requires_grad = false) {
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = static_cast<T>(dist(rng));
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor normal(Shape shape, T mean, T stddev, std::mt19937_64& rng, bool requires_grad = false) {
        std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = static_cast<T>(dist(rng));
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    const Shape& shape() const { return st_->shape; }
    int rank() const { return static_cast<int>(st_->shape.size()); }
    int64_t dim(int i) const { return st_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(st_->data.size()); }

    std::span<T> data() { return std::span<T>(st_->data); }
    std::span<const T> data() const { return std::span<const T>(st_->data); }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool v) { st_->requires_grad = v; }

    bool has_grad() const { return !st_->grad.empty(); }

    // Lazily allocated zero-initialized gradient buffer; accumulation is additive.
    std::span<T> grad() {
        if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
        return std::span<T>(st_->grad);
    }
    std::span<const T> grad_view() const { return std::span<const T>(st_->grad); }

    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
        return st_->data[0];
    }

    T at(std::initializer_list<int64_t> idx) const {
        if (static_cast<int>(idx.size()) != rank())
            throw DimensionError("index rank mismatch for tensor " + shape_str(shape()));
        int64_t off = 0;
        int i = 0;
        for (int64_t v : idx) {
            off = off * dim(i) + v;
            ++i;
        }
        return st_->data[static_cast<size_t>(off)];
    }

    bool same_storage(const Tensor& other) const { return st_ == other.st_; }

private:
    std::shared_ptr<TensorStorage<T>> st_;
};

// Define-by-run gradient tape. Ops push their backward closures in forward
// (topological) order; one backward pass consumes the tape and clears it.
template <typename T>
class Tape {
public:
    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    size_t size() const { return ops_.size(); }
    bool empty() const { return ops_.empty(); }
    void clear() { ops_.clear(); }

    void run_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

private:
    std::vector<std::function<void()>> ops_;
};

// Seeds d(loss)/d(loss) = 1 and applies the chain rule in reverse topological
// order. Fan-out accumulates additively. The tape is cleared afterwards.
template <typename T>
void backward(Tensor<T> loss, Tape<T>& tape) {
    if (loss.numel() != 1)
        throw NumericError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    tape.run_backward();
}

#ifndef NDEBUG
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError(std::string("non-finite value produced by ") + op);
    }
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace ddxt
