#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "elt/errors.hpp"
#include "elt/kernels.hpp"
#include "elt/rng.hpp"

namespace elt {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

inline void check_shape(const Shape& s) {
    for (i64 d : s)
        if (d <= 0) throw ShapeError("tensor extent must be positive, got shape " + shape_str(s));
}

// Plain integer tensor for token ids and gather indices. No gradients.
struct IntTensor {
    Shape shape;
    std::vector<i64> data;

    IntTensor() = default;
    IntTensor(Shape s, std::vector<i64> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape(shape);
        if (shape_numel(shape) != static_cast<i64>(data.size()))
            throw ShapeError("IntTensor data length does not match shape " + shape_str(shape));
    }
    i64 numel() const { return static_cast<i64>(data.size()); }
};

template <class T>
class Tape;

// Allocator that skips value-initialization for trivially-destructible T:
// op outputs are fully overwritten, so the memset of vector(n) is wasted
// memory traffic.
template <class T>
class uninit_allocator : public std::allocator<T> {
public:
    using std::allocator<T>::allocator;
    template <class U>
    struct rebind {
        using other = uninit_allocator<U>;
    };
    template <class U>
    void construct(U*) noexcept {}
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

template <class T>
struct TensorImpl {
    using Buffer = std::vector<T, uninit_allocator<T>>;
    Shape shape;
    Buffer data;
    Buffer grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;
    Tape<T>* tape = nullptr;

    i64 numel() const { return static_cast<i64>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Shared-ownership handle; copies alias the same storage like the usual
// dynamic-graph tensor types.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape s) {
        check_shape(s);
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->data.assign(shape_numel(s), T(0));
        impl->shape = std::move(s);
        return Tensor(std::move(impl));
    }

    // uninitialized storage; caller must overwrite every element
    static Tensor empty(Shape s) {
        check_shape(s);
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->data.resize(shape_numel(s));
        impl->shape = std::move(s);
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.impl_->data.begin(), t.impl_->data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full(Shape{}, v); }

    static Tensor from_data(Shape s, const std::vector<T>& d) {
        check_shape(s);
        if (shape_numel(s) != static_cast<i64>(d.size()))
            throw ShapeError("data length " + std::to_string(d.size()) +
                             " does not match shape " + shape_str(s));
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->shape = std::move(s);
        impl->data.assign(d.begin(), d.end());
        return Tensor(std::move(impl));
    }

    static Tensor randn(Shape s, Rng& rng, T stddev) {
        Tensor t = zeros(std::move(s));
        for (T& v : t.impl_->data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    i64 dim(int i) const {
        const int r = ndim();
        if (i < 0) i += r;
        return impl_->shape[static_cast<std::size_t>(i)];
    }
    i64 numel() const { return impl_->numel(); }

    std::span<T> data() { return {impl_->data.data(), impl_->data.size()}; }
    std::span<const T> data() const { return {impl_->data.data(), impl_->data.size()}; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<T> grad() {
        impl_->ensure_grad();
        return {impl_->grad.data(), impl_->grad.size()};
    }
    std::span<const T> grad() const {
        impl_->ensure_grad();
        return {impl_->grad.data(), impl_->grad.size()};
    }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }
    bool is_leaf() const { return impl_->leaf; }

    // Deep copy, detached from any tape.
    Tensor clone() const {
        auto impl = std::make_shared<TensorImpl<T>>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        return Tensor(std::move(impl));
    }

    Tensor detach() const { return clone(); }

    std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
    const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl<T>> impl_;

    template <class U>
    friend class Tape;
    template <class U>
    friend Tensor<U> wrap_impl(std::shared_ptr<TensorImpl<U>>);
};

template <class T>
Tensor<T> wrap_impl(std::shared_ptr<TensorImpl<T>> impl) {
    return Tensor<T>(std::move(impl));
}

// Ordered record of primitive operations. Ops append a pull closure that
// moves the output gradient into the inputs; backward() replays the records
// once, in reverse. Gradient fan-out accumulates additively. Leaf gradients
// survive across backward() calls (repeated calls accumulate); non-leaf
// gradients are reset at the start of each backward pass.
template <class T>
class Tape {
public:
    Tape() = default;
    ~Tape() { clear(); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void watch(Tensor<T>& t) {
        auto& impl = *t.impl();
        if (impl.tape && impl.tape != this)
            throw UsageError("tensor is already watched by a different tape");
        impl.requires_grad = true;
        impl.tape = this;
        watched_.push_back(t.impl());
    }

    void record(std::function<void()> pull, std::shared_ptr<TensorImpl<T>> out) {
        records_.push_back({std::move(pull), std::move(out)});
    }

    std::size_t size() const { return records_.size(); }

    void backward(const Tensor<T>& root) {
        auto& impl = *root.impl();
        if (impl.numel() != 1)
            throw UsageError("backward requires a scalar root, got shape " + shape_str(impl.shape));
        if (impl.tape != this)
            throw UsageError("backward root was not produced on this tape");
        for (auto& r : records_) {
            r.out->ensure_grad();
            std::fill(r.out->grad.begin(), r.out->grad.end(), T(0));
        }
        impl.ensure_grad();
        impl.grad[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->pull();
    }

    // Drop all records and release watched tensors back to tape-free state.
    void clear() {
        for (auto& r : records_)
            if (r.out) r.out->tape = nullptr;
        for (auto& w : watched_)
            if (w) w->tape = nullptr;
        records_.clear();
        watched_.clear();
    }

private:
    struct Record {
        std::function<void()> pull;
        std::shared_ptr<TensorImpl<T>> out;
    };
    std::vector<Record> records_;
    std::vector<std::shared_ptr<TensorImpl<T>>> watched_;
};

}  // namespace elt
