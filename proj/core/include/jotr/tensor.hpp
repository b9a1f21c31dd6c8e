#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "jotr/error.hpp"

namespace jotr {

using Dims = std::vector<std::size_t>;

inline std::size_t numel(const Dims& dims) {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

inline std::string dims_str(const Dims& dims) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
    os << "]";
    return os.str();
}

template <typename T> class Tape;

// Dense row-major value buffer plus an optional gradient buffer of the same
// extent. Nodes are shared between tensor handles and tape closures.
template <typename T>
struct TensorNode {
    Dims dims;
    std::vector<T> val;
    std::vector<T> grad; // empty until first use
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

// Cheap handle with value semantics over a shared node. Values are treated
// as immutable once an op has consumed the tensor; leaf parameters are the
// exception (the optimizer updates them between tapes).
template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;

    static Tensor zeros(Dims dims) { return filled(std::move(dims), T(0)); }

    static Tensor filled(Dims dims, T value) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->dims = std::move(dims);
        t.n_->val.assign(numel(t.n_->dims), value);
        return t;
    }

    static Tensor from(Dims dims, std::vector<T> values) {
        if (numel(dims) != values.size())
            throw ShapeError("tensor init: " + dims_str(dims) + " does not match " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->dims = std::move(dims);
        t.n_->val = std::move(values);
        return t;
    }

    static Tensor scalar(T v) { return from({1}, {v}); }

    // Leaf with requires_grad set; gradients accumulate across backward calls
    // until zero_grad.
    static Tensor param(Dims dims, std::vector<T> values) {
        Tensor t = from(std::move(dims), std::move(values));
        t.n_->requires_grad = true;
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Dims& dims() const { return n_->dims; }
    std::size_t rank() const { return n_->dims.size(); }
    std::size_t dim(std::size_t i) const { return n_->dims[i]; }
    std::size_t size() const { return n_->val.size(); }

    const std::vector<T>& values() const { return n_->val; }
    std::vector<T>& mutable_values() { return n_->val; }
    const T* data() const { return n_->val.data(); }
    T* data() { return n_->val.data(); }

    T value() const {
        if (size() != 1) throw ShapeError("value(): tensor " + dims_str(dims()) + " is not a scalar");
        return n_->val[0];
    }
    T operator[](std::size_t i) const { return n_->val[i]; }

    T at(std::size_t i, std::size_t j) const { return n_->val[i * dim(1) + j]; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    const std::vector<T>& grad() const { return n_->grad; }
    std::vector<T>& mutable_grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->zero_grad(); }

    std::shared_ptr<Node> node() const { return n_; }

    // Same values, no grad tracking, no tape linkage.
    Tensor detach() const {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->dims = n_->dims;
        t.n_->val = n_->val;
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

// Reverse-mode tape. Ops append closures while a tape is active on the
// current thread; backward replays them in reverse. A tape is single
// threaded; independent tapes may live on different threads.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() {
        if (current_ == this) current_ = nullptr;
    }

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current_) { current_ = &t; }
        ~Scope() { current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* current() { return current_; }
    static bool recording() { return current_ != nullptr; }

    void record(std::function<void()> backward_fn) { steps_.push_back(std::move(backward_fn)); }

    std::size_t size() const { return steps_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays the recorded ops backwards.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + dims_str(loss.dims()));
        auto node = loss.node();
        node->ensure_grad();
        node->grad[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    void clear() { steps_.clear(); }

private:
    static thread_local Tape* current_;
    std::vector<std::function<void()>> steps_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::current_ = nullptr;

namespace detail {

// Result node of an op: tracked iff a tape is active and some input needs
// gradients.
template <typename T, typename... Inputs>
Tensor<T> make_result(Dims dims, const Inputs&... inputs) {
    Tensor<T> out = Tensor<T>::zeros(std::move(dims));
    const bool any_rg = (... || inputs.requires_grad());
    out.set_requires_grad(any_rg && Tape<T>::recording());
    return out;
}

} // namespace detail

} // namespace jotr
