#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A BasicTensor is a cheap handle onto shared storage. Values are never
// mutated after construction except by optimizers (parameters) and by
// gradient accumulation during backward().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace hdl {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

// Tensor buffers start on a 64-byte boundary. Vectorized kernels peel
// leading elements up to the first aligned address, so without this the
// summation order, and therefore the low bits of results, would depend on
// where the allocator happened to place a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Storage = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
    Shape shape;
    Storage<T> data;
    Storage<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    Storage<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
};

}  // namespace detail

template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    BasicTensor() : node_(std::make_shared<detail::Node<T>>()) {}

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        for (auto d : shape) {
            if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
        }
        if (numel_of(shape) != data.size()) {
            throw ShapeError("shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->data.assign(data.begin(), data.end());
        node_->requires_grad = requires_grad;
    }

    static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = numel_of(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }
    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T{0}, requires_grad);
    }
    static BasicTensor scalar(T value, bool requires_grad = false) {
        return BasicTensor({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    // Parameters only: optimizers and weight loading write through this.
    std::span<T> mutable_data() { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.assign(node_->data.size(), T{0}); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_graph() const { return static_cast<bool>(node_->backward_fn); }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }
    T at(std::size_t flat) const { return node_->data.at(flat); }

    bool all_finite() const {
        auto finite = [](T v) { return std::isfinite(v); };
        return std::all_of(node_->data.begin(), node_->data.end(), finite) &&
               std::all_of(node_->grad.begin(), node_->grad.end(), finite);
    }

    // Copy of the values with no graph attached.
    BasicTensor detach() const { return BasicTensor(shape(), {node_->data.begin(), node_->data.end()}, false); }

    BasicTensor reshape(Shape shape) const;

    void backward() const;

    const NodePtr& node() const { return node_; }

    // Builds a graph node from the result of an op. The graph is only
    // recorded when at least one input requires a gradient.
    static BasicTensor from_op(Shape shape, std::vector<T> data,
                               std::vector<BasicTensor> inputs,
                               std::function<void(detail::Node<T>&)> backward_fn) {
        BasicTensor out(std::move(shape), std::move(data));
        bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const BasicTensor& t) { return t.requires_grad(); });
        if (tracked) {
            out.node_->requires_grad = true;
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    NodePtr node_;
};

template <typename T>
void BasicTensor<T>::backward() const {
    if (numel() != 1) {
        throw GraphError("backward() needs a scalar output, got shape " + to_string(shape()));
    }
    if (!node_->requires_grad || !node_->backward_fn) {
        throw GraphError("backward() on a tensor with no recorded graph");
    }

    // Iterative post-order DFS gives a topological order.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            auto* p = n->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto* n = *it;
        if (n->backward_fn && n->grad.size() == n->data.size()) n->backward_fn(*n);
    }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape new_shape) const {
    if (numel_of(new_shape) != numel()) {
        throw ShapeError("cannot reshape " + to_string(shape()) + " to " + to_string(new_shape));
    }
    return from_op(std::move(new_shape), {node_->data.begin(), node_->data.end()}, {*this}, [](detail::Node<T>& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

using Tensor = BasicTensor<float>;

}  // namespace hdl
