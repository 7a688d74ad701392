#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "pic/array.hpp"
#include "pic/common.hpp"

namespace pic {

template <class T>
class Tape;

// Lightweight handle into a tape node. Valid while its tape is alive and
// not reset; forwards are define-by-run, so a fresh tape is built per pass.
template <class T>
struct Tensor {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Shape& shape() const;
    std::vector<T>& value();
    const std::vector<T>& cvalue() const;
    std::size_t size() const { return cvalue().size(); }
    bool requires_grad() const;
};

template <class T>
class Tape {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // allocated on first touch during backward
        std::function<void()> backprop;
        bool requires_grad = false;
    };

    Tensor<T> leaf(const Shape& shape, std::vector<T> value, bool requires_grad = false) {
        check(value.size() == numel(shape), "tape leaf: value count does not match " + shape_str(shape));
        Node n;
        n.shape = shape;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Tensor<T> leaf(const ArrayND<T>& a, bool requires_grad = false) {
        return leaf(a.shape, a.data, requires_grad);
    }

    Tensor<T> constant_scalar(T v) { return leaf(Shape{1}, std::vector<T>{v}, false); }

    // Registers an op result. backprop may be empty for non-differentiable
    // outputs; requires_grad is inherited from the inputs by the op builders.
    Tensor<T> emit(Shape shape, std::vector<T> value, bool requires_grad, std::function<void()> backprop) {
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t node_count() const { return nodes_.size(); }

    std::vector<T>& grad_buffer(int id) {
        Node& n = node(id);
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    // Gradient of the last backward() w.r.t. t; zeros when t was not reached.
    ArrayND<T> grad(const Tensor<T>& t) {
        const Node& n = node(t.id);
        ArrayND<T> out;
        out.shape = n.shape;
        if (n.grad.empty())
            out.data.assign(n.value.size(), T(0));
        else
            out.data = n.grad;
        return out;
    }

    // Reverse sweep from a scalar loss. Creation order is topological order,
    // so one pass in reverse visits every reachable record exactly once.
    void backward(const Tensor<T>& loss) {
        check(loss.tape == this, "backward: loss lives on another tape");
        check(numel(node(loss.id).shape) == 1, "backward: loss must be scalar, got " + shape_str(node(loss.id).shape));
        check(!consumed_, "backward: tape already consumed; reset() before reuse");
        consumed_ = true;
        grad_buffer(loss.id)[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.grad.empty() && n.backprop) n.backprop();
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    bool consumed() const { return consumed_; }

private:
    // deque keeps node references stable while new ops are emitted
    std::deque<Node> nodes_;
    bool consumed_ = false;
};

template <class T>
const Shape& Tensor<T>::shape() const {
    return tape->node(id).shape;
}
template <class T>
std::vector<T>& Tensor<T>::value() {
    return tape->node(id).value;
}
template <class T>
const std::vector<T>& Tensor<T>::cvalue() const {
    return tape->node(id).value;
}
template <class T>
bool Tensor<T>::requires_grad() const {
    return tape->node(id).requires_grad;
}

}  // namespace pic
