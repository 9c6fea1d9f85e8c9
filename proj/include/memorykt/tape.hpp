#pragma once

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "memorykt/tensor.hpp"

namespace memorykt::ad {

template <typename S>
class Tape;

// Lightweight handle to a node on a tape.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
};

// Append-only record of primitive applications. Nodes are stored in the
// order they were created, so parents always precede their consumers and a
// single reverse sweep visits every node exactly once.
template <typename S>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<S>&)>;

    Var<S> constant(Tensor<S> value) { return push(std::move(value), false, nullptr); }

    Var<S> leaf(Tensor<S> value) { return push(std::move(value), true, nullptr); }

    Var<S> push(Tensor<S> value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), std::move(backward), requires_grad});
        return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    int next_id() const { return static_cast<int>(nodes_.size()); }
    std::size_t size() const { return nodes_.size(); }

    const Tensor<S>& value(Var<S> v) const { return node(v.id).value; }
    const Tensor<S>& value(int id) const { return node(id).value; }

    bool requires_grad(int id) const { return node(id).requires_grad; }

    // Gradient buffer for a node, allocated (zeros) on first touch. Returns
    // nullptr when the node does not need gradients, so op backward passes
    // can skip the work entirely.
    Tensor<S>* grad_if_needed(int id) {
        if (!node(id).requires_grad) return nullptr;
        Tensor<S>& g = grads_[static_cast<std::size_t>(id)];
        if (g.numel() == 0) g = Tensor<S>(node(id).value.shape());
        return &g;
    }

    // Gradient of the last backward() with respect to node v (zeros if the
    // node was not reached).
    const Tensor<S>& grad(Var<S> v) {
        Tensor<S>& g = grads_.at(static_cast<std::size_t>(v.id));
        if (g.numel() == 0) g = Tensor<S>(node(v.id).value.shape());
        return g;
    }

    void backward(Var<S> loss) {
        if (loss.tape != this) throw std::logic_error("backward: loss from a different tape");
        const Tensor<S>& lv = value(loss);
        if (lv.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        lv.shape_str());
        }
        grads_.assign(nodes_.size(), Tensor<S>{});
        grads_[static_cast<std::size_t>(loss.id)] = Tensor<S>::full(lv.shape(), S(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || !n.backward) continue;
            const Tensor<S>& g = grads_[static_cast<std::size_t>(id)];
            if (g.numel() == 0) continue;  // not on the path to the loss
            n.backward(*this, g);
        }
    }

private:
    struct Node {
        Tensor<S> value;
        BackwardFn backward;
        bool requires_grad;
    };

    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }

    std::vector<Node> nodes_;
    std::vector<Tensor<S>> grads_;
};

}  // namespace memorykt::ad
