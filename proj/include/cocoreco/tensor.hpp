#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "cocoreco/common.hpp"

namespace cocoreco {

template <typename S>
class Tape;

namespace detail {

template <typename S>
struct TensorImpl {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until populated; same length as data when present
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // tape the node handle belongs to
    int node = -1;
};

}  // namespace detail

// Dense row-major tensor of 32- or 64-bit floats. A Tensor is a cheap shared
// handle: copies alias the same storage. Data is treated as immutable once
// the tensor has been consumed by an op on a live tape.
template <typename S>
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl<S>>()) {}

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(numel_of(t.impl_->shape), S(0));
        return t;
    }

    static Tensor full(std::vector<int> shape, S v) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.impl_->data) x = v;
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<S> data) {
        if (numel_of(shape) != data.size())
            throw shape_error("tensor: shape " + shape_str(shape) + " needs " +
                              std::to_string(numel_of(shape)) +
                              " values, got " + std::to_string(data.size()));
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    static Tensor scalar(S v) { return from({1}, {v}); }

    const std::vector<int>& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t size() const { return impl_->data.size(); }

    S* data() { return impl_->data.data(); }
    const S* data() const { return impl_->data.data(); }
    std::vector<S>& vec() { return impl_->data; }
    const std::vector<S>& vec() const { return impl_->data; }

    S item() const {
        if (size() != 1)
            throw shape_error("item: tensor " + shape_str(shape()) +
                              " is not a scalar");
        return impl_->data[0];
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    Tensor reshaped(std::vector<int> shape) const;  // defined with the ops

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        impl_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (impl_->grad.empty())
            throw value_error("grad: no gradient populated on this tensor");
        return impl_->grad;
    }
    void zero_grad() {
        if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
    }

    bool all_finite() const {
        for (S v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<detail::TensorImpl<S>> impl() const { return impl_; }

private:
    std::shared_ptr<detail::TensorImpl<S>> impl_;

    friend class Tape<S>;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are appended in execution order (which is a
// topological order by construction); backward() visits them strictly in
// reverse, accumulating gradients additively. One tape is confined to one
// thread; independent tapes may run in parallel.
// ---------------------------------------------------------------------------

template <typename S>
class Tape {
public:
    // Accumulates into parents' gradient buffers; gout is this node's grad.
    using BackwardFn = std::function<void(const std::vector<S>& gout, Tape&)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape() {
        if (active_tape() == this) active_tape() = nullptr;
    }

    // RAII thread-local activation.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_tape()) { active_tape() = &t; }
        ~Scope() { active_tape() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    // RAII suppression: pure forward evaluation with no recording.
    class NoTape {
    public:
        NoTape() : prev_(active_tape()) { active_tape() = nullptr; }
        ~NoTape() { active_tape() = prev_; }
        NoTape(const NoTape&) = delete;
        NoTape& operator=(const NoTape&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() noexcept { return active_tape(); }

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }

    // True if x participates in differentiation under this tape.
    bool tracked(const Tensor<S>& x) const {
        return x.requires_grad() || node_of(x) >= 0;
    }

    int node_of(const Tensor<S>& x) const {
        auto im = x.impl();
        return (im->tape_id == id_) ? im->node : -1;
    }

    // Node id to use as a parent for input x: existing node, a fresh leaf
    // node when x wants gradients, or -1 for plain constants.
    int parent_of(const Tensor<S>& x) {
        int n = node_of(x);
        if (n >= 0) return n;
        if (!x.requires_grad()) return -1;
        Node leaf;
        leaf.op = "leaf";
        leaf.numel = x.size();
        leaf.leaf = x.impl();
        nodes_.push_back(std::move(leaf));
        int id = static_cast<int>(nodes_.size()) - 1;
        x.impl()->tape_id = id_;
        x.impl()->node = id;
        return id;
    }

    // Record an operation node and attach it to the output tensor.
    int record(const char* op, Tensor<S>& out, std::vector<int> parents,
               BackwardFn fn) {
        Node n;
        n.op = op;
        n.parents = std::move(parents);
        n.numel = out.size();
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        out.impl()->tape_id = id_;
        out.impl()->node = id;
        return id;
    }

    // Gradient buffer of a node, allocated (zeroed) on first touch during the
    // current backward sweep.
    std::vector<S>& grad_buf(int node) {
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(node)].numel, S(0));
        return g;
    }

    void run_backward(int loss_node) {
        grads_.assign(nodes_.size(), {});
        grad_buf(loss_node)[0] = S(1);
        for (int i = loss_node; i >= 0; --i) {
            auto& node = nodes_[static_cast<size_t>(i)];
            if (grads_[static_cast<size_t>(i)].empty()) continue;  // off-path
            if (node.backward) node.backward(grads_[static_cast<size_t>(i)], *this);
        }
        // Leaves: populate tensor-visible gradients additively. Leaves off
        // the path to the loss receive exact zeros.
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& node = nodes_[i];
            if (!node.leaf) continue;
            auto& tgrad = node.leaf->grad;
            if (tgrad.empty()) tgrad.assign(node.leaf->data.size(), S(0));
            const auto& g = grads_[i];
            if (!g.empty())
                for (std::size_t k = 0; k < g.size(); ++k) tgrad[k] += g[k];
        }
    }

    // Gradient of any tensor recorded on this tape, valid after backward().
    // Off-path tensors report zeros.
    Tensor<S> grad_of(const Tensor<S>& x) const {
        int n = node_of(x);
        if (n < 0)
            throw value_error("grad_of: tensor is not on this tape");
        Tensor<S> g = Tensor<S>::zeros(x.shape());
        if (static_cast<size_t>(n) < grads_.size() &&
            !grads_[static_cast<size_t>(n)].empty())
            g.vec() = grads_[static_cast<size_t>(n)];
        return g;
    }

    const char* op_name(int node) const {
        return nodes_[static_cast<size_t>(node)].op;
    }

private:
    struct Node {
        const char* op = "";
        std::vector<int> parents;
        std::size_t numel = 0;
        BackwardFn backward;  // empty for leaves
        std::shared_ptr<detail::TensorImpl<S>> leaf;  // write-back target
    };

    static Tape*& active_tape() {
        thread_local Tape* t = nullptr;
        return t;
    }
    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> c{1};
        return c.fetch_add(1);
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<S>> grads_;  // per-node, from the last backward
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad tensor used under the active tape; calling twice without
// zeroing doubles them.
template <typename S>
void backward(const Tensor<S>& loss) {
    Tape<S>* tp = Tape<S>::active();
    if (!tp)
        throw value_error("backward: no active tape");
    if (loss.size() != 1)
        throw shape_error("backward: loss must be scalar, got " +
                          shape_str(loss.shape()));
    int node = tp->node_of(loss);
    if (node < 0)
        throw value_error("backward: loss tensor is detached from the active tape");
    tp->run_backward(node);
}

}  // namespace cocoreco
