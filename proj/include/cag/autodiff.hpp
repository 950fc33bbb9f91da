#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph records every operation in evaluation order. Leaves are either
// constants, differentiable inputs, or parameters borrowed from a model; the
// graph never copies parameter storage. Calling backward() on a scalar node
// walks the tape once in reverse. A Graph is single-use and single-threaded;
// independent graphs may borrow the same (immutable) parameters concurrently.

#include <functional>
#include <utility>
#include <vector>

#include "cag/tensor.hpp"

namespace cag::ad {

class Graph;

class Var {
public:
    Var() = default;
    bool valid() const { return id_ >= 0; }
    int id() const { return id_; }

private:
    friend class Graph;
    explicit Var(int id) : id_(id) {}
    int id_ = -1;
};

using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

class Graph {
public:
    Var constant(Tensor value);
    Var input(Tensor value);
    // Borrowed leaf. Differentiable only while parameter tracking is on.
    Var parameter(const Tensor& value);

    void set_track_parameters(bool on) { track_parameters_ = on; }
    bool track_parameters() const { return track_parameters_; }

    const Tensor& value(Var v) const;
    const Shape& shape(Var v) const { return value(v).shape(); }
    // Zero-filled tensor of the right shape when no gradient reached v.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const;

    // Gradient buffer of v, zero-initialized on first access.
    Tensor& grad_buffer(Var v);
    void accumulate(Var v, const Tensor& g);

    // Appends a computed node. The node is differentiable iff a parent is.
    Var record(Tensor value, std::vector<Var> parents, BackwardFn fn);

    void backward(Var root);

    // Sum of gradients over every leaf that borrowed `param`.
    Tensor parameter_grad(const Tensor& param) const;

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        const Tensor* borrowed = nullptr;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
    };

    const Node& node(Var v) const;
    Node& node(Var v);

    std::vector<Node> nodes_;
    std::vector<std::pair<const Tensor*, int>> borrowed_;
    bool track_parameters_ = false;
};

}  // namespace cag::ad
