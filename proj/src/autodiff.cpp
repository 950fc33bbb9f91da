#include "cag/autodiff.hpp"

#include <stdexcept>

namespace cag::ad {

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Graph::input(Tensor value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Graph::parameter(const Tensor& value) {
    Node n;
    n.borrowed = &value;
    n.requires_grad = track_parameters_;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    borrowed_.emplace_back(&value, id);
    return Var(id);
}

const Graph::Node& Graph::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id()) >= nodes_.size())
        throw std::out_of_range("invalid graph variable");
    return nodes_[static_cast<std::size_t>(v.id())];
}

Graph::Node& Graph::node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id()) >= nodes_.size())
        throw std::out_of_range("invalid graph variable");
    return nodes_[static_cast<std::size_t>(v.id())];
}

const Tensor& Graph::value(Var v) const {
    const Node& n = node(v);
    return n.borrowed ? *n.borrowed : n.value;
}

Tensor Graph::grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor::like(value(v));
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor& Graph::grad_buffer(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
        n.grad = Tensor::like(n.borrowed ? *n.borrowed : n.value);
        n.has_grad = true;
    }
    return n.grad;
}

void Graph::accumulate(Var v, const Tensor& g) {
    if (!requires_grad(v)) return;
    Tensor& buf = grad_buffer(v);
    if (buf.size() != g.size())
        throw std::logic_error("gradient shape " + shape_to_string(g.shape()) + " does not match value shape " +
                               shape_to_string(buf.shape()));
    double* dst = buf.data();
    const double* src = g.data();
    for (Index i = 0; i < g.size(); ++i) dst[i] += src[i];
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    for (Var p : parents) {
        if (p.valid() && node(p).requires_grad) {
            n.requires_grad = true;
            break;
        }
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(static_cast<int>(nodes_.size()) - 1);
}

void Graph::backward(Var root) {
    Node& r = node(root);
    if ((r.borrowed ? r.borrowed->size() : r.value.size()) != 1)
        throw std::invalid_argument("backward() needs a scalar root, got shape " + shape_to_string(value(root).shape()));
    if (!r.requires_grad) return;
    grad_buffer(root)[0] += 1.0;
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n.grad);
    }
}

Tensor Graph::parameter_grad(const Tensor& param) const {
    Tensor total = Tensor::like(param);
    for (const auto& [ptr, id] : borrowed_) {
        if (ptr != &param) continue;
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad) continue;
        for (Index i = 0; i < total.size(); ++i) total[i] += n.grad[i];
    }
    return total;
}

}  // namespace cag::ad
