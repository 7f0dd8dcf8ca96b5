#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_set>
#include <vector>

#include "lbd/kernels.hpp"
#include "lbd/tensor.hpp"

// Reverse-mode automatic differentiation over a define-by-run graph.
// Nodes cache forward values; backward walks the graph once in reverse
// topological order and accumulates gradients into every node that
// (transitively) depends on a grad-requiring leaf.

namespace lbd::ad {

enum class OpKind {
    leaf,
    conv2d,
    maxpool2d,
    fully_connected,
    relu,
    softmax_xent,
    add,
    mul,
    sum,
    mse,
    reshape,
    tile0,
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodePtr> inputs;
    Tensor value;
    Tensor grad;  // allocated on first accumulation during backward
    bool requires_grad = false;

    // op-specific state
    int stride = 1;
    int window = 1;
    std::vector<int64_t> argmax;    // maxpool
    Tensor cache;                   // softmax probabilities
    std::vector<int> labels;        // xent targets
};

inline NodePtr leaf(Tensor v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

inline NodePtr make_op(OpKind kind, std::vector<NodePtr> inputs, Tensor value) {
    auto n = std::make_shared<Node>();
    n->kind = kind;
    n->inputs = std::move(inputs);
    n->value = std::move(value);
    for (const auto& in : n->inputs) n->requires_grad |= in->requires_grad;
    return n;
}

inline NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride = 1) {
    auto n = make_op(OpKind::conv2d, {x, w, b},
                     kern::conv2d_forward(x->value, w->value, b->value, stride));
    n->stride = stride;
    return n;
}

inline NodePtr maxpool2d(const NodePtr& x, int window, int stride) {
    std::vector<int64_t> argmax;
    Tensor v = kern::maxpool2d_forward(x->value, window, stride, &argmax);
    auto n = make_op(OpKind::maxpool2d, {x}, std::move(v));
    n->window = window;
    n->stride = stride;
    n->argmax = std::move(argmax);
    return n;
}

inline NodePtr fully_connected(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
    return make_op(OpKind::fully_connected, {x, w, b},
                   kern::fc_forward(x->value, w->value, b->value));
}

inline NodePtr relu(const NodePtr& x) {
    return make_op(OpKind::relu, {x}, kern::relu_forward(x->value));
}

inline NodePtr reshape(const NodePtr& x, std::vector<int> shape) {
    return make_op(OpKind::reshape, {x}, x->value.reshaped(std::move(shape)));
}

/// Replicates a tensor n times along a new leading axis; the backward pass
/// sums gradients over that axis.
inline NodePtr tile0(const NodePtr& x, int n) {
    const Tensor& t = x->value;
    std::vector<int> shape;
    shape.push_back(n);
    for (int d : t.shape()) shape.push_back(d);
    Tensor out(shape);
    double* o = out.mutable_data();
    for (int i = 0; i < n; ++i)
        std::copy_n(t.data(), t.size(), o + static_cast<int64_t>(i) * t.size());
    auto node = make_op(OpKind::tile0, {x}, std::move(out));
    node->window = n;
    return node;
}

/// Fused softmax + cross-entropy, mean of -log(p_true) over the batch.
inline NodePtr softmax_xent(const NodePtr& logits, std::vector<int> labels) {
    const Tensor& lg = logits->value;
    if (lg.ndim() != 2 || static_cast<size_t>(lg.dim(0)) != labels.size())
        throw ShapeError("shape-mismatch: softmax_xent expects [n,k] logits and n labels");
    Tensor probs = softmax_rows(lg);
    int n = lg.dim(0), k = lg.dim(1);
    const double* pp = probs.data();
    double loss = 0.0;
    for (int r = 0; r < n; ++r) {
        int y = labels[static_cast<size_t>(r)];
        if (y < 0 || y >= k) throw ShapeError("label-out-of-range in softmax_xent");
        double p = std::max(pp[static_cast<int64_t>(r) * k + y], 1e-300);
        loss -= std::log(p);
    }
    auto node = make_op(OpKind::softmax_xent, {logits}, Tensor::scalar(loss / n));
    node->cache = std::move(probs);
    node->labels = std::move(labels);
    return node;
}

inline bool is_scalar(const Tensor& t) { return t.size() == 1; }

// add/mul allow equal shapes or a scalar on either side.
inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    const Tensor& ta = a->value;
    const Tensor& tb = b->value;
    if (ta.same_shape(tb)) {
        Tensor out = ta;
        double* o = out.mutable_data();
        const double* pb = tb.data();
        for (int64_t i = 0; i < out.size(); ++i) o[i] += pb[i];
        return make_op(OpKind::add, {a, b}, std::move(out));
    }
    if (is_scalar(tb)) {
        Tensor out = ta;
        double* o = out.mutable_data();
        double v = tb[0];
        for (int64_t i = 0; i < out.size(); ++i) o[i] += v;
        return make_op(OpKind::add, {a, b}, std::move(out));
    }
    if (is_scalar(ta)) return add(b, a);
    throw ShapeError("shape-mismatch: add operands");
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    const Tensor& ta = a->value;
    const Tensor& tb = b->value;
    if (ta.same_shape(tb)) {
        Tensor out = ta;
        double* o = out.mutable_data();
        const double* pb = tb.data();
        for (int64_t i = 0; i < out.size(); ++i) o[i] *= pb[i];
        return make_op(OpKind::mul, {a, b}, std::move(out));
    }
    if (is_scalar(tb)) {
        Tensor out = ta;
        double* o = out.mutable_data();
        double v = tb[0];
        for (int64_t i = 0; i < out.size(); ++i) o[i] *= v;
        return make_op(OpKind::mul, {a, b}, std::move(out));
    }
    if (is_scalar(ta)) return mul(b, a);
    throw ShapeError("shape-mismatch: mul operands");
}

inline NodePtr sum(const NodePtr& x) {
    const double* p = x->value.data();
    double acc = 0.0;
    for (int64_t i = 0; i < x->value.size(); ++i) acc += p[i];
    return make_op(OpKind::sum, {x}, Tensor::scalar(acc));
}

inline NodePtr mse_loss(const NodePtr& a, const NodePtr& b) {
    return make_op(OpKind::mse, {a, b}, Tensor::scalar(mse(a->value, b->value)));
}

namespace detail {

inline void accumulate(const NodePtr& n, Tensor g) {
    if (!n->grad.defined()) {
        n->grad = std::move(g);
        return;
    }
    double* p = n->grad.mutable_data();
    const double* q = g.data();
    for (int64_t i = 0; i < n->grad.size(); ++i) p[i] += q[i];
}

// grad flowing into a broadcast scalar operand collapses by summation
inline Tensor collapse_to_scalar(const Tensor& g) {
    const double* p = g.data();
    double acc = 0.0;
    for (int64_t i = 0; i < g.size(); ++i) acc += p[i];
    return Tensor::scalar(acc);
}

inline void backward_into_inputs(const NodePtr& n) {
    const Tensor& g = n->grad;
    switch (n->kind) {
        case OpKind::leaf:
            break;
        case OpKind::conv2d: {
            const NodePtr& x = n->inputs[0];
            const NodePtr& w = n->inputs[1];
            const NodePtr& b = n->inputs[2];
            auto gr = kern::conv2d_backward(x->value, w->value, g, n->stride, x->requires_grad);
            if (x->requires_grad) accumulate(x, std::move(gr.dx));
            if (w->requires_grad) accumulate(w, std::move(gr.dw));
            if (b->requires_grad) accumulate(b, std::move(gr.db));
            break;
        }
        case OpKind::maxpool2d: {
            const NodePtr& x = n->inputs[0];
            if (x->requires_grad)
                accumulate(x, kern::maxpool2d_backward(x->value.shape(), n->argmax, g));
            break;
        }
        case OpKind::fully_connected: {
            const NodePtr& x = n->inputs[0];
            const NodePtr& w = n->inputs[1];
            const NodePtr& b = n->inputs[2];
            auto gr = kern::fc_backward(x->value, w->value, g, x->requires_grad);
            if (x->requires_grad) accumulate(x, std::move(gr.dx));
            if (w->requires_grad) accumulate(w, std::move(gr.dw));
            if (b->requires_grad) accumulate(b, std::move(gr.db));
            break;
        }
        case OpKind::relu: {
            const NodePtr& x = n->inputs[0];
            if (x->requires_grad) accumulate(x, kern::relu_backward(x->value, g));
            break;
        }
        case OpKind::reshape: {
            const NodePtr& x = n->inputs[0];
            if (x->requires_grad) accumulate(x, g.reshaped(x->value.shape()));
            break;
        }
        case OpKind::softmax_xent: {
            const NodePtr& logits = n->inputs[0];
            if (!logits->requires_grad) break;
            int rows = n->cache.dim(0), k = n->cache.dim(1);
            Tensor dl = n->cache;
            double* p = dl.mutable_data();
            double scale = g[0] / rows;
            for (int r = 0; r < rows; ++r) {
                double* row = p + static_cast<int64_t>(r) * k;
                row[n->labels[static_cast<size_t>(r)]] -= 1.0;
                for (int j = 0; j < k; ++j) row[j] *= scale;
            }
            accumulate(logits, std::move(dl));
            break;
        }
        case OpKind::add: {
            for (int i = 0; i < 2; ++i) {
                const NodePtr& in = n->inputs[static_cast<size_t>(i)];
                if (!in->requires_grad) continue;
                if (in->value.same_shape(n->value))
                    accumulate(in, g);
                else
                    accumulate(in, collapse_to_scalar(g));
            }
            break;
        }
        case OpKind::mul: {
            for (int i = 0; i < 2; ++i) {
                const NodePtr& in = n->inputs[static_cast<size_t>(i)];
                const NodePtr& other = n->inputs[static_cast<size_t>(1 - i)];
                if (!in->requires_grad) continue;
                Tensor gi = g;
                double* p = gi.mutable_data();
                if (other->value.same_shape(n->value)) {
                    const double* q = other->value.data();
                    for (int64_t j = 0; j < gi.size(); ++j) p[j] *= q[j];
                } else {
                    double v = other->value[0];
                    for (int64_t j = 0; j < gi.size(); ++j) p[j] *= v;
                }
                if (in->value.same_shape(n->value))
                    accumulate(in, std::move(gi));
                else
                    accumulate(in, collapse_to_scalar(gi));
            }
            break;
        }
        case OpKind::sum: {
            const NodePtr& x = n->inputs[0];
            if (x->requires_grad) accumulate(x, Tensor::full(x->value.shape(), g[0]));
            break;
        }
        case OpKind::tile0: {
            const NodePtr& x = n->inputs[0];
            if (!x->requires_grad) break;
            Tensor dx(x->value.shape());
            double* p = dx.mutable_data();
            const double* gp = g.data();
            int64_t per = dx.size();
            for (int i = 0; i < n->window; ++i) {
                const double* row = gp + static_cast<int64_t>(i) * per;
                for (int64_t j = 0; j < per; ++j) p[j] += row[j];
            }
            accumulate(x, std::move(dx));
            break;
        }
        case OpKind::mse: {
            const NodePtr& a = n->inputs[0];
            const NodePtr& b = n->inputs[1];
            double scale = 2.0 * g[0] / static_cast<double>(a->value.size());
            const double* pa = a->value.data();
            const double* pb = b->value.data();
            if (a->requires_grad) {
                Tensor da(a->value.shape());
                double* p = da.mutable_data();
                for (int64_t i = 0; i < da.size(); ++i) p[i] = scale * (pa[i] - pb[i]);
                accumulate(a, std::move(da));
            }
            if (b->requires_grad) {
                Tensor db(b->value.shape());
                double* p = db.mutable_data();
                for (int64_t i = 0; i < db.size(); ++i) p[i] = scale * (pb[i] - pa[i]);
                accumulate(b, std::move(db));
            }
            break;
        }
    }
}

inline void topo_sort(const NodePtr& root, std::vector<NodePtr>& order) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<NodePtr, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            NodePtr child = node->inputs[next++];
            if (child->requires_grad && seen.insert(child.get()).second)
                stack.emplace_back(std::move(child), 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

/// Backpropagates from a scalar loss. Gradients land in node->grad for every
/// grad-requiring node reachable from the loss; each node is visited once.
inline void backward(const NodePtr& loss) {
    if (loss->value.size() != 1) throw ShapeError("non-scalar-loss: backward needs a scalar");
    if (!loss->requires_grad) return;
    std::vector<NodePtr> order;
    detail::topo_sort(loss, order);
    loss->grad = Tensor::scalar(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) detail::backward_into_inputs(*it);
}

}  // namespace lbd::ad
