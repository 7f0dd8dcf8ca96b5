#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lbd/ad.hpp"
#include "lbd/errors.hpp"
#include "lbd/kernels.hpp"
#include "lbd/rng.hpp"
#include "lbd/tensor.hpp"

namespace lbd {

enum class LayerKind : uint8_t { conv2d = 0, maxpool2d = 1, fully_connected = 2 };
enum class Activation : uint8_t { none = 0, relu = 1, softmax = 2 };

/// One sub-layer. Pooling shares the index of the convolution it follows, so
/// "layer k" in the attack sense means everything up to and including the
/// last sub-layer carrying index k.
struct LayerSpec {
    int index = 0;
    LayerKind kind = LayerKind::conv2d;
    Activation act = Activation::none;
    int out_channels = 0;  // conv filters / fc width; unused for pooling
    int ksize = 0;         // conv filter side / pool window
    int stride = 1;
    bool frozen = false;
    // output units forced to zero by pruning (1 = pruned); empty when unpruned
    std::vector<uint8_t> unit_mask;
};

struct ModelGraph {
    std::vector<int> input_shape;  // [C,H,W]
    std::vector<LayerSpec> layers;
    std::vector<std::vector<Tensor>> params;  // parallel to layers: {W,b} or {}

    /// Highest layer index (the paper-style N).
    int layer_count() const {
        int n = 0;
        for (const auto& l : layers) n = std::max(n, l.index);
        return n;
    }

    int class_count() const {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it)
            if (it->kind == LayerKind::fully_connected) return it->out_channels;
        throw ShapeError("model-has-no-fc-head");
    }

    bool has_params(size_t i) const { return !params[i].empty(); }
};

namespace detail {

inline std::vector<int> sublayer_output_shape(const LayerSpec& l, const std::vector<int>& in) {
    switch (l.kind) {
        case LayerKind::conv2d: {
            if (in.size() != 3) throw ShapeError("shape-mismatch: conv2d needs [c,h,w] input");
            int oh = kern::conv_out_dim(in[1], l.ksize, l.stride);
            int ow = kern::conv_out_dim(in[2], l.ksize, l.stride);
            if (oh <= 0 || ow <= 0) throw ShapeError("shape-mismatch: conv2d output empty");
            return {l.out_channels, oh, ow};
        }
        case LayerKind::maxpool2d: {
            if (in.size() != 3) throw ShapeError("shape-mismatch: maxpool2d needs [c,h,w] input");
            int oh = kern::conv_out_dim(in[1], l.ksize, l.stride);
            int ow = kern::conv_out_dim(in[2], l.ksize, l.stride);
            return {in[0], oh, ow};
        }
        case LayerKind::fully_connected: {
            return {l.out_channels};
        }
    }
    throw ShapeError("unknown-layer-kind");
}

inline int64_t flat_size(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
    double s = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor t(std::move(shape));
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = rng.uniform(-s, s);
    return t;
}

}  // namespace detail

/// (Re)creates parameter tensors for every layer, seeded. Weights are uniform
/// in [-s, s] with s = sqrt(6/(fan_in+fan_out)); biases start at zero.
inline void init_params(ModelGraph& m, uint64_t seed) {
    Rng rng(seed);
    m.params.assign(m.layers.size(), {});
    std::vector<int> cur = m.input_shape;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        LayerSpec& l = m.layers[i];
        switch (l.kind) {
            case LayerKind::conv2d: {
                int ci = cur[0];
                int fan_in = ci * l.ksize * l.ksize;
                int fan_out = l.out_channels * l.ksize * l.ksize;
                m.params[i] = {detail::glorot_uniform({l.out_channels, ci, l.ksize, l.ksize},
                                                      fan_in, fan_out, rng),
                               Tensor::zeros({l.out_channels})};
                break;
            }
            case LayerKind::fully_connected: {
                int in = static_cast<int>(detail::flat_size(cur));
                m.params[i] = {detail::glorot_uniform({l.out_channels, in}, in, l.out_channels, rng),
                               Tensor::zeros({l.out_channels})};
                break;
            }
            case LayerKind::maxpool2d:
                break;
        }
        cur = detail::sublayer_output_shape(l, cur);
    }
}

/// Digit-task teacher: two 5x5 conv+pool stages, a 512-wide hidden FC and a
/// 5-way softmax head. Indices follow the shared-pool convention, N = 4.
inline ModelGraph build_digit_teacher(uint64_t seed = 1) {
    ModelGraph m;
    m.input_shape = {1, 28, 28};
    m.layers = {
        {1, LayerKind::conv2d, Activation::relu, 16, 5, 1, false, {}},
        {1, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
        {2, LayerKind::conv2d, Activation::relu, 32, 5, 1, false, {}},
        {2, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
        {3, LayerKind::fully_connected, Activation::relu, 512, 0, 1, false, {}},
        {4, LayerKind::fully_connected, Activation::softmax, 5, 0, 1, false, {}},
    };
    init_params(m, seed);
    return m;
}

/// Medium six-conv architecture (traffic-sign shaped); N = 8.
inline ModelGraph build_medium_teacher(int classes = 43, uint64_t seed = 1,
                                       std::vector<int> input_shape = {3, 32, 32}) {
    ModelGraph m;
    m.input_shape = std::move(input_shape);
    m.layers = {
        {1, LayerKind::conv2d, Activation::relu, 32, 3, 1, false, {}},
        {2, LayerKind::conv2d, Activation::relu, 32, 3, 1, false, {}},
        {2, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
        {3, LayerKind::conv2d, Activation::relu, 64, 3, 1, false, {}},
        {4, LayerKind::conv2d, Activation::relu, 64, 3, 1, false, {}},
        {4, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
        {5, LayerKind::conv2d, Activation::relu, 128, 3, 1, false, {}},
        {6, LayerKind::conv2d, Activation::relu, 128, 3, 1, false, {}},
        {6, LayerKind::maxpool2d, Activation::none, 0, 2, 2, false, {}},
        {7, LayerKind::fully_connected, Activation::relu, 512, 0, 1, false, {}},
        {8, LayerKind::fully_connected, Activation::softmax, classes, 0, 1, false, {}},
    };
    init_params(m, seed);
    return m;
}

namespace detail {

inline void check_input(const ModelGraph& m, const Tensor& x) {
    if (x.ndim() != 4 || x.dim(1) != m.input_shape[0] || x.dim(2) != m.input_shape[1] ||
        x.dim(3) != m.input_shape[2])
        throw ShapeError("shape-mismatch: model input " + x.shape_str());
}

}  // namespace detail

/// Inference pass. Returns the post-activation output of the last sub-layer
/// carrying index `upto` (pooling included); softmax probabilities when the
/// stopping layer is the softmax head. upto = 0 means the full model.
inline Tensor forward_upto(const ModelGraph& m, const Tensor& x, int upto) {
    detail::check_input(m, x);
    if (upto != 0 && (upto < 1 || upto > m.layer_count()))
        throw ShapeError("index-out-of-range: layer index");
    Tensor cur = x;
    Tensor result;
    bool found = false;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        if (upto != 0 && l.index > upto) break;
        switch (l.kind) {
            case LayerKind::conv2d:
                cur = kern::conv2d_forward(cur, m.params[i][0], m.params[i][1], l.stride);
                break;
            case LayerKind::maxpool2d:
                cur = kern::maxpool2d_forward(cur, l.ksize, l.stride, nullptr);
                break;
            case LayerKind::fully_connected:
                if (cur.ndim() == 4)
                    cur = cur.reshaped({cur.dim(0), static_cast<int>(cur.size() / cur.dim(0))});
                cur = kern::fc_forward(cur, m.params[i][0], m.params[i][1]);
                break;
        }
        if (l.act == Activation::relu) cur = kern::relu_forward(cur);
        if (l.act == Activation::softmax) cur = softmax_rows(cur);
        if (upto == 0 || l.index == upto) {
            result = cur;
            found = true;
        }
    }
    if (!found) throw ShapeError("index-out-of-range: layer index");
    return result;
}

/// Full forward; emits class probabilities [n, classes].
inline Tensor forward(const ModelGraph& m, const Tensor& x) { return forward_upto(m, x, 0); }

/// Intermediate feature at layer k (post activation, post shared-index pool).
inline Tensor feature_at(const ModelGraph& m, int k, const Tensor& x) {
    if (k < 1 || k > m.layer_count()) throw ShapeError("index-out-of-range: layer index");
    return forward_upto(m, x, k);
}

// ---- training-graph construction -------------------------------------------

struct ParamLeaf {
    size_t layer;  // position in ModelGraph::layers
    size_t param;  // 0 = W, 1 = b
    ad::NodePtr node;
};

struct GraphBuild {
    ad::NodePtr output;                       // logits of last fc (pre-softmax)
    std::map<int, ad::NodePtr> index_output;  // paper index -> feature node
    std::vector<ParamLeaf> param_leaves;
};

/// Builds the autodiff graph for one batch. Weight leaves require grad unless
/// their layer is frozen (or train_weights is false). stop_at = 0 runs the
/// whole stack and leaves `output` at the final logits. Passing `share`
/// reuses another build's weight leaves so gradients from several forward
/// paths accumulate into the same tensors.
inline GraphBuild build_graph(const ModelGraph& m, const ad::NodePtr& input, bool train_weights,
                              int stop_at = 0, const GraphBuild* share = nullptr) {
    detail::check_input(m, input->value);
    GraphBuild gb;
    auto param_leaf = [&](size_t layer, size_t param, bool trainable) {
        if (share) {
            for (const auto& pl : share->param_leaves)
                if (pl.layer == layer && pl.param == param) {
                    gb.param_leaves.push_back(pl);
                    return pl.node;
                }
        }
        auto node = ad::leaf(m.params[layer][param], trainable);
        gb.param_leaves.push_back({layer, param, node});
        return node;
    };
    ad::NodePtr cur = input;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        if (stop_at != 0 && l.index > stop_at) break;
        bool trainable = train_weights && !l.frozen;
        switch (l.kind) {
            case LayerKind::conv2d:
                cur = ad::conv2d(cur, param_leaf(i, 0, trainable), param_leaf(i, 1, trainable),
                                 l.stride);
                break;
            case LayerKind::maxpool2d:
                cur = ad::maxpool2d(cur, l.ksize, l.stride);
                break;
            case LayerKind::fully_connected:
                if (cur->value.ndim() == 4)
                    cur = ad::reshape(cur, {cur->value.dim(0),
                                            static_cast<int>(cur->value.size() / cur->value.dim(0))});
                cur = ad::fully_connected(cur, param_leaf(i, 0, trainable),
                                          param_leaf(i, 1, trainable));
                break;
        }
        if (l.act == Activation::relu) cur = ad::relu(cur);
        // softmax itself is fused into the loss; logits are the graph output
        gb.output = cur;
        gb.index_output[l.index] = cur;
    }
    return gb;
}

// ---- head replacement / wiping ----------------------------------------------

struct HeadSnapshot {
    LayerSpec spec;
    std::vector<Tensor> params;
};

inline size_t head_position(const ModelGraph& m) {
    if (m.layers.empty() || m.layers.back().kind != LayerKind::fully_connected ||
        m.layers.back().act != Activation::softmax)
        throw ShapeError("model-has-no-fc-head");
    return m.layers.size() - 1;
}

inline HeadSnapshot snapshot_head(const ModelGraph& m) {
    size_t h = head_position(m);
    return {m.layers[h], m.params[h]};
}

/// Swaps in a freshly initialized softmax head of the requested width.
/// Every other layer's weights are shared bit-identically with the input.
inline ModelGraph replace_classification_layer(const ModelGraph& m, int new_classes,
                                               uint64_t seed) {
    if (new_classes < 2) throw ShapeError("class count must be at least 2");
    size_t h = head_position(m);
    ModelGraph out = m;
    out.layers[h].out_channels = new_classes;
    out.layers[h].unit_mask.clear();
    int in = m.params[h][0].dim(1);
    Rng rng(seed);
    out.params[h] = {detail::glorot_uniform({new_classes, in}, in, new_classes, rng),
                     Tensor::zeros({new_classes})};
    return out;
}

/// Restores a previously snapshotted head (the trace-wiping step).
inline ModelGraph restore_head(const ModelGraph& m, const HeadSnapshot& snap) {
    size_t h = head_position(m);
    if (snap.spec.kind != LayerKind::fully_connected ||
        snap.params[0].dim(1) != m.params[h][0].dim(1))
        throw ShapeError("snapshot-shape-mismatch: head input width differs");
    ModelGraph out = m;
    out.layers[h] = snap.spec;
    out.params[h] = snap.params;
    return out;
}

/// Layer positions whose parameters differ bitwise between two models.
inline std::vector<size_t> layers_differing(const ModelGraph& a, const ModelGraph& b) {
    std::vector<size_t> diff;
    size_t n = std::min(a.layers.size(), b.layers.size());
    for (size_t i = 0; i < n; ++i) {
        if (a.params[i].size() != b.params[i].size()) {
            diff.push_back(i);
            continue;
        }
        for (size_t j = 0; j < a.params[i].size(); ++j)
            if (!a.params[i][j].bit_equal(b.params[i][j])) {
                diff.push_back(i);
                break;
            }
    }
    for (size_t i = n; i < std::max(a.layers.size(), b.layers.size()); ++i) diff.push_back(i);
    return diff;
}

inline bool models_bit_equal(const ModelGraph& a, const ModelGraph& b) {
    if (a.input_shape != b.input_shape || a.layers.size() != b.layers.size()) return false;
    return layers_differing(a, b).empty();
}

}  // namespace lbd
