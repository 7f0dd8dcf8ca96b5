#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "lbd/errors.hpp"
#include "lbd/model.hpp"

namespace lbd {

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    int batch = 64;
    int epochs = 10;
    uint64_t seed = 1;
    // epochs allowed without any improvement over the initial loss before
    // training is declared non-convergent; 0 disables the check
    int patience = 3;
};

/// Re-zeroes weights of pruned output units so they stay dead through
/// subsequent updates.
inline void apply_unit_masks(ModelGraph& m) {
    for (size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& l = m.layers[i];
        if (l.unit_mask.empty() || m.params[i].empty()) continue;
        Tensor& w = m.params[i][0];
        Tensor& b = m.params[i][1];
        int64_t row = w.size() / w.dim(0);
        double* wp = w.mutable_data();
        double* bp = b.mutable_data();
        for (int u = 0; u < w.dim(0); ++u) {
            if (!l.unit_mask[static_cast<size_t>(u)]) continue;
            double* r = wp + static_cast<int64_t>(u) * row;
            for (int64_t j = 0; j < row; ++j) r[j] = 0.0;
            bp[u] = 0.0;
        }
    }
}

/// Momentum SGD. Velocity state is keyed per parameter slot and persists
/// across steps; frozen layers are never touched.
class Sgd {
public:
    Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

    /// v <- momentum * v + g;  w <- w - lr * v
    void update(Tensor& w, const Tensor& g, uint64_t key) {
        require_same_shape(w, g, "sgd update");
        auto [it, fresh] = velocity_.try_emplace(key, Tensor::zeros(w.shape()));
        Tensor& v = it->second;
        double* vp = v.mutable_data();
        double* wp = w.mutable_data();
        const double* gp = g.data();
        for (int64_t i = 0; i < w.size(); ++i) {
            vp[i] = momentum_ * vp[i] + gp[i];
            wp[i] -= lr_ * vp[i];
        }
    }

    /// Applies one step from a backward pass. Every trainable leaf must carry
    /// a gradient; frozen leaves are skipped and stay bit-identical.
    void step(ModelGraph& m, const std::vector<ParamLeaf>& leaves) {
        for (const auto& leaf : leaves) {
            if (!leaf.node->requires_grad) continue;
            if (!leaf.node->grad.defined())
                throw Error("missing-gradient: trainable weight has no gradient");
            update(m.params[leaf.layer][leaf.param], leaf.node->grad,
                   (static_cast<uint64_t>(leaf.layer) << 1) | leaf.param);
        }
        apply_unit_masks(m);
    }

    double lr() const { return lr_; }

private:
    double lr_;
    double momentum_;
    std::map<uint64_t, Tensor> velocity_;
};

}  // namespace lbd
