#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lbd/data.hpp"
#include "lbd/metrics.hpp"
#include "lbd/model.hpp"
#include "lbd/optim.hpp"
#include "lbd/train.hpp"
#include "lbd/trigger.hpp"

namespace lbd {

/// Representative feature of the target class at the injection layer. Under
/// the MSE distance this is the elementwise mean of the target features.
struct FeatureTarget {
    Tensor phi;  // [1, feature dims]
};

struct InjectionConfig {
    double lambda = 1.0;  // balance between task loss and feature-matching loss
    double lr = 0.01;
    double momentum = 0.9;
    int epochs = 10;
    int batch = 64;
    int trigger_opt_steps = 500;
    double trigger_opt_rate = 0.1;
    int trigger_batch = 64;
    int phi_refresh_epochs = 1;   // recompute phi from the live model every k epochs
    double eps_feat_ratio = 0.1;  // convergence gap as a fraction of the baseline gap
    double accuracy_budget = 0.03;
    bool enforce_convergence = true;
    uint64_t seed = 1;
    int patience = 3;
};

inline FeatureTarget compute_feature_target(const ModelGraph& m, int inject_layer,
                                            const LabeledDataset& X_target) {
    if (X_target.size() == 0) throw DataError("feature target needs a nonempty X_target");
    Tensor feats = feature_at(m, inject_layer, X_target.images);
    int n = feats.dim(0);
    int64_t per = feats.size() / n;
    std::vector<int> shape = feats.shape();
    shape[0] = 1;
    Tensor phi(shape);
    double* p = phi.mutable_data();
    const double* f = feats.data();
    for (int i = 0; i < n; ++i)
        for (int64_t j = 0; j < per; ++j) p[j] += f[static_cast<int64_t>(i) * per + j];
    for (int64_t j = 0; j < per; ++j) p[j] /= n;
    return {phi};
}

// ---- step 1: adjust the teacher to include the target class --------------------

struct RetrainResult {
    ModelGraph model;           // head widened by one class, fully retrained
    HeadSnapshot original_head; // kept for the wipe step
    int target_class_index;    // y_t's index in the widened head
    TrainLog log;
};

/// Widens the classification head with a class for the target and retrains on
/// X_nontarget plus X_target (all layers trainable).
inline RetrainResult retrain_with_target(const ModelGraph& teacher,
                                         const LabeledDataset& X_target,
                                         const LabeledDataset& X_nontarget,
                                         const SgdConfig& cfg) {
    if (X_target.size() == 0 || X_nontarget.size() == 0)
        throw DataError("retrain_with_target needs nonempty datasets");
    if (!datasets_disjoint({&X_target, &X_nontarget}))
        throw DataError("X_target and X_nontarget overlap");

    RetrainResult r;
    r.original_head = snapshot_head(teacher);
    int base_classes = teacher.class_count();
    r.target_class_index = base_classes;
    r.model = replace_classification_layer(teacher, base_classes + 1,
                                           derive_seed(cfg.seed, 0xAD11));

    LabeledDataset target_relabeled = X_target;
    for (auto& l : target_relabeled.labels) l = r.target_class_index;
    target_relabeled.class_count = base_classes + 1;
    LabeledDataset combined = concat(X_nontarget, target_relabeled);
    combined.class_count = base_classes + 1;

    r.log = train_classifier(r.model, combined, cfg);
    return r;
}

// ---- step 2: trigger generation -------------------------------------------------

struct TriggerGenReport {
    double objective_initial = 0.0;  // exact pairwise objective at the starting pattern
    double objective_final = 0.0;
    std::vector<double> step_loss;  // minibatch feature loss every few steps
};

namespace detail {

// Exact value of the generation objective:
//   sum_x sum_{x_t} D(F(A(x)), F(x_t))
// evaluated through the identity
//   sum_{x_t} D(f, F(x_t)) = |X_t| * D(f, phi) + sum_{x_t} D(F(x_t), phi),
// which holds elementwise for the squared distance.
inline double trigger_objective(const ModelGraph& m, int k, const TriggerSpec& trig,
                                const Tensor& union_images, const Tensor& target_feats,
                                const Tensor& phi) {
    int nt = target_feats.dim(0);
    int64_t per = target_feats.size() / nt;
    double spread = 0.0;
    std::vector<int> fshape = phi.shape();
    for (int i = 0; i < nt; ++i) {
        std::vector<size_t> one{static_cast<size_t>(i)};
        spread += mse(gather_images(target_feats, one), phi);
    }
    double total = 0.0;
    int n = union_images.dim(0);
    constexpr int kChunk = 128;
    for (int start = 0; start < n; start += kChunk) {
        int count = std::min(kChunk, n - start);
        std::vector<size_t> idx(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(start + i);
        Tensor batch = apply_trigger_batch(gather_images(union_images, idx), trig);
        Tensor feats = feature_at(m, k, batch);
        for (int i = 0; i < count; ++i) {
            std::vector<size_t> one{static_cast<size_t>(i)};
            total += nt * mse(gather_images(feats, one), phi);
        }
    }
    total += static_cast<double>(n) * spread;
    return total;
}

inline void clamp01(Tensor& t) {
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = std::min(1.0, std::max(0.0, p[i]));
}

inline Tensor masked(const Tensor& pattern, const Tensor& mask) {
    Tensor out = pattern;
    double* p = out.mutable_data();
    const double* m = mask.data();
    for (int64_t i = 0; i < out.size(); ++i) p[i] *= m[i];
    return out;
}

}  // namespace detail

/// Searches for the trigger pattern whose poisoned samples land near the
/// target class in feature space at the injection layer. Gradient descent on
/// the pattern only; the model is read-only throughout. Fails when the exact
/// objective has not at least halved.
inline TriggerSpec generate_trigger(const ModelGraph& m, const Tensor& mask, int inject_layer,
                                    const LabeledDataset& X_target,
                                    const LabeledDataset& X_nontarget,
                                    const InjectionConfig& cfg,
                                    TriggerGenReport* report = nullptr,
                                    const std::string& target_name = "") {
    require_binary_mask(mask);
    if (mask_area(mask) == 0) throw ShapeError("mask-empty");
    if (inject_layer < 1 || inject_layer > m.layer_count())
        throw ShapeError("index-out-of-range: inject layer");
    if (X_target.size() == 0) throw DataError("generate_trigger needs target samples");

    LabeledDataset union_set = concat(X_nontarget, X_target);
    FeatureTarget ft = compute_feature_target(m, inject_layer, X_target);
    Tensor target_feats = feature_at(m, inject_layer, X_target.images);

    TriggerSpec trig;
    trig.mask = mask;
    trig.inject_layer = inject_layer;
    trig.seed = cfg.seed;
    trig.target_name = target_name;
    trig.pattern = detail::masked(random_pattern(mask.shape(), derive_seed(cfg.seed, 0x7716)), mask);

    TriggerGenReport local;
    TriggerGenReport& rep = report ? *report : local;
    rep.objective_initial =
        detail::trigger_objective(m, inject_layer, trig, union_set.images, target_feats, ft.phi);

    int n = union_set.size();
    int count = std::min(cfg.trigger_batch, n);
    Tensor one_minus_mask = mask;
    {
        double* p = one_minus_mask.mutable_data();
        for (int64_t i = 0; i < one_minus_mask.size(); ++i) p[i] = 1.0 - p[i];
    }
    // tiling the target feature makes the batch MSE the mean per-sample distance
    Tensor phi_image = ft.phi.reshaped(
        std::vector<int>(ft.phi.shape().begin() + 1, ft.phi.shape().end()));
    Tensor phi_tiled = tile_batch(phi_image, count);

    for (int step = 0; step < cfg.trigger_opt_steps; ++step) {
        Rng rng(derive_seed(cfg.seed, 0x57E0 + static_cast<uint64_t>(step)));
        auto idx = rng.sample_without_replacement(static_cast<size_t>(n),
                                                  static_cast<size_t>(count));
        Tensor batch = gather_images(union_set.images, idx);

        // (1-m).*x is constant w.r.t. the pattern; only m.*pattern needs grad
        Tensor clean_part = batch;
        {
            double* p = clean_part.mutable_data();
            const double* mm = one_minus_mask.data();
            int64_t per = mask.size();
            for (int i = 0; i < count; ++i)
                for (int64_t j = 0; j < per; ++j) p[static_cast<int64_t>(i) * per + j] *= mm[j];
        }
        auto pattern_leaf = ad::leaf(trig.pattern, /*requires_grad=*/true);
        auto poisoned = ad::add(ad::leaf(clean_part),
                                ad::tile0(ad::mul(ad::leaf(mask), pattern_leaf), count));
        GraphBuild gb = build_graph(m, poisoned, /*train_weights=*/false, inject_layer);
        auto loss = ad::mse_loss(gb.output, ad::leaf(phi_tiled));
        ad::backward(loss);
        if ((step & 15) == 0) rep.step_loss.push_back(loss->value[0]);

        const Tensor& g = pattern_leaf->grad;
        double* p = trig.pattern.mutable_data();
        const double* gp = g.data();
        for (int64_t i = 0; i < trig.pattern.size(); ++i)
            p[i] -= cfg.trigger_opt_rate * gp[i];
        detail::clamp01(trig.pattern);
    }
    trig.pattern = detail::masked(trig.pattern, mask);

    rep.objective_final =
        detail::trigger_objective(m, inject_layer, trig, union_set.images, target_feats, ft.phi);
    if (rep.objective_final > 0.5 * rep.objective_initial)
        throw ConvergenceError("objective-not-decreasing: trigger objective went from " +
                               std::to_string(rep.objective_initial) + " to " +
                               std::to_string(rep.objective_final));
    return trig;
}

// ---- step 3: backdoor injection --------------------------------------------------

struct InjectionReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_feature_gap;           // mean over targets
    std::vector<std::vector<double>> per_target_gap;  // per epoch
    double baseline_gap = 0.0;  // clean-feature distance to phi before injection
    double eps_feat = 0.0;
    double final_gap = 0.0;
    double pre_accuracy = 0.0;
    double post_accuracy = 0.0;
};

namespace detail {

inline double mean_poisoned_gap(const ModelGraph& m, int k, const TriggerSpec& trig,
                                const Tensor& images, const Tensor& phi) {
    int n = images.dim(0);
    double total = 0.0;
    constexpr int kChunk = 128;
    for (int start = 0; start < n; start += kChunk) {
        int count = std::min(kChunk, n - start);
        std::vector<size_t> idx(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(start + i);
        Tensor feats = feature_at(m, k, apply_trigger_batch(gather_images(images, idx), trig));
        for (int i = 0; i < count; ++i) {
            std::vector<size_t> one{static_cast<size_t>(i)};
            total += mse(gather_images(feats, one), phi);
        }
    }
    return total / n;
}

inline double mean_clean_gap(const ModelGraph& m, int k, const Tensor& images, const Tensor& phi) {
    TriggerSpec identity;
    identity.mask = Tensor::zeros(std::vector<int>{images.dim(1), images.dim(2), images.dim(3)});
    identity.pattern = identity.mask;
    return mean_poisoned_gap(m, k, identity, images, phi);
}

}  // namespace detail

/// Joint injection for one or more targets. Minimizes
///   l(y, F(x)) + lambda * sum_i D(F^k(A_i(x)), phi_i)
/// over the union of non-target and target data. phi_i is refreshed from the
/// live model at the configured epoch interval.
inline ModelGraph inject_targets(const ModelGraph& model, const std::vector<TriggerSpec>& triggers,
                                 const std::vector<const LabeledDataset*>& target_sets,
                                 const std::vector<int>& target_class_idx,
                                 const LabeledDataset& X_nontarget, const InjectionConfig& cfg,
                                 InjectionReport* report = nullptr) {
    size_t T = triggers.size();
    if (T == 0 || target_sets.size() != T || target_class_idx.size() != T)
        throw DataError("inject_targets: trigger/target list mismatch");
    int k = triggers[0].inject_layer;
    for (const auto& t : triggers)
        if (t.inject_layer != k) throw DataError("inject_targets: differing inject layers");

    ModelGraph m = model;
    int classes = m.class_count();

    LabeledDataset combined = X_nontarget;
    for (size_t i = 0; i < T; ++i) {
        LabeledDataset tg = *target_sets[i];
        if (tg.size() == 0) throw DataError("inject_targets: empty target set");
        if (target_class_idx[i] < 0 || target_class_idx[i] >= classes)
            throw DataError("inject_targets: target class outside model head");
        for (auto& l : tg.labels) l = target_class_idx[i];
        combined = concat(combined, tg);
    }
    combined.class_count = classes;

    InjectionReport local;
    InjectionReport& rep = report ? *report : local;
    rep.per_target_gap.clear();

    std::vector<FeatureTarget> phis(T);
    for (size_t i = 0; i < T; ++i) phis[i] = compute_feature_target(m, k, *target_sets[i]);

    double baseline = 0.0;
    for (size_t i = 0; i < T; ++i)
        baseline += detail::mean_clean_gap(m, k, combined.images, phis[i].phi);
    rep.baseline_gap = baseline / static_cast<double>(T);
    rep.eps_feat = cfg.eps_feat_ratio * rep.baseline_gap;
    rep.pre_accuracy = clean_accuracy(m, combined);

    Sgd sgd(cfg.lr, cfg.momentum);
    int n = combined.size();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && cfg.phi_refresh_epochs > 0 && epoch % cfg.phi_refresh_epochs == 0)
            for (size_t i = 0; i < T; ++i) phis[i] = compute_feature_target(m, k, *target_sets[i]);

        Rng rng(derive_seed(cfg.seed, 0x13EC7 + static_cast<uint64_t>(epoch)));
        std::vector<size_t> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<size_t>(i);
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch) {
            int count = std::min(cfg.batch, n - start);
            std::vector<size_t> idx(order.begin() + start, order.begin() + start + count);
            std::vector<int> labels(static_cast<size_t>(count));
            for (int i = 0; i < count; ++i)
                labels[static_cast<size_t>(i)] = combined.labels[idx[static_cast<size_t>(i)]];
            Tensor batch = gather_images(combined.images, idx);

            GraphBuild clean_gb = build_graph(m, ad::leaf(batch), /*train_weights=*/true);
            ad::NodePtr loss = ad::softmax_xent(clean_gb.output, std::move(labels));
            for (size_t i = 0; i < T; ++i) {
                auto poisoned = ad::leaf(apply_trigger_batch(batch, triggers[i]));
                GraphBuild pois_gb =
                    build_graph(m, poisoned, /*train_weights=*/true, k, &clean_gb);
                const Tensor& phi = phis[i].phi;
                Tensor phi_image = phi.reshaped(
                    std::vector<int>(phi.shape().begin() + 1, phi.shape().end()));
                auto gap = ad::mse_loss(pois_gb.output, ad::leaf(tile_batch(phi_image, count)));
                loss = ad::add(loss, ad::mul(ad::leaf(Tensor::scalar(cfg.lambda)), gap));
            }
            ad::backward(loss);
            sgd.step(m, clean_gb.param_leaves);
            loss_sum += loss->value[0] * count;
        }
        rep.epoch_loss.push_back(loss_sum / n);

        std::vector<double> gaps(T);
        double gap_mean = 0.0;
        for (size_t i = 0; i < T; ++i) {
            gaps[i] = detail::mean_poisoned_gap(m, k, triggers[i], combined.images, phis[i].phi);
            gap_mean += gaps[i];
        }
        rep.per_target_gap.push_back(gaps);
        rep.epoch_feature_gap.push_back(gap_mean / static_cast<double>(T));
    }

    for (size_t i = 0; i < T; ++i) phis[i] = compute_feature_target(m, k, *target_sets[i]);
    double final_gap = 0.0;
    for (size_t i = 0; i < T; ++i)
        final_gap += detail::mean_poisoned_gap(m, k, triggers[i], combined.images, phis[i].phi);
    rep.final_gap = final_gap / static_cast<double>(T);
    rep.post_accuracy = clean_accuracy(m, combined);

    if (cfg.enforce_convergence) {
        if (rep.final_gap > rep.eps_feat)
            throw ConvergenceError("feature-gap-too-large: " + std::to_string(rep.final_gap) +
                                   " > " + std::to_string(rep.eps_feat));
        if (rep.post_accuracy < rep.pre_accuracy - cfg.accuracy_budget)
            throw ConvergenceError("non-convergence: clean accuracy dropped from " +
                                   std::to_string(rep.pre_accuracy) + " to " +
                                   std::to_string(rep.post_accuracy));
    }
    return m;
}

/// Single-target injection (the standard pipeline step).
inline std::pair<ModelGraph, FeatureTarget> inject_backdoor(const ModelGraph& model,
                                                            const TriggerSpec& trigger,
                                                            const LabeledDataset& X_target,
                                                            const LabeledDataset& X_nontarget,
                                                            int target_class_idx,
                                                            const InjectionConfig& cfg,
                                                            InjectionReport* report = nullptr) {
    ModelGraph out = inject_targets(model, {trigger}, {&X_target}, {target_class_idx},
                                    X_nontarget, cfg, report);
    return {out, compute_feature_target(out, trigger.inject_layer, X_target)};
}

// ---- step 4: trace wiping ---------------------------------------------------------

/// Swaps the infected model's head for the pre-attack snapshot; the target
/// class disappears from the label space while layers 1..N-1 keep the
/// injected weights.
inline ModelGraph wipe_target_trace(const ModelGraph& infected, const HeadSnapshot& original) {
    return restore_head(infected, original);
}

// ---- multi-target -----------------------------------------------------------------

struct MultiTargetResult {
    ModelGraph model;
    std::vector<TriggerSpec> triggers;
    std::vector<int> target_class_idx;
    InjectionReport report;
};

/// Generates a distinct pattern per target (same mask geometry by default)
/// and injects all feature terms jointly.
inline MultiTargetResult inject_multi_target(const ModelGraph& model,
                                             const std::vector<Tensor>& masks,
                                             const std::vector<const LabeledDataset*>& target_sets,
                                             const std::vector<int>& target_class_idx,
                                             const LabeledDataset& X_nontarget, int inject_layer,
                                             const InjectionConfig& cfg) {
    if (masks.size() != target_sets.size() || masks.size() != target_class_idx.size())
        throw DataError("inject_multi_target: list size mismatch");
    MultiTargetResult r;
    r.target_class_idx = target_class_idx;
    for (size_t i = 0; i < masks.size(); ++i) {
        InjectionConfig tcfg = cfg;
        tcfg.seed = derive_seed(cfg.seed, 0x3A97 + i);
        r.triggers.push_back(generate_trigger(model, masks[i], inject_layer, *target_sets[i],
                                              X_nontarget, tcfg, nullptr,
                                              "target-" + std::to_string(i)));
    }
    r.model = inject_targets(model, r.triggers, target_sets, target_class_idx, X_nontarget, cfg,
                             &r.report);
    return r;
}

}  // namespace lbd
