#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lbd/data.hpp"
#include "lbd/model.hpp"
#include "lbd/trigger.hpp"

namespace lbd {

struct MetricsRecord {
    double attack_success_rate = 0.0;
    double clean_accuracy = 0.0;
    int attack_samples = 0;
    int clean_samples = 0;
    uint64_t seed = 0;
    std::string experiment_id;
};

namespace detail {

constexpr int kEvalBatch = 128;

inline std::vector<int> predict(const ModelGraph& m, const Tensor& images) {
    int n = images.dim(0);
    std::vector<int> preds(static_cast<size_t>(n));
    for (int start = 0; start < n; start += kEvalBatch) {
        int count = std::min(kEvalBatch, n - start);
        std::vector<size_t> idx(static_cast<size_t>(count));
        for (int i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(start + i);
        Tensor probs = forward(m, gather_images(images, idx));
        for (int i = 0; i < count; ++i) preds[static_cast<size_t>(start + i)] = argmax_row(probs, i);
    }
    return preds;
}

}  // namespace detail

/// Top-1 accuracy on clean inputs.
inline double clean_accuracy(const ModelGraph& m, const LabeledDataset& ds) {
    if (ds.size() == 0) throw DataError("clean_accuracy on empty dataset");
    int classes = m.class_count();
    for (int l : ds.labels)
        if (l < 0 || l >= classes) throw DataError("label-out-of-range for model");
    auto preds = detail::predict(m, ds.images);
    int hits = 0;
    for (size_t i = 0; i < preds.size(); ++i) hits += (preds[i] == ds.labels[i]);
    return static_cast<double>(hits) / preds.size();
}

/// Fraction of triggered inputs classified as the target's student-space index.
inline double attack_success_rate(const ModelGraph& m, const TriggerSpec& trigger,
                                  const LabeledDataset& eval_set, int target_index) {
    if (eval_set.size() == 0) throw DataError("attack_success_rate on empty dataset");
    if (target_index < 0 || target_index >= m.class_count())
        throw DataError("label-out-of-range: target index");
    Tensor poisoned = apply_trigger_batch(eval_set.images, trigger);
    auto preds = detail::predict(m, poisoned);
    int hits = 0;
    for (int p : preds) hits += (p == target_index);
    return static_cast<double>(hits) / preds.size();
}

// ---- repeated runs -------------------------------------------------------------

struct RunAggregate {
    std::vector<MetricsRecord> runs;
    MetricsRecord mean, min, max;
};

/// Runs an experiment `runs` times with per-run seeds derived from the base
/// seed and aggregates success/accuracy (mean, min, max).
inline RunAggregate run_repeated(const std::function<MetricsRecord(uint64_t)>& experiment,
                                 uint64_t base_seed, int runs) {
    if (runs < 1) throw DataError("run_repeated needs at least one run");
    RunAggregate agg;
    for (int i = 0; i < runs; ++i) {
        MetricsRecord r = experiment(derive_seed(base_seed, static_cast<uint64_t>(i)));
        agg.runs.push_back(r);
    }
    auto fold = [&](auto get, MetricsRecord& mn, MetricsRecord& mx, MetricsRecord& mean,
                    auto set) {
        double lo = get(agg.runs[0]), hi = lo, sum = 0.0;
        for (const auto& r : agg.runs) {
            double v = get(r);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
        set(mn, lo);
        set(mx, hi);
        set(mean, sum / agg.runs.size());
    };
    fold([](const MetricsRecord& r) { return r.attack_success_rate; }, agg.min, agg.max, agg.mean,
         [](MetricsRecord& r, double v) { r.attack_success_rate = v; });
    fold([](const MetricsRecord& r) { return r.clean_accuracy; }, agg.min, agg.max, agg.mean,
         [](MetricsRecord& r, double v) { r.clean_accuracy = v; });
    agg.mean.seed = base_seed;
    return agg;
}

}  // namespace lbd
