#pragma once

#include <vector>

#include "lbd/data.hpp"
#include "lbd/metrics.hpp"
#include "lbd/model.hpp"
#include "lbd/optim.hpp"

namespace lbd {

struct TrainLog {
    std::vector<double> epoch_loss;
    std::vector<double> val_accuracy;
    int epochs_run = 0;
    bool early_stopped = false;
};

struct TrainOptions {
    // when set, per-epoch accuracy on this set drives plateau early stopping
    const LabeledDataset* validation = nullptr;
    int stop_patience = 0;  // epochs without val improvement before stopping; 0 = off
};

/// Single-threaded minibatch training with cross-entropy loss. Frozen layers
/// are never updated. Throws ConvergenceError when the loss has not improved
/// on its initial value after `cfg.patience` epochs.
inline TrainLog train_classifier(ModelGraph& m, const LabeledDataset& data, const SgdConfig& cfg,
                                 const TrainOptions& opt = {}) {
    if (data.size() == 0) throw DataError("training on empty dataset");
    int classes = m.class_count();
    for (int l : data.labels)
        if (l < 0 || l >= classes) throw DataError("label-out-of-range for model head");

    Sgd sgd(cfg.lr, cfg.momentum);
    TrainLog log;
    int n = data.size();
    double best_val = -1.0;
    int since_val_gain = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(epoch)));
        std::vector<size_t> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = static_cast<size_t>(i);
        rng.shuffle(order);

        double loss_sum = 0.0;
        for (int start = 0; start < n; start += cfg.batch) {
            int count = std::min(cfg.batch, n - start);
            std::vector<size_t> idx(order.begin() + start, order.begin() + start + count);
            std::vector<int> labels(static_cast<size_t>(count));
            for (int i = 0; i < count; ++i) labels[static_cast<size_t>(i)] = data.labels[idx[static_cast<size_t>(i)]];

            auto input = ad::leaf(gather_images(data.images, idx));
            GraphBuild gb = build_graph(m, input, /*train_weights=*/true);
            auto loss = ad::softmax_xent(gb.output, std::move(labels));
            ad::backward(loss);
            sgd.step(m, gb.param_leaves);
            loss_sum += loss->value[0] * count;
        }
        log.epoch_loss.push_back(loss_sum / n);
        log.epochs_run = epoch + 1;

        if (cfg.patience > 0 && epoch + 1 > cfg.patience) {
            double best = log.epoch_loss[1];
            for (size_t i = 2; i < log.epoch_loss.size(); ++i)
                best = std::min(best, log.epoch_loss[i]);
            if (best >= log.epoch_loss[0])
                throw ConvergenceError("non-convergence: loss stuck at " +
                                       std::to_string(log.epoch_loss[0]) + " after " +
                                       std::to_string(epoch + 1) + " epochs");
        }

        if (opt.validation && opt.stop_patience > 0) {
            double acc = clean_accuracy(m, *opt.validation);
            log.val_accuracy.push_back(acc);
            if (acc > best_val) {
                best_val = acc;
                since_val_gain = 0;
            } else if (++since_val_gain >= opt.stop_patience) {
                log.early_stopped = true;
                break;
            }
        }
    }
    return log;
}

}  // namespace lbd
