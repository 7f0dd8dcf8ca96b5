#pragma once

#include <cstdint>

#include "lbd/attack.hpp"
#include "lbd/data.hpp"
#include "lbd/metrics.hpp"
#include "lbd/model.hpp"
#include "lbd/train.hpp"

namespace lbd {

struct TransferConfig {
    int frozen_layers = 0;  // K: layers 1..K stay frozen during fine-tuning
    int student_classes = 2;
    SgdConfig train;
    int stop_patience = 0;       // early stop on validation plateau; 0 = off
    double val_fraction = 0.1;   // carved from the training data when stopping is on
};

/// Copies the first N-1 layers of the teacher, attaches a fresh head for the
/// student task, and marks layers 1..K frozen.
inline ModelGraph build_student(const ModelGraph& teacher, const TransferConfig& cfg) {
    int n = teacher.layer_count();
    if (cfg.frozen_layers < 0 || cfg.frozen_layers > n - 1)
        throw ShapeError("invalid-K: frozen layer count must be in [0, N-1]");
    if (cfg.student_classes < 2) throw ShapeError("student task needs at least 2 classes");
    ModelGraph student = replace_classification_layer(teacher, cfg.student_classes,
                                                      derive_seed(cfg.train.seed, 0x5D37));
    for (auto& l : student.layers) l.frozen = l.index <= cfg.frozen_layers;
    return student;
}

/// Student-side fine-tuning; frozen layers are bit-identical afterwards.
inline TrainLog fine_tune(ModelGraph& student, const LabeledDataset& X_student,
                          const TransferConfig& cfg) {
    if (cfg.stop_patience <= 0) return train_classifier(student, X_student, cfg.train);

    int n = X_student.size();
    int val_n = std::max(1, static_cast<int>(cfg.val_fraction * n));
    Rng rng(derive_seed(cfg.train.seed, 0x7A1D));
    auto order = rng.sample_without_replacement(static_cast<size_t>(n), static_cast<size_t>(n));
    std::vector<size_t> val_idx(order.begin(), order.begin() + val_n);
    std::vector<size_t> train_idx(order.begin() + val_n, order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    LabeledDataset val = subset(X_student, val_idx);
    LabeledDataset train = subset(X_student, train_idx);

    TrainOptions opt;
    opt.validation = &val;
    opt.stop_patience = cfg.stop_patience;
    return train_classifier(student, train, cfg.train, opt);
}

// ---- structural check that the backdoor survives transfer ----------------------

struct Lemma1Report {
    int frozen_layers = 0;  // K, taken from the student's frozen flags
    int inject_layer = 0;   // K_t
    bool hypothesis_ok = false;      // K >= K_t
    bool prefix_identical = false;   // layers 1..K_t byte-equal teacher vs student
    bool features_carry_over = false;  // poisoned features identical at K_t
    double teacher_gap = 0.0;   // mean D(F^Kt(A(x)), phi) on the teacher
    double student_gap = 0.0;   // same measurement on the student
    double attack_success = 0.0;
};

/// Verifies the structural claim behind the attack: with the first K >= K_t
/// layers frozen, the trigger-to-feature association transfers unchanged and
/// shows up as attack success. A violated hypothesis is reported, not hidden.
inline Lemma1Report verify_lemma1(const ModelGraph& infected_teacher, const ModelGraph& student,
                                  const TriggerSpec& trigger, const LabeledDataset& X_eval,
                                  const LabeledDataset& X_target, int student_target_index) {
    Lemma1Report rep;
    rep.inject_layer = trigger.inject_layer;
    for (const auto& l : student.layers)
        if (l.frozen) rep.frozen_layers = std::max(rep.frozen_layers, l.index);
    rep.hypothesis_ok = rep.frozen_layers >= rep.inject_layer;

    rep.prefix_identical = true;
    for (size_t i = 0; i < student.layers.size(); ++i) {
        if (student.layers[i].index > rep.inject_layer) break;
        for (size_t j = 0; j < student.params[i].size(); ++j)
            if (!student.params[i][j].bit_equal(infected_teacher.params[i][j]))
                rep.prefix_identical = false;
    }

    int probe_n = std::min(32, X_eval.size());
    std::vector<size_t> idx(static_cast<size_t>(probe_n));
    for (int i = 0; i < probe_n; ++i) idx[static_cast<size_t>(i)] = static_cast<size_t>(i);
    Tensor probe = apply_trigger_batch(gather_images(X_eval.images, idx), trigger);
    Tensor f_teacher = feature_at(infected_teacher, rep.inject_layer, probe);
    Tensor f_student = feature_at(student, rep.inject_layer, probe);
    rep.features_carry_over = f_teacher.bit_equal(f_student);

    FeatureTarget phi_t = compute_feature_target(infected_teacher, rep.inject_layer, X_target);
    FeatureTarget phi_s = compute_feature_target(student, rep.inject_layer, X_target);
    rep.teacher_gap = detail::mean_poisoned_gap(infected_teacher, rep.inject_layer, trigger,
                                                X_eval.images, phi_t.phi);
    rep.student_gap =
        detail::mean_poisoned_gap(student, rep.inject_layer, trigger, X_eval.images, phi_s.phi);

    rep.attack_success = attack_success_rate(student, trigger, X_eval, student_target_index);
    return rep;
}

}  // namespace lbd
