#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cxrnet/checkpoint.hpp"
#include "cxrnet/config.hpp"
#include "cxrnet/dataset.hpp"
#include "cxrnet/layers.hpp"
#include "cxrnet/metrics.hpp"
#include "cxrnet/model.hpp"
#include "cxrnet/optim.hpp"

namespace cxr {

struct TrainHyper {
    double lr = 1e-4;
    int epochs = 20;
    int patience = 3;
    int stop_patience = 6;
    double min_delta = 1e-4;
    double lr_factor = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 42;

    static TrainHyper from(const RunConfig& c) {
        return {c.lr,         c.epochs,     c.patience,   c.stop_patience, c.min_delta,
                c.lr_factor,  c.adam_beta1, c.adam_beta2, c.adam_epsilon,  c.seed};
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0;
    double train_acc = 0;
    double val_loss = 0;
    double val_acc = 0;
    double lr = 0;  // learning rate after this epoch's plateau check
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val_loss = 0;
    bool stopped_early = false;
};

inline std::string history_text(const TrainHistory& h) {
    std::string s = "# epoch train_loss train_acc val_loss val_acc lr\n";
    char buf[160];
    for (const auto& r : h.epochs) {
        std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6g\n", r.epoch, r.train_loss, r.train_acc,
                      r.val_loss, r.val_acc, r.lr);
        s += buf;
    }
    return s;
}

template <typename Real>
struct StepResult {
    double loss = 0;
    long correct = 0;
};

// One optimizer step: forward (train mode), mean BCE, backward, Adam update.
template <typename Real>
StepResult<Real> train_step(Model<Real>& model, AdamState<Real>& adam, const Batch<Real>& batch, Rng& dropout_rng) {
    const Tensor<Real> logits = model.forward(batch.inputs, Mode::train, &dropout_rng);
    const Tensor<Real> probs = sigmoid(logits);
    const auto bce = bce_loss(batch.labels, probs);
    require(std::isfinite(bce.loss), ErrorKind::numerical, "loss is not finite");
    model.backward(sigmoid_backward(bce.grad, probs));
    const auto params = model.parameters();
    adam_step<Real>(params, adam);
    StepResult<Real> r{bce.loss, 0};
    for (std::size_t i = 0; i < probs.size(); ++i)
        r.correct += (probs[i] > Real(0.5)) == (batch.labels[i] > Real(0.5)) ? 1 : 0;
    return r;
}

struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;
    double loss = 0;
};

template <typename Real>
ScoredSet score_split(Model<Real>& model, Loader<Real>& loader) {
    ScoredSet out;
    double loss_sum = 0;
    auto cursor = loader.epoch(0);
    while (auto batch = cursor.next()) {
        const Tensor<Real> probs = model.predict_proba(batch->inputs);
        loss_sum += bce_loss(batch->labels, probs).loss * static_cast<double>(probs.size());
        for (std::size_t i = 0; i < probs.size(); ++i) {
            out.scores.push_back(static_cast<double>(probs[i]));
            out.labels.push_back(batch->labels[i] > Real(0.5) ? 1 : 0);
        }
    }
    out.loss = loss_sum / static_cast<double>(out.scores.size());
    return out;
}

template <typename Real>
EvalReport evaluate(Model<Real>& model, Loader<Real>& loader) {
    const ScoredSet s = score_split(model, loader);
    EvalReport r = evaluate_scores(s.scores, s.labels);
    r.loss = s.loss;
    return r;
}

template <typename Real>
using Validator = std::function<EvalReport(Model<Real>&)>;

struct TrainOptions {
    std::optional<std::string> checkpoint_path;  // best-validation-loss model is written here
    RunConfig run;                               // embedded in the checkpoint
    std::ostream* log = nullptr;
};

// Epoch loop: shuffle, batch steps, validation, LR-on-plateau, early stop. The
// model is left holding the lowest-validation-loss weights.
template <typename Real>
TrainHistory train(Model<Real>& model, Loader<Real>& train_loader, const Validator<Real>& validate,
                   const TrainHyper& hyper, const TrainOptions& opts = {}) {
    AdamState<Real> adam;
    adam.lr = hyper.lr;
    adam.beta1 = hyper.beta1;
    adam.beta2 = hyper.beta2;
    adam.epsilon = hyper.epsilon;
    PlateauState plateau;
    plateau.patience = hyper.patience;
    plateau.stop_patience = hyper.stop_patience;
    plateau.factor = hyper.lr_factor;
    plateau.min_delta = hyper.min_delta;

    TrainHistory history;
    std::vector<Tensor<Real>> best;
    double best_loss = std::numeric_limits<double>::infinity();

    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        Rng dropout_rng = Rng::derive(hyper.seed, {0xd0ULL, static_cast<std::uint64_t>(epoch)});
        double loss_sum = 0;
        long correct = 0, seen = 0;
        int batch_no = 0;
        auto cursor = train_loader.epoch(epoch);
        while (auto batch = cursor.next()) {
            ++batch_no;
            StepResult<Real> step;
            try {
                step = train_step(model, adam, *batch, dropout_rng);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::numerical) throw;
                fail(ErrorKind::numerical, "epoch " + std::to_string(epoch) + " batch " +
                                               std::to_string(batch_no) + ": " + e.detail());
            }
            const auto b = static_cast<long>(batch->labels.size());
            loss_sum += step.loss * static_cast<double>(b);
            correct += step.correct;
            seen += b;
        }

        const EvalReport val = validate(model);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(seen);
        rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        rec.val_loss = val.loss;
        rec.val_acc = val.accuracy;

        if (val.loss < best_loss) {
            best_loss = val.loss;
            best = model.snapshot();
            history.best_epoch = epoch;
            history.best_val_loss = val.loss;
            if (opts.checkpoint_path) save_checkpoint(model, *opts.checkpoint_path, opts.run);
        }

        const PlateauDecision d = plateau_check(plateau, val.loss, adam.lr);
        adam.lr = d.lr;
        rec.lr = d.lr;
        history.epochs.push_back(rec);
        if (opts.log) {
            char buf[200];
            std::snprintf(buf, sizeof buf,
                          "epoch %2d  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f  lr %.3g%s\n",
                          epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.lr,
                          d.reduced ? "  (reduced)" : "");
            *opts.log << buf << std::flush;
        }
        if (d.stop) {
            history.stopped_early = true;
            break;
        }
    }
    if (!best.empty()) model.restore(best);
    return history;
}

}  // namespace cxr
