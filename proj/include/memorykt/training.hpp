#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "memorykt/data.hpp"
#include "memorykt/metrics.hpp"
#include "memorykt/model.hpp"

namespace memorykt::training {

using ad::ParamStore;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using model::ModelConfig;
using model::StepVars;

struct TrainConfig {
    double lambda_rec = 0.5;
    double lambda_kld = 1.0;
    double learning_rate = 1e-3;
    double weight_decay = 1e-5;
    double dropout = 0.1;
    int max_epochs = 200;
    int patience = 10;
    int batch_size = 64;
    std::uint64_t seed = 0;
    double grad_clip_norm = 5.0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (lambda_rec < 0 || lambda_kld < 0) {
            throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
        }
        if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (max_epochs < 1 || patience < 1 || batch_size < 1) {
            throw std::invalid_argument("TrainConfig: epochs, patience and batch_size must be >= 1");
        }
        if (dropout < 0 || dropout >= 1) {
            throw std::invalid_argument("TrainConfig: dropout must lie in [0, 1)");
        }
    }
};

namespace detail {

template <typename S>
Var<S> mask_column(Tape<S>& tape, const data::SequenceBatch& batch, int t) {
    Tensor<S> m({batch.rows});
    for (int b = 0; b < batch.rows; ++b) m[b] = static_cast<S>(batch.mask[batch.idx(b, t)]);
    return tape.constant(std::move(m));
}

inline long total_mask(const data::SequenceBatch& batch) {
    long n = 0;
    for (std::uint8_t m : batch.mask) n += m;
    return n;
}

inline long valid_pred_pairs(const data::SequenceBatch& batch) {
    long n = 0;
    for (int b = 0; b < batch.rows; ++b) {
        for (int t = 1; t < batch.T; ++t) n += batch.mask[batch.idx(b, t)];
    }
    return n;
}

}  // namespace detail

// Reconstruction loss against caller-supplied constant targets (one tensor
// per step). Used directly by the gradient checker, which must hold targets
// fixed while it perturbs parameters.
template <typename S>
Var<S> loss_recon_with_targets(Tape<S>& tape, const std::vector<StepVars<S>>& steps,
                               const data::SequenceBatch& batch,
                               const std::vector<Tensor<S>>& targets) {
    const long denom = detail::total_mask(batch);
    if (denom == 0) throw std::invalid_argument("loss_recon: all positions are masked");
    if (targets.size() != steps.size()) {
        throw std::invalid_argument("loss_recon: one target per step required");
    }
    Var<S> acc;
    for (std::size_t t = 0; t < steps.size(); ++t) {
        if (!steps[t].has_vae) throw std::invalid_argument("loss_recon: model has no VAE path");
        auto sq = ad::sq_l2_rows(steps[t].x_hat, tape.constant(targets[t]));
        auto masked = ad::mul(sq, detail::mask_column<S>(tape, batch, static_cast<int>(t)));
        acc = acc.valid() ? ad::add(acc, ad::sum_all(masked)) : ad::sum_all(masked);
    }
    return ad::scale(acc, static_cast<S>(1.0 / static_cast<double>(denom)));
}

// Mean over unmasked steps of the squared L2 reconstruction error. Each step
// contributes the sum over output dimensions (so one step of dimension 64
// with a uniform error of 0.5 contributes 16). The target is a constant: in
// the default mode the current embedding row is copied off the tape, so no
// gradient reaches the embedding through the reconstruction branch; in
// one-hot mode the 2K interaction indicator is the target.
template <typename S>
std::vector<Tensor<S>> recon_targets(Tape<S>& tape, const std::vector<StepVars<S>>& steps,
                                     const data::SequenceBatch& batch, const ModelConfig& cfg) {
    std::vector<Tensor<S>> targets;
    targets.reserve(steps.size());
    for (std::size_t t = 0; t < steps.size(); ++t) {
        if (cfg.reconstruct_onehot) {
            Tensor<S> onehot({batch.rows, cfg.recon_dim()});
            for (int b = 0; b < batch.rows; ++b) {
                if (!batch.mask[batch.idx(b, static_cast<int>(t))]) continue;
                const int row = model::embed_row_index(
                    batch.concept_id[batch.idx(b, static_cast<int>(t))],
                    batch.correct[batch.idx(b, static_cast<int>(t))], cfg.num_concepts);
                onehot.at(b, row) = S(1);
            }
            targets.push_back(std::move(onehot));
        } else {
            targets.push_back(tape.value(steps[t].x));  // detached copy
        }
    }
    return targets;
}

template <typename S>
Var<S> loss_recon(Tape<S>& tape, const std::vector<StepVars<S>>& steps,
                  const data::SequenceBatch& batch, const ModelConfig& cfg) {
    return loss_recon_with_targets(tape, steps, batch, recon_targets(tape, steps, batch, cfg));
}

// Mean over unmasked steps of the closed-form diagonal-Gaussian KL between
// posterior and learned prior (summed over latent dimensions per step).
template <typename S>
Var<S> loss_kl(Tape<S>& tape, const std::vector<StepVars<S>>& steps,
               const data::SequenceBatch& batch) {
    const long denom = detail::total_mask(batch);
    if (denom == 0) throw std::invalid_argument("loss_kl: all positions are masked");
    Var<S> acc;
    for (std::size_t t = 0; t < steps.size(); ++t) {
        if (!steps[t].has_vae) throw std::invalid_argument("loss_kl: model has no VAE path");
        auto kl = ad::kl_rows(steps[t].mu_e, steps[t].sigma_e, steps[t].mu_p, steps[t].sigma_p);
        auto masked = ad::mul(kl, detail::mask_column<S>(tape, batch, static_cast<int>(t)));
        acc = acc.valid() ? ad::add(acc, ad::sum_all(masked)) : ad::sum_all(masked);
    }
    return ad::scale(acc, static_cast<S>(1.0 / static_cast<double>(denom)));
}

// Mean BCE over valid (t, t+1) pairs: p_t's entry for the next concept is
// scored against the next response, masked by mask_{t+1}.
template <typename S>
Var<S> loss_pred(Tape<S>& tape, const std::vector<StepVars<S>>& steps,
                 const data::SequenceBatch& batch) {
    const long pairs = detail::valid_pred_pairs(batch);
    if (pairs == 0) throw std::invalid_argument("loss_pred: no valid (t, t+1) pairs");
    Var<S> acc;
    const int t_max = static_cast<int>(steps.size());
    for (int t = 0; t < t_max && t + 1 < batch.T; ++t) {
        const int nt = t + 1;
        std::vector<int> next_concept(static_cast<std::size_t>(batch.rows));
        std::vector<S> next_label(static_cast<std::size_t>(batch.rows));
        std::vector<S> pair_mask(static_cast<std::size_t>(batch.rows));
        bool any = false;
        for (int b = 0; b < batch.rows; ++b) {
            next_concept[static_cast<std::size_t>(b)] = batch.concept_id[batch.idx(b, nt)];
            next_label[static_cast<std::size_t>(b)] = static_cast<S>(batch.correct[batch.idx(b, nt)]);
            pair_mask[static_cast<std::size_t>(b)] = static_cast<S>(batch.mask[batch.idx(b, nt)]);
            any = any || batch.mask[batch.idx(b, nt)];
        }
        if (!any) continue;
        auto sel = ad::select_per_row(steps[static_cast<std::size_t>(t)].p, std::move(next_concept));
        auto bce = ad::masked_bce_sum(sel, std::move(next_label), std::move(pair_mask));
        acc = acc.valid() ? ad::add(acc, bce) : bce;
    }
    if (!acc.valid()) throw std::invalid_argument("loss_pred: no valid (t, t+1) pairs");
    return ad::scale(acc, static_cast<S>(1.0 / static_cast<double>(pairs)));
}

// lambda_rec * recon + lambda_kld * kl + pred. Components may be invalid
// (e.g. the VAE ablation drops recon and kl).
template <typename S>
Var<S> total_loss(Tape<S>& tape, Var<S> recon, Var<S> kl, Var<S> pred, const TrainConfig& cfg) {
    if (!pred.valid()) throw std::invalid_argument("total_loss: prediction loss is required");
    Var<S> total = pred;
    if (recon.valid()) total = ad::add(total, ad::scale(recon, static_cast<S>(cfg.lambda_rec)));
    if (kl.valid()) total = ad::add(total, ad::scale(kl, static_cast<S>(cfg.lambda_kld)));
    return total;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Scales all gradients in place so their global L2 norm is at most max_norm.
template <typename S>
double clip_global_norm(std::vector<Tensor<S>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        for (long i = 0; i < g.numel(); ++i) {
            sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const S f = static_cast<S>(max_norm / norm);
        for (auto& g : grads) {
            for (long i = 0; i < g.numel(); ++i) g[i] *= f;
        }
    }
    return norm;
}

// Adam with bias correction and decoupled weight decay (applied to the
// parameter before the Adam delta). Throws on non-finite gradients; the
// caller reports and skips the step.
template <typename S>
void adam_step(ParamStore<S>& store, const std::vector<Tensor<S>>& grads, const TrainConfig& cfg) {
    if (grads.size() != store.size()) {
        throw std::invalid_argument("adam_step: gradient count does not match parameter count");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].all_finite()) {
            throw std::runtime_error("adam_step: non-finite gradient for " + store.names()[i]);
        }
    }
    const std::int64_t t = store.step_count + 1;
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        Tensor<S>& theta = store.value_at(i);
        Tensor<S>& m = store.moment1_at(i);
        Tensor<S>& v = store.moment2_at(i);
        if (!theta.same_shape(grads[i])) {
            throw std::invalid_argument("adam_step: gradient shape mismatch for " +
                                        store.names()[i]);
        }
        for (long j = 0; j < theta.numel(); ++j) {
            if (cfg.weight_decay > 0.0) {
                theta[j] -= static_cast<S>(cfg.learning_rate * cfg.weight_decay) * theta[j];
            }
            const double g = static_cast<double>(grads[i][j]);
            m[j] = static_cast<S>(cfg.adam_beta1 * static_cast<double>(m[j]) +
                                  (1.0 - cfg.adam_beta1) * g);
            v[j] = static_cast<S>(cfg.adam_beta2 * static_cast<double>(v[j]) +
                                  (1.0 - cfg.adam_beta2) * g * g);
            const double mh = static_cast<double>(m[j]) / bc1;
            const double vh = static_cast<double>(v[j]) / bc2;
            theta[j] -= static_cast<S>(cfg.learning_rate * mh / (std::sqrt(vh) + cfg.adam_eps));
        }
    }
    store.step_count = t;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Stops when the watched metric has not improved for `patience` epochs.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    // Returns true when `value` improves on the best seen so far.
    bool update(double value, int epoch) {
        if (value > best_) {
            best_ = value;
            best_epoch_ = epoch;
            since_ = 0;
            return true;
        }
        ++since_;
        return false;
    }

    bool should_stop() const { return since_ >= patience_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int since_ = 0;
};

struct EpochRow {
    int epoch = 0;
    double recon = 0.0;
    double kl = 0.0;
    double pred = 0.0;
    double total = 0.0;
    double valid_auc = 0.0;
    double valid_acc = 0.0;
};

struct TrainReport {
    std::vector<EpochRow> epochs;
    int best_epoch = -1;       // 1-based epoch index of the kept checkpoint
    double best_auc = 0.0;
    double best_acc = 0.0;
    std::string stop_reason;   // "early_stop", "max_epochs", or "diverged"
    int skipped_steps = 0;     // optimizer steps dropped for non-finite grads
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1) + 0x2545f4914f6cdd1dULL * (c + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

template <typename S>
std::vector<Tensor<S>> extract_grads(Tape<S>& tape, const model::BoundModel<S>& bm,
                                     const ParamStore<S>& store) {
    std::vector<Tensor<S>> grads;
    grads.reserve(store.size());
    if (bm.binds.size() != store.size()) {
        throw std::logic_error("extract_grads: bind list does not cover the store");
    }
    for (std::size_t i = 0; i < bm.binds.size(); ++i) {
        if (bm.binds[i].first != store.names()[i]) {
            throw std::logic_error("extract_grads: bind order mismatch at " + bm.binds[i].first);
        }
        grads.push_back(tape.grad(bm.binds[i].second));
    }
    return grads;
}

}  // namespace detail

// Eval-mode predictions pooled over all valid (t, t+1) positions of the
// batch, in fixed row order.
template <typename S>
std::vector<metrics::PredictionRecord> collect_predictions(ParamStore<S>& store,
                                                           const ModelConfig& cfg,
                                                           const data::SequenceBatch& windows,
                                                           int batch_size) {
    std::vector<metrics::PredictionRecord> records;
    std::vector<int> rows;
    for (int start = 0; start < windows.rows; start += batch_size) {
        rows.clear();
        for (int r = start; r < std::min(windows.rows, start + batch_size); ++r) rows.push_back(r);
        data::SequenceBatch batch = windows.select(rows);
        Tape<S> tape;
        auto bm = model::bind(tape, store, cfg);
        auto steps = model::forward_window(tape, bm, cfg, batch, {model::Mode::kEval, 0.0, 0});
        for (int t = 0; t < static_cast<int>(steps.size()) && t + 1 < batch.T; ++t) {
            const auto& p = tape.value(steps[static_cast<std::size_t>(t)].p);
            for (int b = 0; b < batch.rows; ++b) {
                if (!batch.mask[batch.idx(b, t + 1)]) continue;
                const int c_next = batch.concept_id[batch.idx(b, t + 1)];
                records.push_back(metrics::PredictionRecord{
                    static_cast<double>(p.at(b, c_next)), batch.correct[batch.idx(b, t + 1)]});
            }
        }
    }
    return records;
}

// Full fold-level loop: shuffled mini-batches, Adam with clipping, per-epoch
// validation AUC, best-checkpoint tracking, and patience-based stopping.
// Returns the best checkpoint (by validation AUC) and the report.
template <typename S>
std::pair<ParamStore<S>, TrainReport> train(const data::Dataset& train_ds,
                                            const data::Dataset& valid_ds, ModelConfig model_cfg,
                                            const TrainConfig& train_cfg,
                                            const data::SequenceAnnotator& annotate, int window,
                                            std::ostream* log = nullptr) {
    model_cfg.validate();
    train_cfg.validate();
    if (train_ds.sequences.empty() || valid_ds.sequences.empty()) {
        throw std::invalid_argument("train: empty train or validation dataset");
    }

    const data::SequenceBatch train_windows = data::window_sequences(train_ds, window, annotate);
    const data::SequenceBatch valid_windows = data::window_sequences(valid_ds, window, annotate);

    ParamStore<S> store;
    model::init_params(store, model_cfg, train_cfg.seed);
    ParamStore<S> best = store;

    TrainReport report;
    EarlyStopper stopper(train_cfg.patience);
    std::mt19937_64 shuffle_rng(detail::mix_seed(train_cfg.seed, 0x5caffeULL, 0));

    std::vector<int> order(static_cast<std::size_t>(train_windows.rows));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        double sum_recon = 0, sum_kl = 0, sum_pred = 0, sum_total = 0;
        long seen_rows = 0;
        int batch_index = 0;
        bool diverged = false;

        for (int start = 0; start < train_windows.rows; start += train_cfg.batch_size) {
            std::vector<int> rows(order.begin() + start,
                                  order.begin() + std::min<std::size_t>(
                                                      order.size(),
                                                      static_cast<std::size_t>(start) +
                                                          static_cast<std::size_t>(train_cfg.batch_size)));
            data::SequenceBatch batch = train_windows.select(rows);
            if (detail::total_mask(batch) == 0) continue;

            Tape<S> tape;
            auto bm = model::bind(tape, store, model_cfg);
            model::ForwardOptions opts{model::Mode::kTrain, train_cfg.dropout,
                                       detail::mix_seed(train_cfg.seed, static_cast<std::uint64_t>(epoch),
                                                        static_cast<std::uint64_t>(batch_index))};
            auto steps = model::forward_window(tape, bm, model_cfg, batch, opts);

            Var<S> recon, kl;
            if (model_cfg.use_vae) {
                recon = loss_recon(tape, steps, batch, model_cfg);
                kl = loss_kl(tape, steps, batch);
            }
            Var<S> pred;
            if (detail::valid_pred_pairs(batch) > 0) {
                pred = loss_pred(tape, steps, batch);
            } else {
                ++batch_index;
                continue;  // a batch of length-1 windows has nothing to score
            }
            Var<S> total = total_loss(tape, recon, kl, pred, train_cfg);

            const double total_v = static_cast<double>(tape.value(total)[0]);
            if (!std::isfinite(total_v)) {
                diverged = true;
                break;
            }
            const long bn = static_cast<long>(rows.size());
            sum_total += total_v * static_cast<double>(bn);
            sum_pred += static_cast<double>(tape.value(pred)[0]) * static_cast<double>(bn);
            if (recon.valid()) sum_recon += static_cast<double>(tape.value(recon)[0]) * static_cast<double>(bn);
            if (kl.valid()) sum_kl += static_cast<double>(tape.value(kl)[0]) * static_cast<double>(bn);
            seen_rows += bn;

            tape.backward(total);
            auto grads = detail::extract_grads(tape, bm, store);
            clip_global_norm(grads, train_cfg.grad_clip_norm);
            try {
                adam_step(store, grads, train_cfg);
            } catch (const std::runtime_error& e) {
                ++report.skipped_steps;
                if (log) *log << "step skipped: " << e.what() << "\n";
            }
            ++batch_index;
        }

        if (diverged) {
            report.stop_reason = "diverged";
            if (log) *log << "epoch " << epoch << ": non-finite loss, aborting\n";
            break;
        }

        EpochRow row;
        row.epoch = epoch;
        if (seen_rows > 0) {
            row.recon = sum_recon / static_cast<double>(seen_rows);
            row.kl = sum_kl / static_cast<double>(seen_rows);
            row.pred = sum_pred / static_cast<double>(seen_rows);
            row.total = sum_total / static_cast<double>(seen_rows);
        }
        auto records = collect_predictions(store, model_cfg, valid_windows, train_cfg.batch_size);
        row.valid_auc = metrics::auc(records);
        row.valid_acc = metrics::accuracy(records);
        report.epochs.push_back(row);
        if (log) {
            *log << "epoch " << epoch << " total " << row.total << " pred " << row.pred
                 << " recon " << row.recon << " kl " << row.kl << " valid_auc " << row.valid_auc
                 << "\n";
        }

        if (stopper.update(row.valid_auc, epoch)) {
            best = store;
            report.best_epoch = epoch;
            report.best_auc = row.valid_auc;
            report.best_acc = row.valid_acc;
        }
        if (stopper.should_stop()) {
            report.stop_reason = "early_stop";
            break;
        }
    }
    if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
    return {std::move(best), std::move(report)};
}

}  // namespace memorykt::training
