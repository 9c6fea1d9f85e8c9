#pragma once

#include <cstdint>
#include <random>

#include "memorykt/gradcheck.hpp"
#include "memorykt/training.hpp"

namespace memorykt::model {

// A small random batch with one partially padded row, suitable for gradient
// checking the full network through all three loss terms.
inline data::SequenceBatch make_check_batch(const ModelConfig& cfg, int rows, int window,
                                            std::uint64_t seed) {
    data::SequenceBatch b;
    b.T = window;
    b.rows = rows;
    const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(window);
    b.concept_id.assign(n, 0);
    b.correct.assign(n, 0);
    b.delta_t.assign(n, 0.0);
    b.forget_level.assign(n, 0);
    b.mask.assign(n, 0);
    std::mt19937_64 rng(seed);
    for (int r = 0; r < rows; ++r) {
        b.sequence_index.push_back(r);
        b.chunk_index.push_back(0);
        // the last row loses its final step to exercise the mask path
        const int len = (r == rows - 1 && window > 2) ? window - 1 : window;
        for (int t = 0; t < len; ++t) {
            b.concept_id[b.idx(r, t)] = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.num_concepts));
            b.correct[b.idx(r, t)] = static_cast<int>(rng() % 2);
            b.delta_t[b.idx(r, t)] = t == 0 ? 0.0 : static_cast<double>(rng() % 96);
            b.forget_level[b.idx(r, t)] = 1 + static_cast<int>(rng() % 10);
            b.mask[b.idx(r, t)] = 1;
        }
    }
    return b;
}

// Finite-difference check of the full model: every parameter of the total
// loss (lambda_rec = 0.5, lambda_kld = 1.0) on a tiny train-mode forward with
// frozen noise and no dropout.
//
// Two adjustments keep the comparison mathematically valid:
//   - parameters are jittered off the training init, otherwise the zero
//     biases put ReLU inputs exactly at the kink where the two-sided
//     difference straddles non-differentiability;
//   - reconstruction targets are captured once and held fixed, because the
//     training objective detaches them (perturbing the embedding must not
//     move the target under the checker's feet).
inline ad::GradCheckReport check_model_gradients(const ModelConfig& cfg, int rows, int window,
                                                 double eps = 1e-5, double tol = 1e-4,
                                                 std::uint64_t seed = 1) {
    cfg.validate();
    ad::ParamStore<double> store;
    init_params(store, cfg, seed);
    {
        std::mt19937_64 jitter_rng(seed + 7);
        std::uniform_real_distribution<double> jitter(-0.05, 0.05);
        for (std::size_t i = 0; i < store.size(); ++i) {
            auto& t = store.value_at(i);
            for (long j = 0; j < t.numel(); ++j) t[j] += jitter(jitter_rng);
        }
    }
    const data::SequenceBatch batch = make_check_batch(cfg, rows, window, seed + 1);

    training::TrainConfig loss_cfg;
    loss_cfg.lambda_rec = 0.5;
    loss_cfg.lambda_kld = 1.0;

    std::vector<ad::Tensor<double>> frozen_targets;
    if (cfg.use_vae) {
        ad::Tape<double> tape;
        auto bm = bind(tape, store, cfg);
        auto steps = forward_window(tape, bm, cfg, batch, ForwardOptions{Mode::kEval, 0.0, 0});
        frozen_targets = training::recon_targets(tape, steps, batch, cfg);
    }

    const std::uint64_t frozen_noise = seed + 2;
    auto build = [&](ad::Tape<double>& tape, ad::ParamBinder& binder) {
        auto bm = bind_with<double>(cfg, [&](const char* name) { return binder(name); });
        auto steps = forward_window(tape, bm, cfg, batch,
                                    ForwardOptions{Mode::kTrain, 0.0, frozen_noise});
        ad::Var<double> recon, kl;
        if (cfg.use_vae) {
            recon = training::loss_recon_with_targets(tape, steps, batch, frozen_targets);
            kl = training::loss_kl(tape, steps, batch);
        }
        auto pred = training::loss_pred(tape, steps, batch);
        return training::total_loss(tape, recon, kl, pred, loss_cfg);
    };
    return ad::grad_check(store, build, eps, tol);
}

}  // namespace memorykt::model
