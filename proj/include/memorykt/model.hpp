#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "memorykt/data.hpp"
#include "memorykt/ops.hpp"
#include "memorykt/params.hpp"
#include "memorykt/tape.hpp"

namespace memorykt::model {

using ad::ParamStore;
using ad::Tape;
using ad::Tensor;
using ad::Var;

inline constexpr int kForgetLevels = 10;

struct ModelConfig {
    int num_concepts = 0;
    int embed_dim = 64;
    int hidden_dim = 128;
    int latent_dim = 32;
    int forget_embed_dim = 16;
    int enc_width = 128;
    int prior_width = 128;
    int dec_width = 128;
    int pred_width = 128;
    bool use_vae = true;      // ablation: false removes the z path entirely
    bool use_forget = true;   // ablation: false pins the forgetting level at 5
    bool reconstruct_onehot = false;  // reconstruct the 2K interaction indicator
                                      // instead of the (detached) embedding

    int recon_dim() const { return reconstruct_onehot ? 2 * num_concepts : embed_dim; }

    void validate() const {
        if (num_concepts < 1) throw std::invalid_argument("ModelConfig: num_concepts must be >= 1");
        for (int d : {embed_dim, hidden_dim, latent_dim, forget_embed_dim, enc_width, prior_width,
                      dec_width, pred_width}) {
            if (d < 1) throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
        }
    }
};

namespace detail {

template <typename S>
Tensor<S> uniform_fan_in(int in, int out, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<S> t({in, out});
    for (long i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
    return t;
}

template <typename S>
Tensor<S> normal_init(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor<S> t(std::move(shape));
    for (long i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(dist(rng));
    return t;
}

}  // namespace detail

// Weight matrices are uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero,
// embedding tables normal(0, 0.1^2). Insertion order fixes the checkpoint and
// optimizer sweep order.
template <typename S>
void init_params(ParamStore<S>& store, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const int K = cfg.num_concepts;
    const int E = cfg.embed_dim, H = cfg.hidden_dim, L = cfg.latent_dim;
    const int F = cfg.forget_embed_dim;

    store.add("embed.table", detail::normal_init<S>({2 * K, E}, 0.1, rng));
    store.add("forget.table", detail::normal_init<S>({kForgetLevels, F}, 0.1, rng));

    store.add("emb_mlp.W1", detail::uniform_fan_in<S>(E, E, rng));
    store.add("emb_mlp.b1", Tensor<S>({E}));
    store.add("emb_mlp.W2", detail::uniform_fan_in<S>(E, E, rng));
    store.add("emb_mlp.b2", Tensor<S>({E}));

    if (cfg.use_vae) {
        store.add("enc.We", detail::uniform_fan_in<S>(E + H, cfg.enc_width, rng));
        store.add("enc.be", Tensor<S>({cfg.enc_width}));
        store.add("enc.Wmu", detail::uniform_fan_in<S>(cfg.enc_width, L, rng));
        store.add("enc.Wsigma", detail::uniform_fan_in<S>(cfg.enc_width, L, rng));

        store.add("prior.Wp", detail::uniform_fan_in<S>(H, cfg.prior_width, rng));
        store.add("prior.bp", Tensor<S>({cfg.prior_width}));
        store.add("prior.Wmu", detail::uniform_fan_in<S>(cfg.prior_width, L, rng));
        store.add("prior.Wsigma", detail::uniform_fan_in<S>(cfg.prior_width, L, rng));

        store.add("dec.Wz", detail::uniform_fan_in<S>(L, E, rng));
        store.add("dec.bz", Tensor<S>({E}));
        store.add("dec.Wd", detail::uniform_fan_in<S>(E + H, cfg.dec_width, rng));
        store.add("dec.bd", Tensor<S>({cfg.dec_width}));
        store.add("dec.Wout", detail::uniform_fan_in<S>(cfg.dec_width, cfg.recon_dim(), rng));
    }

    store.add("lstm.Wih", detail::uniform_fan_in<S>(2 * E, 4 * H, rng));
    store.add("lstm.Whh", detail::uniform_fan_in<S>(H, 4 * H, rng));
    store.add("lstm.b", Tensor<S>({4 * H}));

    store.add("pred.Wf1", detail::uniform_fan_in<S>(H + F + 1, cfg.pred_width, rng));
    store.add("pred.bf1", Tensor<S>({cfg.pred_width}));
    store.add("pred.Wf2", detail::uniform_fan_in<S>(cfg.pred_width, cfg.pred_width, rng));
    store.add("pred.bf2", Tensor<S>({cfg.pred_width}));
    store.add("pred.Wf3", detail::uniform_fan_in<S>(cfg.pred_width, K, rng));
    store.add("pred.bf3", Tensor<S>({K}));
}

// Tape nodes for every parameter of one forward pass, plus the name->node
// list used to read gradients back after backward().
template <typename S>
struct BoundModel {
    Var<S> embed_table, forget_table;
    Var<S> W1, b1, W2, b2;
    Var<S> We, be, Wmu, Wsigma;
    Var<S> Wp, bp, Wmu_p, Wsigma_p;
    Var<S> Wz, bz, Wd, bd, Wout;
    Var<S> lstm_Wih, lstm_Whh, lstm_b;
    Var<S> Wf1, bf1, Wf2, bf2, Wf3, bf3;
    bool has_vae = true;
    std::vector<std::pair<std::string, Var<S>>> binds;
};

// Builds the bound view from any name -> node mapping (a ParamStore leaf
// binder for training, the gradient checker's tracked binder, ...).
template <typename S, typename GetFn>
BoundModel<S> bind_with(const ModelConfig& cfg, GetFn&& get) {
    BoundModel<S> bm;
    bm.has_vae = cfg.use_vae;
    auto reg = [&](const char* name) {
        Var<S> v = get(name);
        bm.binds.emplace_back(name, v);
        return v;
    };
    bm.embed_table = reg("embed.table");
    bm.forget_table = reg("forget.table");
    bm.W1 = reg("emb_mlp.W1");
    bm.b1 = reg("emb_mlp.b1");
    bm.W2 = reg("emb_mlp.W2");
    bm.b2 = reg("emb_mlp.b2");
    if (cfg.use_vae) {
        bm.We = reg("enc.We");
        bm.be = reg("enc.be");
        bm.Wmu = reg("enc.Wmu");
        bm.Wsigma = reg("enc.Wsigma");
        bm.Wp = reg("prior.Wp");
        bm.bp = reg("prior.bp");
        bm.Wmu_p = reg("prior.Wmu");
        bm.Wsigma_p = reg("prior.Wsigma");
        bm.Wz = reg("dec.Wz");
        bm.bz = reg("dec.bz");
        bm.Wd = reg("dec.Wd");
        bm.bd = reg("dec.bd");
        bm.Wout = reg("dec.Wout");
    }
    bm.lstm_Wih = reg("lstm.Wih");
    bm.lstm_Whh = reg("lstm.Whh");
    bm.lstm_b = reg("lstm.b");
    bm.Wf1 = reg("pred.Wf1");
    bm.bf1 = reg("pred.bf1");
    bm.Wf2 = reg("pred.Wf2");
    bm.bf2 = reg("pred.bf2");
    bm.Wf3 = reg("pred.Wf3");
    bm.bf3 = reg("pred.bf3");
    return bm;
}

template <typename S>
BoundModel<S> bind(Tape<S>& tape, ParamStore<S>& store, const ModelConfig& cfg) {
    return bind_with<S>(cfg, [&](const char* name) { return tape.leaf(store.value(name)); });
}

// Row of the interaction embedding table for (concept, response).
inline int embed_row_index(int concept_id, int correct, int num_concepts) {
    if (concept_id < 0 || concept_id >= num_concepts) {
        throw std::invalid_argument("embed_row_index: concept_id " + std::to_string(concept_id) +
                                    " out of [0, " + std::to_string(num_concepts) + ")");
    }
    if (correct != 0 && correct != 1) {
        throw std::invalid_argument("embed_row_index: correct must be 0 or 1");
    }
    return concept_id + num_concepts * correct;
}

template <typename S>
Var<S> embed_interaction(Tape<S>& tape, Var<S> table, const std::vector<int>& concepts,
                         const std::vector<int>& corrects, int num_concepts) {
    if (concepts.size() != corrects.size()) {
        throw std::invalid_argument("embed_interaction: concept/correct length mismatch");
    }
    std::vector<int> rows(concepts.size());
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        rows[i] = embed_row_index(concepts[i], corrects[i], num_concepts);
    }
    return ad::gather_rows(table, std::move(rows));
}

// Dropout context threaded through the hidden layers of the encoder, the
// decoder, and the prediction MLP. Inverted scaling keeps eval passes free
// of any rescale.
template <typename S>
struct DropoutCtx {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;

    bool active() const { return rate > 0.0 && rng != nullptr; }
};

template <typename S>
Var<S> apply_dropout(Tape<S>& tape, Var<S> x, const DropoutCtx<S>& ctx) {
    if (!ctx.active()) return x;
    const Tensor<S>& v = tape.value(x);
    Tensor<S> mask(v.shape());
    std::bernoulli_distribution keep(1.0 - ctx.rate);
    const S scale_kept = static_cast<S>(1.0 / (1.0 - ctx.rate));
    for (long i = 0; i < mask.numel(); ++i) mask[i] = keep(*ctx.rng) ? scale_kept : S(0);
    return ad::mul(x, tape.constant(std::move(mask)));
}

// phi_x: two-layer ReLU feature extractor applied to the raw embedding.
template <typename S>
Var<S> embed_features(Tape<S>& tape, const BoundModel<S>& bm, Var<S> x) {
    auto h1 = ad::relu(ad::add(ad::matmul(x, bm.W1), bm.b1));
    return ad::relu(ad::add(ad::matmul(h1, bm.W2), bm.b2));
}

template <typename S>
struct GaussianParams {
    Var<S> mu;
    Var<S> sigma;
};

// Variational posterior from [phi_x ; h_prev].
template <typename S>
GaussianParams<S> encode(Tape<S>& tape, const BoundModel<S>& bm, Var<S> phi_x, Var<S> h_prev,
                         const DropoutCtx<S>& drop = {}) {
    auto enc = ad::relu(ad::add(ad::matmul(ad::concat_cols(phi_x, h_prev), bm.We), bm.be));
    enc = apply_dropout(tape, enc, drop);
    return {ad::matmul(enc, bm.Wmu), ad::softplus(ad::matmul(enc, bm.Wsigma))};
}

// Learned prior from the previous hidden state alone.
template <typename S>
GaussianParams<S> prior(Tape<S>& tape, const BoundModel<S>& bm, Var<S> h_prev) {
    auto pr = ad::relu(ad::add(ad::matmul(h_prev, bm.Wp), bm.bp));
    return {ad::matmul(pr, bm.Wmu_p), ad::softplus(ad::matmul(pr, bm.Wsigma_p))};
}

// z = mu + sigma (.) eps
template <typename S>
Var<S> reparameterize(Var<S> mu, Var<S> sigma, Var<S> eps) {
    return ad::add(mu, ad::mul(sigma, eps));
}

template <typename S>
Var<S> latent_features(Tape<S>& tape, const BoundModel<S>& bm, Var<S> z) {
    return ad::relu(ad::add(ad::matmul(z, bm.Wz), bm.bz));
}

// Reconstruction head from [phi_z ; h_prev]; outputs lie in (0, 1).
template <typename S>
Var<S> decode(Tape<S>& tape, const BoundModel<S>& bm, Var<S> phi_z, Var<S> h_prev,
              const DropoutCtx<S>& drop = {}) {
    auto dec = ad::relu(ad::add(ad::matmul(ad::concat_cols(phi_z, h_prev), bm.Wd), bm.bd));
    dec = apply_dropout(tape, dec, drop);
    return ad::sigmoid(ad::matmul(dec, bm.Wout));
}

template <typename S>
struct HiddenState {
    Var<S> h;
    Var<S> cell;
};

// Single-cell LSTM with gate order [input, forget, candidate, output].
template <typename S>
HiddenState<S> lstm_step(Tape<S>& tape, const BoundModel<S>& bm, Var<S> x, HiddenState<S> prev) {
    const int H = tape.value(prev.h).cols();
    auto gates =
        ad::add(ad::add(ad::matmul(x, bm.lstm_Wih), ad::matmul(prev.h, bm.lstm_Whh)), bm.lstm_b);
    auto i = ad::sigmoid(ad::slice_cols(gates, 0, H));
    auto f = ad::sigmoid(ad::slice_cols(gates, H, H));
    auto g = ad::tanh_op(ad::slice_cols(gates, 2 * H, H));
    auto o = ad::sigmoid(ad::slice_cols(gates, 3 * H, H));
    auto cell = ad::add(ad::mul(f, prev.cell), ad::mul(i, g));
    auto h = ad::mul(o, ad::tanh_op(cell));
    return {h, cell};
}

// Per-concept correctness probabilities from [h ; m ; ln(1 + dt)].
// `levels` are forgetting levels in [1, 10]; `delta_feature` is the already
// log-compressed time gap.
template <typename S>
Var<S> predict(Tape<S>& tape, const BoundModel<S>& bm, Var<S> h, const std::vector<int>& levels,
               const std::vector<double>& delta_feature, const DropoutCtx<S>& drop = {}) {
    const int B = tape.value(h).rows();
    if (static_cast<int>(levels.size()) != B || static_cast<int>(delta_feature.size()) != B) {
        throw std::invalid_argument("predict: levels/delta_feature must have one entry per row");
    }
    std::vector<int> rows(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (levels[i] < 1 || levels[i] > kForgetLevels) {
            throw std::invalid_argument("predict: forgetting level " + std::to_string(levels[i]) +
                                        " outside [1, 10]");
        }
        rows[i] = levels[i] - 1;
    }
    auto m = ad::gather_rows(bm.forget_table, std::move(rows));
    Tensor<S> dt({B, 1});
    for (int b = 0; b < B; ++b) dt.at(b, 0) = static_cast<S>(delta_feature[static_cast<std::size_t>(b)]);
    auto fused = ad::concat_cols<S>({h, m, tape.constant(std::move(dt))});
    auto f1 = ad::relu(ad::add(ad::matmul(fused, bm.Wf1), bm.bf1));
    f1 = apply_dropout(tape, f1, drop);
    auto f2 = ad::relu(ad::add(ad::matmul(f1, bm.Wf2), bm.bf2));
    f2 = apply_dropout(tape, f2, drop);
    return ad::sigmoid(ad::add(ad::matmul(f2, bm.Wf3), bm.bf3));
}

// Everything a timestep exposes to the losses and to evaluation.
template <typename S>
struct StepVars {
    Var<S> x;        // raw interaction embedding (reconstruction target source)
    Var<S> mu_e, sigma_e, mu_p, sigma_p, z, x_hat;  // VAE path (valid iff has_vae)
    Var<S> p;        // [B x K] correctness probabilities
    bool has_vae = false;
};

enum class Mode { kTrain, kEval };

struct ForwardOptions {
    Mode mode = Mode::kEval;
    double dropout_rate = 0.0;     // applied in train mode only
    std::uint64_t noise_seed = 0;  // reparameterization eps + dropout masks
};

// Runs the whole window: embed -> encode/prior -> reparameterize -> decode ->
// LSTM update -> predict, starting from the zero state. Training mode samples
// eps ~ N(0,1) and applies dropout; eval mode uses eps = 0 and no dropout.
// Steps are computed up to the last unmasked column of the batch; padded
// positions inside that range are computed but masked out of every loss.
template <typename S>
std::vector<StepVars<S>> forward_window(Tape<S>& tape, const BoundModel<S>& bm,
                                        const ModelConfig& cfg, const data::SequenceBatch& batch,
                                        const ForwardOptions& opts) {
    const int B = batch.rows;
    if (B == 0) throw std::invalid_argument("forward_window: empty batch");
    std::vector<int> all_rows(static_cast<std::size_t>(B));
    for (int r = 0; r < B; ++r) all_rows[static_cast<std::size_t>(r)] = r;
    const int t_eff = batch.effective_T(all_rows);

    const bool training = opts.mode == Mode::kTrain;
    std::mt19937_64 noise(opts.noise_seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    DropoutCtx<S> drop;
    if (training && opts.dropout_rate > 0.0) {
        drop.rate = opts.dropout_rate;
        drop.rng = &noise;
    }

    auto zero_bh = [&]() { return tape.constant(Tensor<S>({B, cfg.hidden_dim})); };
    HiddenState<S> state{zero_bh(), zero_bh()};

    std::vector<StepVars<S>> steps;
    steps.reserve(static_cast<std::size_t>(t_eff));
    for (int t = 0; t < t_eff; ++t) {
        StepVars<S> sv;
        sv.has_vae = cfg.use_vae;

        std::vector<int> concepts(static_cast<std::size_t>(B));
        std::vector<int> corrects(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            concepts[static_cast<std::size_t>(b)] = batch.concept_id[batch.idx(b, t)];
            corrects[static_cast<std::size_t>(b)] = batch.correct[batch.idx(b, t)];
        }
        sv.x = embed_interaction(tape, bm.embed_table, concepts, corrects, cfg.num_concepts);
        auto phi_x = embed_features(tape, bm, sv.x);

        Var<S> phi_z;
        if (cfg.use_vae) {
            auto post = encode(tape, bm, phi_x, state.h, drop);
            sv.mu_e = post.mu;
            sv.sigma_e = post.sigma;
            auto pri = prior(tape, bm, state.h);
            sv.mu_p = pri.mu;
            sv.sigma_p = pri.sigma;

            Tensor<S> eps({B, cfg.latent_dim});
            if (training) {
                for (long i = 0; i < eps.numel(); ++i) eps[i] = static_cast<S>(normal(noise));
            }
            sv.z = reparameterize(sv.mu_e, sv.sigma_e, tape.constant(std::move(eps)));
            phi_z = latent_features(tape, bm, sv.z);
            sv.x_hat = decode(tape, bm, phi_z, state.h, drop);
        } else {
            phi_z = tape.constant(Tensor<S>({B, cfg.embed_dim}));  // the removed z path
        }

        state = lstm_step(tape, bm, ad::concat_cols(phi_x, phi_z), state);

        std::vector<int> levels(static_cast<std::size_t>(B));
        std::vector<double> dt_feature(static_cast<std::size_t>(B));
        for (int b = 0; b < B; ++b) {
            int lvl = cfg.use_forget ? batch.forget_level[batch.idx(b, t)] : 5;
            if (batch.mask[batch.idx(b, t)] == 0) lvl = 1;  // padding guard
            levels[static_cast<std::size_t>(b)] = lvl;
            // forward-looking gap: the elapsed time known when the next
            // interaction arrives; 0 at the window's last column
            const double gap = (t + 1 < batch.T) ? batch.delta_t[batch.idx(b, t + 1)] : 0.0;
            dt_feature[static_cast<std::size_t>(b)] = std::log1p(gap);
        }
        sv.p = predict(tape, bm, state.h, levels, dt_feature, drop);
        steps.push_back(sv);
    }
    return steps;
}

}  // namespace memorykt::model
