#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "memorykt/data.hpp"

namespace memorykt::synthetic {

// Generative profile: per-student memory half-life tau (hours, log-uniform),
// per-student ability, shared per-concept difficulty. Mastery of a concept
// decays as 2^(-dt/tau) between visits and gains a fixed amount on practice,
// capped at mastery_cap. P(correct) = sigmoid(ability + mastery - difficulty).
struct SimParams {
    double tau_min_hours = 2.0;
    double tau_max_hours = 500.0;
    double ability_sigma = 0.5;
    double difficulty_sigma = 1.0;
    double gap_log_mu = std::log(12.0);  // median gap 12 h
    double gap_log_sigma = 1.0;
    double practice_gain = 1.4;
    double mastery_cap = 3.5;
};

struct GroundTruth {
    std::string student_id;
    double tau = 0.0;
    double ability = 0.0;
};

struct SimResult {
    data::Dataset dataset;
    std::vector<GroundTruth> truth;
    // true P(correct) behind each sampled response, by student then step
    std::vector<std::vector<double>> p_correct;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t x = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

// Deterministic given the seed; students use derived per-student streams so
// generation order (or parallel generation) cannot change the corpus.
inline SimResult generate(int n_students, int num_concepts, int steps_per_student,
                          std::uint64_t seed, const SimParams& params = {}) {
    if (n_students < 2) throw std::invalid_argument("generate: need at least 2 students");
    if (num_concepts < 2) throw std::invalid_argument("generate: need at least 2 concepts");
    if (steps_per_student < 3) throw std::invalid_argument("generate: need at least 3 steps");
    if (params.tau_min_hours <= 0 || params.tau_max_hours < params.tau_min_hours) {
        throw std::invalid_argument("generate: invalid tau range");
    }

    SimResult result;
    result.dataset.num_concepts = num_concepts;

    std::vector<double> difficulty(static_cast<std::size_t>(num_concepts));
    {
        std::mt19937_64 rng(detail::derive_seed(seed, 0));
        std::normal_distribution<double> dn(0.0, params.difficulty_sigma);
        for (auto& d : difficulty) d = dn(rng);
    }

    const int id_width = static_cast<int>(std::to_string(n_students - 1).size());
    for (int s = 0; s < n_students; ++s) {
        std::mt19937_64 rng(detail::derive_seed(seed, static_cast<std::uint64_t>(s) + 1));
        std::uniform_real_distribution<double> du(0.0, 1.0);
        std::normal_distribution<double> dn(0.0, 1.0);

        const double log_tau = std::log(params.tau_min_hours) +
                               du(rng) * (std::log(params.tau_max_hours) -
                                          std::log(params.tau_min_hours));
        const double tau = std::exp(log_tau);
        const double ability = params.ability_sigma * dn(rng);

        std::string id = std::to_string(s);
        id.insert(0, static_cast<std::size_t>(id_width) - id.size(), '0');
        id = "s" + id;

        data::StudentSequence seq;
        seq.student_id = id;
        std::vector<double> probs;
        probs.reserve(static_cast<std::size_t>(steps_per_student));

        std::vector<double> mastery(static_cast<std::size_t>(num_concepts), 0.0);
        std::vector<double> last_update_hours(static_cast<std::size_t>(num_concepts), 0.0);
        double now_hours = 0.0;
        for (int step = 0; step < steps_per_student; ++step) {
            if (step > 0) {
                const double gap = std::exp(params.gap_log_mu + params.gap_log_sigma * dn(rng));
                now_hours += gap;
            }
            const int c = static_cast<int>(rng() % static_cast<std::uint64_t>(num_concepts));
            // lazy exponential decay since this concept's last update
            const double dt = now_hours - last_update_hours[static_cast<std::size_t>(c)];
            mastery[static_cast<std::size_t>(c)] *= std::exp2(-dt / tau);
            last_update_hours[static_cast<std::size_t>(c)] = now_hours;

            const double p = detail::sigmoid(ability + mastery[static_cast<std::size_t>(c)] -
                                             difficulty[static_cast<std::size_t>(c)]);
            const int correct = du(rng) < p ? 1 : 0;
            probs.push_back(p);

            mastery[static_cast<std::size_t>(c)] = std::min(
                params.mastery_cap, mastery[static_cast<std::size_t>(c)] + params.practice_gain);

            seq.interactions.push_back(data::Interaction{
                c, correct, static_cast<std::int64_t>(std::llround(now_hours * data::kMsPerHour))});
        }
        result.dataset.sequences.push_back(std::move(seq));
        result.truth.push_back(GroundTruth{id, tau, ability});
        result.p_correct.push_back(std::move(probs));
    }
    return result;
}

inline double mean_correct(const data::Dataset& d) {
    long total = 0, right = 0;
    for (const auto& seq : d.sequences) {
        for (const auto& it : seq.interactions) {
            ++total;
            right += it.correct;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(right) / static_cast<double>(total);
}

}  // namespace memorykt::synthetic
