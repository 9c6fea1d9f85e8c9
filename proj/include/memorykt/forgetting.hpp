#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "memorykt/data.hpp"

namespace memorykt::forgetting {

// Constants of the score-change rule. The qualitative contract (sign,
// monotonicity in gap and difficulty, the repeat-miss penalty, 1/T
// normalization) is fixed; these magnitudes are configurable.
struct ScoreRule {
    double time_cap_hours = 720.0;  // gaps saturate at 30 days
    double base_weight = 0.5;
    double repeat_miss_penalty = 1.5;  // missing a previously-correct concept
};

struct ConceptDifficulty {
    std::vector<double> d;  // indexed by concept_id, each in (0, 1)

    double of(int concept_id) const {
        if (concept_id >= 0 && concept_id < static_cast<int>(d.size())) {
            return d[static_cast<std::size_t>(concept_id)];
        }
        return 0.5;  // unseen at training time: smoothing prior
    }
};

struct PopulationScores {
    std::vector<double> scores;  // ascending, one final score per training student
    double mean = 0.0;
};

struct ForgettingState {
    double stu_score = 0.0;
    // concept -> (timestamp ms, correct) of the most recent interaction
    std::map<int, std::pair<std::int64_t, int>> last_interaction;
    int total_T = 1;
};

// Laplace-smoothed error rate per concept: (wrong + 1) / (attempts + 2).
// Concepts absent from the training data get 0.5.
inline ConceptDifficulty concept_difficulty(const data::Dataset& train) {
    if (train.sequences.empty()) throw std::invalid_argument("concept_difficulty: empty dataset");
    std::vector<long> attempts(static_cast<std::size_t>(train.num_concepts), 0);
    std::vector<long> wrong(static_cast<std::size_t>(train.num_concepts), 0);
    for (const auto& seq : train.sequences) {
        for (const auto& it : seq.interactions) {
            ++attempts[static_cast<std::size_t>(it.concept_id)];
            if (it.correct == 0) ++wrong[static_cast<std::size_t>(it.concept_id)];
        }
    }
    ConceptDifficulty out;
    out.d.resize(static_cast<std::size_t>(train.num_concepts));
    for (std::size_t c = 0; c < out.d.size(); ++c) {
        out.d[c] = static_cast<double>(wrong[c] + 1) / static_cast<double>(attempts[c] + 2);
    }
    return out;
}

// One score update. The time weight saturates at the cap:
//   w = min(1, ln(1 + dt) / ln(1 + cap))
// Correct answers gain d * (base + w) / T; wrong answers lose
// (1 - d) * (base + (1 - w)) * pen / T with pen > 1 when the concept was
// answered correctly last time.
inline double score_change(int r, double d, double delta_t_hours, std::optional<int> r_prev,
                           int total_T, const ScoreRule& rule = {}) {
    if (!(d > 0.0 && d < 1.0)) {
        throw std::invalid_argument("score_change: difficulty must lie in (0, 1)");
    }
    if (delta_t_hours < 0.0) throw std::invalid_argument("score_change: negative time gap");
    if (total_T < 1) throw std::invalid_argument("score_change: total_T must be >= 1");
    const double w = std::min(
        1.0, std::log1p(delta_t_hours) / std::log1p(rule.time_cap_hours));
    if (r == 1) {
        return d * (rule.base_weight + w) / static_cast<double>(total_T);
    }
    const double pen = (r_prev.has_value() && *r_prev == 1) ? rule.repeat_miss_penalty : 1.0;
    return -(1.0 - d) * (rule.base_weight + (1.0 - w)) * pen / static_cast<double>(total_T);
}

namespace detail {

// The Algorithm-1 loop body shared by the bootstrap pass and annotation.
// Per-concept gaps default to 0 on first encounter. Returns the level after
// each step via `levels` when a population is available.
inline double run_score_loop(const data::StudentSequence& seq, const ConceptDifficulty& diff,
                             double initial_score, const ScoreRule& rule,
                             const PopulationScores* pop, std::vector<int>* levels);

inline int percentile_level(double score, const PopulationScores& pop) {
    const auto lo = std::lower_bound(pop.scores.begin(), pop.scores.end(), score);
    const auto hi = std::upper_bound(pop.scores.begin(), pop.scores.end(), score);
    const double less = static_cast<double>(lo - pop.scores.begin());
    const double equal = static_cast<double>(hi - lo);
    const double p = (less + 0.5 * equal) / static_cast<double>(pop.scores.size());
    const int level = 1 + static_cast<int>(std::floor(p * 10.0));
    return std::clamp(level, 1, 10);
}

inline double run_score_loop(const data::StudentSequence& seq, const ConceptDifficulty& diff,
                             double initial_score, const ScoreRule& rule,
                             const PopulationScores* pop, std::vector<int>* levels) {
    ForgettingState st;
    st.stu_score = initial_score;
    st.total_T = static_cast<int>(seq.size());
    for (const auto& it : seq.interactions) {
        double delta_t_hours = 0.0;
        std::optional<int> r_prev;
        const auto last = st.last_interaction.find(it.concept_id);
        if (last != st.last_interaction.end()) {
            delta_t_hours =
                static_cast<double>(it.timestamp - last->second.first) / data::kMsPerHour;
            r_prev = last->second.second;
        }
        st.stu_score += score_change(it.correct, diff.of(it.concept_id), delta_t_hours, r_prev,
                                     st.total_T, rule);
        st.last_interaction[it.concept_id] = {it.timestamp, it.correct};
        if (levels != nullptr && pop != nullptr) {
            levels->push_back(percentile_level(st.stu_score, *pop));
        }
    }
    return st.stu_score;
}

}  // namespace detail

// Bootstrap pass: every training student is scored from 0 (the cohort mean
// does not exist yet); the sorted final scores and their mean seed all later
// cold starts.
inline PopulationScores population_scores(const data::Dataset& train,
                                          const ConceptDifficulty& diff,
                                          const ScoreRule& rule = {}) {
    if (train.sequences.empty()) throw std::invalid_argument("population_scores: empty dataset");
    PopulationScores pop;
    pop.scores.reserve(train.sequences.size());
    double sum = 0.0;
    for (const auto& seq : train.sequences) {
        const double s = detail::run_score_loop(seq, diff, 0.0, rule, nullptr, nullptr);
        pop.scores.push_back(s);
        sum += s;
    }
    pop.mean = sum / static_cast<double>(pop.scores.size());
    std::sort(pop.scores.begin(), pop.scores.end());
    return pop;
}

// Midrank percentile of `score` within the population, mapped to [1, 10].
inline int forget_level(double score, const PopulationScores& pop) {
    if (pop.scores.empty()) throw std::invalid_argument("forget_level: empty population");
    return detail::percentile_level(score, pop);
}

// Full Algorithm-1 pass for one student: cold-start at the population mean,
// update per interaction, emit the level after each update.
inline std::vector<int> annotate_sequence(const data::StudentSequence& seq,
                                          const ConceptDifficulty& diff,
                                          const PopulationScores& pop,
                                          const ScoreRule& rule = {}) {
    if (seq.interactions.empty()) {
        throw std::invalid_argument("annotate_sequence: empty sequence");
    }
    if (pop.scores.empty()) throw std::invalid_argument("annotate_sequence: empty population");
    std::vector<int> levels;
    levels.reserve(seq.size());
    detail::run_score_loop(seq, diff, pop.mean, rule, &pop, &levels);
    return levels;
}

// Final score of the same pass (used for reports and the case study).
inline double final_score(const data::StudentSequence& seq, const ConceptDifficulty& diff,
                          const PopulationScores& pop, const ScoreRule& rule = {}) {
    if (seq.interactions.empty()) throw std::invalid_argument("final_score: empty sequence");
    return detail::run_score_loop(seq, diff, pop.mean, rule, nullptr, nullptr);
}

// Frozen artifacts of the training cohort, bundled as the annotator handed
// to windowing and evaluation.
struct Annotator {
    ConceptDifficulty difficulty;
    PopulationScores population;
    ScoreRule rule;

    std::vector<int> operator()(const data::StudentSequence& seq) const {
        return annotate_sequence(seq, difficulty, population, rule);
    }

    double score(const data::StudentSequence& seq) const {
        return final_score(seq, difficulty, population, rule);
    }
};

inline Annotator fit(const data::Dataset& train, const ScoreRule& rule = {}) {
    Annotator a;
    a.rule = rule;
    a.difficulty = concept_difficulty(train);
    a.population = population_scores(train, a.difficulty, rule);
    return a;
}

}  // namespace memorykt::forgetting
