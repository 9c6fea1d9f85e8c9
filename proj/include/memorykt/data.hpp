#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace memorykt::data {

inline constexpr double kMsPerHour = 3600.0 * 1000.0;

struct Interaction {
    int concept_id = 0;
    int correct = 0;            // {0, 1}
    std::int64_t timestamp = 0;  // milliseconds since epoch
};

struct StudentSequence {
    std::string student_id;
    std::vector<Interaction> interactions;  // non-decreasing timestamps

    std::size_t size() const { return interactions.size(); }
};

struct Dataset {
    std::vector<StudentSequence> sequences;
    int num_concepts = 0;

    std::size_t num_students() const { return sequences.size(); }
    std::size_t num_interactions() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.size();
        return n;
    }
};

namespace detail {

inline bool parse_int64(const std::string& s, std::int64_t& out) {
    const char* begin = s.data();
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    return ec == std::errc{} && ptr == end && !s.empty();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

[[noreturn]] inline void load_fail(const std::string& path, std::size_t line_no,
                                   const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + msg);
}

}  // namespace detail

// Reads the interaction CSV (header `student_id,concept_id,correct,timestamp`),
// groups rows by student in first-appearance order, and stably sorts each
// student's rows by timestamp (file order breaks timestamp ties). K is
// inferred as max concept_id + 1 unless overridden (override must cover the
// data).
inline Dataset load_interactions(const std::string& path, int num_concepts_override = 0) {
    std::ifstream in(path);
    if (!in.is_open()) throw std::runtime_error("cannot open " + path);

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "student_id,concept_id,correct,timestamp") {
        detail::load_fail(path, line_no,
                          "expected header `student_id,concept_id,correct,timestamp`, got `" +
                              line + "`");
    }

    Dataset d;
    std::unordered_map<std::string, std::size_t> by_student;
    int max_concept = -1;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 4) {
            detail::load_fail(path, line_no,
                              "expected 4 fields, got " + std::to_string(fields.size()));
        }
        std::int64_t concept_id = 0, correct = 0, timestamp = 0;
        if (fields[0].empty()) detail::load_fail(path, line_no, "empty student_id");
        if (!detail::parse_int64(fields[1], concept_id) || concept_id < 0) {
            detail::load_fail(path, line_no, "concept_id must be a non-negative integer, got `" +
                                                 fields[1] + "`");
        }
        if (!detail::parse_int64(fields[2], correct) || (correct != 0 && correct != 1)) {
            detail::load_fail(path, line_no, "correct must be 0 or 1, got `" + fields[2] + "`");
        }
        if (!detail::parse_int64(fields[3], timestamp) || timestamp < 0) {
            detail::load_fail(path, line_no, "timestamp must be a non-negative integer, got `" +
                                                 fields[3] + "`");
        }
        max_concept = std::max(max_concept, static_cast<int>(concept_id));

        auto it = by_student.find(fields[0]);
        if (it == by_student.end()) {
            by_student.emplace(fields[0], d.sequences.size());
            d.sequences.push_back(StudentSequence{fields[0], {}});
            it = by_student.find(fields[0]);
        }
        d.sequences[it->second].interactions.push_back(
            Interaction{static_cast<int>(concept_id), static_cast<int>(correct), timestamp});
        ++rows;
    }
    if (rows == 0) throw std::runtime_error(path + ": no data rows");

    if (num_concepts_override > 0) {
        if (num_concepts_override <= max_concept) {
            throw std::runtime_error(path + ": num_concepts override " +
                                     std::to_string(num_concepts_override) +
                                     " does not cover max concept_id " +
                                     std::to_string(max_concept));
        }
        d.num_concepts = num_concepts_override;
    } else {
        d.num_concepts = max_concept + 1;
    }

    for (auto& seq : d.sequences) {
        std::stable_sort(seq.interactions.begin(), seq.interactions.end(),
                         [](const Interaction& a, const Interaction& b) {
                             return a.timestamp < b.timestamp;
                         });
    }
    return d;
}

inline Dataset filter_short(const Dataset& d, int min_len = 3) {
    if (min_len < 1) throw std::invalid_argument("filter_short: min_len must be >= 1");
    Dataset out;
    out.num_concepts = d.num_concepts;
    for (const auto& seq : d.sequences) {
        if (static_cast<int>(seq.size()) >= min_len) out.sequences.push_back(seq);
    }
    return out;
}

// Student-granular split. |test| = lround(test_frac * |students|), rounding
// half away from zero; assignment is a seeded shuffle of student indices.
inline std::pair<Dataset, Dataset> split_train_test(const Dataset& d, double test_frac,
                                                    std::uint64_t seed) {
    if (!(test_frac > 0.0 && test_frac < 1.0)) {
        throw std::invalid_argument("split_train_test: test_frac must be in (0, 1)");
    }
    const std::size_t n = d.num_students();
    if (n < 2) throw std::invalid_argument("split_train_test: need at least 2 students");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const std::size_t n_test =
        static_cast<std::size_t>(std::lround(test_frac * static_cast<double>(n)));

    std::vector<bool> is_test(n, false);
    for (std::size_t i = 0; i < n_test && i < n; ++i) is_test[order[i]] = true;

    Dataset train, test;
    train.num_concepts = test.num_concepts = d.num_concepts;
    for (std::size_t i = 0; i < n; ++i) {
        (is_test[i] ? test : train).sequences.push_back(d.sequences[i]);
    }
    return {std::move(train), std::move(test)};
}

// k student-granular folds: validation parts are disjoint, cover every
// student, and differ in size by at most one.
inline std::vector<std::pair<Dataset, Dataset>> kfold(const Dataset& d, int k,
                                                      std::uint64_t seed) {
    const std::size_t n = d.num_students();
    if (k < 2) throw std::invalid_argument("kfold: k must be >= 2");
    if (n < static_cast<std::size_t>(k)) {
        throw std::invalid_argument("kfold: need at least k students, have " + std::to_string(n));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<int> fold_of(n, 0);
    const std::size_t base = n / static_cast<std::size_t>(k);
    const std::size_t rem = n % static_cast<std::size_t>(k);
    std::size_t pos = 0;
    for (int f = 0; f < k; ++f) {
        const std::size_t sz = base + (static_cast<std::size_t>(f) < rem ? 1 : 0);
        for (std::size_t j = 0; j < sz; ++j) fold_of[order[pos++]] = f;
    }

    std::vector<std::pair<Dataset, Dataset>> folds(static_cast<std::size_t>(k));
    for (auto& [train, valid] : folds) train.num_concepts = valid.num_concepts = d.num_concepts;
    for (std::size_t i = 0; i < n; ++i) {
        for (int f = 0; f < k; ++f) {
            auto& [train, valid] = folds[static_cast<std::size_t>(f)];
            (fold_of[i] == f ? valid : train).sequences.push_back(d.sequences[i]);
        }
    }
    return folds;
}

// Fixed-length windows over every sequence, row-major [rows x T].
// mask[r,t] = 0 marks right padding; all other fields are zero there.
struct SequenceBatch {
    int T = 0;
    int rows = 0;
    std::vector<int> concept_id;    // [rows x T]
    std::vector<int> correct;       // [rows x T]
    std::vector<double> delta_t;    // [rows x T], hours since previous interaction
    std::vector<int> forget_level;  // [rows x T], in [1, 10] where mask = 1
    std::vector<std::uint8_t> mask;  // [rows x T]
    std::vector<int> sequence_index;  // [rows], index into the source Dataset
    std::vector<int> chunk_index;     // [rows], window ordinal within the student

    std::size_t idx(int r, int t) const {
        return static_cast<std::size_t>(r) * static_cast<std::size_t>(T) +
               static_cast<std::size_t>(t);
    }

    // Number of leading timesteps that carry data in any of the given rows.
    int effective_T(const std::vector<int>& row_ids) const {
        int t_eff = 0;
        for (int r : row_ids) {
            int len = 0;
            for (int t = 0; t < T; ++t) {
                if (mask[idx(r, t)]) len = t + 1;
            }
            t_eff = std::max(t_eff, len);
        }
        return t_eff;
    }

    SequenceBatch select(const std::vector<int>& row_ids) const {
        SequenceBatch out;
        out.T = T;
        out.rows = static_cast<int>(row_ids.size());
        const std::size_t w = static_cast<std::size_t>(T);
        out.concept_id.resize(row_ids.size() * w);
        out.correct.resize(row_ids.size() * w);
        out.delta_t.resize(row_ids.size() * w);
        out.forget_level.resize(row_ids.size() * w);
        out.mask.resize(row_ids.size() * w);
        for (std::size_t r = 0; r < row_ids.size(); ++r) {
            const std::size_t src = static_cast<std::size_t>(row_ids[r]) * w;
            std::copy_n(concept_id.begin() + src, w, out.concept_id.begin() + r * w);
            std::copy_n(correct.begin() + src, w, out.correct.begin() + r * w);
            std::copy_n(delta_t.begin() + src, w, out.delta_t.begin() + r * w);
            std::copy_n(forget_level.begin() + src, w, out.forget_level.begin() + r * w);
            std::copy_n(mask.begin() + src, w, out.mask.begin() + r * w);
            out.sequence_index.push_back(sequence_index[row_ids[r]]);
            out.chunk_index.push_back(chunk_index[row_ids[r]]);
        }
        return out;
    }
};

// Per-sequence forgetting annotation: returns one level in [1, 10] per
// interaction. Supplied by the forgetting module; tests may pass a stub.
using SequenceAnnotator = std::function<std::vector<int>(const StudentSequence&)>;

// Chunks each sequence into consecutive non-overlapping windows of length
// `window`. The final partial window is right-padded with mask = 0. Within a
// student's first window delta_t[0] = 0; later windows carry the gap to the
// previous window's last interaction. Hidden state is not carried across
// windows, so the per-window model always starts from the zero state.
inline SequenceBatch window_sequences(const Dataset& d, int window,
                                      const SequenceAnnotator& annotate) {
    if (window < 2) throw std::invalid_argument("window_sequences: window must be >= 2");
    SequenceBatch b;
    b.T = window;
    for (std::size_t s = 0; s < d.sequences.size(); ++s) {
        const StudentSequence& seq = d.sequences[s];
        if (seq.interactions.empty()) continue;
        const std::vector<int> levels = annotate(seq);
        if (levels.size() != seq.size()) {
            throw std::runtime_error("window_sequences: annotator returned " +
                                     std::to_string(levels.size()) + " levels for " +
                                     std::to_string(seq.size()) + " interactions");
        }
        const int len = static_cast<int>(seq.size());
        for (int start = 0, chunk = 0; start < len; start += window, ++chunk) {
            const int n = std::min(window, len - start);
            const int row = b.rows++;
            b.concept_id.resize(b.concept_id.size() + static_cast<std::size_t>(window), 0);
            b.correct.resize(b.correct.size() + static_cast<std::size_t>(window), 0);
            b.delta_t.resize(b.delta_t.size() + static_cast<std::size_t>(window), 0.0);
            b.forget_level.resize(b.forget_level.size() + static_cast<std::size_t>(window), 0);
            b.mask.resize(b.mask.size() + static_cast<std::size_t>(window), 0);
            b.sequence_index.push_back(static_cast<int>(s));
            b.chunk_index.push_back(chunk);
            for (int j = 0; j < n; ++j) {
                const int i = start + j;
                const Interaction& it = seq.interactions[static_cast<std::size_t>(i)];
                b.concept_id[b.idx(row, j)] = it.concept_id;
                b.correct[b.idx(row, j)] = it.correct;
                b.forget_level[b.idx(row, j)] = levels[static_cast<std::size_t>(i)];
                b.mask[b.idx(row, j)] = 1;
                if (i > 0) {
                    const double gap_ms = static_cast<double>(
                        it.timestamp - seq.interactions[static_cast<std::size_t>(i - 1)].timestamp);
                    b.delta_t[b.idx(row, j)] = gap_ms / kMsPerHour;
                }
            }
        }
    }
    return b;
}

}  // namespace memorykt::data
