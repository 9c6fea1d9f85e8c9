#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace memorykt::metrics {

struct PredictionRecord {
    double score = 0.0;  // probability in (0, 1)
    int label = 0;       // {0, 1}
};

// Rank-based (Mann-Whitney) AUC with midrank tie handling.
inline double auc(const std::vector<PredictionRecord>& records) {
    std::size_t n_pos = 0, n_neg = 0;
    for (const auto& r : records) (r.label == 1 ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) {
        throw std::invalid_argument("auc: need at least one positive and one negative label");
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return records[a].score < records[b].score;
    });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && records[order[j + 1]].score == records[order[i]].score) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k) {
            if (records[order[k]].label == 1) rank_sum_pos += midrank;
        }
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Fraction of records where (score >= threshold) matches the label. A score
// exactly at the threshold counts as a positive prediction.
inline double accuracy(const std::vector<PredictionRecord>& records, double threshold = 0.5) {
    if (records.empty()) throw std::invalid_argument("accuracy: no records");
    std::size_t hit = 0;
    for (const auto& r : records) {
        const int predicted = r.score >= threshold ? 1 : 0;
        if (predicted == r.label) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(records.size());
}

// Product-moment correlation; throws when either argument has zero variance.
inline double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson_r: length mismatch");
    if (x.size() < 2) throw std::invalid_argument("pearson_r: need at least 2 points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson_r: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace memorykt::metrics
