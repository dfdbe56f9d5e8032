#pragma once
// ROC/AUC and the per-identity summary statistics.
//
// Convention: label 1 (authentic) is the positive class and larger scores
// mean "more likely authentic".

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "dfid/error.hpp"

namespace dfid::metrics {

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    double threshold = 0;  // classify authentic iff score >= threshold
};

struct RocCurve {
    std::vector<RocPoint> points;  // from (0,0) to (1,1)
    double auc = 0;
};

namespace detail {

inline void check_inputs(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ConfigError("roc: scores and labels differ in length");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ConfigError("roc: labels must be 0 or 1");
        if (std::isnan(scores[i])) throw NumericError("roc: NaN score");
        pos += labels[i] == 1;
    }
    if (pos == 0 || pos == labels.size()) throw NumericError("roc: both classes must be present");
}

}  // namespace detail

// Mann-Whitney pair statistic. Pair counts are accumulated as exact integers
// in half units, so the result matches naive pair counting bit for bit.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    detail::check_inputs(scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::uint64_t twice = 0, neg_below = 0, pos_total = 0, neg_total = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t p = 0, q = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? p : q) += 1;
            ++j;
        }
        twice += 2 * p * neg_below + p * q;
        neg_below += q;
        pos_total += p;
        neg_total += q;
        i = j;
    }
    return static_cast<double>(twice) / (2.0 * static_cast<double>(pos_total) * static_cast<double>(neg_total));
}

inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    return auc(std::span<const double>(scores), std::span<const int>(labels));
}

inline RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
    RocCurve c;
    c.auc = auc(scores, labels);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double pos = 0, neg = 0;
    for (int l : labels) (l == 1 ? pos : neg) += 1;
    double tp = 0, fp = 0;
    c.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        c.points.push_back({fp / neg, tp / pos, scores[order[i]]});
        i = j;
    }
    return c;
}

inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
    return roc_curve(std::span<const double>(scores), std::span<const int>(labels));
}

// Threshold maximizing TPR - FPR; ties broken toward the larger threshold.
// Returned as the midpoint between the chosen score and the next lower one so
// that "authentic iff score > theta" reproduces the operating point.
inline double youden_threshold(std::span<const double> scores, std::span<const int> labels) {
    auto c = roc_curve(scores, labels);
    std::size_t best = 1;
    double best_j = -2;
    for (std::size_t i = 1; i < c.points.size(); ++i) {
        const double j = c.points[i].tpr - c.points[i].fpr;
        if (j > best_j) {
            best_j = j;
            best = i;
        }
    }
    const double hi = c.points[best].threshold;
    if (best + 1 < c.points.size()) return 0.5 * (hi + c.points[best + 1].threshold);
    return hi - 1.0;  // every sample authentic
}

// Type-7 (linear interpolation) sample quantile of sorted data.
inline double quantile_sorted(std::span<const double> sorted, double p) {
    if (sorted.empty()) throw ConfigError("quantile of an empty sample");
    if (p < 0 || p > 1) throw ConfigError("quantile level outside [0, 1]");
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline double quantile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, p);
}

struct AucSummary {
    std::vector<double> values;
    std::size_t n = 0;
    double mean = 0;
    double sd = 0;  // n - 1 denominator
    double median = 0;
    double q1 = 0;
    double q3 = 0;
    double iqr = 0;
    double trimmed_mean = 0;
    std::size_t trimmed_per_tail = 0;
    double min = 0;
    double max = 0;
};

// trim_total is the fraction removed in total, half from each tail.
inline AucSummary auc_summary(const std::vector<double>& values, double trim_total = 0.10) {
    if (values.size() < 2) throw ConfigError("auc_summary: need at least two values");
    if (trim_total < 0 || trim_total >= 1) throw ConfigError("auc_summary: trim fraction outside [0, 1)");
    AucSummary s;
    s.values = values;
    s.n = values.size();
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(s.n);
    double sum = 0;
    for (double v : values) sum += v;
    s.mean = sum / n;
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / (n - 1.0));
    s.median = quantile_sorted(sorted, 0.5);
    s.q1 = quantile_sorted(sorted, 0.25);
    s.q3 = quantile_sorted(sorted, 0.75);
    s.iqr = s.q3 - s.q1;
    s.trimmed_per_tail = static_cast<std::size_t>(std::floor(trim_total * n / 2.0 + 1e-9));
    const std::size_t keep_lo = s.trimmed_per_tail, keep_hi = s.n - s.trimmed_per_tail;
    double tsum = 0;
    for (std::size_t i = keep_lo; i < keep_hi; ++i) tsum += sorted[i];
    s.trimmed_mean = tsum / static_cast<double>(keep_hi - keep_lo);
    s.min = sorted.front();
    s.max = sorted.back();
    return s;
}

}  // namespace dfid::metrics
