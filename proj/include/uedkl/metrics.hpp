#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "uedkl/common.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

struct EvalReport {
    std::vector<std::vector<int64_t>> confusion;  // [true][pred]
    std::vector<double> precision_per_class;
    std::vector<double> recall_per_class;
    std::vector<double> f1_per_class;
    double acc = 0.0;
    double p_macro = 0.0;
    double r_macro = 0.0;
    double f_macro = 0.0;
    double p_weight = 0.0;
    double r_weight = 0.0;
    double f_weight = 0.0;
};

// Standard multiclass confusion-matrix metrics. Per-class zero denominators
// yield 0 for that class; macro averages are unweighted over all C classes;
// weighted averages use true-class frequencies N_c/N.
inline EvalReport compute_metrics(const std::vector<int>& labels, const std::vector<int>& preds,
                                  int num_classes) {
    if (labels.size() != preds.size())
        throw ContractError("compute_metrics: labels/preds length mismatch");
    if (labels.empty()) throw ContractError("compute_metrics: empty input");
    if (num_classes < 1) throw ContractError("compute_metrics: num_classes must be positive");

    EvalReport r;
    r.confusion.assign(static_cast<size_t>(num_classes),
                       std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
            throw ContractError("compute_metrics: class index out of range at item " +
                                std::to_string(i));
        ++r.confusion[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])];
    }

    const double n = static_cast<double>(labels.size());
    int64_t correct = 0;
    r.precision_per_class.resize(static_cast<size_t>(num_classes));
    r.recall_per_class.resize(static_cast<size_t>(num_classes));
    r.f1_per_class.resize(static_cast<size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c) {
        const auto cc = static_cast<size_t>(c);
        int64_t tp = r.confusion[cc][cc], fp = 0, fn = 0, support = 0;
        for (int k = 0; k < num_classes; ++k) {
            const auto kk = static_cast<size_t>(k);
            if (k != c) {
                fp += r.confusion[kk][cc];
                fn += r.confusion[cc][kk];
            }
            support += r.confusion[cc][kk];
        }
        correct += tp;
        const double p = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double rr = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double f = (p + rr) > 0.0 ? 2.0 * p * rr / (p + rr) : 0.0;
        r.precision_per_class[cc] = p;
        r.recall_per_class[cc] = rr;
        r.f1_per_class[cc] = f;
        // Weighted sums accumulate support * metric and divide once at the
        // end so a perfect prediction vector scores exactly 1.0.
        const double w = static_cast<double>(support);
        r.p_macro += p;
        r.r_macro += rr;
        r.f_macro += f;
        r.p_weight += w * p;
        r.r_weight += w * rr;
        r.f_weight += w * f;
    }
    r.acc = static_cast<double>(correct) / n;
    r.p_macro /= num_classes;
    r.r_macro /= num_classes;
    r.f_macro /= num_classes;
    r.p_weight /= n;
    r.r_weight /= n;
    r.f_weight /= n;
    return r;
}

inline constexpr int kHufSplits = 20;

struct HufPoint {
    double ratio = 0.0;
    double f_weight = 0.0;
};

struct HUFCurve {
    // First point is the no-corrections baseline (ratio 0), followed by one
    // point per split threshold.
    std::vector<HufPoint> points;
    std::vector<double> thresholds;  // the split values; final entry is -inf
};

// Simulated-triage curve: predictions whose uncertainty strictly exceeds a
// threshold are replaced by their true label, and the weighted F score of the
// corrected vector is recorded. Thresholds are the values at the 20
// equal-rank cut positions of the descending-sorted uncertainties, with the
// final threshold at -infinity so the last point corrects everything.
inline HUFCurve huf_curve(const std::vector<int>& labels, const std::vector<int>& preds,
                          const std::vector<double>& uncertainties, int num_classes) {
    const size_t n = labels.size();
    if (preds.size() != n || uncertainties.size() != n)
        throw ContractError("huf_curve: input length mismatch");
    if (n == 0) throw ContractError("huf_curve: empty input");
    for (double u : uncertainties)
        if (!std::isfinite(u)) throw ContractError("huf_curve: non-finite uncertainty");

    std::vector<double> sorted_u = uncertainties;
    std::sort(sorted_u.begin(), sorted_u.end(), std::greater<double>());

    HUFCurve curve;
    curve.points.push_back({0.0, compute_metrics(labels, preds, num_classes).f_weight});
    std::vector<int> corrected(n);
    for (int k = 1; k <= kHufSplits; ++k) {
        double p;
        if (k == kHufSplits) {
            p = -std::numeric_limits<double>::infinity();
        } else {
            const size_t idx = static_cast<size_t>(k) * n / kHufSplits;
            p = sorted_u[std::min(idx, n - 1)];
        }
        curve.thresholds.push_back(p);
        size_t handled = 0;
        for (size_t i = 0; i < n; ++i) {
            if (uncertainties[i] > p) {
                corrected[i] = labels[i];
                ++handled;
            } else {
                corrected[i] = preds[i];
            }
        }
        curve.points.push_back({static_cast<double>(handled) / static_cast<double>(n),
                                compute_metrics(labels, corrected, num_classes).f_weight});
    }
    return curve;
}

inline constexpr int kBaselineSeeds = 32;

// Control curve: the same sweep with items handled in random order instead of
// by uncertainty, averaged pointwise over kBaselineSeeds draws.
inline HUFCurve random_correction_baseline(const std::vector<int>& labels,
                                           const std::vector<int>& preds, int num_classes,
                                           uint64_t seed) {
    const size_t n = labels.size();
    if (preds.size() != n) throw ContractError("random_correction_baseline: length mismatch");
    if (n == 0) throw ContractError("random_correction_baseline: empty input");

    HUFCurve avg;
    avg.points.assign(static_cast<size_t>(kHufSplits) + 1, HufPoint{});
    for (int s = 0; s < kBaselineSeeds; ++s) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(s)));
        // Distinct synthetic "uncertainties": a random permutation of ranks,
        // so each draw handles a uniformly random subset at every ratio.
        std::vector<double> fake(n);
        for (size_t i = 0; i < n; ++i) fake[i] = static_cast<double>(n - i);
        rng.shuffle(fake);
        HUFCurve c = huf_curve(labels, preds, fake, num_classes);
        for (size_t i = 0; i < avg.points.size(); ++i) {
            avg.points[i].ratio += c.points[i].ratio;
            avg.points[i].f_weight += c.points[i].f_weight;
        }
    }
    for (auto& p : avg.points) {
        p.ratio /= kBaselineSeeds;
        p.f_weight /= kBaselineSeeds;
    }
    return avg;
}

struct GroupStats {
    size_t count = 0;
    double mean = 0.0;
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    std::vector<double> values;
};

struct UncertaintyGroups {
    GroupStats correct;
    GroupStats incorrect;
    GroupStats unseen;
};

namespace metrics_detail {

inline double median_of(const std::vector<double>& sorted, size_t lo, size_t hi) {
    // Median of sorted[lo, hi); hi > lo.
    const size_t m = hi - lo;
    const size_t mid = lo + m / 2;
    if (m % 2 == 1) return sorted[mid];
    return 0.5 * (sorted[mid - 1] + sorted[mid]);
}

inline GroupStats summarize(std::vector<double> values) {
    GroupStats g;
    g.count = values.size();
    if (values.empty()) return g;
    double s = 0.0;
    for (double v : values) s += v;
    g.mean = s / static_cast<double>(values.size());
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    g.median = median_of(values, 0, n);
    // Quartiles as medians of the halves, excluding the middle element when
    // the count is odd.
    const size_t half = n / 2;
    g.q1 = half > 0 ? median_of(values, 0, half) : g.median;
    g.q3 = half > 0 ? median_of(values, n - half, n) : g.median;
    g.values = std::move(values);
    return g;
}

}  // namespace metrics_detail

// Partitions evaluated items into correct / incorrect / unseen and summarizes
// the uncertainty values of each group. Unseen items (true class outside the
// trained label set) land in the unseen group regardless of the prediction.
inline UncertaintyGroups uncertainty_groups(const std::vector<int>& labels,
                                            const std::vector<int>& preds,
                                            const std::vector<double>& uncertainties,
                                            const std::vector<uint8_t>& unseen_flags) {
    const size_t n = labels.size();
    if (preds.size() != n || uncertainties.size() != n || unseen_flags.size() != n)
        throw ContractError("uncertainty_groups: input length mismatch");
    std::vector<double> cor, inc, uns;
    for (size_t i = 0; i < n; ++i) {
        if (unseen_flags[i])
            uns.push_back(uncertainties[i]);
        else if (preds[i] == labels[i])
            cor.push_back(uncertainties[i]);
        else
            inc.push_back(uncertainties[i]);
    }
    UncertaintyGroups g;
    g.correct = metrics_detail::summarize(std::move(cor));
    g.incorrect = metrics_detail::summarize(std::move(inc));
    g.unseen = metrics_detail::summarize(std::move(uns));
    return g;
}

}  // namespace uedkl
