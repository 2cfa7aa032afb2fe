#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gprxv/box.hpp"
#include "gprxv/detect.hpp"
#include "gprxv/fuse.hpp"
#include "gprxv/synth.hpp"

namespace gprxv {

struct PrCounts {
    int tp = 0;
    int fp = 0;
    int fn = 0;

    PrCounts& operator+=(const PrCounts& o)
    {
        tp += o.tp, fp += o.fp, fn += o.fn;
        return *this;
    }
    bool operator==(const PrCounts&) const = default;
};

/// TP / (TP + FP) and TP / (TP + FN); nullopt when the denominator is 0.
std::optional<double> precision(const PrCounts& c);
std::optional<double> recall(const PrCounts& c);

template <typename Box>
struct ScoredBox {
    Box box;
    int cls = 0;
    double score = 0.0;
};

template <typename Box>
struct GtBox {
    Box box;
    int cls = 0;
};

struct MatchPair {
    int pred = 0;
    int gt = 0;
    double iou = 0.0;
};

struct MatchResult {
    std::map<int, PrCounts> per_class;
    std::vector<MatchPair> pairs;  // in the order they were made
};

/// One-to-one greedy matching per class. Predictions are visited by score
/// (desc, then index); each takes the unmatched same-class gt with the highest
/// IoU >= thresh, ties to the lower gt index.
template <typename Box>
MatchResult match(std::span<const ScoredBox<Box>> preds, std::span<const GtBox<Box>> gts, double thresh = 0.5)
{
    MatchResult r;
    std::vector<int> order(preds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return preds[a].score > preds[b].score; });
    std::vector<char> taken(gts.size(), 0);
    for (int p : order) {
        int best = -1;
        double best_iou = 0.0;
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g] || gts[g].cls != preds[p].cls) continue;
            const double v = iou(preds[p].box, gts[g].box);
            if (v >= thresh && (best < 0 || v > best_iou)) best = int(g), best_iou = v;
        }
        PrCounts& c = r.per_class[preds[p].cls];
        if (best >= 0) {
            taken[std::size_t(best)] = 1;
            ++c.tp;
            r.pairs.push_back({p, best, best_iou});
        } else {
            ++c.fp;
        }
    }
    for (std::size_t g = 0; g < gts.size(); ++g) {
        if (!taken[g]) ++r.per_class[gts[g].cls].fn;
    }
    return r;
}

/// One table row: counts for a class (or class group) at one stage.
struct MetricsRow {
    std::string cls;
    PrCounts counts;
};

struct MetricsReport {
    std::string stage;
    std::vector<MetricsRow> rows;

    const PrCounts* find(std::string_view cls) const;
    PrCounts& at(std::string_view cls);   // appends an empty row if missing
    /// Sum of the per-class rows, excluding the class-agnostic groups.
    PrCounts overall() const;
    MetricsReport& operator+=(const MetricsReport& o);
};

/// Per-class rows for void, loose and manhole plus a class-agnostic
/// "distress" row in which any void, loose or unspecified finding may match
/// any void or loose object.
MetricsReport evaluate_findings(std::span<const Finding> findings, const GroundTruth& gt, double thresh3d = 0.3);

/// Tables of the cross-verification stages for one volume:
///   step1  healthy (per volume), non_healthy and distress over kept candidates
///   step2  manhole findings, distress pool
///   step3  final findings (same rows as evaluate_findings)
std::vector<MetricsReport> staged_metrics(const FusionTrace& trace, const GroundTruth& gt, double thresh3d = 0.3);

/// Per-view model evaluation on the annotated slices: detections on each
/// object's centre slice are matched in 2D against every object crossing it.
MetricsReport evaluate_view_detections(std::span<const Detection> dets, const GroundTruth& gt, View view,
                                       double thresh = 0.5);

/// Accumulates per-stage reports over volumes, matching by stage name.
void accumulate(std::vector<MetricsReport>& total, const std::vector<MetricsReport>& part);

/// Aligned text table, one line per (stage, class).
std::string report_table(std::span<const MetricsReport> reports);
std::string report_json(std::span<const MetricsReport> reports);

/// Ground-truth annotation records, one object per line.
std::string truth_to_text(const GroundTruth& gt);
GroundTruth truth_from_text(std::string_view text, const std::string& origin = "<memory>");
void save_truth(const std::filesystem::path& path, const GroundTruth& gt);
GroundTruth load_truth(const std::filesystem::path& path);

}  // namespace gprxv
