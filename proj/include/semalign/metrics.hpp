#pragma once

#include "semalign/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace semalign {

/// Per-class pixel counts aggregated over a dataset.
struct OverlapCounts {
    std::vector<std::int64_t> intersection;
    std::vector<std::int64_t> predicted;
    std::vector<std::int64_t> ground_truth;
    Index n_images = 0;

    explicit OverlapCounts(Index num_classes = 0);
    Index num_classes() const { return static_cast<Index>(intersection.size()); }
    /// Adds every image of a [B, H, W] pair; pixels whose ground truth is `ignore_value` are skipped.
    void add(const LabelMap& pred, const LabelMap& gt, std::uint8_t ignore_value = LabelMap::kIgnore);
};

struct MetricReport {
    std::vector<double> dice;
    std::vector<double> jaccard;
    double mdice = 0;
    double mjaccard = 0;
    Index n_images = 0;
    OverlapCounts counts;
};

/// Dice 2|P∩G| / (|P|+|G|) and Jaccard |P∩G| / |P∪G| per class; a class absent from both
/// prediction and ground truth scores 1.
MetricReport metrics_from_counts(const OverlapCounts& counts);
MetricReport dice_jaccard(const LabelMap& pred, const LabelMap& gt, Index num_classes,
                          std::uint8_t ignore_value = LabelMap::kIgnore);

/// One row per class plus a mean row: `class,name,dice,jaccard,intersection,predicted,ground_truth`.
std::string metrics_csv(const MetricReport& report, const std::vector<std::string>& class_names);

/// Results table with columns Labeled | Method | mDice (%) | mJaccard (%), followed by per-class rows.
std::string metrics_summary(const MetricReport& report, const std::vector<std::string>& class_names,
                            const std::string& labeled, const std::string& method);

}  // namespace semalign
