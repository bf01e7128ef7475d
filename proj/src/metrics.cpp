#include "semalign/metrics.hpp"

#include "semalign/errors.hpp"

#include <cstdio>
#include <sstream>

namespace semalign {

OverlapCounts::OverlapCounts(Index num_classes)
    : intersection(static_cast<std::size_t>(num_classes), 0),
      predicted(static_cast<std::size_t>(num_classes), 0),
      ground_truth(static_cast<std::size_t>(num_classes), 0) {}

void OverlapCounts::add(const LabelMap& pred, const LabelMap& gt, std::uint8_t ignore_value) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w)
        throw ConfigError("dice_jaccard: prediction and ground truth shapes differ");
    const Index C = num_classes();
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const std::uint8_t g = gt.data[i];
        const std::uint8_t p = pred.data[i];
        if (p != ignore_value && p >= C)
            throw ConfigError("dice_jaccard: predicted label " + std::to_string(p) + " >= " + std::to_string(C));
        if (g == ignore_value) continue;
        if (g >= C) throw ConfigError("dice_jaccard: ground-truth label " + std::to_string(g) + " >= " + std::to_string(C));
        ++ground_truth[g];
        if (p == ignore_value) continue;
        ++predicted[p];
        if (p == g) ++intersection[g];
    }
    n_images += gt.n;
}

MetricReport metrics_from_counts(const OverlapCounts& counts) {
    MetricReport r;
    r.counts = counts;
    r.n_images = counts.n_images;
    const Index C = counts.num_classes();
    for (Index c = 0; c < C; ++c) {
        const auto i = static_cast<double>(counts.intersection[c]);
        const auto p = static_cast<double>(counts.predicted[c]);
        const auto g = static_cast<double>(counts.ground_truth[c]);
        if (p + g == 0) {
            r.dice.push_back(1.0);
            r.jaccard.push_back(1.0);
        } else {
            r.dice.push_back(2.0 * i / (p + g));
            r.jaccard.push_back(i / (p + g - i));
        }
    }
    for (Index c = 0; c < C; ++c) {
        r.mdice += r.dice[c] / static_cast<double>(C);
        r.mjaccard += r.jaccard[c] / static_cast<double>(C);
    }
    return r;
}

MetricReport dice_jaccard(const LabelMap& pred, const LabelMap& gt, Index num_classes, std::uint8_t ignore_value) {
    if (num_classes <= 0) throw ConfigError("dice_jaccard: num_classes must be > 0");
    OverlapCounts counts(num_classes);
    counts.add(pred, gt, ignore_value);
    return metrics_from_counts(counts);
}

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string class_name(const std::vector<std::string>& names, std::size_t c) {
    return c < names.size() ? names[c] : "class" + std::to_string(c);
}

}  // namespace

std::string metrics_csv(const MetricReport& r, const std::vector<std::string>& names) {
    std::ostringstream os;
    os << "class,name,dice,jaccard,intersection,predicted,ground_truth\n";
    for (std::size_t c = 0; c < r.dice.size(); ++c)
        os << c << ',' << class_name(names, c) << ',' << fmt("%.6f", r.dice[c]) << ','
           << fmt("%.6f", r.jaccard[c]) << ',' << r.counts.intersection[c] << ',' << r.counts.predicted[c]
           << ',' << r.counts.ground_truth[c] << '\n';
    os << "mean,all," << fmt("%.6f", r.mdice) << ',' << fmt("%.6f", r.mjaccard) << ",,,\n";
    return os.str();
}

std::string metrics_summary(const MetricReport& r, const std::vector<std::string>& names,
                            const std::string& labeled, const std::string& method) {
    std::ostringstream os;
    os << "| Labeled | Method | mDice (%) | mJaccard (%) |\n";
    os << "|---|---|---|---|\n";
    os << "| " << labeled << " | " << method << " | " << fmt("%.2f", 100 * r.mdice) << " | "
       << fmt("%.2f", 100 * r.mjaccard) << " |\n\n";
    os << "| Class | Dice (%) | Jaccard (%) |\n|---|---|---|\n";
    for (std::size_t c = 0; c < r.dice.size(); ++c)
        os << "| " << class_name(names, c) << " | " << fmt("%.2f", 100 * r.dice[c]) << " | "
           << fmt("%.2f", 100 * r.jaccard[c]) << " |\n";
    os << "\nimages: " << r.n_images << '\n';
    return os.str();
}

}  // namespace semalign
