#include "faceflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace faceflow {

double landmark_error_pct(const Landmarks& pred, const FrameLabel& gt) {
    const auto& le = gt.landmarks[0];
    const auto& re = gt.landmarks[1];
    const double iod = std::hypot(re[0] - le[0], re[1] - le[1]);
    if (iod == 0.0) throw ValueError("landmark_error: degenerate label, eye centers coincide");
    double acc = 0;
    for (int i = 0; i < 5; ++i) {
        const double d = std::hypot(pred[static_cast<size_t>(i)][0] - gt.landmarks[static_cast<size_t>(i)][0],
                                    pred[static_cast<size_t>(i)][1] - gt.landmarks[static_cast<size_t>(i)][1]);
        acc += d / iod;
    }
    return acc / 5.0 * 100.0;
}

PoseMae pose_mae(const std::vector<PoseAngles>& pred, const std::vector<PoseAngles>& gt) {
    if (pred.empty()) throw ValueError("pose_mae: empty input");
    if (pred.size() != gt.size())
        throw ValueError("pose_mae: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(gt.size()) + " labels");
    PoseMae m;
    for (size_t i = 0; i < pred.size(); ++i) {
        m.yaw += std::abs(pred[i].yaw - gt[i].yaw);
        m.pitch += std::abs(pred[i].pitch - gt[i].pitch);
        m.roll += std::abs(pred[i].roll - gt[i].roll);
    }
    const double n = static_cast<double>(pred.size());
    m.yaw /= n;
    m.pitch /= n;
    m.roll /= n;
    m.overall = (m.yaw + m.pitch + m.roll) / 3.0;
    return m;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw ValueError("auc: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(labels.size()) + " labels");
    int64_t n_pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValueError("auc: labels must be 0/1");
        n_pos += l;
    }
    const int64_t n = static_cast<int64_t>(scores.size());
    const int64_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw UndefinedAucError("auc: undefined for single-class labels (" + std::to_string(n_pos) +
                                " positives of " + std::to_string(n) + ")");

    // midrank assignment; rank sums of halves stay exact in double
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return scores[static_cast<size_t>(a)] < scores[static_cast<size_t>(b)]; });
    double rank_sum_pos = 0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() &&
               scores[static_cast<size_t>(order[j + 1])] == scores[static_cast<size_t>(order[i])])
            ++j;
        const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (size_t k = i; k <= j; ++k)
            if (labels[static_cast<size_t>(order[k])] == 1) rank_sum_pos += midrank;
        i = j + 1;
    }
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double macro_auc(const std::vector<std::vector<double>>& per_class_scores,
                 const std::vector<std::vector<int>>& per_class_labels, std::vector<int>* skipped_classes,
                 std::vector<double>* per_class_auc) {
    if (per_class_scores.size() != per_class_labels.size())
        throw ValueError("macro_auc: score/label class count mismatch");
    if (per_class_scores.empty()) throw ValueError("macro_auc: no classes");
    double total = 0;
    int counted = 0;
    for (size_t c = 0; c < per_class_scores.size(); ++c) {
        try {
            const double a = auc(per_class_scores[c], per_class_labels[c]);
            if (per_class_auc) per_class_auc->push_back(a);
            total += a;
            ++counted;
        } catch (const UndefinedAucError&) {
            if (skipped_classes) skipped_classes->push_back(static_cast<int>(c));
            if (per_class_auc) per_class_auc->push_back(std::numeric_limits<double>::quiet_NaN());
        }
    }
    if (counted == 0) throw UndefinedAucError("macro_auc: every class is single-class");
    return total / counted;
}

std::vector<double> class_weights(const std::vector<int64_t>& label_counts) {
    if (label_counts.empty()) throw ValueError("class_weights: no classes");
    std::vector<double> w(label_counts.size());
    double sum = 0;
    for (size_t c = 0; c < label_counts.size(); ++c) {
        if (label_counts[c] < 1)
            throw ValueError("class_weights: class " + std::to_string(c) + " has zero count");
        w[c] = 1.0 / static_cast<double>(label_counts[c]);
        sum += w[c];
    }
    const double mean = sum / static_cast<double>(w.size());
    for (auto& v : w) v /= mean;
    return w;
}

}  // namespace faceflow
