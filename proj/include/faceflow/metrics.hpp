#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "faceflow/synthetic.hpp"

namespace faceflow {

using Landmarks = std::array<std::array<double, 2>, 5>;

// Mean distance over the 5 landmarks, normalized by the ground-truth
// inter-ocular distance, in percent.
double landmark_error_pct(const Landmarks& pred, const FrameLabel& gt);

struct PoseMae {
    double yaw = 0, pitch = 0, roll = 0;
    double overall = 0;
};

struct PoseAngles {
    double yaw = 0, pitch = 0, roll = 0;
};

PoseMae pose_mae(const std::vector<PoseAngles>& pred, const std::vector<PoseAngles>& gt);

// Area under the ROC curve via the Mann-Whitney statistic: concordant pairs
// count 1, ties count 1/2. Throws UndefinedAucError when labels are
// single-class.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Per-class one-vs-rest AUC averaged over classes. Classes with undefined
// AUC are skipped; their names are appended to skipped (with a warning left
// to the caller to surface).
double macro_auc(const std::vector<std::vector<double>>& per_class_scores,
                 const std::vector<std::vector<int>>& per_class_labels,
                 std::vector<int>* skipped_classes = nullptr,
                 std::vector<double>* per_class_auc = nullptr);

// Inverse-frequency class weights normalized to mean 1.
std::vector<double> class_weights(const std::vector<int64_t>& label_counts);

}  // namespace faceflow
