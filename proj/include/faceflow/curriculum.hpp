#pragma once

#include <cstdint>
#include <vector>

#include "faceflow/common.hpp"

namespace faceflow {

// Rank-window sample selection: stage k back-propagates the samples whose
// losses fall in the [10k, 10k+50) percentile band of the batch, ascending.
// Returns original batch indices in rank order. Ties break by original
// index, so selection is reproducible.
std::vector<int> select_window(const std::vector<double>& sample_losses, int stage);

// True iff none of the last `patience` values improves on the running best
// of the values before it inside that window by more than rel_eps relative.
bool plateau_detected(const std::vector<double>& val_history, int patience, double rel_eps);

// Five-stage window schedule (0-50 ... 40-90). A plateau advances the stage;
// the plateau after stage 4 terminates the schedule, freezing the window at
// 40-90 and never touching the top decile again.
struct CurriculumState {
    int stage = 0;
    bool active = true;
    std::vector<double> val_history;
    int plateau_patience = 5;
    double plateau_rel_eps = 1e-3;

    static constexpr int kFinalStage = 4;

    enum class Advance { none, stage_advanced, terminated };

    Advance advance(double new_val_loss);
};

}  // namespace faceflow
