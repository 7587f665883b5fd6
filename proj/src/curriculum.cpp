#include "faceflow/curriculum.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace faceflow {

std::vector<int> select_window(const std::vector<double>& sample_losses, int stage) {
    const int n = static_cast<int>(sample_losses.size());
    if (n == 0) throw ValueError("select_window: empty batch");
    if (n < 2) throw ValueError("select_window: need at least 2 samples, got " + std::to_string(n));
    if (stage < 0 || stage > CurriculumState::kFinalStage)
        throw ValueError("select_window: stage " + std::to_string(stage) + " out of [0,4]");

    std::vector<int> order(sample_losses.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return sample_losses[static_cast<size_t>(a)] < sample_losses[static_cast<size_t>(b)]; });

    // rank interval [floor(0.1*k*N), floor((0.1*k + 0.5)*N)), exact in integers
    const int lo = stage * n / 10;
    const int hi = (stage * n + 5 * n) / 10;
    return std::vector<int>(order.begin() + lo, order.begin() + hi);
}

bool plateau_detected(const std::vector<double>& val_history, int patience, double rel_eps) {
    if (patience < 1) throw ValueError("plateau_detected: patience must be >= 1");
    if (static_cast<int>(val_history.size()) < patience) return false;
    const size_t start = val_history.size() - static_cast<size_t>(patience);
    double best = val_history[start];
    for (size_t i = start + 1; i < val_history.size(); ++i) {
        if (val_history[i] < best * (1.0 - rel_eps)) return false;  // still improving
        best = std::min(best, val_history[i]);
    }
    return true;
}

CurriculumState::Advance CurriculumState::advance(double new_val_loss) {
    if (!active) throw StateError("curriculum: advance called on a terminated schedule");
    val_history.push_back(new_val_loss);
    if (!plateau_detected(val_history, plateau_patience, plateau_rel_eps)) return Advance::none;
    if (stage < kFinalStage) {
        ++stage;
        val_history.clear();
        return Advance::stage_advanced;
    }
    active = false;
    return Advance::terminated;
}

}  // namespace faceflow
