#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "faceflow/checkpoint.hpp"
#include "faceflow/curriculum.hpp"
#include "faceflow/model.hpp"
#include "faceflow/synthetic.hpp"

namespace faceflow {

struct TrainConfig {
    double lr = 1e-3;
    double momentum = 0.9;
    int batch_size = 0;  // 0 resolves to 32 with curriculum, 8 without
    double lr_decay_factor = 10.0;
    int64_t max_steps = 4000;
    int val_every = 200;
    int64_t ckpt_every = 0;  // 0 = final checkpoint only
    uint64_t seed = 1;
    int n_sources = 1;
    bool use_curriculum = false;
    int plateau_patience = 5;
    double plateau_rel_eps = 1e-3;
    int val_pairs_per_track = 2;

    int resolved_batch_size() const { return batch_size > 0 ? batch_size : (use_curriculum ? 32 : 8); }

    void validate() const {
        if (!(lr > 0)) throw ValueError("train: lr must be > 0");
        if (resolved_batch_size() < 2) throw ValueError("train: batch size must be >= 2");
        if (!(lr_decay_factor > 1)) throw ValueError("train: lr_decay_factor must be > 1");
        if (max_steps < 1) throw ValueError("train: max_steps must be >= 1");
        if (val_every < 1) throw ValueError("train: val_every must be >= 1");
        if (n_sources < 1) throw ValueError("train: n_sources must be >= 1");
    }
};

struct TrainEvent {
    std::string name;
    int64_t step;
    int stage;
};

struct TrainingReport {
    std::vector<std::pair<int64_t, double>> train_curve;
    std::vector<std::pair<int64_t, double>> val_curve;
    std::vector<TrainEvent> events;
    double initial_val_loss = 0;
    double final_val_loss = 0;
    double best_val_loss = 0;
    double final_lr = 0;
    int64_t steps_run = 0;
    std::string log_path;
    std::string final_checkpoint_path;
};

// Uniformly samples n_sources+1 distinct frame indices of one track; the
// first drawn index is the target, the rest are sources.
struct TrainingPair {
    std::vector<int> source_frames;  // absolute frame indices
    int target_frame = 0;
};
TrainingPair sample_training_pair(const TrackRef& track, int n_sources, std::mt19937_64& rng);

// Mean reconstruction L1 over deterministic pairs of a split (plain,
// unwindowed; this is the number plateau decisions look at).
double evaluate_split_l1(Model<float>& model, const LoadedDataset& data, Split split, int n_sources,
                         int pairs_per_track, uint64_t seed, int batch_size);

// Runs the training loop. If out_dir is non-empty, writes log.csv and
// checkpoints there. Resumes from `resume` when provided.
TrainingReport train(Model<float>& model, const LoadedDataset& data, const TrainConfig& cfg,
                     const std::filesystem::path& out_dir = {},
                     const TrainerSnapshot* resume = nullptr);

}  // namespace faceflow
