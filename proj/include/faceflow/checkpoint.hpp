#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "faceflow/curriculum.hpp"
#include "faceflow/model.hpp"
#include "faceflow/optim.hpp"

namespace faceflow {

// Rebuildable trainer state carried inside a checkpoint so that a resumed
// run replays the original one bit for bit.
struct TrainerSnapshot {
    int64_t step = 0;
    double lr = 0;
    int lr_decay_count = 0;
    std::vector<double> lr_val_history;
    bool use_curriculum = false;
    CurriculumState curriculum;
    double initial_val_loss = 0;
    std::vector<std::vector<float>> sgd_velocity;
};

// Binary checkpoint layout (all little-endian):
//   magic "FACEFLOWCKPT1\n", u32 format version,
//   config block (every ModelConfig field),
//   u32 parameter count, then per parameter:
//     u32 name length, name bytes, u32 rank, u32 dims..., f32 data...
//   u8 has-trainer-state flag, optional trainer block.
void save_checkpoint(const std::filesystem::path& path, Model<float>& model,
                     const TrainerSnapshot* trainer = nullptr);

struct Checkpoint {
    Model<float> model;
    std::optional<TrainerSnapshot> trainer;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace faceflow
