#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "faceflow/metrics.hpp"
#include "faceflow/model.hpp"
#include "faceflow/synthetic.hpp"

namespace faceflow {

enum class TaskKind { regression, multiclass, multilabel };

struct TaskSpec {
    TaskKind kind = TaskKind::regression;
    std::string name;
    int output_dim = 0;
};

// Frozen-feature readout: batch-norm followed by a bias-free linear layer.
struct ProbeHead {
    int input_dim = 0;
    int output_dim = 0;
    TaskKind kind = TaskKind::regression;
    Parameter<float> gamma, beta;
    Parameter<float> weight;  // [input_dim, output_dim]
    RunningStats<float> stats;

    ProbeHead() = default;
    ProbeHead(int in_dim, int out_dim, TaskKind k, uint64_t seed);

    Tensor<float> forward(const Tensor<float>& x, bool training);
    std::vector<Parameter<float>*> parameters();
};

// Plain matrices, one row per frame.
struct ProbeData {
    int n = 0;
    int dim = 0;
    std::vector<float> x;        // [n, dim]
    int target_dim = 0;
    std::vector<float> targets;  // [n, target_dim] (regression / multilabel)
    std::vector<int> labels;     // [n] (multiclass)
    std::vector<float> class_weights;  // optional loss re-weighting

    Tensor<float> row_batch(const std::vector<int>& rows) const;
};

struct ProbeFitConfig {
    int epochs = 100;
    int batch_size = 64;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int early_stop_patience = 10;
    uint64_t seed = 1;
};

struct ProbeFitResult {
    ProbeHead head;
    double best_val_loss = 0;
    int epochs_run = 0;
};

// Adam-trained head on precomputed embeddings; early-stops on val loss and
// restores the best epoch. Regression uses MSE, multiclass class-weighted
// cross-entropy, multilabel per-label BCE with positive re-weighting.
ProbeFitResult fit_probe(const ProbeData& train, const ProbeData& val, TaskKind kind,
                         const ProbeFitConfig& cfg);

double probe_loss(ProbeHead& head, const ProbeData& data, bool training, const std::vector<int>& rows);

// ---------------------------------------------------------------------------
// Encoder-facing pipeline

struct EmbeddingSet {
    int n = 0;
    int dim = 0;
    std::vector<float> x;  // [n, dim]
    std::vector<FrameLabel> labels;
};

// Embeds every frame of a split with the (frozen) encoder; no graph is built.
EmbeddingSet extract_embeddings(Model<float>& model, const LoadedDataset& data, Split split,
                                int batch_size = 32);

// Built-in probe tasks over the synthetic labels. Regression targets are
// normalized to [-1,1] for fitting and denormalized for metrics.
TaskSpec landmarks_task();
TaskSpec pose_task();
TaskSpec expression_task();
TaskSpec task_from_name(const std::string& name);

ProbeData make_task_data(const EmbeddingSet& emb, const TaskSpec& task, int image_size);

struct MetricsReport {
    std::string task;
    int n_samples = 0;
    double aggregate = 0;           // landmark error %, pose MAE deg, or macro AUC
    std::string aggregate_name;
    std::vector<std::pair<std::string, double>> values;
    std::vector<std::string> notes;

    std::string to_csv() const;
    std::string to_text() const;
};

MetricsReport evaluate_probe(Model<float>& model, ProbeHead& head, const LoadedDataset& data, Split split,
                             const TaskSpec& task, int batch_size = 32);

// Metric dispatch on raw predictions (used by evaluate_probe and tests).
MetricsReport evaluate_predictions(const std::vector<float>& preds, const EmbeddingSet& emb,
                                   const TaskSpec& task, int image_size);

// Fit on train split, early-stop on val split, evaluate on test split.
struct ProbeRunResult {
    ProbeFitResult fit;
    MetricsReport report;
};
ProbeRunResult run_probe(Model<float>& model, const LoadedDataset& data, const TaskSpec& task,
                         const ProbeFitConfig& cfg);

uint64_t encoder_checksum(Model<float>& model);

}  // namespace faceflow
