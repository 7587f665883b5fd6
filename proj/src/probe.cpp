#include "faceflow/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace faceflow {

ProbeHead::ProbeHead(int in_dim, int out_dim, TaskKind k, uint64_t seed)
    : input_dim(in_dim), output_dim(out_dim), kind(k), stats(in_dim) {
    gamma = Parameter<float>("probe.gamma", Tensor<float>::filled({in_dim}, 1.0f));
    beta = Parameter<float>("probe.beta", Tensor<float>::zeros({in_dim}));
    std::mt19937_64 rng(mix_seed(seed, 0x9806e));
    const float bound = static_cast<float>(std::sqrt(1.0 / in_dim));
    weight = Parameter<float>("probe.weight", Tensor<float>::uniform({in_dim, out_dim}, rng, -bound, bound));
}

Tensor<float> ProbeHead::forward(const Tensor<float>& x, bool training) {
    Tensor<float> normed = batch_norm(x, gamma.value, beta.value, stats, training);
    return matmul(normed, weight.value);  // no bias by design
}

std::vector<Parameter<float>*> ProbeHead::parameters() { return {&gamma, &beta, &weight}; }

Tensor<float> ProbeData::row_batch(const std::vector<int>& rows) const {
    std::vector<float> vals(rows.size() * static_cast<size_t>(dim));
    for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(x.data() + static_cast<int64_t>(rows[r]) * dim, dim,
                    vals.data() + static_cast<int64_t>(r) * dim);
    return Tensor<float>::from({static_cast<int>(rows.size()), dim}, std::move(vals));
}

namespace {

Tensor<float> target_batch(const ProbeData& data, const std::vector<int>& rows) {
    std::vector<float> vals(rows.size() * static_cast<size_t>(data.target_dim));
    for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(data.targets.data() + static_cast<int64_t>(rows[r]) * data.target_dim, data.target_dim,
                    vals.data() + static_cast<int64_t>(r) * data.target_dim);
    return Tensor<float>::from({static_cast<int>(rows.size()), data.target_dim}, std::move(vals));
}

Tensor<float> task_loss(ProbeHead& head, const ProbeData& data, const std::vector<int>& rows,
                        bool training) {
    Tensor<float> out = head.forward(data.row_batch(rows), training);
    switch (head.kind) {
        case TaskKind::regression:
            return mse_loss(out, target_batch(data, rows));
        case TaskKind::multiclass: {
            std::vector<int> labels(rows.size());
            for (size_t r = 0; r < rows.size(); ++r) labels[r] = data.labels[static_cast<size_t>(rows[r])];
            return cross_entropy_loss(out, labels, data.class_weights);
        }
        case TaskKind::multilabel:
            return bce_with_logits_loss(out, target_batch(data, rows), data.class_weights);
    }
    throw StateError("probe: unknown task kind");
}

}  // namespace

double probe_loss(ProbeHead& head, const ProbeData& data, bool training, const std::vector<int>& rows) {
    NoGradGuard ng;
    return static_cast<double>(task_loss(head, data, rows, training).item());
}

ProbeFitResult fit_probe(const ProbeData& train, const ProbeData& val, TaskKind kind,
                         const ProbeFitConfig& cfg) {
    if (train.n < 2) throw ValueError("fit_probe: need at least 2 training rows");
    if (kind == TaskKind::multiclass && static_cast<int>(train.labels.size()) != train.n)
        throw ValueError("fit_probe: multiclass data carries " + std::to_string(train.labels.size()) +
                         " labels for " + std::to_string(train.n) + " rows");
    if (kind != TaskKind::multiclass && static_cast<int>(train.targets.size()) != static_cast<int64_t>(train.n) * train.target_dim)
        throw ValueError("fit_probe: target matrix shape does not match rows");

    ProbeFitResult result;
    const int out_dim = kind == TaskKind::multiclass
                            ? static_cast<int>(train.class_weights.empty()
                                                   ? 1 + *std::max_element(train.labels.begin(), train.labels.end())
                                                   : train.class_weights.size())
                            : train.target_dim;
    result.head = ProbeHead(train.dim, out_dim, kind, cfg.seed);
    Adam<float> opt(static_cast<float>(cfg.lr), static_cast<float>(cfg.beta1), static_cast<float>(cfg.beta2));

    std::vector<int> order(static_cast<size_t>(train.n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> val_rows(static_cast<size_t>(val.n));
    std::iota(val_rows.begin(), val_rows.end(), 0);

    auto snapshot_values = [&]() {
        std::vector<std::vector<float>> vals;
        for (auto* p : result.head.parameters()) vals.push_back(p->value.values());
        vals.push_back(result.head.stats.mean);
        vals.push_back(result.head.stats.var);
        return vals;
    };
    auto restore_values = [&](const std::vector<std::vector<float>>& vals) {
        auto params = result.head.parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i]->value.values() = vals[i];
        result.head.stats.mean = vals[params.size()];
        result.head.stats.var = vals[params.size() + 1];
    };

    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_state = snapshot_values();
    int stale = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 0xe90c + static_cast<uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        for (int start = 0; start < train.n; start += cfg.batch_size) {
            const int stop = std::min(train.n, start + cfg.batch_size);
            if (stop - start < 2) continue;  // batch norm needs >= 2 rows
            std::vector<int> rows(order.begin() + start, order.begin() + stop);
            Tensor<float> loss = task_loss(result.head, train, rows, true);
            loss.backward();
            opt.step(result.head.parameters());
        }
        result.epochs_run = epoch + 1;

        if (val.n > 0) {
            const double vl = probe_loss(result.head, val, false, val_rows);
            if (vl < best_val) {
                best_val = vl;
                best_state = snapshot_values();
                stale = 0;
            } else if (++stale >= cfg.early_stop_patience) {
                break;
            }
        }
    }
    if (val.n > 0) {
        restore_values(best_state);
        result.best_val_loss = best_val;
    }
    return result;
}

// ---------------------------------------------------------------------------

EmbeddingSet extract_embeddings(Model<float>& model, const LoadedDataset& data, Split split,
                                int batch_size) {
    NoGradGuard ng;
    const std::vector<int> frames = data.frame_indices(split);
    if (frames.empty()) throw ValueError("extract_embeddings: split '" + split_name(split) + "' is empty");
    EmbeddingSet set;
    set.n = static_cast<int>(frames.size());
    set.dim = model.config.embedding_dim;
    set.x.resize(static_cast<size_t>(set.n) * set.dim);
    set.labels.reserve(frames.size());
    for (int f : frames) set.labels.push_back(data.frames[static_cast<size_t>(f)].label);
    for (int start = 0; start < set.n; start += batch_size) {
        const int stop = std::min(set.n, start + batch_size);
        std::vector<int> chunk(frames.begin() + start, frames.begin() + stop);
        Tensor<float> emb = model.encode(data.frame_batch(chunk));
        std::copy_n(emb.data(), emb.numel(), set.x.data() + static_cast<int64_t>(start) * set.dim);
    }
    return set;
}

TaskSpec landmarks_task() { return {TaskKind::regression, "landmarks", 10}; }
TaskSpec pose_task() { return {TaskKind::regression, "pose", 3}; }
TaskSpec expression_task() { return {TaskKind::multilabel, "expression", 4}; }

TaskSpec task_from_name(const std::string& name) {
    if (name == "landmarks") return landmarks_task();
    if (name == "pose") return pose_task();
    if (name == "expression") return expression_task();
    throw ValueError("unknown probe task '" + name + "' (expected landmarks|pose|expression)");
}

namespace {

constexpr double kPoseScale[3] = {45.0, 30.0, 30.0};

}  // namespace

ProbeData make_task_data(const EmbeddingSet& emb, const TaskSpec& task, int image_size) {
    ProbeData d;
    d.n = emb.n;
    d.dim = emb.dim;
    d.x = emb.x;
    d.target_dim = task.output_dim;
    const double half = (image_size - 1) / 2.0;

    if (task.name == "landmarks") {
        d.targets.resize(static_cast<size_t>(d.n) * 10);
        for (int i = 0; i < d.n; ++i)
            for (int l = 0; l < 5; ++l)
                for (int c = 0; c < 2; ++c)
                    d.targets[static_cast<size_t>(i) * 10 + static_cast<size_t>(l * 2 + c)] =
                        static_cast<float>((emb.labels[static_cast<size_t>(i)].landmarks[static_cast<size_t>(l)][static_cast<size_t>(c)] - half) / half);
    } else if (task.name == "pose") {
        d.targets.resize(static_cast<size_t>(d.n) * 3);
        for (int i = 0; i < d.n; ++i) {
            const FrameLabel& l = emb.labels[static_cast<size_t>(i)];
            d.targets[static_cast<size_t>(i) * 3 + 0] = static_cast<float>(l.yaw / kPoseScale[0]);
            d.targets[static_cast<size_t>(i) * 3 + 1] = static_cast<float>(l.pitch / kPoseScale[1]);
            d.targets[static_cast<size_t>(i) * 3 + 2] = static_cast<float>(l.roll / kPoseScale[2]);
        }
    } else if (task.name == "expression") {
        d.targets.resize(static_cast<size_t>(d.n) * 4);
        std::vector<int64_t> pos_counts(4, 0);
        for (int i = 0; i < d.n; ++i)
            for (int f = 0; f < 4; ++f) {
                const bool v = emb.labels[static_cast<size_t>(i)].flags[static_cast<size_t>(f)];
                d.targets[static_cast<size_t>(i) * 4 + static_cast<size_t>(f)] = v ? 1.0f : 0.0f;
                pos_counts[static_cast<size_t>(f)] += v;
            }
        // positive-class re-weighting, inversely proportional to frequency
        bool all_present = true;
        for (int64_t c : pos_counts) all_present = all_present && c > 0;
        if (all_present) {
            const std::vector<double> w = class_weights(pos_counts);
            d.class_weights.assign(w.begin(), w.end());
        }
    } else {
        throw ValueError("make_task_data: unknown task '" + task.name + "'");
    }
    return d;
}

namespace {

std::vector<float> predict_all(Model<float>& model, ProbeHead& head, const LoadedDataset& data,
                               Split split, int batch_size, EmbeddingSet& emb_out) {
    emb_out = extract_embeddings(model, data, split, batch_size);
    NoGradGuard ng;
    ProbeData d;
    d.n = emb_out.n;
    d.dim = emb_out.dim;
    d.x = emb_out.x;
    std::vector<float> preds(static_cast<size_t>(emb_out.n) * head.output_dim);
    for (int start = 0; start < emb_out.n; start += batch_size) {
        const int stop = std::min(emb_out.n, start + batch_size);
        std::vector<int> rows(static_cast<size_t>(stop - start));
        std::iota(rows.begin(), rows.end(), start);
        Tensor<float> out = head.forward(d.row_batch(rows), false);
        std::copy_n(out.data(), out.numel(), preds.data() + static_cast<int64_t>(start) * head.output_dim);
    }
    return preds;
}

}  // namespace

MetricsReport evaluate_predictions(const std::vector<float>& preds, const EmbeddingSet& emb,
                                   const TaskSpec& task, int image_size) {
    if (emb.n == 0) throw ValueError("evaluate_probe: empty evaluation split");
    MetricsReport rep;
    rep.task = task.name;
    rep.n_samples = emb.n;
    const double half = (image_size - 1) / 2.0;

    if (task.name == "landmarks") {
        double per_landmark[5] = {0, 0, 0, 0, 0};
        double total = 0;
        for (int i = 0; i < emb.n; ++i) {
            Landmarks lm;
            for (int l = 0; l < 5; ++l)
                for (int c = 0; c < 2; ++c)
                    lm[static_cast<size_t>(l)][static_cast<size_t>(c)] =
                        static_cast<double>(preds[static_cast<size_t>(i) * 10 + static_cast<size_t>(l * 2 + c)]) * half + half;
            const FrameLabel& gt = emb.labels[static_cast<size_t>(i)];
            total += landmark_error_pct(lm, gt);
            const double iod = std::hypot(gt.landmarks[1][0] - gt.landmarks[0][0],
                                          gt.landmarks[1][1] - gt.landmarks[0][1]);
            for (int l = 0; l < 5; ++l)
                per_landmark[l] += std::hypot(lm[static_cast<size_t>(l)][0] - gt.landmarks[static_cast<size_t>(l)][0],
                                              lm[static_cast<size_t>(l)][1] - gt.landmarks[static_cast<size_t>(l)][1]) /
                                   iod * 100.0;
        }
        rep.aggregate = total / emb.n;
        rep.aggregate_name = "landmark_error_pct";
        static const char* names[5] = {"left_eye", "right_eye", "nose", "mouth_left", "mouth_right"};
        for (int l = 0; l < 5; ++l) rep.values.emplace_back(names[l], per_landmark[l] / emb.n);
    } else if (task.name == "pose") {
        std::vector<PoseAngles> pred(static_cast<size_t>(emb.n)), gt(static_cast<size_t>(emb.n));
        for (int i = 0; i < emb.n; ++i) {
            pred[static_cast<size_t>(i)] = {static_cast<double>(preds[static_cast<size_t>(i) * 3 + 0]) * kPoseScale[0],
                                            static_cast<double>(preds[static_cast<size_t>(i) * 3 + 1]) * kPoseScale[1],
                                            static_cast<double>(preds[static_cast<size_t>(i) * 3 + 2]) * kPoseScale[2]};
            gt[static_cast<size_t>(i)] = {emb.labels[static_cast<size_t>(i)].yaw, emb.labels[static_cast<size_t>(i)].pitch,
                                          emb.labels[static_cast<size_t>(i)].roll};
        }
        const PoseMae m = pose_mae(pred, gt);
        rep.aggregate = m.overall;
        rep.aggregate_name = "pose_mae_deg";
        rep.values = {{"yaw_mae", m.yaw}, {"pitch_mae", m.pitch}, {"roll_mae", m.roll}};
    } else if (task.name == "expression") {
        std::vector<std::vector<double>> scores(4);
        std::vector<std::vector<int>> labels(4);
        for (int i = 0; i < emb.n; ++i)
            for (int f = 0; f < 4; ++f) {
                scores[static_cast<size_t>(f)].push_back(static_cast<double>(preds[static_cast<size_t>(i) * 4 + static_cast<size_t>(f)]));
                labels[static_cast<size_t>(f)].push_back(emb.labels[static_cast<size_t>(i)].flags[static_cast<size_t>(f)] ? 1 : 0);
            }
        std::vector<int> skipped;
        std::vector<double> per_class;
        rep.aggregate = macro_auc(scores, labels, &skipped, &per_class);
        rep.aggregate_name = "macro_auc";
        for (int f = 0; f < 4; ++f) rep.values.emplace_back(FrameLabel::kFlagNames[f], per_class[static_cast<size_t>(f)]);
        for (int c : skipped)
            rep.notes.push_back(std::string("warning: class '") + FrameLabel::kFlagNames[c] +
                                "' is single-class in this split; skipped in the macro average");
    } else {
        throw ValueError("evaluate_predictions: unknown task '" + task.name + "'");
    }
    return rep;
}

MetricsReport evaluate_probe(Model<float>& model, ProbeHead& head, const LoadedDataset& data, Split split,
                             const TaskSpec& task, int batch_size) {
    EmbeddingSet emb;
    const std::vector<float> preds = predict_all(model, head, data, split, batch_size, emb);
    return evaluate_predictions(preds, emb, task, data.image_size());
}

ProbeRunResult run_probe(Model<float>& model, const LoadedDataset& data, const TaskSpec& task,
                         const ProbeFitConfig& cfg) {
    const EmbeddingSet train_emb = extract_embeddings(model, data, Split::train);
    const EmbeddingSet val_emb = extract_embeddings(model, data, Split::val);
    const ProbeData train = make_task_data(train_emb, task, data.image_size());
    ProbeData val = make_task_data(val_emb, task, data.image_size());
    val.class_weights = train.class_weights;  // evaluate val loss under the train weighting
    ProbeRunResult out;
    out.fit = fit_probe(train, val, task.kind, cfg);
    out.report = evaluate_probe(model, out.fit.head, data, Split::test, task);
    return out;
}

uint64_t encoder_checksum(Model<float>& model) {
    // FNV-1a over the raw encoder parameter bytes
    uint64_t h = 1469598103934665603ULL;
    std::vector<Parameter<float>*> params;
    model.encoder.collect(params);
    for (auto* p : params)
        for (float v : p->value.values()) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            for (int i = 0; i < 4; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 1099511628211ULL;
            }
        }
    return h;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream out;
    out << "task,metric,value\n";
    out << task << ',' << aggregate_name << ',' << fmt_real(aggregate) << '\n';
    for (const auto& [name, value] : values) out << task << ',' << name << ',' << fmt_real(value) << '\n';
    out << task << ",n_samples," << n_samples << '\n';
    return out.str();
}

std::string MetricsReport::to_text() const {
    std::ostringstream out;
    out << "probe task: " << task << "  (" << n_samples << " samples)\n";
    out << "  " << aggregate_name << " = " << fmt_real(aggregate) << '\n';
    for (const auto& [name, value] : values) out << "  " << name << " = " << fmt_real(value) << '\n';
    for (const auto& note : notes) out << "  " << note << '\n';
    return out.str();
}

}  // namespace faceflow
