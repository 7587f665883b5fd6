#include "faceflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "faceflow/optim.hpp"

namespace faceflow {

namespace fs = std::filesystem;

TrainingPair sample_training_pair(const TrackRef& track, int n_sources, std::mt19937_64& rng) {
    const int need = n_sources + 1;
    if (track.n_frames < need)
        throw ValueError("sample_training_pair: track has " + std::to_string(track.n_frames) +
                         " frames, need " + std::to_string(need));
    // partial Fisher-Yates over local frame indices
    std::vector<int> idx(static_cast<size_t>(track.n_frames));
    for (int i = 0; i < track.n_frames; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < need; ++i) {
        std::uniform_int_distribution<int> dist(i, track.n_frames - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(dist(rng))]);
    }
    TrainingPair pair;
    pair.target_frame = track.first_frame + idx[0];
    for (int s = 0; s < n_sources; ++s) pair.source_frames.push_back(track.first_frame + idx[static_cast<size_t>(1 + s)]);
    return pair;
}

namespace {

struct BatchPairs {
    std::vector<int> targets;
    std::vector<std::vector<int>> sources;  // [n_sources][batch]
};

BatchPairs collect_pairs(const LoadedDataset& data, const std::vector<int>& track_ids, int batch,
                         int n_sources, std::mt19937_64& rng) {
    BatchPairs out;
    out.sources.resize(static_cast<size_t>(n_sources));
    std::uniform_int_distribution<size_t> pick(0, track_ids.size() - 1);
    for (int b = 0; b < batch; ++b) {
        const TrackRef& track = data.tracks[static_cast<size_t>(track_ids[pick(rng)])];
        TrainingPair pair = sample_training_pair(track, n_sources, rng);
        out.targets.push_back(pair.target_frame);
        for (int s = 0; s < n_sources; ++s) out.sources[static_cast<size_t>(s)].push_back(pair.source_frames[static_cast<size_t>(s)]);
    }
    return out;
}

Reconstruction<float> forward_pairs(Model<float>& model, const LoadedDataset& data, const BatchPairs& pairs) {
    Tensor<float> target = data.frame_batch(pairs.targets);
    std::vector<Tensor<float>> sources;
    sources.reserve(pairs.sources.size());
    for (const auto& s : pairs.sources) sources.push_back(data.frame_batch(s));
    return model.reconstruct_multi(sources, target);
}

struct LogWriter {
    std::ofstream out;
    bool enabled = false;

    void open(const fs::path& path) {
        out.open(path, std::ios::binary);
        if (!out) throw IoError("cannot write training log " + path.string());
        enabled = true;
        out << "step,train_loss,val_loss,lr,stage\n";
    }
    void row(int64_t step, const std::string& train_loss, const std::string& val_loss, double lr, int stage) {
        if (!enabled) return;
        out << step << ',' << train_loss << ',' << val_loss << ',' << fmt_real(lr) << ',' << stage << '\n';
    }
    void event(const TrainEvent& e) {
        if (!enabled) return;
        out << e.name << ',' << e.step << ',' << e.stage << '\n';
    }
};

}  // namespace

double evaluate_split_l1(Model<float>& model, const LoadedDataset& data, Split split, int n_sources,
                         int pairs_per_track, uint64_t seed, int batch_size) {
    NoGradGuard ng;
    const std::vector<int> track_ids = data.track_indices(split);
    if (track_ids.empty()) throw ValueError("evaluate: split '" + split_name(split) + "' has no tracks");

    // fixed evaluation pairs, derived from the seed only
    BatchPairs all;
    all.sources.resize(static_cast<size_t>(n_sources));
    std::mt19937_64 rng(mix_seed(seed, 0xe7a1));
    for (int id : track_ids) {
        const TrackRef& track = data.tracks[static_cast<size_t>(id)];
        if (track.n_frames < n_sources + 1) continue;
        for (int p = 0; p < pairs_per_track; ++p) {
            TrainingPair pair = sample_training_pair(track, n_sources, rng);
            all.targets.push_back(pair.target_frame);
            for (int s = 0; s < n_sources; ++s) all.sources[static_cast<size_t>(s)].push_back(pair.source_frames[static_cast<size_t>(s)]);
        }
    }
    if (all.targets.empty()) throw ValueError("evaluate: no usable evaluation pairs");

    double total = 0;
    int64_t count = 0;
    const int n = static_cast<int>(all.targets.size());
    for (int start = 0; start < n; start += batch_size) {
        const int stop = std::min(n, start + batch_size);
        BatchPairs chunk;
        chunk.targets.assign(all.targets.begin() + start, all.targets.begin() + stop);
        chunk.sources.resize(static_cast<size_t>(n_sources));
        for (int s = 0; s < n_sources; ++s)
            chunk.sources[static_cast<size_t>(s)].assign(all.sources[static_cast<size_t>(s)].begin() + start,
                                                         all.sources[static_cast<size_t>(s)].begin() + stop);
        Reconstruction<float> rec = forward_pairs(model, data, chunk);
        for (float v : rec.per_sample_loss.values()) total += v;
        count += stop - start;
    }
    return total / static_cast<double>(count);
}

TrainingReport train(Model<float>& model, const LoadedDataset& data, const TrainConfig& cfg,
                     const fs::path& out_dir, const TrainerSnapshot* resume) {
    cfg.validate();
    const int batch = cfg.resolved_batch_size();
    const std::vector<int> train_tracks = data.track_indices(Split::train);
    if (train_tracks.empty()) throw ValueError("train: dataset has no train tracks");
    data.track_indices(Split::val);  // throws below if empty via evaluate
    for (int id : train_tracks)
        if (data.tracks[static_cast<size_t>(id)].n_frames < cfg.n_sources + 1)
            throw ValueError("train: track " + std::to_string(id) + " too short for " +
                             std::to_string(cfg.n_sources) + " sources");

    Sgd<float> opt(static_cast<float>(cfg.lr), static_cast<float>(cfg.momentum));
    CurriculumState curriculum;
    curriculum.plateau_patience = cfg.plateau_patience;
    curriculum.plateau_rel_eps = cfg.plateau_rel_eps;
    std::vector<double> lr_history;
    int decay_count = 0;
    int64_t start_step = 0;
    double lr = cfg.lr;
    double initial_val = 0;

    TrainingReport report;

    if (resume) {
        start_step = resume->step;
        lr = resume->lr;
        decay_count = resume->lr_decay_count;
        lr_history = resume->lr_val_history;
        curriculum = resume->curriculum;
        initial_val = resume->initial_val_loss;
        if (resume->use_curriculum != cfg.use_curriculum)
            throw StateError("train: checkpoint curriculum mode does not match config");
        opt.velocity = resume->sgd_velocity;
        opt.lr = static_cast<float>(lr);
    } else {
        initial_val = evaluate_split_l1(model, data, Split::val, cfg.n_sources, cfg.val_pairs_per_track,
                                        cfg.seed, batch);
    }
    report.initial_val_loss = initial_val;
    report.best_val_loss = initial_val;
    report.val_curve.emplace_back(start_step, initial_val);

    LogWriter log;
    if (!out_dir.empty()) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
        log.open(out_dir / "log.csv");
        report.log_path = (out_dir / "log.csv").string();
    }
    log.row(start_step, "", fmt_real(initial_val), lr, curriculum.stage);

    auto snapshot = [&](int64_t step) {
        TrainerSnapshot ts;
        ts.step = step;
        ts.lr = lr;
        ts.lr_decay_count = decay_count;
        ts.lr_val_history = lr_history;
        ts.use_curriculum = cfg.use_curriculum;
        ts.curriculum = curriculum;
        ts.initial_val_loss = initial_val;
        ts.sgd_velocity = opt.velocity;
        return ts;
    };
    auto save = [&](const std::string& name, int64_t step) {
        if (out_dir.empty()) return std::string();
        TrainerSnapshot ts = snapshot(step);
        const fs::path p = out_dir / name;
        save_checkpoint(p, model, &ts);
        return p.string();
    };

    double last_val = initial_val;
    int64_t step = start_step;
    bool stop = false;
    while (step < cfg.max_steps && !stop) {
        ++step;
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<uint64_t>(step)));
        BatchPairs pairs = collect_pairs(data, train_tracks, batch, cfg.n_sources, rng);
        Reconstruction<float> rec = forward_pairs(model, data, pairs);

        Tensor<float> loss;
        if (cfg.use_curriculum) {
            std::vector<double> losses(rec.per_sample_loss.values().begin(), rec.per_sample_loss.values().end());
            const std::vector<int> window = select_window(losses, curriculum.stage);
            loss = mean(gather(rec.per_sample_loss, window));
        } else {
            loss = rec.loss;
        }

        const double loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value)) {
            save("ckpt_diverged.bin", step);
            throw StateError("train: non-finite loss " + fmt_real(loss_value) + " at step " +
                             std::to_string(step) + (out_dir.empty() ? "" : "; diagnostic checkpoint written"));
        }
        loss.backward();
        opt.lr = static_cast<float>(lr);
        opt.step(model.parameters());

        report.train_curve.emplace_back(step, loss_value);

        std::string val_field;
        if (step % cfg.val_every == 0) {
            const double val = evaluate_split_l1(model, data, Split::val, cfg.n_sources,
                                                 cfg.val_pairs_per_track, cfg.seed, batch);
            if (!std::isfinite(val)) {
                save("ckpt_diverged.bin", step);
                throw StateError("train: non-finite validation loss at step " + std::to_string(step));
            }
            last_val = val;
            val_field = fmt_real(val);
            report.val_curve.emplace_back(step, val);
            report.best_val_loss = std::min(report.best_val_loss, val);

            if (cfg.use_curriculum && curriculum.active) {
                const auto outcome = curriculum.advance(val);
                if (outcome == CurriculumState::Advance::stage_advanced) {
                    TrainEvent e{"stage_advance", step, curriculum.stage};
                    report.events.push_back(e);
                    log.event(e);
                } else if (outcome == CurriculumState::Advance::terminated) {
                    TrainEvent e{"curriculum_terminate", step, curriculum.stage};
                    report.events.push_back(e);
                    log.event(e);
                }
            }

            // LR decays on its own plateau detector; with curriculum it is
            // gated until the 40-90 window is in force.
            const bool decay_allowed = !cfg.use_curriculum || curriculum.stage == CurriculumState::kFinalStage;
            if (decay_allowed) {
                lr_history.push_back(val);
                if (plateau_detected(lr_history, cfg.plateau_patience, cfg.plateau_rel_eps)) {
                    lr /= cfg.lr_decay_factor;
                    ++decay_count;
                    lr_history.clear();
                    TrainEvent e{"lr_decay", step, curriculum.stage};
                    report.events.push_back(e);
                    log.event(e);
                    if (decay_count >= 2) stop = true;  // converged per the stopping rule
                }
            }
        }
        log.row(step, fmt_real(loss_value), val_field, lr, curriculum.stage);

        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0)
            save("ckpt_step" + std::to_string(step) + ".bin", step);
    }

    report.steps_run = step - start_step;
    report.final_val_loss = last_val;
    report.final_lr = lr;
    report.final_checkpoint_path = save("ckpt_final.bin", step);
    return report;
}

}  // namespace faceflow
