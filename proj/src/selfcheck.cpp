#include "faceflow/selfcheck.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

#include "faceflow/checkpoint.hpp"
#include "faceflow/curriculum.hpp"
#include "faceflow/gradcheck.hpp"
#include "faceflow/metrics.hpp"
#include "faceflow/model.hpp"
#include "faceflow/retrieval.hpp"

namespace faceflow {

namespace {

using T = Tensor<double>;

std::string report_detail(const GradCheckReport& r) {
    return "max rel err " + fmt_real(r.max_rel_err) + " over " + std::to_string(r.n_checked) + " elements" +
           (r.pass ? "" : "; worst: " + r.worst);
}

CheckResult grad_result(const std::string& name, const GradCheckReport& r) {
    return {name, r.pass, report_detail(r)};
}

T randu(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
    return T::uniform(std::move(shape), rng, lo, hi, rg);
}

// Aggregates `trials` instances of an op gradcheck into one result.
template <class MakeInstance>
CheckResult repeat_gradcheck(const std::string& name, int trials, uint64_t seed, MakeInstance make,
                             double rtol = 1e-3) {
    GradCheckReport agg;
    agg.pass = true;
    for (int t = 0; t < trials; ++t) {
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(t)));
        GradCheckReport r = make(rng, rtol);
        agg.max_rel_err = std::max(agg.max_rel_err, r.max_rel_err);
        agg.max_abs_diff = std::max(agg.max_abs_diff, r.max_abs_diff);
        agg.n_checked += r.n_checked;
        if (!r.pass) {
            agg.pass = false;
            if (agg.worst.empty()) agg.worst = "trial " + std::to_string(t) + ": " + r.worst;
        }
    }
    return grad_result(name, agg);
}

ModelConfig toy_config(bool multi, uint64_t seed) {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.embedding_dim = 24;
    cfg.encoder_channels = {8, 16};
    cfg.decoder_channels = {16, 8};
    cfg.multi_source = multi;
    cfg.n_sources = multi ? 2 : 1;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

std::vector<CheckResult> run_gradient_checks() {
    std::vector<CheckResult> out;

    out.push_back(repeat_gradcheck("grad conv2d", 10, 11, [](std::mt19937_64& rng, double rtol) {
        T x = randu({2, 2, 5, 5}, rng);
        T w = randu({3, 2, 3, 3}, rng);
        T b = randu({3}, rng);
        auto loss = [&]() { return sum(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); };
        return gradcheck_all(loss, {&x, &w, &b}, 1e-5, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad conv_transpose2d", 10, 12, [](std::mt19937_64& rng, double rtol) {
        T x = randu({2, 3, 3, 3}, rng);
        T w = randu({3, 2, 4, 4}, rng);
        T b = randu({2}, rng);
        auto loss = [&]() { return sum(mul(conv_transpose2d(x, w, b, 2, 1), conv_transpose2d(x, w, b, 2, 1))); };
        return gradcheck_all(loss, {&x, &w, &b}, 1e-5, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad linear", 10, 13, [](std::mt19937_64& rng, double rtol) {
        T x = randu({3, 4}, rng);
        T w = randu({4, 5}, rng);
        T b = randu({5}, rng);
        auto loss = [&]() { return sum(mul(linear(x, w, std::optional<T>(b)), linear(x, w, std::optional<T>(b)))); };
        return gradcheck_all(loss, {&x, &w, &b}, 1e-5, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad leaky_relu", 10, 14, [](std::mt19937_64& rng, double rtol) {
        T x = randu({4, 7}, rng);
        // keep away from the kink at 0
        for (auto& v : x.values())
            if (std::abs(v) < 0.05) v += v >= 0 ? 0.1 : -0.1;
        auto loss = [&]() { return sum(mul(leaky_relu(x, 0.2), leaky_relu(x, 0.2))); };
        return gradcheck_all(loss, {&x}, 1e-5, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad tanh/exp/log/sigmoid", 10, 15, [](std::mt19937_64& rng, double rtol) {
        T x = randu({3, 5}, rng, 0.2, 1.5);
        auto loss = [&]() { return sum(mul(tanh(x), add(sigmoid(x), mul(exp(x), log(x))))); };
        return gradcheck_all(loss, {&x}, 1e-6, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad batch_norm", 10, 16, [](std::mt19937_64& rng, double rtol) {
        T x = randu({6, 4}, rng);
        T gamma = randu({4}, rng, 0.5, 1.5);
        T beta = randu({4}, rng);
        auto loss = [&]() {
            RunningStats<double> stats(4);
            return sum(mul(batch_norm(x, gamma, beta, stats, true), batch_norm(x, gamma, beta, stats, true)));
        };
        return gradcheck_all(loss, {&x, &gamma, &beta}, 1e-5, rtol);
    }));

    out.push_back(repeat_gradcheck("grad l1_loss", 10, 17, [](std::mt19937_64& rng, double rtol) {
        T a = randu({3, 6}, rng);
        T b = randu({3, 6}, rng);
        auto loss = [&]() { return l1_loss(a, b); };
        return gradcheck_all(loss, {&a, &b}, 1e-5, rtol);
    }));

    out.push_back(repeat_gradcheck("grad mse_loss", 10, 18, [](std::mt19937_64& rng, double rtol) {
        T a = randu({3, 6}, rng);
        T b = randu({3, 6}, rng);
        auto loss = [&]() { return mse_loss(a, b); };
        return gradcheck_all(loss, {&a, &b}, 1e-5, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad grid_sample", 10, 19, [](std::mt19937_64& rng, double rtol) {
        T src = randu({1, 2, 5, 5}, rng, 0.0, 1.0);
        T flow = randu({1, 2, 5, 5}, rng, -0.3, 0.3);
        // keep sampling points away from integer-coordinate kinks and borders
        for (int64_t i = 0; i < flow.numel(); ++i) {
            double& v = flow.values()[static_cast<size_t>(i)];
            const double px = v * 2.0;  // (5-1)/2
            if (std::abs(px - std::round(px)) < 0.1) v += 0.07;
        }
        auto loss = [&]() { return sum(mul(grid_sample(src, flow), grid_sample(src, flow))); };
        return gradcheck_all(loss, {&src, &flow}, 1e-6, rtol);
    }));

    out.push_back(repeat_gradcheck("grad softmax fusion", 10, 20, [](std::mt19937_64& rng, double rtol) {
        T c1 = randu({1, 1, 3, 3}, rng);
        T c2 = randu({1, 1, 3, 3}, rng);
        T c3 = randu({1, 1, 3, 3}, rng);
        T img1 = randu({1, 2, 3, 3}, rng, 0.0, 1.0);
        T img2 = randu({1, 2, 3, 3}, rng, 0.0, 1.0);
        T img3 = randu({1, 2, 3, 3}, rng, 0.0, 1.0);
        auto loss = [&]() {
            auto w = softmax_weights(std::vector<T>{c1, c2, c3});
            auto fused = add(add(scale_channels(img1, w[0]), scale_channels(img2, w[1])), scale_channels(img3, w[2]));
            return sum(mul(fused, fused));
        };
        return gradcheck_all(loss, {&c1, &c2, &c3, &img1, &img2, &img3}, 1e-5, rtol);
    }));

    out.push_back(repeat_gradcheck("grad cross_entropy", 10, 21, [](std::mt19937_64& rng, double rtol) {
        T logits = randu({5, 3}, rng);
        std::vector<int> labels(5);
        for (auto& l : labels) l = static_cast<int>(rng() % 3);
        std::vector<double> weights = {1.5, 0.75, 0.75};
        auto loss = [&]() { return cross_entropy_loss(logits, labels, weights); };
        return gradcheck_all(loss, {&logits}, 1e-6, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    out.push_back(repeat_gradcheck("grad bce_with_logits", 10, 22, [](std::mt19937_64& rng, double rtol) {
        T logits = randu({5, 4}, rng);
        std::vector<double> tgt(20);
        for (auto& t : tgt) t = rng() % 2 ? 1.0 : 0.0;
        T targets = T::from({5, 4}, tgt);
        std::vector<double> pw = {1.2, 0.8, 1.6, 0.4};
        auto loss = [&]() { return bce_with_logits_loss(logits, targets, pw); };
        return gradcheck_all(loss, {&logits}, 1e-6, rtol == 1e-3 ? 1e-4 : rtol);
    }));

    // End-to-end: 2-frame toy reconstruction on a 16x16 multi-source model,
    // 20 parameters sampled across encoder, decoder trunk, and the
    // confidence head.
    {
        Model<double> model(toy_config(true, 99));
        std::mt19937_64 rng(mix_seed(99, 7));
        T target = randu({1, 3, 16, 16}, rng, 0.0, 1.0, false);
        T src1 = randu({1, 3, 16, 16}, rng, 0.0, 1.0, false);
        T src2 = randu({1, 3, 16, 16}, rng, 0.0, 1.0, false);
        // a couple of warm-up steps so flow/confidence heads move off their
        // zero init and produce nonzero gradients of their own
        for (int it = 0; it < 2; ++it) {
            auto params = model.parameters();
            for (auto* p : params) p->value.zero_grad();
            auto rec = model.reconstruct_multi({src1, src2}, target);
            rec.loss.backward();
            for (auto* p : params) {
                const auto& g = p->value.grad();
                for (size_t i = 0; i < g.size(); ++i) p->value.values()[i] -= 0.05 * g[i];
                p->value.zero_grad();
            }
        }
        auto loss_fn = [&]() { return model.reconstruct_multi({src1, src2}, target).loss; };

        auto params = model.parameters();
        std::vector<Tensor<double>*> tensors;
        std::vector<int> enc_idx, dec_idx, conf_idx;
        for (size_t i = 0; i < params.size(); ++i) {
            tensors.push_back(&params[i]->value);
            if (params[i]->name.rfind("encoder.", 0) == 0)
                enc_idx.push_back(static_cast<int>(i));
            else if (params[i]->name.find("conf") != std::string::npos)
                conf_idx.push_back(static_cast<int>(i));
            else
                dec_idx.push_back(static_cast<int>(i));
        }
        // stratified sample: 8 encoder + 8 decoder + 4 confidence elements
        std::vector<std::pair<int, int64_t>> elements;
        auto draw = [&](const std::vector<int>& group, int count) {
            for (int i = 0; i < count; ++i) {
                const int ti = group[rng() % group.size()];
                elements.emplace_back(ti, static_cast<int64_t>(rng() % static_cast<uint64_t>(tensors[static_cast<size_t>(ti)]->numel())));
            }
        };
        draw(enc_idx, 8);
        draw(dec_idx, 8);
        draw(conf_idx, 4);
        out.push_back(grad_result("grad end-to-end model (20 sampled params)",
                                  gradcheck_elements(loss_fn, tensors, elements, 1e-5, 1e-3)));
    }

    return out;
}

namespace {

CheckResult check(const std::string& name, bool pass, const std::string& detail = "") {
    return {name, pass, detail};
}

CheckResult warp_identity_check() {
    std::mt19937_64 rng(31);
    Tensorf src = Tensorf::uniform({2, 3, 8, 8}, rng, 0.0f, 1.0f);
    Tensorf flow = Tensorf::zeros({2, 2, 8, 8});
    NoGradGuard ng;
    Tensorf out = grid_sample(src, flow);
    const bool pass = out.values() == src.values();
    return check("identity warp is bit-exact", pass);
}

CheckResult fusion_degeneracy_check() {
    ModelConfig cfg = toy_config(true, 5);
    Model<float> model(cfg);
    std::mt19937_64 rng(32);
    NoGradGuard ng;
    Tensorf target = Tensorf::uniform({1, 3, 16, 16}, rng, 0.0f, 1.0f);
    Tensorf src = Tensorf::uniform({1, 3, 16, 16}, rng, 0.0f, 1.0f);
    const float multi = model.reconstruct_multi({src}, target).loss.item();
    const float single = model.reconstruct_single(src, target).loss.item();
    const bool pass = multi == single;
    return check("multi-source loss with n=1 equals single-source loss",
                 pass, "multi=" + fmt_real(multi) + " single=" + fmt_real(single));
}

CheckResult softmax_sum_check() {
    std::mt19937_64 rng(33);
    bool pass = true;
    double worst = 0;
    for (int t = 0; t < 20 && pass; ++t) {
        const int n = 2 + static_cast<int>(rng() % 4);
        std::vector<Tensorf> maps;
        for (int i = 0; i < n; ++i) maps.push_back(Tensorf::uniform({1, 1, 4, 4}, rng, -30.0f, 30.0f));
        NoGradGuard ng;
        auto w = softmax_weights(maps);
        for (int64_t p = 0; p < maps[0].numel(); ++p) {
            double s = 0;
            for (const auto& wi : w) {
                if (wi.values()[static_cast<size_t>(p)] < 0) pass = false;
                s += wi.values()[static_cast<size_t>(p)];
            }
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    return check("softmax fusion weights sum to 1 (within 1e-6) and are nonnegative",
                 pass && worst <= 1e-6, "max |sum-1| = " + fmt_real(worst));
}

CheckResult checkpoint_roundtrip_check() {
    namespace fs = std::filesystem;
    ModelConfig cfg = toy_config(true, 77);
    Model<float> model(cfg);
    const fs::path path = fs::temp_directory_path() / "faceflow_selfcheck_ckpt.bin";
    save_checkpoint(path, model);
    Checkpoint loaded = load_checkpoint(path);
    fs::remove(path);
    auto pa = model.parameters();
    auto pb = loaded.model.parameters();
    bool pass = pa.size() == pb.size();
    for (size_t i = 0; pass && i < pa.size(); ++i)
        pass = pa[i]->name == pb[i]->name && pa[i]->value.values() == pb[i]->value.values();
    return check("checkpoint round-trip is bitwise exact", pass);
}

CheckResult curriculum_window_oracle_check() {
    std::mt19937_64 rng(34);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 63);
        std::vector<double> losses(static_cast<size_t>(n));
        for (auto& l : losses) l = std::uniform_real_distribution<double>(0, 1)(rng);
        if (trial % 7 == 0)  // exercise ties
            for (auto& l : losses) l = std::floor(l * 4) / 4;
        for (int stage = 0; stage <= 4; ++stage) {
            // brute-force oracle: stable full sort, then slice
            std::vector<int> order(losses.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return losses[static_cast<size_t>(a)] < losses[static_cast<size_t>(b)]; });
            const int lo = stage * n / 10;
            const int hi = (stage * n + 5 * n) / 10;
            const std::vector<int> expect(order.begin() + lo, order.begin() + hi);
            if (select_window(losses, stage) != expect)
                return check("curriculum window matches brute-force sort-and-slice (1000 batches)", false,
                             "mismatch at trial " + std::to_string(trial) + " stage " + std::to_string(stage));
        }
    }
    return check("curriculum window matches brute-force sort-and-slice (1000 batches)", true,
                 "N in [2,64], all 5 stages");
}

CheckResult curriculum_stage_machine_check() {
    CurriculumState st;
    st.plateau_patience = 3;
    int advances = 0, terminations = 0;
    // feed flat losses: every 3rd evaluation plateaus
    for (int i = 0; i < 60 && st.active; ++i) {
        const auto r = st.advance(1.0);
        if (r == CurriculumState::Advance::stage_advanced) ++advances;
        if (r == CurriculumState::Advance::terminated) ++terminations;
    }
    bool pass = advances == 4 && terminations == 1 && !st.active && st.stage == 4;
    bool threw = false;
    try {
        st.advance(1.0);
    } catch (const StateError&) {
        threw = true;
    }
    pass = pass && threw;
    return check("stage machine: exactly 4 advances then termination", pass,
                 std::to_string(advances) + " advances, " + std::to_string(terminations) + " termination(s)");
}

CheckResult auc_oracle_check() {
    std::mt19937_64 rng(35);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 99);
        std::vector<double> scores(static_cast<size_t>(n));
        std::vector<int> labels(static_cast<size_t>(n));
        int pos = 0;
        for (int i = 0; i < n; ++i) {
            scores[static_cast<size_t>(i)] = std::uniform_real_distribution<double>(0, 1)(rng);
            if (trial % 3 == 0) scores[static_cast<size_t>(i)] = std::floor(scores[static_cast<size_t>(i)] * 5) / 5;
            labels[static_cast<size_t>(i)] = static_cast<int>(rng() % 2);
            pos += labels[static_cast<size_t>(i)];
        }
        if (pos == 0 || pos == n) {
            labels[0] = 1 - labels[0];
            pos += labels[0] ? 1 : -1;
        }
        // pair-counting oracle
        double concordant = 0;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (labels[static_cast<size_t>(i)] == 1 && labels[static_cast<size_t>(j)] == 0) {
                    if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(j)]) concordant += 1;
                    else if (scores[static_cast<size_t>(i)] == scores[static_cast<size_t>(j)]) concordant += 0.5;
                }
        const double expect = concordant / (static_cast<double>(pos) * (n - pos));
        if (auc(scores, labels) != expect)
            return check("auc equals pair-counting oracle exactly (1000 inputs <= 100)", false,
                         "mismatch at trial " + std::to_string(trial));
    }
    // all-equal scores tie case
    const double tied = auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0});
    if (tied != 0.5) return check("auc equals pair-counting oracle exactly (1000 inputs <= 100)", false, "ties != 0.5");
    return check("auc equals pair-counting oracle exactly (1000 inputs <= 100)", true, "incl. tie cases -> 0.5");
}

CheckResult rank_gallery_oracle_check() {
    std::mt19937_64 rng(36);
    for (int trial = 0; trial < 20; ++trial) {
        Gallery g;
        g.dim = 8;
        const int n = 20 + static_cast<int>(rng() % 481);
        for (int i = 0; i < n; ++i) {
            GalleryEntry e;
            e.frame_index = i;
            for (int d = 0; d < 8; ++d)
                e.embedding.push_back(std::uniform_real_distribution<float>(-1, 1)(rng));
            g.entries.push_back(std::move(e));
        }
        std::vector<float> query(8);
        for (auto& v : query) v = std::uniform_real_distribution<float>(-1, 1)(rng);
        const int k = 1 + static_cast<int>(rng() % static_cast<uint64_t>(n));
        const auto got = rank_gallery(query, g, k);
        // brute-force: full sort of all similarities
        std::vector<std::pair<double, int>> all;
        for (int i = 0; i < n; ++i)
            all.emplace_back(-cosine_similarity(query, g.entries[static_cast<size_t>(i)].embedding), i);
        std::sort(all.begin(), all.end());
        for (int i = 0; i < k; ++i)
            if (got[static_cast<size_t>(i)].gallery_index != all[static_cast<size_t>(i)].second)
                return check("rank_gallery matches brute-force sort oracle", false,
                             "mismatch at trial " + std::to_string(trial) + " rank " + std::to_string(i));
    }
    return check("rank_gallery matches brute-force sort oracle", true, "20 random galleries up to 500");
}

CheckResult metric_hand_values_check() {
    FrameLabel gt;
    gt.landmarks = {{{0, 0}, {10, 0}, {5, 5}, {3, 8}, {7, 8}}};
    Landmarks pred = gt.landmarks;
    pred[2][0] += 3;
    pred[2][1] += 4;
    const double lm = landmark_error_pct(pred, gt);
    const PoseMae pm = pose_mae({{10, 0, -5}}, {{12, -1, -5}});
    const double a = auc({0.9, 0.8, 0.3, 0.1}, {1, 0, 1, 0});
    const bool pass = std::abs(lm - 10.0) <= 1e-9 && std::abs(pm.yaw - 2.0) <= 1e-9 &&
                      std::abs(pm.pitch - 1.0) <= 1e-9 && pm.roll == 0.0 &&
                      std::abs(pm.overall - 1.0) <= 1e-9 && a == 0.75;
    return check("metric hand values (landmark 10.0, pose MAE (2,1,0)/1.0, auc 0.75)", pass,
                 "lm=" + fmt_real(lm) + " mae=" + fmt_real(pm.overall) + " auc=" + fmt_real(a));
}

}  // namespace

std::vector<CheckResult> run_oracle_checks() {
    std::vector<CheckResult> out;
    out.push_back(warp_identity_check());
    out.push_back(fusion_degeneracy_check());
    out.push_back(softmax_sum_check());
    out.push_back(checkpoint_roundtrip_check());
    out.push_back(curriculum_window_oracle_check());
    out.push_back(curriculum_stage_machine_check());
    out.push_back(auc_oracle_check());
    out.push_back(rank_gallery_oracle_check());
    out.push_back(metric_hand_values_check());
    return out;
}

std::vector<CheckResult> run_all_checks() {
    std::vector<CheckResult> out = run_gradient_checks();
    auto oracle = run_oracle_checks();
    out.insert(out.end(), oracle.begin(), oracle.end());
    return out;
}

}  // namespace faceflow
