#include "faceflow/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace faceflow {

Gallery build_gallery(Model<float>& model, const LoadedDataset& data, Split split, int max_size,
                      int batch_size) {
    const EmbeddingSet emb = extract_embeddings(model, data, split, batch_size);
    const std::vector<int> frames = data.frame_indices(split);
    Gallery g;
    g.dim = emb.dim;
    const int n = max_size > 0 ? std::min(max_size, emb.n) : emb.n;
    g.entries.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        GalleryEntry e;
        e.frame_index = frames[static_cast<size_t>(i)];
        e.embedding.assign(emb.x.begin() + static_cast<int64_t>(i) * emb.dim,
                           emb.x.begin() + static_cast<int64_t>(i + 1) * emb.dim);
        e.label = emb.labels[static_cast<size_t>(i)];
        g.entries.push_back(std::move(e));
    }
    return g;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw ShapeError("cosine_similarity: dimension mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ValueError("cosine_similarity: zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<RankedEntry> rank_gallery(std::span<const float> query, const Gallery& gallery, int k,
                                      int exclude_index) {
    const int n = static_cast<int>(gallery.entries.size());
    const int available = n - (exclude_index >= 0 && exclude_index < n ? 1 : 0);
    if (k > available)
        throw ValueError("rank_gallery: k=" + std::to_string(k) + " exceeds gallery of " +
                         std::to_string(available) + " candidates");
    std::vector<RankedEntry> ranked;
    ranked.reserve(static_cast<size_t>(available));
    for (int i = 0; i < n; ++i) {
        if (i == exclude_index) continue;
        ranked.push_back({i, cosine_similarity(query, gallery.entries[static_cast<size_t>(i)].embedding)});
    }
    std::partial_sort(ranked.begin(), ranked.begin() + k, ranked.end(), [](const RankedEntry& a, const RankedEntry& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.gallery_index < b.gallery_index;
    });
    ranked.resize(static_cast<size_t>(k));
    return ranked;
}

namespace {

double flag_agreement(const FrameLabel& a, const FrameLabel& b) {
    int agree = 0;
    for (int f = 0; f < 4; ++f) agree += a.flags[static_cast<size_t>(f)] == b.flags[static_cast<size_t>(f)];
    return agree / 4.0;
}

}  // namespace

RetrievalSummary retrieval_report(const Gallery& gallery, int n_queries, int k, uint64_t seed,
                                  std::ostream* csv_out) {
    const int n = static_cast<int>(gallery.entries.size());
    if (n < 2) throw ValueError("retrieval_report: gallery needs at least 2 entries");
    if (k < 1 || k > n - 1) throw ValueError("retrieval_report: k must be in [1, gallery-1]");
    if (n_queries < 1) throw ValueError("retrieval_report: n_queries must be >= 1");

    std::mt19937_64 rng(seed);
    if (csv_out) {
        *csv_out << "# rng: mt19937_64 seed=" << seed << " (queries first, then one baseline pick per query)\n";
        *csv_out << "query_id,rank,gallery_id,similarity,yaw_gap,flag_agreement\n";
    }

    // queries drawn without replacement when possible
    std::vector<int> query_ids;
    if (n_queries <= n) {
        std::vector<int> all(static_cast<size_t>(n));
        std::iota(all.begin(), all.end(), 0);
        for (int i = 0; i < n_queries; ++i) {
            std::uniform_int_distribution<int> dist(i, n - 1);
            std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(dist(rng))]);
            query_ids.push_back(all[static_cast<size_t>(i)]);
        }
    } else {
        std::uniform_int_distribution<int> dist(0, n - 1);
        for (int i = 0; i < n_queries; ++i) query_ids.push_back(dist(rng));
    }

    RetrievalSummary s;
    s.n_queries = n_queries;
    s.k = k;
    s.seed = seed;
    for (int q : query_ids) {
        const GalleryEntry& query = gallery.entries[static_cast<size_t>(q)];
        const auto ranked = rank_gallery(query.embedding, gallery, k, q);
        const GalleryEntry& top1 = gallery.entries[static_cast<size_t>(ranked[0].gallery_index)];
        s.mean_top1_yaw_gap += std::abs(top1.label.yaw - query.label.yaw);
        s.mean_top1_pitch_gap += std::abs(top1.label.pitch - query.label.pitch);
        s.mean_top1_roll_gap += std::abs(top1.label.roll - query.label.roll);
        s.flag_agreement_top1 += flag_agreement(top1.label, query.label);
        double topk_agree = 0;
        for (const auto& r : ranked) {
            const GalleryEntry& e = gallery.entries[static_cast<size_t>(r.gallery_index)];
            topk_agree += flag_agreement(e.label, query.label);
            if (csv_out) {
                *csv_out << q << ',' << (&r - ranked.data()) << ',' << e.frame_index << ','
                         << fmt_real(r.similarity) << ',' << fmt_real(std::abs(e.label.yaw - query.label.yaw))
                         << ',' << fmt_real(flag_agreement(e.label, query.label)) << '\n';
            }
        }
        s.flag_agreement_topk += topk_agree / k;

        // random-pick baseline on the same query, same stream
        std::uniform_int_distribution<int> dist(0, n - 2);
        int pick = dist(rng);
        if (pick >= q) ++pick;
        const GalleryEntry& rnd = gallery.entries[static_cast<size_t>(pick)];
        s.baseline_yaw_gap += std::abs(rnd.label.yaw - query.label.yaw);
        s.baseline_pitch_gap += std::abs(rnd.label.pitch - query.label.pitch);
        s.baseline_roll_gap += std::abs(rnd.label.roll - query.label.roll);
        s.baseline_flag_agreement += flag_agreement(rnd.label, query.label);
    }
    const double nq = n_queries;
    s.mean_top1_yaw_gap /= nq;
    s.mean_top1_pitch_gap /= nq;
    s.mean_top1_roll_gap /= nq;
    s.flag_agreement_top1 /= nq;
    s.flag_agreement_topk /= nq;
    s.baseline_yaw_gap /= nq;
    s.baseline_pitch_gap /= nq;
    s.baseline_roll_gap /= nq;
    s.baseline_flag_agreement /= nq;
    return s;
}

std::string RetrievalSummary::to_text() const {
    std::ostringstream out;
    out << "retrieval over " << n_queries << " queries, top-" << k << " (seed " << seed << ")\n";
    out << "  top-1 |yaw gap|     = " << fmt_real(mean_top1_yaw_gap) << " deg (random pick: "
        << fmt_real(baseline_yaw_gap) << ")\n";
    out << "  top-1 |pitch gap|   = " << fmt_real(mean_top1_pitch_gap) << " deg (random pick: "
        << fmt_real(baseline_pitch_gap) << ")\n";
    out << "  top-1 |roll gap|    = " << fmt_real(mean_top1_roll_gap) << " deg (random pick: "
        << fmt_real(baseline_roll_gap) << ")\n";
    out << "  flag agreement @1   = " << fmt_real(flag_agreement_top1) << " (random pick: "
        << fmt_real(baseline_flag_agreement) << ")\n";
    out << "  flag agreement @k   = " << fmt_real(flag_agreement_topk) << "\n";
    return out.str();
}

}  // namespace faceflow
