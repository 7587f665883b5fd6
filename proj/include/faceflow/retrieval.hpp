#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "faceflow/probe.hpp"
#include "faceflow/synthetic.hpp"

namespace faceflow {

struct GalleryEntry {
    int frame_index = 0;
    std::vector<float> embedding;
    FrameLabel label;
};

struct Gallery {
    int dim = 0;
    std::vector<GalleryEntry> entries;
};

Gallery build_gallery(Model<float>& model, const LoadedDataset& data, Split split, int max_size = 0,
                      int batch_size = 32);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

struct RankedEntry {
    int gallery_index;
    double similarity;
};

// Descending cosine similarity, ties broken by gallery index; exclude_index
// drops the query's own entry when it belongs to the gallery.
std::vector<RankedEntry> rank_gallery(std::span<const float> query, const Gallery& gallery, int k,
                                      int exclude_index = -1);

struct RetrievalSummary {
    int n_queries = 0;
    int k = 0;
    uint64_t seed = 0;
    double mean_top1_yaw_gap = 0;
    double mean_top1_pitch_gap = 0;
    double mean_top1_roll_gap = 0;
    double flag_agreement_top1 = 0;
    double flag_agreement_topk = 0;
    double baseline_yaw_gap = 0;
    double baseline_pitch_gap = 0;
    double baseline_roll_gap = 0;
    double baseline_flag_agreement = 0;

    std::string to_text() const;
};

// Ranks n random queries against the gallery and aggregates label agreement
// of the neighbors, against a random-pick baseline drawn from the same
// mt19937_64 stream (seed recorded in the CSV header). csv_out, when given,
// receives one row per (query, rank).
RetrievalSummary retrieval_report(const Gallery& gallery, int n_queries, int k, uint64_t seed,
                                  std::ostream* csv_out = nullptr);

}  // namespace faceflow
