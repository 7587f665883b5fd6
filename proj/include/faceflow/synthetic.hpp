#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "faceflow/tensor.hpp"

namespace faceflow {

enum class Split { train, val, test, all };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

// Per-identity appearance knobs. Stable across a track.
struct IdentityParams {
    double head_aspect;   // [0.7, 1.3], width multiplier of the head ellipse
    double skin_tone[3];  // RGB in [0,1]
    double eye_spacing;   // [0.40, 0.60], per-eye x offset as fraction of head half-width
    double feature_scale; // [0.85, 1.15]

    void validate() const;
};

IdentityParams sample_identity(uint64_t seed);

// Ground truth attached to a rendered frame. Landmark order:
// left eye, right eye, nose, left mouth corner, right mouth corner.
// Flag order: mouth_open, smile, eyes_closed, brows_raised.
struct FrameLabel {
    double yaw = 0;    // degrees, [-45, 45]
    double pitch = 0;  // degrees, [-30, 30]
    double roll = 0;   // degrees, [-30, 30]
    std::array<std::array<double, 2>, 5> landmarks{};  // pixel coordinates (x, y)
    std::array<bool, 4> flags{};

    static constexpr const char* kFlagNames[4] = {"mouth_open", "smile", "eyes_closed", "brows_raised"};
};

struct RenderedFrame {
    Tensor<float> image;  // [3,H,W], values quantized to multiples of 1/255
    FrameLabel label;
};

// Deterministic parametric face renderer. Yaw translates features
// horizontally (with foreshortened spacing), pitch translates vertically,
// roll rotates the whole face about the image center.
RenderedFrame render_face(const IdentityParams& identity, double yaw, double pitch, double roll,
                          const std::array<bool, 4>& expression_flags, int size);

struct FaceTrack {
    IdentityParams identity;
    std::vector<RenderedFrame> frames;
    std::string track_id;
};

// Smooth random-walk pose trajectory with expression toggles.
// Consecutive-frame pose deltas are bounded (defaults: 8/5/5 degrees).
FaceTrack gen_track(const IdentityParams& identity, int n_frames, uint64_t motion_seed, int size,
                    double yaw_step = 8.0, double pitch_step = 5.0, double roll_step = 5.0);

struct TrackRef {
    int identity_index = 0;
    int track_index = 0;       // within identity
    std::string dir;           // relative to dataset root
    int first_frame = 0;       // index into LoadedDataset::frames
    int n_frames = 0;
};

struct DatasetManifest {
    int version = 1;
    int n_identities = 0;
    int tracks_per_identity = 0;
    int frames_per_track = 0;
    int image_size = 0;
    uint64_t seed = 0;
    std::vector<std::string> identity_ids;
    std::vector<Split> identity_splits;

    int64_t total_frames() const {
        return static_cast<int64_t>(n_identities) * tracks_per_identity * frames_per_track;
    }
};

// Identity-level 75/15/10 split; val and test round down, remainder to train.
struct SplitSizes {
    int train = 0, val = 0, test = 0;
};
SplitSizes split_sizes(int n_identities);

// Writes a dataset to out_dir in the on-disk layout:
//   manifest.txt, <identity>/<track>/frame_<k>.ppm, <identity>/<track>/labels.csv
DatasetManifest gen_dataset(int n_identities, int tracks_per_identity, int frames_per_track, int size,
                            uint64_t seed, const std::filesystem::path& out_dir);

struct LoadedFrame {
    std::vector<uint8_t> rgb;  // interleaved RGB, row-major
    FrameLabel label;
};

struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<TrackRef> tracks;
    std::vector<LoadedFrame> frames;

    int image_size() const { return manifest.image_size; }
    Split track_split(const TrackRef& t) const { return manifest.identity_splits[static_cast<size_t>(t.identity_index)]; }
    std::vector<int> track_indices(Split split) const;
    std::vector<int> frame_indices(Split split) const;

    // [3,H,W] float tensor with values k/255, planar layout.
    Tensor<float> frame_tensor(int frame_index) const;
    // Stacks the given frames into [B,3,H,W].
    Tensor<float> frame_batch(const std::vector<int>& frame_indices) const;
};

LoadedDataset load_dataset(const std::filesystem::path& dir);

// PPM (binary P6, 8-bit) helpers.
void write_ppm(const std::filesystem::path& path, const std::vector<uint8_t>& rgb, int w, int h);
std::vector<uint8_t> read_ppm(const std::filesystem::path& path, int& w, int& h);

// Planar float [3,H,W] in [0,1] <-> interleaved 8-bit RGB.
std::vector<uint8_t> quantize_rgb(const Tensor<float>& image);
Tensor<float> dequantize_rgb(const std::vector<uint8_t>& rgb, int size);

}  // namespace faceflow
