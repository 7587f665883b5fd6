#include "faceflow/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace faceflow {

namespace fs = std::filesystem;

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::all: return "all";
    }
    return "?";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    if (name == "all") return Split::all;
    throw ValueError("unknown split name '" + name + "'");
}

void IdentityParams::validate() const {
    auto in = [](double v, double lo, double hi) { return v >= lo && v <= hi; };
    if (!in(head_aspect, 0.7, 1.3)) throw ValueError("identity: head_aspect out of [0.7,1.3]");
    for (double c : skin_tone)
        if (!in(c, 0.0, 1.0)) throw ValueError("identity: skin tone channel out of [0,1]");
    if (!in(eye_spacing, 0.40, 0.60)) throw ValueError("identity: eye_spacing out of [0.40,0.60]");
    if (!in(feature_scale, 0.85, 1.15)) throw ValueError("identity: feature_scale out of [0.85,1.15]");
}

IdentityParams sample_identity(uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uni = [&](double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    IdentityParams id{};
    id.head_aspect = uni(0.7, 1.3);
    const double r = uni(0.55, 0.88);
    id.skin_tone[0] = r;
    id.skin_tone[1] = r * uni(0.75, 0.92);
    id.skin_tone[2] = id.skin_tone[1] * uni(0.70, 0.92);
    id.eye_spacing = uni(0.40, 0.60);
    id.feature_scale = uni(0.85, 1.15);
    id.validate();
    return id;
}

namespace {

struct Vec2 {
    double x, y;
};

// Rotation about the image center; positive angle rotates screen-clockwise
// in y-down pixel coordinates. The same function places rendered features
// and label landmarks, so the two stay consistent by construction.
Vec2 rotate_about(Vec2 p, Vec2 center, double degrees) {
    const double rad = degrees * std::numbers::pi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double dx = p.x - center.x, dy = p.y - center.y;
    return {center.x + c * dx - s * dy, center.y + s * dx + c * dy};
}

struct Ellipse {
    Vec2 center;
    double rx, ry;
    double color[3];
    bool enabled = true;

    bool contains(Vec2 q) const {
        if (!enabled || rx <= 0 || ry <= 0) return false;
        const double nx = (q.x - center.x) / rx;
        const double ny = (q.y - center.y) / ry;
        return nx * nx + ny * ny <= 1.0;
    }
    double radius2(Vec2 q) const {
        const double nx = (q.x - center.x) / rx;
        const double ny = (q.y - center.y) / ry;
        return nx * nx + ny * ny;
    }
};

// Geometry of one face in un-rolled "face space" pixel units.
struct FaceGeometry {
    Ellipse head;
    Ellipse brow_l, brow_r;
    Ellipse sclera_l, sclera_r, iris_l, iris_r;
    Ellipse nose;
    Ellipse mouth, mouth_cavity;
    Vec2 eye_l, eye_r, nose_tip, mouth_l, mouth_r;  // landmark centers
    double yaw_shade;  // lateral shading factor derived from yaw
};

FaceGeometry face_geometry(const IdentityParams& id, double yaw, double pitch, double roll, int size,
                           const std::array<bool, 4>& flags) {
    (void)roll;
    const bool mouth_open = flags[0], smile = flags[1], eyes_closed = flags[2], brows_raised = flags[3];
    const double S = size;
    const Vec2 c{S / 2.0, S / 2.0};
    const double fs = id.feature_scale;

    const double yaw_n = yaw / 45.0;
    const double pitch_n = pitch / 30.0;
    const double yaw_rad = yaw * std::numbers::pi / 180.0;
    const double foreshorten = std::cos(yaw_rad);

    const double dx = 0.12 * S * yaw_n;
    const double dy = 0.10 * S * pitch_n;

    FaceGeometry g{};
    g.yaw_shade = yaw_n;
    g.head = {{c.x, c.y}, 0.30 * S * id.head_aspect, 0.40 * S, {id.skin_tone[0], id.skin_tone[1], id.skin_tone[2]}};

    const double eye_y = c.y - 0.09 * S * fs + dy;
    const double eye_off = id.eye_spacing * g.head.rx * foreshorten;
    const double eye_rx = 0.075 * S * fs * (0.70 + 0.30 * foreshorten);
    const double eye_ry_open = 0.050 * S * fs;
    const double eye_ry = eyes_closed ? eye_ry_open * 0.16 : eye_ry_open;
    g.eye_l = {c.x - eye_off + dx, eye_y};
    g.eye_r = {c.x + eye_off + dx, eye_y};

    const double lash[3] = {0.16, 0.11, 0.09};
    const double sclera[3] = {0.93, 0.93, 0.96};
    const double iris[3] = {0.10, 0.16, 0.34};
    g.sclera_l = {g.eye_l, eye_rx, eye_ry, {sclera[0], sclera[1], sclera[2]}};
    g.sclera_r = {g.eye_r, eye_rx, eye_ry, {sclera[0], sclera[1], sclera[2]}};
    if (eyes_closed) {
        // thin dark lash line replaces the open eye
        g.sclera_l.color[0] = lash[0], g.sclera_l.color[1] = lash[1], g.sclera_l.color[2] = lash[2];
        g.sclera_r.color[0] = lash[0], g.sclera_r.color[1] = lash[1], g.sclera_r.color[2] = lash[2];
        g.iris_l.enabled = g.iris_r.enabled = false;
        g.iris_l.rx = 0;
        g.iris_r.rx = 0;
    } else {
        const double iris_r = 0.80 * eye_ry_open;
        g.iris_l = {g.eye_l, iris_r, iris_r, {iris[0], iris[1], iris[2]}};
        g.iris_r = {g.eye_r, iris_r, iris_r, {iris[0], iris[1], iris[2]}};
    }

    const double brow_y = eye_y - 0.085 * S * fs - (brows_raised ? 0.050 * S : 0.0);
    const double brow_col[3] = {0.22, 0.15, 0.10};
    g.brow_l = {{g.eye_l.x, brow_y}, eye_rx * 1.25, 0.016 * S, {brow_col[0], brow_col[1], brow_col[2]}};
    g.brow_r = {{g.eye_r.x, brow_y}, eye_rx * 1.25, 0.016 * S, {brow_col[0], brow_col[1], brow_col[2]}};

    const double nose_shade = 0.80;
    g.nose_tip = {c.x + 1.2 * dx, c.y + 0.045 * S * fs + dy};
    g.nose = {g.nose_tip, 0.038 * S * fs, 0.055 * S * fs,
              {id.skin_tone[0] * nose_shade, id.skin_tone[1] * nose_shade, id.skin_tone[2] * nose_shade}};

    const double mouth_y = c.y + 0.21 * S * fs + dy - (smile ? 0.015 * S : 0.0);
    const double mouth_rx = 0.105 * S * fs * (smile ? 1.30 : 1.0) * foreshorten;
    const double mouth_ry = 0.026 * S * fs * (mouth_open ? 3.2 : 1.0);
    g.mouth = {{c.x + dx, mouth_y}, mouth_rx, mouth_ry, {0.66, 0.25, 0.28}};
    g.mouth_cavity = {{c.x + dx, mouth_y}, mouth_rx * 0.72, mouth_ry * 0.62, {0.13, 0.05, 0.07}};
    g.mouth_cavity.enabled = mouth_open;
    g.mouth_l = {c.x + dx - mouth_rx, mouth_y};
    g.mouth_r = {c.x + dx + mouth_rx, mouth_y};

    return g;
}

// Color of one sample point in face space (before roll).
void shade_point(const FaceGeometry& g, Vec2 q, double out[3]) {
    // background: soft vertical gradient
    const double t = q.y / (2.0 * g.head.center.y);
    out[0] = 0.070 + 0.030 * t;
    out[1] = 0.080 + 0.035 * t;
    out[2] = 0.105 + 0.045 * t;
    if (!g.head.contains(q)) return;

    const double r2 = g.head.radius2(q);
    const double lateral = (q.x - g.head.center.x) / g.head.rx;
    const double shade = (1.0 - 0.30 * r2) * (1.0 - 0.13 * g.yaw_shade * lateral);
    for (int ch = 0; ch < 3; ++ch) out[ch] = g.head.color[ch] * shade;

    const Ellipse* layers[] = {&g.brow_l, &g.brow_r, &g.sclera_l, &g.sclera_r,
                               &g.iris_l, &g.iris_r, &g.nose,     &g.mouth,
                               &g.mouth_cavity};
    for (const Ellipse* e : layers) {
        if (e->contains(q)) {
            out[0] = e->color[0];
            out[1] = e->color[1];
            out[2] = e->color[2];
        }
    }
}

}  // namespace

RenderedFrame render_face(const IdentityParams& identity, double yaw, double pitch, double roll,
                          const std::array<bool, 4>& expression_flags, int size) {
    identity.validate();
    if (size < 32 || size % 16 != 0)
        throw ValueError("render_face: size must be >= 32 and a multiple of 16, got " + std::to_string(size));
    if (std::abs(yaw) > 45.0) throw ValueError("render_face: yaw " + fmt_real(yaw) + " out of [-45,45]");
    if (std::abs(pitch) > 30.0) throw ValueError("render_face: pitch " + fmt_real(pitch) + " out of [-30,30]");
    if (std::abs(roll) > 30.0) throw ValueError("render_face: roll " + fmt_real(roll) + " out of [-30,30]");

    const FaceGeometry geo = face_geometry(identity, yaw, pitch, roll, size, expression_flags);
    const Vec2 center{size / 2.0, size / 2.0};

    std::vector<float> image(static_cast<size_t>(3) * size * size);
    const double offsets[2] = {-0.25, 0.25};
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double acc[3] = {0, 0, 0};
            for (double oy : offsets) {
                for (double ox : offsets) {
                    // inverse roll: map the screen sample into face space
                    const Vec2 q = rotate_about({x + ox, y + oy}, center, -roll);
                    double col[3];
                    shade_point(geo, q, col);
                    acc[0] += col[0];
                    acc[1] += col[1];
                    acc[2] += col[2];
                }
            }
            for (int ch = 0; ch < 3; ++ch) {
                const double v = acc[ch] / 4.0;
                const int q8 = std::clamp(static_cast<int>(std::lround(v * 255.0)), 0, 255);
                image[(static_cast<size_t>(ch) * size + y) * size + x] = static_cast<float>(q8) / 255.0f;
            }
        }
    }

    RenderedFrame out;
    out.image = Tensor<float>::from({3, size, size}, std::move(image));
    out.label.yaw = yaw;
    out.label.pitch = pitch;
    out.label.roll = roll;
    out.label.flags = expression_flags;
    const Vec2 pts[5] = {geo.eye_l, geo.eye_r, geo.nose_tip, geo.mouth_l, geo.mouth_r};
    for (int i = 0; i < 5; ++i) {
        const Vec2 p = rotate_about(pts[i], center, roll);
        out.label.landmarks[static_cast<size_t>(i)] = {p.x, p.y};
    }
    return out;
}

FaceTrack gen_track(const IdentityParams& identity, int n_frames, uint64_t motion_seed, int size,
                    double yaw_step, double pitch_step, double roll_step) {
    if (n_frames < 2) throw ValueError("gen_track: need at least 2 frames, got " + std::to_string(n_frames));
    identity.validate();
    std::mt19937_64 rng(motion_seed);
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    auto coin = [&](double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; };

    // reflect at the bound; never exceeds the step size
    auto walk = [](double v, double delta, double bound) {
        v += delta;
        if (v > bound) v = 2 * bound - v;
        if (v < -bound) v = -2 * bound - v;
        return v;
    };

    double yaw = uni(-40, 40), pitch = uni(-26, 26), roll = uni(-26, 26);
    std::array<bool, 4> flags = {coin(0.35), coin(0.35), coin(0.15), coin(0.30)};

    FaceTrack track;
    track.identity = identity;
    track.frames.reserve(static_cast<size_t>(n_frames));
    for (int f = 0; f < n_frames; ++f) {
        if (f > 0) {
            yaw = walk(yaw, uni(-yaw_step, yaw_step), 45.0);
            pitch = walk(pitch, uni(-pitch_step, pitch_step), 30.0);
            roll = walk(roll, uni(-roll_step, roll_step), 30.0);
            for (auto& fl : flags)
                if (coin(0.12)) fl = !fl;
        }
        track.frames.push_back(render_face(identity, yaw, pitch, roll, flags, size));
    }
    return track;
}

SplitSizes split_sizes(int n_identities) {
    SplitSizes s;
    s.val = static_cast<int>(n_identities * 15 / 100);
    s.test = static_cast<int>(n_identities * 10 / 100);
    s.train = n_identities - s.val - s.test;
    return s;
}

namespace {

std::string identity_dir_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "id%04d", index);
    return buf;
}

std::string track_dir_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "track%02d", index);
    return buf;
}

void write_labels_csv(const fs::path& path, const std::vector<RenderedFrame>& frames) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "frame,yaw,pitch,roll,lx0,ly0,lx1,ly1,lx2,ly2,lx3,ly3,lx4,ly4,"
           "mouth_open,smile,eyes_closed,brows_raised\n";
    for (size_t f = 0; f < frames.size(); ++f) {
        const FrameLabel& l = frames[f].label;
        out << f << ',' << fmt_real(l.yaw) << ',' << fmt_real(l.pitch) << ',' << fmt_real(l.roll);
        for (const auto& lm : l.landmarks) out << ',' << fmt_real(lm[0]) << ',' << fmt_real(lm[1]);
        for (bool b : l.flags) out << ',' << (b ? 1 : 0);
        out << '\n';
    }
}

double parse_double_field(const std::string& field, const std::string& where) {
    double v = 0;
    auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size())
        throw ParseError(where + ": bad numeric field '" + field + "'");
    return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

std::vector<FrameLabel> read_labels_csv(const fs::path& path, int expect_frames) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing labels file " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path.string() + ":1: empty labels file");
    std::vector<FrameLabel> labels(static_cast<size_t>(expect_frames));
    std::vector<bool> seen(static_cast<size_t>(expect_frames), false);
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        auto fields = split_csv_line(line);
        if (fields.size() != 18)
            throw ParseError(where + ": expected 18 fields, got " + std::to_string(fields.size()));
        const int frame = static_cast<int>(parse_double_field(fields[0], where));
        if (frame < 0 || frame >= expect_frames)
            throw ParseError(where + ": frame index " + fields[0] + " out of range");
        FrameLabel l;
        l.yaw = parse_double_field(fields[1], where);
        l.pitch = parse_double_field(fields[2], where);
        l.roll = parse_double_field(fields[3], where);
        for (int i = 0; i < 5; ++i) {
            l.landmarks[static_cast<size_t>(i)][0] = parse_double_field(fields[static_cast<size_t>(4 + 2 * i)], where);
            l.landmarks[static_cast<size_t>(i)][1] = parse_double_field(fields[static_cast<size_t>(5 + 2 * i)], where);
        }
        for (int i = 0; i < 4; ++i) {
            const std::string& f = fields[static_cast<size_t>(14 + i)];
            if (f != "0" && f != "1") throw ParseError(where + ": flag field must be 0 or 1, got '" + f + "'");
            l.flags[static_cast<size_t>(i)] = f == "1";
        }
        labels[static_cast<size_t>(frame)] = l;
        seen[static_cast<size_t>(frame)] = true;
    }
    for (int f = 0; f < expect_frames; ++f)
        if (!seen[static_cast<size_t>(f)])
            throw ParseError(path.string() + ": missing row for frame " + std::to_string(f));
    return labels;
}

}  // namespace

std::vector<uint8_t> quantize_rgb(const Tensor<float>& image) {
    const int size = image.dim(1);
    const int64_t plane = static_cast<int64_t>(size) * image.dim(2);
    std::vector<uint8_t> rgb(static_cast<size_t>(plane) * 3);
    const float* v = image.data();
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const float x = v[c * plane + p];
            rgb[static_cast<size_t>(p) * 3 + static_cast<size_t>(c)] =
                static_cast<uint8_t>(std::clamp(static_cast<int>(std::lround(x * 255.0f)), 0, 255));
        }
    return rgb;
}

Tensor<float> dequantize_rgb(const std::vector<uint8_t>& rgb, int size) {
    const int64_t plane = static_cast<int64_t>(size) * size;
    std::vector<float> vals(static_cast<size_t>(plane) * 3);
    for (int64_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c)
            vals[static_cast<size_t>(c * plane + p)] =
                static_cast<float>(rgb[static_cast<size_t>(p) * 3 + static_cast<size_t>(c)]) / 255.0f;
    return Tensor<float>::from({3, size, size}, std::move(vals));
}

void write_ppm(const fs::path& path, const std::vector<uint8_t>& rgb, int w, int h) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!out) throw IoError("short write to " + path.string());
}

std::vector<uint8_t> read_ppm(const fs::path& path, int& w, int& h) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing frame file " + path.string());
    std::string magic;
    in >> magic;
    if (magic != "P6") throw ParseError(path.string() + ": not a binary PPM (P6) file");
    int maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw ParseError(path.string() + ": bad PPM header");
    in.get();  // single whitespace after header
    std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(rgb.size()))
        throw ParseError(path.string() + ": truncated pixel data");
    return rgb;
}

DatasetManifest gen_dataset(int n_identities, int tracks_per_identity, int frames_per_track, int size,
                            uint64_t seed, const fs::path& out_dir) {
    if (n_identities < 10)
        throw ValueError("gen_dataset: need at least 10 identities, got " + std::to_string(n_identities));
    if (tracks_per_identity < 1) throw ValueError("gen_dataset: tracks_per_identity must be >= 1");
    if (frames_per_track < 2) throw ValueError("gen_dataset: frames_per_track must be >= 2");

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest man;
    man.n_identities = n_identities;
    man.tracks_per_identity = tracks_per_identity;
    man.frames_per_track = frames_per_track;
    man.image_size = size;
    man.seed = seed;

    // identity-level split, shuffled by the dataset seed
    std::vector<int> order(static_cast<size_t>(n_identities));
    for (int i = 0; i < n_identities; ++i) order[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(mix_seed(seed, 0x5917));
    std::shuffle(order.begin(), order.end(), rng);
    const SplitSizes sizes = split_sizes(n_identities);
    man.identity_splits.assign(static_cast<size_t>(n_identities), Split::train);
    for (int r = 0; r < n_identities; ++r) {
        Split s = r < sizes.train ? Split::train : (r < sizes.train + sizes.val ? Split::val : Split::test);
        man.identity_splits[static_cast<size_t>(order[static_cast<size_t>(r)])] = s;
    }
    for (int i = 0; i < n_identities; ++i) man.identity_ids.push_back(identity_dir_name(i));

    {
        std::ofstream mf(out_dir / "manifest.txt", std::ios::binary);
        if (!mf) throw IoError("cannot write " + (out_dir / "manifest.txt").string());
        mf << "faceflow-dataset,1\n";
        mf << "identities," << n_identities << '\n';
        mf << "tracks_per_identity," << tracks_per_identity << '\n';
        mf << "frames_per_track," << frames_per_track << '\n';
        mf << "image_size," << size << '\n';
        mf << "seed," << seed << '\n';
        for (int i = 0; i < n_identities; ++i)
            mf << man.identity_ids[static_cast<size_t>(i)] << ',' << split_name(man.identity_splits[static_cast<size_t>(i)]) << '\n';
    }

    for (int i = 0; i < n_identities; ++i) {
        const IdentityParams id = sample_identity(mix_seed(seed, 1000003ULL + static_cast<uint64_t>(i)));
        for (int t = 0; t < tracks_per_identity; ++t) {
            const uint64_t motion_seed =
                mix_seed(seed, 2000003ULL + static_cast<uint64_t>(i) * 977ULL + static_cast<uint64_t>(t));
            FaceTrack track = gen_track(id, frames_per_track, motion_seed, size);
            const fs::path tdir = out_dir / identity_dir_name(i) / track_dir_name(t);
            fs::create_directories(tdir, ec);
            if (ec) throw IoError("cannot create " + tdir.string() + ": " + ec.message());
            for (int f = 0; f < frames_per_track; ++f) {
                write_ppm(tdir / ("frame_" + std::to_string(f) + ".ppm"),
                          quantize_rgb(track.frames[static_cast<size_t>(f)].image), size, size);
            }
            write_labels_csv(tdir / "labels.csv", track.frames);
        }
    }
    return man;
}

std::vector<int> LoadedDataset::track_indices(Split split) const {
    std::vector<int> out;
    for (size_t i = 0; i < tracks.size(); ++i)
        if (split == Split::all || track_split(tracks[i]) == split) out.push_back(static_cast<int>(i));
    return out;
}

std::vector<int> LoadedDataset::frame_indices(Split split) const {
    std::vector<int> out;
    for (const auto& t : tracks) {
        if (split != Split::all && track_split(t) != split) continue;
        for (int f = 0; f < t.n_frames; ++f) out.push_back(t.first_frame + f);
    }
    return out;
}

Tensor<float> LoadedDataset::frame_tensor(int frame_index) const {
    return dequantize_rgb(frames[static_cast<size_t>(frame_index)].rgb, manifest.image_size);
}

Tensor<float> LoadedDataset::frame_batch(const std::vector<int>& idx) const {
    const int S = manifest.image_size;
    const int64_t per = static_cast<int64_t>(3) * S * S;
    std::vector<float> vals(static_cast<size_t>(per) * idx.size());
    const int64_t plane = static_cast<int64_t>(S) * S;
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& rgb = frames[static_cast<size_t>(idx[b])].rgb;
        float* dst = vals.data() + static_cast<int64_t>(b) * per;
        for (int64_t p = 0; p < plane; ++p)
            for (int c = 0; c < 3; ++c)
                dst[c * plane + p] = static_cast<float>(rgb[static_cast<size_t>(p) * 3 + static_cast<size_t>(c)]) / 255.0f;
    }
    return Tensor<float>::from({static_cast<int>(idx.size()), 3, S, S}, std::move(vals));
}

LoadedDataset load_dataset(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.txt";
    std::ifstream mf(mpath, std::ios::binary);
    if (!mf) throw IoError("missing manifest " + mpath.string());

    LoadedDataset ds;
    DatasetManifest& man = ds.manifest;
    std::string line;
    int lineno = 0;
    auto next_line = [&]() {
        if (!std::getline(mf, line)) throw ParseError(mpath.string() + ": unexpected end of file");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ++lineno;
    };
    auto expect_kv = [&](const std::string& key) -> std::string {
        next_line();
        auto fields = split_csv_line(line);
        if (fields.size() != 2 || fields[0] != key)
            throw ParseError(mpath.string() + ":" + std::to_string(lineno) + ": expected '" + key + ",<value>'");
        return fields[1];
    };

    const std::string version = expect_kv("faceflow-dataset");
    if (version != "1") throw ParseError(mpath.string() + ": unsupported dataset version '" + version + "'");
    man.version = 1;
    man.n_identities = static_cast<int>(parse_double_field(expect_kv("identities"), mpath.string()));
    man.tracks_per_identity = static_cast<int>(parse_double_field(expect_kv("tracks_per_identity"), mpath.string()));
    man.frames_per_track = static_cast<int>(parse_double_field(expect_kv("frames_per_track"), mpath.string()));
    man.image_size = static_cast<int>(parse_double_field(expect_kv("image_size"), mpath.string()));
    man.seed = static_cast<uint64_t>(parse_double_field(expect_kv("seed"), mpath.string()));

    for (int i = 0; i < man.n_identities; ++i) {
        next_line();
        auto fields = split_csv_line(line);
        if (fields.size() != 2)
            throw ParseError(mpath.string() + ":" + std::to_string(lineno) + ": expected 'identity_id,split'");
        man.identity_ids.push_back(fields[0]);
        Split s = split_from_name(fields[1]);
        if (s == Split::all)
            throw ParseError(mpath.string() + ":" + std::to_string(lineno) + ": 'all' is not a valid assignment");
        man.identity_splits.push_back(s);
    }

    ds.frames.reserve(static_cast<size_t>(man.total_frames()));
    for (int i = 0; i < man.n_identities; ++i) {
        for (int t = 0; t < man.tracks_per_identity; ++t) {
            const fs::path tdir = dir / man.identity_ids[static_cast<size_t>(i)] / track_dir_name(t);
            TrackRef ref;
            ref.identity_index = i;
            ref.track_index = t;
            ref.dir = fs::relative(tdir, dir).string();
            ref.first_frame = static_cast<int>(ds.frames.size());
            ref.n_frames = man.frames_per_track;
            auto labels = read_labels_csv(tdir / "labels.csv", man.frames_per_track);
            for (int f = 0; f < man.frames_per_track; ++f) {
                int w = 0, h = 0;
                LoadedFrame frame;
                frame.rgb = read_ppm(tdir / ("frame_" + std::to_string(f) + ".ppm"), w, h);
                if (w != man.image_size || h != man.image_size)
                    throw ParseError(tdir.string() + "/frame_" + std::to_string(f) + ".ppm: size " +
                                     std::to_string(w) + "x" + std::to_string(h) + " does not match manifest " +
                                     std::to_string(man.image_size));
                frame.label = labels[static_cast<size_t>(f)];
                ds.frames.push_back(std::move(frame));
            }
            ds.tracks.push_back(std::move(ref));
        }
    }
    return ds;
}

}  // namespace faceflow
