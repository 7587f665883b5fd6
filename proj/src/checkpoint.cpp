#include "faceflow/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace faceflow {

namespace {

constexpr char kMagic[] = "FACEFLOWCKPT1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;
constexpr uint32_t kFormatVersion = 1;

void put_bytes(std::ostream& out, const void* p, size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u8(std::ostream& out, uint8_t v) { put_bytes(out, &v, 1); }

void put_u32(std::ostream& out, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v >> 16),
                    static_cast<uint8_t>(v >> 24)};
    put_bytes(out, b, 4);
}

void put_u64(std::ostream& out, uint64_t v) {
    put_u32(out, static_cast<uint32_t>(v));
    put_u32(out, static_cast<uint32_t>(v >> 32));
}

void put_f32(std::ostream& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    put_bytes(out, s.data(), s.size());
}

void put_f32_array(std::ostream& out, const std::vector<float>& v) {
    for (float x : v) put_f32(out, x);
}

struct Reader {
    std::ifstream in;
    std::string path;

    Reader(const std::filesystem::path& p) : in(p, std::ios::binary), path(p.string()) {
        if (!in) throw IoError("cannot open checkpoint " + path);
    }

    void bytes(void* p, size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw ParseError("checkpoint " + path + ": truncated file");
    }
    uint8_t u8() {
        uint8_t v;
        bytes(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint8_t b[4];
        bytes(b, 4);
        return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
               static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
    }
    uint64_t u64() {
        const uint64_t lo = u32();
        return lo | static_cast<uint64_t>(u32()) << 32;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        if (n > (1u << 20)) throw ParseError("checkpoint " + path + ": implausible string length");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    std::vector<float> f32_array(size_t n) {
        std::vector<float> v(n);
        for (auto& x : v) x = f32();
        return v;
    }
};

void write_config(std::ostream& out, const ModelConfig& cfg) {
    put_u32(out, static_cast<uint32_t>(cfg.image_size));
    put_u32(out, static_cast<uint32_t>(cfg.embedding_dim));
    put_u32(out, static_cast<uint32_t>(cfg.encoder_channels.size()));
    for (int c : cfg.encoder_channels) put_u32(out, static_cast<uint32_t>(c));
    put_u32(out, static_cast<uint32_t>(cfg.decoder_channels.size()));
    for (int c : cfg.decoder_channels) put_u32(out, static_cast<uint32_t>(c));
    put_u8(out, cfg.multi_source ? 1 : 0);
    put_u32(out, static_cast<uint32_t>(cfg.n_sources));
    put_u64(out, cfg.seed);
}

ModelConfig read_config(Reader& r) {
    ModelConfig cfg;
    cfg.image_size = static_cast<int>(r.u32());
    cfg.embedding_dim = static_cast<int>(r.u32());
    cfg.encoder_channels.resize(r.u32());
    for (auto& c : cfg.encoder_channels) c = static_cast<int>(r.u32());
    cfg.decoder_channels.resize(r.u32());
    for (auto& c : cfg.decoder_channels) c = static_cast<int>(r.u32());
    cfg.multi_source = r.u8() != 0;
    cfg.n_sources = static_cast<int>(r.u32());
    cfg.seed = r.u64();
    return cfg;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const TrainerSnapshot* trainer) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    put_bytes(out, kMagic, kMagicLen);
    put_u32(out, kFormatVersion);
    write_config(out, model.config);

    auto params = model.parameters();
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (auto* p : params) {
        put_string(out, p->name);
        put_u32(out, static_cast<uint32_t>(p->value.rank()));
        for (int d : p->value.shape()) put_u32(out, static_cast<uint32_t>(d));
        put_f32_array(out, p->value.values());
    }

    put_u8(out, trainer ? 1 : 0);
    if (trainer) {
        put_u64(out, static_cast<uint64_t>(trainer->step));
        put_f64(out, trainer->lr);
        put_u32(out, static_cast<uint32_t>(trainer->lr_decay_count));
        put_u32(out, static_cast<uint32_t>(trainer->lr_val_history.size()));
        for (double v : trainer->lr_val_history) put_f64(out, v);
        put_u8(out, trainer->use_curriculum ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(trainer->curriculum.stage));
        put_u8(out, trainer->curriculum.active ? 1 : 0);
        put_u32(out, static_cast<uint32_t>(trainer->curriculum.plateau_patience));
        put_f64(out, trainer->curriculum.plateau_rel_eps);
        put_u32(out, static_cast<uint32_t>(trainer->curriculum.val_history.size()));
        for (double v : trainer->curriculum.val_history) put_f64(out, v);
        put_f64(out, trainer->initial_val_loss);
        put_u32(out, static_cast<uint32_t>(trainer->sgd_velocity.size()));
        for (const auto& buf : trainer->sgd_velocity) {
            put_u64(out, buf.size());
            put_f32_array(out, buf);
        }
    }
    if (!out) throw IoError("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Reader r(path);
    char magic[kMagicLen];
    r.bytes(magic, kMagicLen);
    if (std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw ParseError("checkpoint " + path.string() + ": bad magic bytes (not a faceflow checkpoint)");
    const uint32_t version = r.u32();
    if (version != kFormatVersion)
        throw ParseError("checkpoint " + path.string() + ": unsupported format version " +
                         std::to_string(version));

    const ModelConfig cfg = read_config(r);
    Checkpoint ck{Model<float>(cfg), std::nullopt};
    auto params = ck.model.parameters();
    const uint32_t n_params = r.u32();
    if (n_params != params.size())
        throw ParseError("checkpoint " + path.string() + ": holds " + std::to_string(n_params) +
                         " parameters but config implies " + std::to_string(params.size()));
    for (auto* p : params) {
        const std::string name = r.str();
        if (name != p->name)
            throw ParseError("checkpoint " + path.string() + ": parameter '" + name +
                             "' does not match expected '" + p->name + "'");
        const uint32_t rank = r.u32();
        std::vector<int> dims(rank);
        for (auto& d : dims) d = static_cast<int>(r.u32());
        if (dims != p->value.shape())
            throw ParseError("checkpoint " + path.string() + ": parameter '" + name + "' has shape " +
                             shape_str(dims) + ", expected " + shape_str(p->value.shape()));
        p->value.values() = r.f32_array(static_cast<size_t>(p->value.numel()));
    }

    if (r.u8()) {
        TrainerSnapshot ts;
        ts.step = static_cast<int64_t>(r.u64());
        ts.lr = r.f64();
        ts.lr_decay_count = static_cast<int>(r.u32());
        ts.lr_val_history.resize(r.u32());
        for (auto& v : ts.lr_val_history) v = r.f64();
        ts.use_curriculum = r.u8() != 0;
        ts.curriculum.stage = static_cast<int>(r.u32());
        ts.curriculum.active = r.u8() != 0;
        ts.curriculum.plateau_patience = static_cast<int>(r.u32());
        ts.curriculum.plateau_rel_eps = r.f64();
        ts.curriculum.val_history.resize(r.u32());
        for (auto& v : ts.curriculum.val_history) v = r.f64();
        ts.initial_val_loss = r.f64();
        ts.sgd_velocity.resize(r.u32());
        for (auto& buf : ts.sgd_velocity) buf = r.f32_array(static_cast<size_t>(r.u64()));
        ck.trainer = std::move(ts);
    }
    return ck;
}

}  // namespace faceflow
