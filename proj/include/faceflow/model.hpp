#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "faceflow/ops.hpp"
#include "faceflow/optim.hpp"

namespace faceflow {

struct ModelConfig {
    int image_size = 64;
    int embedding_dim = 256;
    std::vector<int> encoder_channels = {32, 64, 128, 256};
    std::vector<int> decoder_channels = {256, 128, 64, 32};
    bool multi_source = false;
    int n_sources = 1;
    uint64_t seed = 1;

    void validate() const {
        // image_size must be 4 * 2^k (k >= 2)
        int s = image_size;
        while (s % 2 == 0) s /= 2;
        if (s != 1 || image_size < 16)
            throw ValueError("model: image_size must be a power of 2 and >= 16, got " + std::to_string(image_size));
        if (encoder_channels.empty()) throw ValueError("model: encoder_channels must be non-empty");
        if (decoder_channels.size() != encoder_channels.size())
            throw ValueError("model: decoder_channels must mirror encoder_channels in length");
        const int collapse = image_size >> encoder_channels.size();
        if (collapse < 2)
            throw ValueError("model: too many encoder layers for image size " + std::to_string(image_size));
        if (embedding_dim < 1) throw ValueError("model: embedding_dim must be >= 1");
        if (n_sources < 1) throw ValueError("model: n_sources must be >= 1");
    }

    // spatial extent left after the stride-2 stack; the final encoder conv
    // collapses exactly this much to a 1x1 output
    int collapse_extent() const { return image_size >> encoder_channels.size(); }
};

namespace detail {

// Kaiming-uniform fan-in init with leaky-relu gain.
template <class S>
void kaiming_init(Tensor<S>& w, int fan_in, std::mt19937_64& rng, double slope = 0.2) {
    const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
    const double bound = gain * std::sqrt(3.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w.values()) v = static_cast<S>(dist(rng));
}

}  // namespace detail

template <class S>
struct Conv2dLayer {
    Parameter<S> weight;  // [K,C,kh,kw]
    Parameter<S> bias;    // [K]
    int stride = 1;
    int padding = 0;

    Conv2dLayer() = default;
    Conv2dLayer(const std::string& name, int in_ch, int out_ch, int k, int stride_, int padding_,
                std::mt19937_64& rng, bool zero_init = false)
        : stride(stride_), padding(padding_) {
        auto w = Tensor<S>::zeros({out_ch, in_ch, k, k});
        if (!zero_init) detail::kaiming_init(w, in_ch * k * k, rng);
        weight = Parameter<S>(name + ".weight", std::move(w));
        bias = Parameter<S>(name + ".bias", Tensor<S>::zeros({out_ch}));
    }

    Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, weight.value, bias.value, stride, padding); }
};

template <class S>
struct ConvT2dLayer {
    Parameter<S> weight;  // [Cin,Cout,kh,kw]
    Parameter<S> bias;    // [Cout]
    int stride = 1;
    int padding = 0;

    ConvT2dLayer() = default;
    ConvT2dLayer(const std::string& name, int in_ch, int out_ch, int k, int stride_, int padding_,
                 std::mt19937_64& rng)
        : stride(stride_), padding(padding_) {
        auto w = Tensor<S>::zeros({in_ch, out_ch, k, k});
        detail::kaiming_init(w, in_ch * k * k, rng);
        weight = Parameter<S>(name + ".weight", std::move(w));
        bias = Parameter<S>(name + ".bias", Tensor<S>::zeros({out_ch}));
    }

    Tensor<S> forward(const Tensor<S>& x) const {
        return conv_transpose2d(x, weight.value, bias.value, stride, padding);
    }
};

// Shared-weight frame encoder: a stride-2 conv stack that halves resolution
// per layer, closed by a full-extent conv that collapses the remaining grid
// to a 1x1 embedding. The full-extent conv (rather than pooling) keeps the
// spatial layout visible to the embedding.
template <class S>
struct Encoder {
    std::vector<Conv2dLayer<S>> stack;
    Conv2dLayer<S> to_embedding;
    int image_size = 0;
    int embedding_dim = 0;
    S slope = S(0.2);

    Encoder() = default;
    Encoder(const ModelConfig& cfg, std::mt19937_64& rng) {
        image_size = cfg.image_size;
        embedding_dim = cfg.embedding_dim;
        int in_ch = 3;
        for (size_t i = 0; i < cfg.encoder_channels.size(); ++i) {
            stack.emplace_back("encoder.conv" + std::to_string(i), in_ch, cfg.encoder_channels[i], 3, 2, 1,
                               rng);
            in_ch = cfg.encoder_channels[i];
        }
        to_embedding = Conv2dLayer<S>("encoder.embed", in_ch, cfg.embedding_dim, cfg.collapse_extent(), 1, 0, rng);
    }

    // frames [B,3,H,W] -> embeddings [B,D]
    Tensor<S> forward(const Tensor<S>& frames) const {
        if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != image_size || frames.dim(3) != image_size)
            throw ShapeError("encode: expected [B,3," + std::to_string(image_size) + "," +
                             std::to_string(image_size) + "] input, got " + shape_str(frames.shape()));
        Tensor<S> h = frames;
        for (const auto& layer : stack) h = leaky_relu(layer.forward(h), slope);
        h = to_embedding.forward(h);  // [B,D,1,1], linear output
        return reshape(h, {frames.dim(0), embedding_dim});
    }

    void collect(std::vector<Parameter<S>*>& out) {
        for (auto& l : stack) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        out.push_back(&to_embedding.weight);
        out.push_back(&to_embedding.bias);
    }
};

template <class S>
struct DecodeResult {
    Tensor<S> flow;                        // [B,2,H,W], values in [-2,2]
    std::optional<Tensor<S>> confidence;   // [B,1,H,W] logits, multi-source models only
};

// Maps the concatenated [target; source] embedding to a full-resolution flow
// field, plus a confidence map when configured. The confidence branch shares
// the trunk and forks at the last upsampling block.
template <class S>
struct Decoder {
    ConvT2dLayer<S> expand;               // 1x1 -> collapse_extent
    std::vector<ConvT2dLayer<S>> trunk;   // stride-2 upsampling to S/2
    ConvT2dLayer<S> flow_up;              // S/2 -> S
    Conv2dLayer<S> flow_head;             // -> 2 channels, tanh * 2
    ConvT2dLayer<S> conf_up;              // S/2 -> S (multi-source only)
    Conv2dLayer<S> conf_head;             // -> 1 channel, linear
    bool with_confidence = false;
    int input_dim = 0;
    S slope = S(0.2);

    Decoder() = default;
    Decoder(const ModelConfig& cfg, std::mt19937_64& rng) {
        with_confidence = cfg.multi_source;
        input_dim = 2 * cfg.embedding_dim;
        const auto& ch = cfg.decoder_channels;
        expand = ConvT2dLayer<S>("decoder.expand", input_dim, ch[0], cfg.collapse_extent(), 1, 0, rng);
        int in_ch = ch[0];
        for (size_t i = 1; i < ch.size(); ++i) {
            trunk.emplace_back("decoder.up" + std::to_string(i), in_ch, ch[i], 4, 2, 1, rng);
            in_ch = ch[i];
        }
        const int head_ch = std::max(8, in_ch / 2);
        flow_up = ConvT2dLayer<S>("decoder.flow_up", in_ch, head_ch, 4, 2, 1, rng);
        // zero-initialized flow output: training starts from the identity warp
        flow_head = Conv2dLayer<S>("decoder.flow_head", head_ch, 2, 3, 1, 1, rng, /*zero_init=*/true);
        if (with_confidence) {
            conf_up = ConvT2dLayer<S>("decoder.conf_up", in_ch, head_ch, 4, 2, 1, rng);
            conf_head = Conv2dLayer<S>("decoder.conf_head", head_ch, 1, 3, 1, 1, rng, /*zero_init=*/true);
        }
    }

    DecodeResult<S> forward(const Tensor<S>& emb_cat) const {
        if (emb_cat.rank() != 2 || emb_cat.dim(1) != input_dim)
            throw ShapeError("decode: expected [B," + std::to_string(input_dim) + "] concatenated embedding, got " +
                             shape_str(emb_cat.shape()));
        const int B = emb_cat.dim(0);
        Tensor<S> h = reshape(emb_cat, {B, input_dim, 1, 1});
        h = leaky_relu(expand.forward(h), slope);
        for (const auto& layer : trunk) h = leaky_relu(layer.forward(h), slope);
        Tensor<S> f = leaky_relu(flow_up.forward(h), slope);
        DecodeResult<S> out;
        out.flow = mul_scalar(tanh(flow_head.forward(f)), S(2));
        if (with_confidence) {
            Tensor<S> c = leaky_relu(conf_up.forward(h), slope);
            out.confidence = conf_head.forward(c);
        }
        return out;
    }

    void collect(std::vector<Parameter<S>*>& out) {
        auto push = [&out](ConvT2dLayer<S>& l) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        };
        push(expand);
        for (auto& l : trunk) push(l);
        push(flow_up);
        out.push_back(&flow_head.weight);
        out.push_back(&flow_head.bias);
        if (with_confidence) {
            push(conf_up);
            out.push_back(&conf_head.weight);
            out.push_back(&conf_head.bias);
        }
    }
};

template <class S>
struct Reconstruction {
    Tensor<S> generated;          // fused frame, [B,3,H,W]
    Tensor<S> per_sample_loss;    // [B]
    Tensor<S> loss;               // scalar, mean of per-sample losses
    std::vector<Tensor<S>> confidences;
};

// Frame-reconstruction model: one shared-weight encoder plus a decoder that
// predicts a sampling flow (and confidence, for multi-source fusion).
template <class S>
struct Model {
    ModelConfig config;
    Encoder<S> encoder;
    Decoder<S> decoder;

    Model() = default;
    explicit Model(const ModelConfig& cfg) : config(cfg) {
        config.validate();
        std::mt19937_64 rng(mix_seed(cfg.seed, 0xface));
        encoder = Encoder<S>(config, rng);
        decoder = Decoder<S>(config, rng);
    }

    std::vector<Parameter<S>*> parameters() {
        std::vector<Parameter<S>*> out;
        encoder.collect(out);
        decoder.collect(out);
        return out;
    }

    Tensor<S> encode(const Tensor<S>& frames) const { return encoder.forward(frames); }

    // Target embedding first, then source; fixed order for checkpoint
    // compatibility.
    DecodeResult<S> decode(const Tensor<S>& target_emb, const Tensor<S>& source_emb) const {
        if (target_emb.rank() != 2 || source_emb.rank() != 2 || target_emb.dim(1) != config.embedding_dim ||
            source_emb.dim(1) != config.embedding_dim)
            throw ShapeError("decode: embeddings must be [B," + std::to_string(config.embedding_dim) +
                             "], got " + shape_str(target_emb.shape()) + " and " + shape_str(source_emb.shape()));
        return decoder.forward(concat_cols(target_emb, source_emb));
    }

    Reconstruction<S> reconstruct_single(const Tensor<S>& source, const Tensor<S>& target) const {
        return reconstruct_multi({source}, target);
    }

    // Warps every source toward the target and fuses the warps with
    // per-pixel softmax weights over the predicted confidences. With a
    // single source the weight is the constant 1, so the multi-source loss
    // degenerates exactly to the single-source loss.
    Reconstruction<S> reconstruct_multi(const std::vector<Tensor<S>>& sources, const Tensor<S>& target) const {
        if (sources.empty()) throw ValueError("reconstruct: empty source list");
        const Tensor<S> target_emb = encode(target);
        std::vector<Tensor<S>> warped;
        std::vector<Tensor<S>> conf;
        warped.reserve(sources.size());
        for (const auto& src : sources) {
            const Tensor<S> src_emb = encode(src);
            DecodeResult<S> dec = decode(target_emb, src_emb);
            warped.push_back(grid_sample(src, dec.flow));
            if (decoder.with_confidence) {
                conf.push_back(*dec.confidence);
            } else if (sources.size() > 1) {
                throw StateError("reconstruct: model has no confidence head but got " +
                                 std::to_string(sources.size()) + " sources");
            }
        }

        Reconstruction<S> out;
        if (warped.size() == 1 && !decoder.with_confidence) {
            out.generated = warped[0];
        } else {
            out.confidences = conf;
            std::vector<Tensor<S>> weights = softmax_weights(conf);
            Tensor<S> fused = scale_channels(warped[0], weights[0]);
            for (size_t i = 1; i < warped.size(); ++i)
                fused = add(fused, scale_channels(warped[i], weights[i]));
            out.generated = fused;
        }
        out.per_sample_loss = per_sample_mean(abs(sub(out.generated, target)));
        out.loss = mean(out.per_sample_loss);
        return out;
    }
};

using Modelf = Model<float>;
using Modeld = Model<double>;

}  // namespace faceflow
