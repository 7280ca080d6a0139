#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedlora/common.hpp"
#include "fedlora/ops.hpp"
#include "fedlora/rng.hpp"
#include "fedlora/tensor_io.hpp"

namespace fedlora {

enum class EncoderArch { kMlp, kTinyConv };

inline EncoderArch parse_encoder_arch(const std::string& tag) {
    if (tag == "mlp") return EncoderArch::kMlp;
    if (tag == "tinyconv") return EncoderArch::kTinyConv;
    throw ConfigError("unknown encoder architecture tag '" + tag + "' (expected mlp or tinyconv)");
}

inline std::string encoder_arch_name(EncoderArch arch) {
    return arch == EncoderArch::kMlp ? "mlp" : "tinyconv";
}

struct EncoderConfig {
    EncoderArch arch = EncoderArch::kMlp;
    std::size_t image_size = 16;
    std::size_t channels = 1;
    std::size_t feature_dim = 64;  // shared across heterogeneous encoders
    std::size_t mlp_hidden = 48;
    std::size_t conv_channels1 = 12;
    std::size_t conv_channels2 = 24;

    std::size_t pixel_count() const { return image_size * image_size * channels; }

    void validate() const {
        if (feature_dim == 0 || image_size == 0 || channels == 0)
            throw ConfigError("encoder: dimensions must be positive");
        if (arch == EncoderArch::kTinyConv && image_size % 8 != 0)
            throw ConfigError("encoder: tinyconv needs image_size divisible by 8");
        if (arch == EncoderArch::kMlp && mlp_hidden == 0) throw ConfigError("encoder: mlp_hidden must be positive");
    }
};

namespace detail {

inline ad::Tensor xavier(ad::Tape& tape, Rng& rng, ad::Shape shape) {
    const std::size_t fan_out = shape[0], fan_in = shape[1];
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(ad::shape_numel(shape));
    for (auto& x : v) x = sigma * rng.normal();
    return ad::Tensor::param(tape, std::move(shape), std::move(v));
}

inline ad::Tensor zeros_param(ad::Tape& tape, std::size_t n) {
    return ad::Tensor::param(tape, {n}, std::vector<double>(n, 0.0));
}

inline ad::Tensor ones_param(ad::Tape& tape, std::size_t n) {
    return ad::Tensor::param(tape, {n}, std::vector<double>(n, 1.0));
}

// Non-overlapping patch extraction on a channels-last layout:
// [B, H, W, C] -> [B*(H/p)*(W/p), p*p*C]
inline ad::Tensor extract_patches(const ad::Tensor& x, std::size_t p) {
    const std::size_t bs = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t gh = h / p, gw = w / p;
    ad::Tensor r = ad::reshape(x, {bs, gh, p, gw, p, c});
    r = ad::permute(r, {0, 1, 3, 2, 4, 5});
    return ad::reshape(r, {bs * gh * gw, p * p * c});
}

}  // namespace detail

// Client-side feature extractor. Both archetypes end with a projection to the
// common feature_dim followed by layer normalization, so feature sets from
// heterogeneous clients are interchangeable at the generator boundary.
class SmallEncoder {
public:
    SmallEncoder() = default;

    static SmallEncoder create(const EncoderConfig& cfg, ad::Tape& tape, Rng& rng) {
        cfg.validate();
        SmallEncoder enc;
        enc.cfg_ = cfg;
        const std::size_t d = cfg.feature_dim;
        if (cfg.arch == EncoderArch::kMlp) {
            const std::size_t h = cfg.mlp_hidden;
            enc.tensors_ = {detail::xavier(tape, rng, {h, cfg.pixel_count()}),
                            detail::zeros_param(tape, h),
                            detail::xavier(tape, rng, {h, h}),
                            detail::zeros_param(tape, h),
                            detail::xavier(tape, rng, {d, h}),
                            detail::zeros_param(tape, d),
                            detail::ones_param(tape, d),
                            detail::zeros_param(tape, d)};
        } else {
            const std::size_t c1 = cfg.conv_channels1, c2 = cfg.conv_channels2;
            const std::size_t g2 = cfg.image_size / 8;
            enc.tensors_ = {detail::xavier(tape, rng, {c1, 16 * cfg.channels}),
                            detail::zeros_param(tape, c1),
                            detail::xavier(tape, rng, {c2, 4 * c1}),
                            detail::zeros_param(tape, c2),
                            detail::xavier(tape, rng, {d, g2 * g2 * c2}),
                            detail::zeros_param(tape, d),
                            detail::ones_param(tape, d),
                            detail::zeros_param(tape, d)};
        }
        return enc;
    }

    // [B, pixels] -> [B, feature_dim]
    ad::Tensor forward(const ad::Tensor& images) const {
        if (images.rank() != 2 || images.dim(1) != cfg_.pixel_count())
            throw ShapeError("encoder: images " + ad::shape_str(images.shape()) + " must be [batch," +
                             std::to_string(cfg_.pixel_count()) + "]");
        const std::size_t bs = images.dim(0);
        ad::Tensor feats;
        if (cfg_.arch == EncoderArch::kMlp) {
            ad::Tensor x = ad::relu(ad::linear(images, tensors_[0], tensors_[1]));
            x = ad::relu(ad::linear(x, tensors_[2], tensors_[3]));
            feats = ad::linear(x, tensors_[4], tensors_[5]);
        } else {
            const std::size_t hw = cfg_.image_size, c = cfg_.channels;
            const std::size_t c1 = cfg_.conv_channels1, c2 = cfg_.conv_channels2;
            const std::size_t g1 = hw / 4, g2 = hw / 8;
            ad::Tensor x = ad::permute(ad::reshape(images, {bs, c, hw, hw}), {0, 2, 3, 1});
            x = ad::relu(ad::linear(detail::extract_patches(x, 4), tensors_[0], tensors_[1]));
            x = ad::reshape(x, {bs, g1, g1, c1});
            x = ad::relu(ad::linear(detail::extract_patches(x, 2), tensors_[2], tensors_[3]));
            x = ad::reshape(x, {bs, g2 * g2 * c2});
            feats = ad::linear(x, tensors_[4], tensors_[5]);
        }
        return ad::layer_norm(feats, tensors_[6], tensors_[7]);
    }

    std::vector<ad::Tensor> parameters() const { return tensors_; }

    SmallEncoder frozen_clone() const {
        SmallEncoder enc;
        enc.cfg_ = cfg_;
        enc.tensors_.reserve(tensors_.size());
        for (const auto& t : tensors_) enc.tensors_.push_back(t.detached());
        return enc;
    }

    bool defined() const { return !tensors_.empty(); }
    const EncoderConfig& config() const { return cfg_; }

private:
    EncoderConfig cfg_;
    std::vector<ad::Tensor> tensors_;
};

// Linear map from encoder features to the flattened adapter vector. This is
// the only learnable object that ever leaves a client.
class ParameterGenerator {
public:
    ParameterGenerator() = default;

    static ParameterGenerator create(std::size_t feature_dim, std::size_t out_len, std::uint64_t seed,
                                     ad::Tape& tape) {
        ParameterGenerator gen;
        gen.seed_ = seed;
        Rng rng(mix_seed(seed, "generator_init"));
        std::vector<double> w(out_len * feature_dim);
        for (auto& x : w) x = 1e-3 * rng.normal();  // near-zero start: backbone begins effectively frozen
        gen.weight_ = ad::Tensor::param(tape, {out_len, feature_dim}, std::move(w));
        gen.bias_ = ad::Tensor::param(tape, {out_len}, std::vector<double>(out_len, 0.0));
        return gen;
    }

    static ParameterGenerator from_tensors(ad::Tensor weight, ad::Tensor bias, std::uint64_t seed) {
        if (weight.rank() != 2 || bias.rank() != 1 || weight.dim(0) != bias.dim(0))
            throw ShapeError("generator: weight " + ad::shape_str(weight.shape()) + " / bias " +
                             ad::shape_str(bias.shape()) + " mismatch");
        ParameterGenerator gen;
        gen.weight_ = std::move(weight);
        gen.bias_ = std::move(bias);
        gen.seed_ = seed;
        return gen;
    }

    // [B, feature_dim] -> [B, out_len]; affine in the features.
    ad::Tensor forward(const ad::Tensor& feats) const {
        if (feats.rank() != 2 || feats.dim(1) != feature_dim())
            throw ShapeError("generator: features " + ad::shape_str(feats.shape()) + " must be [batch," +
                             std::to_string(feature_dim()) + "]");
        return ad::linear(feats, weight_, bias_);
    }

    std::vector<ad::Tensor> parameters() const { return {weight_, bias_}; }

    ParameterGenerator frozen_clone() const {
        ParameterGenerator gen;
        gen.weight_ = weight_.detached();
        gen.bias_ = bias_.detached();
        gen.seed_ = seed_;
        return gen;
    }

    bool defined() const { return weight_.defined(); }
    std::size_t feature_dim() const { return weight_.dim(1); }
    std::size_t out_len() const { return weight_.dim(0); }
    std::uint64_t seed() const { return seed_; }
    const ad::Tensor& weight() const { return weight_; }
    const ad::Tensor& bias() const { return bias_; }

    nlohmann::ordered_json manifest() const {
        nlohmann::ordered_json m;
        m["feature_dim"] = feature_dim();
        m["out_len"] = out_len();
        m["seed"] = seed_;
        return m;
    }

    // Wire format: manifest JSON line, then weight and bias blobs.
    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        const std::string header = manifest().dump();
        append_u64le(out, header.size());
        out.insert(out.end(), header.begin(), header.end());
        ad::append_tensor_blob(out, weight_);
        ad::append_tensor_blob(out, bias_);
        return out;
    }

    static ParameterGenerator deserialize(const std::vector<std::uint8_t>& bytes, std::size_t& offset) {
        if (offset + 8 > bytes.size()) throw ContractError("generator: truncated manifest length");
        const std::uint64_t hlen = read_u64le(&bytes[offset]);
        offset += 8;
        if (offset + hlen > bytes.size()) throw ContractError("generator: truncated manifest");
        const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(offset + hlen));
        offset += hlen;
        auto m = nlohmann::json::parse(header);
        ad::Tensor w = ad::read_tensor_blob(bytes, offset);
        ad::Tensor b = ad::read_tensor_blob(bytes, offset);
        ParameterGenerator gen = from_tensors(std::move(w), std::move(b), m.at("seed"));
        if (gen.feature_dim() != m.at("feature_dim").get<std::size_t>() ||
            gen.out_len() != m.at("out_len").get<std::size_t>())
            throw ContractError("generator: manifest does not match tensor shapes");
        return gen;
    }

private:
    ad::Tensor weight_;
    ad::Tensor bias_;
    std::uint64_t seed_ = 0;
};

// Per-client classification head; grows by appending rows at task boundaries
// and is never uploaded.
class ClassifierHead {
public:
    ClassifierHead() = default;

    static ClassifierHead create(std::size_t input_dim, ad::Tape& tape) {
        ClassifierHead head;
        head.input_dim_ = input_dim;
        head.tape_ = &tape;
        return head;
    }

    std::size_t num_classes() const { return weight_.defined() ? weight_.dim(0) : 0; }
    std::size_t input_dim() const { return input_dim_; }

    // Appends rows for new classes; existing rows keep their trained values
    // and stay trainable.
    void extend(std::size_t new_total, Rng& rng) {
        const std::size_t old = num_classes();
        if (new_total <= old) throw ContractError("head: extend must grow the class count");
        std::vector<double> w(new_total * input_dim_, 0.0);
        std::vector<double> b(new_total, 0.0);
        if (old > 0) {
            std::copy(weight_.data().begin(), weight_.data().end(), w.begin());
            std::copy(bias_.data().begin(), bias_.data().end(), b.begin());
        }
        for (std::size_t i = old * input_dim_; i < w.size(); ++i) w[i] = 0.01 * rng.normal();
        weight_ = ad::Tensor::param(*tape_, {new_total, input_dim_}, std::move(w));
        bias_ = ad::Tensor::param(*tape_, {new_total}, std::move(b));
    }

    ad::Tensor forward(const ad::Tensor& feats) const {
        if (num_classes() == 0) throw ContractError("head: no classes registered");
        return ad::linear(feats, weight_, bias_);
    }

    std::vector<ad::Tensor> parameters() const {
        if (num_classes() == 0) return {};
        return {weight_, bias_};
    }

    const ad::Tensor& weight() const { return weight_; }
    const ad::Tensor& bias() const { return bias_; }

private:
    std::size_t input_dim_ = 0;
    ad::Tape* tape_ = nullptr;
    ad::Tensor weight_;
    ad::Tensor bias_;
};

struct SmallModelBundle {
    SmallEncoder encoder;
    ParameterGenerator generator;
    ClassifierHead head;
};

inline SmallModelBundle init_small_model(EncoderArch arch, std::uint64_t seed, ad::Tape& tape,
                                         EncoderConfig enc_cfg, std::size_t generator_out_len,
                                         std::size_t head_input_dim) {
    enc_cfg.arch = arch;
    Rng enc_rng(mix_seed(seed, "encoder_init"));
    SmallModelBundle bundle;
    bundle.encoder = SmallEncoder::create(enc_cfg, tape, enc_rng);
    bundle.generator = ParameterGenerator::create(enc_cfg.feature_dim, generator_out_len, seed, tape);
    bundle.head = ClassifierHead::create(head_input_dim, tape);
    return bundle;
}

}  // namespace fedlora
