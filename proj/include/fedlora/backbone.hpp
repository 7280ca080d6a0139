#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedlora/adam.hpp"
#include "fedlora/common.hpp"
#include "fedlora/data.hpp"
#include "fedlora/ops.hpp"
#include "fedlora/rng.hpp"
#include "fedlora/tensor_io.hpp"

namespace fedlora {

struct BackboneConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 1;
    std::size_t embed_dim = 32;
    std::size_t num_blocks = 4;
    std::size_t num_heads = 2;
    std::size_t mlp_ratio = 2;
    std::size_t adapted_block = 3;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("backbone: image_size must be a positive multiple of patch_size");
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0)
            throw ConfigError("backbone: embed_dim must be divisible by num_heads");
        if (num_blocks == 0 || adapted_block >= num_blocks)
            throw ConfigError("backbone: adapted_block must lie in [0, num_blocks)");
        if (mlp_ratio == 0 || lora_rank == 0 || channels == 0)
            throw ConfigError("backbone: mlp_ratio, lora_rank and channels must be positive");
    }

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t pixel_count() const { return image_size * image_size * channels; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t mlp_hidden() const { return embed_dim * mlp_ratio; }
    // flat adapter layout: [A_q | B_q | A_v | B_v], each r*d values
    std::size_t lora_len() const { return 4 * lora_rank * embed_dim; }
    double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
};

// Per-sample low-rank adapter factors for the query and value projections of
// one transformer block. A_* is [r,d], B_* is [d,r]; the additive delta for a
// projection is (alpha/r) * B * A.
struct LoraParams {
    ad::Tensor a_q, b_q, a_v, b_v;

    static LoraParams from_flat(const ad::Tensor& flat, const BackboneConfig& cfg) {
        if (flat.rank() != 1 || flat.numel() != cfg.lora_len())
            throw ShapeError("LoraParams: flat adapter " + ad::shape_str(flat.shape()) + " must be [" +
                             std::to_string(cfg.lora_len()) + "]");
        const std::size_t r = cfg.lora_rank, d = cfg.embed_dim, rd = r * d;
        LoraParams p;
        p.a_q = ad::reshape(ad::slice(flat, 0, 0, rd), {r, d});
        p.b_q = ad::reshape(ad::slice(flat, 0, rd, 2 * rd), {d, r});
        p.a_v = ad::reshape(ad::slice(flat, 0, 2 * rd, 3 * rd), {r, d});
        p.b_v = ad::reshape(ad::slice(flat, 0, 3 * rd, 4 * rd), {d, r});
        return p;
    }
};

// Full additive delta matrix (alpha/r) * B * A for one projection; rank <= r.
inline ad::Tensor lora_delta(const ad::Tensor& a, const ad::Tensor& b, const BackboneConfig& cfg) {
    return ad::scale(ad::matmul(b, a), cfg.lora_scale());
}

struct BackboneBlock {
    ad::Tensor ln1_gain, ln1_bias;
    ad::Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Tensor ln2_gain, ln2_bias;
    ad::Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// The shared foundation model. After build_frozen_backbone returns, every
// tensor is a plain constant: nothing here can ever receive a gradient.
struct FrozenBackbone {
    BackboneConfig config;
    ad::Tensor patch_weight;  // [d, patch_dim]
    ad::Tensor patch_bias;    // [d]
    ad::Tensor cls_token;     // [d]
    ad::Tensor pos_embed;     // [tokens, d]
    std::vector<BackboneBlock> blocks;
    ad::Tensor final_gain, final_bias;

    template <typename Fn>
    void for_each_tensor(Fn&& fn) {
        fn("patch_embed.weight", patch_weight);
        fn("patch_embed.bias", patch_bias);
        fn("cls_token", cls_token);
        fn("pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& blk = blocks[i];
            const std::string p = "block" + std::to_string(i) + ".";
            fn(p + "ln1.gain", blk.ln1_gain);
            fn(p + "ln1.bias", blk.ln1_bias);
            fn(p + "attn.wq", blk.wq);
            fn(p + "attn.bq", blk.bq);
            fn(p + "attn.wk", blk.wk);
            fn(p + "attn.bk", blk.bk);
            fn(p + "attn.wv", blk.wv);
            fn(p + "attn.bv", blk.bv);
            fn(p + "attn.wo", blk.wo);
            fn(p + "attn.bo", blk.bo);
            fn(p + "ln2.gain", blk.ln2_gain);
            fn(p + "ln2.bias", blk.ln2_bias);
            fn(p + "mlp.w1", blk.mlp_w1);
            fn(p + "mlp.b1", blk.mlp_b1);
            fn(p + "mlp.w2", blk.mlp_w2);
            fn(p + "mlp.b2", blk.mlp_b2);
        }
        fn("final_ln.gain", final_gain);
        fn("final_ln.bias", final_bias);
    }

    std::vector<std::pair<std::string, ad::Tensor>> named_tensors() const {
        std::vector<std::pair<std::string, ad::Tensor>> out;
        const_cast<FrozenBackbone*>(this)->for_each_tensor(
            [&](const std::string& name, ad::Tensor& t) { out.emplace_back(name, t); });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_tensors()) n += t.numel();
        return n;
    }

    std::string weights_hash() const {
        Sha256 h;
        for (const auto& [name, t] : named_tensors()) {
            h.update(name.data(), name.size());
            auto blob = ad::tensor_blob(t);
            h.update(blob.data(), blob.size());
        }
        return h.hex_finish();
    }
};

namespace detail {

// [B*T, in] x weight [out,in] -> [B, T, out]
inline ad::Tensor linear_tokens(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
    const std::size_t bs = x.dim(0), t = x.dim(1), in = x.dim(2);
    ad::Tensor flat = ad::reshape(x, {bs * t, in});
    ad::Tensor y = ad::linear(flat, w, b);
    return ad::reshape(y, {bs, t, w.dim(0)});
}

struct LoraBatch {
    ad::Tensor a_q_t, b_q_t, a_v_t, b_v_t;  // pre-permuted for bmm: [B,d,r] / [B,r,d]
};

inline LoraBatch split_lora_batch(const ad::Tensor& lora, const BackboneConfig& cfg) {
    if (lora.rank() != 2 || lora.dim(1) != cfg.lora_len())
        throw ShapeError("adapter batch " + ad::shape_str(lora.shape()) + " must be [batch," +
                         std::to_string(cfg.lora_len()) + "]");
    const std::size_t bs = lora.dim(0), r = cfg.lora_rank, d = cfg.embed_dim, rd = r * d;
    LoraBatch lb;
    lb.a_q_t = ad::permute(ad::reshape(ad::slice(lora, 1, 0, rd), {bs, r, d}), {0, 2, 1});
    lb.b_q_t = ad::permute(ad::reshape(ad::slice(lora, 1, rd, 2 * rd), {bs, d, r}), {0, 2, 1});
    lb.a_v_t = ad::permute(ad::reshape(ad::slice(lora, 1, 2 * rd, 3 * rd), {bs, r, d}), {0, 2, 1});
    lb.b_v_t = ad::permute(ad::reshape(ad::slice(lora, 1, 3 * rd, 4 * rd), {bs, d, r}), {0, 2, 1});
    return lb;
}

// x + (alpha/r) * ((x A^T) B^T), batched per sample
inline ad::Tensor lora_shift(const ad::Tensor& h, const ad::Tensor& a_t, const ad::Tensor& b_t, double sc) {
    return ad::scale(ad::bmm(ad::bmm(h, a_t), b_t), sc);
}

inline ad::Tensor patchify(const ad::Tensor& images, const BackboneConfig& cfg) {
    const std::size_t bs = images.dim(0);
    const std::size_t g = cfg.grid(), p = cfg.patch_size, c = cfg.channels, hw = cfg.image_size;
    ad::Tensor x = ad::reshape(images, {bs, c, g, p, g, p});
    (void)hw;
    x = ad::permute(x, {0, 2, 4, 1, 3, 5});  // [B, gh, gw, C, p, p]
    return ad::reshape(x, {bs * g * g, c * p * p});
}

}  // namespace detail

// Shared forward pass. `lora` (when present) is the [B, lora_len] adapter
// batch injected at config.adapted_block; each sample gets its own delta.
inline ad::Tensor backbone_forward(const FrozenBackbone& bb, const ad::Tensor& images,
                                   const std::optional<ad::Tensor>& lora) {
    const BackboneConfig& cfg = bb.config;
    if (images.rank() != 2 || images.dim(1) != cfg.pixel_count())
        throw ShapeError("backbone: images " + ad::shape_str(images.shape()) + " must be [batch," +
                         std::to_string(cfg.pixel_count()) + "]");
    const std::size_t bs = images.dim(0), d = cfg.embed_dim, t = cfg.tokens();
    const std::size_t nh = cfg.num_heads, dh = d / nh;

    std::optional<detail::LoraBatch> lb;
    if (lora) {
        if (lora->dim(0) != bs) throw ShapeError("backbone: adapter batch size mismatch");
        lb = detail::split_lora_batch(*lora, cfg);
    }

    ad::Tensor patches = detail::patchify(images, cfg);
    ad::Tensor embedded = ad::linear(patches, bb.patch_weight, bb.patch_bias);
    ad::Tensor tokens = ad::reshape(embedded, {bs, cfg.num_patches(), d});
    ad::Tensor cls = ad::add(ad::Tensor::zeros({bs, 1, d}), bb.cls_token);
    tokens = ad::concat({cls, tokens}, 1);
    tokens = ad::add(tokens, bb.pos_embed);

    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    auto to_heads = [&](const ad::Tensor& x) {
        return ad::reshape(ad::permute(ad::reshape(x, {bs, t, nh, dh}), {0, 2, 1, 3}), {bs * nh, t, dh});
    };

    for (std::size_t bi = 0; bi < bb.blocks.size(); ++bi) {
        const BackboneBlock& blk = bb.blocks[bi];
        ad::Tensor h = ad::layer_norm(tokens, blk.ln1_gain, blk.ln1_bias);
        ad::Tensor q = detail::linear_tokens(h, blk.wq, blk.bq);
        ad::Tensor k = detail::linear_tokens(h, blk.wk, blk.bk);
        ad::Tensor v = detail::linear_tokens(h, blk.wv, blk.bv);
        if (lb && bi == cfg.adapted_block) {
            q = ad::add(q, detail::lora_shift(h, lb->a_q_t, lb->b_q_t, cfg.lora_scale()));
            v = ad::add(v, detail::lora_shift(h, lb->a_v_t, lb->b_v_t, cfg.lora_scale()));
        }
        ad::Tensor qh = to_heads(q), kh = to_heads(k), vh = to_heads(v);
        ad::Tensor scores = ad::scale(ad::bmm(qh, ad::permute(kh, {0, 2, 1})), attn_scale);
        ad::Tensor attn = ad::softmax(scores);
        ad::Tensor ctx = ad::bmm(attn, vh);  // [B*nh, T, dh]
        ctx = ad::reshape(ad::permute(ad::reshape(ctx, {bs, nh, t, dh}), {0, 2, 1, 3}), {bs, t, d});
        tokens = ad::add(tokens, detail::linear_tokens(ctx, blk.wo, blk.bo));

        ad::Tensor h2 = ad::layer_norm(tokens, blk.ln2_gain, blk.ln2_bias);
        ad::Tensor m = detail::linear_tokens(h2, blk.mlp_w1, blk.mlp_b1);
        m = ad::gelu(m);
        m = detail::linear_tokens(m, blk.mlp_w2, blk.mlp_b2);
        tokens = ad::add(tokens, m);
    }

    ad::Tensor normed = ad::layer_norm(tokens, bb.final_gain, bb.final_bias);
    return ad::reshape(ad::slice(normed, 1, 0, 1), {bs, d});  // class-token output
}

inline ad::Tensor forward_frozen(const FrozenBackbone& bb, const ad::Tensor& images) {
    return backbone_forward(bb, images, std::nullopt);
}

inline ad::Tensor forward_adapted(const FrozenBackbone& bb, const ad::Tensor& images, const ad::Tensor& lora) {
    return backbone_forward(bb, images, lora);
}

// Single-sample convenience matching the protocol's per-sample adapters.
inline ad::Tensor forward_with_adapter(const FrozenBackbone& bb, const std::vector<double>& image,
                                       const ad::Tensor& lora_flat) {
    ad::Tensor x = ad::Tensor::constant({1, image.size()}, image);
    ad::Tensor lora = ad::reshape(lora_flat, {1, lora_flat.numel()});
    return ad::reshape(forward_adapted(bb, x, lora), {bb.config.embed_dim});
}

// ---------------------------------------------------------------------------
// Construction. There are no real pretrained weights at this scale; instead
// the backbone is briefly trained on a held-out synthetic class pool (fixed
// seed and schedule) and then frozen, so it carries generic features while
// staying exactly reproducible.

namespace detail {

constexpr std::size_t kPretrainClasses = 8;
constexpr std::size_t kPretrainPerClass = 24;
constexpr std::size_t kPretrainSteps = 80;
constexpr std::size_t kPretrainBatch = 16;
constexpr double kPretrainNoise = 1.0;

inline ad::Tensor init_weight(ad::Tape& tape, Rng& rng, ad::Shape shape, double sigma) {
    std::vector<double> v(ad::shape_numel(shape));
    for (auto& x : v) x = sigma * rng.normal();
    return ad::Tensor::param(tape, std::move(shape), std::move(v));
}

inline FrozenBackbone init_backbone(const BackboneConfig& cfg, ad::Tape& tape, Rng& rng) {
    FrozenBackbone bb;
    bb.config = cfg;
    const std::size_t d = cfg.embed_dim, pd = cfg.patch_dim(), mh = cfg.mlp_hidden();
    const double xavier_pd = std::sqrt(2.0 / static_cast<double>(pd + d));
    const double xavier_dd = std::sqrt(2.0 / static_cast<double>(d + d));
    const double xavier_dm = std::sqrt(2.0 / static_cast<double>(d + mh));
    bb.patch_weight = init_weight(tape, rng, {d, pd}, xavier_pd);
    bb.patch_bias = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
    bb.cls_token = init_weight(tape, rng, {d}, 0.02);
    bb.pos_embed = init_weight(tape, rng, {cfg.tokens(), d}, 0.02);
    bb.blocks.resize(cfg.num_blocks);
    for (auto& blk : bb.blocks) {
        blk.ln1_gain = ad::Tensor::param(tape, {d}, std::vector<double>(d, 1.0));
        blk.ln1_bias = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.wq = init_weight(tape, rng, {d, d}, xavier_dd);
        blk.bq = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.wk = init_weight(tape, rng, {d, d}, xavier_dd);
        blk.bk = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.wv = init_weight(tape, rng, {d, d}, xavier_dd);
        blk.bv = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.wo = init_weight(tape, rng, {d, d}, xavier_dd);
        blk.bo = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.ln2_gain = ad::Tensor::param(tape, {d}, std::vector<double>(d, 1.0));
        blk.ln2_bias = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
        blk.mlp_w1 = init_weight(tape, rng, {mh, d}, xavier_dm);
        blk.mlp_b1 = ad::Tensor::param(tape, {mh}, std::vector<double>(mh, 0.0));
        blk.mlp_w2 = init_weight(tape, rng, {d, mh}, xavier_dm);
        blk.mlp_b2 = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
    }
    bb.final_gain = ad::Tensor::param(tape, {d}, std::vector<double>(d, 1.0));
    bb.final_bias = ad::Tensor::param(tape, {d}, std::vector<double>(d, 0.0));
    return bb;
}

}  // namespace detail

inline FrozenBackbone build_frozen_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ad::Tape tape;
    Rng init_rng(mix_seed(seed, "backbone_init"));
    FrozenBackbone bb = detail::init_backbone(cfg, tape, init_rng);

    DatasetConfig pool_cfg;
    pool_cfg.image_size = cfg.image_size;
    pool_cfg.channels = cfg.channels;
    pool_cfg.train_per_class = detail::kPretrainPerClass;
    pool_cfg.test_per_class = 1;
    pool_cfg.noise_scale = detail::kPretrainNoise;
    SyntheticDataset pool(pool_cfg, detail::kPretrainClasses, mix_seed(seed, "pretrain_pool"));

    const std::size_t d = cfg.embed_dim;
    Rng train_rng(mix_seed(seed, "pretrain_steps"));
    ad::Tensor head_w = detail::init_weight(tape, train_rng, {detail::kPretrainClasses, d},
                                            std::sqrt(2.0 / static_cast<double>(d)));
    ad::Tensor head_b = ad::Tensor::param(tape, {detail::kPretrainClasses},
                                          std::vector<double>(detail::kPretrainClasses, 0.0));

    std::vector<ad::Tensor> params = {head_w, head_b};
    bb.for_each_tensor([&](const std::string&, ad::Tensor& t) { params.push_back(t); });
    ad::Adam opt(params, {.lr = 1e-3});

    for (std::size_t step = 0; step < detail::kPretrainSteps; ++step) {
        std::vector<SampleRef> refs(detail::kPretrainBatch);
        for (auto& r : refs)
            r = {train_rng.uniform_index(detail::kPretrainClasses), train_rng.uniform_index(pool_cfg.train_per_class),
                 false};
        auto [images, labels] = make_batch(pool, refs);
        ad::Tensor feats = backbone_forward(bb, images, std::nullopt);
        ad::Tensor loss = ad::mean_all(ad::cross_entropy_logits(ad::linear(feats, head_w, head_b), labels));
        tape.backward(loss);
        opt.step();
    }

    // Freeze: every weight becomes a plain constant detached from the tape.
    bb.for_each_tensor([&](const std::string&, ad::Tensor& t) { t = t.detached(); });
    return bb;
}

// ---------------------------------------------------------------------------
// Checkpoint file: JSON manifest line (config + tensor names/shapes) followed
// by the tensor blobs in manifest order.

inline void save_backbone(const std::string& path, const FrozenBackbone& bb) {
    nlohmann::ordered_json manifest;
    manifest["config"] = {{"image_size", bb.config.image_size},   {"patch_size", bb.config.patch_size},
                          {"channels", bb.config.channels},       {"embed_dim", bb.config.embed_dim},
                          {"num_blocks", bb.config.num_blocks},   {"num_heads", bb.config.num_heads},
                          {"mlp_ratio", bb.config.mlp_ratio},     {"adapted_block", bb.config.adapted_block},
                          {"lora_rank", bb.config.lora_rank},     {"lora_alpha", bb.config.lora_alpha}};
    auto tensors = nlohmann::ordered_json::array();
    for (const auto& [name, t] : bb.named_tensors()) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        tensors.push_back(entry);
    }
    manifest["tensors"] = tensors;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ContractError("save_backbone: cannot open " + path);
    const std::string header = manifest.dump();
    f << header << '\n';
    for (const auto& [name, t] : bb.named_tensors()) {
        auto blob = ad::tensor_blob(t);
        f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    }
}

inline FrozenBackbone load_backbone(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ContractError("load_backbone: cannot open " + path);
    std::string header;
    std::getline(f, header);
    auto manifest = nlohmann::json::parse(header);
    BackboneConfig cfg;
    const auto& jc = manifest.at("config");
    cfg.image_size = jc.at("image_size");
    cfg.patch_size = jc.at("patch_size");
    cfg.channels = jc.at("channels");
    cfg.embed_dim = jc.at("embed_dim");
    cfg.num_blocks = jc.at("num_blocks");
    cfg.num_heads = jc.at("num_heads");
    cfg.mlp_ratio = jc.at("mlp_ratio");
    cfg.adapted_block = jc.at("adapted_block");
    cfg.lora_rank = jc.at("lora_rank");
    cfg.lora_alpha = jc.at("lora_alpha");
    cfg.validate();

    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t offset = 0;

    ad::Tape dummy;
    Rng dummy_rng(0);
    FrozenBackbone bb = detail::init_backbone(cfg, dummy, dummy_rng);
    bb.for_each_tensor([&](const std::string&, ad::Tensor& t) {
        ad::Tensor loaded = ad::read_tensor_blob(bytes, offset);
        if (loaded.shape() != t.shape()) throw ContractError("load_backbone: shape mismatch in " + path);
        t = loaded;
    });
    if (offset != bytes.size()) throw ContractError("load_backbone: trailing bytes in " + path);

    // cross-check manifest order against the canonical tensor order
    std::size_t i = 0;
    for (const auto& [name, t] : bb.named_tensors()) {
        if (manifest.at("tensors").at(i).at("name") != name)
            throw ContractError("load_backbone: manifest order mismatch at " + name);
        ++i;
    }
    return bb;
}

}  // namespace fedlora
