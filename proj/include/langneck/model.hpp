#pragma once

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "langneck/common.hpp"
#include "langneck/data.hpp"
#include "langneck/io.hpp"
#include "langneck/rng.hpp"
#include "langneck/tensor.hpp"
#include "langneck/vocab.hpp"

namespace langneck {

struct ModelConfig {
    std::size_t vocab_size = 59;
    std::size_t dim = 64;
    std::size_t enc_blocks = 2;
    std::size_t dec_blocks = 2;
    std::size_t heads = 4;
    std::size_t n_prompt = 8;
    std::size_t patch = 4;
    std::size_t image = 32;
    std::size_t classes = 16;
    std::size_t mlp_ratio = 4;
    bool bos_prefix = false;  // feed an embedded BOS before the soft prompt

    std::size_t patches_per_side() const { return image / patch; }
    std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const { return patch * patch * 3; }
    // longest decoder sequence: optional BOS + prompt + fed-back tokens
    std::size_t max_seq() const { return 2 * n_prompt + 1; }

    bool operator==(const ModelConfig&) const = default;

    std::string to_string() const {
        std::ostringstream os;
        os << "vocab_size=" << vocab_size << ";dim=" << dim << ";enc_blocks=" << enc_blocks
           << ";dec_blocks=" << dec_blocks << ";heads=" << heads << ";n_prompt=" << n_prompt
           << ";patch=" << patch << ";image=" << image << ";classes=" << classes
           << ";mlp_ratio=" << mlp_ratio << ";bos_prefix=" << (bos_prefix ? 1 : 0);
        return os.str();
    }

    static ModelConfig from_string(const std::string& s) {
        ModelConfig cfg;
        std::istringstream is(s);
        std::string item;
        while (std::getline(is, item, ';')) {
            auto eq = item.find('=');
            if (eq == std::string::npos) throw FormatError("bad model config entry: " + item);
            const std::string key = item.substr(0, eq);
            const std::uint64_t val = std::stoull(item.substr(eq + 1));
            if (key == "vocab_size") cfg.vocab_size = val;
            else if (key == "dim") cfg.dim = val;
            else if (key == "enc_blocks") cfg.enc_blocks = val;
            else if (key == "dec_blocks") cfg.dec_blocks = val;
            else if (key == "heads") cfg.heads = val;
            else if (key == "n_prompt") cfg.n_prompt = val;
            else if (key == "patch") cfg.patch = val;
            else if (key == "image") cfg.image = val;
            else if (key == "classes") cfg.classes = val;
            else if (key == "mlp_ratio") cfg.mlp_ratio = val;
            else if (key == "bos_prefix") cfg.bos_prefix = val != 0;
            else throw FormatError("unknown model config key: " + key);
        }
        return cfg;
    }
};

struct AttentionParams {
    Tensor wq, wk, wv, wo;  // each dim x dim
    Tensor bq, bk, bv, bo;  // each dim
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    AttentionParams self_attn;
    std::optional<AttentionParams> cross_attn;  // decoder blocks only
    Tensor lnc_g, lnc_b;                        // defined iff cross_attn
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// All learnable arrays. After warm-up the encoder, decoder and embedding
// matrix are frozen; only soft_prompt and the head train.
struct ModelParams {
    ModelConfig cfg;
    Tensor patch_proj, patch_bias, enc_pos;
    std::vector<BlockParams> enc_blocks;
    Tensor enc_ln_g, enc_ln_b;
    Tensor embed;  // E: V x d, output projection is weight-tied to it
    Tensor dec_pos;
    std::vector<BlockParams> dec_blocks;
    Tensor dec_ln_g, dec_ln_b;
    Tensor soft_prompt;       // n x d, trainable
    Tensor head_w, head_b;    // C x d and C, trainable

    std::vector<std::pair<std::string, Tensor>> named() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto block = [&](const std::string& prefix, const BlockParams& b) {
            auto attn = [&](const std::string& ap, const AttentionParams& a) {
                out.emplace_back(ap + ".wq", a.wq);
                out.emplace_back(ap + ".wk", a.wk);
                out.emplace_back(ap + ".wv", a.wv);
                out.emplace_back(ap + ".wo", a.wo);
                out.emplace_back(ap + ".bq", a.bq);
                out.emplace_back(ap + ".bk", a.bk);
                out.emplace_back(ap + ".bv", a.bv);
                out.emplace_back(ap + ".bo", a.bo);
            };
            out.emplace_back(prefix + ".ln1.g", b.ln1_g);
            out.emplace_back(prefix + ".ln1.b", b.ln1_b);
            attn(prefix + ".attn", b.self_attn);
            if (b.cross_attn) {
                out.emplace_back(prefix + ".lnc.g", b.lnc_g);
                out.emplace_back(prefix + ".lnc.b", b.lnc_b);
                attn(prefix + ".cross", *b.cross_attn);
            }
            out.emplace_back(prefix + ".ln2.g", b.ln2_g);
            out.emplace_back(prefix + ".ln2.b", b.ln2_b);
            out.emplace_back(prefix + ".mlp.w1", b.mlp_w1);
            out.emplace_back(prefix + ".mlp.b1", b.mlp_b1);
            out.emplace_back(prefix + ".mlp.w2", b.mlp_w2);
            out.emplace_back(prefix + ".mlp.b2", b.mlp_b2);
        };
        out.emplace_back("enc.patch_proj", patch_proj);
        out.emplace_back("enc.patch_bias", patch_bias);
        out.emplace_back("enc.pos", enc_pos);
        for (std::size_t i = 0; i < enc_blocks.size(); ++i)
            block("enc.block" + std::to_string(i), enc_blocks[i]);
        out.emplace_back("enc.ln.g", enc_ln_g);
        out.emplace_back("enc.ln.b", enc_ln_b);
        out.emplace_back("dec.embed", embed);
        out.emplace_back("dec.pos", dec_pos);
        for (std::size_t i = 0; i < dec_blocks.size(); ++i)
            block("dec.block" + std::to_string(i), dec_blocks[i]);
        out.emplace_back("dec.ln.g", dec_ln_g);
        out.emplace_back("dec.ln.b", dec_ln_b);
        out.emplace_back("soft_prompt", soft_prompt);
        out.emplace_back("head.w", head_w);
        out.emplace_back("head.b", head_b);
        return out;
    }

    std::vector<Tensor> trainable() const { return {soft_prompt, head_w, head_b}; }

    std::vector<std::pair<std::string, Tensor>> backbone() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (auto& [name, t] : named())
            if (name != "soft_prompt" && name != "head.w" && name != "head.b")
                out.emplace_back(name, t);
        return out;
    }

    void set_backbone_requires_grad(bool rg) {
        for (auto& [name, t] : backbone()) const_cast<Tensor&>(t).set_requires_grad(rg);
    }
    void freeze_backbone() { set_backbone_requires_grad(false); }

    void zero_grads() {
        for (auto& [name, t] : named()) const_cast<Tensor&>(t).zero_grad();
    }
};

namespace detail {

inline AttentionParams init_attention(std::size_t d, Rng& rng) {
    const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
    AttentionParams a;
    a.wq = Tensor::randn({d, d}, rng, sigma);
    a.wk = Tensor::randn({d, d}, rng, sigma);
    a.wv = Tensor::randn({d, d}, rng, sigma);
    a.wo = Tensor::randn({d, d}, rng, sigma);
    a.bq = Tensor({d}, 0.0);
    a.bk = Tensor({d}, 0.0);
    a.bv = Tensor({d}, 0.0);
    a.bo = Tensor({d}, 0.0);
    return a;
}

inline BlockParams init_block(const ModelConfig& cfg, Rng& rng, bool with_cross) {
    BlockParams b;
    const std::size_t d = cfg.dim, m = cfg.dim * cfg.mlp_ratio;
    b.ln1_g = Tensor({d}, 1.0);
    b.ln1_b = Tensor({d}, 0.0);
    b.self_attn = init_attention(d, rng);
    if (with_cross) {
        b.lnc_g = Tensor({d}, 1.0);
        b.lnc_b = Tensor({d}, 0.0);
        b.cross_attn = init_attention(d, rng);
    }
    b.ln2_g = Tensor({d}, 1.0);
    b.ln2_b = Tensor({d}, 0.0);
    b.mlp_w1 = Tensor::randn({d, m}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    b.mlp_b1 = Tensor({m}, 0.0);
    b.mlp_w2 = Tensor::randn({m, d}, rng, 1.0 / std::sqrt(static_cast<double>(m)));
    b.mlp_b2 = Tensor({d}, 0.0);
    return b;
}

}  // namespace detail

inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.image % cfg.patch != 0) throw DimError("image size not divisible by patch size");
    if (cfg.dim % cfg.heads != 0) throw DimError("dim not divisible by head count");
    Rng rng(derive_seed(seed, "model-init"));
    // Xavier-style 1/sqrt(fan_in) for weight matrices (plain SGD needs the
    // signal path alive at init); small additive scale for positions.
    const double pos_sigma = 0.02;
    ModelParams p;
    p.cfg = cfg;
    p.patch_proj = Tensor::randn({cfg.patch_dim(), cfg.dim}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
    p.patch_bias = Tensor({cfg.dim}, 0.0);
    p.enc_pos = Tensor::randn({cfg.num_patches(), cfg.dim}, rng, pos_sigma);
    for (std::size_t i = 0; i < cfg.enc_blocks; ++i)
        p.enc_blocks.push_back(detail::init_block(cfg, rng, false));
    p.enc_ln_g = Tensor({cfg.dim}, 1.0);
    p.enc_ln_b = Tensor({cfg.dim}, 0.0);
    p.embed = Tensor::randn({cfg.vocab_size, cfg.dim}, rng,
                            1.0 / std::sqrt(static_cast<double>(cfg.dim)));
    p.dec_pos = Tensor::randn({cfg.max_seq(), cfg.dim}, rng, pos_sigma);
    for (std::size_t i = 0; i < cfg.dec_blocks; ++i)
        p.dec_blocks.push_back(detail::init_block(cfg, rng, true));
    p.dec_ln_g = Tensor({cfg.dim}, 1.0);
    p.dec_ln_b = Tensor({cfg.dim}, 0.0);
    p.soft_prompt = Tensor::randn({cfg.n_prompt, cfg.dim}, rng, 0.02, true);
    // zero head: with the modest pinned head learning rate, a random-init
    // head's noise dominates the accumulated signal and training stalls
    p.head_w = Tensor({cfg.classes, cfg.dim}, 0.0, true);
    p.head_b = Tensor({cfg.classes}, 0.0, true);
    p.set_backbone_requires_grad(true);  // warm-up trains the backbone
    return p;
}

// ---- forward pieces ----

inline Tensor multi_head_attention(const AttentionParams& a, const Tensor& x_q,
                                   const Tensor& x_kv, std::size_t heads, bool causal) {
    const std::size_t d = x_q.cols();
    const std::size_t dh = d / heads;
    Tensor q = add_rowwise(matmul(x_q, a.wq), a.bq);
    Tensor k = add_rowwise(matmul(x_kv, a.wk), a.bk);
    Tensor v = add_rowwise(matmul(x_kv, a.wv), a.bv);
    Tensor merged;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor out = scaled_dot_attention(slice_cols(q, h * dh, (h + 1) * dh),
                                          slice_cols(k, h * dh, (h + 1) * dh),
                                          slice_cols(v, h * dh, (h + 1) * dh), causal);
        merged = h == 0 ? out : concat_cols(merged, out);
    }
    return add_rowwise(matmul(merged, a.wo), a.bo);
}

// Pre-LN residual block; cross-attention is applied when the block has it
// and a context is supplied.
inline Tensor run_block(const BlockParams& b, Tensor x, const Tensor* context,
                        std::size_t heads, bool causal) {
    Tensor normed = layer_norm(x, b.ln1_g, b.ln1_b);
    x = add(x, multi_head_attention(b.self_attn, normed, normed, heads, causal));
    if (b.cross_attn && context) {
        Tensor cn = layer_norm(x, b.lnc_g, b.lnc_b);
        x = add(x, multi_head_attention(*b.cross_attn, cn, *context, heads, false));
    }
    Tensor mn = layer_norm(x, b.ln2_g, b.ln2_b);
    Tensor h = gelu(add_rowwise(matmul(mn, b.mlp_w1), b.mlp_b1));
    return add(x, add_rowwise(matmul(h, b.mlp_w2), b.mlp_b2));
}

// Non-overlapping patch extraction as a constant T x (patch*patch*3) tensor.
inline Tensor patchify(const ImageSample& img, const ModelConfig& cfg) {
    if (img.pixels.size() != cfg.image * cfg.image * 3)
        throw DimError("image pixel count does not match config");
    const std::size_t side = cfg.patches_per_side(), ps = cfg.patch;
    std::vector<double> data(cfg.num_patches() * cfg.patch_dim());
    std::size_t idx = 0;
    for (std::size_t py = 0; py < side; ++py)
        for (std::size_t px = 0; px < side; ++px)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        // center [0,1] pixels; all-positive inputs badly
                        // condition the patch-projection gradients
                        data[idx++] =
                            2.0 * (img.pixels[((py * ps + y) * cfg.image + px * ps + x) * 3 + c] -
                                   0.5);
    return Tensor::from({cfg.num_patches(), cfg.patch_dim()}, std::move(data));
}

// Vision encoder: patch embedding + position, P blocks, final layer norm.
inline Tensor encode_image(const ModelParams& p, const ImageSample& img) {
    Tensor x = add(add_rowwise(matmul(patchify(img, p.cfg), p.patch_proj), p.patch_bias), p.enc_pos);
    for (const auto& b : p.enc_blocks) x = run_block(b, x, nullptr, p.cfg.heads, false);
    return layer_norm(x, p.enc_ln_g, p.enc_ln_b);
}

// Decoder pass over explicit input embeddings (position added here).
// Returns next-token logits at every position, tied to the embedding matrix.
inline Tensor decode_logits(const ModelParams& p, const Tensor& input_emb, const Tensor* context,
                            std::size_t pos_offset = 0) {
    const std::size_t len = input_emb.rows();
    if (pos_offset + len > p.cfg.max_seq()) throw DimError("decoder sequence too long");
    Tensor x = add(input_emb, slice_rows(p.dec_pos, pos_offset, pos_offset + len));
    for (const auto& b : p.dec_blocks) x = run_block(b, x, context, p.cfg.heads, true);
    x = layer_norm(x, p.dec_ln_g, p.dec_ln_b);
    return matmul(x, transpose(p.embed));
}

// The n bottleneck logits: the decoder consumes the soft prompt under a
// causal mask, cross-attends to the image embeddings, and each prompt
// position emits a next-token distribution.
inline Tensor decode_soft(const ModelParams& p, const Tensor& image_emb) {
    if (p.cfg.n_prompt < 1) throw ArgumentError("decode_soft: n_prompt must be >= 1");
    Tensor input = p.soft_prompt;
    if (p.cfg.bos_prefix)
        input = concat_rows(embedding_lookup(p.embed, {Vocabulary::kBos}), p.soft_prompt);
    Tensor logits = decode_logits(p, input, &image_emb);
    if (p.cfg.bos_prefix) logits = slice_rows(logits, 1, p.cfg.n_prompt + 1);
    return logits;
}

struct BottleneckOutput {
    Tensor logits;                        // n x V
    Tensor soft_words;                    // n x d = softmax(logits) E
    Tensor pooled;                        // d
    std::vector<std::size_t> hard_tokens; // n ids, specials excluded
};

inline std::pair<Tensor, Tensor> soft_bottleneck(const Tensor& logits, const Tensor& embed) {
    if (logits.cols() != embed.rows()) throw DimError("soft_bottleneck: logits width != V");
    Tensor soft_words = matmul(softmax(logits), embed);
    return {soft_words, mean_axis0(soft_words)};
}

// Per-position argmax over non-special tokens; ties break to the lowest id.
inline std::vector<std::size_t> hard_decode(const Tensor& logits,
                                            std::size_t num_special = Vocabulary::kNumSpecial) {
    if (logits.cols() <= num_special) throw ArgumentError("hard_decode: no non-special tokens");
    std::vector<std::size_t> ids(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = num_special;
        for (std::size_t j = num_special + 1; j < logits.cols(); ++j)
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        ids[i] = best;
    }
    return ids;
}

// W pooled + b.
inline Tensor classify(const ModelParams& p, const Tensor& pooled) {
    if (pooled.size() != p.cfg.dim) throw DimError("classify: pooled width != dim");
    Tensor row = reshape(pooled, {1, p.cfg.dim});
    return reshape(add_rowwise(matmul(row, transpose(p.head_w)), p.head_b), {p.cfg.classes});
}

// Fully differentiable path: class logits from the soft bottleneck.
inline std::pair<Tensor, BottleneckOutput> forward_soft(const ModelParams& p, const Tensor& image_emb) {
    BottleneckOutput out;
    out.logits = decode_soft(p, image_emb);
    auto [soft_words, pooled] = soft_bottleneck(out.logits, p.embed);
    out.soft_words = soft_words;
    out.pooled = pooled;
    out.hard_tokens = hard_decode(out.logits);
    return {classify(p, pooled), std::move(out)};
}

// Validation path: argmax tokens, their embedding rows, mean pool, head.
// Not differentiable through the argmax by construction.
inline std::pair<Tensor, std::vector<std::size_t>> forward_hard(const ModelParams& p,
                                                                const Tensor& image_emb) {
    Tensor logits = decode_soft(p, image_emb);
    std::vector<std::size_t> ids = hard_decode(logits);
    Tensor pooled = mean_axis0(embedding_lookup(p.embed, ids));
    return {classify(p, pooled), std::move(ids)};
}

// Greedy autoregressive decoding that masks every previously emitted id
// and all specials before each argmax. The soft prompt stays as a prefix;
// each emitted token's embedding is fed back as the next input position.
inline std::vector<std::size_t> sample_no_repetition(const ModelParams& p, const Tensor& image_emb,
                                                     std::size_t n) {
    const std::size_t v = p.cfg.vocab_size;
    if (n > v - Vocabulary::kNumSpecial)
        throw ArgumentError("sample_no_repetition: n exceeds available non-special tokens");
    std::vector<std::size_t> emitted;
    std::vector<bool> banned(v, false);
    for (std::size_t j = 0; j < Vocabulary::kNumSpecial; ++j) banned[j] = true;

    Tensor prefix = p.soft_prompt;
    if (p.cfg.bos_prefix)
        prefix = concat_rows(embedding_lookup(p.embed, {Vocabulary::kBos}), p.soft_prompt);
    Tensor input = prefix;
    for (std::size_t step = 0; step < n; ++step) {
        Tensor logits = decode_logits(p, input, &image_emb);
        const std::size_t last = logits.rows() - 1;
        std::size_t best = v;
        for (std::size_t j = 0; j < v; ++j) {
            if (banned[j]) continue;
            if (best == v || logits.at(last, j) > logits.at(last, best)) best = j;
        }
        emitted.push_back(best);
        banned[best] = true;
        if (step + 1 < n) input = concat_rows(input, embedding_lookup(p.embed, {best}));
    }
    return emitted;
}

// Greedy caption from the warm-up captioner: starts at BOS, no masking of
// previously emitted words (repeats allowed), specials excluded.
inline std::vector<std::size_t> caption_greedy(const ModelParams& p, const Tensor& image_emb,
                                               std::size_t len) {
    std::vector<std::size_t> emitted;
    Tensor input = embedding_lookup(p.embed, {Vocabulary::kBos});
    for (std::size_t step = 0; step < len; ++step) {
        Tensor logits = decode_logits(p, input, &image_emb);
        const std::size_t last = logits.rows() - 1;
        std::size_t best = Vocabulary::kNumSpecial;
        for (std::size_t j = Vocabulary::kNumSpecial + 1; j < p.cfg.vocab_size; ++j)
            if (logits.at(last, j) > logits.at(last, best)) best = j;
        emitted.push_back(best);
        if (step + 1 < len) input = concat_rows(input, embedding_lookup(p.embed, {best}));
    }
    return emitted;
}

// ---- checkpoint format ----

// Checkpoint: magic "LBCK", u16 version, u64 vocabulary hash, config echo,
// manifest (name, dtype, shape), then named little-endian f32 blobs.
inline std::string serialize_checkpoint(const ModelParams& p, std::uint64_t vocab_hash) {
    ByteWriter w;
    w.bytes("LBCK", 4);
    w.u16(1);
    w.u64(vocab_hash);
    w.str(p.cfg.to_string());
    auto entries = p.named();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (auto& [name, t] : entries) {
        w.str(name);
        w.u8(0);  // dtype f32
        w.u8(static_cast<std::uint8_t>(t.ndim()));
        for (std::size_t dim : t.shape()) w.u32(static_cast<std::uint32_t>(dim));
    }
    for (auto& [name, t] : entries)
        for (double v : t.data()) w.f32(static_cast<float>(v));
    return w.buffer();
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, std::uint64_t vocab_hash) {
    write_file(path, serialize_checkpoint(p, vocab_hash));
}

struct LoadedCheckpoint {
    ModelParams params;
    std::uint64_t vocab_hash = 0;
};

inline LoadedCheckpoint deserialize_checkpoint(std::string bytes) {
    ByteReader r(std::move(bytes));
    r.expect_magic("LBCK", "checkpoint");
    if (std::uint16_t ver = r.u16(); ver != 1)
        throw FormatError("checkpoint: unsupported version " + std::to_string(ver));
    LoadedCheckpoint out;
    out.vocab_hash = r.u64();
    const ModelConfig cfg = ModelConfig::from_string(r.str());
    out.params = init_model(cfg, 0);
    out.params.set_backbone_requires_grad(false);

    auto entries = out.params.named();
    const std::uint32_t count = r.u32();
    if (count != entries.size())
        throw FormatError("checkpoint: manifest lists " + std::to_string(count) +
                          " arrays, expected " + std::to_string(entries.size()));
    for (auto& [name, t] : entries) {
        const std::string got = r.str();
        if (got != name)
            throw FormatError("checkpoint: manifest entry '" + got + "', expected '" + name + "'");
        if (r.u8() != 0) throw FormatError("checkpoint: unsupported dtype for " + name);
        const std::uint8_t nd = r.u8();
        Shape shape(nd);
        for (auto& d : shape) d = r.u32();
        if (shape != t.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
    }
    for (auto& [name, t] : entries)
        for (double& v : const_cast<Tensor&>(t).data()) v = static_cast<double>(r.f32());
    r.expect_end("checkpoint");
    return out;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(read_file(path));
}

}  // namespace langneck
