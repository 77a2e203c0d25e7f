#pragma once

// Frozen patch-token encoders for the RGB and multi-spectral inputs, plus the
// trainable vision and text projectors. Encoders are deterministic in
// (weights_seed, input) and never receive gradients; projectors are the only
// trainable modules in either training stage.

#include <string>
#include <vector>

#include "satd/common.hpp"
#include "satd/rng.hpp"
#include "satd/sha256.hpp"
#include "satd/tensor.hpp"

namespace satd {

enum class Modality { rgb, ms };

inline const char* modality_name(Modality m) { return m == Modality::rgb ? "rgb" : "ms"; }

struct EncoderSpec {
    Modality modality = Modality::rgb;
    std::size_t in_channels = 3;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 32;
    std::size_t depth = 1;
    std::uint64_t weights_seed = 0;
};

// Encoder output: one class token plus n patch tokens arranged on a grid.
struct TokenGrid {
    Tensor cls;      // [d]
    Tensor patches;  // [n x d]
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;

    std::size_t n() const { return patches.rows(); }
    std::size_t width() const { return cls.size(); }
};

// Flatten a C x H x W image into patch rows. Row i holds patch i of the
// row-major patch grid, flattened channel-major (c, then y, then x).
inline Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.ndim() != 3)
        throw ShapeError(cat("patchify: expected CxHxW image, got ", shape_str(image.dims())));
    const std::size_t c = image.dims()[0], h = image.dims()[1], w = image.dims()[2];
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError(cat("patchify: image ", h, "x", w, " not divisible by patch size ",
                             patch));
    const std::size_t gr = h / patch, gc = w / patch;
    const std::size_t n = gr * gc, width = c * patch * patch;
    std::vector<double> out(n * width);
    const double* src = image.data().data();
    for (std::size_t py = 0; py < gr; ++py)
        for (std::size_t px = 0; px < gc; ++px) {
            double* row = out.data() + (py * gc + px) * width;
            std::size_t k = 0;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        row[k++] = src[(ch * h + py * patch + y) * w + px * patch + x];
        }
    return Tensor({n, width}, std::move(out));
}

// Mean over patch tokens; the class token is excluded.
inline Tensor pool_patches(const TokenGrid& t) { return mean_rows(t.patches); }

// One residual mixing step: tokens exchange information through the mean
// token (context) and a per-token MLP.
struct MixBlock {
    Tensor w_in;   // d x d
    Tensor w_ctx;  // d x d
    Tensor bias;   // d
    Tensor w_out;  // d x d

    static MixBlock seeded(std::size_t dim, Rng& rng, bool trainable, double out_scale) {
        MixBlock b;
        const double s = 1.0 / std::sqrt(static_cast<double>(dim));
        b.w_in = Tensor::randn({dim, dim}, rng, s, trainable);
        b.w_ctx = Tensor::randn({dim, dim}, rng, s, trainable);
        b.bias = Tensor::randn({dim}, rng, 0.02, trainable);
        b.w_out = Tensor::randn({dim, dim}, rng, s * out_scale, trainable);
        return b;
    }

    Tensor apply(const Tensor& tokens) const {
        Tensor ctx = reshape(mean_rows(tokens), {1, tokens.dims()[1]});
        Tensor pre = add_rowvec(matmul(tokens, w_in), reshape(matmul(ctx, w_ctx), {w_ctx.dims()[1]}));
        Tensor h = tanh_t(add_rowvec(pre, bias));
        return add(tokens, matmul(h, w_out));
    }

    std::vector<Tensor> params() { return {w_in, w_ctx, bias, w_out}; }
    std::vector<const Tensor*> weights() const { return {&w_in, &w_ctx, &bias, &w_out}; }
};

// Frozen stand-in feature extractor: patch embedding, a seeded class token
// and `depth` mixing blocks. All weights have requires_grad == false, so the
// forward pass never enters the autodiff tape.
class Encoder {
  public:
    static Encoder seeded(const EncoderSpec& spec) {
        Encoder e;
        e.spec_ = spec;
        Rng rng(Rng::mix(spec.weights_seed, 0x5A7Du));
        const std::size_t in_width = spec.in_channels * spec.patch_size * spec.patch_size;
        const double s = 1.0 / std::sqrt(static_cast<double>(in_width));
        e.patch_embed_ = Tensor::randn({in_width, spec.embed_dim}, rng, s);
        e.patch_bias_ = Tensor::randn({spec.embed_dim}, rng, 0.02);
        e.cls_token_ = Tensor::randn({spec.embed_dim}, rng, 0.1);
        for (std::size_t i = 0; i < spec.depth; ++i)
            e.blocks_.push_back(MixBlock::seeded(spec.embed_dim, rng, false, 0.5));
        return e;
    }

    const EncoderSpec& spec() const { return spec_; }

    TokenGrid encode(const Tensor& image) const {
        if (image.ndim() != 3 || image.dims()[0] != spec_.in_channels)
            throw ValueError(cat("encode: ", modality_name(spec_.modality), " encoder expects ",
                                 spec_.in_channels, " channels, got image ",
                                 shape_str(image.dims())));
        Tensor p = patchify(image, spec_.patch_size);
        Tensor x = add_rowvec(matmul(p, patch_embed_), patch_bias_);
        Tensor tokens = concat_rows(reshape(cls_token_, {1, spec_.embed_dim}), x);
        for (const auto& b : blocks_) tokens = b.apply(tokens);
        TokenGrid g;
        g.cls = reshape(slice_rows(tokens, 0, 1), {spec_.embed_dim});
        g.patches = slice_rows(tokens, 1, tokens.dims()[0]);
        g.grid_rows = image.dims()[1] / spec_.patch_size;
        g.grid_cols = image.dims()[2] / spec_.patch_size;
        return g;
    }

    std::vector<const Tensor*> weights() const {
        std::vector<const Tensor*> w = {&patch_embed_, &patch_bias_, &cls_token_};
        for (const auto& b : blocks_)
            for (const Tensor* t : b.weights()) w.push_back(t);
        return w;
    }

    std::vector<Tensor*> weights_mutable() {
        std::vector<Tensor*> w = {&patch_embed_, &patch_bias_, &cls_token_};
        for (auto& b : blocks_) {
            w.push_back(&b.w_in);
            w.push_back(&b.w_ctx);
            w.push_back(&b.bias);
            w.push_back(&b.w_out);
        }
        return w;
    }

    std::string weight_digest() const {
        Sha256 h;
        for (const Tensor* t : weights())
            h.update(t->data().data(), t->data().size() * sizeof(double));
        return h.hex_digest();
    }

  private:
    EncoderSpec spec_;
    Tensor patch_embed_;
    Tensor patch_bias_;
    Tensor cls_token_;
    std::vector<MixBlock> blocks_;
};

// Trainable vision projector: two mixing blocks shared by both heads, a
// distillation head producing teacher-space logits from the pooled tokens,
// and a token head projecting every token into the shared alignment space.
class VisionProjector {
  public:
    static VisionProjector seeded(std::size_t in_dim, std::size_t teacher_dim,
                                  std::size_t out_dim, std::uint64_t seed) {
        VisionProjector p;
        p.in_dim_ = in_dim;
        p.teacher_dim_ = teacher_dim;
        p.out_dim_ = out_dim;
        Rng rng(Rng::mix(seed, 0x6A0Bu));
        p.blocks_.push_back(MixBlock::seeded(in_dim, rng, true, 0.01));
        p.blocks_.push_back(MixBlock::seeded(in_dim, rng, true, 0.01));
        const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
        p.head_distill_w_ = Tensor::randn({in_dim, teacher_dim}, rng, s, true);
        p.head_distill_b_ = Tensor::zeros({teacher_dim}, true);
        p.head_token_w_ = Tensor::randn({in_dim, out_dim}, rng, s, true);
        p.head_token_b_ = Tensor::zeros({out_dim}, true);
        return p;
    }

    std::size_t in_dim() const { return in_dim_; }
    std::size_t teacher_dim() const { return teacher_dim_; }
    std::size_t out_dim() const { return out_dim_; }

    // Distillation mode: pooled patches -> trunk -> teacher-space logits.
    Tensor logits(const TokenGrid& t) const {
        check_width("logits", t);
        Tensor pooled = reshape(pool_patches(t), {1, in_dim_});
        for (const auto& b : blocks_) pooled = b.apply(pooled);
        Tensor out = add_rowvec(matmul(pooled, head_distill_w_), head_distill_b_);
        return reshape(out, {teacher_dim_});
    }

    // Alignment mode: every token through the trunk, then the token head.
    TokenGrid tokens(const TokenGrid& t) const {
        check_width("tokens", t);
        Tensor all = concat_rows(reshape(t.cls, {1, in_dim_}), t.patches);
        for (const auto& b : blocks_) all = b.apply(all);
        Tensor out = add_rowvec(matmul(all, head_token_w_), head_token_b_);
        TokenGrid g;
        g.cls = reshape(slice_rows(out, 0, 1), {out_dim_});
        g.patches = slice_rows(out, 1, out.dims()[0]);
        g.grid_rows = t.grid_rows;
        g.grid_cols = t.grid_cols;
        return g;
    }

    std::vector<Tensor> trunk_params() {
        std::vector<Tensor> p;
        for (auto& b : blocks_)
            for (auto& t : b.params()) p.push_back(t);
        return p;
    }

    std::vector<Tensor> distill_params() {
        auto p = trunk_params();
        p.push_back(head_distill_w_);
        p.push_back(head_distill_b_);
        return p;
    }

    std::vector<Tensor> align_params() {
        auto p = trunk_params();
        p.push_back(head_token_w_);
        p.push_back(head_token_b_);
        return p;
    }

    std::vector<Tensor> all_params() {
        auto p = trunk_params();
        p.push_back(head_distill_w_);
        p.push_back(head_distill_b_);
        p.push_back(head_token_w_);
        p.push_back(head_token_b_);
        return p;
    }

    std::vector<MixBlock>& blocks() { return blocks_; }
    Tensor& head_distill_w() { return head_distill_w_; }
    Tensor& head_distill_b() { return head_distill_b_; }
    Tensor& head_token_w() { return head_token_w_; }
    Tensor& head_token_b() { return head_token_b_; }

  private:
    void check_width(const char* what, const TokenGrid& t) const {
        if (t.width() != in_dim_)
            throw ConfigError(cat("vision projector ", what, ": token width ", t.width(),
                                  " does not match configured input width ", in_dim_));
    }

    std::size_t in_dim_ = 0, teacher_dim_ = 0, out_dim_ = 0;
    std::vector<MixBlock> blocks_;
    Tensor head_distill_w_, head_distill_b_;
    Tensor head_token_w_, head_token_b_;
};

// Trainable text projector: a single linear map into the shared space.
class TextProjector {
  public:
    static TextProjector seeded(std::size_t text_dim, std::size_t shared_dim,
                                std::uint64_t seed) {
        TextProjector p;
        Rng rng(Rng::mix(seed, 0x7E27u));
        p.w_ = Tensor::randn({text_dim, shared_dim}, rng,
                             1.0 / std::sqrt(static_cast<double>(text_dim)), true);
        return p;
    }

    Tensor project(const Tensor& pooled) const {
        if (pooled.ndim() != 1 || pooled.size() != w_.dims()[0])
            throw ConfigError(cat("text projector: input ", shape_str(pooled.dims()),
                                  " does not match weight ", shape_str(w_.dims())));
        return reshape(matmul(reshape(pooled, {1, w_.dims()[0]}), w_), {w_.dims()[1]});
    }

    std::vector<Tensor> params() { return {w_}; }
    Tensor& weight() { return w_; }
    std::size_t text_dim() const { return w_.dims()[0]; }
    std::size_t shared_dim() const { return w_.dims()[1]; }

  private:
    Tensor w_;
};

}  // namespace satd
