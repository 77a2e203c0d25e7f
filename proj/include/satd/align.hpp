#pragma once

// Stage-2 training: align visual descriptors with cached text embeddings
// under a symmetric InfoNCE objective. Text embeddings come from an immutable
// bank that is filled once, either from imported files or from the
// deterministic pseudo-embedder; both encoders stay frozen and only the two
// projectors train.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "satd/common.hpp"
#include "satd/encoders.hpp"
#include "satd/optim.hpp"
#include "satd/rng.hpp"
#include "satd/tensor.hpp"

namespace satd {

// Instruction set for instruction-augmented prompts.
inline const std::array<const char*, 5>& instruction_list() {
    static const std::array<const char*, 5> list = {
        "Represent this satellite caption to align with its image",
        "Represent this overhead description for image-text retrieval",
        "Remote sensing caption to match its satellite image",
        "Overhead scene description for image-text alignment",
        "Produce a caption representation suitable for visual search over satellite images",
    };
    return list;
}

inline std::string build_prompt(const std::string& caption, std::size_t instruction_index) {
    const auto& list = instruction_list();
    if (instruction_index >= list.size())
        throw ValueError(cat("build_prompt: instruction index ", instruction_index,
                             " out of range (have ", list.size(), ")"));
    return cat(list[instruction_index], ": ", caption);
}

// Deterministic stand-in for a frozen text encoder: token embeddings are a
// pure function of (seed, whole prompt, token index). Distinct prompts give
// unrelated embeddings; there is no lexical structure to exploit.
inline constexpr std::uint64_t kDefaultPseudoSeed = 0x5EEDFACE;

inline Tensor pseudo_embed(const std::string& prompt, std::size_t d_t, std::size_t k,
                           std::uint64_t seed = kDefaultPseudoSeed) {
    if (d_t == 0 || k == 0) throw ValueError("pseudo_embed: d_t and k must be positive");
    std::vector<double> out(k * d_t);
    const std::uint64_t base = Rng::mix(seed, fnv1a64(prompt));
    for (std::size_t t = 0; t < k; ++t) {
        Rng rng(Rng::mix(base, t));
        for (std::size_t j = 0; j < d_t; ++j) out[t * d_t + j] = rng.normal();
    }
    return Tensor({k, d_t}, std::move(out));
}

struct TextBankEntry {
    Tensor tokens;  // k x d_t, detached
    std::string caption;
    std::string instruction;
};

enum class BankSource { file, pseudo };

// Immutable store of per-prompt token embeddings. Entries are detached at
// insertion so the text path up to the projector can never carry gradient.
class TextBank {
  public:
    TextBank(std::size_t d_t, BankSource source) : d_t_(d_t), source_(source) {}

    void insert(const std::string& prompt_id, Tensor tokens, std::string caption,
                std::string instruction) {
        if (sealed_) throw DataError("text bank: immutable after load");
        if (tokens.ndim() != 2 || tokens.dims()[1] != d_t_)
            throw ShapeError(cat("text bank: tokens for '", prompt_id, "' have shape ",
                                 shape_str(tokens.dims()), ", expected k x ", d_t_));
        entries_.emplace(prompt_id, TextBankEntry{tokens.detach(), std::move(caption),
                                                  std::move(instruction)});
    }

    void seal() { sealed_ = true; }

    const TextBankEntry& at(const std::string& prompt_id) const {
        auto it = entries_.find(prompt_id);
        if (it == entries_.end())
            throw DataError(cat("text bank: unresolved prompt id '", prompt_id, "'"));
        ++lookups_;
        return it->second;
    }

    bool contains(const std::string& prompt_id) const { return entries_.count(prompt_id) > 0; }
    std::size_t size() const { return entries_.size(); }
    std::size_t token_width() const { return d_t_; }
    BankSource source() const { return source_; }
    std::size_t lookup_count() const { return lookups_; }
    void reset_lookup_count() const { lookups_ = 0; }
    const std::map<std::string, TextBankEntry>& entries() const { return entries_; }

  private:
    std::map<std::string, TextBankEntry> entries_;
    std::size_t d_t_;
    BankSource source_;
    bool sealed_ = false;
    mutable std::size_t lookups_ = 0;
};

enum class Split { train, eval };

struct AlignPair {
    std::string image_id;
    std::string prompt_id;
    Split split = Split::train;
};

// [cls ; mean(patches)], length 2 d_v.
inline Tensor visual_descriptor(const TokenGrid& h) {
    if (h.n() == 0) throw ValueError("visual_descriptor: token grid has no patches");
    const std::size_t d = h.width();
    Tensor stacked = concat_rows(reshape(h.cls, {1, d}), reshape(pool_patches(h), {1, d}));
    return reshape(stacked, {2 * d});
}

enum class TextPooling { mean, bos, eos };

inline const char* pooling_name(TextPooling p) {
    switch (p) {
        case TextPooling::mean: return "mean";
        case TextPooling::bos: return "bos";
        case TextPooling::eos: return "eos";
    }
    return "mean";
}

inline TextPooling pooling_from_name(const std::string& s) {
    if (s == "mean") return TextPooling::mean;
    if (s == "bos") return TextPooling::bos;
    if (s == "eos") return TextPooling::eos;
    throw ConfigError(cat("text_pooling: unknown mode '", s, "'"));
}

// Sentence-level representation of a k x d_t token matrix.
inline Tensor pool_text(const Tensor& tokens, TextPooling kind = TextPooling::mean) {
    if (tokens.ndim() != 2 || tokens.dims()[0] == 0)
        throw ValueError(cat("pool_text: expected a non-empty k x d_t matrix, got ",
                             shape_str(tokens.dims())));
    const std::size_t k = tokens.dims()[0], d = tokens.dims()[1];
    switch (kind) {
        case TextPooling::mean: return mean_rows(tokens);
        case TextPooling::bos: return reshape(slice_rows(tokens, 0, 1), {d});
        case TextPooling::eos: return reshape(slice_rows(tokens, k - 1, k), {d});
    }
    return mean_rows(tokens);
}

inline Tensor project_text(const TextProjector& g_t, const Tensor& pooled) {
    return g_t.project(pooled);
}

// Symmetric InfoNCE over matched rows of zv and zt (B x 2d_v each):
// cosine similarities scaled by 1/tau, cross-entropy against the diagonal in
// both directions, averaged.
inline Tensor align_loss(const Tensor& zv, const Tensor& zt, double tau) {
    if (!(tau > 0.0)) throw ValueError(cat("align_loss: tau must be positive, got ", tau));
    if (zv.ndim() != 2 || zt.ndim() != 2 || zv.dims() != zt.dims())
        throw ShapeError(cat("align_loss: embedding batches ", shape_str(zv.dims()), " and ",
                             shape_str(zt.dims()), " must match"));
    if (zv.dims()[0] == 0) throw ValueError("align_loss: empty batch");
    Tensor logits = scale(cosine_sim_matrix(zv, zt), 1.0 / tau);
    Tensor v_to_t = neg(mean_all(take_diag(log_softmax_temp(logits, 1.0))));
    Tensor t_to_v = neg(mean_all(take_diag(log_softmax_temp(transpose(logits), 1.0))));
    return scale(add(v_to_t, t_to_v), 0.5);
}

// One optimizer step over a batch of image/prompt pairs. Vision inputs are
// pre-encoded token grids (the encoder is frozen, so grids are reusable
// constants); only g_v and g_t may be registered with the optimizer.
inline double align_train_step(const std::vector<AlignPair>& batch,
                               const std::map<std::string, TokenGrid>& grids,
                               VisionProjector& g_v, TextProjector& g_t, const TextBank& bank,
                               double tau, TextPooling pooling, AdamW& opt) {
    if (batch.empty()) throw ValueError("align_train_step: empty batch");
    Tensor zv, zt;
    bool first = true;
    for (const AlignPair& pair : batch) {
        auto it = grids.find(pair.image_id);
        if (it == grids.end())
            throw DataError(cat("align_train_step: unresolved image id '", pair.image_id, "'"));
        Tensor v_row = reshape(visual_descriptor(g_v.tokens(it->second)),
                               {1, 2 * g_v.out_dim()});
        Tensor t_row = reshape(
            project_text(g_t, pool_text(bank.at(pair.prompt_id).tokens, pooling)),
            {1, g_t.shared_dim()});
        if (first) {
            zv = v_row;
            zt = t_row;
            first = false;
        } else {
            zv = concat_rows(zv, v_row);
            zt = concat_rows(zt, t_row);
        }
    }
    Tensor loss = align_loss(zv, zt, tau);
    const double value = loss.value();
    if (!std::isfinite(value))
        throw TrainError(cat("align: non-finite loss at optimizer step ", opt.step_count()));
    loss.backward();
    opt.step();
    opt.zero_grad();
    return value;
}

}  // namespace satd
