#pragma once

// Checkpoints: a directory of STF payloads plus a manifest recording the
// stage, step, config digest, the full resolved training config and the
// weight digests of everything frozen. Loading then saving reproduces the
// STF payloads byte for byte.

#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "satd/common.hpp"
#include "satd/config.hpp"
#include "satd/encoders.hpp"
#include "satd/stf.hpp"

namespace satd {

struct Checkpoint {
    std::string stage;
    std::uint64_t step = 0;
    std::string config_digest;
    nlohmann::json config;  // resolved config of the producing run
    std::map<std::string, std::string> weight_digests;
    std::map<std::string, Tensor> tensors;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "weights");
    nlohmann::json files = nlohmann::json::object();
    for (const auto& [name, tensor] : ckpt.tensors) {
        const std::string file = cat("weights/", name, ".stf");
        stf_write(dir / file, tensor);
        files[name] = file;
    }
    nlohmann::json j = {{"format", "satd-checkpoint-v1"},
                        {"stage", ckpt.stage},
                        {"step", ckpt.step},
                        {"config_digest", ckpt.config_digest},
                        {"config", ckpt.config},
                        {"weight_digests", ckpt.weight_digests},
                        {"tensors", files}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out)
        throw IoError(cat("checkpoint: cannot write '", (dir / "manifest.json").string(), "'"));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw IoError(cat("checkpoint: cannot open '", (dir / "manifest.json").string(), "'"));
    nlohmann::json j;
    in >> j;
    Checkpoint ckpt;
    ckpt.stage = j.at("stage").get<std::string>();
    ckpt.step = j.at("step").get<std::uint64_t>();
    ckpt.config_digest = j.at("config_digest").get<std::string>();
    ckpt.config = j.at("config");
    for (const auto& [k, v] : j.at("weight_digests").items())
        ckpt.weight_digests[k] = v.get<std::string>();
    for (const auto& [name, file] : j.at("tensors").items())
        ckpt.tensors[name] = stf_read(dir / file.get<std::string>());
    return ckpt;
}

// Encoder weight export/import in the same STF-directory layout. Loading
// replaces the seeded initialization; the weight digest then reflects the
// imported values.
inline void save_encoder_weights(const std::filesystem::path& dir, const Encoder& enc) {
    std::filesystem::create_directories(dir);
    const auto weights = enc.weights();
    for (std::size_t i = 0; i < weights.size(); ++i)
        stf_write(dir / cat("w", i, ".stf"), *weights[i]);
}

inline void load_encoder_weights(const std::filesystem::path& dir, Encoder& enc) {
    auto weights = enc.weights_mutable();
    for (std::size_t i = 0; i < weights.size(); ++i) {
        Tensor t = stf_read(dir / cat("w", i, ".stf"));
        if (t.dims() != weights[i]->dims())
            throw IoError(cat("encoder weights: tensor w", i, " has shape ",
                              shape_str(t.dims()), ", expected ",
                              shape_str(weights[i]->dims())));
        weights[i]->mutable_data() = t.data();
    }
}

namespace ckptdetail {

inline void put_projector(Checkpoint& ckpt, VisionProjector& g_v) {
    auto& blocks = g_v.blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        ckpt.tensors[cat("gv_block", i, "_w_in")] = blocks[i].w_in.detach();
        ckpt.tensors[cat("gv_block", i, "_w_ctx")] = blocks[i].w_ctx.detach();
        ckpt.tensors[cat("gv_block", i, "_bias")] = blocks[i].bias.detach();
        ckpt.tensors[cat("gv_block", i, "_w_out")] = blocks[i].w_out.detach();
    }
    ckpt.tensors["gv_head_distill_w"] = g_v.head_distill_w().detach();
    ckpt.tensors["gv_head_distill_b"] = g_v.head_distill_b().detach();
    ckpt.tensors["gv_head_token_w"] = g_v.head_token_w().detach();
    ckpt.tensors["gv_head_token_b"] = g_v.head_token_b().detach();
}

inline void assign(Tensor& dst, const Tensor& src, const char* name) {
    if (dst.dims() != src.dims())
        throw IoError(cat("checkpoint: tensor '", name, "' has shape ", shape_str(src.dims()),
                          ", expected ", shape_str(dst.dims())));
    dst.mutable_data() = src.data();
}

inline void take_projector(const Checkpoint& ckpt, VisionProjector& g_v) {
    auto need = [&](const std::string& name) -> const Tensor& {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end())
            throw IoError(cat("checkpoint: missing tensor '", name, "'"));
        return it->second;
    };
    auto& blocks = g_v.blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        assign(blocks[i].w_in, need(cat("gv_block", i, "_w_in")), "gv_block_w_in");
        assign(blocks[i].w_ctx, need(cat("gv_block", i, "_w_ctx")), "gv_block_w_ctx");
        assign(blocks[i].bias, need(cat("gv_block", i, "_bias")), "gv_block_bias");
        assign(blocks[i].w_out, need(cat("gv_block", i, "_w_out")), "gv_block_w_out");
    }
    assign(g_v.head_distill_w(), need("gv_head_distill_w"), "gv_head_distill_w");
    assign(g_v.head_distill_b(), need("gv_head_distill_b"), "gv_head_distill_b");
    assign(g_v.head_token_w(), need("gv_head_token_w"), "gv_head_token_w");
    assign(g_v.head_token_b(), need("gv_head_token_b"), "gv_head_token_b");
}

}  // namespace ckptdetail

}  // namespace satd
