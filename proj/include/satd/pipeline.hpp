#pragma once

// Stage orchestration behind the CLI: both training loops, the evaluation
// drivers, the probe, and similarity-map export. Every run writes its
// resolved configuration, a metrics stream and (for training stages) a final
// checkpoint into the output directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "satd/align.hpp"
#include "satd/bank_io.hpp"
#include "satd/checkpoint.hpp"
#include "satd/config.hpp"
#include "satd/distill.hpp"
#include "satd/encoders.hpp"
#include "satd/eval.hpp"
#include "satd/parallel.hpp"
#include "satd/pgm.hpp"
#include "satd/synthetic.hpp"
#include "satd/views.hpp"

namespace satd {

namespace fs = std::filesystem;

struct StageResult {
    std::vector<EvalReport> reports;
    fs::path checkpoint_dir;
    fs::path out_dir;
};

namespace pipedetail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_resolved_config(const RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    std::ofstream f(out / "resolved_config.json", std::ios::trunc);
    f << resolved_config_json(cfg).dump(2) << "\n";
    if (!f) throw IoError(cat("run: cannot write resolved config under '", out.string(), "'"));
}

inline std::array<std::size_t, 3> rgb_bands(const RunConfig& cfg) {
    return {static_cast<std::size_t>(cfg.rgb_band_r), static_cast<std::size_t>(cfg.rgb_band_g),
            static_cast<std::size_t>(cfg.rgb_band_b)};
}

inline ViewConfig view_config(const RunConfig& cfg, const DatasetManifest& data) {
    ViewConfig v;
    v.n_global = cfg.n_global;
    v.n_local = cfg.n_local;
    v.global_size = cfg.global_size;
    v.local_size = cfg.local_size;
    v.global_scale_min = cfg.global_scale_min;
    v.global_scale_max = cfg.global_scale_max;
    v.local_scale_min = cfg.local_scale_min;
    v.local_scale_max = cfg.local_scale_max;
    v.jitter_strength = cfg.jitter_strength;
    v.blur_prob = cfg.blur_prob;
    v.solarize_prob = cfg.solarize_prob;
    v.grayscale_prob = cfg.grayscale_prob;
    v.flip_prob = cfg.flip_prob;
    v.ms_mean = data.band_mean;
    v.ms_std = data.band_std;
    const auto bands = rgb_bands(cfg);
    for (std::size_t b : bands) {
        if (b >= data.band_mean.size())
            throw ConfigError(cat("run: rgb band ", b, " out of range for ",
                                  data.band_mean.size(), " dataset bands"));
        v.rgb_mean.push_back(data.band_mean[b]);
        v.rgb_std.push_back(data.band_std[b]);
    }
    return v;
}

struct Models {
    Encoder enc_rgb;
    Encoder enc_ms;
    VisionProjector g_v;
    TextProjector g_t;
};

inline Models build_models(const RunConfig& cfg, std::size_t ms_channels) {
    const std::size_t d_v = cfg.shared_dim();
    Models m{
        Encoder::seeded({Modality::rgb, 3, static_cast<std::size_t>(cfg.patch_size),
                         static_cast<std::size_t>(cfg.rgb_embed_dim),
                         static_cast<std::size_t>(cfg.encoder_depth), cfg.rgb_seed}),
        Encoder::seeded({Modality::ms, ms_channels, static_cast<std::size_t>(cfg.patch_size),
                         static_cast<std::size_t>(cfg.ms_embed_dim),
                         static_cast<std::size_t>(cfg.encoder_depth), cfg.ms_seed}),
        VisionProjector::seeded(cfg.rgb_embed_dim, cfg.ms_embed_dim, d_v,
                                Rng::mix(cfg.seed, 0x6F00)),
        TextProjector::seeded(cfg.d_t, 2 * d_v, Rng::mix(cfg.seed, 0x6F01)),
    };
    return m;
}

// Stage-2 and evaluation use one photometrically clean full-resolution view.
inline Tensor inference_view(const Tensor& image, const RunConfig& cfg,
                             const DatasetManifest& data) {
    const ViewConfig vc = view_config(cfg, data);
    Tensor rgb = select_bands(image, rgb_bands(cfg));
    return normalize_modality(rgb, vc.rgb_mean, vc.rgb_std);
}

inline std::vector<Tensor> load_all_images(const fs::path& dir, const DatasetManifest& data) {
    std::vector<Tensor> images(data.images.size());
    parallel_for(data.images.size(),
                 [&](std::size_t i) { images[i] = load_dataset_image(dir, data.images[i]); });
    return images;
}

inline std::map<std::string, TokenGrid> encode_inference_grids(
    const std::vector<Tensor>& images, const DatasetManifest& data, const Encoder& enc_rgb,
    const RunConfig& cfg) {
    std::vector<TokenGrid> grids(images.size());
    parallel_for(images.size(), [&](std::size_t i) {
        grids[i] = enc_rgb.encode(inference_view(images[i], cfg, data));
    });
    std::map<std::string, TokenGrid> out;
    for (std::size_t i = 0; i < images.size(); ++i) out[data.images[i].id] = std::move(grids[i]);
    return out;
}

inline std::size_t instruction_for(const RunConfig& cfg, std::uint64_t epoch, std::uint64_t key) {
    if (cfg.instruction_sampling == "fixed0") return 0;
    if (cfg.instruction_sampling != "uniform")
        throw ConfigError(cat("config: instruction_sampling must be uniform or fixed0, got \"",
                              cfg.instruction_sampling, "\""));
    Rng r(Rng::mix(Rng::mix(cfg.seed, 0x1457), Rng::mix(epoch, key)));
    return static_cast<std::size_t>(r.below(5));
}

inline Checkpoint make_stage_checkpoint(const std::string& stage, std::uint64_t step,
                                        RunConfig cfg, const DatasetManifest& data,
                                        Models& models, AdamW& opt,
                                        const CenterState* center) {
    cfg.ms_channels = data.ms_channels;  // record the channel count actually used
    Checkpoint ckpt;
    ckpt.stage = stage;
    ckpt.step = step;
    ckpt.config_digest = config_digest(cfg);
    ckpt.config = semantic_config_json(cfg);
    ckpt.weight_digests["enc_rgb"] = models.enc_rgb.weight_digest();
    ckpt.weight_digests["enc_ms"] = models.enc_ms.weight_digest();
    ckptdetail::put_projector(ckpt, models.g_v);
    ckpt.tensors["gt_w"] = models.g_t.weight().detach();
    if (center) ckpt.tensors["center_mu"] = center->mu.detach();
    auto& ms = opt.moments_m();
    auto& vs = opt.moments_v();
    for (std::size_t i = 0; i < ms.size(); ++i) {
        ckpt.tensors[cat("opt_m_", i)] = Tensor::vec(ms[i]);
        ckpt.tensors[cat("opt_v_", i)] = Tensor::vec(vs[i]);
    }
    return ckpt;
}

}  // namespace pipedetail

// ---------------------------------------------------------------- stage: srd

inline StageResult run_train_srd(const RunConfig& cfg) {
    using namespace pipedetail;
    require_key(cfg.data_dir, "data_dir", "train-srd");
    require_key(cfg.out_dir, "out_dir", "train-srd");
    const fs::path out(cfg.out_dir);
    write_resolved_config(cfg, out);

    DatasetManifest data = load_dataset(cfg.data_dir);
    if (data.images.empty()) throw DataError("train-srd: dataset is empty");
    std::vector<Tensor> images = load_all_images(cfg.data_dir, data);
    Models models = build_models(cfg, data.ms_channels);
    CenterState center = CenterState::zeros(cfg.ms_embed_dim, cfg.m_c, cfg.tau_t, cfg.tau_s);
    AdamW opt(models.g_v.distill_params(), cfg.srd_lr, cfg.weight_decay);

    const std::size_t n = images.size();
    const std::size_t batch = std::min<std::size_t>(cfg.srd_batch, n);
    const std::size_t steps_per_epoch = (n + batch - 1) / batch;
    const std::size_t total_steps =
        cfg.srd_steps > 0 ? cfg.srd_steps : cfg.srd_epochs * steps_per_epoch;
    if (total_steps == 0) throw ConfigError("train-srd: zero training steps configured");

    const ViewConfig base_views = view_config(cfg, data);
    std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
    metrics << "step,lr,loss,n_pairs,grad_norm_projector,center_shift,teacher_entropy\n";

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = 0;
    std::uint64_t epoch = 0;
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x0E0C));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    std::uint64_t sample_counter = 0;
    for (std::size_t step = 0; step < total_steps; ++step) {
        std::vector<std::size_t> idx;
        for (std::size_t j = 0; j < batch; ++j) {
            if (cursor == n) {
                cursor = 0;
                ++epoch;
                Rng r(Rng::mix(cfg.seed, 0x0E0C + epoch));
                for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
            }
            idx.push_back(order[cursor++]);
        }
        std::vector<ViewBatch> batch_views(idx.size());
        const std::uint64_t base_counter = sample_counter;
        parallel_for(idx.size(), [&](std::size_t j) {
            ViewConfig vc = base_views;
            vc.rng_seed = Rng::mix(Rng::mix(cfg.seed, 0x71E5), base_counter + j);
            batch_views[j] = make_views(images[idx[j]], rgb_bands(cfg), vc);
        });
        sample_counter += idx.size();

        opt.set_lr(cosine_lr(step, total_steps, cfg.srd_lr));
        DistillStepReport rep =
            distill_train_step(batch_views, models.enc_rgb, models.enc_ms, models.g_v, center,
                               opt);
        metrics << step << ',' << fmt(opt.lr()) << ',' << fmt(rep.loss) << ',' << rep.n_pairs
                << ',' << fmt(rep.grad_norm_projector) << ',' << fmt(rep.center_shift) << ','
                << fmt(rep.teacher_entropy) << "\n";

        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
            step + 1 < total_steps) {
            save_checkpoint(out / cat("checkpoint-", step + 1),
                            make_stage_checkpoint("srd", step + 1, cfg, data, models, opt,
                                                  &center));
        }
    }
    metrics.flush();
    if (!metrics) throw IoError("train-srd: cannot write metrics stream");

    StageResult res;
    res.out_dir = out;
    res.checkpoint_dir = out / "checkpoint";
    save_checkpoint(res.checkpoint_dir,
                    make_stage_checkpoint("srd", total_steps, cfg, data, models, opt, &center));
    return res;
}

// ---------------------------------------------------------------- stage: sgi

namespace pipedetail {

// One instance pair per image plus one label-prompt pair per class, the
// latter attached to a rotating image of that class. Label prompts must be
// trained because the cached pseudo embeddings carry no lexical structure
// that could generalize to unseen prompt strings.
inline std::vector<AlignPair> epoch_pairs(const RunConfig& cfg, const DatasetManifest& data,
                                          std::uint64_t epoch) {
    std::vector<AlignPair> pairs;
    const bool train_only = cfg.sgi_train_split == "train";
    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        const DatasetImage& img = data.images[i];
        if (train_only && img.split != "train") continue;
        const Split split = img.split == "eval" ? Split::eval : Split::train;
        char capbuf[16];
        std::snprintf(capbuf, sizeof(capbuf), "cap-%04zu", i);
        pairs.push_back({img.id, cat(capbuf, "#", instruction_for(cfg, epoch, i)), split});
        by_class[img.class_name].push_back(i);
    }
    for (const auto& [class_name, members] : by_class) {
        Rng r(Rng::mix(Rng::mix(cfg.seed, 0xC1A5 + epoch), fnv1a64(class_name)));
        const std::size_t img_index = members[r.below(members.size())];
        const DatasetImage& img = data.images[img_index];
        pairs.push_back({img.id,
                         cat("lbl-", class_name, "#",
                             instruction_for(cfg, epoch, Rng::mix(0x1AB3, fnv1a64(class_name)))),
                         img.split == "eval" ? Split::eval : Split::train});
    }
    return pairs;
}

}  // namespace pipedetail

inline StageResult run_train_sgi(const RunConfig& cfg) {
    using namespace pipedetail;
    require_key(cfg.data_dir, "data_dir", "train-sgi");
    require_key(cfg.bank_dir, "bank_dir", "train-sgi");
    require_key(cfg.out_dir, "out_dir", "train-sgi");
    const fs::path out(cfg.out_dir);
    write_resolved_config(cfg, out);

    DatasetManifest data = load_dataset(cfg.data_dir);
    if (data.images.empty()) throw DataError("train-sgi: dataset is empty");
    TextBank bank = load_text_bank(cfg.bank_dir);
    if (bank.token_width() != cfg.d_t)
        throw ConfigError(cat("train-sgi: bank token width ", bank.token_width(),
                              " does not match configured d_t ", cfg.d_t));

    std::vector<Tensor> images = load_all_images(cfg.data_dir, data);
    Models models = build_models(cfg, data.ms_channels);
    if (!cfg.checkpoint.empty()) {
        Checkpoint warm = load_checkpoint(cfg.checkpoint);
        ckptdetail::take_projector(warm, models.g_v);
    }

    const std::string rgb_digest = models.enc_rgb.weight_digest();
    const std::string ms_digest = models.enc_ms.weight_digest();

    // Frozen encoder + fixed view: token grids are computed once and cached.
    std::map<std::string, TokenGrid> grids =
        encode_inference_grids(images, data, models.enc_rgb, cfg);

    std::vector<Tensor> params = models.g_v.align_params();
    for (auto& p : models.g_t.params()) params.push_back(p);
    AdamW opt(params, cfg.sgi_lr, cfg.weight_decay);

    const TextPooling pooling = pooling_from_name(cfg.text_pooling == "sweep"
                                                      ? "mean"
                                                      : cfg.text_pooling);
    std::vector<AlignPair> pairs = epoch_pairs(cfg, data, 0);
    if (pairs.empty()) throw DataError("train-sgi: no training pairs");
    const std::size_t per_epoch = pairs.size();
    const std::size_t batch = std::min<std::size_t>(cfg.sgi_batch, per_epoch);
    const std::size_t steps_per_epoch = (per_epoch + batch - 1) / batch;
    const std::size_t total_steps =
        cfg.sgi_steps > 0 ? cfg.sgi_steps : cfg.sgi_epochs * steps_per_epoch;
    if (total_steps == 0) throw ConfigError("train-sgi: zero training steps configured");

    std::ofstream metrics(out / "metrics.csv", std::ios::trunc);
    metrics << "step,lr,loss\n";

    std::uint64_t epoch = 0;
    std::size_t cursor = 0;
    {
        Rng r(Rng::mix(cfg.seed, 0x51C0));
        for (std::size_t i = pairs.size(); i > 1; --i)
            std::swap(pairs[i - 1], pairs[r.below(i)]);
    }
    for (std::size_t step = 0; step < total_steps; ++step) {
        std::vector<AlignPair> batch_pairs;
        for (std::size_t j = 0; j < batch; ++j) {
            if (cursor == pairs.size()) {
                cursor = 0;
                ++epoch;
                pairs = epoch_pairs(cfg, data, epoch);
                Rng r(Rng::mix(cfg.seed, 0x51C0 + epoch));
                for (std::size_t i = pairs.size(); i > 1; --i)
                    std::swap(pairs[i - 1], pairs[r.below(i)]);
            }
            batch_pairs.push_back(pairs[cursor++]);
        }
        opt.set_lr(cosine_lr(step, total_steps, cfg.sgi_lr));
        const double loss = align_train_step(batch_pairs, grids, models.g_v, models.g_t, bank,
                                             cfg.sgi_tau, pooling, opt);
        metrics << step << ',' << fmt(opt.lr()) << ',' << fmt(loss) << "\n";
    }
    metrics.flush();
    if (!metrics) throw IoError("train-sgi: cannot write metrics stream");

    if (models.enc_rgb.weight_digest() != rgb_digest ||
        models.enc_ms.weight_digest() != ms_digest)
        throw TrainError("train-sgi: encoder weights changed during training");

    StageResult res;
    res.out_dir = out;
    res.checkpoint_dir = out / "checkpoint";
    save_checkpoint(res.checkpoint_dir,
                    make_stage_checkpoint("sgi", total_steps, cfg, data, models, opt, nullptr));
    return res;
}

// --------------------------------------------------------------- evaluation

namespace pipedetail {

struct EvalContext {
    RunConfig model_cfg;  // resolved config of the producing training run
    DatasetManifest data;
    std::vector<Tensor> images;
    Models models;
    TextBank bank;
    std::vector<std::size_t> eval_indices;
    std::map<std::string, TokenGrid> grids;
};

inline EvalContext make_eval_context(const RunConfig& cfg, const char* verb) {
    require_key(cfg.data_dir, "data_dir", verb);
    require_key(cfg.bank_dir, "bank_dir", verb);
    require_key(cfg.checkpoint, "checkpoint", verb);

    Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
    if (ckpt.stage != "sgi")
        throw ConfigError(cat(verb, ": checkpoint at '", cfg.checkpoint,
                              "' holds stage \"", ckpt.stage,
                              "\"; a completed stage-2 checkpoint is required"));
    RunConfig model_cfg = config_from_json(ckpt.config);

    DatasetManifest data = load_dataset(cfg.data_dir);
    if (data.images.empty()) throw DataError(cat(verb, ": dataset is empty"));

    EvalContext ctx{model_cfg,
                    std::move(data),
                    {},
                    build_models(model_cfg, model_cfg.ms_channels),
                    load_text_bank(cfg.bank_dir),
                    {},
                    {}};
    if (ctx.data.ms_channels != ctx.model_cfg.ms_channels)
        throw ConfigError(cat(verb, ": dataset has ", ctx.data.ms_channels,
                              " bands but the checkpoint was trained with ",
                              ctx.model_cfg.ms_channels));
    ckptdetail::take_projector(ckpt, ctx.models.g_v);
    ckptdetail::assign(ctx.models.g_t.weight(), ckpt.tensors.at("gt_w"), "gt_w");

    if (ctx.models.enc_rgb.weight_digest() != ckpt.weight_digests.at("enc_rgb"))
        throw ConfigError(cat(verb, ": RGB encoder digest does not match the checkpoint"));
    if (ctx.models.enc_ms.weight_digest() != ckpt.weight_digests.at("enc_ms"))
        throw ConfigError(cat(verb, ": MS encoder digest does not match the checkpoint"));

    ctx.images = load_all_images(cfg.data_dir, ctx.data);
    for (std::size_t i = 0; i < ctx.data.images.size(); ++i)
        if (ctx.data.images[i].split == "eval") ctx.eval_indices.push_back(i);
    if (ctx.eval_indices.empty()) {
        for (std::size_t i = 0; i < ctx.data.images.size(); ++i) ctx.eval_indices.push_back(i);
    }
    ctx.grids = encode_inference_grids(ctx.images, ctx.data, ctx.models.enc_rgb, ctx.model_cfg);
    return ctx;
}

inline Tensor label_embedding(const EvalContext& ctx, const std::string& class_name,
                              TextPooling pooling) {
    // Label prompts use instruction 0 and are cached in the bank.
    const std::string id = cat("lbl-", class_name, "#0");
    return project_text(ctx.models.g_t, pool_text(ctx.bank.at(id).tokens, pooling)).detach();
}

inline LabelSet build_label_set(const EvalContext& ctx, TextPooling pooling) {
    const std::size_t c = ctx.data.classes.size();
    const std::size_t width = 2 * ctx.models.g_v.out_dim();
    std::vector<double> rows(c * width);
    for (std::size_t ci = 0; ci < c; ++ci) {
        Tensor e = label_embedding(ctx, ctx.data.classes[ci], pooling);
        std::copy(e.data().begin(), e.data().end(), rows.begin() + ci * width);
    }
    return LabelSet(ctx.data.classes, Tensor({c, width}, std::move(rows)));
}

inline Tensor descriptor_for(const EvalContext& ctx, std::size_t image_index) {
    const TokenGrid& grid = ctx.grids.at(ctx.data.images[image_index].id);
    return visual_descriptor(ctx.models.g_v.tokens(grid)).detach();
}

inline void write_report(const fs::path& out, const std::string& name, const EvalReport& rep) {
    nlohmann::json j = {{"task", rep.task},
                        {"metric", rep.metric},
                        {"value", rep.value},
                        {"per_class", rep.per_class},
                        {"notes", rep.notes}};
    std::ofstream f(out / (name + ".json"), std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) throw IoError(cat("eval: cannot write report '", name, "'"));
    std::ofstream csv(out / "reports.csv", std::ios::app);
    csv << rep.task << ',' << rep.metric << ',' << fmt(rep.value) << "\n";
}

inline ApDenominator denom_from_config(const RunConfig& cfg) {
    if (cfg.map_denominator == "min_k_relevant") return ApDenominator::min_k_relevant;
    if (cfg.map_denominator == "relevant") return ApDenominator::relevant_only;
    throw ConfigError(cat("config: map_denominator must be min_k_relevant or relevant, got \"",
                          cfg.map_denominator, "\""));
}

inline std::vector<Tensor> eval_descriptors(const EvalContext& ctx) {
    std::vector<Tensor> out(ctx.eval_indices.size());
    parallel_for(ctx.eval_indices.size(),
                 [&](std::size_t j) { out[j] = descriptor_for(ctx, ctx.eval_indices[j]); });
    return out;
}

inline EvalReport retrieval_report(const EvalContext& ctx, const RunConfig& cfg,
                                   TextPooling pooling, const std::vector<Tensor>& descriptors) {
    const std::size_t n = descriptors.size();
    const std::size_t c = ctx.data.classes.size();
    LabelSet labels = build_label_set(ctx, pooling);
    std::vector<double> scores(c * n);
    std::vector<std::uint8_t> rel(c * n);
    for (std::size_t ci = 0; ci < c; ++ci) {
        Tensor q = reshape(slice_rows(labels.prompt_embeddings, ci, ci + 1), {labels.width()});
        for (std::size_t j = 0; j < n; ++j) {
            Tensor s = cosine_sim_matrix(reshape(q, {1, q.size()}),
                                         reshape(descriptors[j], {1, q.size()}));
            scores[ci * n + j] = s.value();
            rel[ci * n + j] =
                ctx.data.images[ctx.eval_indices[j]].class_index == ci ? 1 : 0;
        }
    }
    const std::size_t k = std::min<std::size_t>(cfg.map_k, n);
    EvalReport rep;
    rep.task = "retrieval";
    rep.metric = "map100";
    rep.per_class.resize(c);
    Tensor score_mat({c, n}, scores);
    std::vector<std::size_t> flagged;
    rep.value = map_at_k(score_mat, rel, k, denom_from_config(cfg), &flagged);
    for (std::size_t ci = 0; ci < c; ++ci) {
        std::vector<double> row(scores.begin() + ci * n, scores.begin() + (ci + 1) * n);
        std::vector<std::uint8_t> rrow(rel.begin() + ci * n, rel.begin() + (ci + 1) * n);
        rep.per_class[ci] =
            average_precision_at_k(row.data(), rrow.data(), n, k, denom_from_config(cfg));
    }
    for (std::size_t q : flagged)
        rep.notes.push_back(cat("query ", q, " (", ctx.data.classes[q],
                                ") has no relevant gallery items"));
    rep.notes.push_back(cat("pooling=", pooling_name(pooling)));
    rep.notes.push_back(cat("k=", k));
    return rep;
}

inline EvalReport instance_r1_report(const EvalContext& ctx, TextPooling pooling,
                                     const std::vector<Tensor>& descriptors) {
    // Text -> image retrieval with each held-out caption as the query and its
    // own image as the single relevant target.
    const std::size_t n = descriptors.size();
    std::size_t hits = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t img_index = ctx.eval_indices[j];
        char capbuf[16];
        std::snprintf(capbuf, sizeof(capbuf), "cap-%04zu", img_index);
        Tensor q = project_text(ctx.models.g_t,
                                pool_text(ctx.bank.at(cat(capbuf, "#0")).tokens, pooling))
                       .detach();
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t i = 0; i < n; ++i) {
            Tensor s = cosine_sim_matrix(reshape(q, {1, q.size()}),
                                         reshape(descriptors[i], {1, q.size()}));
            if (s.value() > best_sim) {
                best_sim = s.value();
                best = i;
            }
        }
        if (best == j) ++hits;
    }
    EvalReport rep;
    rep.task = "retrieval_text_to_image_r1";
    rep.metric = "accuracy";
    rep.value = n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
    rep.notes.push_back(cat("pooling=", pooling_name(pooling)));
    return rep;
}

}  // namespace pipedetail

inline StageResult run_eval(const RunConfig& cfg) {
    using namespace pipedetail;
    require_key(cfg.out_dir, "out_dir", "eval");
    const fs::path out(cfg.out_dir);
    write_resolved_config(cfg, out);
    { std::ofstream reset(out / "reports.csv", std::ios::trunc); reset << "task,metric,value\n"; }

    EvalContext ctx = make_eval_context(cfg, "eval");
    StageResult res;
    res.out_dir = out;

    const std::string task = cfg.eval_task.empty() ? "zeroshot" : cfg.eval_task;
    if (task == "zeroshot") {
        const TextPooling pooling = pooling_from_name(
            cfg.text_pooling == "sweep" ? "mean" : cfg.text_pooling);
        LabelSet labels = build_label_set(ctx, pooling);
        std::vector<Tensor> descriptors = eval_descriptors(ctx);
        const std::size_t c = ctx.data.classes.size();
        if (!cfg.multilabel) {
            std::vector<std::size_t> correct_per_class(c, 0), count_per_class(c, 0);
            std::size_t correct = 0;
            std::vector<std::size_t> tp(c, 0), fp(c, 0), fn(c, 0);
            for (std::size_t j = 0; j < descriptors.size(); ++j) {
                const std::size_t truth =
                    ctx.data.images[ctx.eval_indices[j]].class_index;
                const std::size_t pred = zero_shot_classify(descriptors[j], labels);
                ++count_per_class[truth];
                if (pred == truth) {
                    ++correct;
                    ++correct_per_class[truth];
                    ++tp[truth];
                } else {
                    ++fp[pred];
                    ++fn[truth];
                }
            }
            EvalReport rep;
            rep.task = "zero_shot_classification";
            rep.metric = "accuracy";
            rep.value = static_cast<double>(correct) /
                        static_cast<double>(descriptors.size());
            for (std::size_t ci = 0; ci < c; ++ci)
                rep.per_class.push_back(count_per_class[ci] == 0
                                            ? 0.0
                                            : static_cast<double>(correct_per_class[ci]) /
                                                  static_cast<double>(count_per_class[ci]));
            write_report(out, "report_zeroshot", rep);
            res.reports.push_back(rep);

            EvalReport f1;
            f1.task = "zero_shot_classification";
            f1.metric = "f1_macro";
            for (std::size_t ci = 0; ci < c; ++ci) {
                const double d = static_cast<double>(2 * tp[ci] + fp[ci] + fn[ci]);
                f1.per_class.push_back(d == 0.0 ? 0.0
                                                : 2.0 * static_cast<double>(tp[ci]) / d);
                f1.value += f1.per_class.back();
            }
            f1.value /= static_cast<double>(c);
            write_report(out, "report_zeroshot_f1", f1);
            res.reports.push_back(f1);
        } else {
            // One-vs-rest decomposition; ground truth is the one-hot class.
            std::size_t correct = 0, total = 0;
            std::vector<double> per_class(c, 0.0);
            std::vector<std::size_t> per_class_n(c, 0);
            for (std::size_t j = 0; j < descriptors.size(); ++j) {
                const std::size_t truth =
                    ctx.data.images[ctx.eval_indices[j]].class_index;
                std::vector<bool> pred =
                    multilabel_one_vs_rest(descriptors[j], labels, cfg.multilabel_margin);
                for (std::size_t ci = 0; ci < c; ++ci) {
                    const bool want = ci == truth;
                    const bool ok = pred[ci] == want;
                    correct += ok ? 1 : 0;
                    ++total;
                    per_class[ci] += ok ? 1.0 : 0.0;
                    ++per_class_n[ci];
                }
            }
            EvalReport rep;
            rep.task = "zero_shot_multilabel";
            rep.metric = "accuracy";
            rep.value = static_cast<double>(correct) / static_cast<double>(total);
            for (std::size_t ci = 0; ci < c; ++ci)
                rep.per_class.push_back(per_class[ci] /
                                        static_cast<double>(per_class_n[ci]));
            write_report(out, "report_zeroshot_multilabel", rep);
            res.reports.push_back(rep);
        }
    } else if (task == "retrieval") {
        std::vector<Tensor> descriptors = eval_descriptors(ctx);
        if (cfg.text_pooling == "sweep") {
            EvalReport mean_rep;
            std::vector<std::pair<std::string, double>> values;
            for (const char* mode : {"mean", "bos", "eos"}) {
                EvalReport rep = retrieval_report(ctx, cfg, pooling_from_name(mode),
                                                  descriptors);
                write_report(out, cat("report_retrieval_", mode), rep);
                res.reports.push_back(rep);
                values.emplace_back(mode, rep.value);
                if (std::string(mode) == "mean") mean_rep = rep;
            }
            EvalReport sweep;
            sweep.task = "retrieval_pooling_sweep";
            sweep.metric = "map100";
            sweep.value = mean_rep.value;
            for (const auto& [mode, value] : values) {
                sweep.notes.push_back(cat(mode, "=", fmt(value)));
                if (mode != "mean" && value > mean_rep.value)
                    sweep.notes.push_back(cat("informational: ", mode,
                                              " pooling beat mean pooling"));
            }
            write_report(out, "report_retrieval_sweep", sweep);
            res.reports.push_back(sweep);
        } else {
            const TextPooling pooling = pooling_from_name(cfg.text_pooling);
            EvalReport rep = retrieval_report(ctx, cfg, pooling, descriptors);
            write_report(out, "report_retrieval", rep);
            res.reports.push_back(rep);
            EvalReport r1 = instance_r1_report(ctx, pooling, descriptors);
            write_report(out, "report_retrieval_r1", r1);
            res.reports.push_back(r1);
        }
    } else if (task == "segment") {
        const TextPooling pooling = pooling_from_name(
            cfg.text_pooling == "sweep" ? "mean" : cfg.text_pooling);
        LabelSet labels = build_label_set(ctx, pooling);
        std::vector<int> all_pred, all_truth;
        std::size_t exported = 0;
        for (std::size_t j = 0; j < ctx.eval_indices.size(); ++j) {
            const std::size_t i = ctx.eval_indices[j];
            const TokenGrid grid = ctx.models.g_v.tokens(ctx.grids.at(ctx.data.images[i].id));
            std::vector<int> truth(ctx.data.h * ctx.data.w,
                                   static_cast<int>(ctx.data.images[i].class_index));
            SegmentResult seg = segment_open_vocab(grid, labels, ctx.data.h, ctx.data.w, truth);
            all_pred.insert(all_pred.end(), seg.class_map.begin(), seg.class_map.end());
            all_truth.insert(all_truth.end(), truth.begin(), truth.end());
            if (exported < 4) {
                std::vector<double> as_double(seg.class_map.begin(), seg.class_map.end());
                write_pgm(out / cat("seg_", ctx.data.images[i].id, ".pgm"), seg.out_h,
                          seg.out_w, as_double);
                ++exported;
            }
        }
        EvalReport rep;
        rep.task = "open_vocabulary_segmentation";
        rep.metric = "miou";
        rep.value = mean_iou(all_pred, all_truth, static_cast<int>(ctx.data.classes.size()));
        write_report(out, "report_segment", rep);
        res.reports.push_back(rep);
    } else if (task == "viz") {
        const TextPooling pooling = pooling_from_name(
            cfg.text_pooling == "sweep" ? "mean" : cfg.text_pooling);
        std::size_t index = ctx.eval_indices.front();
        if (!cfg.viz_image.empty()) {
            bool found = false;
            for (std::size_t i = 0; i < ctx.data.images.size(); ++i)
                if (ctx.data.images[i].id == cfg.viz_image) {
                    index = i;
                    found = true;
                    break;
                }
            if (!found)
                throw DataError(cat("viz-sim: unknown image id '", cfg.viz_image, "'"));
        }
        const std::string cls =
            cfg.viz_class.empty() ? ctx.data.images[index].class_name : cfg.viz_class;
        bool known = false;
        for (const auto& c : ctx.data.classes) known = known || c == cls;
        if (!known) throw DataError(cat("viz-sim: unknown class '", cls, "'"));
        const TokenGrid grid = ctx.models.g_v.tokens(ctx.grids.at(ctx.data.images[index].id));
        Tensor text = label_embedding(ctx, cls, pooling);
        Tensor sim = patch_similarity_map(grid, patch_half(text));
        // The PGM sidecar records the min-max scaling; no score to report.
        write_pgm(out / cat("sim_", ctx.data.images[index].id, "_", cls, ".pgm"),
                  grid.grid_rows, grid.grid_cols, sim.data());
    } else {
        throw ConfigError(cat("eval: unknown eval_task \"", task, "\""));
    }
    return res;
}

inline StageResult run_probe(const RunConfig& cfg) {
    using namespace pipedetail;
    require_key(cfg.out_dir, "out_dir", "eval-probe");
    const fs::path out(cfg.out_dir);
    write_resolved_config(cfg, out);
    { std::ofstream reset(out / "reports.csv", std::ios::trunc); reset << "task,metric,value\n"; }

    ProbeConfig pc;
    pc.epochs = cfg.probe_epochs;
    pc.batch = cfg.probe_batch;
    pc.lr = cfg.probe_lr;
    pc.weight_decay = cfg.probe_weight_decay;
    pc.eval_fraction = cfg.probe_eval_fraction;
    pc.gamma = cfg.probe_gamma;
    pc.milestone1 = cfg.probe_milestone1;
    pc.milestone2 = cfg.probe_milestone2;
    pc.seed = cfg.seed;

    StageResult res;
    res.out_dir = out;
    Tensor features;
    std::vector<int> labels;
    if (!cfg.features_file.empty()) {
        // Pre-extracted features plus a JSON array of integer labels.
        require_key(cfg.labels_file, "labels_file", "eval-probe");
        features = stf_read(cfg.features_file);
        std::ifstream lf(cfg.labels_file);
        if (!lf) throw DataError(cat("eval-probe: cannot open '", cfg.labels_file, "'"));
        nlohmann::json lj;
        lf >> lj;
        labels = lj.get<std::vector<int>>();
    } else {
        EvalContext ctx = make_eval_context(cfg, "eval-probe");
        const std::size_t n = ctx.data.images.size();
        const std::size_t width = 2 * ctx.models.g_v.out_dim();
        std::vector<double> rows(n * width);
        parallel_for(n, [&](std::size_t i) {
            Tensor d = descriptor_for(ctx, i);
            std::copy(d.data().begin(), d.data().end(), rows.begin() + i * width);
        });
        features = Tensor({n, width}, std::move(rows));
        for (const auto& img : ctx.data.images)
            labels.push_back(static_cast<int>(img.class_index));
    }

    EvalReport rep;
    if (cfg.multilabel) {
        int classes = 0;
        for (int l : labels) classes = std::max(classes, l + 1);
        std::vector<std::vector<int>> multihot(labels.size(),
                                               std::vector<int>(classes, 0));
        for (std::size_t i = 0; i < labels.size(); ++i) multihot[i][labels[i]] = 1;
        rep = linear_probe_multilabel(features, multihot, pc);
    } else {
        rep = linear_probe(features, labels, pc);
    }
    write_report(out, "report_probe", rep);
    res.reports.push_back(rep);
    return res;
}

inline StageResult run_stage(const RunConfig& cfg) {
    if (cfg.stage == "srd") return run_train_srd(cfg);
    if (cfg.stage == "sgi") return run_train_sgi(cfg);
    if (cfg.stage == "eval") return run_eval(cfg);
    if (cfg.stage == "probe") return run_probe(cfg);
    throw ConfigError(cat("run: unknown stage \"", cfg.stage, "\""));
}

}  // namespace satd
