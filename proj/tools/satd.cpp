// satd: synthetic data generation, two-stage projector training and the
// evaluation harness, driven by a flat JSON configuration.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "satd/bank_io.hpp"
#include "satd/config.hpp"
#include "satd/pipeline.hpp"
#include "satd/synthetic.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out;
    std::string checkpoint;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "Flat JSON configuration file");
    cmd->add_option("--out", flags.out, "Output directory");
    cmd->add_option("--checkpoint", flags.checkpoint, "Checkpoint directory");
    cmd->add_option("--seed", flags.seed, "Master seed")->each([&flags](const std::string&) {
        flags.seed_set = true;
    });
}

satd::RunConfig resolve(const CommonFlags& flags) {
    satd::RunConfig cfg;
    if (!flags.config_path.empty()) cfg = satd::load_config(flags.config_path);
    if (!flags.out.empty()) cfg.out_dir = flags.out;
    if (!flags.checkpoint.empty()) cfg.checkpoint = flags.checkpoint;
    if (flags.seed_set) cfg.seed = flags.seed;
    return cfg;
}

int run_guarded(const char* verb, const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "satd %s: %s\n", verb, e.what());
        return 1;
    }
}

void print_reports(const satd::StageResult& res) {
    for (const auto& rep : res.reports)
        std::printf("%s %s = %.6f\n", rep.task.c_str(), rep.metric.c_str(), rep.value);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"spectral distillation and text alignment toolkit"};
    app.require_subcommand(1);

    CommonFlags gen_flags, bank_flags, srd_flags, sgi_flags;
    CommonFlags zs_flags, ret_flags, probe_flags, seg_flags, viz_flags;

    CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic paired MS/RGB dataset");
    add_common(gen, gen_flags);
    CLI::App* bank = app.add_subcommand("embed-bank", "Build a text embedding bank");
    add_common(bank, bank_flags);
    std::string bank_mode = "pseudo";
    bank->add_option("--mode", bank_mode, "pseudo | import");
    CLI::App* srd = app.add_subcommand("train-srd", "Stage 1: spectral distillation training");
    add_common(srd, srd_flags);
    CLI::App* sgi = app.add_subcommand("train-sgi", "Stage 2: text alignment training");
    add_common(sgi, sgi_flags);
    CLI::App* zs = app.add_subcommand("eval-zeroshot", "Zero-shot classification");
    add_common(zs, zs_flags);
    CLI::App* ret = app.add_subcommand("eval-retrieval", "Text-to-image retrieval (mAP@k)");
    add_common(ret, ret_flags);
    CLI::App* probe = app.add_subcommand("eval-probe", "Linear probe on frozen features");
    add_common(probe, probe_flags);
    CLI::App* seg = app.add_subcommand("eval-segment", "Open-vocabulary segmentation (mIoU)");
    add_common(seg, seg_flags);
    CLI::App* viz = app.add_subcommand("viz-sim", "Patch-to-text similarity heatmap");
    add_common(viz, viz_flags);

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        return run_guarded("gen", [&] {
            satd::RunConfig cfg = resolve(gen_flags);
            satd::require_key(cfg.out_dir, "out_dir", "gen");
            satd::SyntheticSpec spec;
            spec.n = cfg.n_images;
            spec.ms_channels = cfg.ms_channels;
            spec.h = cfg.image_h;
            spec.w = cfg.image_w;
            spec.seed = cfg.seed;
            satd::gen_synthetic(spec, cfg.out_dir);
            satd::pipedetail::write_resolved_config(cfg, cfg.out_dir);
            std::printf("dataset: %zu images under %s\n", spec.n, cfg.out_dir.c_str());
        });
    }
    if (bank->parsed()) {
        return run_guarded("embed-bank", [&] {
            satd::RunConfig cfg = resolve(bank_flags);
            satd::require_key(cfg.prompt_manifest, "prompt_manifest", "embed-bank");
            satd::require_key(cfg.out_dir, "out_dir", "embed-bank");
            const auto mode =
                bank_mode == "import" ? satd::BankMode::import : satd::BankMode::pseudo;
            if (mode == satd::BankMode::import)
                satd::require_key(cfg.import_dir, "import_dir", "embed-bank");
            auto manifest = satd::load_prompt_manifest(cfg.prompt_manifest);
            satd::TextBank b = satd::emit_text_bank(manifest, mode, cfg.d_t, cfg.bank_tokens,
                                                    cfg.pseudo_seed, cfg.import_dir);
            satd::save_text_bank(cfg.out_dir, b);
            satd::pipedetail::write_resolved_config(cfg, cfg.out_dir);
            std::printf("bank: %zu prompts under %s\n", b.size(), cfg.out_dir.c_str());
        });
    }

    auto run_stage_verb = [&](const char* verb, CommonFlags& flags, const char* stage,
                              const char* eval_task) {
        return run_guarded(verb, [&] {
            satd::RunConfig cfg = resolve(flags);
            cfg.stage = stage;
            if (eval_task) cfg.eval_task = eval_task;
            satd::StageResult res = satd::run_stage(cfg);
            print_reports(res);
            if (!res.checkpoint_dir.empty())
                std::printf("checkpoint: %s\n", res.checkpoint_dir.string().c_str());
        });
    };

    if (srd->parsed()) return run_stage_verb("train-srd", srd_flags, "srd", nullptr);
    if (sgi->parsed()) return run_stage_verb("train-sgi", sgi_flags, "sgi", nullptr);
    if (zs->parsed()) return run_stage_verb("eval-zeroshot", zs_flags, "eval", "zeroshot");
    if (ret->parsed()) return run_stage_verb("eval-retrieval", ret_flags, "eval", "retrieval");
    if (probe->parsed()) return run_stage_verb("eval-probe", probe_flags, "probe", nullptr);
    if (seg->parsed()) return run_stage_verb("eval-segment", seg_flags, "eval", "segment");
    if (viz->parsed()) return run_stage_verb("viz-sim", viz_flags, "eval", "viz");
    return 0;
}
