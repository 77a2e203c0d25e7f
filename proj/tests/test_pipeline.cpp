#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "satd/pipeline.hpp"

using namespace satd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("satd_pipe_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

// Small end-to-end configuration shared by the integration tests.
RunConfig smoke_config(const fs::path& root) {
    RunConfig cfg;
    cfg.seed = 33;
    cfg.n_images = 32;
    cfg.ms_channels = 5;
    cfg.image_h = 32;
    cfg.image_w = 32;
    cfg.n_global = 2;
    cfg.n_local = 1;
    cfg.global_size = 16;
    cfg.local_size = 8;
    cfg.global_scale_min = 0.8;
    cfg.global_scale_max = 1.0;
    cfg.local_scale_min = 0.3;
    cfg.local_scale_max = 0.6;
    cfg.jitter_strength = 0.2;
    cfg.blur_prob = 0.0;
    cfg.solarize_prob = 0.0;
    cfg.grayscale_prob = 0.0;
    cfg.patch_size = 4;
    cfg.rgb_embed_dim = 8;
    cfg.ms_embed_dim = 8;
    cfg.encoder_depth = 1;
    cfg.d_t = 48;
    cfg.bank_tokens = 4;
    cfg.srd_steps = 12;
    cfg.srd_batch = 8;
    cfg.srd_lr = 1e-3;
    cfg.sgi_steps = 25;
    cfg.sgi_batch = 16;
    cfg.sgi_lr = 2e-3;
    cfg.instruction_sampling = "fixed0";
    cfg.data_dir = (root / "data").string();
    cfg.bank_dir = (root / "bank").string();
    return cfg;
}

void run_chain(const RunConfig& base, const fs::path& root) {
    SyntheticSpec spec{base.n_images, base.ms_channels, base.image_h, base.image_w, base.seed};
    gen_synthetic(spec, base.data_dir);
    auto manifest = load_prompt_manifest(fs::path(base.data_dir) / "prompts.json");
    TextBank bank =
        emit_text_bank(manifest, BankMode::pseudo, base.d_t, base.bank_tokens, base.pseudo_seed);
    save_text_bank(base.bank_dir, bank);

    RunConfig srd = base;
    srd.stage = "srd";
    srd.out_dir = (root / "srd").string();
    run_stage(srd);

    RunConfig sgi = base;
    sgi.stage = "sgi";
    sgi.out_dir = (root / "sgi").string();
    sgi.checkpoint = (root / "srd" / "checkpoint").string();
    run_stage(sgi);

    RunConfig eval = base;
    eval.stage = "eval";
    eval.eval_task = "retrieval";
    eval.out_dir = (root / "eval").string();
    eval.checkpoint = (root / "sgi" / "checkpoint").string();
    run_stage(eval);
}

}  // namespace

TEST_CASE("full pipeline runs end to end and freezes the encoders") {
    fs::path root = temp_dir("chain");
    RunConfig cfg = smoke_config(root);
    const auto t0 = std::chrono::steady_clock::now();
    run_chain(cfg, root);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() <
          300.0);

    Checkpoint srd = load_checkpoint(root / "srd" / "checkpoint");
    Checkpoint sgi = load_checkpoint(root / "sgi" / "checkpoint");
    CHECK(srd.stage == "srd");
    CHECK(sgi.stage == "sgi");
    CHECK(srd.step == 12);
    CHECK(sgi.step == 25);

    // Frozen contract: encoder digests identical across both stages and equal
    // to a fresh reconstruction from the same seeds.
    CHECK(srd.weight_digests.at("enc_rgb") == sgi.weight_digests.at("enc_rgb"));
    CHECK(srd.weight_digests.at("enc_ms") == sgi.weight_digests.at("enc_ms"));
    pipedetail::Models fresh = pipedetail::build_models(cfg, cfg.ms_channels);
    CHECK(fresh.enc_rgb.weight_digest() == srd.weight_digests.at("enc_rgb"));
    CHECK(fresh.enc_ms.weight_digest() == srd.weight_digests.at("enc_ms"));

    CHECK(fs::exists(root / "srd" / "metrics.csv"));
    CHECK(fs::exists(root / "srd" / "resolved_config.json"));
    CHECK(fs::exists(root / "eval" / "report_retrieval.json"));
    CHECK(fs::exists(root / "eval" / "report_retrieval_r1.json"));
}

TEST_CASE("identical config and seed give bit-identical checkpoints and metrics") {
    fs::path root_a = temp_dir("det_a");
    fs::path root_b = temp_dir("det_b");
    RunConfig a = smoke_config(root_a);
    RunConfig b = smoke_config(root_b);
    run_chain(a, root_a);
    run_chain(b, root_b);

    for (const char* rel :
         {"srd/metrics.csv", "sgi/metrics.csv", "eval/report_retrieval.json",
          "eval/report_retrieval_r1.json", "eval/reports.csv",
          "srd/checkpoint/manifest.json", "sgi/checkpoint/manifest.json"})
        CHECK(slurp(root_a / rel) == slurp(root_b / rel));

    for (const auto& entry :
         fs::directory_iterator(root_a / "sgi" / "checkpoint" / "weights")) {
        const fs::path rel = fs::relative(entry.path(), root_a);
        CHECK(slurp(root_a / rel) == slurp(root_b / rel));
    }
}

TEST_CASE("results do not depend on the worker thread count") {
    fs::path root_a = temp_dir("thr_1");
    fs::path root_b = temp_dir("thr_2");
    setenv("SATD_THREADS", "1", 1);
    run_chain(smoke_config(root_a), root_a);
    setenv("SATD_THREADS", "2", 1);
    run_chain(smoke_config(root_b), root_b);
    unsetenv("SATD_THREADS");
    CHECK(slurp(root_a / "srd/metrics.csv") == slurp(root_b / "srd/metrics.csv"));
    CHECK(slurp(root_a / "sgi/metrics.csv") == slurp(root_b / "sgi/metrics.csv"));
    CHECK(slurp(root_a / "eval/report_retrieval.json") ==
          slurp(root_b / "eval/report_retrieval.json"));
}

TEST_CASE("different seeds give different checkpoints") {
    fs::path root_a = temp_dir("seed_a");
    fs::path root_b = temp_dir("seed_b");
    RunConfig a = smoke_config(root_a);
    RunConfig b = smoke_config(root_b);
    b.seed = 34;
    run_chain(a, root_a);
    run_chain(b, root_b);
    CHECK(slurp(root_a / "sgi/checkpoint/weights/gt_w.stf") !=
          slurp(root_b / "sgi/checkpoint/weights/gt_w.stf"));
}

TEST_CASE("eval refuses to run without a stage-2 checkpoint") {
    fs::path root = temp_dir("refuse");
    RunConfig cfg = smoke_config(root);
    SyntheticSpec spec{cfg.n_images, cfg.ms_channels, cfg.image_h, cfg.image_w, cfg.seed};
    gen_synthetic(spec, cfg.data_dir);
    auto manifest = load_prompt_manifest(fs::path(cfg.data_dir) / "prompts.json");
    save_text_bank(cfg.bank_dir, emit_text_bank(manifest, BankMode::pseudo, cfg.d_t,
                                                cfg.bank_tokens, cfg.pseudo_seed));
    RunConfig srd = cfg;
    srd.stage = "srd";
    srd.out_dir = (root / "srd").string();
    run_stage(srd);

    RunConfig eval = cfg;
    eval.stage = "eval";
    eval.eval_task = "zeroshot";
    eval.out_dir = (root / "eval").string();
    eval.checkpoint = (root / "srd" / "checkpoint").string();
    CHECK_THROWS_AS(run_stage(eval), ConfigError);

    RunConfig missing = eval;
    missing.checkpoint.clear();
    CHECK_THROWS_AS(run_stage(missing), ConfigError);
}

TEST_CASE("train step loss decreases on a fixed batch in at least 45 of 50 steps") {
    fs::path root = temp_dir("monotone");
    SyntheticSpec spec{16, 5, 32, 32, 9};
    gen_synthetic(spec, root / "data");
    DatasetManifest data = load_dataset(root / "data");

    RunConfig cfg;
    cfg.patch_size = 4;
    cfg.rgb_embed_dim = 8;
    cfg.ms_embed_dim = 8;
    cfg.encoder_depth = 1;
    cfg.seed = 9;
    pipedetail::Models models = pipedetail::build_models(cfg, data.ms_channels);
    CenterState center = CenterState::zeros(8, 0.9, 0.06, 0.1);
    AdamW opt(models.g_v.distill_params(), 2e-3);

    ViewConfig vc = pipedetail::view_config(cfg, data);
    vc.n_global = 2;
    vc.n_local = 1;
    vc.global_size = 16;
    vc.local_size = 8;
    vc.global_scale_min = 0.8;
    vc.global_scale_max = 1.0;
    vc.jitter_strength = 0.0;
    vc.blur_prob = 0.0;
    vc.solarize_prob = 0.0;
    vc.grayscale_prob = 0.0;

    // One fixed batch of views; repeated full-batch steps must descend.
    std::vector<ViewBatch> batch;
    for (std::size_t i = 0; i < 8; ++i) {
        ViewConfig v = vc;
        v.rng_seed = 1000 + i;
        batch.push_back(
            make_views(load_dataset_image(root / "data", data.images[i]), {0, 1, 2}, v));
    }
    double prev = 0.0;
    int decreases = 0;
    for (int step = 0; step < 50; ++step) {
        DistillStepReport rep =
            distill_train_step(batch, models.enc_rgb, models.enc_ms, models.g_v, center, opt);
        if (step > 0 && rep.loss < prev) ++decreases;
        prev = rep.loss;
    }
    CHECK(decreases >= 45);
}

TEST_CASE("resolved config fed back reproduces the identical run") {
    fs::path root = temp_dir("echo");
    RunConfig cfg = smoke_config(root);
    SyntheticSpec spec{cfg.n_images, cfg.ms_channels, cfg.image_h, cfg.image_w, cfg.seed};
    gen_synthetic(spec, cfg.data_dir);
    auto manifest = load_prompt_manifest(fs::path(cfg.data_dir) / "prompts.json");
    save_text_bank(cfg.bank_dir, emit_text_bank(manifest, BankMode::pseudo, cfg.d_t,
                                                cfg.bank_tokens, cfg.pseudo_seed));
    RunConfig srd = cfg;
    srd.stage = "srd";
    srd.out_dir = (root / "first").string();
    run_stage(srd);

    RunConfig echoed = load_config(root / "first" / "resolved_config.json");
    echoed.out_dir = (root / "second").string();
    run_stage(echoed);
    CHECK(slurp(root / "first" / "metrics.csv") == slurp(root / "second" / "metrics.csv"));
    CHECK(slurp(root / "first" / "checkpoint" / "weights" / "gv_head_distill_w.stf") ==
          slurp(root / "second" / "checkpoint" / "weights" / "gv_head_distill_w.stf"));
}

TEST_CASE("pooling sweep emits three comparable reports") {
    fs::path root = temp_dir("sweep");
    RunConfig cfg = smoke_config(root);
    run_chain(cfg, root);

    RunConfig sweep = cfg;
    sweep.stage = "eval";
    sweep.eval_task = "retrieval";
    sweep.text_pooling = "sweep";
    sweep.out_dir = (root / "sweep").string();
    sweep.checkpoint = (root / "sgi" / "checkpoint").string();
    StageResult res = run_stage(sweep);

    CHECK(fs::exists(root / "sweep" / "report_retrieval_mean.json"));
    CHECK(fs::exists(root / "sweep" / "report_retrieval_bos.json"));
    CHECK(fs::exists(root / "sweep" / "report_retrieval_eos.json"));
    CHECK(fs::exists(root / "sweep" / "report_retrieval_sweep.json"));
    REQUIRE(res.reports.size() == 4);
    for (const auto& rep : res.reports) CHECK(rep.metric == "map100");
}

TEST_CASE("segmentation and similarity map artifacts are written") {
    fs::path root = temp_dir("segviz");
    RunConfig cfg = smoke_config(root);
    run_chain(cfg, root);

    RunConfig seg = cfg;
    seg.stage = "eval";
    seg.eval_task = "segment";
    seg.out_dir = (root / "seg").string();
    seg.checkpoint = (root / "sgi" / "checkpoint").string();
    StageResult seg_res = run_stage(seg);
    REQUIRE(seg_res.reports.size() == 1);
    CHECK(seg_res.reports[0].metric == "miou");
    CHECK(seg_res.reports[0].value >= 0.0);
    CHECK(seg_res.reports[0].value <= 1.0);

    RunConfig viz = cfg;
    viz.stage = "eval";
    viz.eval_task = "viz";
    viz.out_dir = (root / "viz").string();
    viz.checkpoint = (root / "sgi" / "checkpoint").string();
    run_stage(viz);
    bool found_pgm = false, found_sidecar = false;
    for (const auto& e : fs::directory_iterator(root / "viz")) {
        const std::string name = e.path().filename().string();
        if (name.starts_with("sim_") && name.ends_with(".pgm")) found_pgm = true;
        if (name.starts_with("sim_") && name.ends_with(".pgm.json")) found_sidecar = true;
    }
    CHECK(found_pgm);
    CHECK(found_sidecar);
}

TEST_CASE("probe stage runs from descriptors and from feature files") {
    fs::path root = temp_dir("probe");
    RunConfig cfg = smoke_config(root);
    run_chain(cfg, root);

    RunConfig probe = cfg;
    probe.stage = "probe";
    probe.out_dir = (root / "probe").string();
    probe.checkpoint = (root / "sgi" / "checkpoint").string();
    probe.probe_epochs = 5;
    StageResult res = run_stage(probe);
    REQUIRE(res.reports.size() == 1);
    CHECK(res.reports[0].metric == "accuracy");

    // File mode: features stay byte-identical after probing.
    Rng rng(44);
    const std::size_t n = 64;
    std::vector<double> rows(n * 4);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % 2);
        for (std::size_t j = 0; j < 4; ++j)
            rows[i * 4 + j] = (labels[i] ? 1.0 : -1.0) + rng.uniform(-0.2, 0.2);
    }
    stf_write(root / "features.stf", Tensor({n, 4}, rows));
    {
        std::ofstream lf(root / "labels.json");
        nlohmann::json lj = labels;
        lf << lj.dump() << "\n";
    }
    auto before = slurp(root / "features.stf");
    RunConfig file_probe;
    file_probe.stage = "probe";
    file_probe.seed = 3;
    file_probe.out_dir = (root / "probe_file").string();
    file_probe.features_file = (root / "features.stf").string();
    file_probe.labels_file = (root / "labels.json").string();
    file_probe.probe_epochs = 40;
    file_probe.probe_lr = 0.05;
    file_probe.probe_batch = 16;
    StageResult fres = run_stage(file_probe);
    CHECK(fres.reports[0].value == 1.0);
    CHECK(slurp(root / "features.stf") == before);
}

TEST_CASE("multilabel zero-shot harness runs") {
    fs::path root = temp_dir("ml");
    RunConfig cfg = smoke_config(root);
    run_chain(cfg, root);
    RunConfig zs = cfg;
    zs.stage = "eval";
    zs.eval_task = "zeroshot";
    zs.multilabel = true;
    zs.out_dir = (root / "zs_ml").string();
    zs.checkpoint = (root / "sgi" / "checkpoint").string();
    StageResult res = run_stage(zs);
    REQUIRE(res.reports.size() == 1);
    CHECK(res.reports[0].task == "zero_shot_multilabel");
    CHECK(res.reports[0].value >= 0.0);
    CHECK(res.reports[0].value <= 1.0);
}
