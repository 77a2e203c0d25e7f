#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "satd/bank_io.hpp"
#include "satd/checkpoint.hpp"
#include "satd/config.hpp"
#include "satd/stf.hpp"
#include "satd/synthetic.hpp"

using namespace satd;
using satd::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("satd_test_" + tag);
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

bool identical_trees(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> files_a, files_b;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) files_a.push_back(fs::relative(e.path(), a));
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) files_b.push_back(fs::relative(e.path(), b));
    std::sort(files_a.begin(), files_a.end());
    std::sort(files_b.begin(), files_b.end());
    if (files_a != files_b) return false;
    for (const auto& rel : files_a)
        if (slurp(a / rel) != slurp(b / rel)) return false;
    return true;
}

}  // namespace

TEST_CASE("stf round-trips are bit-exact across ranks") {
    fs::path dir = temp_dir("stf");
    Rng rng(81);
    std::vector<std::vector<std::size_t>> shapes = {{}, {7}, {3, 4}, {3, 4, 5}, {2, 3, 2, 2}};
    for (const auto& shape : shapes) {
        Tensor t = random_tensor(shape, rng, -10, 10);
        const fs::path p = dir / cat("rank", shape.size(), ".stf");
        stf_write(p, t);
        Tensor u = stf_read(p);
        CHECK(u.dims() == t.dims());
        CHECK(u.data() == t.data());

        // Writing again reproduces the file byte for byte.
        const fs::path p2 = dir / cat("rank", shape.size(), "_again.stf");
        stf_write(p2, u);
        CHECK(slurp(p) == slurp(p2));
    }
}

TEST_CASE("stf f32 payloads round-trip stably after one narrowing") {
    fs::path dir = temp_dir("stf32");
    Rng rng(82);
    Tensor t = random_tensor({4, 4}, rng);
    stf_write(dir / "a.stf", t, StfDtype::f32);
    Tensor narrowed = stf_read(dir / "a.stf");
    stf_write(dir / "b.stf", narrowed, StfDtype::f32);
    CHECK(slurp(dir / "a.stf") == slurp(dir / "b.stf"));
}

TEST_CASE("stf rejects corruption with offsets") {
    fs::path dir = temp_dir("stfbad");
    Rng rng(83);
    Tensor t = random_tensor({2, 2}, rng);
    stf_write(dir / "good.stf", t);

    auto bytes = slurp(dir / "good.stf");
    bytes[0] = 'X';
    std::ofstream(dir / "badmagic.stf", std::ios::binary)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(stf_read(dir / "badmagic.stf"), IoError);

    auto good = slurp(dir / "good.stf");
    std::ofstream(dir / "short.stf", std::ios::binary)
        .write(good.data(), static_cast<std::streamsize>(good.size() - 9));
    CHECK_THROWS_AS(stf_read(dir / "short.stf"), IoError);
    CHECK_THROWS_AS(stf_read(dir / "missing.stf"), IoError);
}

TEST_CASE("config defaults, overrides and rejection") {
    RunConfig defaults = config_from_json(nlohmann::json::object());
    CHECK(defaults.tau_s == 0.1);
    CHECK(defaults.tau_t == 0.06);
    CHECK(defaults.m_c == 0.9);
    CHECK(defaults.srd_lr == 5e-4);
    CHECK(defaults.sgi_lr == 4e-5);
    CHECK(defaults.srd_epochs == 5);
    CHECK(defaults.srd_batch == 128);
    CHECK(defaults.sgi_epochs == 10);
    CHECK(defaults.sgi_batch == 1024);
    CHECK(defaults.sgi_tau == 0.07);
    CHECK(defaults.n_global == 2);
    CHECK(defaults.n_local == 8);
    CHECK(defaults.global_size == 128);
    CHECK(defaults.local_size == 96);
    CHECK(defaults.probe_epochs == 30);
    CHECK(defaults.probe_batch == 128);
    CHECK(defaults.probe_lr == 1e-4);
    CHECK(defaults.probe_weight_decay == 0.05);
    CHECK(defaults.map_k == 100);
    CHECK(defaults.text_pooling == "mean");

    RunConfig one = config_from_json({{"srd_batch", 8}});
    CHECK(one.srd_batch == 8);
    CHECK(one.tau_s == defaults.tau_s);

    CHECK_THROWS_WITH_AS(config_from_json({{"tau_x", 1.0}}),
                         "config: unknown key \"tau_x\"", ConfigError);
    CHECK_THROWS_AS(config_from_json({{"nested", nlohmann::json::object()}}), ConfigError);
    CHECK_THROWS_AS(config_from_json({{"tau_s", "fast"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json::array()), ConfigError);
}

TEST_CASE("config echo reloads to the same resolved config") {
    RunConfig cfg = config_from_json({{"srd_batch", 16}, {"tau_t", 0.05}, {"seed", 99}});
    nlohmann::json echoed = resolved_config_json(cfg);
    RunConfig again = config_from_json(echoed);
    CHECK(resolved_config_json(again) == echoed);
    CHECK(config_digest(again) == config_digest(cfg));

    // Paths do not change the semantic digest; semantic keys do.
    RunConfig moved = cfg;
    moved.out_dir = "/somewhere/else";
    CHECK(config_digest(moved) == config_digest(cfg));
    RunConfig tweaked = cfg;
    tweaked.tau_t = 0.04;
    CHECK(config_digest(tweaked) != config_digest(cfg));
}

TEST_CASE("synthetic generation is seed-deterministic") {
    SyntheticSpec spec{12, 5, 16, 16, 77};
    fs::path a = temp_dir("gen_a");
    fs::path b = temp_dir("gen_b");
    gen_synthetic(spec, a);
    gen_synthetic(spec, b);
    CHECK(identical_trees(a, b));

    SyntheticSpec other = spec;
    other.seed = 78;
    fs::path c = temp_dir("gen_c");
    gen_synthetic(other, c);
    CHECK_FALSE(identical_trees(a, c));
}

TEST_CASE("synthetic bands beyond RGB follow their defining map") {
    SyntheticSpec spec{4, 6, 12, 12, 5};
    fs::path dir = temp_dir("gen_bands");
    gen_synthetic(spec, dir);
    DatasetManifest m = load_dataset(dir);
    REQUIRE(m.images.size() == 4);
    for (const auto& img : m.images) {
        Tensor t = load_dataset_image(dir, img);
        const std::size_t hw = 12 * 12;
        for (std::size_t band = 3; band < 6; ++band)
            for (std::size_t p = 0; p < hw; ++p) {
                const double expect = synthetic_band_value(band, t.data()[p],
                                                           t.data()[hw + p],
                                                           t.data()[2 * hw + p]);
                CHECK(std::abs(t.data()[band * hw + p] - expect) <= 1e-12);
            }
    }
}

TEST_CASE("empty synthetic dataset still has a valid manifest") {
    SyntheticSpec spec{0, 4, 8, 8, 1};
    fs::path dir = temp_dir("gen_empty");
    gen_synthetic(spec, dir);
    DatasetManifest m = load_dataset(dir);
    CHECK(m.n == 0);
    CHECK(m.images.empty());
    CHECK(m.band_mean.size() == 4);
}

TEST_CASE("synthetic captions and split structure") {
    SyntheticSpec spec{32, 4, 8, 8, 3};
    fs::path dir = temp_dir("gen_caps");
    gen_synthetic(spec, dir);
    DatasetManifest m = load_dataset(dir);
    std::size_t eval_count = 0;
    for (std::size_t i = 0; i < m.images.size(); ++i) {
        CHECK(m.images[i].class_index == i % 4);
        CHECK(m.images[i].caption ==
              instance_caption(m.classes[m.images[i].class_index], i));
        if (m.images[i].split == "eval") ++eval_count;
    }
    CHECK(eval_count == 8);  // one block of four in every sixteen images

    auto prompts = load_prompt_manifest(dir / "prompts.json");
    CHECK(prompts.size() == 32 * 5 + 4 * 5);
    // Label prompts cover every class at every instruction index.
    for (const auto& cls : m.classes) {
        for (std::size_t instr = 0; instr < 5; ++instr) {
            bool found = false;
            for (const auto& row : prompts)
                found = found || row.prompt_id == cat("lbl-", cls, "#", instr);
            CHECK(found);
        }
    }
}

TEST_CASE("text bank round-trips through its directory format") {
    fs::path dir = temp_dir("bank");
    std::vector<PromptRow> manifest = {{"cap-0000#0", "a satellite image of forest, tile 0000", 0},
                                       {"cap-0001#2", "a satellite image of river, tile 0001", 2},
                                       {"lbl-forest#0", "a satellite image of forest", 0}};
    TextBank bank = emit_text_bank(manifest, BankMode::pseudo, 8, 3, 42);
    CHECK(bank.size() == 3);
    CHECK(bank.at("cap-0001#2").instruction == instruction_list()[2]);

    save_text_bank(dir, bank);
    TextBank loaded = load_text_bank(dir);
    CHECK(loaded.size() == 3);
    CHECK(loaded.token_width() == 8);
    CHECK(loaded.at("cap-0000#0").tokens.data() == bank.at("cap-0000#0").tokens.data());
    CHECK(loaded.at("lbl-forest#0").caption == "a satellite image of forest");

    // Pseudo banks are deterministic in the seed.
    TextBank again = emit_text_bank(manifest, BankMode::pseudo, 8, 3, 42);
    CHECK(again.at("cap-0001#2").tokens.data() == bank.at("cap-0001#2").tokens.data());
    TextBank other = emit_text_bank(manifest, BankMode::pseudo, 8, 3, 43);
    CHECK(other.at("cap-0001#2").tokens.data() != bank.at("cap-0001#2").tokens.data());
}

TEST_CASE("bank import pairs ids with stf files and names missing ids") {
    fs::path dir = temp_dir("bank_import");
    fs::create_directories(dir / "tokens_in");
    Rng rng(84);
    stf_write(dir / "tokens_in" / "p0.stf", random_tensor({2, 6}, rng));
    std::vector<PromptRow> manifest = {{"p0", "caption zero", 0}, {"p1", "caption one", 1}};
    CHECK_THROWS_WITH_AS(
        emit_text_bank(manifest, BankMode::import, 6, 2, 0, dir / "tokens_in"),
        "bank import: missing token files for prompt ids: p1", DataError);

    stf_write(dir / "tokens_in" / "p1.stf", random_tensor({4, 6}, rng));
    TextBank bank = emit_text_bank(manifest, BankMode::import, 6, 2, 0, dir / "tokens_in");
    CHECK(bank.at("p0").tokens.dims() == std::vector<std::size_t>{2, 6});
    CHECK(bank.at("p1").tokens.dims() == std::vector<std::size_t>{4, 6});  // k may vary
}

TEST_CASE("encoder weights export and import through stf files") {
    fs::path dir = temp_dir("encw");
    Encoder a = Encoder::seeded({Modality::ms, 5, 4, 8, 2, 91});
    save_encoder_weights(dir / "w", a);

    Encoder b = Encoder::seeded({Modality::ms, 5, 4, 8, 2, 92});
    CHECK(b.weight_digest() != a.weight_digest());
    load_encoder_weights(dir / "w", b);
    CHECK(b.weight_digest() == a.weight_digest());

    Rng rng(93);
    Tensor img = random_tensor({5, 8, 8}, rng, 0.0, 1.0);
    TokenGrid ga = a.encode(img);
    TokenGrid gb = b.encode(img);
    CHECK(ga.patches.data() == gb.patches.data());

    Encoder wrong = Encoder::seeded({Modality::ms, 5, 4, 16, 2, 94});
    CHECK_THROWS_AS(load_encoder_weights(dir / "w", wrong), IoError);
}

TEST_CASE("checkpoints load back byte-identically") {
    fs::path dir = temp_dir("ckpt");
    Rng rng(85);
    Checkpoint ckpt;
    ckpt.stage = "srd";
    ckpt.step = 123;
    ckpt.config_digest = "a1b2";
    ckpt.config = resolved_config_json(RunConfig{});
    ckpt.weight_digests["enc_rgb"] = "f00";
    ckpt.tensors["alpha"] = random_tensor({3, 3}, rng);
    ckpt.tensors["beta"] = random_tensor({7}, rng);
    save_checkpoint(dir / "one", ckpt);

    Checkpoint loaded = load_checkpoint(dir / "one");
    CHECK(loaded.stage == "srd");
    CHECK(loaded.step == 123);
    CHECK(loaded.tensors.at("alpha").data() == ckpt.tensors.at("alpha").data());

    save_checkpoint(dir / "two", loaded);
    CHECK(slurp(dir / "one" / "weights" / "alpha.stf") ==
          slurp(dir / "two" / "weights" / "alpha.stf"));
    CHECK(slurp(dir / "one" / "weights" / "beta.stf") ==
          slurp(dir / "two" / "weights" / "beta.stf"));
    CHECK(slurp(dir / "one" / "manifest.json") == slurp(dir / "two" / "manifest.json"));
}
