#pragma once

// Synthetic paired MS/RGB dataset. Bands 0-2 are smooth low-frequency color
// fields around a per-class palette; every higher band is a fixed
// band-specific saturating map of the RGB bands, so spectral content is
// recoverable from RGB by construction. Labels, captions and prompt
// manifests are all derived deterministically from the seed.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "satd/common.hpp"
#include "satd/rng.hpp"
#include "satd/stf.hpp"
#include "satd/tensor.hpp"

namespace satd {

struct LatentClass {
    const char* name;
    double r, g, b;
};

inline const std::vector<LatentClass>& latent_palette() {
    static const std::vector<LatentClass> palette = {
        {"forest", 0.16, 0.45, 0.20},
        {"river", 0.12, 0.30, 0.58},
        {"urban", 0.52, 0.49, 0.46},
        {"cropland", 0.58, 0.52, 0.22},
    };
    return palette;
}

// Fixed per-band saturating map applied to the RGB triple; independent of
// the dataset seed so it can be re-evaluated as an oracle.
inline double synthetic_band_value(std::size_t band, double r, double g, double b) {
    if (band < 3) throw ValueError("synthetic_band_value: bands below 3 are the RGB fields");
    const double k = static_cast<double>(band);
    const double w0 = 0.2 * std::sin(1.3 * k);
    const double w1 = 1.5 * std::cos(0.7 * k + 0.3);
    const double w2 = 1.5 * std::cos(0.7 * k + 2.4);
    const double w3 = 1.5 * std::cos(0.7 * k + 4.5);
    const double t = w0 + w1 * r + w2 * g + w3 * b;
    return 1.0 / (1.0 + std::exp(-3.0 * t));
}

inline std::string instance_caption(const std::string& class_name, std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04zu", index);
    return cat("a satellite image of ", class_name, ", tile ", buf);
}

inline std::string label_caption(const std::string& class_name) {
    return cat("a satellite image of ", class_name);
}

struct SyntheticSpec {
    std::size_t n = 64;
    std::size_t ms_channels = 6;
    std::size_t h = 64;
    std::size_t w = 64;
    std::uint64_t seed = 0;
};

inline Tensor synthetic_image(const SyntheticSpec& spec, std::size_t index) {
    const auto& palette = latent_palette();
    const LatentClass& cls = palette[index % palette.size()];
    const double base[3] = {cls.r, cls.g, cls.b};
    Rng rng(Rng::mix(Rng::mix(spec.seed, 0xDA7A), index));

    struct Wave {
        double amp, fx, fy, phase;
    };
    double offset[3];
    Wave waves[3][2];
    for (int c = 0; c < 3; ++c) {
        offset[c] = rng.uniform(-0.09, 0.09);
        for (int j = 0; j < 2; ++j)
            waves[c][j] = {rng.uniform(0.03, 0.09), rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5),
                           rng.uniform(0.0, 6.283185307179586)};
    }

    const std::size_t c_ms = spec.ms_channels, h = spec.h, w = spec.w;
    std::vector<double> img(c_ms * h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double rgb[3];
            for (int c = 0; c < 3; ++c) {
                double v = base[c] + offset[c];
                for (int j = 0; j < 2; ++j) {
                    const Wave& wv = waves[c][j];
                    v += wv.amp *
                         std::sin(6.283185307179586 *
                                      (wv.fx * static_cast<double>(x) / static_cast<double>(w) +
                                       wv.fy * static_cast<double>(y) / static_cast<double>(h)) +
                                  wv.phase);
                }
                rgb[c] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                img[(static_cast<std::size_t>(c) * h + y) * w + x] = rgb[c];
            }
            for (std::size_t band = 3; band < c_ms; ++band)
                img[(band * h + y) * w + x] =
                    synthetic_band_value(band, rgb[0], rgb[1], rgb[2]);
        }
    return Tensor({c_ms, h, w}, std::move(img));
}

struct DatasetImage {
    std::string id;
    std::string file;
    std::size_t class_index = 0;
    std::string class_name;
    std::string caption;
    std::string split;  // train | eval
};

struct DatasetManifest {
    std::size_t n = 0, ms_channels = 0, h = 0, w = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> classes;
    std::vector<double> band_mean, band_std;
    std::vector<DatasetImage> images;
};

// Every fourth block of four images is held out for evaluation, which keeps
// the class distribution of both splits balanced.
inline bool synthetic_is_eval(std::size_t index) { return (index / 4) % 4 == 3; }

inline void gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    if (spec.ms_channels < 4)
        throw ValueError(cat("gen_synthetic: need at least 4 MS channels, got ",
                             spec.ms_channels));
    namespace fs = std::filesystem;
    fs::create_directories(out_dir / "images");

    const auto& palette = latent_palette();
    std::vector<double> mean(spec.ms_channels, 0.0), m2(spec.ms_channels, 0.0);
    nlohmann::json images = nlohmann::json::array();
    std::size_t pixel_count = 0;

    for (std::size_t i = 0; i < spec.n; ++i) {
        Tensor img = synthetic_image(spec, i);
        const LatentClass& cls = palette[i % palette.size()];
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "img-%04zu", i);
        const std::string id = idbuf;
        const std::string file = cat("images/", id, ".stf");
        stf_write(out_dir / file, img);

        const std::size_t hw = spec.h * spec.w;
        for (std::size_t c = 0; c < spec.ms_channels; ++c)
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = img.data()[c * hw + p];
                mean[c] += v;
                m2[c] += v * v;
            }
        pixel_count += hw;

        images.push_back({{"id", id},
                          {"file", file},
                          {"class", i % palette.size()},
                          {"class_name", cls.name},
                          {"caption", instance_caption(cls.name, i)},
                          {"split", synthetic_is_eval(i) ? "eval" : "train"}});
    }

    std::vector<double> stddev(spec.ms_channels, 1.0);
    if (pixel_count > 0) {
        for (std::size_t c = 0; c < spec.ms_channels; ++c) {
            mean[c] /= static_cast<double>(pixel_count);
            const double var = m2[c] / static_cast<double>(pixel_count) - mean[c] * mean[c];
            stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
        }
    } else {
        std::fill(mean.begin(), mean.end(), 0.0);
    }

    std::vector<std::string> class_names;
    for (const auto& c : palette) class_names.push_back(c.name);

    nlohmann::json manifest = {{"format", "satd-dataset-v1"},
                               {"n", spec.n},
                               {"ms_channels", spec.ms_channels},
                               {"h", spec.h},
                               {"w", spec.w},
                               {"seed", spec.seed},
                               {"classes", class_names},
                               {"band_mean", mean},
                               {"band_std", stddev},
                               {"images", images}};
    std::ofstream mf(out_dir / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError(cat("gen_synthetic: cannot write manifest under '",
                               out_dir.string(), "'"));

    // Prompt manifest: one row per (caption, instruction) pair, instance
    // captions first, then the label prompts for the class vocabulary.
    nlohmann::json prompts = nlohmann::json::array();
    for (std::size_t i = 0; i < spec.n; ++i) {
        const LatentClass& cls = palette[i % palette.size()];
        char idbuf[16];
        std::snprintf(idbuf, sizeof(idbuf), "cap-%04zu", i);
        for (std::size_t instr = 0; instr < 5; ++instr)
            prompts.push_back({{"prompt_id", cat(idbuf, "#", instr)},
                               {"caption", instance_caption(cls.name, i)},
                               {"instruction_index", instr}});
    }
    for (const auto& cls : palette)
        for (std::size_t instr = 0; instr < 5; ++instr)
            prompts.push_back({{"prompt_id", cat("lbl-", cls.name, "#", instr)},
                               {"caption", label_caption(cls.name)},
                               {"instruction_index", instr}});
    std::ofstream pf(out_dir / "prompts.json", std::ios::trunc);
    pf << prompts.dump(2) << "\n";
    if (!pf) throw IoError(cat("gen_synthetic: cannot write prompt manifest under '",
                               out_dir.string(), "'"));
}

inline DatasetManifest load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw DataError(cat("dataset: cannot open '", (dir / "manifest.json").string(), "'"));
    nlohmann::json j;
    in >> j;
    DatasetManifest m;
    m.n = j.at("n").get<std::size_t>();
    m.ms_channels = j.at("ms_channels").get<std::size_t>();
    m.h = j.at("h").get<std::size_t>();
    m.w = j.at("w").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.band_mean = j.at("band_mean").get<std::vector<double>>();
    m.band_std = j.at("band_std").get<std::vector<double>>();
    for (const auto& e : j.at("images")) {
        DatasetImage img;
        img.id = e.at("id").get<std::string>();
        img.file = e.at("file").get<std::string>();
        img.class_index = e.at("class").get<std::size_t>();
        img.class_name = e.at("class_name").get<std::string>();
        img.caption = e.at("caption").get<std::string>();
        img.split = e.at("split").get<std::string>();
        m.images.push_back(std::move(img));
    }
    return m;
}

inline Tensor load_dataset_image(const std::filesystem::path& dir, const DatasetImage& img) {
    return stf_read(dir / img.file);
}

struct PromptRow {
    std::string prompt_id;
    std::string caption;
    std::size_t instruction_index = 0;
};

inline std::vector<PromptRow> load_prompt_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(cat("prompts: cannot open '", path.string(), "'"));
    nlohmann::json j;
    in >> j;
    if (!j.is_array()) throw DataError("prompts: manifest must be a JSON array");
    std::vector<PromptRow> rows;
    for (const auto& e : j) {
        PromptRow r;
        r.prompt_id = e.at("prompt_id").get<std::string>();
        r.caption = e.at("caption").get<std::string>();
        r.instruction_index = e.at("instruction_index").get<std::size_t>();
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace satd
