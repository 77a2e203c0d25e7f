#pragma once

// Multi-crop augmentation. MS views are global-only and photometrically
// clean; RGB views add local crops and photometric noise. Global crops share
// their source rectangle (and flip) between the MS and RGB sets so the pair
// at index i is geometrically identical.

#include <array>
#include <vector>

#include "satd/common.hpp"
#include "satd/rng.hpp"
#include "satd/tensor.hpp"

namespace satd {

struct CropRect {
    std::size_t x = 0, y = 0, w = 0, h = 0;
    bool flip = false;

    bool operator==(const CropRect&) const = default;
};

struct PhotometricParams {
    double jitter_strength = 0.4;
    double blur_prob = 0.1;
    double solarize_prob = 0.2;
    double grayscale_prob = 0.2;
    double solarize_threshold = 0.5;
};

struct ViewConfig {
    std::size_t n_global = 2;
    std::size_t n_local = 8;
    std::size_t global_size = 128;
    std::size_t local_size = 96;
    double global_scale_min = 0.4, global_scale_max = 1.0;
    double local_scale_min = 0.05, local_scale_max = 0.4;
    double jitter_strength = 0.4;
    double blur_prob = 0.1;
    double solarize_prob = 0.2;
    double grayscale_prob = 0.2;
    double flip_prob = 0.5;
    std::uint64_t rng_seed = 0;
    // Per-modality normalization; empty means identity.
    std::vector<double> ms_mean, ms_std, rgb_mean, rgb_std;

    PhotometricParams photometric() const {
        return {jitter_strength, blur_prob, solarize_prob, grayscale_prob, 0.5};
    }
};

struct ViewBatch {
    std::vector<Tensor> ms_views;        // n_global, C_ms x g x g
    std::vector<Tensor> rgb_views;       // n_global + n_local, 3 x s x s
    std::vector<CropRect> ms_crops;      // one per MS view
    std::vector<CropRect> rgb_crops;     // one per RGB view (globals first)
};

namespace viewdetail {

inline double sample_at(const double* ch, std::size_t h, std::size_t w, double fy, double fx) {
    if (fy < 0) fy = 0;
    if (fx < 0) fx = 0;
    if (fy > static_cast<double>(h - 1)) fy = static_cast<double>(h - 1);
    if (fx > static_cast<double>(w - 1)) fx = static_cast<double>(w - 1);
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t x0 = static_cast<std::size_t>(fx);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const std::size_t x1 = std::min(x0 + 1, w - 1);
    const double dy = fy - static_cast<double>(y0);
    const double dx = fx - static_cast<double>(x0);
    const double a = ch[y0 * w + x0], b = ch[y0 * w + x1];
    const double c = ch[y1 * w + x0], d = ch[y1 * w + x1];
    return a * (1 - dy) * (1 - dx) + b * (1 - dy) * dx + c * dy * (1 - dx) + d * dy * dx;
}

}  // namespace viewdetail

// Bilinear crop-and-resize with half-pixel centers; sampling stays inside the
// source rectangle.
inline Tensor crop_resize(const Tensor& img, const CropRect& rect, std::size_t out) {
    if (img.ndim() != 3)
        throw ShapeError(cat("crop_resize: expected CxHxW image, got ", shape_str(img.dims())));
    const std::size_t c = img.dims()[0], h = img.dims()[1], w = img.dims()[2];
    if (rect.w == 0 || rect.h == 0 || rect.x + rect.w > w || rect.y + rect.h > h)
        throw ValueError(cat("crop_resize: rectangle ", rect.x, ",", rect.y, " ", rect.w, "x",
                             rect.h, " outside image ", h, "x", w));
    std::vector<double> dst(c * out * out);
    const double sy = static_cast<double>(rect.h) / static_cast<double>(out);
    const double sx = static_cast<double>(rect.w) / static_cast<double>(out);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = img.data().data() + ch * h * w;
        for (std::size_t j = 0; j < out; ++j) {
            double v = (static_cast<double>(j) + 0.5) * sy - 0.5;
            if (v < 0) v = 0;
            if (v > static_cast<double>(rect.h - 1)) v = static_cast<double>(rect.h - 1);
            const double fy = static_cast<double>(rect.y) + v;
            for (std::size_t i = 0; i < out; ++i) {
                double u = (static_cast<double>(i) + 0.5) * sx - 0.5;
                if (u < 0) u = 0;
                if (u > static_cast<double>(rect.w - 1)) u = static_cast<double>(rect.w - 1);
                if (rect.flip) u = static_cast<double>(rect.w - 1) - u;
                const double fx = static_cast<double>(rect.x) + u;
                dst[(ch * out + j) * out + i] = viewdetail::sample_at(src, h, w, fy, fx);
            }
        }
    }
    return Tensor({c, out, out}, std::move(dst));
}

inline Tensor select_bands(const Tensor& img, const std::array<std::size_t, 3>& bands) {
    const std::size_t c = img.dims()[0], h = img.dims()[1], w = img.dims()[2];
    for (std::size_t b : bands)
        if (b >= c) throw ValueError(cat("select_bands: band ", b, " out of range for ", c,
                                         " channels"));
    std::vector<double> out(3 * h * w);
    for (std::size_t k = 0; k < 3; ++k)
        std::copy_n(img.data().data() + bands[k] * h * w, h * w, out.data() + k * h * w);
    return Tensor({3, h, w}, std::move(out));
}

// Channel-wise standardization: (v - mean_c) / std_c.
inline Tensor normalize_modality(const Tensor& view, const std::vector<double>& mean,
                                 const std::vector<double>& std) {
    if (mean.empty() && std.empty()) return view;
    const std::size_t c = view.dims()[0], hw = view.size() / c;
    if (mean.size() != c || std.size() != c)
        throw ValueError(cat("normalize_modality: got ", mean.size(), "/", std.size(),
                             " stats for ", c, " channels"));
    for (double s : std)
        if (!(s > 0.0)) throw ValueError("normalize_modality: std entries must be positive");
    std::vector<double> out(view.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i)
            out[ch * hw + i] = (view.data()[ch * hw + i] - mean[ch]) / std[ch];
    return Tensor(view.dims(), std::move(out));
}

// RGB-only photometric augmentation. Pixels are expected in [0,1] and the
// result is clamped back into [0,1]. Zero strengths and probabilities leave
// the view bit-identical; draws are still consumed so the stream position
// does not depend on parameter values.
inline Tensor photometric_rgb(const Tensor& view, const PhotometricParams& p, Rng& rng) {
    if (view.ndim() != 3 || view.dims()[0] != 3)
        throw ShapeError(cat("photometric_rgb: expected 3xSxS view, got ",
                             shape_str(view.dims())));
    const std::size_t s = view.dims()[1];
    const std::size_t hw = s * view.dims()[2];
    std::vector<double> px = view.data();
    auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };

    const double ub = rng.uniform(-1.0, 1.0);
    const double uc = rng.uniform(-1.0, 1.0);
    const double us = rng.uniform(-1.0, 1.0);
    if (p.jitter_strength > 0.0) {
        const double fb = 1.0 + p.jitter_strength * ub;
        for (double& v : px) v = clamp01(v * fb);
        double mean = 0.0;
        for (double v : px) mean += v;
        mean /= static_cast<double>(px.size());
        const double fc = 1.0 + p.jitter_strength * uc;
        for (double& v : px) v = clamp01(mean + (v - mean) * fc);
        const double fs = 1.0 + p.jitter_strength * us;
        for (std::size_t i = 0; i < hw; ++i) {
            const double gray = 0.299 * px[i] + 0.587 * px[hw + i] + 0.114 * px[2 * hw + i];
            for (std::size_t ch = 0; ch < 3; ++ch)
                px[ch * hw + i] = clamp01(gray + (px[ch * hw + i] - gray) * fs);
        }
    }

    if (rng.coin(p.grayscale_prob)) {
        for (std::size_t i = 0; i < hw; ++i) {
            const double gray = 0.299 * px[i] + 0.587 * px[hw + i] + 0.114 * px[2 * hw + i];
            px[i] = gray;
            px[hw + i] = gray;
            px[2 * hw + i] = gray;
        }
    }

    if (rng.coin(p.blur_prob)) {
        // Separable 3x3 binomial kernel with replicated edges.
        std::vector<double> tmp(px.size());
        const std::size_t w = view.dims()[2];
        for (std::size_t ch = 0; ch < 3; ++ch) {
            const double* in = px.data() + ch * hw;
            double* out = tmp.data() + ch * hw;
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const std::size_t xl = x == 0 ? 0 : x - 1;
                    const std::size_t xr = x + 1 >= w ? w - 1 : x + 1;
                    out[y * w + x] =
                        0.25 * in[y * w + xl] + 0.5 * in[y * w + x] + 0.25 * in[y * w + xr];
                }
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const std::size_t yu = y == 0 ? 0 : y - 1;
                    const std::size_t yd = y + 1 >= s ? s - 1 : y + 1;
                    px[ch * hw + y * w + x] = 0.25 * out[yu * w + x] + 0.5 * out[y * w + x] +
                                              0.25 * out[yd * w + x];
                }
        }
    }

    if (rng.coin(p.solarize_prob)) {
        for (double& v : px)
            if (v >= p.solarize_threshold) v = 1.0 - v;
    }

    return Tensor(view.dims(), std::move(px));
}

namespace viewdetail {

inline CropRect sample_crop(Rng& rng, std::size_t h, std::size_t w, double scale_min,
                            double scale_max, double flip_prob) {
    const double area = static_cast<double>(h) * static_cast<double>(w);
    CropRect r;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
        const double s = rng.uniform(scale_min, scale_max);
        const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
        const double aspect = std::exp(log_ratio);
        const auto cw = static_cast<std::size_t>(std::sqrt(area * s * aspect) + 0.5);
        const auto ch = static_cast<std::size_t>(std::sqrt(area * s / aspect) + 0.5);
        if (cw >= 1 && ch >= 1 && cw <= w && ch <= h) {
            r.w = cw;
            r.h = ch;
            r.x = static_cast<std::size_t>(rng.below(w - cw + 1));
            r.y = static_cast<std::size_t>(rng.below(h - ch + 1));
            placed = true;
        }
    }
    if (!placed) {
        // Degenerate scale/aspect combination: fall back to the full image.
        r = CropRect{0, 0, w, h, false};
    }
    r.flip = rng.coin(flip_prob);
    return r;
}

}  // namespace viewdetail

inline ViewBatch make_views(const Tensor& x_ms, const std::array<std::size_t, 3>& rgb_bands,
                            const ViewConfig& cfg) {
    if (x_ms.ndim() != 3)
        throw ShapeError(cat("make_views: expected CxHxW image, got ", shape_str(x_ms.dims())));
    if (cfg.n_global < 1) throw ValueError("make_views: n_global must be at least 1");
    if (cfg.local_size > cfg.global_size)
        throw ValueError("make_views: local_size must not exceed global_size");
    const std::size_t h = x_ms.dims()[1], w = x_ms.dims()[2];
    if (h < cfg.global_size || w < cfg.global_size)
        throw ValueError(cat("make_views: image ", h, "x", w, " smaller than global crop size ",
                             cfg.global_size));

    Rng geom(cfg.rng_seed);
    std::vector<CropRect> global_rects, local_rects;
    for (std::size_t i = 0; i < cfg.n_global; ++i)
        global_rects.push_back(viewdetail::sample_crop(geom, h, w, cfg.global_scale_min,
                                                       cfg.global_scale_max, cfg.flip_prob));
    for (std::size_t i = 0; i < cfg.n_local; ++i)
        local_rects.push_back(viewdetail::sample_crop(geom, h, w, cfg.local_scale_min,
                                                      cfg.local_scale_max, cfg.flip_prob));

    Tensor rgb_full = select_bands(x_ms, rgb_bands);
    const PhotometricParams photo = cfg.photometric();

    ViewBatch batch;
    for (std::size_t i = 0; i < cfg.n_global; ++i) {
        batch.ms_views.push_back(normalize_modality(
            crop_resize(x_ms, global_rects[i], cfg.global_size), cfg.ms_mean, cfg.ms_std));
        batch.ms_crops.push_back(global_rects[i]);

        Rng photo_rng = geom.fork(Rng::mix(0xF07D, i));
        Tensor view = crop_resize(rgb_full, global_rects[i], cfg.global_size);
        view = photometric_rgb(view, photo, photo_rng);
        batch.rgb_views.push_back(normalize_modality(view, cfg.rgb_mean, cfg.rgb_std));
        batch.rgb_crops.push_back(global_rects[i]);
    }
    for (std::size_t i = 0; i < cfg.n_local; ++i) {
        Rng photo_rng = geom.fork(Rng::mix(0xF07D, cfg.n_global + i));
        Tensor view = crop_resize(rgb_full, local_rects[i], cfg.local_size);
        view = photometric_rgb(view, photo, photo_rng);
        batch.rgb_views.push_back(normalize_modality(view, cfg.rgb_mean, cfg.rgb_std));
        batch.rgb_crops.push_back(local_rects[i]);
    }
    return batch;
}

}  // namespace satd
