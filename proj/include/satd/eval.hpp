#pragma once

// Downstream evaluation: zero-shot classification (single- and multi-label),
// ranked retrieval with mAP@k, linear probing on frozen features,
// patch-to-text similarity maps and decoder-free segmentation with mIoU.

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "satd/common.hpp"
#include "satd/encoders.hpp"
#include "satd/optim.hpp"
#include "satd/rng.hpp"
#include "satd/tensor.hpp"

namespace satd {

struct LabelSet {
    std::vector<std::string> classes;
    Tensor prompt_embeddings;  // C x 2 d_v, row-aligned with classes

    LabelSet(std::vector<std::string> names, Tensor embeddings)
        : classes(std::move(names)), prompt_embeddings(std::move(embeddings)) {
        if (classes.size() < 2)
            throw ConfigError("label set: need at least two classes");
        if (prompt_embeddings.ndim() != 2 || prompt_embeddings.dims()[0] != classes.size())
            throw ConfigError(cat("label set: embeddings ",
                                  shape_str(prompt_embeddings.dims()), " do not align with ",
                                  classes.size(), " classes"));
    }

    std::size_t count() const { return classes.size(); }
    std::size_t width() const { return prompt_embeddings.dims()[1]; }
};

struct EvalReport {
    std::string task;
    std::string metric;  // accuracy | f1_macro | map100 | miou | map_multilabel
    double value = 0.0;
    std::vector<double> per_class;
    std::vector<std::string> notes;
};

namespace evaldetail {

inline std::vector<double> cosine_to_prompts(const Tensor& z, const LabelSet& labels) {
    if (z.ndim() != 1 || z.size() != labels.width())
        throw ConfigError(cat("label similarity: embedding ", shape_str(z.dims()),
                              " does not match prompt width ", labels.width()));
    Tensor sims = cosine_sim_matrix(reshape(z, {1, z.size()}), labels.prompt_embeddings);
    return sims.data();
}

}  // namespace evaldetail

// Argmax over cosine similarity to the class prompts; ties break to the
// lowest index.
inline std::size_t zero_shot_classify(const Tensor& z_v, const LabelSet& labels) {
    const std::vector<double> sims = evaldetail::cosine_to_prompts(z_v, labels);
    std::size_t best = 0;
    for (std::size_t c = 1; c < sims.size(); ++c)
        if (sims[c] > sims[best]) best = c;
    return best;
}

// One-vs-rest decomposition: class c is positive iff its similarity exceeds
// the mean similarity of the other classes by more than `margin`.
inline std::vector<bool> multilabel_one_vs_rest(const Tensor& z_v, const LabelSet& labels,
                                                double margin = 0.0) {
    const std::vector<double> sims = evaldetail::cosine_to_prompts(z_v, labels);
    const double total = std::accumulate(sims.begin(), sims.end(), 0.0);
    std::vector<bool> out(sims.size());
    for (std::size_t c = 0; c < sims.size(); ++c) {
        const double rest = (total - sims[c]) / static_cast<double>(sims.size() - 1);
        out[c] = sims[c] > rest + margin;
    }
    return out;
}

enum class ApDenominator { min_k_relevant, relevant_only };

// Average precision over the top k of one ranked list. Ranking is stable
// descending (score, then index). Queries without relevant items score 0.
inline double average_precision_at_k(const double* scores, const std::uint8_t* relevant,
                                     std::size_t n, std::size_t k, ApDenominator denom) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t total_relevant = 0;
    for (std::size_t i = 0; i < n; ++i) total_relevant += relevant[i] ? 1 : 0;
    if (total_relevant == 0) return 0.0;
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t rank = 0; rank < std::min(k, n); ++rank) {
        if (relevant[order[rank]]) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    const std::size_t d = denom == ApDenominator::min_k_relevant
                              ? std::min<std::size_t>(k, total_relevant)
                              : total_relevant;
    return ap / static_cast<double>(d);
}

// Mean AP@k over queries. scores is Q x N; relevance is row-major Q x N.
// Queries with zero relevant items contribute 0 and are reported through
// `flagged` when provided.
inline double map_at_k(const Tensor& scores, const std::vector<std::uint8_t>& relevance,
                       std::size_t k = 100,
                       ApDenominator denom = ApDenominator::min_k_relevant,
                       std::vector<std::size_t>* flagged = nullptr) {
    if (scores.ndim() != 2)
        throw ShapeError(cat("map_at_k: expected Q x N scores, got ", shape_str(scores.dims())));
    const std::size_t q = scores.dims()[0], n = scores.dims()[1];
    if (relevance.size() != q * n)
        throw ShapeError(cat("map_at_k: relevance size ", relevance.size(), " does not match ",
                             q, "x", n));
    if (k == 0 || k > n)
        throw ValueError(cat("map_at_k: k = ", k, " must lie in [1, ", n, "]"));
    double acc = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
        const double* row = scores.data().data() + i * n;
        const std::uint8_t* rel = relevance.data() + i * n;
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) any = any || rel[j];
        if (!any && flagged) flagged->push_back(i);
        acc += average_precision_at_k(row, rel, n, k, denom);
    }
    return acc / static_cast<double>(q);
}

// Mean IoU from a confusion matrix over the classes present in either map.
inline double mean_iou(const std::vector<int>& pred, const std::vector<int>& truth,
                       int num_classes) {
    if (pred.size() != truth.size())
        throw ShapeError(cat("mean_iou: prediction has ", pred.size(), " pixels, ground truth ",
                             truth.size()));
    std::vector<std::size_t> confusion(static_cast<std::size_t>(num_classes) * num_classes, 0);
    std::vector<bool> present(num_classes, false);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], t = truth[i];
        if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
            throw ValueError(cat("mean_iou: label out of range at pixel ", i));
        confusion[static_cast<std::size_t>(t) * num_classes + p] += 1;
        present[p] = true;
        present[t] = true;
    }
    double acc = 0.0;
    std::size_t counted = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (!present[c]) continue;
        std::size_t inter = confusion[static_cast<std::size_t>(c) * num_classes + c];
        std::size_t row = 0, col = 0;
        for (int j = 0; j < num_classes; ++j) {
            row += confusion[static_cast<std::size_t>(c) * num_classes + j];
            col += confusion[static_cast<std::size_t>(j) * num_classes + c];
        }
        const std::size_t uni = row + col - inter;
        acc += uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
        ++counted;
    }
    return counted == 0 ? 0.0 : acc / static_cast<double>(counted);
}

// Cosine similarity between every patch token and a text vector of matching
// width, reshaped to the patch grid.
inline Tensor patch_similarity_map(const TokenGrid& h, const Tensor& text) {
    if (text.ndim() != 1 || text.size() != h.width())
        throw ConfigError(cat("patch_similarity_map: text vector ", shape_str(text.dims()),
                              " does not match token width ", h.width()));
    Tensor sims = cosine_sim_matrix(h.patches, reshape(text, {1, text.size()}));
    return reshape(sims, {h.grid_rows, h.grid_cols});
}

// The half of a shared embedding that lives in patch-token coordinates
// (a shared embedding is [cls ; mean(patches)]).
inline Tensor patch_half(const Tensor& shared) {
    if (shared.ndim() != 1 || shared.size() % 2 != 0)
        throw ConfigError(cat("patch_half: expected an even-length vector, got ",
                              shape_str(shared.dims())));
    const std::size_t d = shared.size() / 2;
    return reshape(slice_rows(reshape(shared, {2, d}), 1, 2), {d});
}

struct SegmentResult {
    std::vector<int> class_map;  // out_h x out_w, row-major
    std::size_t out_h = 0, out_w = 0;
    double miou = 0.0;
};

// Decoder-free segmentation: per-patch argmax over class similarity maps,
// nearest-neighbor upsampled. Class prompts are compared against patch
// tokens through their patch-aligned half.
inline SegmentResult segment_open_vocab(const TokenGrid& h, const LabelSet& labels,
                                        std::size_t out_h, std::size_t out_w,
                                        const std::vector<int>& ground_truth) {
    const std::size_t c = labels.count();
    std::vector<Tensor> maps;
    maps.reserve(c);
    for (std::size_t ci = 0; ci < c; ++ci) {
        Tensor prompt = reshape(slice_rows(labels.prompt_embeddings, ci, ci + 1),
                                {labels.width()});
        maps.push_back(patch_similarity_map(h, patch_half(prompt)));
    }
    const std::size_t gr = h.grid_rows, gc = h.grid_cols;
    std::vector<int> patch_class(gr * gc, 0);
    for (std::size_t i = 0; i < gr * gc; ++i) {
        std::size_t best = 0;
        for (std::size_t ci = 1; ci < c; ++ci)
            if (maps[ci].data()[i] > maps[best].data()[i]) best = ci;
        patch_class[i] = static_cast<int>(best);
    }
    SegmentResult res;
    res.out_h = out_h;
    res.out_w = out_w;
    res.class_map.resize(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t py = std::min(gr - 1, y * gr / out_h);
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t px = std::min(gc - 1, x * gc / out_w);
            res.class_map[y * out_w + x] = patch_class[py * gc + px];
        }
    }
    if (!ground_truth.empty())
        res.miou = mean_iou(res.class_map, ground_truth, static_cast<int>(c));
    return res;
}

struct ProbeConfig {
    std::size_t epochs = 30;
    std::size_t batch = 128;
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double weight_decay = 0.05;
    double milestone1 = 0.6, milestone2 = 0.8;  // epoch fractions
    double gamma = 0.1;
    double eval_fraction = 0.25;
    std::uint64_t seed = 0;
};

// Single linear classifier on frozen features, softmax cross-entropy,
// multi-step schedule; accuracy reported on a held-out fraction.
inline EvalReport linear_probe(const Tensor& features, const std::vector<int>& labels,
                               const ProbeConfig& cfg) {
    if (features.ndim() != 2)
        throw ShapeError(cat("linear_probe: expected N x D features, got ",
                             shape_str(features.dims())));
    const std::size_t n = features.dims()[0], d = features.dims()[1];
    if (labels.size() != n)
        throw DataError(cat("linear_probe: ", labels.size(), " labels for ", n, " rows"));
    int max_label = 0;
    for (int l : labels) {
        if (l < 0) throw DataError("linear_probe: negative label");
        max_label = std::max(max_label, l);
    }
    const std::size_t classes = static_cast<std::size_t>(max_label) + 1;
    if (classes < 2) throw DataError("linear_probe: labels are single-class");

    // Deterministic split.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(Rng::mix(cfg.seed, 0x9B0B));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const std::size_t n_eval = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                            cfg.eval_fraction * n));
    const std::size_t n_train = n - n_eval;
    if (n_train == 0) throw DataError("linear_probe: no training rows after split");
    std::vector<std::size_t> train_idx(perm.begin(), perm.begin() + n_train);
    std::vector<std::size_t> eval_idx(perm.begin() + n_train, perm.end());
    {
        std::vector<bool> seen(classes, false);
        for (std::size_t i : train_idx) seen[labels[i]] = true;
        std::size_t distinct = 0;
        for (bool b : seen) distinct += b ? 1 : 0;
        if (distinct < 2) throw DataError("linear_probe: training split is single-class");
    }

    Tensor w = Tensor::zeros({d, classes}, true);
    Tensor b = Tensor::zeros({classes}, true);
    AdamW opt({w, b}, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2);

    auto gather = [&](const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
        std::vector<double> rows((hi - lo) * d);
        for (std::size_t i = lo; i < hi; ++i)
            std::copy_n(features.data().data() + idx[i] * d, d, rows.data() + (i - lo) * d);
        return Tensor({hi - lo, d}, std::move(rows));
    };

    const std::size_t m1 = static_cast<std::size_t>(cfg.milestone1 * cfg.epochs);
    const std::size_t m2 = static_cast<std::size_t>(cfg.milestone2 * cfg.epochs);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        if (epoch >= m1) lr *= cfg.gamma;
        if (epoch >= m2) lr *= cfg.gamma;
        opt.set_lr(lr);
        Rng erng(Rng::mix(cfg.seed, 0xE60C + epoch));
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[erng.below(i)]);
        for (std::size_t lo = 0; lo < n_train; lo += cfg.batch) {
            const std::size_t hi = std::min(n_train, lo + cfg.batch);
            Tensor x = gather(train_idx, lo, hi);
            Tensor logits = add_rowvec(matmul(x, w), b);
            Tensor logp = log_softmax_temp(logits, 1.0);
            // Pick out the target log-probabilities.
            std::vector<double> mask((hi - lo) * classes, 0.0);
            for (std::size_t i = lo; i < hi; ++i)
                mask[(i - lo) * classes + labels[train_idx[i]]] = 1.0;
            Tensor target({hi - lo, classes}, std::move(mask));
            Tensor loss = neg(scale(sum_all(mul(target, logp)),
                                    1.0 / static_cast<double>(hi - lo)));
            loss.backward();
            opt.step();
            opt.zero_grad();
        }
    }

    // Evaluation on the held-out split.
    Tensor xe = gather(eval_idx, 0, eval_idx.size());
    Tensor logits = add_rowvec(matmul(xe, w), b);
    std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < eval_idx.size(); ++i) {
        const double* row = logits.data().data() + i * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        const std::size_t truth = static_cast<std::size_t>(labels[eval_idx[i]]);
        if (best == truth) {
            ++correct;
            ++tp[truth];
        } else {
            ++fp[best];
            ++fn[truth];
        }
    }
    EvalReport report;
    report.task = "linear_probe";
    report.metric = "accuracy";
    report.value = static_cast<double>(correct) / static_cast<double>(eval_idx.size());
    report.per_class.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        report.per_class[c] = denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / denom;
    }
    return report;
}

// Multi-label variant: per-class binary cross-entropy on logits, reported as
// the class-averaged AP over the held-out split.
inline EvalReport linear_probe_multilabel(const Tensor& features,
                                          const std::vector<std::vector<int>>& multihot,
                                          const ProbeConfig& cfg) {
    if (features.ndim() != 2)
        throw ShapeError(cat("linear_probe: expected N x D features, got ",
                             shape_str(features.dims())));
    const std::size_t n = features.dims()[0], d = features.dims()[1];
    if (multihot.size() != n)
        throw DataError(cat("linear_probe: ", multihot.size(), " label rows for ", n,
                            " feature rows"));
    const std::size_t classes = multihot.empty() ? 0 : multihot[0].size();
    if (classes < 2) throw DataError("linear_probe: need at least two classes");
    for (const auto& row : multihot)
        if (row.size() != classes) throw DataError("linear_probe: ragged multihot labels");

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(Rng::mix(cfg.seed, 0x9B0B));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    const std::size_t n_eval = std::max<std::size_t>(1, static_cast<std::size_t>(
                                                            cfg.eval_fraction * n));
    const std::size_t n_train = n - n_eval;
    if (n_train == 0) throw DataError("linear_probe: no training rows after split");
    std::vector<std::size_t> train_idx(perm.begin(), perm.begin() + n_train);
    std::vector<std::size_t> eval_idx(perm.begin() + n_train, perm.end());

    Tensor w = Tensor::zeros({d, classes}, true);
    Tensor b = Tensor::zeros({classes}, true);
    AdamW opt({w, b}, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2);

    auto gather = [&](const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
        std::vector<double> rows((hi - lo) * d);
        for (std::size_t i = lo; i < hi; ++i)
            std::copy_n(features.data().data() + idx[i] * d, d, rows.data() + (i - lo) * d);
        return Tensor({hi - lo, d}, std::move(rows));
    };

    const std::size_t m1 = static_cast<std::size_t>(cfg.milestone1 * cfg.epochs);
    const std::size_t m2 = static_cast<std::size_t>(cfg.milestone2 * cfg.epochs);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.lr;
        if (epoch >= m1) lr *= cfg.gamma;
        if (epoch >= m2) lr *= cfg.gamma;
        opt.set_lr(lr);
        Rng erng(Rng::mix(cfg.seed, 0xE60C + epoch));
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(train_idx[i - 1], train_idx[erng.below(i)]);
        for (std::size_t lo = 0; lo < n_train; lo += cfg.batch) {
            const std::size_t hi = std::min(n_train, lo + cfg.batch);
            const std::size_t m = hi - lo;
            Tensor x = gather(train_idx, lo, hi);
            Tensor logits = add_rowvec(matmul(x, w), b);
            // Binary cross-entropy from logits via a two-column log-softmax:
            // log sigma(z) = log_softmax([z, 0])[0].
            Tensor flat = reshape(logits, {m * classes, 1});
            Tensor pair = transpose(concat_rows(transpose(flat),
                                                Tensor::zeros({1, m * classes})));
            Tensor logp = log_softmax_temp(pair, 1.0);
            std::vector<double> target(m * classes * 2, 0.0);
            for (std::size_t i = lo; i < hi; ++i)
                for (std::size_t c = 0; c < classes; ++c) {
                    const bool pos = multihot[train_idx[i]][c] != 0;
                    target[((i - lo) * classes + c) * 2 + (pos ? 0 : 1)] = 1.0;
                }
            Tensor mask({m * classes, 2}, std::move(target));
            Tensor loss = neg(scale(sum_all(mul(mask, logp)),
                                    1.0 / static_cast<double>(m * classes)));
            loss.backward();
            opt.step();
            opt.zero_grad();
        }
    }

    Tensor xe = gather(eval_idx, 0, eval_idx.size());
    Tensor logits = add_rowvec(matmul(xe, w), b);
    EvalReport report;
    report.task = "linear_probe";
    report.metric = "map_multilabel";
    report.per_class.resize(classes);
    const std::size_t ne = eval_idx.size();
    double acc = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> scores(ne);
        std::vector<std::uint8_t> rel(ne);
        for (std::size_t i = 0; i < ne; ++i) {
            scores[i] = logits.data()[i * classes + c];
            rel[i] = multihot[eval_idx[i]][c] != 0 ? 1 : 0;
        }
        report.per_class[c] = average_precision_at_k(scores.data(), rel.data(), ne, ne,
                                                     ApDenominator::relevant_only);
        acc += report.per_class[c];
    }
    report.value = acc / static_cast<double>(classes);
    return report;
}

}  // namespace satd
