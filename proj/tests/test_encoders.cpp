#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "helpers.hpp"
#include "satd/encoders.hpp"

using namespace satd;
using satd::testing::random_tensor;

namespace {

// Inverse-reassembly oracle: scatter patch rows back into an image.
Tensor unpatchify(const Tensor& rows, std::size_t c, std::size_t h, std::size_t w,
                  std::size_t patch) {
    std::vector<double> img(c * h * w, 0.0);
    const std::size_t gc = w / patch;
    const std::size_t width = c * patch * patch;
    for (std::size_t i = 0; i < rows.dims()[0]; ++i) {
        const std::size_t py = i / gc, px = i % gc;
        std::size_t k = 0;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    img[(ch * h + py * patch + y) * w + px * patch + x] =
                        rows.data()[i * width + k++];
    }
    return Tensor({c, h, w}, std::move(img));
}

}  // namespace

TEST_CASE("patchify counts and constant images") {
    Tensor img = Tensor::full({1, 4, 4}, 0.5);
    Tensor rows = patchify(img, 2);
    CHECK(rows.dims() == std::vector<std::size_t>{4, 4});
    for (double v : rows.data()) CHECK(v == 0.5);
}

TEST_CASE("patchify reassembles to the original image") {
    Rng rng(21);
    Tensor img = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    Tensor rows = patchify(img, 4);
    CHECK(rows.dims() == std::vector<std::size_t>{4, 48});
    Tensor back = unpatchify(rows, 3, 8, 8, 4);
    CHECK(satd::testing::max_abs_diff(back, img) == 0.0);
}

TEST_CASE("patchify rejects indivisible sizes") {
    CHECK_THROWS_AS(patchify(Tensor::full({1, 5, 4}, 0.0), 2), ShapeError);
}

TEST_CASE("encode is deterministic in seed and input") {
    EncoderSpec spec{Modality::ms, 6, 4, 16, 2, 42};
    Encoder enc = Encoder::seeded(spec);
    Rng rng(22);
    Tensor img = random_tensor({6, 16, 16}, rng, 0.0, 1.0);
    TokenGrid a = enc.encode(img);
    TokenGrid b = enc.encode(img);
    CHECK(satd::testing::max_abs_diff(a.cls, b.cls) == 0.0);
    CHECK(satd::testing::max_abs_diff(a.patches, b.patches) == 0.0);
    CHECK(a.grid_rows == 4);
    CHECK(a.grid_cols == 4);
    CHECK(a.n() == 16);
    CHECK(a.width() == 16);

    EncoderSpec other = spec;
    other.weights_seed = 43;
    TokenGrid c = Encoder::seeded(other).encode(img);
    CHECK(satd::testing::max_abs_diff(a.patches, c.patches) > 1e-6);
}

TEST_CASE("encode rejects channel mismatch") {
    Encoder enc = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 1});
    CHECK_THROWS_AS(enc.encode(Tensor::full({6, 8, 8}, 0.1)), ValueError);
}

TEST_CASE("encode of a zero image with zero biases stays finite") {
    Encoder enc = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 7});
    for (Tensor* w : enc.weights_mutable()) {
        if (w->ndim() == 1)
            std::fill(w->mutable_data().begin(), w->mutable_data().end(), 0.0);
    }
    TokenGrid g = enc.encode(Tensor::zeros({3, 8, 8}));
    for (double v : g.patches.data()) CHECK(std::isfinite(v));
    for (double v : g.cls.data()) CHECK(std::isfinite(v));
}

TEST_CASE("pool_patches is the mean over patch rows") {
    TokenGrid g;
    g.cls = Tensor::vec({9.0, 9.0});
    g.patches = Tensor::matrix(2, 2, {1, 2, 3, 4});
    g.grid_rows = 2;
    g.grid_cols = 1;
    Tensor p = pool_patches(g);
    CHECK(p.data()[0] == 2.0);
    CHECK(p.data()[1] == 3.0);

    // all patches equal -> that patch; cls excluded
    g.patches = Tensor::matrix(3, 2, {5, 6, 5, 6, 5, 6});
    Tensor q = pool_patches(g);
    CHECK(q.data()[0] == 5.0);
    CHECK(q.data()[1] == 6.0);

    // single patch -> itself
    g.patches = Tensor::matrix(1, 2, {7, 8});
    Tensor r = pool_patches(g);
    CHECK(r.data()[0] == 7.0);
    CHECK(r.data()[1] == 8.0);
}

TEST_CASE("pool_patches matches an independent summation oracle") {
    Rng rng(23);
    TokenGrid g;
    g.patches = random_tensor({9, 5}, rng);
    g.cls = Tensor::zeros({5});
    Tensor p = pool_patches(g);
    for (std::size_t j = 0; j < 5; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 9; ++i) s += g.patches.data()[i * 5 + j];
        CHECK(std::abs(p.data()[j] - s / 9.0) < 1e-12);
    }
}

TEST_CASE("encoder weight digest is stable and weight-sensitive") {
    Encoder a = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 5});
    Encoder b = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 5});
    CHECK(a.weight_digest() == b.weight_digest());
    Encoder c = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 6});
    CHECK(a.weight_digest() != c.weight_digest());
}

TEST_CASE("identity-configured projector reproduces the pooled input") {
    const std::size_t d = 4;
    VisionProjector p = VisionProjector::seeded(d, d, d, 77);
    for (auto& blk : p.blocks())
        std::fill(blk.w_out.mutable_data().begin(), blk.w_out.mutable_data().end(), 0.0);
    auto& w = p.head_distill_w().mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;

    TokenGrid g;
    g.cls = Tensor::vec({1, 1, 1, 1});
    g.patches = Tensor::matrix(2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
    g.grid_rows = 2;
    g.grid_cols = 1;
    Tensor out = p.logits(g);
    Tensor pooled = pool_patches(g);
    CHECK(satd::testing::max_abs_diff(out, pooled) < 1e-15);
}

TEST_CASE("distillation logits have the configured teacher width") {
    Rng rng(25);
    VisionProjector p = VisionProjector::seeded(6, 11, 6, 3);
    TokenGrid g;
    g.cls = random_tensor({6}, rng);
    g.patches = random_tensor({4, 6}, rng);
    g.grid_rows = 2;
    g.grid_cols = 2;
    CHECK(p.logits(g).dims() == std::vector<std::size_t>{11});
}

TEST_CASE("gradients reach projector weights but not encoder outputs") {
    Rng rng(26);
    Encoder enc = Encoder::seeded({Modality::rgb, 3, 4, 8, 1, 9});
    Tensor img = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    TokenGrid g = enc.encode(img);
    CHECK_FALSE(g.patches.requires_grad());
    CHECK_FALSE(g.cls.requires_grad());

    VisionProjector p = VisionProjector::seeded(8, 5, 8, 10);
    std::string digest_before = enc.weight_digest();
    Tensor loss = sum_all(mul(p.logits(g), p.logits(g)));
    loss.backward();
    double gnorm = 0.0;
    for (auto& t : p.distill_params())
        for (double gv : t.grad()) gnorm += gv * gv;
    CHECK(gnorm > 0.0);
    CHECK(enc.weight_digest() == digest_before);
}

TEST_CASE("projector rejects mismatched token width") {
    VisionProjector p = VisionProjector::seeded(8, 5, 8, 11);
    TokenGrid g;
    g.cls = Tensor::zeros({4});
    g.patches = Tensor::full({2, 4}, 0.3);
    CHECK_THROWS_AS(p.logits(g), ConfigError);
    CHECK_THROWS_AS(p.tokens(g), ConfigError);
}

TEST_CASE("token head projects every token to the shared width") {
    Rng rng(27);
    VisionProjector p = VisionProjector::seeded(8, 5, 12, 13);
    TokenGrid g;
    g.cls = random_tensor({8}, rng);
    g.patches = random_tensor({6, 8}, rng);
    g.grid_rows = 3;
    g.grid_cols = 2;
    TokenGrid out = p.tokens(g);
    CHECK(out.width() == 12);
    CHECK(out.n() == 6);
    CHECK(out.grid_rows == 3);
    CHECK(out.grid_cols == 2);
}

TEST_CASE("text projector is a plain linear map") {
    TextProjector t = TextProjector::seeded(4, 4, 15);
    auto& w = t.weight().mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    Tensor zero_out = t.project(Tensor::vec({1, 2, 3, 4}));
    for (double v : zero_out.data()) CHECK(v == 0.0);

    for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
    Tensor pass = t.project(Tensor::vec({1, 2, 3, 4}));
    CHECK(pass.data() == std::vector<double>{1, 2, 3, 4});

    TextProjector r = TextProjector::seeded(7, 10, 16);
    Rng rng(28);
    CHECK(r.project(satd::testing::random_tensor({7}, rng)).dims() ==
          std::vector<std::size_t>{10});
    CHECK_THROWS_AS(r.project(Tensor::vec({1, 2})), ConfigError);
}
