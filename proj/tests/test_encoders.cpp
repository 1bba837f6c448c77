#include "bitmar/encoders.hpp"

#include "doctest.h"
#include "support.hpp"

using namespace bitmar;
using bitmar::test::max_abs_diff;
using bitmar::test::random_tensor;

namespace {

TextEncoderConfig small_text(std::size_t layers = 2) {
    TextEncoderConfig c;
    c.vocab_size = 20;
    c.d_model = 16;
    c.heads = 4;
    c.layers = layers;
    c.max_len = 32;
    c.sinks = 2;
    c.window = 30;
    return c;
}

bool rows_equal(const Tensor& a, const Tensor& b, std::size_t r) {
    const std::size_t d = a.cols();
    return std::equal(a.data().begin() + r * d, a.data().begin() + (r + 1) * d, b.data().begin() + r * d);
}

}  // namespace

TEST_CASE("text encoder is deterministic in eval mode and shaped [n, d]") {
    Rng rng(1);
    TextEncoder enc(small_text(), rng);
    Registry reg;
    enc.visit(reg, "text");
    test::set_training(reg, false);
    const std::vector<std::uint32_t> ids{3, 1, 4, 1, 5, 9, 2, 6};
    const auto a = enc.encode_text(ids);
    const auto b = enc.encode_text(ids);
    CHECK(a.shape() == Shape{8, 16});
    CHECK(a.to_vector() == b.to_vector());
    for (std::size_t n : {1u, 5u, 32u}) CHECK(enc.encode_text(std::vector<std::uint32_t>(n, 7)).rows() == n);
}

TEST_CASE("text encoder truncates long inputs and rejects empty ones") {
    Rng rng(2);
    TextEncoder enc(small_text(1), rng);
    CHECK(enc.encode_text(std::vector<std::uint32_t>(50, 1)).rows() == 32);
    CHECK_THROWS_AS(enc.encode_text(std::vector<std::uint32_t>{}), std::domain_error);
}

TEST_CASE("swapping two tokens changes both positions") {
    Rng rng(3);
    TextEncoder enc(small_text(), rng);
    Registry reg;
    enc.visit(reg, "text");
    test::set_training(reg, false);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::uint32_t> ids(10);
        for (auto& t : ids) t = static_cast<std::uint32_t>(uniform_index(rng, 20));
        const std::size_t i = uniform_index(rng, 10);
        std::size_t j = uniform_index(rng, 10);
        if (j == i) j = (i + 1) % 10;
        if (ids[i] == ids[j]) ids[j] = (ids[i] + 1) % 20;
        auto swapped = ids;
        std::swap(swapped[i], swapped[j]);
        const auto a = enc.encode_text(ids), b = enc.encode_text(swapped);
        CHECK_FALSE(rows_equal(a, b, i));
        CHECK_FALSE(rows_equal(a, b, j));
    }
}

TEST_CASE("text encoder output is layernormed") {
    Rng rng(4);
    TextEncoder enc(small_text(), rng);
    const auto z = enc.encode_text(std::vector<std::uint32_t>{1, 2, 3, 4, 5});
    for (std::size_t r = 0; r < z.rows(); ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 16; ++c) m += z.at(r, c) / 16.0;
        for (std::size_t c = 0; c < 16; ++c) v += (z.at(r, c) - m) * (z.at(r, c) - m) / 16.0;
        CHECK(std::fabs(m) < 1e-5);
        CHECK(std::fabs(v - 1.0) < 1e-3);
    }
}

TEST_CASE("causal text encoder ignores later tokens") {
    auto cfg = small_text();
    cfg.causal = true;
    Rng rng(5);
    TextEncoder enc(cfg, rng);
    Registry reg;
    enc.visit(reg, "text");
    test::set_training(reg, false);
    std::vector<std::uint32_t> ids{1, 2, 3, 4, 5, 6};
    const auto a = enc.encode_text(ids);
    ids[4] = 19;
    const auto b = enc.encode_text(ids);
    for (std::size_t r = 0; r < 4; ++r) CHECK(rows_equal(a, b, r));
}

TEST_CASE("2x2 pooling averages blocks") {
    // one channel, grid 2: values 1,2,3,4 pool to 2.5
    const std::vector<float> f{1, 2, 3, 4};
    CHECK(pool_patches(f, 2, 1).to_vector() == std::vector<float>{2.5f});
    std::vector<float> g(4 * 4 * 3);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(i % 7);
    CHECK(pool_patches(g, 4, 3).rows() == 4);
    const std::vector<float> c(6 * 6 * 5, 0.75f);
    for (float v : pool_patches(c, 6, 5).to_vector()) CHECK(v == 0.75f);
}

TEST_CASE("odd grids replicate the last row and column") {
    // 3x3 grid, one channel, values r*3+c
    std::vector<float> f(9);
    for (std::size_t i = 0; i < 9; ++i) f[i] = static_cast<float>(i);
    const auto p = pool_patches(f, 3, 1).to_vector();
    REQUIRE(p.size() == 4);
    CHECK(p[0] == (0 + 1 + 3 + 4) / 4.0f);
    CHECK(p[1] == (2 + 2 + 5 + 5) / 4.0f);
    CHECK(p[2] == (6 + 7 + 6 + 7) / 4.0f);
    CHECK(p[3] == 8.0f);
}

TEST_CASE("vision compressor maps constant grids to equal patches") {
    Rng rng(6);
    VisionCompressor vis(VisionConfig{768, 384, 128, 0.1f}, rng);
    Registry reg;
    vis.visit(reg, "vision");
    test::set_training(reg, false);
    const std::vector<float> grid(4 * 4 * 768, 0.3f);
    const auto v = vis.compress_vision(grid, 4);
    CHECK(v.shape() == Shape{4, 128});
    for (std::size_t r = 1; r < 4; ++r)
        CHECK(std::equal(v.data().begin(), v.data().begin() + 128, v.data().begin() + r * 128));
}

TEST_CASE("vision MLP is permutation-equivariant across patches") {
    Rng rng(7);
    VisionCompressor vis(VisionConfig{24, 12, 8, 0.0f}, rng);
    Registry reg;
    vis.visit(reg, "vision");
    test::set_training(reg, false);
    const auto pooled = random_tensor({5, 24}, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    const auto a = gather_rows(vis.forward(pooled, {}), perm);
    const auto b = vis.forward(gather_rows(pooled, perm), {});
    CHECK(a.to_vector() == b.to_vector());
}

TEST_CASE("encoder blocks pass finite-difference gradient checks") {
    Rng rng(8);
    auto cfg = small_text(1);
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.vocab_size = 10;
    cfg.window = 6;
    TextEncoder enc(cfg, rng);
    Registry reg;
    enc.visit(reg, "text");
    test::set_quantized(reg, false);
    const std::vector<std::uint32_t> ids{1, 4, 4, 9, 0};
    CHECK(test::gradient_error([&] { return enc.forward(ids, Segments{0, 2, 5}); }, test::registry_leaves(reg), 1) <
          1e-3);

    VisionCompressor vis(VisionConfig{12, 10, 8, 0.0f}, rng);
    Registry vreg;
    vis.visit(vreg, "vision");
    test::set_quantized(vreg, false);
    const auto pooled = random_tensor({3, 12}, rng);
    CHECK(test::gradient_error([&] { return vis.forward(pooled, {}); }, test::registry_leaves(vreg), 2) < 1e-3);
}
