#include "bitmar/model.hpp"

#include "doctest.h"
#include "fixtures.hpp"
#include "support.hpp"

using namespace bitmar;

namespace {

Batch mixed_batch(const Dataset& data, std::uint32_t pad) {
    const std::vector<std::size_t> items{0, 1, 2, 3};
    const std::vector<std::uint8_t> mm{1, 0, 1, 0};
    return make_batch(data, items, mm, pad);
}

}  // namespace

TEST_CASE("forward produces finite, well-formed losses") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    const auto out = model.forward(mixed_batch(data, cfg.model.end_token()), {});
    CHECK(std::isfinite(out.lm.item()));
    CHECK(out.lm.item() > 0.0f);
    CHECK(out.cm.item() >= 0.0f);
    CHECK(out.mem.item() >= 0.0f);
    CHECK(out.multimodal == 2);
    REQUIRE(out.alignment.has_value());
    CHECK(*out.alignment >= -1.0);
    CHECK(*out.alignment <= 1.0);
    CHECK(out.read_weights.shape() == Shape{4, cfg.model.memory.slots});
    CHECK(out.write_query.size() == cfg.model.d_model);
}

TEST_CASE("text-only batches have no alignment and no contrastive term") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    const std::vector<std::size_t> items{0, 1};
    const std::vector<std::uint8_t> mm{0, 0};
    const auto out = model.forward(make_batch(data, items, mm, cfg.model.end_token()), {});
    CHECK_FALSE(out.alignment.has_value());
    CHECK(out.cm.item() == 0.0f);
}

TEST_CASE("memory off is bit-identical to a zeroed memory read") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    model.set_training(false);
    const auto batch = mixed_batch(data, cfg.model.end_token());
    const auto on = model.forward(batch, {}, {true, false});
    const auto off = model.forward(batch, {}, {false, false});
    CHECK(on.lm.item() != off.lm.item());

    for (auto& x : model.memory().matrix().data()) x = 0.0f;
    const auto zeroed = model.forward(batch, {}, {true, false});
    CHECK(zeroed.lm.item() == off.lm.item());

    Rng r1(1), r2(2);
    const auto& feat = data.features[3];
    CHECK(model.generate({}, feat, data.grid, 12, Sampler{}, r1, true) ==
          model.generate({}, feat, data.grid, 12, Sampler{}, r2, false));
}

TEST_CASE("a disabled memory keeps the model runnable") {
    auto cfg = test::tiny_config();
    cfg.model.memory.enabled = false;
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    const auto out = model.forward(mixed_batch(data, cfg.model.end_token()), {});
    CHECK(std::isfinite(out.lm.item()));
    CHECK(out.mem.item() == 0.0f);
    Rng rng(3);
    CHECK_NOTHROW(model.generate({}, data.features[0], data.grid, 5, Sampler{}, rng, true));
}

TEST_CASE("inference writes memory only when asked") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    model.set_training(false);
    Rng rng(4);
    const auto before = model.memory().matrix().to_vector();
    model.generate({}, data.features[0], data.grid, 4, Sampler{}, rng, true);
    CHECK(model.memory().matrix().to_vector() == before);
    CHECK(model.memory().write_count() == 0);
    model.generate({}, data.features[0], data.grid, 4, Sampler{}, rng, true, true);
    CHECK(model.memory().write_count() == 1);
    CHECK(model.memory().matrix().to_vector() != before);
}

TEST_CASE("greedy generation is deterministic and bounded") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    model.set_training(false);
    Rng r1(5), r2(6);
    const std::vector<std::uint32_t> prompt{'a', ' '};
    const auto a = model.generate(prompt, data.features[1], data.grid, 10, Sampler{}, r1, true);
    const auto b = model.generate(prompt, data.features[1], data.grid, 10, Sampler{}, r2, true);
    CHECK(a == b);
    CHECK(a.size() <= 10);
    CHECK_THROWS_AS(model.generate(prompt, {}, 0, 0, Sampler{}, r1, true), std::domain_error);
}

TEST_CASE("slot activation is a distribution over slots") {
    const auto cfg = test::tiny_config();
    const auto data = test::tiny_dataset(cfg);
    BitMarModel model(cfg.model, cfg.seed);
    model.set_training(false);
    const auto col = model.slot_activation(data);
    REQUIRE(col.size() == cfg.model.memory.slots);
    double total = 0.0;
    for (float v : col) {
        CHECK(v >= 0.0f);
        total += v;
    }
    CHECK(std::fabs(total - 1.0) < 1e-5);
    CHECK(model.memory().usage() == std::vector<float>(cfg.model.memory.slots, 0.0f));
}

TEST_CASE("parameters are grouped by encoder") {
    const auto cfg = test::tiny_config();
    BitMarModel model(cfg.model, cfg.seed);
    const auto& params = model.registry().params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& n = params[i].name;
        const auto g = model.group_of(i);
        if (n.rfind("text.", 0) == 0) {
            CHECK(g == ParamGroup::text);
        } else if (n.rfind("vision.", 0) == 0) {
            CHECK(g == ParamGroup::vision);
        } else {
            CHECK(g == ParamGroup::other);
        }
    }
}

TEST_CASE("every quantized layer holds ternary codes") {
    const auto cfg = test::tiny_config();
    BitMarModel model(cfg.model, cfg.seed);
    model.set_training(false);
    std::size_t zeros = 0, total = 0;
    for (const auto& [name, layer] : model.registry().linears) {
        for (auto c : layer->codes()) {
            CHECK((c == -1 || c == 0 || c == 1));
            zeros += c == 0;
            ++total;
        }
    }
    CHECK(model.quantization_effectiveness() == double(zeros) / double(total));
    for (const auto& [name, eq] : model.quantization_per_layer()) {
        CHECK(eq >= 0.0);
        CHECK(eq <= 1.0);
    }
}

TEST_CASE("invalid model configurations are rejected") {
    auto cfg = test::tiny_config().model;
    cfg.heads = 3;
    CHECK_THROWS_AS(BitMarModel(cfg, 1), std::invalid_argument);
    cfg = test::tiny_config().model;
    cfg.memory.width = 8;
    CHECK_THROWS_AS(BitMarModel(cfg, 1), std::invalid_argument);
}
