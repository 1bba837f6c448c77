#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "bitmar/config.hpp"
#include "bitmar/dataio.hpp"
#include "bitmar/model.hpp"

namespace bitmar::test {

/// A miniature run configuration that trains in milliseconds per step.
inline RunConfig tiny_config() {
    RunConfig c;
    auto& m = c.model;
    m.d_model = 16;
    m.heads = 2;
    m.encoder_layers = 1;
    m.decoder_layers = 1;
    m.ffn_mult = 2;
    m.max_len = 64;
    m.sinks = 2;
    m.window = 30;
    m.feature_dim = 32;
    m.vision_hidden = 16;
    m.memory.slots = 8;
    m.memory.width = 16;
    m.memory.forget_every = 5;
    c.optim.lr = 1e-3;
    c.optim.batch_size = 4;
    c.optim.grad_accum = 1;
    c.optim.t0 = 50;
    c.train.steps = 20;
    c.train.log_interval = 5;
    c.train.checkpoint_interval = 10;
    c.data.synthetic = true;
    c.data.synthetic_items = 8;
    c.seed = 7;
    return c;
}

inline Dataset tiny_dataset(const RunConfig& c) {
    const Tokenizer tok(static_cast<std::uint32_t>(c.model.vocab_size));
    return make_synthetic(c.data.synthetic_items, c.data.synthetic_grid, c.model.feature_dim, tok, c.data.synthetic_seed)
        .dataset;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("bitmar_test_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace bitmar::test
