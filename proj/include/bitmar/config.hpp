#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "bitmar/model.hpp"
#include "bitmar/training.hpp"

namespace bitmar {

/// Invalid or unknown configuration entry; the message names the field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OptimConfig {
    double lr = 2e-4;
    AdamWConfig adamw;
    std::uint64_t t0 = 1000;
    std::uint64_t t_mult = 2;
    double eta_min_ratio = 0.1;
    std::size_t batch_size = 64;
    std::size_t grad_accum = 2;
};

struct TrainConfig {
    std::uint64_t steps = 20000;
    std::uint64_t log_interval = 500;
    std::uint64_t checkpoint_interval = 1000;
    double mix_ratio = 0.5;
    std::string out_dir = "runs/bitmar";
};

struct DataConfig {
    std::string tokens;
    std::string features;
    std::string vocab_file;
    bool synthetic = false;
    std::size_t synthetic_items = 20;
    std::size_t synthetic_grid = 4;
    std::uint64_t synthetic_seed = 1;
};

struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    ControllerConfig controller;
    bool controller_enabled = true;
    OptimConfig optim;
    TrainConfig train;
    DataConfig data;
    std::uint64_t seed = 0;

    void validate() const;
};

/// "desk" (small, synthetic data) or "paper" (published hyperparameters).
RunConfig preset(const std::string& name);

/// Overlays an INI file ([model] [memory] [streaming] [loss] [controller]
/// [optim] [train] [data] sections) on `base`. Unknown sections or keys throw.
RunConfig load_config(const std::filesystem::path& path, RunConfig base);
RunConfig parse_config(const std::string& text, RunConfig base);

/// Canonical INI text listing every field in a fixed order.
std::string config_text(const RunConfig& config);
/// 64-bit FNV-1a over the canonical text.
std::uint64_t config_digest(const RunConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace bitmar
