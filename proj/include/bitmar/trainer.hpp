#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bitmar/config.hpp"
#include "bitmar/model.hpp"
#include "bitmar/training.hpp"

namespace bitmar {

/// Raised when a loss turns non-finite; the last checkpoint on disk is kept.
class TrainingAborted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct StepMetrics {
    std::uint64_t step = 0;  // 1-based index of the completed step
    double lm = 0.0;
    double cm = 0.0;
    double mem = 0.0;
    double total = 0.0;
    std::optional<double> alignment;
    double eq = 0.0;
    double mem_entropy = 0.0;
    double lr = 0.0;
    bool triggered = false;
    Intervention active = Intervention::none;
};

/// `step=… L_lm=… L_cm=… L_mem=… total=… alignment=… E_q=… mem_entropy=… lr=…`
std::string format_metrics(const StepMetrics& m);

/// Optimizer, schedule, controller and RNG streams for one training run.
class Trainer {
public:
    Trainer(BitMarModel& model, const RunConfig& config);

    /// One optimizer step over `micro_batches` (gradient accumulation).
    StepMetrics train_step(std::span<const Batch> micro_batches);

    /// Samples micro-batches from `dataset` and runs train_step.
    StepMetrics step_on(const Dataset& dataset);

    BitMarModel& model() { return model_; }
    const RunConfig& config() const { return config_; }
    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }
    AdamW& optimizer() { return optimizer_; }
    Controller& controller() { return controller_; }
    Rng& dropout_rng() { return dropout_rng_; }
    BatchSampler& sampler() { return sampler_; }
    void set_sampler(BatchSampler s);
    bool has_sampler() const { return sampler_ready_; }
    void attach_dataset(std::size_t dataset_size);

private:
    BitMarModel& model_;
    RunConfig config_;
    AdamW optimizer_;
    CosineRestarts schedule_;
    Controller controller_;
    Rng dropout_rng_;
    BatchSampler sampler_;
    bool sampler_ready_ = false;
    std::uint64_t step_ = 0;
};

/// Seeds derived from the run seed for the independent random streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

struct LoopOptions {
    std::uint64_t steps = 0;             // stop once this many steps are done
    std::filesystem::path out_dir;       // checkpoints, metrics.log, heatmap.txt
    const Dataset* eval_set = nullptr;   // heatmap columns; defaults to the training set
    std::ostream* echo = nullptr;        // optional copy of the metrics lines
};

/// Runs until `steps`, logging every log_interval and checkpointing every
/// checkpoint_interval (and at the end) with write-then-rename.
void train_loop(Trainer& trainer, const Dataset& dataset, const LoopOptions& options);

/// Heatmap file: a header line followed by one row per slot, one column per
/// logged evaluation.
void write_heatmap(const std::filesystem::path& path, const std::vector<std::vector<float>>& columns);
std::vector<std::vector<float>> read_heatmap(const std::filesystem::path& path);

}  // namespace bitmar
