#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitmar/layers.hpp"

namespace bitmar {

struct MemoryConfig {
    std::size_t slots = 512;
    std::size_t width = 128;
    float alpha = 0.2f;
    float usage_decay = 0.99f;
    /// Slots whose usage falls below this are forgotten; <= 0 means 1/(4K).
    float usage_floor = 0.0f;
    float forget_rate = 0.05f;
    std::size_t forget_every = 100;
    float init_std = 0.02f;
    bool enabled = true;

    float effective_usage_floor() const {
        return usage_floor > 0.0f ? usage_floor : 1.0f / (4.0f * static_cast<float>(slots));
    }
};

/// Learnable K×C episodic store with soft rank-1 writes, content-addressed
/// reads and usage-based forgetting.
class EpisodicMemory {
public:
    EpisodicMemory() = default;
    EpisodicMemory(const MemoryConfig& config, Rng& rng);

    struct Read {
        Tensor value;    // M_r, [n×C]
        Tensor weights;  // W_r, [n×K]
    };

    /// W_r = softmax(M q), M_r = W_rᵀ M, per query row. Updates the usage EMA
    /// when record_usage is set. Disabled memory returns zeros.
    Read read(const Tensor& queries, bool record_usage);

    /// W_w = softmax(write_head(q)) per row, [n×K].
    Tensor write_weights(const Tensor& queries);
    /// α·W_wᵀ q for a single query [1×C]; differentiable, [K×C].
    Tensor write_delta(const Tensor& query);

    /// M <- M + α W_w qᵀ with W_w from the write head. Snapshots the pre-write
    /// matrix and runs the forgetting schedule. No-op when disabled.
    void write(const Tensor& query);
    /// Same update with explicit write weights.
    void write_with_weights(std::span<const float> weights, std::span<const float> query);
    /// M <- M + delta, with the same snapshot and schedule as write().
    void apply_delta(std::span<const float> delta);

    /// ‖M - prev_M‖²_F; 0 before the first write.
    double consistency_penalty() const;
    /// Scales rows whose usage is below the floor by (1 - forget_rate).
    void apply_forgetting();

    const MemoryConfig& config() const { return config_; }
    bool enabled() const { return config_.enabled; }
    void set_enabled(bool on) { config_.enabled = on; }

    Tensor& matrix() { return matrix_; }
    const Tensor& matrix() const { return matrix_; }
    std::vector<float>& usage() { return usage_; }
    const std::vector<float>& usage() const { return usage_; }
    std::vector<float>& previous() { return previous_; }
    const std::vector<float>& previous() const { return previous_; }
    bool has_previous() const { return has_previous_; }
    void set_has_previous(bool v) { has_previous_ = v; }
    std::uint64_t write_count() const { return writes_; }
    void set_write_count(std::uint64_t n) { writes_ = n; }
    TernaryLinear& write_head() { return write_head_; }

    void visit(Registry& r, const std::string& prefix);

private:
    MemoryConfig config_;
    Tensor matrix_;
    TernaryLinear write_head_;
    std::vector<float> previous_;
    std::vector<float> usage_;
    bool has_previous_ = false;
    std::uint64_t writes_ = 0;
};

/// Shannon entropy (nats) of a non-negative vector after normalization.
double distribution_entropy(std::span<const float> values);

}  // namespace bitmar
