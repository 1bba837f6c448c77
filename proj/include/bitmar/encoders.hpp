#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bitmar/layers.hpp"

namespace bitmar {

struct TextEncoderConfig {
    std::size_t vocab_size = 257;
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_len = 256;
    std::size_t sinks = 4;
    std::size_t window = 1020;
    bool causal = false;
    float ln_eps = 1e-5f;
};

/// Quantized transformer encoder over token ids; produces z.
class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(const TextEncoderConfig& config, Rng& rng);

    /// Packed forward over several sequences, each already <= max_len.
    Tensor forward(std::span<const std::uint32_t> ids, const Segments& segments);
    /// One sequence; inputs longer than max_len are truncated.
    Tensor encode_text(std::span<const std::uint32_t> ids);

    const TextEncoderConfig& config() const { return config_; }
    void visit(Registry& r, const std::string& prefix);

private:
    struct Layer {
        LayerNorm ln_attn;
        SelfAttention attn;
        LayerNorm ln_ffn;
        FeedForward ffn;
    };

    TextEncoderConfig config_;
    Tensor token_embedding_;
    std::vector<Layer> layers_;
    LayerNorm final_ln_;
};

struct VisionConfig {
    std::size_t feature_dim = 768;
    std::size_t hidden = 384;
    std::size_t d_model = 128;
    float dropout = 0.1f;
};

/// 2×2 average pooling of a g×g×dim patch grid. Odd grids replicate their
/// last row/column first, so the result always has ceil(g/2)² patches.
Tensor pool_patches(std::span<const float> features, std::size_t grid, std::size_t dim);

/// Pooled patches -> 768->384 (ReLU, dropout) -> d; produces v.
class VisionCompressor {
public:
    VisionCompressor() = default;
    VisionCompressor(const VisionConfig& config, Rng& rng);

    /// Per-patch MLP over packed pooled patches [n×feature_dim].
    Tensor forward(const Tensor& pooled, const ForwardContext& ctx);
    /// Pooling followed by the MLP for one feature grid.
    Tensor compress_vision(std::span<const float> features, std::size_t grid, const ForwardContext& ctx = {});

    const VisionConfig& config() const { return config_; }
    void visit(Registry& r, const std::string& prefix);

private:
    VisionConfig config_;
    TernaryLinear w1_;
    TernaryLinear w2_;
};

}  // namespace bitmar
