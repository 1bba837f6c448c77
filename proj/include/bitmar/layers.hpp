#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bitmar/attention.hpp"
#include "bitmar/quant.hpp"
#include "bitmar/rng.hpp"
#include "bitmar/tensor.hpp"

namespace bitmar {

/// Named view over a model's trainable tensors and quantized layers.
struct Registry {
    struct Param {
        std::string name;
        Tensor tensor;
        bool decay = true;
    };

    std::vector<Param> params;
    std::vector<std::pair<std::string, TernaryLinear*>> linears;

    void add(const std::string& name, const Tensor& tensor, bool decay);
    /// Registers the layer plus its latent weights and scale.
    void add(const std::string& name, TernaryLinear& layer);
};

/// Per-call settings threaded through forward passes.
struct ForwardContext {
    bool training = false;
    Rng* dropout_rng = nullptr;
};

Tensor normal_tensor(Shape shape, float std_dev, Rng& rng, bool requires_grad = true);

struct LayerNorm {
    Tensor gain;
    Tensor bias;
    float eps = 1e-5f;

    LayerNorm() = default;
    LayerNorm(std::size_t d, float eps);
    Tensor forward(const Tensor& x) const { return layernorm(x, gain, bias, eps); }
    void visit(Registry& r, const std::string& prefix);
};

/// Ternary d -> mult·d -> d MLP with GELU.
struct FeedForward {
    TernaryLinear up;
    TernaryLinear down;

    FeedForward() = default;
    FeedForward(std::size_t d, std::size_t hidden, Rng& rng);
    Tensor forward(const Tensor& x);
    void visit(Registry& r, const std::string& prefix);
};

/// Self-attention with ternary Q/K/V/O projections and a learned table of
/// clamped-slot position embeddings.
struct SelfAttention {
    AttentionConfig config;
    TernaryLinear q, k, v, o;
    Tensor pos_table;

    SelfAttention() = default;
    SelfAttention(const AttentionConfig& config, Rng& rng);
    /// Packed forward following `plan` (self-attention over x).
    Tensor forward(const Tensor& x, const AttentionPlan& plan);
    void visit(Registry& r, const std::string& prefix);
};

/// Ternary cross-attention: queries from x, keys/values from memory.
struct CrossAttention {
    std::size_t heads = 4;
    TernaryLinear q, k, v, o;

    CrossAttention() = default;
    CrossAttention(std::size_t d, std::size_t heads, Rng& rng);
    Tensor forward(const Tensor& x, const Segments& x_segments, const Tensor& source, const Segments& source_segments);
    // Keys and values with rows sorted by key content inside each segment, so the
    // attention sum does not depend on the order of the source rows.
    std::pair<Tensor, Tensor> keys_values(const Tensor& source, const Segments& source_segments);
    void visit(Registry& r, const std::string& prefix);
};

}  // namespace bitmar
