#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bitmar/layers.hpp"

namespace bitmar {

enum class Injection { residual, concat };

struct DecoderConfig {
    std::size_t vocab_size = 257;
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t layers = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_len = 256;
    std::size_t sinks = 4;
    std::size_t window = 1020;
    Injection injection = Injection::residual;
    float ln_eps = 1e-5f;
};

/// Causal sink-window decoder: self-attention, cross-attention over the fused
/// sequence F and a ternary FFN per layer, with the retrieved memory vector
/// injected at every layer input (pre-LN).
class Decoder {
public:
    Decoder() = default;
    Decoder(const DecoderConfig& config, Rng& rng);

    /// Teacher-forced packed forward. `memory_read` is M_r with one row per
    /// sequence, or undefined to bypass the memory pathway. Returns float
    /// logits [n×vocab].
    Tensor forward(std::span<const std::uint32_t> ids, const Segments& segments, const Tensor& fused,
                   const Segments& fused_segments, const Tensor& memory_read);

    /// memory_proj(M_r).
    Tensor project_memory(const Tensor& memory_read);
    /// Combines token states with an already projected memory row per token.
    /// residual: x + m; concat: proj_l([x; m]).
    Tensor inject_memory(const Tensor& x, const Tensor& projected_memory, std::size_t layer);

    /// Per-request decoding state: one KV cache per layer plus the cross
    /// attention keys/values of F and the projected memory vector, all fixed
    /// for the request.
    struct Stream {
        std::vector<StreamingKVCache> caches;
        std::vector<Tensor> cross_keys;
        std::vector<Tensor> cross_values;
        Tensor memory;  // projected M_r [1×d], undefined when memory is off
        std::uint64_t arrivals = 0;
    };

    Stream start_stream(const Tensor& fused, const Tensor& memory_read);
    /// Feeds one token and returns next-token logits [1×vocab].
    Tensor decode_step(std::uint32_t token, Stream& stream);

    const DecoderConfig& config() const { return config_; }
    AttentionConfig attention_config() const;
    void visit(Registry& r, const std::string& prefix);

private:
    struct Layer {
        LayerNorm ln_self;
        SelfAttention self_attn;
        LayerNorm ln_cross;
        CrossAttention cross;
        LayerNorm ln_ffn;
        FeedForward ffn;
        std::optional<TernaryLinear> concat_proj;
    };

    Tensor layer_tail(Layer& layer, Tensor x, const Segments& segments, const Tensor& fused,
                      const Segments& fused_segments);

    DecoderConfig config_;
    Tensor token_embedding_;
    std::vector<Layer> layers_;
    TernaryLinear memory_proj_;
    LayerNorm final_ln_;
    TernaryLinear head_;
};

enum class SamplerKind { greedy, temperature, top_k };

struct Sampler {
    SamplerKind kind = SamplerKind::greedy;
    float temperature = 1.0f;
    std::size_t top_k = 0;
};

/// Picks the next token. A non-positive temperature degenerates to greedy.
std::uint32_t sample_token(std::span<const float> logits, const Sampler& sampler, Rng& rng);

/// Autoregressive loop: feeds `prompt`, then samples up to max_new tokens,
/// stopping after `end_token` (which is not returned).
std::vector<std::uint32_t> generate(Decoder& decoder, Decoder::Stream& stream, std::span<const std::uint32_t> prompt,
                                    int max_new, const Sampler& sampler, Rng& rng,
                                    std::optional<std::uint32_t> end_token);

}  // namespace bitmar
