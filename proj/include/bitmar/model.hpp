#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bitmar/dataio.hpp"
#include "bitmar/decoder.hpp"
#include "bitmar/encoders.hpp"
#include "bitmar/fusion.hpp"
#include "bitmar/memory.hpp"

namespace bitmar {

struct ModelConfig {
    std::size_t vocab_size = 257;
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t encoder_layers = 4;
    std::size_t decoder_layers = 4;
    std::size_t ffn_mult = 4;
    std::size_t max_len = 256;
    std::size_t sinks = 4;
    std::size_t window = 1020;
    std::size_t feature_dim = 768;
    std::size_t vision_hidden = 384;
    float vision_dropout = 0.1f;
    bool text_causal = false;
    Injection injection = Injection::residual;
    Pooling pooling = Pooling::mean;
    bool quantize = true;
    float ln_eps = 1e-5f;
    float tau = 0.07f;
    MemoryConfig memory;

    /// The last vocabulary id doubles as BOS, EOS and padding.
    std::uint32_t end_token() const { return static_cast<std::uint32_t>(vocab_size - 1); }
    void validate() const;
};

enum class ParamGroup { text, vision, other };

struct ForwardOptions {
    bool use_memory = true;
    bool record_usage = true;
};

struct ForwardOutput {
    Tensor lm;   // mean over examples of per-example token-mean cross-entropy
    Tensor cm;   // InfoNCE over the multimodal rows (0 if fewer than one)
    Tensor mem;  // ‖α W_w q̄ᵀ‖²_F for the batch-mean query
    std::optional<double> alignment;
    std::vector<float> write_query;  // q̄, detached
    Tensor read_weights;             // W_r [B×K]
    std::size_t multimodal = 0;
    std::size_t tokens = 0;
};

/// Text encoder, vision compressor, fusion, episodic memory and decoder under
/// one parameter registry. Not copyable: the registry points into members.
class BitMarModel {
public:
    BitMarModel(const ModelConfig& config, std::uint64_t seed);
    BitMarModel(const BitMarModel&) = delete;
    BitMarModel& operator=(const BitMarModel&) = delete;

    /// Teacher-forced captioning step: the decoder reads [BOS]+caption and
    /// predicts caption+[END], conditioned on F built from the [BOS] context
    /// and the example's vision tokens (if any).
    ForwardOutput forward(const Batch& batch, const ForwardContext& ctx, const ForwardOptions& options = {});

    struct Conditioning {
        Tensor fused;         // F [n_t×d]
        Tensor query;         // q_mem [1×d]
        Tensor memory_read;   // M_r [1×d], undefined when memory is off
        Tensor read_weights;  // W_r [1×K]
        std::vector<std::uint32_t> decoder_prefix;  // [BOS] + prompt
    };
    /// Encodes [BOS]+prompt, fuses it with the optional feature grid and reads
    /// memory once. Runs without gradients and without touching usage.
    Conditioning condition(std::span<const std::uint32_t> prompt, std::span<const float> features, std::size_t grid,
                           bool use_memory);

    std::vector<std::uint32_t> generate(std::span<const std::uint32_t> prompt, std::span<const float> features,
                                        std::size_t grid, int max_new, const Sampler& sampler, Rng& rng,
                                        bool use_memory, bool write_memory = false);

    /// Mean read weights over the dataset's items (with features when
    /// available): one heatmap column.
    std::vector<float> slot_activation(const Dataset& dataset);

    void set_training(bool training);
    void set_quantized(bool quantized);
    double quantization_effectiveness() const;
    std::vector<std::pair<std::string, double>> quantization_per_layer() const;
    ParamGroup group_of(std::size_t param_index) const { return groups_.at(param_index); }

    const ModelConfig& config() const { return config_; }
    Registry& registry() { return registry_; }
    TextEncoder& text() { return text_; }
    VisionCompressor& vision() { return vision_; }
    FusionBlock& fusion() { return fusion_; }
    EpisodicMemory& memory() { return memory_; }
    Decoder& decoder() { return decoder_; }

private:
    ModelConfig config_;
    TextEncoder text_;
    VisionCompressor vision_;
    FusionBlock fusion_;
    EpisodicMemory memory_;
    Decoder decoder_;
    Registry registry_;
    std::vector<ParamGroup> groups_;
};

}  // namespace bitmar
