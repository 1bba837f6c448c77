#include "bitmar/encoders.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "bitmar/ops.hpp"

namespace bitmar {

TextEncoder::TextEncoder(const TextEncoderConfig& config, Rng& rng) : config_(config) {
    AttentionConfig acfg{config.d_model, config.heads, config.sinks, config.window, config.causal};
    acfg.validate();
    token_embedding_ = normal_tensor({config.vocab_size, config.d_model}, 0.5f, rng);
    for (std::size_t i = 0; i < config.layers; ++i) {
        layers_.push_back(Layer{LayerNorm(config.d_model, config.ln_eps), SelfAttention(acfg, rng),
                                LayerNorm(config.d_model, config.ln_eps),
                                FeedForward(config.d_model, config.ffn_mult * config.d_model, rng)});
    }
    final_ln_ = LayerNorm(config.d_model, config.ln_eps);
}

Tensor TextEncoder::forward(std::span<const std::uint32_t> ids, const Segments& segments) {
    if (segments.empty() || segments.back() != ids.size()) {
        throw std::invalid_argument("TextEncoder: segments do not cover the packed ids");
    }
    const auto plan = config_.causal ? plan_streaming(segments, config_.sinks, config_.window)
                                     : plan_bidirectional(segments, config_.sinks + config_.window);
    Tensor x = embedding(token_embedding_, ids);
    for (auto& layer : layers_) {
        x = add(x, layer.attn.forward(layer.ln_attn.forward(x), plan));
        x = add(x, layer.ffn.forward(layer.ln_ffn.forward(x)));
    }
    return final_ln_.forward(x);
}

Tensor TextEncoder::encode_text(std::span<const std::uint32_t> ids) {
    if (ids.empty()) throw std::domain_error("encode_text: empty token sequence");
    const auto used = ids.first(std::min(ids.size(), config_.max_len));
    return forward(used, Segments{0, used.size()});
}

void TextEncoder::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".embedding", token_embedding_, false);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string p = prefix + ".layer" + std::to_string(i);
        layers_[i].ln_attn.visit(r, p + ".ln_attn");
        layers_[i].attn.visit(r, p + ".attn");
        layers_[i].ln_ffn.visit(r, p + ".ln_ffn");
        layers_[i].ffn.visit(r, p + ".ffn");
    }
    final_ln_.visit(r, prefix + ".ln_final");
}

Tensor pool_patches(std::span<const float> features, std::size_t grid, std::size_t dim) {
    if (grid == 0 || features.size() != grid * grid * dim) {
        throw std::invalid_argument("pool_patches: expected " + std::to_string(grid) + "x" + std::to_string(grid) + "x" +
                                    std::to_string(dim) + " features, got " + std::to_string(features.size()) + " values");
    }
    const std::size_t half = (grid + 1) / 2;
    std::vector<float> out(half * half * dim, 0.0f);
    const auto clamp = [grid](std::size_t i) { return std::min(i, grid - 1); };
    for (std::size_t r = 0; r < half; ++r) {
        for (std::size_t c = 0; c < half; ++c) {
            float* dst = out.data() + (r * half + c) * dim;
            for (std::size_t dr = 0; dr < 2; ++dr) {
                for (std::size_t dc = 0; dc < 2; ++dc) {
                    const float* src = features.data() + (clamp(2 * r + dr) * grid + clamp(2 * c + dc)) * dim;
                    for (std::size_t k = 0; k < dim; ++k) dst[k] += src[k];
                }
            }
            for (std::size_t k = 0; k < dim; ++k) dst[k] *= 0.25f;
        }
    }
    return Tensor::from({half * half, dim}, std::move(out));
}

VisionCompressor::VisionCompressor(const VisionConfig& config, Rng& rng)
    : config_(config), w1_(config.feature_dim, config.hidden, rng), w2_(config.hidden, config.d_model, rng) {}

Tensor VisionCompressor::forward(const Tensor& pooled, const ForwardContext& ctx) {
    Tensor h = relu(w1_.forward(pooled));
    if (ctx.training && config_.dropout > 0.0f) {
        if (!ctx.dropout_rng) throw std::logic_error("VisionCompressor: training dropout needs an RNG");
        h = dropout(h, config_.dropout, *ctx.dropout_rng, true);
    }
    return w2_.forward(h);
}

Tensor VisionCompressor::compress_vision(std::span<const float> features, std::size_t grid, const ForwardContext& ctx) {
    return forward(pool_patches(features, grid, config_.feature_dim), ctx);
}

void VisionCompressor::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".w1", w1_);
    r.add(prefix + ".w2", w2_);
}

}  // namespace bitmar
