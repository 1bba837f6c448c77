#include "bitmar/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "bitmar/ops.hpp"

namespace bitmar {

Decoder::Decoder(const DecoderConfig& config, Rng& rng) : config_(config) {
    const auto acfg = attention_config();
    acfg.validate();
    const std::size_t d = config.d_model;
    token_embedding_ = normal_tensor({config.vocab_size, d}, 0.5f, rng);
    for (std::size_t i = 0; i < config.layers; ++i) {
        Layer layer{LayerNorm(d, config.ln_eps), SelfAttention(acfg, rng),       LayerNorm(d, config.ln_eps),
                    CrossAttention(d, config.heads, rng), LayerNorm(d, config.ln_eps),
                    FeedForward(d, config.ffn_mult * d, rng), std::nullopt};
        if (config.injection == Injection::concat) layer.concat_proj.emplace(2 * d, d, rng);
        layers_.push_back(std::move(layer));
    }
    memory_proj_ = TernaryLinear(d, d, rng);
    final_ln_ = LayerNorm(d, config.ln_eps);
    head_ = TernaryLinear(d, config.vocab_size, rng);
}

AttentionConfig Decoder::attention_config() const {
    return AttentionConfig{config_.d_model, config_.heads, config_.sinks, config_.window, true};
}

Tensor Decoder::project_memory(const Tensor& memory_read) { return memory_proj_.forward(memory_read); }

Tensor Decoder::inject_memory(const Tensor& x, const Tensor& projected_memory, std::size_t layer) {
    if (config_.injection == Injection::residual) return add(x, projected_memory);
    return layers_.at(layer).concat_proj->forward(concat_cols(x, projected_memory));
}

Tensor Decoder::layer_tail(Layer& layer, Tensor x, const Segments& segments, const Tensor& fused,
                           const Segments& fused_segments) {
    x = add(x, layer.cross.forward(layer.ln_cross.forward(x), segments, fused, fused_segments));
    return add(x, layer.ffn.forward(layer.ln_ffn.forward(x)));
}

Tensor Decoder::forward(std::span<const std::uint32_t> ids, const Segments& segments, const Tensor& fused,
                        const Segments& fused_segments, const Tensor& memory_read) {
    if (segments.empty() || segments.back() != ids.size()) {
        throw std::invalid_argument("Decoder: segments do not cover the packed ids");
    }
    const auto plan = plan_streaming(segments, config_.sinks, config_.window);
    Tensor memory;
    if (memory_read.defined()) memory = segment_expand(project_memory(memory_read), segments);
    Tensor x = embedding(token_embedding_, ids);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        auto& layer = layers_[l];
        if (memory.defined()) x = inject_memory(x, memory, l);
        x = add(x, layer.self_attn.forward(layer.ln_self.forward(x), plan));
        x = layer_tail(layer, x, segments, fused, fused_segments);
    }
    return head_.forward(final_ln_.forward(x));
}

Decoder::Stream Decoder::start_stream(const Tensor& fused, const Tensor& memory_read) {
    NoGradGuard guard;
    Stream s;
    for (auto& layer : layers_) {
        s.caches.emplace_back(config_.sinks, config_.window, config_.d_model);
        auto [keys, values] = layer.cross.keys_values(fused, Segments{0, fused.rows()});
        s.cross_keys.push_back(std::move(keys));
        s.cross_values.push_back(std::move(values));
    }
    if (memory_read.defined()) {
        if (memory_read.rows() != 1) throw std::invalid_argument("start_stream: expected a single memory row");
        s.memory = project_memory(memory_read);
    }
    return s;
}

Tensor Decoder::decode_step(std::uint32_t token, Stream& stream) {
    NoGradGuard guard;
    if (stream.caches.size() != layers_.size() || stream.cross_keys.size() != layers_.size()) {
        throw std::logic_error("decode_step: stream was built for a different decoder");
    }
    const std::size_t expected = stream.caches.front().size();
    for (const auto& c : stream.caches) {
        if (c.size() != expected) throw std::logic_error("decode_step: layer caches disagree on their contents");
    }
    const std::uint32_t id[1] = {token};
    const auto acfg = attention_config();
    Tensor x = embedding(token_embedding_, id);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        auto& layer = layers_[l];
        if (stream.memory.defined()) x = inject_memory(x, stream.memory, l);
        const Tensor h = layer.ln_self.forward(x);
        const Tensor q = layer.self_attn.q.forward(h);
        const Tensor k = layer.self_attn.k.forward(h);
        const Tensor v = layer.self_attn.v.forward(h);
        stream.caches[l].append(k.data(), v.data(), stream.arrivals);
        const Tensor a = streaming_attend(q, stream.caches[l], acfg, layer.self_attn.pos_table);
        x = add(x, layer.self_attn.o.forward(a));

        const Tensor hc = layer.ln_cross.forward(x);
        const auto plan = plan_cross(Segments{0, 1}, Segments{0, stream.cross_keys[l].rows()});
        const Tensor ca = attention(layer.cross.q.forward(hc), stream.cross_keys[l], stream.cross_values[l], Tensor{},
                                    plan, layer.cross.heads);
        x = add(x, layer.cross.o.forward(ca));
        x = add(x, layer.ffn.forward(layer.ln_ffn.forward(x)));
    }
    ++stream.arrivals;
    return head_.forward(final_ln_.forward(x));
}

void Decoder::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".embedding", token_embedding_, false);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const std::string p = prefix + ".layer" + std::to_string(i);
        auto& layer = layers_[i];
        layer.ln_self.visit(r, p + ".ln_self");
        layer.self_attn.visit(r, p + ".self");
        layer.ln_cross.visit(r, p + ".ln_cross");
        layer.cross.visit(r, p + ".cross");
        layer.ln_ffn.visit(r, p + ".ln_ffn");
        layer.ffn.visit(r, p + ".ffn");
        if (layer.concat_proj) r.add(p + ".concat_proj", *layer.concat_proj);
    }
    r.add(prefix + ".memory_proj", memory_proj_);
    final_ln_.visit(r, prefix + ".ln_final");
    r.add(prefix + ".head", head_);
}

std::uint32_t sample_token(std::span<const float> logits, const Sampler& sampler, Rng& rng) {
    if (logits.empty()) throw std::domain_error("sample_token: empty logits");
    const auto argmax = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (sampler.kind == SamplerKind::greedy || !(sampler.temperature > 0.0f)) return argmax;

    std::vector<std::uint32_t> candidates(logits.size());
    std::iota(candidates.begin(), candidates.end(), 0u);
    if (sampler.kind == SamplerKind::top_k && sampler.top_k > 0 && sampler.top_k < candidates.size()) {
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(sampler.top_k),
                          candidates.end(), [&](std::uint32_t a, std::uint32_t b) {
                              return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                          });
        candidates.resize(sampler.top_k);
        std::sort(candidates.begin(), candidates.end());
    }
    const double inv_t = 1.0 / static_cast<double>(sampler.temperature);
    const double mx = static_cast<double>(logits[argmax]) * inv_t;
    std::vector<double> weights(candidates.size());
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        weights[i] = std::exp(static_cast<double>(logits[candidates[i]]) * inv_t - mx);
        total += weights[i];
    }
    if (!(total > 0.0) || !std::isfinite(total)) return argmax;
    double u = uniform01(rng) * total;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        u -= weights[i];
        if (u < 0.0) return candidates[i];
    }
    return candidates.back();
}

std::vector<std::uint32_t> generate(Decoder& decoder, Decoder::Stream& stream, std::span<const std::uint32_t> prompt,
                                    int max_new, const Sampler& sampler, Rng& rng,
                                    std::optional<std::uint32_t> end_token) {
    if (prompt.empty()) throw std::domain_error("generate: prompt must not be empty");
    if (max_new <= 0) throw std::domain_error("generate: max_new must be positive");
    Tensor logits;
    for (auto t : prompt) logits = decoder.decode_step(t, stream);
    std::vector<std::uint32_t> out;
    for (int i = 0; i < max_new; ++i) {
        const std::uint32_t next = sample_token(logits.data(), sampler, rng);
        if (end_token && next == *end_token) break;
        out.push_back(next);
        if (i + 1 < max_new) logits = decoder.decode_step(next, stream);
    }
    return out;
}

}  // namespace bitmar
