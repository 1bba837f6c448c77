#include "bitmar/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "bitmar/ops.hpp"
#include "bitmar/training.hpp"

namespace bitmar {

void ModelConfig::validate() const {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument(msg);
    };
    need(vocab_size >= 2, "model.vocab_size must be at least 2");
    need(d_model > 0 && heads > 0 && d_model % heads == 0, "model.d_model must be a positive multiple of model.heads");
    need(encoder_layers > 0 && decoder_layers > 0, "model layer counts must be positive");
    need(ffn_mult > 0, "model.ffn_mult must be positive");
    need(max_len >= 2, "model.max_len must be at least 2");
    need(window > 0, "streaming.window must be positive");
    need(feature_dim > 0 && vision_hidden > 0, "vision dimensions must be positive");
    need(vision_dropout >= 0.0f && vision_dropout < 1.0f, "model.vision_dropout must lie in [0, 1)");
    need(tau > 0.0f, "loss.tau must be positive");
    need(memory.slots > 0, "memory.slots must be positive");
    need(memory.width == d_model, "memory.width must equal model.d_model");
    need(memory.alpha > 0.0f && memory.alpha <= 1.0f, "memory.alpha must lie in (0, 1]");
    need(memory.usage_decay >= 0.0f && memory.usage_decay < 1.0f, "memory.usage_decay must lie in [0, 1)");
    need(memory.forget_rate >= 0.0f && memory.forget_rate <= 1.0f, "memory.forget_rate must lie in [0, 1]");
}

namespace {

TextEncoderConfig text_config(const ModelConfig& c) {
    return TextEncoderConfig{c.vocab_size, c.d_model, c.heads, c.encoder_layers, c.ffn_mult, c.max_len,
                             c.sinks,      c.window,  c.text_causal, c.ln_eps};
}

DecoderConfig decoder_config(const ModelConfig& c) {
    return DecoderConfig{c.vocab_size, c.d_model, c.heads,  c.decoder_layers, c.ffn_mult,
                         c.max_len,    c.sinks,   c.window, c.injection,      c.ln_eps};
}

const ModelConfig& checked(const ModelConfig& c) {
    c.validate();
    return c;
}

}  // namespace

BitMarModel::BitMarModel(const ModelConfig& config, std::uint64_t seed) : config_(checked(config)) {
    Rng rng(seed);
    text_ = TextEncoder(text_config(config_), rng);
    vision_ = VisionCompressor(VisionConfig{config_.feature_dim, config_.vision_hidden, config_.d_model,
                                            config_.vision_dropout},
                               rng);
    fusion_ = FusionBlock(config_.d_model, config_.heads, config_.pooling, config_.ln_eps, rng);
    memory_ = EpisodicMemory(config_.memory, rng);
    decoder_ = Decoder(decoder_config(config_), rng);

    auto tagged = [&](auto& module, const std::string& prefix, ParamGroup g) {
        module.visit(registry_, prefix);
        groups_.resize(registry_.params.size(), g);
    };
    tagged(text_, "text", ParamGroup::text);
    tagged(vision_, "vision", ParamGroup::vision);
    tagged(fusion_, "fusion", ParamGroup::other);
    tagged(memory_, "memory", ParamGroup::other);
    tagged(decoder_, "decoder", ParamGroup::other);
    set_quantized(config_.quantize);
}

ForwardOutput BitMarModel::forward(const Batch& batch, const ForwardContext& ctx, const ForwardOptions& options) {
    const std::size_t b = batch.size;
    if (b == 0) throw std::domain_error("forward: empty batch");
    const std::uint32_t end = config_.end_token();
    const std::size_t d = config_.d_model;
    const std::size_t pooled_per_item = (batch.grid + 1) / 2 * ((batch.grid + 1) / 2);

    // Conditioning context: a lone BOS per example.
    std::vector<std::uint32_t> ctx_ids(b, end);
    Segments ctx_segs(b + 1);
    for (std::size_t i = 0; i <= b; ++i) ctx_segs[i] = i;
    const Tensor z = text_.forward(ctx_ids, ctx_segs);

    std::vector<std::size_t> mm_rows;
    std::vector<Tensor> pooled;
    Segments v_segs{0};
    for (std::size_t r = 0; r < b; ++r) {
        if (batch.multimodal(r)) {
            mm_rows.push_back(r);
            pooled.push_back(pool_patches(batch.features[r], batch.grid, config_.feature_dim));
        }
        v_segs.push_back(v_segs.back() + (batch.multimodal(r) ? pooled_per_item : 0));
    }
    Tensor v;
    if (!pooled.empty()) v = vision_.forward(concat_rows(pooled), ctx);

    const Tensor fused = fusion_.fuse(z, ctx_segs, v, v_segs);
    const Tensor q_mem = fusion_.pool_query(fused, ctx_segs);

    ForwardOutput out;
    out.multimodal = mm_rows.size();
    Tensor memory_read;
    if (options.use_memory && memory_.enabled()) {
        auto read = memory_.read(q_mem, options.record_usage);
        memory_read = read.value;
        out.read_weights = read.weights;
    }

    // Decoder: [BOS]+caption -> caption+[END].
    std::vector<std::uint32_t> dec_ids, targets;
    std::vector<float> weights;
    Segments dec_segs{0};
    for (std::size_t r = 0; r < b; ++r) {
        auto caption = batch.row(r);
        caption = caption.first(std::min(caption.size(), config_.max_len - 1));
        dec_ids.push_back(end);
        dec_ids.insert(dec_ids.end(), caption.begin(), caption.end());
        targets.insert(targets.end(), caption.begin(), caption.end());
        targets.push_back(end);
        const float w = 1.0f / static_cast<float>((caption.size() + 1) * b);
        weights.insert(weights.end(), caption.size() + 1, w);
        dec_segs.push_back(dec_ids.size());
    }
    out.tokens = dec_ids.size();
    const Tensor logits = decoder_.forward(dec_ids, dec_segs, fused, ctx_segs, memory_read);
    out.lm = weighted_cross_entropy(logits, targets, weights);

    // Cross-modal alignment on the multimodal rows: caption encoding vs vision.
    if (!mm_rows.empty()) {
        std::vector<std::uint32_t> cap_ids;
        Segments cap_segs{0};
        for (auto r : mm_rows) {
            auto caption = batch.row(r);
            caption = caption.first(std::min(caption.size(), config_.max_len));
            if (caption.empty()) {
                cap_ids.push_back(end);
            } else {
                cap_ids.insert(cap_ids.end(), caption.begin(), caption.end());
            }
            cap_segs.push_back(cap_ids.size());
        }
        Segments mm_v_segs{0};
        for (std::size_t i = 0; i < mm_rows.size(); ++i) mm_v_segs.push_back(mm_v_segs.back() + pooled_per_item);
        const Tensor z_pool = segment_mean(text_.forward(cap_ids, cap_segs), cap_segs);
        const Tensor v_pool = segment_mean(v, mm_v_segs);
        out.cm = infonce(z_pool, v_pool, config_.tau);
        double total = 0.0;
        const auto zp = z_pool.data(), vp = v_pool.data();
        for (std::size_t i = 0; i < mm_rows.size(); ++i) {
            total += cosine_similarity(zp.subspan(i * d, d), vp.subspan(i * d, d));
        }
        out.alignment = total / static_cast<double>(mm_rows.size());
    } else {
        out.cm = Tensor::scalar(0.0f);
    }

    const Tensor q_bar = segment_mean(q_mem, Segments{0, b});
    out.write_query = q_bar.to_vector();
    if (options.use_memory && memory_.enabled()) {
        out.mem = sum_squares(memory_.write_delta(q_bar));
    } else {
        out.mem = Tensor::scalar(0.0f);
    }
    return out;
}

BitMarModel::Conditioning BitMarModel::condition(std::span<const std::uint32_t> prompt, std::span<const float> features,
                                                 std::size_t grid, bool use_memory) {
    NoGradGuard guard;
    Conditioning c;
    c.decoder_prefix.push_back(config_.end_token());
    const auto p = prompt.first(std::min(prompt.size(), config_.max_len - 1));
    c.decoder_prefix.insert(c.decoder_prefix.end(), p.begin(), p.end());
    const Tensor z = text_.encode_text(c.decoder_prefix);
    Tensor v;
    if (!features.empty()) v = vision_.compress_vision(features, grid);
    c.fused = fusion_.fuse(z, v);
    c.query = fusion_.pool_query(c.fused);
    if (use_memory && memory_.enabled()) {
        auto read = memory_.read(c.query, false);
        c.memory_read = read.value;
        c.read_weights = read.weights;
    }
    return c;
}

std::vector<std::uint32_t> BitMarModel::generate(std::span<const std::uint32_t> prompt, std::span<const float> features,
                                                 std::size_t grid, int max_new, const Sampler& sampler, Rng& rng,
                                                 bool use_memory, bool write_memory) {
    if (max_new <= 0) throw std::domain_error("generate: max_new must be positive");
    const auto c = condition(prompt, features, grid, use_memory);
    if (write_memory && use_memory) memory_.write(c.query);
    auto stream = decoder_.start_stream(c.fused, c.memory_read);
    const auto room = static_cast<int>(config_.max_len - c.decoder_prefix.size());
    const int budget = std::max(1, std::min(max_new, room));
    return bitmar::generate(decoder_, stream, c.decoder_prefix, budget, sampler, rng, config_.end_token());
}

std::vector<float> BitMarModel::slot_activation(const Dataset& dataset) {
    const std::size_t k = config_.memory.slots;
    std::vector<float> mean(k, 0.0f);
    if (dataset.size() == 0 || !memory_.enabled()) return mean;
    std::vector<double> acc(k, 0.0);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        std::span<const float> feat;
        if (dataset.has_features()) feat = dataset.features[i];
        const auto c = condition({}, feat, dataset.grid, true);
        const auto w = c.read_weights.data();
        for (std::size_t s = 0; s < k; ++s) acc[s] += w[s];
    }
    for (std::size_t s = 0; s < k; ++s) mean[s] = static_cast<float>(acc[s] / static_cast<double>(dataset.size()));
    return mean;
}

void BitMarModel::set_training(bool training) {
    for (auto& [name, layer] : registry_.linears) layer->set_training(training);
}

void BitMarModel::set_quantized(bool quantized) {
    for (auto& [name, layer] : registry_.linears) layer->set_quantized(quantized);
}

double BitMarModel::quantization_effectiveness() const {
    std::vector<const TernaryLinear*> layers;
    for (const auto& [name, layer] : registry_.linears) layers.push_back(layer);
    return bitmar::quantization_effectiveness(layers);
}

std::vector<std::pair<std::string, double>> BitMarModel::quantization_per_layer() const {
    std::vector<std::pair<std::string, double>> out;
    for (const auto& [name, layer] : registry_.linears) {
        const TernaryLinear* one[1] = {layer};
        out.emplace_back(name, bitmar::quantization_effectiveness(one));
    }
    return out;
}

}  // namespace bitmar
