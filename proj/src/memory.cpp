#include "bitmar/memory.hpp"

#include <cmath>
#include <stdexcept>

#include "bitmar/ops.hpp"

namespace bitmar {

EpisodicMemory::EpisodicMemory(const MemoryConfig& config, Rng& rng)
    : config_(config),
      matrix_(normal_tensor({config.slots, config.width}, config.init_std, rng)),
      write_head_(config.width, config.slots, rng),
      previous_(config.slots * config.width, 0.0f),
      usage_(config.slots, 0.0f) {
    if (!(config.alpha > 0.0f && config.alpha <= 1.0f)) {
        throw std::invalid_argument("memory: alpha must lie in (0, 1]");
    }
}

EpisodicMemory::Read EpisodicMemory::read(const Tensor& queries, bool record_usage) {
    if (queries.dim() != 2 || queries.cols() != config_.width) {
        throw std::invalid_argument("memory read: expected [n x " + std::to_string(config_.width) + "] queries, got " +
                                    shape_str(queries.shape()));
    }
    const std::size_t n = queries.rows();
    if (!config_.enabled) return {Tensor::zeros({n, config_.width}), Tensor::zeros({n, config_.slots})};
    Tensor weights = softmax(linear(queries, matrix_), 1);
    Tensor value = matmul(weights, matrix_);
    if (record_usage && n > 0) {
        const float keep = config_.usage_decay;
        auto w = weights.data();
        for (std::size_t k = 0; k < config_.slots; ++k) {
            float m = 0.0f;
            for (std::size_t r = 0; r < n; ++r) m += w[r * config_.slots + k];
            usage_[k] = keep * usage_[k] + (1.0f - keep) * (m / static_cast<float>(n));
        }
    }
    return {value, weights};
}

Tensor EpisodicMemory::write_weights(const Tensor& queries) { return softmax(write_head_.forward(queries), 1); }

Tensor EpisodicMemory::write_delta(const Tensor& query) {
    if (query.dim() != 2 || query.rows() != 1) throw std::invalid_argument("write_delta: expected a single query row");
    Tensor w = write_weights(query);  // [1×K]
    return scale(matmul(transpose(w), query), config_.alpha);
}

void EpisodicMemory::write(const Tensor& query) {
    if (!config_.enabled) return;
    NoGradGuard guard;
    if (query.dim() != 2 || query.rows() != 1) throw std::invalid_argument("memory write: expected a single query row");
    const Tensor w = write_weights(query);
    write_with_weights(w.data(), query.data());
}

void EpisodicMemory::write_with_weights(std::span<const float> weights, std::span<const float> query) {
    if (!config_.enabled) return;
    if (weights.size() != config_.slots || query.size() != config_.width) {
        throw std::invalid_argument("memory write: weight/query sizes do not match K x C");
    }
    std::vector<float> delta(config_.slots * config_.width);
    for (std::size_t k = 0; k < config_.slots; ++k)
        for (std::size_t c = 0; c < config_.width; ++c) delta[k * config_.width + c] = config_.alpha * weights[k] * query[c];
    apply_delta(delta);
}

void EpisodicMemory::apply_delta(std::span<const float> delta) {
    if (!config_.enabled) return;
    auto m = matrix_.data();
    if (delta.size() != m.size()) throw std::invalid_argument("memory write: delta has the wrong size");
    previous_.assign(m.begin(), m.end());
    has_previous_ = true;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += delta[i];
    ++writes_;
    if (config_.forget_every > 0 && writes_ % config_.forget_every == 0) apply_forgetting();
}

double EpisodicMemory::consistency_penalty() const {
    if (!has_previous_) return 0.0;
    auto m = matrix_.data();
    double total = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double d = static_cast<double>(m[i]) - previous_[i];
        total += d * d;
    }
    return total;
}

void EpisodicMemory::apply_forgetting() {
    const float floor = config_.effective_usage_floor();
    const float keep = 1.0f - config_.forget_rate;
    auto m = matrix_.data();
    for (std::size_t k = 0; k < config_.slots; ++k) {
        if (usage_[k] >= floor) continue;
        for (std::size_t c = 0; c < config_.width; ++c) m[k * config_.width + c] *= keep;
    }
}

void EpisodicMemory::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".matrix", matrix_, true);
    r.add(prefix + ".write_head", write_head_);
}

double distribution_entropy(std::span<const float> values) {
    double total = 0.0;
    for (float v : values) {
        if (v < 0.0f) throw std::invalid_argument("distribution_entropy: negative entry");
        total += v;
    }
    if (total <= 0.0) return 0.0;
    double h = 0.0;
    for (float v : values) {
        if (v <= 0.0f) continue;
        const double p = v / total;
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace bitmar
