#include "bitmar/layers.hpp"

#include <algorithm>
#include <numeric>

#include "bitmar/ops.hpp"

namespace bitmar {

void Registry::add(const std::string& name, const Tensor& tensor, bool decay) {
    params.push_back({name, tensor, decay});
}

void Registry::add(const std::string& name, TernaryLinear& layer) {
    linears.emplace_back(name, &layer);
    add(name + ".latent", layer.latent(), true);
    add(name + ".scale", layer.scale(), false);
}

Tensor normal_tensor(Shape shape, float std_dev, Rng& rng, bool requires_grad) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(normal01(rng)) * std_dev;
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

LayerNorm::LayerNorm(std::size_t d, float eps_)
    : gain(Tensor::full({d}, 1.0f, true)), bias(Tensor::zeros({d}, true)), eps(eps_) {}

void LayerNorm::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".gain", gain, false);
    r.add(prefix + ".bias", bias, false);
}

FeedForward::FeedForward(std::size_t d, std::size_t hidden, Rng& rng) : up(d, hidden, rng), down(hidden, d, rng) {}

Tensor FeedForward::forward(const Tensor& x) { return down.forward(gelu(up.forward(x))); }

void FeedForward::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".up", up);
    r.add(prefix + ".down", down);
}

SelfAttention::SelfAttention(const AttentionConfig& cfg, Rng& rng)
    : config(cfg),
      q(cfg.d_model, cfg.d_model, rng),
      k(cfg.d_model, cfg.d_model, rng),
      v(cfg.d_model, cfg.d_model, rng),
      o(cfg.d_model, cfg.d_model, rng),
      pos_table(normal_tensor({cfg.capacity(), cfg.d_model}, 0.1f, rng)) {
    config.validate();
}

Tensor SelfAttention::forward(const Tensor& x, const AttentionPlan& plan) {
    return o.forward(attention(q.forward(x), k.forward(x), v.forward(x), pos_table, plan, config.heads));
}

void SelfAttention::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".q", q);
    r.add(prefix + ".k", k);
    r.add(prefix + ".v", v);
    r.add(prefix + ".o", o);
    r.add(prefix + ".pos", pos_table, false);
}

CrossAttention::CrossAttention(std::size_t d, std::size_t heads_, Rng& rng)
    : heads(heads_), q(d, d, rng), k(d, d, rng), v(d, d, rng), o(d, d, rng) {}

Tensor CrossAttention::forward(const Tensor& x, const Segments& x_segments, const Tensor& source,
                               const Segments& source_segments) {
    const auto plan = plan_cross(x_segments, source_segments);
    auto [keys, values] = keys_values(source, source_segments);
    return o.forward(attention(q.forward(x), keys, values, Tensor{}, plan, heads));
}

std::pair<Tensor, Tensor> CrossAttention::keys_values(const Tensor& source, const Segments& source_segments) {
    Tensor keys = k.forward(source);
    Tensor values = v.forward(source);
    const std::size_t d = keys.cols();
    const auto kd = keys.data();
    const auto vd = values.data();
    auto row_less = [d](std::span<const float> m, std::size_t a, std::size_t b) {
        for (std::size_t j = 0; j < d; ++j) {
            const float x = m[a * d + j], y = m[b * d + j];
            if (x != y) return x < y;
        }
        return false;
    };
    std::vector<std::size_t> order(keys.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    bool moved = false;
    for (std::size_t s = 0; s + 1 < source_segments.size(); ++s) {
        const auto first = order.begin() + static_cast<std::ptrdiff_t>(source_segments[s]);
        const auto last = order.begin() + static_cast<std::ptrdiff_t>(source_segments[s + 1]);
        std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
            if (row_less(kd, a, b)) return true;
            if (row_less(kd, b, a)) return false;
            return row_less(vd, a, b);
        });
    }
    for (std::size_t i = 0; i < order.size(); ++i) moved = moved || order[i] != i;
    if (!moved) return {keys, values};
    return {gather_rows(keys, order), gather_rows(values, order)};
}

void CrossAttention::visit(Registry& r, const std::string& prefix) {
    r.add(prefix + ".q", q);
    r.add(prefix + ".k", k);
    r.add(prefix + ".v", v);
    r.add(prefix + ".o", o);
}

}  // namespace bitmar
