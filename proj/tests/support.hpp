#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bitmar/layers.hpp"
#include "bitmar/ops.hpp"
#include "bitmar/rng.hpp"
#include "bitmar/tensor.hpp"

namespace bitmar::test {

inline Tensor random_tensor(Shape shape, Rng& rng, float std_dev = 1.0f, bool requires_grad = false) {
    return normal_tensor(std::move(shape), std_dev, rng, requires_grad);
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::fabs(double(a[i]) - b[i]));
    return m;
}

/// Norm-wise relative error between the analytic gradient of sum(f()·R) and
/// central differences, over all leaves together.
inline double gradient_error(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves, std::uint64_t seed,
                             double h = 1e-3) {
    Rng rng(seed);
    Tensor out = f();
    std::vector<float> r(out.numel());
    for (auto& x : r) x = static_cast<float>(normal01(rng));
    const Tensor proj = Tensor::from(out.shape(), r);
    for (auto leaf : leaves) leaf.zero_grad();
    sum(mul(out, proj)).backward();

    auto evaluate = [&] {
        NoGradGuard guard;
        const Tensor o = f();
        double acc = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i) acc += static_cast<double>(o.data()[i]) * r[i];
        return acc;
    };
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto leaf : leaves) {
        auto data = leaf.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const float saved = data[i];
            data[i] = static_cast<float>(saved + h);
            const double up = evaluate();
            data[i] = static_cast<float>(saved - h);
            const double down = evaluate();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = leaf.has_grad() ? leaf.grad()[i] : 0.0;
            diff2 += (analytic - numeric) * (analytic - numeric);
            a2 += analytic * analytic;
            n2 += numeric * numeric;
        }
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    return std::sqrt(diff2) / denom;
}

/// Every parameter of a registry, for gradient checks over a whole block.
inline std::vector<Tensor> registry_leaves(const Registry& r) {
    std::vector<Tensor> out;
    for (const auto& p : r.params) out.push_back(p.tensor);
    return out;
}

inline void set_quantized(Registry& r, bool on) {
    for (auto& [name, layer] : r.linears) layer->set_quantized(on);
}

inline void set_training(Registry& r, bool on) {
    for (auto& [name, layer] : r.linears) layer->set_training(on);
}

}  // namespace bitmar::test
