#pragma once
// Independent reference computations shared by the unit tests and the
// acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "bitmar/layers.hpp"
#include "bitmar/ops.hpp"
#include "bitmar/quant.hpp"
#include "bitmar/rng.hpp"
#include "bitmar/training.hpp"

namespace bitmar::oracle {

/// Expected cache contents after `length` arrivals: the first S plus the last
/// min(W, length - S), as arrival indices.
inline std::vector<std::uint64_t> cache_replay(std::uint64_t length, std::size_t sinks, std::size_t window) {
    std::vector<std::uint64_t> out;
    std::deque<std::uint64_t> ring;
    for (std::uint64_t t = 0; t < length; ++t) {
        if (t < sinks) {
            out.push_back(t);
            continue;
        }
        ring.push_back(t);
        if (ring.size() > window) ring.pop_front();
    }
    out.insert(out.end(), ring.begin(), ring.end());
    return out;
}

/// Trains a d→d ternary layer on y = 2x with straight-through gradients and
/// returns {initial MSE, final MSE}.
inline std::pair<double, double> ternary_regressor(std::size_t d, int steps, std::uint64_t seed) {
    Rng rng(seed);
    TernaryLinear layer(d, d, rng);
    Registry reg;
    reg.add("w", layer);
    AdamW opt(reg.params, AdamWConfig{0.9f, 0.999f, 1e-8f, 0.0f});
    auto batch = [&](Tensor& x, Tensor& y) {
        std::vector<float> xs(32 * d), ys(32 * d);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            xs[i] = static_cast<float>(normal01(rng));
            ys[i] = 2.0f * xs[i];
        }
        x = Tensor::from({32, d}, xs);
        y = Tensor::from({32, d}, ys);
    };
    Rng eval_rng(seed + 1);
    std::vector<float> ex(256 * d), ey(256 * d);
    for (std::size_t i = 0; i < ex.size(); ++i) {
        ex[i] = static_cast<float>(normal01(eval_rng));
        ey[i] = 2.0f * ex[i];
    }
    const Tensor eval_x = Tensor::from({256, d}, ex), eval_y = Tensor::from({256, d}, ey);
    auto eval_mse = [&] {
        NoGradGuard guard;
        return static_cast<double>(mean(mul(sub(layer.forward(eval_x), eval_y), sub(layer.forward(eval_x), eval_y))).item());
    };
    const double initial = eval_mse();
    for (int s = 0; s < steps; ++s) {
        Tensor x, y;
        batch(x, y);
        const Tensor diff = sub(layer.forward(x), y);
        mean(mul(diff, diff)).backward();
        opt.step(0.01f);
        opt.zero_grad();
        layer.clamp_scale();
    }
    return {initial, eval_mse()};
}

/// Hand simulation of the anti-collapse controller over an alignment trace.
/// Returns the steps (0-based) at which an intervention starts.
inline std::vector<std::uint64_t> controller_triggers(const std::vector<double>& trace, std::size_t window,
                                                      double threshold, std::uint64_t cooldown,
                                                      std::uint64_t duration,
                                                      std::optional<std::uint64_t> last_trigger = std::nullopt) {
    const double a = 2.0 / (static_cast<double>(window) + 1.0);
    std::vector<std::uint64_t> out;
    double ema = 0.0, top = 0.0;
    bool started = false;
    std::uint64_t active_until = 0;
    bool has_trigger = last_trigger.has_value();
    std::uint64_t last = last_trigger.value_or(0);
    for (std::uint64_t s = 0; s < trace.size(); ++s) {
        if (!started) {
            ema = trace[s];
            top = ema;
            started = true;
        } else {
            ema = a * trace[s] + (1.0 - a) * ema;
            top = std::max(top, ema);
        }
        const bool active = !out.empty() && s < active_until;
        const bool cooled = !has_trigger || s - last >= cooldown;
        if (!active && cooled && top - ema > threshold) {
            out.push_back(s);
            has_trigger = true;
            last = s;
            active_until = s + duration;
            top = ema;
        }
    }
    return out;
}

}  // namespace bitmar::oracle
