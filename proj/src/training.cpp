#include "bitmar/training.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "bitmar/ops.hpp"

namespace bitmar {

Tensor infonce(const Tensor& z_pool, const Tensor& v_pool, float tau) {
    if (z_pool.dim() != 2 || z_pool.shape() != v_pool.shape()) {
        throw std::invalid_argument("infonce: shapes " + shape_str(z_pool.shape()) + " and " +
                                    shape_str(v_pool.shape()) + " differ");
    }
    const std::size_t b = z_pool.rows();
    if (b == 0) throw std::domain_error("infonce: empty batch");
    if (!(tau > 0.0f)) throw std::domain_error("infonce: tau must be positive");
    const Tensor zn = l2_normalize_rows(z_pool);
    const Tensor vn = l2_normalize_rows(v_pool);
    const Tensor logits = scale(linear(zn, vn), 1.0f / tau);  // [B×B], rows text, cols vision
    std::vector<std::uint32_t> diag(b);
    std::iota(diag.begin(), diag.end(), 0u);
    const Tensor t2v = cross_entropy(logits, diag);
    const Tensor v2t = cross_entropy(transpose(logits), diag);
    return scale(add(t2v, v2t), 0.5f);
}

static void check_component(double v, const char* name) {
    if (!std::isfinite(v)) throw std::domain_error(std::string("total_loss: non-finite ") + name);
}

double total_loss(double lm, double cm, double mem, const LossWeights& w) {
    check_component(lm, "L_lm");
    check_component(cm, "L_cm");
    check_component(mem, "L_mem");
    return lm + w.cm * cm + w.mem * mem;
}

Tensor total_loss(const Tensor& lm, const Tensor& cm, const Tensor& mem, const LossWeights& w) {
    check_component(lm.item(), "L_lm");
    check_component(cm.item(), "L_cm");
    check_component(mem.item(), "L_mem");
    return add(add(lm, scale(cm, static_cast<float>(w.cm))), scale(mem, static_cast<float>(w.mem)));
}

AdamW::AdamW(std::vector<Registry::Param> params, const AdamWConfig& config)
    : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0f);
        v_.emplace_back(p.tensor.numel(), 0.0f);
    }
}

void AdamW::step(float lr, const std::function<bool(std::size_t)>& skip) {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_));
    const float b1 = config_.beta1, b2 = config_.beta2;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (skip && skip(i)) continue;
        Tensor& p = params_[i].tensor;
        if (!p.has_grad()) continue;
        auto w = p.data();
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        const float decay = params_[i].decay ? lr * config_.weight_decay : 0.0f;
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] -= decay * w[j];
            w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + config_.eps));
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

double CosineRestarts::lr_at(std::uint64_t step) const {
    if (t0 == 0 || t_mult == 0) throw std::invalid_argument("CosineRestarts: t0 and t_mult must be positive");
    std::uint64_t t = step, period = t0;
    while (t >= period) {
        t -= period;
        period *= t_mult;
    }
    const double eta_min = eta_min_ratio * base_lr;
    const double phase = std::numbers::pi * static_cast<double>(t) / static_cast<double>(period);
    return eta_min + (base_lr - eta_min) * 0.5 * (1.0 + std::cos(phase));
}

std::string intervention_name(Intervention i) {
    switch (i) {
        case Intervention::none: return "none";
        case Intervention::freeze_text: return "freeze_text";
        case Intervention::freeze_vision: return "freeze_vision";
        case Intervention::upweight_cm: return "upweight_cm";
    }
    return "unknown";
}

Controller::Controller(const ControllerConfig& config, std::uint64_t seed) : config_(config), rng_(seed) {
    if (config.ema_window == 0) throw std::invalid_argument("controller: ema_window must be positive");
}

Controller::Decision Controller::step(std::optional<double> alignment) {
    auto& s = state_;
    const std::uint64_t now = s.step++;
    if (s.active != Intervention::none && now >= s.active_until) s.active = Intervention::none;

    Decision d;
    if (alignment) {
        if (!s.has_ema) {
            s.ema = *alignment;
            s.ema_max = s.ema;
            s.has_ema = true;
        } else {
            s.ema += ema_alpha() * (*alignment - s.ema);
            if (s.ema > s.ema_max) s.ema_max = s.ema;
        }
        const bool cooled = !s.last_trigger || now - *s.last_trigger >= config_.cooldown;
        if (s.active == Intervention::none && cooled && s.ema_max - s.ema > config_.drop_threshold) {
            if (uniform01(rng_) < 0.5) {
                s.active = uniform01(rng_) < 0.5 ? Intervention::freeze_text : Intervention::freeze_vision;
            } else {
                s.active = Intervention::upweight_cm;
            }
            s.active_until = now + config_.duration;
            s.last_trigger = now;
            s.ema_max = s.ema;
            d.triggered = true;
        }
    }
    d.active = s.active;
    return d;
}

}  // namespace bitmar
