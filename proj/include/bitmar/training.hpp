#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bitmar/layers.hpp"

namespace bitmar {

/// Symmetric InfoNCE over the B×B cosine/τ matrix with diagonal positives.
Tensor infonce(const Tensor& z_pool, const Tensor& v_pool, float tau);

struct LossWeights {
    double cm = 1.5;
    double mem = 0.1;
};

/// L_lm + cm·L_cm + mem·L_mem. Non-finite components throw std::domain_error.
double total_loss(double lm, double cm, double mem, const LossWeights& w);
Tensor total_loss(const Tensor& lm, const Tensor& cm, const Tensor& mem, const LossWeights& w);

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

/// Decoupled-weight-decay Adam over a registry's parameters. Decay applies
/// only to parameters flagged for it.
class AdamW {
public:
    AdamW() = default;
    AdamW(std::vector<Registry::Param> params, const AdamWConfig& config);

    /// One update at learning rate lr. Parameters for which `skip` returns true
    /// are left untouched, moments included.
    void step(float lr, const std::function<bool(std::size_t)>& skip = {});
    void zero_grad();

    const std::vector<Registry::Param>& params() const { return params_; }
    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }

private:
    std::vector<Registry::Param> params_;
    AdamWConfig config_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    std::uint64_t t_ = 0;
};

/// Cosine annealing with warm restarts.
struct CosineRestarts {
    double base_lr = 2e-4;
    std::uint64_t t0 = 1000;
    std::uint64_t t_mult = 2;
    double eta_min_ratio = 0.1;

    double lr_at(std::uint64_t step) const;
};

enum class Intervention { none, freeze_text, freeze_vision, upweight_cm };

std::string intervention_name(Intervention i);

struct ControllerConfig {
    std::size_t ema_window = 200;
    double drop_threshold = 0.12;
    std::uint64_t cooldown = 800;
    std::uint64_t duration = 1500;
    float cm_upweight = 2.0f;
};

struct ControllerState {
    std::uint64_t step = 0;
    bool has_ema = false;
    double ema = 0.0;
    double ema_max = 0.0;
    std::optional<std::uint64_t> last_trigger;
    Intervention active = Intervention::none;
    std::uint64_t active_until = 0;
};

/// Anti-collapse controller: tracks an EMA of the alignment statistic and its
/// maximum since the last trigger, and starts an intervention when the EMA
/// drops more than the threshold below that maximum.
class Controller {
public:
    Controller() = default;
    Controller(const ControllerConfig& config, std::uint64_t seed);

    struct Decision {
        bool triggered = false;
        Intervention active = Intervention::none;
    };

    /// Call once per training step. Steps without an alignment sample still
    /// advance time but leave the EMA untouched.
    Decision step(std::optional<double> alignment);

    double ema_alpha() const { return 2.0 / (static_cast<double>(config_.ema_window) + 1.0); }
    float cm_multiplier() const { return state_.active == Intervention::upweight_cm ? config_.cm_upweight : 1.0f; }
    bool text_frozen() const { return state_.active == Intervention::freeze_text; }
    bool vision_frozen() const { return state_.active == Intervention::freeze_vision; }

    const ControllerConfig& config() const { return config_; }
    ControllerState& state() { return state_; }
    const ControllerState& state() const { return state_; }
    Rng& rng() { return rng_; }

private:
    ControllerConfig config_;
    ControllerState state_;
    Rng rng_;
};

}  // namespace bitmar
