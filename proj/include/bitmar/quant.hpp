#pragma once

// Ternary (1.58-bit) weights with a learned per-layer scale and per-token
// int8 activations, trained through straight-through gradients.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "bitmar/rng.hpp"
#include "bitmar/tensor.hpp"

namespace bitmar {

struct TernaryCodes {
    std::vector<std::int8_t> codes;
    /// Absmean threshold, mean |latent|; 1 for an all-zero matrix.
    float gamma = 1.0f;
};

/// Rounds half away from zero.
inline float round_half_away(float v) { return std::round(v); }

/// codes = clip(round(latent / γ), -1, 1) with γ = mean |latent|.
TernaryCodes quantize_weights(std::span<const float> latent);

struct Int8Activation {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int8_t> codes;
    /// 127 / max|row|, or 1 for an all-zero row.
    std::vector<float> scales;

    std::vector<float> dequantize() const;
};

Int8Activation quantize_activations(std::span<const float> x, std::size_t rows, std::size_t cols);
Int8Activation quantize_activations(const Tensor& x);

/// Straight-through gradient for the latent weights: identity inside the
/// clip region |latent/γ| <= 1, zero outside.
std::vector<float> ste_backward(std::span<const float> upstream, std::span<const float> latent, float gamma);

/// Dequantized int8 activations in the forward pass, identity gradient.
Tensor fake_quantize_activations(const Tensor& x);

class TernaryLinear {
public:
    TernaryLinear() = default;
    /// Latent weights ~ N(0, init_std²); init_std <= 0 selects 1/sqrt(in).
    TernaryLinear(std::size_t in, std::size_t out, Rng& rng, float init_std = 0.0f);

    /// x [n×in] -> [n×out]. Train mode re-quantizes the latent weights on
    /// every call; eval mode reuses the codes frozen by finalize().
    Tensor forward(const Tensor& x);

    /// Integer path: int8 activations times ternary codes, rescaled once per
    /// output. Eval-mode only.
    std::vector<float> forward_int8(const Tensor& x) const;

    void refresh_codes();
    /// Refreshes the codes and switches to eval mode.
    void finalize();
    void set_training(bool training);
    bool training() const { return training_; }

    /// Disabling quantization turns the layer into a float linear map over the
    /// latent weights.
    void set_quantized(bool quantized) { quantized_ = quantized; }
    bool quantized() const { return quantized_; }
    void set_quantize_activations(bool on) { quantize_activations_ = on; }

    /// Projects the learned scale back to a positive value after an update.
    void clamp_scale();

    /// scale × codes as a dense [out×in] tensor.
    Tensor effective_weight() const;

    Tensor& latent() { return latent_; }
    const Tensor& latent() const { return latent_; }
    Tensor& scale() { return scale_; }
    const Tensor& scale() const { return scale_; }
    std::span<const std::int8_t> codes() const { return codes_; }
    /// Replaces cached codes, e.g. when restoring a checkpoint.
    void set_codes(std::vector<std::int8_t> codes, float gamma);
    float gamma() const { return gamma_; }
    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }

private:
    std::size_t in_ = 0;
    std::size_t out_ = 0;
    Tensor latent_;
    Tensor scale_;
    std::vector<std::int8_t> codes_;
    float gamma_ = 1.0f;
    bool training_ = true;
    bool quantized_ = true;
    bool quantize_activations_ = true;
};

/// Fraction of zero codes across the given layers.
double quantization_effectiveness(std::span<const TernaryLinear* const> layers);

}  // namespace bitmar
