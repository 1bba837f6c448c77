#include "bitmar/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "bitmar/ops.hpp"

namespace bitmar {

TernaryCodes quantize_weights(std::span<const float> latent) {
    TernaryCodes out;
    out.codes.assign(latent.size(), 0);
    double abs_sum = 0.0;
    for (float w : latent) abs_sum += std::fabs(w);
    const float gamma = latent.empty() ? 0.0f : static_cast<float>(abs_sum / static_cast<double>(latent.size()));
    if (!(gamma > 0.0f)) {
        out.gamma = 1.0f;
        return out;
    }
    out.gamma = gamma;
    for (std::size_t i = 0; i < latent.size(); ++i) {
        const float q = round_half_away(latent[i] / gamma);
        out.codes[i] = static_cast<std::int8_t>(std::clamp(q, -1.0f, 1.0f));
    }
    return out;
}

std::vector<float> Int8Activation::dequantize() const {
    std::vector<float> out(codes.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = static_cast<float>(codes[r * cols + c]) / scales[r];
    return out;
}

Int8Activation quantize_activations(std::span<const float> x, std::size_t rows, std::size_t cols) {
    if (x.size() != rows * cols) throw std::invalid_argument("quantize_activations: size mismatch");
    Int8Activation q;
    q.rows = rows;
    q.cols = cols;
    q.codes.resize(x.size());
    q.scales.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = x.data() + r * cols;
        float max_abs = 0.0f;
        bool finite = true;
        for (std::size_t c = 0; c < cols; ++c) {
            finite = finite && std::isfinite(row[c]);
            max_abs = std::max(max_abs, std::fabs(row[c]));
        }
        if (!finite) {
            // NaN scale with zero codes: dequantizes to NaN instead of hiding the fault
            q.scales[r] = std::numeric_limits<float>::quiet_NaN();
            continue;
        }
        const float s = max_abs > 0.0f ? 127.0f / max_abs : 1.0f;
        q.scales[r] = s;
        for (std::size_t c = 0; c < cols; ++c) {
            const float v = std::clamp(round_half_away(row[c] * s), -127.0f, 127.0f);
            q.codes[r * cols + c] = static_cast<std::int8_t>(v);
        }
    }
    return q;
}

Int8Activation quantize_activations(const Tensor& x) {
    const std::size_t cols = x.shape().back();
    return quantize_activations(x.data(), cols ? x.numel() / cols : 0, cols);
}

std::vector<float> ste_backward(std::span<const float> upstream, std::span<const float> latent, float gamma) {
    if (upstream.size() != latent.size()) throw std::invalid_argument("ste_backward: size mismatch");
    std::vector<float> out(upstream.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(latent[i] / gamma) <= 1.0f ? upstream[i] : 0.0f;
    return out;
}

Tensor fake_quantize_activations(const Tensor& x) {
    auto q = quantize_activations(x);
    return detail::make_result(x.shape(), q.dequantize(), {x}, [xi = x.impl()](const TensorImpl& o) {
        float* g = xi->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

namespace {

// scale × codes with straight-through gradients to the latent weights and the
// plain product-rule gradient to the scale.
Tensor ternary_weight(const Tensor& latent, const Tensor& scale, const TernaryCodes& q) {
    const float s = scale.item();
    std::vector<float> w(q.codes.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * static_cast<float>(q.codes[i]);
    return detail::make_result(latent.shape(), std::move(w), {latent, scale},
                               [li = latent.impl(), si = scale.impl(), codes = q.codes, gamma = q.gamma](const TensorImpl& o) {
                                   if (li->requires_grad) {
                                       auto g = ste_backward(o.grad, li->data, gamma);
                                       float* lg = li->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) lg[i] += g[i];
                                   }
                                   if (si->requires_grad) {
                                       double acc = 0.0;
                                       for (std::size_t i = 0; i < codes.size(); ++i) acc += o.grad[i] * codes[i];
                                       si->ensure_grad()[0] += static_cast<float>(acc);
                                   }
                               });
}

}  // namespace

TernaryLinear::TernaryLinear(std::size_t in, std::size_t out, Rng& rng, float init_std) : in_(in), out_(out) {
    const float std_dev = init_std > 0.0f ? init_std : 1.0f / std::sqrt(static_cast<float>(in));
    std::vector<float> w(in * out);
    for (auto& v : w) v = static_cast<float>(normal01(rng)) * std_dev;
    latent_ = Tensor::from({out, in}, std::move(w), true);
    refresh_codes();
    scale_ = Tensor::scalar(gamma_, true);
}

void TernaryLinear::refresh_codes() {
    auto q = quantize_weights(latent_.data());
    codes_ = std::move(q.codes);
    gamma_ = q.gamma;
}

void TernaryLinear::finalize() {
    refresh_codes();
    training_ = false;
}

void TernaryLinear::set_training(bool training) {
    if (!training && training_) refresh_codes();
    training_ = training;
}

void TernaryLinear::set_codes(std::vector<std::int8_t> codes, float gamma) {
    if (codes.size() != in_ * out_) throw std::invalid_argument("set_codes: size mismatch");
    codes_ = std::move(codes);
    gamma_ = gamma;
}

void TernaryLinear::clamp_scale() {
    auto s = scale_.data();
    if (!(s[0] > 1e-6f)) s[0] = 1e-6f;
}

Tensor TernaryLinear::effective_weight() const {
    const float s = scale_.item();
    std::vector<float> w(codes_.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * static_cast<float>(codes_[i]);
    return Tensor::from({out_, in_}, std::move(w));
}

Tensor TernaryLinear::forward(const Tensor& x) {
    if (!quantized_) return linear(x, latent_);
    Tensor weight;
    if (training_) {
        auto q = quantize_weights(latent_.data());
        codes_ = q.codes;
        gamma_ = q.gamma;
        weight = ternary_weight(latent_, scale_, q);
    } else {
        weight = effective_weight();
    }
    const Tensor input = quantize_activations_ ? fake_quantize_activations(x) : x;
    return linear(input, weight);
}

std::vector<float> TernaryLinear::forward_int8(const Tensor& x) const {
    if (x.dim() != 2 || x.cols() != in_) {
        throw std::invalid_argument("forward_int8: expected [n x " + std::to_string(in_) + "], got " + shape_str(x.shape()));
    }
    const auto q = quantize_activations(x);
    const float s = scale_.item();
    std::vector<float> out(q.rows * out_);
    for (std::size_t r = 0; r < q.rows; ++r) {
        const std::int8_t* xr = q.codes.data() + r * in_;
        const float rescale = s / q.scales[r];
        for (std::size_t o = 0; o < out_; ++o) {
            const std::int8_t* wr = codes_.data() + o * in_;
            std::int32_t acc = 0;
            for (std::size_t k = 0; k < in_; ++k) acc += static_cast<std::int32_t>(xr[k]) * wr[k];
            out[r * out_ + o] = static_cast<float>(acc) * rescale;
        }
    }
    return out;
}

double quantization_effectiveness(std::span<const TernaryLinear* const> layers) {
    if (layers.empty()) throw std::domain_error("quantization_effectiveness: no quantized layers");
    std::size_t zeros = 0, total = 0;
    for (const auto* layer : layers) {
        for (auto c : layer->codes()) zeros += (c == 0);
        total += layer->codes().size();
    }
    if (total == 0) throw std::domain_error("quantization_effectiveness: layers hold no weights");
    return static_cast<double>(zeros) / static_cast<double>(total);
}

}  // namespace bitmar
