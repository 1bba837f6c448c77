#pragma once

#include <span>
#include <string>

#include "bitmar/layers.hpp"

namespace bitmar {

enum class Pooling { mean, learned };

/// Text-queries-vision cross-attention with a post-LN residual, followed by
/// pooling of the fused sequence into the memory query.
class FusionBlock {
public:
    FusionBlock() = default;
    FusionBlock(std::size_t d_model, std::size_t heads, Pooling pooling, float ln_eps, Rng& rng);

    /// F = LN(Z + crossattn(Z -> V)), packed. A sequence whose vision segment
    /// is empty reduces to LN(Z).
    Tensor fuse(const Tensor& z, const Segments& z_segments, const Tensor& vision, const Segments& vision_segments);
    Tensor fuse(const Tensor& z, const Tensor& vision);

    /// q_mem per segment, [segments×d].
    Tensor pool_query(const Tensor& fused, const Segments& segments) const;
    Tensor pool_query(const Tensor& fused) const;

    Pooling pooling() const { return pooling_; }
    Tensor& probe() { return probe_; }
    void visit(Registry& r, const std::string& prefix);

private:
    Pooling pooling_ = Pooling::mean;
    CrossAttention cross_;
    LayerNorm ln_;
    Tensor probe_;  // learned pooling query [1×d]
};

/// Cosine similarity of two vectors, clamped to [-1, 1]; 0 if either is zero.
float cosine_similarity(std::span<const float> a, std::span<const float> b);

}  // namespace bitmar
