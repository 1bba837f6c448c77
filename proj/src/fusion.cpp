#include "bitmar/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

#include "bitmar/ops.hpp"

namespace bitmar {

FusionBlock::FusionBlock(std::size_t d_model, std::size_t heads, Pooling pooling, float ln_eps, Rng& rng)
    : pooling_(pooling), cross_(d_model, heads, rng), ln_(d_model, ln_eps), probe_(Tensor::zeros({1, d_model}, true)) {}

Tensor FusionBlock::fuse(const Tensor& z, const Segments& z_segments, const Tensor& vision,
                         const Segments& vision_segments) {
    for (std::size_t s = 0; s + 1 < vision_segments.size(); ++s) {
        if (vision_segments[s] == vision_segments[s + 1]) {
            static bool warned = false;
            if (!warned) {
                std::cerr << "warning: fusion received a sequence without vision tokens; using the text-only path\n";
                warned = true;
            }
            break;
        }
    }
    if (!vision.defined() || vision.rows() == 0) return ln_.forward(z);
    return ln_.forward(add(z, cross_.forward(z, z_segments, vision, vision_segments)));
}

Tensor FusionBlock::fuse(const Tensor& z, const Tensor& vision) {
    if (z.rows() == 0) throw std::domain_error("fuse: empty text sequence");
    const std::size_t n_v = vision.defined() ? vision.rows() : 0;
    return fuse(z, Segments{0, z.rows()}, vision, Segments{0, n_v});
}

Tensor FusionBlock::pool_query(const Tensor& fused, const Segments& segments) const {
    if (pooling_ == Pooling::mean) return segment_mean(fused, segments);
    // Attention pooling: softmax(F·probe) weights per segment.
    const std::size_t d = fused.cols();
    Tensor scores = linear(fused, probe_);  // [n×1]
    std::vector<Tensor> pooled;
    for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
        const std::size_t lo = segments[s], hi = segments[s + 1];
        if (lo == hi) {
            pooled.push_back(Tensor::zeros({1, d}));
            continue;
        }
        Tensor w = reshape(softmax(slice_rows(scores, lo, hi), 0), {1, hi - lo});
        pooled.push_back(matmul(w, slice_rows(fused, lo, hi)));
    }
    return concat_rows(pooled);
}

Tensor FusionBlock::pool_query(const Tensor& fused) const {
    if (fused.rows() == 0) throw std::domain_error("pool_query: empty fused sequence");
    return pool_query(fused, Segments{0, fused.rows()});
}

void FusionBlock::visit(Registry& r, const std::string& prefix) {
    cross_.visit(r, prefix + ".cross");
    ln_.visit(r, prefix + ".ln");
    if (pooling_ == Pooling::learned) r.add(prefix + ".probe", probe_, false);
}

float cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0f;
    return static_cast<float>(std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0));
}

}  // namespace bitmar
