#include "bitmar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace bitmar {

using detail::make_result;

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.dim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor, got " + shape_str(a.shape()));
}

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
    if (a.dim() != 2) return false;
    const auto& bs = b.shape();
    const bool row_shape = (bs.size() == 1) || (bs.size() == 2 && bs[0] == 1);
    return row_shape && b.numel() == a.cols();
}

void check_segments(const Segments& segments, std::size_t rows, const char* op) {
    if (segments.empty() || segments.front() != 0 || segments.back() != rows ||
        !std::is_sorted(segments.begin(), segments.end())) {
        throw std::invalid_argument(std::string(op) + ": segments do not partition " + std::to_string(rows) + " rows");
    }
}

}  // namespace

std::size_t segment_count(const Segments& segments) { return segments.empty() ? 0 : segments.size() - 1; }

Segments segments_from_lengths(std::span<const std::size_t> lengths) {
    Segments s{0};
    for (auto n : lengths) s.push_back(s.back() + n);
    return s;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (is_row_broadcast(a, b) && a.shape() != b.shape()) {
        const std::size_t n = a.rows(), d = a.cols();
        std::vector<float> out(a.data().begin(), a.data().end());
        const float* bv = b.data().data();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
        return make_result(a.shape(), std::move(out), {a, b}, [ai = a.impl(), bi = b.impl(), n, d](const TensorImpl& o) {
            if (ai->requires_grad) {
                float* g = ai->ensure_grad();
                for (std::size_t i = 0; i < n * d; ++i) g[i] += o.grad[i];
            }
            if (bi->requires_grad) {
                float* g = bi->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[i * d + j];
            }
        });
    }
    require_same_shape(a, b, "add");
    std::vector<float> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
        for (const auto& in : {ai, bi}) {
            if (!in->requires_grad) continue;
            float* g = in->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<float> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
        if (ai->requires_grad) {
            float* g = ai->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        }
        if (bi->requires_grad) {
            float* g = bi->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<float> out(a.numel());
    auto av = a.data();
    auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [ai = a.impl(), bi = b.impl()](const TensorImpl& o) {
        if (ai->requires_grad) {
            float* g = ai->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bi->data[i];
        }
        if (bi->requires_grad) {
            float* g = bi->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ai->data[i];
        }
    });
}

Tensor scale(const Tensor& a, float s) {
    std::vector<float> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [ai = a.impl(), s](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * s;
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                                    shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<float> out(m * n, 0.0f);
    kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
    return make_result({m, n}, std::move(out), {a, b}, [ai = a.impl(), bi = b.impl(), m, k, n](const TensorImpl& o) {
        if (ai->requires_grad) {
            std::vector<float> bt(n * k);
            kernels::transpose(k, n, bi->data.data(), bt.data());
            kernels::gemm_nn(m, n, k, o.grad.data(), bt.data(), ai->ensure_grad());
        }
        if (bi->requires_grad) kernels::gemm_tn(k, m, n, ai->data.data(), o.grad.data(), bi->ensure_grad());
    });
}

Tensor linear(const Tensor& x, const Tensor& w) {
    require_2d(x, "linear");
    require_2d(w, "linear");
    if (x.cols() != w.cols()) {
        throw std::invalid_argument("linear: input width " + shape_str(x.shape()) + " does not match weight " +
                                    shape_str(w.shape()));
    }
    const std::size_t n = x.rows(), in = x.cols(), out_dim = w.rows();
    std::vector<float> wt(in * out_dim);
    kernels::transpose(out_dim, in, w.data().data(), wt.data());
    std::vector<float> out(n * out_dim, 0.0f);
    kernels::gemm_nn(n, in, out_dim, x.data().data(), wt.data(), out.data());
    return make_result({n, out_dim}, std::move(out), {x, w},
                       [xi = x.impl(), wi = w.impl(), n, in, out_dim](const TensorImpl& o) {
                           if (xi->requires_grad)
                               kernels::gemm_nn(n, out_dim, in, o.grad.data(), wi->data.data(), xi->ensure_grad());
                           if (wi->requires_grad)
                               kernels::gemm_tn(out_dim, n, in, o.grad.data(), xi->data.data(), wi->ensure_grad());
                       });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<float> out(m * n);
    kernels::transpose(m, n, a.data().data(), out.data());
    return make_result({n, m}, std::move(out), {a}, [ai = a.impl(), m, n](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_result(std::move(shape), a.to_vector(), {a}, [ai = a.impl()](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor relu(const Tensor& a) {
    std::vector<float> out(a.data().begin(), a.data().end());
    for (auto& v : out) v = v > 0.0f ? v : 0.0f;
    return make_result(a.shape(), std::move(out), {a}, [ai = a.impl()](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (ai->data[i] > 0.0f) g[i] += o.grad[i];
    });
}

Tensor gelu(const Tensor& a) {
    constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kA = 0.044715f;
    auto av = a.data();
    std::vector<float> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const float x = av[i];
        out[i] = 0.5f * x * (1.0f + std::tanh(kC * (x + kA * x * x * x)));
    }
    return make_result(a.shape(), std::move(out), {a}, [ai = a.impl()](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const float x = ai->data[i];
            const float t = std::tanh(kC * (x + kA * x * x * x));
            const float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kC * (1.0f + 3.0f * kA * x * x);
            g[i] += o.grad[i] * d;
        }
    });
}

Tensor dropout(const Tensor& a, float p, Rng& rng, bool training) {
    if (!training || p <= 0.0f) return a;
    if (p >= 1.0f) throw std::domain_error("dropout: rate must be < 1");
    const float keep_scale = 1.0f / (1.0f - p);
    std::vector<float> mask(a.numel());
    for (auto& m : mask) m = uniform01(rng) < p ? 0.0f : keep_scale;
    std::vector<float> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return make_result(a.shape(), std::move(out), {a}, [ai = a.impl(), mask = std::move(mask)](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * mask[i];
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    const auto& shape = x.shape();
    if (axis >= shape.size()) throw std::out_of_range("softmax: axis out of range for " + shape_str(shape));
    const std::size_t len = shape[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    auto xv = x.data();
    std::vector<float> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
            float total = 0.0f;
            for (std::size_t l = 0; l < len; ++l) {
                const float e = std::exp(xv[base + l * inner] - mx);
                out[base + l * inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
        }
    }
    return make_result(shape, std::move(out), {x}, [xi = x.impl(), outer, len, inner](const TensorImpl& o) {
        float* g = xi->ensure_grad();
        for (std::size_t ou = 0; ou < outer; ++ou) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = ou * len * inner + in;
                float dot = 0.0f;
                for (std::size_t l = 0; l < len; ++l) dot += o.data[base + l * inner] * o.grad[base + l * inner];
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t idx = base + l * inner;
                    g[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d) {
        throw std::invalid_argument("layernorm: affine parameters must have " + std::to_string(d) + " elements");
    }
    const std::size_t rows = d ? x.numel() / d : 0;
    auto xv = x.data();
    auto gv = gain.data();
    auto bv = bias.data();
    std::vector<float> out(xv.size());
    std::vector<float> xhat(xv.size());
    std::vector<float> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = xv.data() + r * d;
        float mu = 0.0f;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<float>(d);
        float var = 0.0f;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<float>(d);
        const float rs = (var + eps) > 0.0f ? 1.0f / std::sqrt(var + eps) : 0.0f;
        rstd[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const float h = (row[j] - mu) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gv[j] + bv[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias},
                       [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), xhat = std::move(xhat),
                        rstd = std::move(rstd), rows, d](const TensorImpl& o) {
                           if (gi->requires_grad) {
                               float* g = gi->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j] * xhat[r * d + j];
                           }
                           if (bi->requires_grad) {
                               float* g = bi->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
                           }
                           if (xi->requires_grad) {
                               float* g = xi->ensure_grad();
                               std::vector<float> dh(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   float mean_dh = 0.0f, mean_dh_h = 0.0f;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dh[j] = o.grad[r * d + j] * gi->data[j];
                                       mean_dh += dh[j];
                                       mean_dh_h += dh[j] * xhat[r * d + j];
                                   }
                                   mean_dh /= static_cast<float>(d);
                                   mean_dh_h /= static_cast<float>(d);
                                   for (std::size_t j = 0; j < d; ++j)
                                       g[r * d + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                               }
                           }
                       });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (float v : a.data()) total += v;
    return make_result({1}, {static_cast<float>(total)}, {a}, [ai = a.impl()](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += o.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::domain_error("mean of empty tensor");
    return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor sum_squares(const Tensor& a) {
    double total = 0.0;
    for (float v : a.data()) total += static_cast<double>(v) * v;
    return make_result({1}, {static_cast<float>(total)}, {a}, [ai = a.impl()](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += 2.0f * ai->data[i] * o.grad[0];
    });
}

Tensor weighted_cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets,
                              std::span<const float> weights) {
    require_2d(logits, "cross_entropy");
    const std::size_t rows = logits.rows(), vocab = logits.cols();
    if (targets.size() != rows || weights.size() != rows) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                    std::to_string(rows) + " rows");
    }
    for (auto t : targets) {
        if (t >= vocab) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
    }
    auto lv = logits.data();
    std::vector<float> probs(lv.size(), 0.0f);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (weights[r] == 0.0f) continue;
        const float* row = lv.data() + r * vocab;
        const float mx = *std::max_element(row, row + vocab);
        float z = 0.0f;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        const float lse = mx + std::log(z);
        total += static_cast<double>(weights[r]) * (lse - row[targets[r]]);
        for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - lse);
    }
    std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
    std::vector<float> w(weights.begin(), weights.end());
    return make_result({1}, {static_cast<float>(total)}, {logits},
                       [li = logits.impl(), probs = std::move(probs), tgt = std::move(tgt), w = std::move(w), rows,
                        vocab](const TensorImpl& o) {
                           float* g = li->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                               if (w[r] == 0.0f) continue;
                               const float s = o.grad[0] * w[r];
                               for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += s * probs[r * vocab + j];
                               g[r * vocab + tgt[r]] -= s;
                           }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint32_t> targets) {
    require_2d(logits, "cross_entropy");
    if (logits.rows() == 0) throw std::domain_error("cross_entropy: no rows");
    std::vector<float> w(logits.rows(), 1.0f / static_cast<float>(logits.rows()));
    return weighted_cross_entropy(logits, targets, w);
}

Tensor embedding(const Tensor& table, std::span<const std::uint32_t> ids) {
    require_2d(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    auto tv = table.data();
    std::vector<float> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= vocab) {
            throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                                    std::to_string(vocab));
        }
        std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<std::uint32_t> idv(ids.begin(), ids.end());
    return make_result({ids.size(), d}, std::move(out), {table}, [ti = table.impl(), idv = std::move(idv), d](const TensorImpl& o) {
        float* g = ti->ensure_grad();
        for (std::size_t i = 0; i < idv.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[idv[i] * d + j] += o.grad[i * d + j];
    });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_cols");
    require_2d(b, "concat_cols");
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("concat_cols: row counts differ, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
    const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
    std::vector<float> out(n * (da + db));
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().data() + i * da, da, out.data() + i * (da + db));
        std::copy_n(b.data().data() + i * db, db, out.data() + i * (da + db) + da);
    }
    return make_result({n, da + db}, std::move(out), {a, b}, [ai = a.impl(), bi = b.impl(), n, da, db](const TensorImpl& o) {
        if (ai->requires_grad) {
            float* g = ai->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < da; ++j) g[i * da + j] += o.grad[i * (da + db) + j];
        }
        if (bi->requires_grad) {
            float* g = bi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < db; ++j) g[i * db + j] += o.grad[i * (da + db) + da + j];
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t d = parts.front().cols();
    std::vector<float> out;
    std::vector<std::size_t> offsets{0};
    for (const auto& p : parts) {
        if (p.cols() != d) throw std::invalid_argument("concat_rows: column counts differ");
        out.insert(out.end(), p.data().begin(), p.data().end());
        offsets.push_back(out.size());
    }
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    const std::size_t rows = out.size() / std::max<std::size_t>(d, 1);
    return make_result({rows, d}, std::move(out), parts,
                       [impls = std::move(impls), offsets = std::move(offsets)](const TensorImpl& o) {
                           for (std::size_t k = 0; k < impls.size(); ++k) {
                               if (!impls[k]->requires_grad) continue;
                               float* g = impls[k]->ensure_grad();
                               for (std::size_t i = offsets[k]; i < offsets[k + 1]; ++i) g[i - offsets[k]] += o.grad[i];
                           }
                       });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    require_2d(a, "slice_rows");
    if (begin > end || end > a.rows()) throw std::out_of_range("slice_rows: range outside " + shape_str(a.shape()));
    const std::size_t d = a.cols();
    std::vector<float> out(a.data().begin() + begin * d, a.data().begin() + end * d);
    return make_result({end - begin, d}, std::move(out), {a}, [ai = a.impl(), begin, d](const TensorImpl& o) {
        float* g = ai->ensure_grad() + begin * d;
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
    require_2d(a, "gather_rows");
    const std::size_t d = a.cols();
    std::vector<float> out(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.rows()) throw std::out_of_range("gather_rows: row index outside " + shape_str(a.shape()));
        std::copy_n(a.data().data() + rows[i] * d, d, out.data() + i * d);
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result({rows.size(), d}, std::move(out), {a}, [ai = a.impl(), idx = std::move(idx), d](const TensorImpl& o) {
        float* g = ai->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += o.grad[i * d + j];
    });
}

Tensor segment_mean(const Tensor& x, const Segments& segments) {
    require_2d(x, "segment_mean");
    check_segments(segments, x.rows(), "segment_mean");
    const std::size_t n = segment_count(segments), d = x.cols();
    auto xv = x.data();
    std::vector<float> out(n * d, 0.0f);
    for (std::size_t s = 0; s < n; ++s) {
        const std::size_t len = segments[s + 1] - segments[s];
        if (len == 0) continue;
        for (std::size_t r = segments[s]; r < segments[s + 1]; ++r)
            for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xv[r * d + j];
        for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= static_cast<float>(len);
    }
    return make_result({n, d}, std::move(out), {x}, [xi = x.impl(), segments, n, d](const TensorImpl& o) {
        float* g = xi->ensure_grad();
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t len = segments[s + 1] - segments[s];
            if (len == 0) continue;
            const float inv = 1.0f / static_cast<float>(len);
            for (std::size_t r = segments[s]; r < segments[s + 1]; ++r)
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += o.grad[s * d + j] * inv;
        }
    });
}

Tensor segment_expand(const Tensor& x, const Segments& segments) {
    require_2d(x, "segment_expand");
    const std::size_t n = segment_count(segments), d = x.cols();
    if (x.rows() != n) {
        throw std::invalid_argument("segment_expand: " + std::to_string(x.rows()) + " rows for " + std::to_string(n) +
                                    " segments");
    }
    const std::size_t total = segments.back();
    auto xv = x.data();
    std::vector<float> out(total * d);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t r = segments[s]; r < segments[s + 1]; ++r) std::copy_n(xv.data() + s * d, d, out.data() + r * d);
    return make_result({total, d}, std::move(out), {x}, [xi = x.impl(), segments, n, d](const TensorImpl& o) {
        float* g = xi->ensure_grad();
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t r = segments[s]; r < segments[s + 1]; ++r)
                for (std::size_t j = 0; j < d; ++j) g[s * d + j] += o.grad[r * d + j];
    });
}

Tensor l2_normalize_rows(const Tensor& x, float eps) {
    require_2d(x, "l2_normalize_rows");
    const std::size_t n = x.rows(), d = x.cols();
    auto xv = x.data();
    std::vector<float> out(n * d);
    std::vector<float> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        float ss = 0.0f;
        for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
        norms[i] = std::max(std::sqrt(ss), eps);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norms[i];
    }
    return make_result({n, d}, std::move(out), {x}, [xi = x.impl(), norms = std::move(norms), n, d, eps](const TensorImpl& o) {
        float* g = xi->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const float* y = o.data.data() + i * d;
            const float* gy = o.grad.data() + i * d;
            if (norms[i] <= eps) {
                for (std::size_t j = 0; j < d; ++j) g[i * d + j] += gy[j] / eps;
                continue;
            }
            float dot = 0.0f;
            for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
            for (std::size_t j = 0; j < d; ++j) g[i * d + j] += (gy[j] - y[j] * dot) / norms[i];
        }
    });
}

}  // namespace bitmar
