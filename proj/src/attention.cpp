#include "bitmar/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace bitmar {

void AttentionConfig::validate() const {
    if (heads == 0 || d_model % heads != 0) {
        throw std::invalid_argument("attention: d_model " + std::to_string(d_model) + " not divisible by " +
                                    std::to_string(heads) + " heads");
    }
    if (sinks + window == 0) throw std::invalid_argument("attention: cache capacity S+W must be positive");
}

AttentionPlan plan_streaming(const Segments& segments, std::size_t sinks, std::size_t window) {
    AttentionPlan plan;
    for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
        const std::size_t base = segments[s];
        const std::size_t len = segments[s + 1] - base;
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t n_sinks = std::min(sinks, i + 1);
            for (std::size_t j = 0; j < n_sinks; ++j) {
                plan.key_index.push_back(static_cast<std::uint32_t>(base + j));
                plan.key_pos.push_back(static_cast<std::int32_t>(j));
            }
            std::int32_t qpos = static_cast<std::int32_t>(i);
            if (i >= sinks) {
                const std::size_t start = std::max(sinks, i + 1 > window ? i + 1 - window : 0);
                for (std::size_t j = start; j <= i; ++j) {
                    plan.key_index.push_back(static_cast<std::uint32_t>(base + j));
                    plan.key_pos.push_back(static_cast<std::int32_t>(sinks + j - start));
                }
                qpos = static_cast<std::int32_t>(sinks + i - start);
            }
            plan.query_pos.push_back(qpos);
            plan.row_offsets.push_back(plan.key_index.size());
        }
    }
    return plan;
}

AttentionPlan plan_bidirectional(const Segments& segments, std::size_t max_pos) {
    if (max_pos == 0) throw std::invalid_argument("plan_bidirectional: max_pos must be positive");
    AttentionPlan plan;
    const auto clamp_pos = [max_pos](std::size_t p) { return static_cast<std::int32_t>(std::min(p, max_pos - 1)); };
    for (std::size_t s = 0; s + 1 < segments.size(); ++s) {
        const std::size_t base = segments[s];
        const std::size_t len = segments[s + 1] - base;
        for (std::size_t i = 0; i < len; ++i) {
            for (std::size_t j = 0; j < len; ++j) {
                plan.key_index.push_back(static_cast<std::uint32_t>(base + j));
                plan.key_pos.push_back(clamp_pos(j));
            }
            plan.query_pos.push_back(clamp_pos(i));
            plan.row_offsets.push_back(plan.key_index.size());
        }
    }
    return plan;
}

AttentionPlan plan_cross(const Segments& query_segments, const Segments& key_segments) {
    if (query_segments.size() != key_segments.size()) {
        throw std::invalid_argument("plan_cross: " + std::to_string(segment_count(query_segments)) +
                                    " query segments vs " + std::to_string(segment_count(key_segments)) + " key segments");
    }
    AttentionPlan plan;
    for (std::size_t s = 0; s + 1 < query_segments.size(); ++s) {
        for (std::size_t i = query_segments[s]; i < query_segments[s + 1]; ++i) {
            for (std::size_t j = key_segments[s]; j < key_segments[s + 1]; ++j) {
                plan.key_index.push_back(static_cast<std::uint32_t>(j));
                plan.key_pos.push_back(-1);
            }
            plan.query_pos.push_back(-1);
            plan.row_offsets.push_back(plan.key_index.size());
        }
    }
    return plan;
}

namespace {

// Writes row + pos_table[pos] (or just row) into dst.
inline void with_position(const float* row, const float* table, std::int32_t pos, std::size_t d, float* dst) {
    if (pos >= 0 && table) {
        const float* p = table + static_cast<std::size_t>(pos) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] = row[c] + p[c];
    } else {
        std::copy_n(row, d, dst);
    }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& pos_table, const AttentionPlan& plan,
                 std::size_t heads) {
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
        throw std::invalid_argument("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                    shape_str(v.shape()) + " are incompatible");
    }
    if (heads == 0 || d % heads != 0) throw std::invalid_argument("attention: width not divisible by heads");
    if (plan.queries() != q.rows() || plan.row_offsets.size() != q.rows() + 1) {
        throw std::invalid_argument("attention: plan covers " + std::to_string(plan.queries()) + " queries, got " +
                                    std::to_string(q.rows()));
    }
    const bool has_pos = pos_table.defined();
    std::size_t max_pos = 0;
    for (auto p : plan.query_pos) max_pos = std::max<std::size_t>(max_pos, p >= 0 ? p + 1 : 0);
    for (auto p : plan.key_pos) max_pos = std::max<std::size_t>(max_pos, p >= 0 ? p + 1 : 0);
    if (max_pos > 0 && (!has_pos || pos_table.cols() != d || pos_table.rows() < max_pos)) {
        throw std::invalid_argument("attention: positional table cannot cover slot " + std::to_string(max_pos - 1));
    }
    for (auto j : plan.key_index) {
        if (j >= k.rows()) throw std::out_of_range("attention: plan references key row " + std::to_string(j));
    }

    const std::size_t hd = d / heads;
    const float sm_scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const std::size_t nq = q.rows();
    const float* qd = q.data().data();
    const float* kd = k.data().data();
    const float* vd = v.data().data();
    const float* ed = has_pos ? pos_table.data().data() : nullptr;

    std::vector<float> out(nq * d, 0.0f);
    std::vector<float> probs(plan.key_index.size() * heads);
    std::vector<float> qe(d), ke(d);
    for (std::size_t i = 0; i < nq; ++i) {
        const std::size_t lo = plan.row_offsets[i], hi = plan.row_offsets[i + 1];
        if (lo == hi) continue;
        with_position(qd + i * d, ed, plan.query_pos[i], d, qe.data());
        for (std::size_t s = lo; s < hi; ++s) {
            with_position(kd + plan.key_index[s] * d, ed, plan.key_pos[s], d, ke.data());
            for (std::size_t h = 0; h < heads; ++h) {
                float dot = 0.0f;
                for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) dot += qe[c] * ke[c];
                probs[s * heads + h] = dot * sm_scale;
            }
        }
        for (std::size_t h = 0; h < heads; ++h) {
            float mx = -std::numeric_limits<float>::infinity();
            for (std::size_t s = lo; s < hi; ++s) mx = std::max(mx, probs[s * heads + h]);
            float total = 0.0f;
            for (std::size_t s = lo; s < hi; ++s) {
                const float e = std::exp(probs[s * heads + h] - mx);
                probs[s * heads + h] = e;
                total += e;
            }
            for (std::size_t s = lo; s < hi; ++s) probs[s * heads + h] /= total;
        }
        float* oi = out.data() + i * d;
        for (std::size_t s = lo; s < hi; ++s) {
            const float* vj = vd + plan.key_index[s] * d;
            for (std::size_t h = 0; h < heads; ++h) {
                const float p = probs[s * heads + h];
                for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) oi[c] += p * vj[c];
            }
        }
    }

    std::vector<Tensor> inputs{q, k, v};
    if (has_pos) inputs.push_back(pos_table);
    auto shared_plan = std::make_shared<const AttentionPlan>(plan);
    return detail::make_result(
        {nq, d}, std::move(out), inputs,
        [qi = q.impl(), ki = k.impl(), vi = v.impl(), ei = has_pos ? pos_table.impl() : nullptr, shared_plan,
         probs = std::move(probs), heads, hd, d, sm_scale](const TensorImpl& o) {
            const AttentionPlan& pl = *shared_plan;
            const float* ed = ei ? ei->data.data() : nullptr;
            float* gq = qi->requires_grad ? qi->ensure_grad() : nullptr;
            float* gk = ki->requires_grad ? ki->ensure_grad() : nullptr;
            float* gv = vi->requires_grad ? vi->ensure_grad() : nullptr;
            float* ge = (ei && ei->requires_grad) ? ei->ensure_grad() : nullptr;
            std::vector<float> qe(d), ke(d), dqe(d), dke(d), ds;
            for (std::size_t i = 0; i < pl.queries(); ++i) {
                const std::size_t lo = pl.row_offsets[i], hi = pl.row_offsets[i + 1];
                if (lo == hi) continue;
                const float* go = o.grad.data() + i * d;
                with_position(qi->data.data() + i * d, ed, pl.query_pos[i], d, qe.data());
                // ds = p * (dp - sum(p * dp)), per head
                ds.assign((hi - lo) * heads, 0.0f);
                for (std::size_t h = 0; h < heads; ++h) {
                    float pdp = 0.0f;
                    for (std::size_t s = lo; s < hi; ++s) {
                        const float* vj = vi->data.data() + pl.key_index[s] * d;
                        float dp = 0.0f;
                        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) dp += go[c] * vj[c];
                        ds[(s - lo) * heads + h] = dp;
                        pdp += probs[s * heads + h] * dp;
                    }
                    for (std::size_t s = lo; s < hi; ++s) {
                        float& x = ds[(s - lo) * heads + h];
                        x = probs[s * heads + h] * (x - pdp) * sm_scale;
                    }
                }
                std::fill(dqe.begin(), dqe.end(), 0.0f);
                for (std::size_t s = lo; s < hi; ++s) {
                    const std::size_t j = pl.key_index[s];
                    with_position(ki->data.data() + j * d, ed, pl.key_pos[s], d, ke.data());
                    for (std::size_t h = 0; h < heads; ++h) {
                        const float g = ds[(s - lo) * heads + h];
                        const float p = probs[s * heads + h];
                        for (std::size_t c = h * hd; c < (h + 1) * hd; ++c) {
                            dqe[c] += g * ke[c];
                            dke[c] = g * qe[c];
                            if (gv) gv[j * d + c] += p * go[c];
                        }
                    }
                    if (gk)
                        for (std::size_t c = 0; c < d; ++c) gk[j * d + c] += dke[c];
                    if (ge && pl.key_pos[s] >= 0) {
                        float* row = ge + static_cast<std::size_t>(pl.key_pos[s]) * d;
                        for (std::size_t c = 0; c < d; ++c) row[c] += dke[c];
                    }
                }
                if (gq)
                    for (std::size_t c = 0; c < d; ++c) gq[i * d + c] += dqe[c];
                if (ge && pl.query_pos[i] >= 0) {
                    float* row = ge + static_cast<std::size_t>(pl.query_pos[i]) * d;
                    for (std::size_t c = 0; c < d; ++c) row[c] += dqe[c];
                }
            }
        });
}

StreamingKVCache::StreamingKVCache(std::size_t sinks, std::size_t window, std::size_t width)
    : sinks_(sinks), window_(window), width_(width) {
    if (sinks + window == 0) throw std::invalid_argument("StreamingKVCache: capacity must be positive");
    keys_.assign((sinks + window) * width, 0.0f);
    values_.assign((sinks + window) * width, 0.0f);
    arrivals_.assign(sinks + window, 0);
}

std::size_t StreamingKVCache::row_of(std::size_t slot) const {
    if (slot >= size()) throw std::out_of_range("StreamingKVCache: slot " + std::to_string(slot) + " of " + std::to_string(size()));
    if (slot < sink_count_) return slot;
    return sinks_ + (window_head_ + (slot - sink_count_)) % window_;
}

bool StreamingKVCache::append(std::span<const float> key, std::span<const float> value, std::uint64_t arrival) {
    if (key.size() != width_ || value.size() != width_) {
        throw std::invalid_argument("StreamingKVCache: expected key/value width " + std::to_string(width_));
    }
    std::size_t row;
    bool evicted = false;
    if (sink_count_ < sinks_) {
        row = sink_count_++;
    } else if (window_ == 0) {
        return true;  // no window: every post-sink token is dropped immediately
    } else if (window_count_ < window_) {
        row = sinks_ + (window_head_ + window_count_) % window_;
        ++window_count_;
    } else {
        row = sinks_ + window_head_;
        window_head_ = (window_head_ + 1) % window_;
        evicted = true;
    }
    std::copy(key.begin(), key.end(), keys_.begin() + row * width_);
    std::copy(value.begin(), value.end(), values_.begin() + row * width_);
    arrivals_[row] = arrival;
    return evicted;
}

std::span<const float> StreamingKVCache::key(std::size_t slot) const {
    return {keys_.data() + row_of(slot) * width_, width_};
}

std::span<const float> StreamingKVCache::value(std::size_t slot) const {
    return {values_.data() + row_of(slot) * width_, width_};
}

std::uint64_t StreamingKVCache::arrival(std::size_t slot) const { return arrivals_[row_of(slot)]; }

std::vector<std::size_t> StreamingKVCache::positions() const {
    std::vector<std::size_t> p(size());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = i;
    return p;
}

std::vector<std::uint64_t> StreamingKVCache::arrivals() const {
    std::vector<std::uint64_t> a(size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = arrival(i);
    return a;
}

Tensor StreamingKVCache::keys() const {
    std::vector<float> out(size() * width_);
    for (std::size_t s = 0; s < size(); ++s) std::copy_n(keys_.data() + row_of(s) * width_, width_, out.data() + s * width_);
    return Tensor::from({size(), width_}, std::move(out));
}

Tensor StreamingKVCache::values() const {
    std::vector<float> out(size() * width_);
    for (std::size_t s = 0; s < size(); ++s)
        std::copy_n(values_.data() + row_of(s) * width_, width_, out.data() + s * width_);
    return Tensor::from({size(), width_}, std::move(out));
}

void StreamingKVCache::clear() {
    sink_count_ = 0;
    window_count_ = 0;
    window_head_ = 0;
}

Tensor streaming_attend(const Tensor& query, const StreamingKVCache& cache, const AttentionConfig& config,
                        const Tensor& pos_table) {
    if (cache.empty()) throw std::domain_error("streaming_attend: cache is empty");
    if (query.dim() != 2 || query.rows() != 1 || query.cols() != config.d_model) {
        throw std::invalid_argument("streaming_attend: expected query [1x" + std::to_string(config.d_model) + "], got " +
                                    shape_str(query.shape()));
    }
    const std::size_t n = cache.size();
    AttentionPlan plan;
    const bool positional = pos_table.defined();
    for (std::size_t s = 0; s < n; ++s) {
        plan.key_index.push_back(static_cast<std::uint32_t>(s));
        plan.key_pos.push_back(positional ? static_cast<std::int32_t>(s) : -1);
    }
    plan.query_pos.push_back(positional ? static_cast<std::int32_t>(n - 1) : -1);
    plan.row_offsets.push_back(n);
    return attention(query, cache.keys(), cache.values(), pos_table, plan, config.heads);
}

Tensor full_causal_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& config,
                          const Tensor& pos_table) {
    config.validate();
    if (q.rows() != k.rows() || k.rows() != v.rows()) {
        throw std::invalid_argument("full_causal_attend: sequence lengths differ, q " + shape_str(q.shape()) + ", k " +
                                    shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const Segments seg{0, q.rows()};
    AttentionPlan plan = config.causal ? plan_streaming(seg, config.sinks, config.window)
                                       : plan_bidirectional(seg, config.capacity());
    if (!pos_table.defined()) {
        std::fill(plan.query_pos.begin(), plan.query_pos.end(), -1);
        std::fill(plan.key_pos.begin(), plan.key_pos.end(), -1);
    }
    return attention(q, k, v, pos_table, plan, config.heads);
}

}  // namespace bitmar
