#pragma once

// Multi-head attention with attention-sink + sliding-window KV caching.
//
// Positions are learned absolute embeddings indexed by *clamped* cache slot:
// sinks occupy slots 0..S-1 and the window occupies S..S+|window|-1. The
// embedding of a slot is added to queries and keys at attention time, so a
// cached key is re-positioned as the window slides.

#include <cstdint>
#include <span>
#include <vector>

#include "bitmar/ops.hpp"
#include "bitmar/tensor.hpp"

namespace bitmar {

struct AttentionConfig {
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t sinks = 4;
    std::size_t window = 1020;
    bool causal = true;

    std::size_t head_dim() const { return d_model / heads; }
    /// Number of positional slots, S + W.
    std::size_t capacity() const { return sinks + window; }
    void validate() const;
};

/// Sparse attention pattern: for every query row, the key rows it may attend
/// to and the positional slot of each. Position -1 means no positional term.
struct AttentionPlan {
    std::vector<std::int32_t> query_pos;
    std::vector<std::size_t> row_offsets{0};
    std::vector<std::uint32_t> key_index;
    std::vector<std::int32_t> key_pos;

    std::size_t queries() const { return query_pos.size(); }
};

/// Causal sink+window pattern over packed self-attention sequences. Query i of
/// a sequence sees exactly the entries a streaming cache holds after its own
/// arrival, at the same clamped positions.
AttentionPlan plan_streaming(const Segments& segments, std::size_t sinks, std::size_t window);
/// Every query sees every key of its sequence; positions clamp at max_pos-1.
AttentionPlan plan_bidirectional(const Segments& segments, std::size_t max_pos);
/// Query segment i attends to all of key segment i, no positional terms.
AttentionPlan plan_cross(const Segments& query_segments, const Segments& key_segments);

/// Scaled dot-product attention following `plan`. `pos_table` [P×d] may be
/// undefined when the plan carries no positions. Queries with no keys yield
/// zero rows.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& pos_table, const AttentionPlan& plan,
                 std::size_t heads);

class StreamingKVCache {
public:
    StreamingKVCache() = default;
    StreamingKVCache(std::size_t sinks, std::size_t window, std::size_t width);

    /// Stores one token. The first S arrivals become sinks; afterwards the
    /// window fills and then evicts its oldest entry. Returns true on eviction.
    bool append(std::span<const float> key, std::span<const float> value, std::uint64_t arrival);

    std::size_t size() const { return sink_count_ + window_count_; }
    std::size_t sink_count() const { return sink_count_; }
    std::size_t window_count() const { return window_count_; }
    std::size_t sinks() const { return sinks_; }
    std::size_t window() const { return window_; }
    std::size_t width() const { return width_; }
    bool empty() const { return size() == 0; }

    /// Slot order is sinks first, then window entries oldest to newest.
    std::span<const float> key(std::size_t slot) const;
    std::span<const float> value(std::size_t slot) const;
    std::uint64_t arrival(std::size_t slot) const;
    /// Clamped positions of the current slots; always 0..size()-1.
    std::vector<std::size_t> positions() const;
    std::vector<std::uint64_t> arrivals() const;

    /// Keys and values as dense [size×width] tensors in slot order.
    Tensor keys() const;
    Tensor values() const;

    /// Bytes reserved for key/value payloads at full capacity.
    std::size_t capacity_bytes() const { return 2 * (sinks_ + window_) * width_ * sizeof(float); }

    void clear();

private:
    std::size_t row_of(std::size_t slot) const;

    std::size_t sinks_ = 0;
    std::size_t window_ = 0;
    std::size_t width_ = 0;
    std::size_t sink_count_ = 0;
    std::size_t window_count_ = 0;
    std::size_t window_head_ = 0;  // ring index of the oldest window entry
    std::vector<float> keys_;
    std::vector<float> values_;
    std::vector<std::uint64_t> arrivals_;
};

/// Attention of one query [1×d] over the cache contents. The query sits at
/// the newest slot's position.
Tensor streaming_attend(const Tensor& query, const StreamingKVCache& cache, const AttentionConfig& config,
                        const Tensor& pos_table = {});

/// Batch path over one sequence q,k,v [T×d]. With config.causal the pattern
/// is the sink+window mask, which for T <= S+W is plain causal attention.
Tensor full_causal_attend(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& config,
                          const Tensor& pos_table = {});

}  // namespace bitmar
