#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bitmar/rng.hpp"

namespace bitmar {

/// Malformed or truncated binary file; carries the byte offset of the problem.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const { return offset_; }

private:
    std::uint64_t offset_;
};

inline constexpr std::size_t kMaxTokens = 256;

/// Byte-level by default: ids 0..255 are raw bytes and the last id of the
/// vocabulary is the end token (also used as BOS and padding). With a vocab
/// file, line i is the string of token i and encoding is greedy longest match.
class Tokenizer {
public:
    explicit Tokenizer(std::uint32_t vocab_size = 257);
    static Tokenizer from_vocab_file(const std::filesystem::path& path, std::uint32_t vocab_size = 0);

    /// Truncates to max_len; empty text becomes a lone end token.
    std::vector<std::uint32_t> encode(std::string_view text, std::size_t max_len = kMaxTokens) const;
    /// End tokens are dropped.
    std::string decode(std::span<const std::uint32_t> ids) const;

    std::uint32_t vocab_size() const { return vocab_size_; }
    std::uint32_t end_token() const { return vocab_size_ - 1; }
    bool byte_level() const { return pieces_.empty(); }

private:
    std::uint32_t vocab_size_;
    std::vector<std::string> pieces_;
    std::unordered_map<std::string, std::uint32_t> lookup_;
    std::size_t longest_ = 0;
    std::optional<std::uint32_t> unknown_;
};

std::vector<std::uint32_t> tokenize(std::string_view text, const Tokenizer& tokenizer, std::size_t max_len = kMaxTokens);

// TokenFile: "BMTK", u32 version, u32 vocab_size, u64 count, then per record
// u32 length followed by that many u32 ids. Little-endian throughout.
inline constexpr std::uint32_t kTokenFileVersion = 1;
void write_token_file(const std::filesystem::path& path, std::uint32_t vocab_size,
                      const std::vector<std::vector<std::uint32_t>>& sequences);
struct TokenFileContents {
    std::uint32_t vocab_size = 0;
    std::vector<std::vector<std::uint32_t>> sequences;
};
TokenFileContents read_token_file(const std::filesystem::path& path);

// FeatureFile: "BMVF", u32 version, u64 n_items, u32 grid, u32 dim, then
// n_items·grid²·dim little-endian floats, row-major per item.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
inline constexpr std::uint64_t kFeatureHeaderBytes = 24;
void write_feature_file(const std::filesystem::path& path, std::size_t grid, std::size_t dim,
                        std::span<const float> features);

/// Random access reader; item i lives at a computed offset.
class FeatureFile {
public:
    explicit FeatureFile(const std::filesystem::path& path);
    std::uint64_t size() const { return n_items_; }
    std::size_t grid() const { return grid_; }
    std::size_t dim() const { return dim_; }
    std::uint64_t item_bytes() const { return static_cast<std::uint64_t>(grid_) * grid_ * dim_ * 4; }
    std::uint64_t offset_of(std::uint64_t item) const { return kFeatureHeaderBytes + item * item_bytes(); }
    std::vector<float> item(std::uint64_t index);

private:
    std::ifstream in_;
    std::uint64_t n_items_ = 0;
    std::size_t grid_ = 0;
    std::size_t dim_ = 0;
};

/// Captions with optional per-item feature grids (held in memory).
struct Dataset {
    std::vector<std::vector<std::uint32_t>> captions;
    std::vector<std::vector<float>> features;  // empty, or one grid per caption
    std::size_t grid = 0;
    std::size_t feature_dim = 768;

    std::size_t size() const { return captions.size(); }
    bool has_features() const { return !features.empty(); }
};

Dataset load_dataset(const std::filesystem::path& tokens, const std::filesystem::path& features);

/// Padded batch. Rows are padded with the end token; mask marks real tokens.
/// Text-only rows have an empty feature vector.
struct Batch {
    std::size_t size = 0;
    std::size_t length = 0;
    std::vector<std::uint32_t> ids;
    std::vector<std::uint8_t> mask;
    std::vector<std::vector<float>> features;
    std::size_t grid = 0;
    std::vector<std::size_t> items;

    std::size_t row_length(std::size_t row) const;
    std::span<const std::uint32_t> row(std::size_t r) const;
    bool multimodal(std::size_t row) const { return !features[row].empty(); }
};

Batch make_batch(const Dataset& dataset, std::span<const std::size_t> items, std::span<const std::uint8_t> multimodal,
                 std::uint32_t pad_token);

/// Walks the dataset in reshuffled epochs and flips a per-example modality
/// coin.
class BatchSampler {
public:
    BatchSampler() = default;
    BatchSampler(std::size_t dataset_size, std::uint64_t seed);

    std::vector<std::size_t> next_items(std::size_t count);
    Rng& rng() { return rng_; }
    std::size_t epoch() const { return epoch_; }

    /// Serialized sampler state (rng, order, cursor, epoch).
    std::string state() const;
    void set_state(const std::string& s);

private:
    void reshuffle();

    std::size_t n_ = 0;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

/// Draws `size` examples; each carries its features with probability
/// mix_ratio (items without features are always text-only).
Batch assemble_batch(const Dataset& dataset, std::size_t size, double mix_ratio, BatchSampler& sampler,
                     std::uint32_t pad_token);

/// Procedural captioning set: coloured shapes placed in one quadrant of a
/// feature grid, with template captions such as "a red circle at top left".
struct SyntheticSet {
    std::vector<std::string> captions;
    Dataset dataset;
};
SyntheticSet make_synthetic(std::size_t items, std::size_t grid, std::size_t dim, const Tokenizer& tokenizer,
                            std::uint64_t seed);

}  // namespace bitmar
