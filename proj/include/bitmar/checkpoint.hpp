#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bitmar/config.hpp"
#include "bitmar/model.hpp"

namespace bitmar {

class Trainer;

// Checkpoint: "BMCK", u32 version, u64 config digest, u32 n_entries, then per
// entry u32 name_len, name bytes, u8 dtype (0 f32, 1 i8), u32 ndim, u64 dims,
// u64 byte_len, raw little-endian bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, i8 = 1 };

struct CheckpointEntry {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    std::vector<char> bytes;

    std::vector<float> floats() const;
    std::string text() const;
};

struct CheckpointFile {
    std::uint64_t digest = 0;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry& at(const std::string& name) const;
    const CheckpointEntry* find(const std::string& name) const;
    void add_floats(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values);
    void add_text(const std::string& name, const std::string& text);
    void add_codes(const std::string& name, std::uint64_t rows, std::uint64_t cols, std::span<const std::int8_t> codes);
};

/// Writes to a sibling temporary file and renames it into place.
void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

/// Model parameters, quantizer codes, memory state and, with a trainer,
/// optimizer moments, counters and RNG streams.
CheckpointFile snapshot(BitMarModel& model, const RunConfig& config, Trainer* trainer);
void save_checkpoint(const std::filesystem::path& path, BitMarModel& model, const RunConfig& config,
                     Trainer* trainer = nullptr);

struct LoadedCheckpoint {
    RunConfig config;
    CheckpointFile file;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies every model tensor from the checkpoint. Shape mismatches throw.
void restore_model(BitMarModel& model, const CheckpointFile& file);
void restore_trainer(Trainer& trainer, const CheckpointFile& file);

/// Builds a model from the embedded config. When `expected` is given, a
/// different vocabulary size is rejected and any other difference warns.
std::unique_ptr<BitMarModel> model_from_checkpoint(const LoadedCheckpoint& ckpt,
                                                   const std::optional<RunConfig>& expected = std::nullopt);

}  // namespace bitmar
