#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "bitmar/config.hpp"
#include "bitmar/dataio.hpp"
#include "bitmar/model.hpp"

namespace bitmar {

/// Usage/config problems; mapped to exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

Tokenizer make_tokenizer(const RunConfig& config);

/// The synthetic set or the token/feature files named in [data].
Dataset load_training_data(const RunConfig& config, const Tokenizer& tokenizer);

struct BenchRun {
    double tokens_per_second = 0.0;
    double latency_ms = 0.0;
};

struct BenchSetting {
    bool memory = true;
    std::vector<BenchRun> runs;
    double mean_tokens_per_second() const;
    double mean_latency_ms() const;
    /// Coefficient of variation of the per-token latency across runs.
    double latency_variation() const;
};

struct BenchReport {
    BenchSetting memory_on;
    BenchSetting memory_off;
    std::size_t kv_cache_bytes = 0;
    int length = 0;
    double ratio() const;  // tokens/s with memory on over tokens/s with memory off
};

/// Streams `length` greedy tokens per run under both memory settings.
BenchReport run_bench(BitMarModel& model, int length, int runs);

/// Entry point behind the bitmar executable. Exit codes: 0 ok, 1 runtime
/// error, 2 usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bitmar
