#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "histalign/model.hpp"
#include "histalign/numerics.hpp"

namespace histalign::cache {

enum class Origin : std::uint8_t { DecoderHistory = 0, SourceSide = 1 };

/// A context vector paired with the token it was used to predict.
struct CacheEntry {
    Vector hidden;
    TokenId target_token = 0;
    std::uint32_t position = 0;  // 1-based index of `hidden` in its source sequence
    Origin origin = Origin::DecoderHistory;
};

struct LocalMemory {
    std::vector<CacheEntry> entries;

    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

/// Memory available when predicting the token at 1-based position `t`:
/// hidden row i paired with tokens[i+1] for 1 ≤ i ≤ t−2 (0-based rows 0..t−3).
/// t ranges over 1..len(tokens)+1; the predicted token itself is never read.
LocalMemory build_local_cache(const lm::ForwardOutput& forward, std::span<const TokenId> tokens, std::size_t t);

/// Source-side memory: state i paired with source token i.
LocalMemory build_source_cache(const Matrix& source_hiddens, std::span<const TokenId> source_tokens);

/// (h1 · h2) / sqrt(d)
double scaled_dot(std::span<const double> h1, std::span<const double> h2, std::size_t d);

/// log P_clm(w) for every w: softmax over token logits plus cache similarity mass,
/// evaluated with one shared shift over the union of logits and similarities.
std::vector<double> combined_log_distribution(std::span<const double> token_logits, std::span<const double> h_t,
                                              const LocalMemory& memory);

std::vector<double> combined_next_token_distribution(std::span<const double> token_logits,
                                                     std::span<const double> h_t, const LocalMemory& memory);

/// Probability from cache similarities alone; tokens absent from memory get 0.
std::vector<double> cache_only_distribution(std::span<const double> h_t, const LocalMemory& memory,
                                            std::size_t vocab_size);

struct CombinedLogProbGrad {
    Vector d_logits;   // V
    Vector d_query;    // d
    Matrix d_entries;  // |memory| × d
};

/// log P_clm(target) and, when `grad` is set, its gradient with respect to the
/// token logits, the query state and every entry's hidden state.
double combined_log_prob(std::span<const double> token_logits, std::span<const double> h_t,
                         const LocalMemory& memory, TokenId target, CombinedLogProbGrad* grad = nullptr);

// Memory dump: "HMEM", u32 version, u32 d, u32 count, then per entry
// (u32 position, u32 target_token, u8 origin, d × f64).
inline constexpr std::uint32_t kMemoryDumpVersion = 1;

void write_memory(std::ostream& out, const LocalMemory& memory, std::uint32_t hidden_size);
LocalMemory read_memory(std::istream& in);
void save_memory(const std::filesystem::path& path, const LocalMemory& memory, std::uint32_t hidden_size);
LocalMemory load_memory(const std::filesystem::path& path);

}  // namespace histalign::cache
