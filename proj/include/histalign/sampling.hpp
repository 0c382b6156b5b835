#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "histalign/model.hpp"

namespace histalign::lm {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(Rng& rng);

/// Samples from the smallest probability-descending prefix whose cumulative
/// mass reaches p, renormalized. Ties in probability order by ascending id.
TokenId nucleus_sample(std::span<const double> probs, double p, Rng& rng);

struct GenerateOptions {
    double top_p = 0.95;
    std::size_t max_tokens = 64;
    bool use_cache = true;  // draw from the cache-augmented distribution
    std::uint64_t seed = 0;
};

/// Autoregressive continuation of `prompt`. Once the sequence fills the
/// context window only the most recent context_length tokens are fed.
std::vector<TokenId> generate(const MiniLM& model, std::span<const TokenId> prompt, const GenerateOptions& options);

}  // namespace histalign::lm
