#pragma once

#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "histalign/ambigen.hpp"
#include "histalign/model.hpp"
#include "histalign/numerics.hpp"

namespace histalign::eval {

enum class EvalMode { Full, CacheOnly };
std::string_view to_string(EvalMode mode);
EvalMode parse_mode(std::string_view name);

struct EvalReport {
    EvalMode mode = EvalMode::Full;
    std::map<std::size_t, double> acc_at_k;
    std::size_t n_examples = 0;
};

/// Next-token distribution after `context`: the cache-augmented mixture in
/// full mode, cache similarities alone in cache-only mode.
std::vector<double> next_token_distribution(const lm::MiniLM& model, std::span<const TokenId> context, EvalMode mode);

/// Indices of the k most probable tokens, ties by ascending id.
std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k);

/// True iff both gold ids are among the top-k.
bool both_in_top_k(std::span<const double> probs, const std::array<TokenId, 2>& gold, std::size_t k);

double acc_at_k(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset, std::size_t k,
                EvalMode mode);

/// Scores every k from one pass over the dataset.
EvalReport evaluate(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset,
                    const std::vector<std::size_t>& ks, EvalMode mode);

struct RankProbeReport {
    std::size_t n_contexts = 0;
    std::size_t vocab_size = 0;
    std::size_t hidden_size = 0;
    numerics::RankEstimate baseline;
    std::optional<numerics::RankEstimate> with_cache;
};

/// Rows of log P(w | context) over the first `n_examples` examples, scoring
/// the last `positions_per_example` positions of each context.
Matrix logprob_matrix(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset,
                      std::size_t n_examples, bool with_cache, std::size_t positions_per_example = 1);

/// Numerical rank of the log-probability matrix without the cache, and with it
/// when `with_cache` is set. Throws when N ≤ d.
RankProbeReport logprob_matrix_rank_probe(const lm::MiniLM& model,
                                          const std::vector<ambigen::TokenizedExample>& dataset,
                                          std::size_t n_examples, bool with_cache, double rel_tol = 1e-6,
                                          std::size_t positions_per_example = 1);

/// The smallest `count` singular values that survived the rank cutoff.
std::vector<double> smallest_retained(const numerics::RankEstimate& est, std::size_t count);

}  // namespace histalign::eval
