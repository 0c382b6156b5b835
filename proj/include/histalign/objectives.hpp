#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "histalign/cache.hpp"
#include "histalign/model.hpp"

namespace histalign::objectives {

enum class Objective { Xe, Trime, HistAlign };

std::string_view to_string(Objective objective);
/// Accepts "xe", "trime" or "histalign".
Objective parse_objective(std::string_view name);

/// Memory entries sorted by cosine(e_target, e_entry_token), descending, ties
/// by ascending position. `positive_flags` is indexed by memory entry.
struct RankedMemory {
    std::vector<std::size_t> order;
    std::vector<bool> positive_flags;

    bool is_positive_rank(std::size_t rank) const { return positive_flags[order[rank]]; }
};

struct LossBreakdown {
    double xe = 0.0;
    double trime = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    std::size_t contributing_positions = 0;
};

/// Mean of -logprobs[t][targets[t]] over rows with mask[t] set.
double cross_entropy_loss(const Matrix& logprobs, std::span<const TokenId> targets, const std::vector<bool>& mask);

/// Indices of entries whose target token equals x_t.
std::vector<std::size_t> build_positive_set(const cache::LocalMemory& memory, TokenId x_t);

RankedMemory rank_memories(const cache::LocalMemory& memory, TokenId x_t, const Matrix& embeddings);

struct MarginGrad {
    Vector d_query;
    Matrix d_entries;  // |memory| × d, indexed by memory entry
};

/// Σ_{ranked positive i} Σ_{ranked negative j > i} max(0, sim(h,h_j) − sim(h,h_i) + (j−i)·λ)
double histalign_margin_loss(std::span<const double> h_t, const RankedMemory& ranked,
                             const cache::LocalMemory& memory, double lambda, MarginGrad* grad = nullptr);

double histalign_total_loss(double xe, double contrastive, double alpha);

struct ObjectiveConfig {
    Objective objective = Objective::Xe;
    double alpha = 1.0;
    double lambda = 0.001;
};

struct SequenceGrad {
    Matrix d_hidden;     // T × d
    Matrix d_embedding;  // V × d, output-side contribution only
};

/// Loss over one token sequence. `target_mask[p]` marks token p as supervised;
/// it is predicted from hidden row p−1 with the local memory of rows 0..p−2.
/// All three components are always reported; only the configured objective
/// is differentiated.
LossBreakdown sequence_loss(const lm::ForwardOutput& forward, const Matrix& embeddings,
                            std::span<const TokenId> tokens, const std::vector<bool>& target_mask,
                            const ObjectiveConfig& config, SequenceGrad* grad = nullptr);

double trime_loss(const lm::ForwardOutput& forward, const Matrix& embeddings, std::span<const TokenId> tokens,
                  const std::vector<bool>& target_mask);

}  // namespace histalign::objectives
