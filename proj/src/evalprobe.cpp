#include "histalign/evalprobe.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "histalign/cache.hpp"

namespace histalign::eval {

std::string_view to_string(EvalMode mode) { return mode == EvalMode::Full ? "full" : "cache-only"; }

EvalMode parse_mode(std::string_view name) {
    if (name == "full") return EvalMode::Full;
    if (name == "cache-only") return EvalMode::CacheOnly;
    throw std::invalid_argument("unknown evaluation mode '" + std::string(name) + "'");
}

std::vector<double> next_token_distribution(const lm::MiniLM& model, std::span<const TokenId> context, EvalMode mode) {
    const lm::ForwardOutput out = lm::forward(model, context);
    const Eigen::Index last = out.hidden_states.rows() - 1;
    const cache::LocalMemory memory = cache::build_local_cache(out, context, context.size() + 1);
    const auto h = row_span(out.hidden_states, last);
    if (mode == EvalMode::Full) {
        return cache::combined_next_token_distribution(row_span(out.logits, last), h, memory);
    }
    return cache::cache_only_distribution(h, memory, model.config().vocab_size);
}

std::vector<TokenId> top_k(std::span<const double> probs, std::size_t k) {
    std::vector<TokenId> ids(probs.size());
    std::iota(ids.begin(), ids.end(), TokenId{0});
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&](TokenId a, TokenId b) { return probs[a] != probs[b] ? probs[a] > probs[b] : a < b; });
    ids.resize(k);
    return ids;
}

namespace {

// 0-based position of `id` in the tie-broken descending order.
std::size_t rank_of(std::span<const double> probs, TokenId id) {
    std::size_t ahead = 0;
    for (std::size_t w = 0; w < probs.size(); ++w) {
        if (probs[w] > probs[id] || (probs[w] == probs[id] && w < id)) {
            ++ahead;
        }
    }
    return ahead;
}

void require_k(std::size_t k) {
    if (k < 2) {
        throw std::invalid_argument("Acc@k needs k >= 2 to hold both gold words");
    }
}

}  // namespace

bool both_in_top_k(std::span<const double> probs, const std::array<TokenId, 2>& gold, std::size_t k) {
    require_k(k);
    for (TokenId g : gold) {
        if (g >= probs.size()) {
            throw std::invalid_argument("gold token out of range");
        }
    }
    return std::max(rank_of(probs, gold[0]), rank_of(probs, gold[1])) < k;
}

EvalReport evaluate(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset,
                    const std::vector<std::size_t>& ks, EvalMode mode) {
    for (std::size_t k : ks) {
        require_k(k);
    }
    EvalReport report;
    report.mode = mode;
    report.n_examples = dataset.size();
    std::map<std::size_t, std::size_t> hits;
    for (std::size_t k : ks) {
        hits[k] = 0;
    }
    for (const auto& ex : dataset) {
        const auto probs = next_token_distribution(model, ex.context, mode);
        for (TokenId g : ex.gold) {
            if (g >= probs.size()) {
                throw std::invalid_argument("gold token out of range");
            }
        }
        const std::size_t worst = std::max(rank_of(probs, ex.gold[0]), rank_of(probs, ex.gold[1]));
        for (auto& [k, count] : hits) {
            if (worst < k) {
                ++count;
            }
        }
    }
    for (const auto& [k, count] : hits) {
        report.acc_at_k[k] =
            dataset.empty() ? 0.0 : static_cast<double>(count) / static_cast<double>(dataset.size());
    }
    return report;
}

double acc_at_k(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset, std::size_t k,
                EvalMode mode) {
    return evaluate(model, dataset, {k}, mode).acc_at_k.at(k);
}

Matrix logprob_matrix(const lm::MiniLM& model, const std::vector<ambigen::TokenizedExample>& dataset,
                      std::size_t n_examples, bool with_cache, std::size_t positions_per_example) {
    if (positions_per_example == 0) {
        throw std::invalid_argument("positions_per_example must be positive");
    }
    n_examples = std::min(n_examples, dataset.size());
    const Eigen::Index vocab = model.config().vocab_size;
    std::vector<Eigen::RowVectorXd> rows;
    for (std::size_t e = 0; e < n_examples; ++e) {
        const auto& context = dataset[e].context;
        const lm::ForwardOutput out = lm::forward(model, context);
        const std::size_t n = context.size();
        for (std::size_t back = 0; back < positions_per_example && back < n; ++back) {
            const std::size_t row = n - 1 - back;  // state predicting token row+1
            const auto logits = row_span(out.logits, static_cast<Eigen::Index>(row));
            std::vector<double> logp;
            if (with_cache) {
                const auto memory = cache::build_local_cache(out, context, row + 2);
                logp = cache::combined_log_distribution(logits, row_span(out.hidden_states, static_cast<Eigen::Index>(row)),
                                                        memory);
            } else {
                const double lse = numerics::log_sum_exp(logits);
                logp.assign(logits.begin(), logits.end());
                for (double& v : logp) {
                    v -= lse;
                }
            }
            rows.emplace_back(Eigen::Map<const Eigen::RowVectorXd>(logp.data(), vocab));
        }
    }
    Matrix a(static_cast<Eigen::Index>(rows.size()), vocab);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        a.row(static_cast<Eigen::Index>(r)) = rows[r];
    }
    return a;
}

RankProbeReport logprob_matrix_rank_probe(const lm::MiniLM& model,
                                          const std::vector<ambigen::TokenizedExample>& dataset,
                                          std::size_t n_examples, bool with_cache, double rel_tol,
                                          std::size_t positions_per_example) {
    RankProbeReport report;
    report.vocab_size = model.config().vocab_size;
    report.hidden_size = model.config().hidden_size;
    const Matrix baseline = logprob_matrix(model, dataset, n_examples, false, positions_per_example);
    report.n_contexts = static_cast<std::size_t>(baseline.rows());
    if (report.n_contexts <= report.hidden_size) {
        throw std::invalid_argument("rank probe needs more contexts (N = " + std::to_string(report.n_contexts) +
                                    ") than the hidden size (d = " + std::to_string(report.hidden_size) + ")");
    }
    report.baseline = numerics::numerical_rank(baseline, rel_tol);
    if (with_cache) {
        report.with_cache =
            numerics::numerical_rank(logprob_matrix(model, dataset, n_examples, true, positions_per_example), rel_tol);
    }
    return report;
}

std::vector<double> smallest_retained(const numerics::RankEstimate& est, std::size_t count) {
    const std::size_t begin = est.rank > count ? est.rank - count : 0;
    return {est.singular_values.begin() + static_cast<std::ptrdiff_t>(begin),
            est.singular_values.begin() + static_cast<std::ptrdiff_t>(est.rank)};
}

}  // namespace histalign::eval
