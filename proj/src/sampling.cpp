#include "histalign/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "histalign/cache.hpp"

namespace histalign::lm {

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

TokenId nucleus_sample(std::span<const double> probs, double p, Rng& rng) {
    if (!(p > 0.0) || p > 1.0) {
        throw std::invalid_argument("nucleus_sample: p must lie in (0, 1]");
    }
    if (probs.empty()) {
        throw std::invalid_argument("nucleus_sample: empty distribution");
    }
    const double mass = std::accumulate(probs.begin(), probs.end(), 0.0);
    if (std::abs(mass - 1.0) > 1e-9 || std::any_of(probs.begin(), probs.end(), [](double v) { return v < 0.0; })) {
        throw std::invalid_argument("nucleus_sample: input is not a probability vector");
    }
    std::vector<TokenId> order(probs.size());
    std::iota(order.begin(), order.end(), TokenId{0});
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return probs[a] > probs[b]; });

    std::size_t keep = 0;
    double cumulative = 0.0;
    while (keep < order.size()) {
        cumulative += probs[order[keep]];
        ++keep;
        if (cumulative >= p) {
            break;
        }
    }
    const double u = uniform01(rng) * cumulative;
    double running = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        running += probs[order[i]];
        if (u < running) {
            return order[i];
        }
    }
    // Rounding can leave u at the very top of the kept mass.
    return order[keep - 1];
}

std::vector<TokenId> generate(const MiniLM& model, std::span<const TokenId> prompt, const GenerateOptions& options) {
    if (prompt.empty()) {
        throw std::invalid_argument("generate: prompt must contain at least one token");
    }
    Rng rng(options.seed);
    const std::size_t window = model.config().context_length;
    std::vector<TokenId> sequence(prompt.begin(), prompt.end());
    std::vector<TokenId> continuation;
    for (std::size_t step = 0; step < options.max_tokens; ++step) {
        const std::size_t start = sequence.size() > window ? sequence.size() - window : 0;
        const std::span<const TokenId> visible(sequence.data() + start, sequence.size() - start);
        const ForwardOutput out = forward(model, visible);
        const Eigen::Index last = out.hidden_states.rows() - 1;
        std::vector<double> probs;
        if (options.use_cache) {
            const auto memory = cache::build_local_cache(out, visible, visible.size() + 1);
            probs = cache::combined_next_token_distribution(row_span(out.logits, last),
                                                            row_span(out.hidden_states, last), memory);
        } else {
            probs = numerics::stable_softmax(row_span(out.logits, last));
        }
        const TokenId next = nucleus_sample(probs, options.top_p, rng);
        sequence.push_back(next);
        continuation.push_back(next);
    }
    return continuation;
}

}  // namespace histalign::lm
