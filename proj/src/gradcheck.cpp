#include "histalign/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "histalign/cache.hpp"

namespace histalign::gradcheck {

namespace {

Point draw(const Options& o, std::uint64_t seed) {
    lm::ModelConfig cfg{o.vocab_size, o.hidden_size, o.num_layers, o.num_heads,
                        static_cast<std::uint32_t>(o.length), seed};
    lm::MiniLM model = lm::init_model(cfg);
    std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
    std::normal_distribution<double> noise(0.0, o.param_std);
    model.params().visit([&](std::string_view, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] += noise(rng);
        }
    });
    // Draw from a small alphabet so tokens repeat and positives exist.
    const std::uint32_t alphabet = std::min<std::uint32_t>(o.vocab_size, 6);
    std::uniform_int_distribution<std::uint32_t> pick(0, alphabet - 1);
    std::vector<TokenId> tokens(o.length);
    for (auto& t : tokens) {
        t = pick(rng);
    }
    std::vector<bool> mask(o.length, false);
    for (std::size_t p = 2; p < o.length; ++p) {
        mask[p] = true;  // every supervised position has a non-empty memory
    }
    return {std::move(model), std::move(tokens), std::move(mask), seed};
}

}  // namespace

double kink_distance(const Point& point, double lambda) {
    const auto out = lm::forward(point.model, point.tokens);
    const Matrix& emb = point.model.embeddings();
    const std::size_t d = point.model.config().hidden_size;
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t p = 1; p < point.tokens.size(); ++p) {
        if (!point.mask[p]) {
            continue;
        }
        const auto memory = cache::build_local_cache(out, point.tokens, p + 1);
        if (memory.empty()) {
            continue;
        }
        const TokenId x = point.tokens[p];
        const auto ranked = objectives::rank_memories(memory, x, emb);
        const auto h = row_span(out.hidden_states, static_cast<Eigen::Index>(p - 1));
        const std::size_t m = memory.size();

        std::vector<double> cos(m);
        for (std::size_t r = 0; r < m; ++r) {
            const TokenId w = memory.entries[ranked.order[r]].target_token;
            cos[r] = w == x ? 1.0 : numerics::cosine_similarity(row_span(emb, x), row_span(emb, w));
        }
        for (std::size_t r = 0; r + 1 < m; ++r) {
            const TokenId a = memory.entries[ranked.order[r]].target_token;
            const TokenId b = memory.entries[ranked.order[r + 1]].target_token;
            if (a != b) {
                closest = std::min(closest, std::abs(cos[r] - cos[r + 1]));
            }
        }
        for (std::size_t ri = 0; ri < m; ++ri) {
            if (!ranked.is_positive_rank(ri)) {
                continue;
            }
            const double si = cache::scaled_dot(h, as_span(memory.entries[ranked.order[ri]].hidden), d);
            for (std::size_t rj = ri + 1; rj < m; ++rj) {
                if (ranked.is_positive_rank(rj)) {
                    continue;
                }
                const double sj = cache::scaled_dot(h, as_span(memory.entries[ranked.order[rj]].hidden), d);
                closest = std::min(closest, std::abs(sj - si + static_cast<double>(rj - ri) * lambda));
            }
        }
    }
    return closest;
}

double loss_at(const Point& point, const objectives::ObjectiveConfig& config) {
    const auto out = lm::forward(point.model, point.tokens);
    return objectives::sequence_loss(out, point.model.embeddings(), point.tokens, point.mask, config).total;
}

std::vector<double> analytic_gradient(const Point& point, const objectives::ObjectiveConfig& config) {
    lm::ForwardTrace trace;
    const auto out = lm::forward(point.model, point.tokens, true, &trace);
    objectives::SequenceGrad seq;
    objectives::sequence_loss(out, point.model.embeddings(), point.tokens, point.mask, config, &seq);
    lm::Parameters grads = lm::Parameters::zeros(point.model.config());
    grads.token_embedding += seq.d_embedding;
    lm::backward(point.model, trace, seq.d_hidden, grads);
    return grads.flatten();
}

Point sample_point(const Options& options) {
    const objectives::ObjectiveConfig cfg{options.objective, options.alpha, options.lambda};
    for (std::size_t attempt = 0; attempt < options.max_attempts; ++attempt) {
        Point point = draw(options, options.seed + attempt);
        if (options.objective == objectives::Objective::HistAlign) {
            const auto out = lm::forward(point.model, point.tokens);
            const auto loss =
                objectives::sequence_loss(out, point.model.embeddings(), point.tokens, point.mask, cfg);
            if (loss.contributing_positions == 0 || loss.contrastive <= 0.0) {
                continue;
            }
        }
        if (kink_distance(point, options.lambda) >= options.kink_margin) {
            return point;
        }
    }
    throw std::runtime_error("gradcheck: no kink-free point found");
}

Result check(const Options& options) {
    if (options.length < 3) {
        throw std::invalid_argument("gradcheck: length must be at least 3");
    }
    const objectives::ObjectiveConfig cfg{options.objective, options.alpha, options.lambda};
    Point point = sample_point(options);
    const auto grad = analytic_gradient(point, cfg);
    const auto x = point.model.params().flatten();
    const lm::ModelConfig model_cfg = point.model.config();
    auto f = [&](std::span<const double> theta) {
        lm::Parameters p = lm::Parameters::zeros(model_cfg);
        p.assign(theta);
        return loss_at(Point{lm::MiniLM(model_cfg, std::move(p)), point.tokens, point.mask, point.seed}, cfg);
    };
    Result result;
    result.report = numerics::finite_diff_grad_check(f, grad, x, options.eps);
    const auto out = lm::forward(point.model, point.tokens);
    result.loss = objectives::sequence_loss(out, point.model.embeddings(), point.tokens, point.mask, cfg);
    result.seed = point.seed;
    result.parameters = x.size();
    return result;
}

}  // namespace histalign::gradcheck
