#include "histalign/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace histalign::objectives {

std::string_view to_string(Objective objective) {
    switch (objective) {
        case Objective::Xe: return "xe";
        case Objective::Trime: return "trime";
        case Objective::HistAlign: return "histalign";
    }
    return "unknown";
}

Objective parse_objective(std::string_view name) {
    if (name == "xe") return Objective::Xe;
    if (name == "trime") return Objective::Trime;
    if (name == "histalign") return Objective::HistAlign;
    throw std::invalid_argument("unknown objective '" + std::string(name) + "'");
}

double cross_entropy_loss(const Matrix& logprobs, std::span<const TokenId> targets, const std::vector<bool>& mask) {
    if (targets.size() != static_cast<std::size_t>(logprobs.rows()) || mask.size() != targets.size()) {
        throw std::invalid_argument("cross_entropy_loss: row count mismatch");
    }
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (!mask[t]) {
            continue;
        }
        if (targets[t] >= logprobs.cols()) {
            throw std::invalid_argument("cross_entropy_loss: target id out of range");
        }
        total -= logprobs(static_cast<Eigen::Index>(t), targets[t]);
        ++n;
    }
    if (n == 0) {
        throw std::invalid_argument("cross_entropy_loss: every position is masked");
    }
    return total / static_cast<double>(n);
}

std::vector<std::size_t> build_positive_set(const cache::LocalMemory& memory, TokenId x_t) {
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < memory.size(); ++i) {
        if (memory.entries[i].target_token == x_t) {
            positives.push_back(i);
        }
    }
    return positives;
}

RankedMemory rank_memories(const cache::LocalMemory& memory, TokenId x_t, const Matrix& embeddings) {
    if (x_t >= embeddings.rows()) {
        throw std::invalid_argument("rank_memories: target token out of range");
    }
    const auto target_row = row_span(embeddings, x_t);
    if (std::all_of(target_row.begin(), target_row.end(), [](double v) { return v == 0.0; })) {
        throw std::invalid_argument("rank_memories: target token has a zero embedding");
    }
    RankedMemory ranked;
    ranked.positive_flags.resize(memory.size());
    std::vector<double> cosine(memory.size());
    for (std::size_t i = 0; i < memory.size(); ++i) {
        const TokenId w = memory.entries[i].target_token;
        if (w >= embeddings.rows()) {
            throw std::invalid_argument("rank_memories: entry token out of range");
        }
        ranked.positive_flags[i] = (w == x_t);
        cosine[i] = (w == x_t) ? 1.0 : numerics::cosine_similarity(target_row, row_span(embeddings, w));
    }
    ranked.order.resize(memory.size());
    std::iota(ranked.order.begin(), ranked.order.end(), std::size_t{0});
    std::stable_sort(ranked.order.begin(), ranked.order.end(), [&](std::size_t a, std::size_t b) {
        if (cosine[a] != cosine[b]) {
            return cosine[a] > cosine[b];
        }
        return memory.entries[a].position < memory.entries[b].position;
    });
    return ranked;
}

double histalign_margin_loss(std::span<const double> h_t, const RankedMemory& ranked,
                             const cache::LocalMemory& memory, double lambda, MarginGrad* grad) {
    if (lambda < 0.0) {
        throw std::invalid_argument("histalign_margin_loss: lambda must be non-negative");
    }
    if (ranked.order.size() != memory.size() || ranked.positive_flags.size() != memory.size()) {
        throw std::invalid_argument("histalign_margin_loss: ranking does not match memory");
    }
    const std::size_t d = h_t.size();
    const std::size_t m = memory.size();
    std::vector<double> sims(m);
    for (std::size_t i = 0; i < m; ++i) {
        sims[i] = cache::scaled_dot(h_t, as_span(memory.entries[i].hidden), d);
    }
    std::vector<double> d_sims(m, 0.0);
    double loss = 0.0;
    for (std::size_t ri = 0; ri < m; ++ri) {
        if (!ranked.is_positive_rank(ri)) {
            continue;
        }
        const std::size_t pos = ranked.order[ri];
        for (std::size_t rj = ri + 1; rj < m; ++rj) {
            if (ranked.is_positive_rank(rj)) {
                continue;
            }
            const std::size_t neg = ranked.order[rj];
            const double term = sims[neg] - sims[pos] + static_cast<double>(rj - ri) * lambda;
            if (term > 0.0) {
                loss += term;
                d_sims[neg] += 1.0;
                d_sims[pos] -= 1.0;
            }
        }
    }
    if (grad != nullptr) {
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        const Eigen::Map<const Eigen::RowVectorXd> query(h_t.data(), static_cast<Eigen::Index>(d));
        grad->d_query = Vector::Zero(static_cast<Eigen::Index>(d));
        grad->d_entries = Matrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < m; ++i) {
            if (d_sims[i] == 0.0) {
                continue;
            }
            grad->d_query += (d_sims[i] * inv_sqrt_d) * memory.entries[i].hidden;
            grad->d_entries.row(static_cast<Eigen::Index>(i)) = (d_sims[i] * inv_sqrt_d) * query;
        }
    }
    return loss;
}

double histalign_total_loss(double xe, double contrastive, double alpha) {
    if (alpha < 0.0) {
        throw std::invalid_argument("alpha must be non-negative");
    }
    return xe + alpha * contrastive;
}

LossBreakdown sequence_loss(const lm::ForwardOutput& forward, const Matrix& embeddings,
                            std::span<const TokenId> tokens, const std::vector<bool>& target_mask,
                            const ObjectiveConfig& config, SequenceGrad* grad) {
    const Eigen::Index t_len = static_cast<Eigen::Index>(tokens.size());
    if (forward.hidden_states.rows() != t_len || target_mask.size() != tokens.size()) {
        throw std::invalid_argument("sequence_loss: token, mask and forward lengths disagree");
    }
    if (!target_mask.empty() && target_mask[0]) {
        throw std::invalid_argument("sequence_loss: the first token has no context to predict it from");
    }
    const std::size_t supervised = static_cast<std::size_t>(std::count(target_mask.begin(), target_mask.end(), true));
    if (supervised == 0) {
        throw std::invalid_argument("sequence_loss: every position is masked");
    }
    const Eigen::Index d = forward.hidden_states.cols();
    const Eigen::Index vocab = embeddings.rows();

    // Per-position gradients are accumulated unscaled, then weighted once the
    // number of contributing positions is known.
    Matrix dh_xe, dh_trime, dh_cont, de_xe, de_trime;
    const bool want_xe = grad != nullptr && config.objective != Objective::Trime;
    const bool want_trime = grad != nullptr && config.objective == Objective::Trime;
    const bool want_cont = grad != nullptr && config.objective == Objective::HistAlign;
    if (want_xe) {
        dh_xe = Matrix::Zero(t_len, d);
        de_xe = Matrix::Zero(vocab, d);
    }
    if (want_trime) {
        dh_trime = Matrix::Zero(t_len, d);
        de_trime = Matrix::Zero(vocab, d);
    }
    if (want_cont) {
        dh_cont = Matrix::Zero(t_len, d);
    }

    LossBreakdown out;
    double xe_sum = 0.0;
    double trime_sum = 0.0;
    double cont_sum = 0.0;
    const cache::LocalMemory no_memory;
    std::vector<double> probs;
    for (Eigen::Index p = 1; p < t_len; ++p) {
        if (!target_mask[static_cast<std::size_t>(p)]) {
            continue;
        }
        const Eigen::Index q = p - 1;
        const TokenId target = tokens[static_cast<std::size_t>(p)];
        const auto logits = row_span(forward.logits, q);
        const auto h_q = row_span(forward.hidden_states, q);

        // Cross-entropy.
        probs.assign(logits.begin(), logits.end());
        numerics::stable_softmax_inplace(probs);
        xe_sum -= std::log(probs[target]);
        if (want_xe) {
            probs[target] -= 1.0;
            const Eigen::Map<const Eigen::RowVectorXd> d_logits(probs.data(), vocab);
            dh_xe.row(q) += d_logits * embeddings;
            de_xe += d_logits.transpose() * forward.hidden_states.row(q);
        }

        const cache::LocalMemory memory =
            cache::build_local_cache(forward, tokens, static_cast<std::size_t>(p) + 1);

        // Cache-augmented likelihood.
        cache::CombinedLogProbGrad clm_grad;
        trime_sum -= cache::combined_log_prob(logits, h_q, memory, target, want_trime ? &clm_grad : nullptr);
        if (want_trime) {
            const Eigen::RowVectorXd d_logits = -clm_grad.d_logits.transpose();
            dh_trime.row(q) += d_logits * embeddings - clm_grad.d_query.transpose();
            de_trime += d_logits.transpose() * forward.hidden_states.row(q);
            for (std::size_t i = 0; i < memory.size(); ++i) {
                dh_trime.row(memory.entries[i].position - 1) -= clm_grad.d_entries.row(static_cast<Eigen::Index>(i));
            }
        }

        // Ranked max-margin term over positions with a non-empty positive set.
        if (memory.empty() || build_positive_set(memory, target).empty()) {
            continue;
        }
        ++out.contributing_positions;
        const RankedMemory ranked = rank_memories(memory, target, embeddings);
        MarginGrad margin_grad;
        cont_sum += histalign_margin_loss(h_q, ranked, memory, config.lambda, want_cont ? &margin_grad : nullptr);
        if (want_cont) {
            dh_cont.row(q) += margin_grad.d_query.transpose();
            for (std::size_t i = 0; i < memory.size(); ++i) {
                dh_cont.row(memory.entries[i].position - 1) += margin_grad.d_entries.row(static_cast<Eigen::Index>(i));
            }
        }
    }

    const double n = static_cast<double>(supervised);
    out.xe = xe_sum / n;
    out.trime = trime_sum / n;
    out.contrastive =
        out.contributing_positions > 0 ? cont_sum / static_cast<double>(out.contributing_positions) : 0.0;
    switch (config.objective) {
        case Objective::Xe: out.total = out.xe; break;
        case Objective::Trime: out.total = out.trime; break;
        case Objective::HistAlign: out.total = histalign_total_loss(out.xe, out.contrastive, config.alpha); break;
    }
    if (!std::isfinite(out.total)) {
        throw NumericalError("sequence_loss: non-finite loss");
    }

    if (grad != nullptr) {
        switch (config.objective) {
            case Objective::Xe:
                grad->d_hidden = dh_xe / n;
                grad->d_embedding = de_xe / n;
                break;
            case Objective::Trime:
                grad->d_hidden = dh_trime / n;
                grad->d_embedding = de_trime / n;
                break;
            case Objective::HistAlign: {
                grad->d_hidden = dh_xe / n;
                grad->d_embedding = de_xe / n;
                if (out.contributing_positions > 0) {
                    grad->d_hidden += (config.alpha / static_cast<double>(out.contributing_positions)) * dh_cont;
                }
                break;
            }
        }
    }
    return out;
}

double trime_loss(const lm::ForwardOutput& forward, const Matrix& embeddings, std::span<const TokenId> tokens,
                  const std::vector<bool>& target_mask) {
    return sequence_loss(forward, embeddings, tokens, target_mask, {Objective::Trime, 0.0, 0.0}).trime;
}

}  // namespace histalign::objectives
