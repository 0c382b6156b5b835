#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "histalign/evalprobe.hpp"

using namespace histalign;
using eval::EvalMode;

TEST_CASE("top-k with ties") {
    const std::vector<double> p{0.2, 0.4, 0.2, 0.2};
    CHECK(eval::top_k(p, 3) == std::vector<TokenId>{1, 0, 2});
    CHECK(eval::top_k(p, 10).size() == 4);
}

TEST_CASE("both gold words in top-k") {
    const std::vector<double> p{0.4, 0.3, 0.2, 0.1};
    CHECK_FALSE(eval::both_in_top_k(p, {0, 2}, 2));
    CHECK(eval::both_in_top_k(p, {0, 2}, 3));
    CHECK(eval::both_in_top_k(p, {1, 0}, 2));
    CHECK_THROWS(eval::both_in_top_k(p, {0, 1}, 1));
    CHECK_THROWS(eval::both_in_top_k(p, {0, 9}, 2));
}

TEST_CASE("accuracy on a small model") {
    const auto [vocab, data] = testing::tiny_dataset();
    const auto model = testing::small_model(static_cast<std::uint32_t>(vocab.size()), 8, 2, 32, 6);
    const std::vector<std::size_t> ks{2, 3, 5, 10, 25};

    for (EvalMode mode : {EvalMode::Full, EvalMode::CacheOnly}) {
        const auto report = eval::evaluate(model, data, ks, mode);
        CHECK(report.n_examples == data.size());
        double prev = 0.0;
        for (std::size_t k : ks) {
            CHECK(report.acc_at_k.at(k) >= prev);
            prev = report.acc_at_k.at(k);
            CHECK(eval::acc_at_k(model, data, k, mode) == report.acc_at_k.at(k));
        }
    }
    CHECK(eval::acc_at_k(model, data, vocab.size(), EvalMode::Full) == 1.0);
    CHECK_THROWS(eval::evaluate(model, data, {1}, EvalMode::Full));

    // cache-only at k = number of distinct cached tokens retrieves both gold words
    std::size_t distinct = 0;
    for (const auto& ex : data) {
        distinct = std::max(distinct, std::set<TokenId>(ex.context.begin() + 1, ex.context.end()).size());
    }
    CHECK(eval::acc_at_k(model, data, distinct, EvalMode::CacheOnly) == 1.0);
}

TEST_CASE("rank of log-softmax of a random bilinear matrix is d + 1") {
    std::mt19937_64 rng(10);
    const Eigen::Index n = 60, v = 30, d = 8;
    const Matrix logits = testing::random_matrix(rng, n, d) * testing::random_matrix(rng, v, d).transpose();
    Matrix logp = logits;
    for (Eigen::Index r = 0; r < n; ++r) {
        const double lse = numerics::log_sum_exp(row_span(logits, r));
        logp.row(r).array() -= lse;
    }
    CHECK(testing::row_reduction_rank(logp, 1e-9) == static_cast<std::size_t>(d + 1));
    CHECK(numerics::numerical_rank(logp).rank == static_cast<std::size_t>(d + 1));
    CHECK(numerics::numerical_rank(logits).rank == static_cast<std::size_t>(d));
}

TEST_CASE("rank probe on a model") {
    const auto [vocab, data] = testing::tiny_dataset();
    const auto model = testing::small_model(static_cast<std::uint32_t>(vocab.size()), 8, 2, 32, 6);
    const auto report = eval::logprob_matrix_rank_probe(model, data, 40, true);
    CHECK(report.n_contexts == 40);
    CHECK(report.baseline.rank <= 9);
    REQUIRE(report.with_cache.has_value());
    CHECK(eval::smallest_retained(report.baseline, 3).size() == 3);

    CHECK_THROWS(eval::logprob_matrix_rank_probe(model, data, 8, false));
    const auto multi = eval::logprob_matrix_rank_probe(model, data, 4, false, 1e-6, 3);
    CHECK(multi.n_contexts == 12);
}
