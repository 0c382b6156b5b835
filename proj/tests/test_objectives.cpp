#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "oracles.hpp"
#include "histalign/objectives.hpp"

using namespace histalign;
using cache::CacheEntry;
using cache::LocalMemory;
using objectives::Objective;

namespace {

LocalMemory memory_with_tokens(const std::vector<TokenId>& tokens, std::size_t d = 2) {
    LocalMemory mem;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        CacheEntry e;
        e.hidden = Vector::Constant(static_cast<Eigen::Index>(d), 1.0 + static_cast<double>(i));
        e.target_token = tokens[i];
        e.position = static_cast<std::uint32_t>(i + 1);
        mem.entries.push_back(e);
    }
    return mem;
}


}  // namespace

TEST_CASE("objective names") {
    CHECK(objectives::parse_objective("histalign") == Objective::HistAlign);
    CHECK(objectives::to_string(Objective::Trime) == "trime");
    CHECK_THROWS(objectives::parse_objective("xent"));
}

TEST_CASE("cross entropy examples") {
    const double lnv = std::log(7.0);
    const Matrix uniform = Matrix::Constant(3, 7, -lnv);
    const std::vector<TokenId> targets{0, 4, 6};
    CHECK(objectives::cross_entropy_loss(uniform, targets, {true, true, true}) == doctest::Approx(lnv));

    const Matrix certain = Matrix::Zero(3, 7);
    CHECK(objectives::cross_entropy_loss(certain, targets, {true, false, true}) == 0.0);

    Matrix quarter = Matrix::Constant(1, 4, std::log(0.25));
    CHECK(objectives::cross_entropy_loss(quarter, std::vector<TokenId>{2}, {true}) ==
          doctest::Approx(1.3862943611198906).epsilon(1e-14));

    CHECK_THROWS(objectives::cross_entropy_loss(uniform, targets, {false, false, false}));
}

TEST_CASE("positive set") {
    const auto mem = memory_with_tokens({5, 7, 5, 2});
    CHECK(objectives::build_positive_set(mem, 5) == std::vector<std::size_t>{0, 2});
    CHECK(objectives::build_positive_set(mem, 9).empty());
    CHECK(objectives::build_positive_set(memory_with_tokens({3, 3}), 3) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("ranking by embedding cosine") {
    Matrix emb(4, 2);
    emb << 1, 0,    // x_t
        0.9, 0.1,   // cosine 0.99388
        0, 1,       // 0
        -1, 0;      // -1
    const auto mem = memory_with_tokens({3, 2, 1, 0});
    const auto ranked = objectives::rank_memories(mem, 0, emb);
    CHECK(ranked.order == std::vector<std::size_t>{3, 2, 1, 0});
    CHECK(ranked.is_positive_rank(0));
    CHECK_FALSE(ranked.is_positive_rank(1));

    // equal cosines break by position
    const auto ties = objectives::rank_memories(memory_with_tokens({2, 2, 0}), 0, emb);
    CHECK(ties.order == std::vector<std::size_t>{2, 0, 1});

    Matrix zero = emb;
    zero.row(2).setZero();
    CHECK_THROWS(objectives::rank_memories(mem, 0, zero));
}

TEST_CASE("margin loss examples") {
    // d = 1, h = 1, so sim(h, h_j) is the entry value itself
    LocalMemory mem;
    for (double s : {0.5, 0.7, 0.1}) {
        CacheEntry e;
        e.hidden = Vector::Constant(1, s);
        e.position = static_cast<std::uint32_t>(mem.size() + 1);
        mem.entries.push_back(e);
    }
    objectives::RankedMemory ranked{{0, 1, 2}, {true, false, false}};
    const Vector h = Vector::Constant(1, 1.0);
    CHECK(objectives::histalign_margin_loss(as_span(h), ranked, mem, 0.1) == doctest::Approx(0.3).epsilon(1e-12));

    objectives::RankedMemory none{{0, 1, 2}, {false, false, false}};
    CHECK(objectives::histalign_margin_loss(as_span(h), none, mem, 0.1) == 0.0);

    // negatives exactly on the hinge boundary
    LocalMemory edge = mem;
    edge.entries[1].hidden[0] = 0.25;
    edge.entries[2].hidden[0] = 0.0;
    CHECK(objectives::histalign_margin_loss(as_span(h), ranked, edge, 0.25) == 0.0);
}

TEST_CASE("margin loss matches pair enumeration on random instances") {
    std::mt19937_64 rng(31);
    std::uniform_int_distribution<int> vocab(2, 10), mem_size(1, 5), dim(1, 6);
    std::uniform_real_distribution<double> lam(0.0, 0.5);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto v = static_cast<std::uint32_t>(vocab(rng));
        const auto d = static_cast<std::size_t>(dim(rng));
        const Matrix emb = testing::random_matrix(rng, v, 3);
        const Vector h = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        const auto mem = testing::random_memory(rng, static_cast<std::size_t>(mem_size(rng)), d, v);
        const TokenId x = mem.entries[rng() % mem.size()].target_token;
        const double lambda = lam(rng);
        const auto ranked = objectives::rank_memories(mem, x, emb);
        const double got = objectives::histalign_margin_loss(as_span(h), ranked, mem, lambda);
        worst = std::max(worst, std::abs(got - testing::brute_margin(h, mem, x, emb, lambda)));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("margin loss is non-negative and non-decreasing in lambda") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const Matrix emb = testing::random_matrix(rng, 6, 3);
        const Vector h = testing::random_matrix(rng, 4, 1);
        const auto mem = testing::random_memory(rng, 5, 4, 6);
        const auto ranked = objectives::rank_memories(mem, mem.entries[0].target_token, emb);
        double prev = -1.0;
        for (double lambda : {0.0, 0.001, 0.01, 0.1, 0.5, 2.0}) {
            const double l = objectives::histalign_margin_loss(as_span(h), ranked, mem, lambda);
            CHECK(l >= 0.0);
            CHECK(l >= prev);
            prev = l;
        }
    }
}

TEST_CASE("minimizing the margin loss separates positives from negatives") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix emb = testing::random_matrix(rng, 5, 3);
        Vector h = testing::random_matrix(rng, 4, 1);
        auto mem = testing::random_memory(rng, 5, 4, 5);
        mem.entries[4].target_token = mem.entries[1].target_token == 0 ? 1 : 0;  // at least one negative
        const TokenId x = mem.entries[1].target_token;
        const auto ranked = objectives::rank_memories(mem, x, emb);
        const double lambda = 0.05;

        double loss = 1.0;
        for (int it = 0; it < 20000 && loss > 0.0; ++it) {
            objectives::MarginGrad g;
            loss = objectives::histalign_margin_loss(as_span(h), ranked, mem, lambda, &g);
            h -= 0.05 * g.d_query;
            for (std::size_t i = 0; i < mem.size(); ++i)
                mem.entries[i].hidden -= 0.05 * g.d_entries.row(static_cast<Eigen::Index>(i)).transpose();
        }
        CHECK(loss == 0.0);
        double min_pos = INFINITY, max_neg = -INFINITY;
        for (const auto& e : mem.entries) {
            const double s = h.dot(e.hidden) / 2.0;
            if (e.target_token == x) min_pos = std::min(min_pos, s);
            else max_neg = std::max(max_neg, s);
        }
        CHECK(min_pos > max_neg);
    }
}

TEST_CASE("total loss arithmetic") {
    CHECK(objectives::histalign_total_loss(1.0, 0.3, 1.0) == doctest::Approx(1.3));
    CHECK(objectives::histalign_total_loss(1.0, 0.3, 0.5) == doctest::Approx(1.15));
    CHECK(objectives::histalign_total_loss(0.7, 123.0, 0.0) == 0.7);
}

TEST_CASE("trime per-position loss") {
    LocalMemory mem;
    CacheEntry e;
    e.hidden = Vector::Constant(1, 1.0);
    e.target_token = 0;
    e.position = 1;
    mem.entries.push_back(e);
    const double lp = cache::combined_log_prob(std::vector<double>{0, 0, 0}, std::vector<double>{2.0}, mem, 0);
    CHECK(-lp == doctest::Approx(0.21382494287015866).epsilon(1e-12));
}

TEST_CASE("adding a gold entry never raises the trime term") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 500; ++trial) {
        const std::uint32_t v = 2 + trial % 9;
        const std::size_t d = 1 + trial % 4;
        const Matrix logits = testing::random_matrix(rng, 1, v, 2.0);
        const Vector h = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        auto mem = testing::random_memory(rng, trial % 5, d, v);
        const TokenId gold = static_cast<TokenId>(rng() % v);
        const double before = -cache::combined_log_prob(row_span(logits, 0), as_span(h), mem, gold);
        CacheEntry extra;
        extra.hidden = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1, 2.0);
        extra.target_token = gold;
        extra.position = static_cast<std::uint32_t>(mem.size() + 1);
        mem.entries.push_back(extra);
        const double after = -cache::combined_log_prob(row_span(logits, 0), as_span(h), mem, gold);
        CHECK(after <= before + 1e-15);
    }
}

TEST_CASE("sequence loss on a model") {
    const auto model = testing::small_model(10, 8, 2, 32, 5);
    const std::vector<TokenId> tokens{2, 3, 4, 3, 5, 2, 6, 3};
    const auto out = lm::forward(model, tokens);

    SUBCASE("empty memory degenerates to cross entropy") {
        std::vector<bool> mask(tokens.size(), false);
        mask[1] = true;  // predicted from row 0, nothing cached yet
        const auto l = objectives::sequence_loss(out, model.embeddings(), tokens, mask, {Objective::Trime});
        CHECK(l.trime == l.xe);
        CHECK(l.contributing_positions == 0);
    }

    SUBCASE("alpha zero total equals xe") {
        std::vector<bool> mask(tokens.size(), true);
        mask[0] = false;
        const auto l = objectives::sequence_loss(out, model.embeddings(), tokens, mask, {Objective::HistAlign, 0.0, 0.1});
        CHECK(l.total == l.xe);
        CHECK(l.contrastive >= 0.0);
        CHECK(l.contributing_positions > 0);
        const auto x = objectives::sequence_loss(out, model.embeddings(), tokens, mask, {Objective::Xe});
        CHECK(x.total == l.xe);
    }

    SUBCASE("histalign total is xe plus alpha times contrastive") {
        std::vector<bool> mask(tokens.size(), true);
        mask[0] = false;
        const auto l = objectives::sequence_loss(out, model.embeddings(), tokens, mask, {Objective::HistAlign, 0.5, 0.1});
        CHECK(l.total == doctest::Approx(l.xe + 0.5 * l.contrastive).epsilon(1e-14));
    }
}
