#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "oracles.hpp"
#include "histalign/cache.hpp"
#include "histalign/numerics.hpp"

using namespace histalign;
using cache::CacheEntry;
using cache::LocalMemory;

namespace {

CacheEntry entry(std::vector<double> h, TokenId token, std::uint32_t position) {
    CacheEntry e;
    e.hidden = Eigen::Map<Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
    e.target_token = token;
    e.position = position;
    return e;
}


}  // namespace

TEST_CASE("local cache contents") {
    const auto model = testing::small_model(12);
    const std::vector<TokenId> tokens{3, 4, 5, 6, 7, 8, 9, 10, 11};
    const auto out = lm::forward(model, tokens);
    CHECK(cache::build_local_cache(out, tokens, 1).empty());
    CHECK(cache::build_local_cache(out, tokens, 2).empty());

    const auto three = cache::build_local_cache(out, tokens, 3);
    REQUIRE(three.size() == 1);
    CHECK(three.entries[0].target_token == tokens[1]);
    CHECK(three.entries[0].position == 1);
    CHECK(three.entries[0].hidden == out.hidden_states.row(0).transpose());

    const auto ten = cache::build_local_cache(out, tokens, 10);
    REQUIRE(ten.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(ten.entries[i].position == i + 1);
        CHECK(ten.entries[i].target_token == tokens[i + 1]);
    }
    CHECK_THROWS(cache::build_local_cache(out, tokens, 0));
    CHECK_THROWS(cache::build_local_cache(out, tokens, 11));
}

TEST_CASE("source cache") {
    CHECK(cache::build_source_cache(Matrix(0, 3), {}).empty());
    const Matrix h = Matrix::Random(5, 3);
    const std::vector<TokenId> src{1, 2, 2, 3, 4};
    const auto mem = cache::build_source_cache(h, src);
    REQUIRE(mem.size() == 5);
    CHECK(mem.entries[1].target_token == 2);
    CHECK(mem.entries[2].target_token == 2);
    CHECK(mem.entries[4].origin == cache::Origin::SourceSide);
    CHECK_THROWS(cache::build_source_cache(h, std::vector<TokenId>{1, 2}));
}

TEST_CASE("scaled dot") {
    CHECK(cache::scaled_dot(std::vector<double>{1, 1}, std::vector<double>{1, 1}, 2) ==
          doctest::Approx(std::sqrt(2.0)));
    CHECK(cache::scaled_dot(std::vector<double>{1, 3}, std::vector<double>{0, 0}, 2) == 0.0);
    CHECK_THROWS(cache::scaled_dot(std::vector<double>{1}, std::vector<double>{1, 2}, 2));
}

TEST_CASE("combined distribution examples") {
    const std::vector<double> logits{0.3, -1.0, 2.0};
    const auto base = numerics::stable_softmax(logits);
    const auto empty = cache::combined_next_token_distribution(logits, std::vector<double>{1, 2}, {});
    for (std::size_t w = 0; w < 3; ++w) CHECK(std::abs(empty[w] - base[w]) <= 1e-12);

    LocalMemory mem;
    mem.entries.push_back(entry({1.0}, 0, 1));
    const auto p = cache::combined_next_token_distribution(std::vector<double>{0, 0, 0}, std::vector<double>{2.0}, mem);
    CHECK(p[0] == doctest::Approx(0.8074897294850626).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(0.09625513525746872).epsilon(1e-12));
    CHECK(p[2] == doctest::Approx(0.09625513525746872).epsilon(1e-12));

    // a second identical entry for token 0
    mem.entries.push_back(entry({1.0}, 0, 2));
    const auto dup = cache::combined_next_token_distribution(std::vector<double>{0, 0, 0}, std::vector<double>{2.0}, mem);
    CHECK(dup[0] == doctest::Approx(0.8875021162122827).epsilon(1e-12));
}

TEST_CASE("cache-only distribution") {
    LocalMemory one;
    one.entries.push_back(entry({0.5, -1.0}, 3, 1));
    const auto p1 = cache::cache_only_distribution(std::vector<double>{1, 1}, one, 5);
    CHECK(p1[3] == 1.0);
    CHECK(p1[0] == 0.0);

    LocalMemory two;
    two.entries.push_back(entry({1.0, 0.0}, 1, 1));
    two.entries.push_back(entry({0.0, 1.0}, 2, 2));
    const auto eq = cache::cache_only_distribution(std::vector<double>{1, 1}, two, 4);
    CHECK(eq[1] == doctest::Approx(0.5));
    CHECK(eq[2] == doctest::Approx(0.5));

    // similarities s and s + ln 2 with d = 1
    LocalMemory ln2;
    ln2.entries.push_back(entry({0.7}, 0, 1));
    ln2.entries.push_back(entry({0.7 + std::log(2.0)}, 1, 2));
    const auto r = cache::cache_only_distribution(std::vector<double>{1.0}, ln2, 2);
    CHECK(r[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

    CHECK_THROWS(cache::cache_only_distribution(std::vector<double>{1.0}, LocalMemory{}, 2));
}

TEST_CASE("combined distribution matches brute force on random instances") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> vocab(2, 10), mem_size(0, 5), dim(1, 6);
    std::uniform_real_distribution<double> logit(-3.0, 3.0);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto v = static_cast<std::uint32_t>(vocab(rng));
        const auto d = static_cast<std::size_t>(dim(rng));
        std::vector<double> logits(v);
        for (double& l : logits) l = logit(rng);
        const Vector h = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        const auto mem = testing::random_memory(rng, static_cast<std::size_t>(mem_size(rng)), d, v);
        const auto got = cache::combined_next_token_distribution(logits, as_span(h), mem);
        const auto want = testing::brute_combined(logits, h, mem);
        for (std::size_t w = 0; w < v; ++w) worst = std::max(worst, std::abs(got[w] - want[w]));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("mixture consistency") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const std::uint32_t v = 2 + trial % 9;
        const std::size_t d = 1 + trial % 5;
        std::vector<double> logits(v);
        std::normal_distribution<double> n(0.0, 1.5);
        for (double& l : logits) l = n(rng);
        const Vector h = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        const auto mem = testing::random_memory(rng, 1 + trial % 5, d, v);

        double zl = 0.0, zs = 0.0;
        for (double l : logits) zl += std::exp(l);
        for (const auto& e : mem.entries) zs += std::exp(h.dot(e.hidden) / std::sqrt(static_cast<double>(d)));
        const double gamma = zl / (zl + zs);
        const auto soft = numerics::stable_softmax(logits);
        const auto only = cache::cache_only_distribution(as_span(h), mem, v);
        const auto mix = cache::combined_next_token_distribution(logits, as_span(h), mem);
        for (std::size_t w = 0; w < v; ++w) {
            CHECK(std::abs(mix[w] - (gamma * soft[w] + (1 - gamma) * only[w])) <= 1e-12);
        }
    }
}

TEST_CASE("shared shift survives extreme magnitudes") {
    LocalMemory mem;
    mem.entries.push_back(entry({40.0}, 1, 1));
    // similarity 1600 dwarfs the logits; naive exp would overflow
    const auto p = cache::combined_next_token_distribution(std::vector<double>{800, 0, 0}, std::vector<double>{40.0}, mem);
    CHECK(numerics::all_finite(p));
    CHECK(p[1] == doctest::Approx(1.0));
    const auto logp = cache::combined_log_distribution(std::vector<double>{-900, -900}, std::vector<double>{-30.0}, mem);
    CHECK(numerics::all_finite(logp));
}

TEST_CASE("combined log prob gradient matches finite differences") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        const std::uint32_t v = 3 + trial % 5;
        const std::size_t d = 2 + trial % 4;
        const std::size_t m = 1 + trial % 5;
        std::vector<double> x;  // logits, query, entries
        Matrix logits = testing::random_matrix(rng, 1, v);
        Vector h = testing::random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        auto mem = testing::random_memory(rng, m, d, v);
        const TokenId target = mem.entries[0].target_token;

        auto unpack = [&](std::span<const double> flat, std::vector<double>& lg, Vector& q, LocalMemory& mm) {
            std::size_t k = 0;
            lg.assign(flat.begin(), flat.begin() + v);
            k = v;
            for (std::size_t i = 0; i < d; ++i) q[static_cast<Eigen::Index>(i)] = flat[k++];
            for (auto& e : mm.entries)
                for (std::size_t i = 0; i < d; ++i) e.hidden[static_cast<Eigen::Index>(i)] = flat[k++];
        };
        for (Eigen::Index i = 0; i < logits.size(); ++i) x.push_back(logits.data()[i]);
        for (Eigen::Index i = 0; i < h.size(); ++i) x.push_back(h[i]);
        for (const auto& e : mem.entries)
            for (Eigen::Index i = 0; i < e.hidden.size(); ++i) x.push_back(e.hidden[i]);

        cache::CombinedLogProbGrad g;
        cache::combined_log_prob(row_span(logits, 0), as_span(h), mem, target, &g);
        std::vector<double> analytic(g.d_logits.data(), g.d_logits.data() + g.d_logits.size());
        analytic.insert(analytic.end(), g.d_query.data(), g.d_query.data() + g.d_query.size());
        analytic.insert(analytic.end(), g.d_entries.data(), g.d_entries.data() + g.d_entries.size());

        auto f = [&](std::span<const double> flat) {
            std::vector<double> lg;
            Vector q(static_cast<Eigen::Index>(d));
            LocalMemory mm = mem;
            unpack(flat, lg, q, mm);
            return cache::combined_log_prob(lg, as_span(q), mm, target);
        };
        const auto r = numerics::finite_diff_grad_check(f, analytic, x, 1e-5);
        INFO("trial " << trial << " index " << r.worst_index << " analytic " << r.analytic << " numeric " << r.numeric);
        CHECK(r.max_rel_error < 1e-6);
    }
}

TEST_CASE("memory dump round trip") {
    std::mt19937_64 rng(4);
    auto mem = testing::random_memory(rng, 4, 3, 9);
    mem.entries[2].origin = cache::Origin::SourceSide;
    std::stringstream buf;
    cache::write_memory(buf, mem, 3);
    const auto back = cache::read_memory(buf);
    REQUIRE(back.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back.entries[i].hidden == mem.entries[i].hidden);
        CHECK(back.entries[i].target_token == mem.entries[i].target_token);
        CHECK(back.entries[i].position == mem.entries[i].position);
        CHECK(back.entries[i].origin == mem.entries[i].origin);
    }
    std::istringstream bad("HMEX");
    CHECK_THROWS_AS(cache::read_memory(bad), io::FormatError);
}
