#include <doctest.h>

#include <set>
#include <sstream>

#include "helpers.hpp"
#include "histalign/ambigen.hpp"

using namespace histalign;
using namespace histalign::ambigen;

namespace {

std::set<std::string> gold_words(const std::vector<AmbiguousExample>& data, Split split) {
    std::set<std::string> out;
    for (const auto& ex : data) {
        if (ex.split == split) {
            out.insert(ex.gold_pair.first);
            out.insert(ex.gold_pair.second);
        }
    }
    return out;
}

bool disjoint(const std::set<std::string>& a, const std::set<std::string>& b) {
    for (const auto& w : a)
        if (b.count(w)) return false;
    return true;
}

}  // namespace

TEST_CASE("analogy parsing") {
    std::istringstream in(": capital-common-countries\nathens greece baghdad iraq\n\nBerlin Germany Paris France\n");
    const auto quads = parse_analogy_stream(in);
    REQUIRE(quads.size() == 2);
    CHECK(quads[0] == AnalogyQuadruple{"athens", "greece", "baghdad", "iraq"});

    std::istringstream header(": capital-common-countries\n");
    CHECK(parse_analogy_stream(header).empty());

    std::istringstream bad("athens greece baghdad iraq\nfoo bar baz\n");
    try {
        parse_analogy_stream(bad);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("diagonal pairs") {
    const auto d = diagonal_pairs({"queen", "king", "woman", "man"});
    CHECK(d[0].w1 == "queen");
    CHECK(d[0].w2 == "man");
    CHECK(d[1].w1 == "king");
    CHECK(d[1].w2 == "woman");
    CHECK(d[0].confusables == std::array<std::string, 2>{"king", "woman"});
}

TEST_CASE("synthetic quadruples") {
    Rng a(5), b(5);
    const auto q = synth_quadruples(1, 2, a);
    CHECK(q.size() == 2);
    CHECK(q == synth_quadruples(1, 2, b));
    for (const auto& x : q) {
        CHECK(x.a.rfind("r0", 0) == 0);
        CHECK(std::set<std::string>{x.a, x.b, x.c, x.d}.size() == 4);
    }
}

TEST_CASE("templates") {
    const Template t("the {X} and the {Y} are my favorites , and i especially love the");
    const auto words = t.fill("brother", "granddaughter");
    CHECK(words[1] == "brother");
    CHECK(words[4] == "granddaughter");
    CHECK(words.back() == "the");
    CHECK_THROWS(Template("only {X} here"));
    CHECK_THROWS(Template("{X} and {Y} first"));
    CHECK_THROWS(Template("a {X} {Y} {X}"));
    CHECK(builtin_templates().size() >= 3);
}

TEST_CASE("example construction") {
    Rng rng(1);
    const auto all = builtin_templates();
    const std::vector<std::string> templates(all.begin(), all.begin() + 3);
    const auto examples = make_examples({{"brother", "sister", "grandson", "granddaughter"}}, templates, rng);
    CHECK(examples.size() == 12);
    std::size_t brother_targets = 0;
    for (const auto& ex : examples) {
        CHECK(is_well_posed(ex));
        if (ex.target == "brother") ++brother_targets;
    }
    CHECK(brother_targets == 3);
}

TEST_CASE("splits keep diagonal words disjoint") {
    Rng rng(42);
    const auto quads = synth_quadruples(10, 10, rng);
    REQUIRE(quads.size() == 100);
    auto data = make_examples(quads, builtin_templates(), rng);
    split_by_diagonal_words(data, {}, rng);
    const auto train = gold_words(data, Split::Train);
    const auto dev = gold_words(data, Split::Dev);
    const auto test = gold_words(data, Split::Test);
    CHECK_FALSE(train.empty());
    CHECK_FALSE(test.empty());
    CHECK(disjoint(train, test));
    CHECK(disjoint(train, dev));
    CHECK(disjoint(dev, test));
    for (const auto& ex : data) {
        CHECK(ex.split != Split::Unassigned);
        CHECK(is_well_posed(ex));
    }
}

TEST_CASE("degenerate splits") {
    Rng rng(3);
    auto one = make_examples({{"a1", "b1", "c1", "d1"}}, builtin_templates(), rng);
    CHECK_THROWS(split_by_diagonal_words(one, {0.5, 0.0, 0.5}, rng));

    auto two = make_examples({{"a1", "b1", "c1", "d1"}, {"a2", "b2", "c2", "d2"}}, builtin_templates(), rng);
    split_by_diagonal_words(two, {0.5, 0.0, 0.5}, rng);
    const auto train = gold_words(two, Split::Train);
    const auto test = gold_words(two, Split::Test);
    CHECK(train.size() == 4);
    CHECK(test.size() == 4);
    CHECK(disjoint(train, test));

    CHECK_THROWS(split_by_diagonal_words(two, {0.5, 0.6, 0.0}, rng));
}

TEST_CASE("well-posedness") {
    AmbiguousExample ex;
    ex.context = {"the", "cat", "and", "dog"};
    ex.gold_pair = {"cat", "dog"};
    ex.target = "dog";
    CHECK(is_well_posed(ex));
    ex.target = "bird";
    CHECK_FALSE(is_well_posed(ex));
    ex.target = "cat";
    ex.context = {"cat", "and", "dog"};  // first token is never cached
    CHECK_FALSE(is_well_posed(ex));
}

TEST_CASE("vocabulary") {
    const auto [vocab, data] = testing::tiny_dataset();
    std::set<std::string> unique;
    Rng rng(3);
    auto quads = synth_quadruples(3, 4, rng);
    auto examples = make_examples(quads, builtin_templates(), rng);
    for (const auto& ex : examples) {
        unique.insert(ex.context.begin(), ex.context.end());
        unique.insert(ex.target);
    }
    CHECK(vocab.size() == unique.size() + 2);
    CHECK(vocab.id("never-seen") == Vocabulary::kUnknown);
    CHECK(vocab.word(Vocabulary::kPad) == "<pad>");
    for (const auto& ex : data) {
        CHECK(vocab.word(ex.target) == vocab.word(ex.gold[0] == ex.target ? ex.gold[0] : ex.gold[1]));
    }

    testing::TempDir dir("vocab");
    vocab.save(dir / "v.txt");
    const auto back = Vocabulary::load(dir / "v.txt");
    CHECK(back.words() == vocab.words());
}

TEST_CASE("dataset file round trip and determinism") {
    auto build = [] {
        Rng rng(9);
        auto d = make_examples(synth_quadruples(4, 3, rng), builtin_templates(), rng);
        split_by_diagonal_words(d, {}, rng);
        std::ostringstream out;
        write_dataset(out, d);
        return out.str();
    };
    const std::string text = build();
    CHECK(text == build());
    std::istringstream in(text);
    const auto back = read_dataset(in);
    std::ostringstream again;
    write_dataset(again, back);
    CHECK(again.str() == text);

    std::istringstream bad("train\tthe a b\ta\n");
    CHECK_THROWS_AS(read_dataset(bad), ParseError);
}
