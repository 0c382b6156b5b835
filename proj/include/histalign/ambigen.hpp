#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "histalign/model.hpp"

namespace histalign::ambigen {

using Rng = std::mt19937_64;

/// Input that fails validation; carries the 1-based line number when known.
class ParseError : public std::invalid_argument {
public:
    ParseError(const std::string& message, std::size_t line)
        : std::invalid_argument(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
          line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

/// a : b :: c : d
struct AnalogyQuadruple {
    std::string a, b, c, d;
    bool operator==(const AnalogyQuadruple&) const = default;
};

struct DiagonalPair {
    std::string w1, w2;
    std::array<std::string, 2> confusables;
};

/// For (a, b, c, d) the diagonals are (a, d) and (b, c); each lists the other pair as confusables.
std::array<DiagonalPair, 2> diagonal_pairs(const AnalogyQuadruple& q);

enum class Split { Unassigned, Train, Dev, Test };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct AmbiguousExample {
    std::vector<std::string> context;
    std::string target;
    std::pair<std::string, std::string> gold_pair;
    std::array<std::string, 2> confusables;  // not persisted in dataset files
    Split split = Split::Unassigned;
};

/// Google analogy text format: ":"-prefixed section headers, otherwise four words per line.
std::vector<AnalogyQuadruple> parse_analogy_stream(std::istream& in);
std::vector<AnalogyQuadruple> parse_analogy_file(const std::filesystem::path& path);

/// Words "r{k}a{i} r{k}b{i} r{k}a{j} r{k}b{j}", drawing index pairs (i, j) from a
/// per-relation pool of about 0.7·n_per_relation word pairs so words recur
/// across quadruples of the same relation.
std::vector<AnalogyQuadruple> synth_quadruples(std::size_t n_relations, std::size_t n_per_relation, Rng& rng);

/// A context template with exactly two word slots, {X} and {Y}, neither in
/// first position. The target follows the last template word.
class Template {
public:
    explicit Template(std::string_view text);

    const std::string& text() const { return text_; }
    std::vector<std::string> fill(const std::string& x, const std::string& y) const;

private:
    std::string text_;
    std::vector<std::string> words_;
};

std::vector<std::string> builtin_templates();
std::vector<std::string> read_templates(const std::filesystem::path& path);

/// Every diagonal pair × every template × both targets; slot order is drawn per example.
std::vector<AmbiguousExample> make_examples(const std::vector<AnalogyQuadruple>& quadruples,
                                            const std::vector<std::string>& templates, Rng& rng);

struct SplitRatios {
    double train = 0.8;
    double dev = 0.1;
    double test = 0.1;
};

/// Assigns splits so that no gold word (or confusable) is shared between splits.
/// Words connected through examples form indivisible groups.
void split_by_diagonal_words(std::vector<AmbiguousExample>& dataset, const SplitRatios& ratios, Rng& rng);

/// Both gold words sit in the context at a position the local cache can
/// return (anywhere but the first token), and the target is one of them.
bool is_well_posed(const AmbiguousExample& example);

class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnknown = 1;

    Vocabulary();
    explicit Vocabulary(std::vector<std::string> words);

    TokenId add(const std::string& word);
    TokenId id(const std::string& word) const;  // kUnknown when absent
    bool contains(const std::string& word) const { return index_.count(word) > 0; }
    const std::string& word(TokenId id) const;
    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }

    std::vector<TokenId> encode(const std::vector<std::string>& words) const;
    std::vector<std::string> decode(const std::vector<TokenId>& ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

struct TokenizedExample {
    std::vector<TokenId> context;
    TokenId target = 0;
    std::array<TokenId, 2> gold{};
    Split split = Split::Unassigned;
};

/// Vocabulary in first-appearance order over (context, target, gold words).
std::pair<Vocabulary, std::vector<TokenizedExample>> build_vocab_and_tokenize(
    const std::vector<AmbiguousExample>& dataset);

std::vector<TokenizedExample> tokenize(const Vocabulary& vocab, const std::vector<AmbiguousExample>& dataset);

std::vector<TokenizedExample> select_split(const std::vector<TokenizedExample>& examples, Split split);

// Dataset file: one example per line, tab-separated
// split, space-joined context, target, gold word 1, gold word 2.
void write_dataset(std::ostream& out, const std::vector<AmbiguousExample>& dataset);
std::vector<AmbiguousExample> read_dataset(std::istream& in);
std::vector<AmbiguousExample> load_dataset(const std::filesystem::path& path);

}  // namespace histalign::ambigen
