#include "histalign/ambigen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "histalign/serialization.hpp"

namespace histalign::ambigen {

namespace {

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    std::string w;
    while (in >> w) {
        words.push_back(w);
    }
    return words;
}

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i > 0) {
            out += ' ';
        }
        out += words[i];
    }
    return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab - start));
        if (tab == std::string::npos) {
            break;
        }
        start = tab + 1;
    }
    return fields;
}

// Union-find over word indices.
class WordGroups {
public:
    std::size_t node(const std::string& word) {
        auto [it, inserted] = index_.try_emplace(word, parent_.size());
        if (inserted) {
            parent_.push_back(parent_.size());
        }
        return it->second;
    }
    std::size_t find(std::size_t x) {
        while (parent_[x] != x) {
            parent_[x] = parent_[parent_[x]];
            x = parent_[x];
        }
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent_[std::max(a, b)] = std::min(a, b);
        }
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::size_t> parent_;
};

}  // namespace

std::array<DiagonalPair, 2> diagonal_pairs(const AnalogyQuadruple& q) {
    return {DiagonalPair{q.a, q.d, {q.b, q.c}}, DiagonalPair{q.b, q.c, {q.a, q.d}}};
}

std::string_view to_string(Split split) {
    switch (split) {
        case Split::Unassigned: return "unassigned";
        case Split::Train: return "train";
        case Split::Dev: return "dev";
        case Split::Test: return "test";
    }
    return "unassigned";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::Train;
    if (name == "dev") return Split::Dev;
    if (name == "test") return Split::Test;
    if (name == "unassigned") return Split::Unassigned;
    throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::vector<AnalogyQuadruple> parse_analogy_stream(std::istream& in) {
    std::vector<AnalogyQuadruple> quadruples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        const auto words = split_words(line);
        if (words.empty() || words.front().front() == ':') {
            continue;
        }
        if (words.size() != 4) {
            throw ParseError("expected 4 words, found " + std::to_string(words.size()), line_no);
        }
        quadruples.push_back({lowercase(words[0]), lowercase(words[1]), lowercase(words[2]), lowercase(words[3])});
    }
    return quadruples;
}

std::vector<AnalogyQuadruple> parse_analogy_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open analogy file " + path.string());
    }
    return parse_analogy_stream(in);
}

std::vector<AnalogyQuadruple> synth_quadruples(std::size_t n_relations, std::size_t n_per_relation, Rng& rng) {
    if (n_relations == 0 || n_per_relation == 0) {
        throw std::invalid_argument("synth_quadruples: counts must be positive");
    }
    std::size_t pool = static_cast<std::size_t>(std::ceil(0.7 * static_cast<double>(n_per_relation)));
    pool = std::max<std::size_t>(pool, 2);
    while (pool * (pool - 1) / 2 < n_per_relation) {
        ++pool;
    }
    std::vector<AnalogyQuadruple> out;
    out.reserve(n_relations * n_per_relation);
    for (std::size_t k = 0; k < n_relations; ++k) {
        std::vector<std::pair<std::size_t, std::size_t>> combos;
        for (std::size_t i = 0; i < pool; ++i) {
            for (std::size_t j = i + 1; j < pool; ++j) {
                combos.emplace_back(i, j);
            }
        }
        std::shuffle(combos.begin(), combos.end(), rng);
        const std::string tag = "r" + std::to_string(k);
        for (std::size_t q = 0; q < n_per_relation; ++q) {
            const auto [i, j] = combos[q];
            const std::string si = std::to_string(i);
            const std::string sj = std::to_string(j);
            out.push_back({tag + "a" + si, tag + "b" + si, tag + "a" + sj, tag + "b" + sj});
        }
    }
    return out;
}

Template::Template(std::string_view text) : text_(text), words_(split_words(text)) {
    const auto x_count = std::count(words_.begin(), words_.end(), "{X}");
    const auto y_count = std::count(words_.begin(), words_.end(), "{Y}");
    const auto slot_like = std::count_if(words_.begin(), words_.end(), [](const std::string& w) {
        return w.size() >= 2 && w.front() == '{' && w.back() == '}';
    });
    if (x_count != 1 || y_count != 1 || slot_like != 2) {
        throw std::invalid_argument("template must contain exactly two slots {X} and {Y}: \"" + text_ + "\"");
    }
    if (words_.front() == "{X}" || words_.front() == "{Y}") {
        throw std::invalid_argument("template slot cannot be the first word (its word would never enter the cache): \"" +
                                    text_ + "\"");
    }
}

std::vector<std::string> Template::fill(const std::string& x, const std::string& y) const {
    std::vector<std::string> out = words_;
    for (auto& w : out) {
        if (w == "{X}") {
            w = x;
        } else if (w == "{Y}") {
            w = y;
        }
    }
    return out;
}

std::vector<std::string> builtin_templates() {
    return {
        "the {X} and the {Y} are my favorites , and i especially love the",
        "after debating whether to bow to the {X} or the {Y} , the jester decided to bow to the",
        "my friend could not choose between the {X} and the {Y} , so in the end she picked the",
        "we talked about the {X} and the {Y} all night , but mostly about the",
        "i saw the {X} next to the {Y} today , and the one i will remember is the",
        "between the {X} and the {Y} , i would rather spend time with the",
    };
}

std::vector<std::string> read_templates(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open template file " + path.string());
    }
    std::vector<std::string> templates;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line.front() == '#') {
            continue;
        }
        try {
            Template check(line);
        } catch (const std::invalid_argument& e) {
            throw ParseError(e.what(), line_no);
        }
        templates.push_back(line);
    }
    if (templates.empty()) {
        throw std::invalid_argument("template file " + path.string() + " has no templates");
    }
    return templates;
}

std::vector<AmbiguousExample> make_examples(const std::vector<AnalogyQuadruple>& quadruples,
                                            const std::vector<std::string>& templates, Rng& rng) {
    std::vector<Template> parsed;
    parsed.reserve(templates.size());
    for (const auto& t : templates) {
        parsed.emplace_back(t);
    }
    std::vector<AmbiguousExample> out;
    out.reserve(quadruples.size() * 2 * parsed.size() * 2);
    for (const auto& q : quadruples) {
        for (const auto& pair : diagonal_pairs(q)) {
            for (const auto& tpl : parsed) {
                for (const std::string* target : {&pair.w1, &pair.w2}) {
                    const bool swap = (rng() & 1U) != 0;
                    AmbiguousExample ex;
                    ex.context = swap ? tpl.fill(pair.w2, pair.w1) : tpl.fill(pair.w1, pair.w2);
                    ex.target = *target;
                    ex.gold_pair = {pair.w1, pair.w2};
                    ex.confusables = pair.confusables;
                    out.push_back(std::move(ex));
                }
            }
        }
    }
    return out;
}

void split_by_diagonal_words(std::vector<AmbiguousExample>& dataset, const SplitRatios& ratios, Rng& rng) {
    const std::array<double, 3> weights{ratios.train, ratios.dev, ratios.test};
    const std::array<Split, 3> labels{Split::Train, Split::Dev, Split::Test};
    if (std::any_of(weights.begin(), weights.end(), [](double r) { return r < 0.0; }) ||
        std::abs(weights[0] + weights[1] + weights[2] - 1.0) > 1e-9) {
        throw std::invalid_argument("split ratios must be non-negative and sum to 1");
    }

    WordGroups groups;
    for (const auto& ex : dataset) {
        const std::size_t root = groups.node(ex.gold_pair.first);
        groups.unite(root, groups.node(ex.gold_pair.second));
        for (const auto& c : ex.confusables) {
            if (!c.empty()) {
                groups.unite(root, groups.node(c));
            }
        }
    }
    // Components in first-appearance order, then shuffled.
    std::map<std::size_t, std::vector<std::size_t>> members;
    std::vector<std::size_t> component_order;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        const std::size_t root = groups.find(groups.node(dataset[i].gold_pair.first));
        auto [it, inserted] = members.try_emplace(root);
        if (inserted) {
            component_order.push_back(root);
        }
        it->second.push_back(i);
    }
    std::shuffle(component_order.begin(), component_order.end(), rng);

    const std::size_t needed = static_cast<std::size_t>(std::count_if(weights.begin(), weights.end(), [](double r) { return r > 0.0; }));
    if (component_order.size() < std::max<std::size_t>(needed, 2)) {
        throw std::invalid_argument("dataset too small: " + std::to_string(component_order.size()) +
                                    " disjoint word group(s) cannot fill the requested splits");
    }

    const double total = static_cast<double>(dataset.size());
    std::array<double, 3> assigned{0.0, 0.0, 0.0};
    auto assign = [&](std::size_t root, std::size_t s) {
        for (std::size_t idx : members[root]) {
            dataset[idx].split = labels[s];
        }
        assigned[s] += static_cast<double>(members[root].size());
    };
    std::size_t next = 0;
    // Seed every requested split with one group, then fill by largest deficit.
    for (std::size_t s = 0; s < 3; ++s) {
        if (weights[s] > 0.0) {
            assign(component_order[next++], s);
        }
    }
    for (; next < component_order.size(); ++next) {
        std::size_t best = 3;
        double best_deficit = 0.0;
        for (std::size_t s = 0; s < 3; ++s) {
            if (weights[s] <= 0.0) {
                continue;
            }
            const double deficit = weights[s] * total - assigned[s];
            if (best == 3 || deficit > best_deficit) {
                best = s;
                best_deficit = deficit;
            }
        }
        assign(component_order[next], best);
    }
}

bool is_well_posed(const AmbiguousExample& example) {
    if (example.target != example.gold_pair.first && example.target != example.gold_pair.second) {
        return false;
    }
    auto retrievable = [&](const std::string& w) {
        return example.context.size() > 1 && std::find(example.context.begin() + 1, example.context.end(), w) !=
                                                 example.context.end();
    };
    return retrievable(example.gold_pair.first) && retrievable(example.gold_pair.second);
}

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}

Vocabulary::Vocabulary(std::vector<std::string> words) {
    if (words.size() < 2 || words[kPad] != "<pad>" || words[kUnknown] != "<unk>") {
        throw std::invalid_argument("vocabulary must start with <pad> and <unk>");
    }
    for (auto& w : words) {
        if (index_.count(w) > 0) {
            throw std::invalid_argument("duplicate vocabulary word '" + w + "'");
        }
        index_.emplace(w, static_cast<TokenId>(words_.size()));
        words_.push_back(std::move(w));
    }
}

TokenId Vocabulary::add(const std::string& word) {
    auto [it, inserted] = index_.try_emplace(word, static_cast<TokenId>(words_.size()));
    if (inserted) {
        words_.push_back(word);
    }
    return it->second;
}

TokenId Vocabulary::id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
    if (id >= words_.size()) {
        throw std::invalid_argument("token id " + std::to_string(id) + " out of vocabulary range");
    }
    return words_[id];
}

std::vector<TokenId> Vocabulary::encode(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) {
        ids.push_back(id(w));
    }
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<TokenId>& ids) const {
    std::vector<std::string> words;
    words.reserve(ids.size());
    for (TokenId t : ids) {
        words.push_back(word(t));
    }
    return words;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::string bytes;
    for (const auto& w : words_) {
        bytes += w;
        bytes += '\n';
    }
    io::atomic_write(path, bytes);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open vocabulary " + path.string());
    }
    std::vector<std::string> words;
    std::string line;
    while (std::getline(in, line)) {
        words.push_back(line);
    }
    return Vocabulary(std::move(words));
}

std::vector<TokenizedExample> tokenize(const Vocabulary& vocab, const std::vector<AmbiguousExample>& dataset) {
    std::vector<TokenizedExample> out;
    out.reserve(dataset.size());
    for (const auto& ex : dataset) {
        TokenizedExample t;
        t.context = vocab.encode(ex.context);
        t.target = vocab.id(ex.target);
        t.gold = {vocab.id(ex.gold_pair.first), vocab.id(ex.gold_pair.second)};
        t.split = ex.split;
        out.push_back(std::move(t));
    }
    return out;
}

std::pair<Vocabulary, std::vector<TokenizedExample>> build_vocab_and_tokenize(
    const std::vector<AmbiguousExample>& dataset) {
    if (dataset.empty()) {
        throw std::invalid_argument("cannot build a vocabulary from an empty dataset");
    }
    Vocabulary vocab;
    for (const auto& ex : dataset) {
        for (const auto& w : ex.context) {
            vocab.add(w);
        }
        vocab.add(ex.target);
        vocab.add(ex.gold_pair.first);
        vocab.add(ex.gold_pair.second);
    }
    auto tokenized = tokenize(vocab, dataset);
    return {std::move(vocab), std::move(tokenized)};
}

std::vector<TokenizedExample> select_split(const std::vector<TokenizedExample>& examples, Split split) {
    std::vector<TokenizedExample> out;
    std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
                 [split](const TokenizedExample& e) { return e.split == split; });
    return out;
}

void write_dataset(std::ostream& out, const std::vector<AmbiguousExample>& dataset) {
    for (const auto& ex : dataset) {
        out << to_string(ex.split) << '\t' << join(ex.context) << '\t' << ex.target << '\t' << ex.gold_pair.first
            << '\t' << ex.gold_pair.second << '\n';
    }
}

std::vector<AmbiguousExample> read_dataset(std::istream& in) {
    std::vector<AmbiguousExample> dataset;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto fields = split_tabs(line);
        if (fields.size() != 5) {
            throw ParseError("expected 5 tab-separated fields, found " + std::to_string(fields.size()), line_no);
        }
        AmbiguousExample ex;
        try {
            ex.split = parse_split(fields[0]);
        } catch (const std::invalid_argument& e) {
            throw ParseError(e.what(), line_no);
        }
        ex.context = split_words(fields[1]);
        ex.target = fields[2];
        ex.gold_pair = {fields[3], fields[4]};
        if (ex.context.empty() || ex.target.empty() || ex.gold_pair.first.empty() || ex.gold_pair.second.empty()) {
            throw ParseError("empty field", line_no);
        }
        dataset.push_back(std::move(ex));
    }
    return dataset;
}

std::vector<AmbiguousExample> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open dataset " + path.string());
    }
    return read_dataset(in);
}

}  // namespace histalign::ambigen
