#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "histalign/ambigen.hpp"
#include "histalign/cache.hpp"
#include "histalign/model.hpp"

namespace testing {

using histalign::Matrix;
using histalign::TokenId;
using histalign::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

inline histalign::cache::LocalMemory random_memory(std::mt19937_64& rng, std::size_t size, std::size_t d,
                                                   std::uint32_t vocab) {
    std::uniform_int_distribution<std::uint32_t> tok(0, vocab - 1);
    histalign::cache::LocalMemory mem;
    for (std::size_t i = 0; i < size; ++i) {
        histalign::cache::CacheEntry e;
        e.hidden = random_matrix(rng, static_cast<Eigen::Index>(d), 1);
        e.target_token = tok(rng);
        e.position = static_cast<std::uint32_t>(i + 1);
        mem.entries.push_back(std::move(e));
    }
    return mem;
}

inline histalign::lm::MiniLM small_model(std::uint32_t vocab, std::uint32_t d = 8, std::uint32_t layers = 2,
                                         std::uint32_t context = 32, std::uint64_t seed = 1) {
    return histalign::lm::init_model({vocab, d, layers, 2, context, seed});
}

/// A small tokenized Ambiguous dataset (two relations) with its vocabulary.
inline std::pair<histalign::ambigen::Vocabulary, std::vector<histalign::ambigen::TokenizedExample>> tiny_dataset(
    std::uint64_t seed = 3, std::size_t relations = 3, std::size_t per_relation = 4) {
    histalign::ambigen::Rng rng(seed);
    auto quads = histalign::ambigen::synth_quadruples(relations, per_relation, rng);
    auto examples = histalign::ambigen::make_examples(quads, histalign::ambigen::builtin_templates(), rng);
    histalign::ambigen::split_by_diagonal_words(examples, {0.34, 0.33, 0.33}, rng);
    return histalign::ambigen::build_vocab_and_tokenize(examples);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("histalign_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Rank by Gaussian elimination with full pivoting; independent of any SVD.
inline std::size_t row_reduction_rank(Matrix a, double rel_tol) {
    const Eigen::Index rows = a.rows(), cols = a.cols();
    const double scale = a.cwiseAbs().maxCoeff();
    if (scale == 0.0) {
        return 0;
    }
    std::size_t rank = 0;
    for (Eigen::Index step = 0; step < std::min(rows, cols); ++step) {
        Eigen::Index pr = step, pc = step;
        double best = 0.0;
        for (Eigen::Index r = step; r < rows; ++r) {
            for (Eigen::Index c = step; c < cols; ++c) {
                if (std::abs(a(r, c)) > best) {
                    best = std::abs(a(r, c));
                    pr = r;
                    pc = c;
                }
            }
        }
        if (best <= rel_tol * scale) {
            break;
        }
        a.row(step).swap(a.row(pr));
        a.col(step).swap(a.col(pc));
        for (Eigen::Index r = step + 1; r < rows; ++r) {
            const double f = a(r, step) / a(step, step);
            a.row(r) -= f * a.row(step);
        }
        ++rank;
    }
    return rank;
}

}  // namespace testing
