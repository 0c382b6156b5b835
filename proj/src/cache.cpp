#include "histalign/cache.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "histalign/serialization.hpp"

namespace histalign::cache {

namespace {

void require_finite(std::span<const double> values, const char* what) {
    if (!numerics::all_finite(values)) {
        throw NumericalError(std::string(what) + ": non-finite input");
    }
}

void validate_memory(const LocalMemory& memory, std::size_t d) {
    for (const auto& e : memory.entries) {
        if (static_cast<std::size_t>(e.hidden.size()) != d) {
            throw std::invalid_argument("memory entry width does not match the query state");
        }
        require_finite(as_span(e.hidden), "memory entry");
    }
}

std::vector<double> similarities(std::span<const double> h_t, const LocalMemory& memory) {
    std::vector<double> sims(memory.size());
    for (std::size_t i = 0; i < memory.size(); ++i) {
        sims[i] = scaled_dot(h_t, as_span(memory.entries[i].hidden), h_t.size());
    }
    return sims;
}

}  // namespace

LocalMemory build_local_cache(const lm::ForwardOutput& forward, std::span<const TokenId> tokens, std::size_t t) {
    // t may be one past the end: predicting a token that is not part of the input yet.
    if (t < 1 || t > tokens.size() + 1) {
        throw std::invalid_argument("build_local_cache: position t out of range");
    }
    if (t > 2 && static_cast<std::size_t>(forward.hidden_states.rows()) < t - 2) {
        throw std::invalid_argument("build_local_cache: forward output shorter than t - 1 states");
    }
    LocalMemory memory;
    if (t <= 2) {
        return memory;
    }
    memory.entries.reserve(t - 2);
    for (std::size_t i = 1; i + 2 <= t; ++i) {
        CacheEntry e;
        e.hidden = forward.hidden_states.row(static_cast<Eigen::Index>(i - 1)).transpose();
        e.target_token = tokens[i];
        e.position = static_cast<std::uint32_t>(i);
        e.origin = Origin::DecoderHistory;
        memory.entries.push_back(std::move(e));
    }
    return memory;
}

LocalMemory build_source_cache(const Matrix& source_hiddens, std::span<const TokenId> source_tokens) {
    if (static_cast<std::size_t>(source_hiddens.rows()) != source_tokens.size()) {
        throw std::invalid_argument("build_source_cache: hidden/token length mismatch");
    }
    LocalMemory memory;
    memory.entries.reserve(source_tokens.size());
    for (std::size_t i = 0; i < source_tokens.size(); ++i) {
        CacheEntry e;
        e.hidden = source_hiddens.row(static_cast<Eigen::Index>(i)).transpose();
        e.target_token = source_tokens[i];
        e.position = static_cast<std::uint32_t>(i + 1);
        e.origin = Origin::SourceSide;
        memory.entries.push_back(std::move(e));
    }
    return memory;
}

double scaled_dot(std::span<const double> h1, std::span<const double> h2, std::size_t d) {
    if (h1.size() != d || h2.size() != d || d == 0) {
        throw std::invalid_argument("scaled_dot: vector length must equal d");
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        dot += h1[i] * h2[i];
    }
    return dot / std::sqrt(static_cast<double>(d));
}

std::vector<double> combined_log_distribution(std::span<const double> token_logits, std::span<const double> h_t,
                                              const LocalMemory& memory) {
    if (token_logits.empty()) {
        throw std::invalid_argument("combined distribution: empty logits");
    }
    require_finite(token_logits, "combined distribution");
    require_finite(h_t, "combined distribution");
    validate_memory(memory, h_t.size());
    const auto sims = similarities(h_t, memory);

    double shift = *std::max_element(token_logits.begin(), token_logits.end());
    for (double s : sims) {
        shift = std::max(shift, s);
    }
    std::vector<double> mass(token_logits.size());
    for (std::size_t w = 0; w < mass.size(); ++w) {
        mass[w] = std::exp(token_logits[w] - shift);
    }
    for (std::size_t i = 0; i < sims.size(); ++i) {
        const TokenId w = memory.entries[i].target_token;
        if (w >= mass.size()) {
            throw std::invalid_argument("memory entry target token out of vocabulary range");
        }
        mass[w] += std::exp(sims[i] - shift);
    }
    double total = 0.0;
    for (double m : mass) {
        total += m;
    }
    const double log_total = std::log(total);
    std::vector<double> logp(mass.size());
    for (std::size_t w = 0; w < mass.size(); ++w) {
        logp[w] = std::log(mass[w]) - log_total;
    }
    return logp;
}

std::vector<double> combined_next_token_distribution(std::span<const double> token_logits,
                                                     std::span<const double> h_t, const LocalMemory& memory) {
    auto p = combined_log_distribution(token_logits, h_t, memory);
    for (double& v : p) {
        v = std::exp(v);
    }
    return p;
}

std::vector<double> cache_only_distribution(std::span<const double> h_t, const LocalMemory& memory,
                                            std::size_t vocab_size) {
    if (memory.empty()) {
        throw std::invalid_argument("cache-only prediction needs a non-empty memory");
    }
    require_finite(h_t, "cache-only distribution");
    validate_memory(memory, h_t.size());
    const auto sims = similarities(h_t, memory);
    const double shift = *std::max_element(sims.begin(), sims.end());
    std::vector<double> p(vocab_size, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < sims.size(); ++i) {
        const TokenId w = memory.entries[i].target_token;
        if (w >= vocab_size) {
            throw std::invalid_argument("memory entry target token out of vocabulary range");
        }
        const double e = std::exp(sims[i] - shift);
        p[w] += e;
        total += e;
    }
    for (double& v : p) {
        v /= total;
    }
    return p;
}

double combined_log_prob(std::span<const double> token_logits, std::span<const double> h_t,
                         const LocalMemory& memory, TokenId target, CombinedLogProbGrad* grad) {
    if (target >= token_logits.size()) {
        throw std::invalid_argument("target token out of vocabulary range");
    }
    require_finite(token_logits, "combined_log_prob");
    require_finite(h_t, "combined_log_prob");
    validate_memory(memory, h_t.size());
    const std::size_t vocab = token_logits.size();
    const std::size_t d = h_t.size();
    const auto sims = similarities(h_t, memory);

    double shift = *std::max_element(token_logits.begin(), token_logits.end());
    for (double s : sims) {
        shift = std::max(shift, s);
    }
    double total = 0.0;
    std::vector<double> e_logits(vocab);
    for (std::size_t w = 0; w < vocab; ++w) {
        e_logits[w] = std::exp(token_logits[w] - shift);
        total += e_logits[w];
    }
    std::vector<double> e_sims(sims.size());
    double target_mass = e_logits[target];
    for (std::size_t i = 0; i < sims.size(); ++i) {
        e_sims[i] = std::exp(sims[i] - shift);
        total += e_sims[i];
        if (memory.entries[i].target_token == target) {
            target_mass += e_sims[i];
        }
    }
    const double value = std::log(target_mass) - std::log(total);

    if (grad != nullptr) {
        // d log P / dz_k = [k in target set] e_k / target_mass - e_k / total
        grad->d_logits.resize(static_cast<Eigen::Index>(vocab));
        for (std::size_t w = 0; w < vocab; ++w) {
            grad->d_logits(static_cast<Eigen::Index>(w)) = -e_logits[w] / total;
        }
        grad->d_logits(target) += e_logits[target] / target_mass;
        grad->d_query = Vector::Zero(static_cast<Eigen::Index>(d));
        grad->d_entries = Matrix::Zero(static_cast<Eigen::Index>(memory.size()), static_cast<Eigen::Index>(d));
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
        const Eigen::Map<const Eigen::RowVectorXd> query(h_t.data(), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < sims.size(); ++i) {
            double d_sim = -e_sims[i] / total;
            if (memory.entries[i].target_token == target) {
                d_sim += e_sims[i] / target_mass;
            }
            grad->d_query += (d_sim * inv_sqrt_d) * memory.entries[i].hidden;
            grad->d_entries.row(static_cast<Eigen::Index>(i)) = (d_sim * inv_sqrt_d) * query;
        }
    }
    return value;
}

void write_memory(std::ostream& out, const LocalMemory& memory, std::uint32_t hidden_size) {
    validate_memory(memory, hidden_size);
    io::write_magic(out, "HMEM");
    io::write_u32(out, kMemoryDumpVersion);
    io::write_u32(out, hidden_size);
    io::write_u32(out, static_cast<std::uint32_t>(memory.size()));
    for (const auto& e : memory.entries) {
        io::write_u32(out, e.position);
        io::write_u32(out, e.target_token);
        io::write_u8(out, static_cast<std::uint8_t>(e.origin));
        for (Eigen::Index k = 0; k < e.hidden.size(); ++k) {
            io::write_f64(out, e.hidden(k));
        }
    }
}

LocalMemory read_memory(std::istream& in) {
    io::expect_magic(in, "HMEM");
    const std::uint32_t version = io::read_u32(in);
    if (version != kMemoryDumpVersion) {
        throw io::FormatError("unsupported memory dump version " + std::to_string(version));
    }
    const std::uint32_t d = io::read_u32(in);
    const std::uint32_t count = io::read_u32(in);
    LocalMemory memory;
    for (std::uint32_t i = 0; i < count; ++i) {
        CacheEntry e;
        e.position = io::read_u32(in);
        e.target_token = io::read_u32(in);
        const std::uint8_t origin = io::read_u8(in);
        if (origin > 1) {
            throw io::FormatError("unknown memory entry origin");
        }
        e.origin = static_cast<Origin>(origin);
        e.hidden.resize(d);
        for (std::uint32_t k = 0; k < d; ++k) {
            e.hidden(k) = io::read_f64(in);
        }
        memory.entries.push_back(std::move(e));
    }
    return memory;
}

void save_memory(const std::filesystem::path& path, const LocalMemory& memory, std::uint32_t hidden_size) {
    std::ostringstream out(std::ios::binary);
    write_memory(out, memory, hidden_size);
    io::atomic_write(path, out.str());
}

LocalMemory load_memory(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::invalid_argument("cannot open memory dump " + path.string());
    }
    return read_memory(in);
}

}  // namespace histalign::cache
