#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "histalign/cache.hpp"

namespace testing {

// Direct, unshifted evaluation of the mixture; fine for moderate inputs.
inline std::vector<double> brute_combined(const std::vector<double>& logits, const histalign::Vector& h,
                                          const histalign::cache::LocalMemory& mem) {
    const double d = static_cast<double>(h.size());
    std::vector<double> mass(logits.size());
    double z = 0.0;
    for (std::size_t w = 0; w < logits.size(); ++w) {
        mass[w] = std::exp(logits[w]);
        z += mass[w];
    }
    for (const auto& e : mem.entries) {
        double dot = 0.0;
        for (Eigen::Index k = 0; k < h.size(); ++k) dot += h[k] * e.hidden[k];
        const double s = std::exp(dot / std::sqrt(d));
        mass[e.target_token] += s;
        z += s;
    }
    for (double& m : mass) m /= z;
    return mass;
}

// Ranking and pair sum computed from scratch.
inline double brute_margin(const histalign::Vector& h, const histalign::cache::LocalMemory& mem, histalign::TokenId x,
                           const histalign::Matrix& emb, double lambda) {
    const std::size_t n = mem.size();
    std::vector<double> cosv(n);
    for (std::size_t i = 0; i < n; ++i) {
        const histalign::TokenId w = mem.entries[i].target_token;
        if (w == x) {
            cosv[i] = 1.0;
        } else {
            const double dot = emb.row(x).dot(emb.row(w));
            cosv[i] = std::clamp(dot / (emb.row(x).norm() * emb.row(w).norm()), -1.0, 1.0);
        }
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return cosv[a] > cosv[b]; });
    const double d = static_cast<double>(h.size());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mem.entries[order[i]].target_token != x) continue;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (mem.entries[order[j]].target_token == x) continue;
            const double si = h.dot(mem.entries[order[i]].hidden) / std::sqrt(d);
            const double sj = h.dot(mem.entries[order[j]].hidden) / std::sqrt(d);
            total += std::max(0.0, sj - si + static_cast<double>(j - i) * lambda);
        }
    }
    return total;
}

}  // namespace testing
