#pragma once

#include <cstdint>
#include <vector>

#include "histalign/model.hpp"
#include "histalign/numerics.hpp"
#include "histalign/objectives.hpp"

namespace histalign::gradcheck {

struct Options {
    objectives::Objective objective = objectives::Objective::Xe;
    std::uint32_t hidden_size = 8;
    std::uint32_t vocab_size = 20;
    std::uint32_t num_layers = 2;
    std::uint32_t num_heads = 2;
    std::size_t length = 16;
    std::uint64_t seed = 0;
    double param_std = 0.3;     // spread of the random evaluation point
    double eps = 1e-5;
    double alpha = 1.0;
    double lambda = 0.05;
    double kink_margin = 1e-3;  // minimum |hinge argument| and cosine gap at an accepted point
    std::size_t max_attempts = 64;
};

/// A model and token sequence at which the loss is differentiable.
struct Point {
    lm::MiniLM model;
    std::vector<TokenId> tokens;
    std::vector<bool> mask;
    std::uint64_t seed = 0;  // seed of the accepted draw
};

struct Result {
    numerics::GradCheckReport report;
    objectives::LossBreakdown loss;
    std::uint64_t seed = 0;
    std::size_t parameters = 0;
};

/// Smallest distance of any hinge argument from zero and of any pair of
/// distinct-token cosines from a tie, over every supervised position.
double kink_distance(const Point& point, double lambda);

/// Draws points from `options.seed` onwards until one is kink-free with
/// non-empty memories (and, for histalign, positive entries).
Point sample_point(const Options& options);

double loss_at(const Point& point, const objectives::ObjectiveConfig& config);
std::vector<double> analytic_gradient(const Point& point, const objectives::ObjectiveConfig& config);

/// Central-difference check over every model parameter.
Result check(const Options& options);

}  // namespace histalign::gradcheck
