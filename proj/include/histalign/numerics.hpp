#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace histalign {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Raised when a computation produces or receives non-finite values.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::span<const double> row_span(const Matrix& m, Eigen::Index row) {
    return {m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<double> row_span(Matrix& m, Eigen::Index row) {
    return {m.data() + row * m.cols(), static_cast<std::size_t>(m.cols())};
}

inline std::span<const double> as_span(const Vector& v) {
    return {v.data(), static_cast<std::size_t>(v.size())};
}

namespace numerics {

/// Dense row-major tensor of doubles; the on-disk unit of every checkpoint.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t element_count() const;
    bool valid() const { return element_count() == data.size(); }

    static Tensor from_matrix(const Matrix& m);
    Matrix to_matrix() const;
};

struct RankEstimate {
    std::size_t rank = 0;
    std::vector<double> singular_values;  // descending
    double rel_tol = 1e-6;
};

std::vector<double> stable_softmax(std::span<const double> logits);

/// In-place variant used on hot paths; same contract as stable_softmax.
void stable_softmax_inplace(std::span<double> values);

double log_sum_exp(std::span<const double> values);

/// Cosine similarity clamped to [-1, 1]. Throws on a zero-norm argument.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Counts singular values strictly above rel_tol times the largest one.
RankEstimate numerical_rank(const Matrix& m, double rel_tol = 1e-6);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Compares `analytic_grad` with central differences of `f` around `x`,
/// coordinate by coordinate. The relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
GradCheckReport finite_diff_grad_check(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> analytic_grad,
                                       std::span<const double> x, double eps);

bool all_finite(std::span<const double> values);

}  // namespace numerics
}  // namespace histalign
