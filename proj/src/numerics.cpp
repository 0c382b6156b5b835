#include "histalign/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace histalign::numerics {

std::size_t Tensor::element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor Tensor::from_matrix(const Matrix& m) {
    Tensor t;
    t.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
    t.data.assign(m.data(), m.data() + m.size());
    return t;
}

Matrix Tensor::to_matrix() const {
    if (shape.size() != 2 || !valid()) {
        throw std::invalid_argument("tensor is not a well-formed rank-2 tensor");
    }
    Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
    std::copy(data.begin(), data.end(), m.data());
    return m;
}

bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace {

void require_usable(std::span<const double> values, const char* what) {
    if (values.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty input");
    }
    if (!all_finite(values)) {
        throw NumericalError(std::string(what) + ": non-finite input");
    }
}

}  // namespace

void stable_softmax_inplace(std::span<double> values) {
    require_usable(values, "stable_softmax");
    const double shift = *std::max_element(values.begin(), values.end());
    double total = 0.0;
    for (double& v : values) {
        v = std::exp(v - shift);
        total += v;
    }
    for (double& v : values) {
        v /= total;
    }
}

std::vector<double> stable_softmax(std::span<const double> logits) {
    std::vector<double> out(logits.begin(), logits.end());
    stable_softmax_inplace(out);
    return out;
}

double log_sum_exp(std::span<const double> values) {
    require_usable(values, "log_sum_exp");
    const double shift = *std::max_element(values.begin(), values.end());
    double total = 0.0;
    for (double v : values) {
        total += std::exp(v - shift);
    }
    return shift + std::log(total);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero-norm vector");
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

RankEstimate numerical_rank(const Matrix& m, double rel_tol) {
    if (!(rel_tol > 0.0 && rel_tol < 1.0)) {
        throw std::invalid_argument("numerical_rank: rel_tol must lie in (0, 1)");
    }
    if (!all_finite({m.data(), static_cast<std::size_t>(m.size())})) {
        throw NumericalError("numerical_rank: non-finite matrix entry");
    }
    RankEstimate est;
    est.rel_tol = rel_tol;
    if (m.size() == 0) {
        return est;
    }
    // Jacobi is the slow but accurate choice; probe matrices are a few hundred wide.
    const Eigen::MatrixXd dense = m;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(dense);
    const Eigen::VectorXd& sv = svd.singularValues();
    est.singular_values.assign(sv.data(), sv.data() + sv.size());
    if (est.singular_values.empty() || est.singular_values.front() == 0.0) {
        return est;
    }
    const double cutoff = rel_tol * est.singular_values.front();
    est.rank = static_cast<std::size_t>(std::count_if(est.singular_values.begin(),
                                                      est.singular_values.end(),
                                                      [cutoff](double s) { return s > cutoff; }));
    return est;
}

GradCheckReport finite_diff_grad_check(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> analytic_grad,
                                       std::span<const double> x, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) {
        throw std::invalid_argument("finite_diff_grad_check: eps must lie in [1e-7, 1e-3]");
    }
    if (analytic_grad.size() != x.size()) {
        throw std::invalid_argument("finite_diff_grad_check: gradient length mismatch");
    }
    GradCheckReport report;
    std::vector<double> probe(x.begin(), x.end());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + eps;
        const double up = f(probe);
        probe[i] = saved - eps;
        const double down = f(probe);
        probe[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericalError("finite_diff_grad_check: objective returned a non-finite value");
        }
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = analytic_grad[i];
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double rel = std::abs(analytic - numeric) / denom;
        if (i == 0 || rel > report.max_rel_error) {
            report = {rel, i, analytic, numeric};
        }
    }
    return report;
}

}  // namespace histalign::numerics
