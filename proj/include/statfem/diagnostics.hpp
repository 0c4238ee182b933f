#pragma once

#include "statfem/linalg.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace statfem {

/// Per-step filter health record.
struct StepDiagnostics {
    int step = 0;
    double time = 0.0;
    double effective_rank = std::numeric_limits<double>::quiet_NaN();
    double retained_fraction = 1.0;
    double leading_eigenvalue = 0.0;
    double first_discarded = 0.0;  // 0 when nothing was discarded
    bool updated = false;
    std::vector<double> relative_errors;  // per component, when a truth is available
};

/// D_eff = (sum sqrt(s_i))^2 / sum s_i over the retained eigenvalues.
inline double effective_rank(std::span<const double> eigenvalues) {
    double top = 0.0;
    for (double s : eigenvalues) top = std::max(top, s);
    if (!(top > 0.0)) throw std::invalid_argument("effective_rank: spectrum has no positive eigenvalue");
    // Normalised by the largest value so that an equal spectrum gives exactly k.
    double root_sum = 0.0, sum = 0.0;
    for (double s : eigenvalues) {
        const double c = std::max(s, 0.0) / top;
        root_sum += std::sqrt(c);
        sum += c;
    }
    return root_sum * root_sum / sum;
}

inline double effective_rank(const Vector& eigenvalues) {
    return effective_rank(std::span<const double>(eigenvalues.data(), static_cast<std::size_t>(eigenvalues.size())));
}

/// ||estimate - truth|| / ||truth|| in the Euclidean norm.
template <typename A, typename B>
double relative_error(const Eigen::MatrixBase<A>& estimate, const Eigen::MatrixBase<B>& truth) {
    if (estimate.size() != truth.size()) throw std::invalid_argument("relative_error: length mismatch");
    const double denom = truth.norm();
    if (!(denom > 0.0)) throw std::invalid_argument("relative_error: truth has zero norm");
    return (estimate - truth).norm() / denom;
}

struct DivergenceReport {
    bool diverged = false;
    bool non_finite = false;
    std::vector<Index> offending;
    std::string reason;
};

/// Fires when any entry is >= threshold or non-finite.
inline DivergenceReport divergence_check(const Vector& mean, double threshold = 1e4) {
    if (!(threshold > 0.0)) throw std::invalid_argument("divergence_check: threshold must be positive");
    DivergenceReport r;
    for (Index i = 0; i < mean.size(); ++i) {
        const double v = mean(i);
        if (!std::isfinite(v)) {
            r.non_finite = true;
            r.offending.push_back(i);
        } else if (v >= threshold) {
            r.offending.push_back(i);
        }
    }
    r.diverged = !r.offending.empty();
    if (r.non_finite)
        r.reason = "non-finite mean";
    else if (r.diverged)
        r.reason = "mean exceeded threshold " + std::to_string(threshold);
    return r;
}

/// diag(L Lᵀ).
inline Vector variance_field(const Matrix& factor) { return factor.rowwise().squaredNorm(); }

}  // namespace statfem
