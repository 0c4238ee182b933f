#pragma once

#include "statfem/linalg.hpp"
#include "statfem/mesh.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace statfem {

/// Squared-exponential kernel hyperparameters: amplitude rho, length-scale ell.
struct KernelHyper {
    double rho = 1.0;
    double length = 1.0;

    void validate() const {
        if (!(rho > 0.0) || !(length > 0.0))
            throw std::invalid_argument("KernelHyper: rho and length must be positive");
    }
};

/// GP model-error configuration over a multi-component state.
struct ForcingSpec {
    KernelHyper hyper;
    std::vector<bool> forced;  // one flag per state component
    Index rank = 1;            // columns per forced component

    int components() const { return static_cast<int>(forced.size()); }
    int forced_count() const {
        int c = 0;
        for (bool f : forced) c += f ? 1 : 0;
        return c;
    }
};

/// Low-rank square root of the block-diagonal model-error covariance.
///
/// `unit_factor` is the root at rho = 1; the root at amplitude rho is
/// rho * unit_factor, since the kernel is homogeneous of degree two in rho.
struct LowRankRoot {
    Matrix unit_factor;
    double rho = 1.0;
    Vector kernel_eigenvalues;  // leading eigenvalues of K at the configured rho

    Matrix factor() const { return rho * unit_factor; }
    Index rows() const { return unit_factor.rows(); }
    Index cols() const { return unit_factor.cols(); }
};

inline double squared_exponential(const Point& a, const Point& b, const KernelHyper& hyper) {
    const double dx = a[0] - b[0], dy = a[1] - b[1];
    return hyper.rho * hyper.rho * std::exp(-(dx * dx + dy * dy) / (2.0 * hyper.length * hyper.length));
}

inline Matrix kernel_matrix(const Mesh& mesh, const KernelHyper& hyper) {
    hyper.validate();
    const Index n = mesh.num_nodes();
    Matrix K(n, n);
    for (Index j = 0; j < n; ++j) {
        K(j, j) = hyper.rho * hyper.rho;
        for (Index i = j + 1; i < n; ++i) K(i, j) = K(j, i) = squared_exponential(mesh.nodes[i], mesh.nodes[j], hyper);
    }
    return K;
}

/// Matrix-free kernel action, used when the dense kernel would not fit.
inline Vector kernel_apply(const Mesh& mesh, const KernelHyper& hyper, const Vector& x) {
    const Index n = mesh.num_nodes();
    Vector y = Vector::Zero(n);
    const double inv = 1.0 / (2.0 * hyper.length * hyper.length);
    const double amp = hyper.rho * hyper.rho;
    for (Index i = 0; i < n; ++i) {
        const Point& pi = mesh.nodes[i];
        double acc = 0.0;
        for (Index j = 0; j < n; ++j) {
            const double dx = pi[0] - mesh.nodes[j][0], dy = pi[1] - mesh.nodes[j][1];
            acc += std::exp(-(dx * dx + dy * dy) * inv) * x(j);
        }
        y(i) = amp * acc;
    }
    return y;
}

struct KernelEigenOptions {
    LanczosOptions lanczos{};
    /// Largest node count for which the dense kernel is cached for matvecs.
    Index dense_cache_limit = 6000;
};

/// Leading eigenpairs of the kernel matrix on the mesh nodes.
inline EigenPairs kernel_eigenpairs(const Mesh& mesh, const KernelHyper& hyper, Index rank,
                                    const KernelEigenOptions& opts = {}) {
    hyper.validate();
    const Index n = mesh.num_nodes();
    if (rank > n) throw std::invalid_argument("kernel_eigenpairs: rank exceeds node count");
    if (n <= std::max(opts.lanczos.dense_threshold, opts.dense_cache_limit)) {
        const Matrix K = kernel_matrix(mesh, hyper);
        return truncated_sym_eig(K, rank, opts.lanczos);
    }
    return truncated_sym_eig([&](const Vector& x) { return kernel_apply(mesh, hyper, x); }, n, rank,
                             opts.lanczos);
}

/// Root G^{1/2} = M K^{1/2} of G = M K Mᵀ per forced component, from the
/// leading `rank` kernel modes. Unforced components get zero rows; the
/// components are uncorrelated (block-diagonal).
inline LowRankRoot lowrank_root(const Mesh& mesh, const ForcingSpec& spec, const SparseMatrix& mass,
                                const KernelEigenOptions& opts = {}) {
    spec.hyper.validate();
    const Index n = mesh.num_nodes();
    if (spec.forced_count() < 1) throw std::invalid_argument("lowrank_root: no forced component");
    if (spec.rank < 1 || spec.rank > n) throw std::invalid_argument("lowrank_root: rank must be in [1, n_nodes]");
    if (mass.rows() != n) throw std::invalid_argument("lowrank_root: mass matrix size mismatch");

    const KernelHyper unit{1.0, spec.hyper.length};
    const EigenPairs ep = kernel_eigenpairs(mesh, unit, spec.rank, opts);
    const Vector root = ep.values.cwiseMax(0.0).cwiseSqrt();
    const Matrix block = mass * (ep.vectors * root.asDiagonal());

    LowRankRoot out;
    out.rho = spec.hyper.rho;
    out.kernel_eigenvalues = spec.hyper.rho * spec.hyper.rho * ep.values;
    out.unit_factor = Matrix::Zero(n * spec.components(), spec.rank * spec.forced_count());
    Index col = 0;
    for (int c = 0; c < spec.components(); ++c) {
        if (!spec.forced[c]) continue;
        out.unit_factor.block(c * n, col, n, spec.rank) = block;
        col += spec.rank;
    }
    return out;
}

/// Leading kernel eigenvalues (nonincreasing) that govern the root's accuracy.
inline Vector spectrum_report(const Mesh& mesh, const ForcingSpec& spec, const KernelEigenOptions& opts = {}) {
    if (spec.rank < 1 || spec.rank > mesh.num_nodes())
        throw std::invalid_argument("spectrum_report: rank must be in [1, n_nodes]");
    return kernel_eigenpairs(mesh, spec.hyper, spec.rank, opts).values;
}

/// Dense block-diagonal G = M K Mᵀ over all components; reference path for small meshes.
inline Matrix dense_forcing_covariance(const Mesh& mesh, const ForcingSpec& spec, const SparseMatrix& mass) {
    const Index n = mesh.num_nodes();
    const Matrix K = kernel_matrix(mesh, spec.hyper);
    const Matrix MK = mass * K;
    const Matrix G = symmetrized(Matrix(MK * mass.transpose()));
    Matrix out = Matrix::Zero(n * spec.components(), n * spec.components());
    for (int c = 0; c < spec.components(); ++c)
        if (spec.forced[c]) out.block(c * n, c * n, n, n) = G;
    return out;
}

}  // namespace statfem
