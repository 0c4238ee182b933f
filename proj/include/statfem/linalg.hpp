#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace statfem {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;
using Triplet = Eigen::Triplet<double, int>;

/// Base class for all numerical failures raised by the library.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class SingularMatrixError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class NonConvergenceError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class IndefiniteMatrixError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Eigenvalues in nonincreasing order with matching orthonormal columns.
struct EigenPairs {
    Vector values;
    Matrix vectors;
};

namespace detail {

inline double max_abs_coeff(const SparseMatrix& A) {
    double m = 0.0;
    for (Index j = 0; j < A.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(A, j); it; ++it)
            m = std::max(m, std::abs(it.value()));
    return m;
}

/// Flip each column so that its first entry of non-negligible magnitude is positive.
inline void canonicalize_signs(Matrix& V) {
    for (Index j = 0; j < V.cols(); ++j) {
        const double scale = V.col(j).cwiseAbs().maxCoeff();
        if (scale == 0.0) continue;
        for (Index i = 0; i < V.rows(); ++i) {
            if (std::abs(V(i, j)) > 1e-10 * scale) {
                if (V(i, j) < 0.0) V.col(j) *= -1.0;
                break;
            }
        }
    }
}

inline unsigned worker_count(Index columns) {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    return static_cast<unsigned>(std::min<Index>(hw, std::max<Index>(1, columns / 8)));
}

}  // namespace detail

/// Sparse LU factors of a square operator. Immutable once built; solve() is
/// const and allocates its own scratch, so one instance may be shared across
/// threads.
class Factorization {
public:
    using Solver = Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>>;

    static constexpr double pivot_tolerance = 1e-14;

    explicit Factorization(const SparseMatrix& A) : n_(A.rows()) {
        if (A.rows() != A.cols())
            throw std::invalid_argument("Factorization: operator must be square");
        auto lu = std::make_shared<Solver>();
        lu->analyzePattern(A);
        lu->factorize(A);
        if (lu->info() != Eigen::Success)
            throw SingularMatrixError("Factorization: " + lu->lastErrorMessage());

        // Diagonal of U lives in the supernodal L storage.
        const double threshold = pivot_tolerance * detail::max_abs_coeff(A);
        const auto& supernodal = lu->matrixL().m_mapL;
        for (Index j = 0; j < n_; ++j) {
            double pivot = 0.0;
            for (Solver::SCMatrix::InnerIterator it(supernodal, j); it; ++it) {
                if (it.row() == j) {
                    pivot = it.value();
                    break;
                }
            }
            if (!(std::abs(pivot) > threshold))
                throw SingularMatrixError("Factorization: pivot " + std::to_string(j) +
                                          " below relative threshold");
        }
        lu_ = std::move(lu);
    }

    Index size() const { return n_; }

    Vector solve(const Vector& b) const {
        if (b.size() != n_) throw std::invalid_argument("Factorization::solve: size mismatch");
        Vector x = lu_->solve(b);
        return x;
    }

    /// Column-wise solve. Columns are independent and are split across
    /// hardware threads when more than one is available.
    Matrix solve(const Matrix& B) const {
        if (B.rows() != n_) throw std::invalid_argument("Factorization::solve: size mismatch");
        Matrix X(n_, B.cols());
        const unsigned workers = detail::worker_count(B.cols());
        if (workers <= 1) {
            X = lu_->solve(B);
            return X;
        }
        std::vector<std::thread> pool;
        const Index chunk = (B.cols() + workers - 1) / workers;
        for (unsigned w = 0; w < workers; ++w) {
            const Index begin = w * chunk;
            const Index count = std::min<Index>(chunk, B.cols() - begin);
            if (count <= 0) break;
            pool.emplace_back([&, begin, count] {
                X.middleCols(begin, count) = lu_->solve(B.middleCols(begin, count));
            });
        }
        for (auto& t : pool) t.join();
        return X;
    }

private:
    Index n_;
    std::shared_ptr<const Solver> lu_;
};

inline Factorization factorize(const SparseMatrix& A) { return Factorization(A); }

inline Vector solve(const Factorization& F, const Vector& b) { return F.solve(b); }

inline Matrix symmetrized(const Matrix& S) {
    if (S.rows() != S.cols()) throw std::invalid_argument("symmetrized: matrix must be square");
    return 0.5 * (S + S.transpose());
}

/// Dense symmetric eigendecomposition, values nonincreasing, sign-canonical vectors.
inline EigenPairs sym_eig(const Matrix& S) {
    if (S.rows() != S.cols()) throw std::invalid_argument("sym_eig: matrix must be square");
    const Index n = S.rows();
    if (n == 0) return {};
    const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
    if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw std::invalid_argument("sym_eig: matrix is not symmetric");

    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrized(S));
    if (es.info() != Eigen::Success) throw NonConvergenceError("sym_eig: eigensolver did not converge");

    EigenPairs out;
    out.values = es.eigenvalues().reverse();
    out.vectors = es.eigenvectors().rowwise().reverse();
    detail::canonicalize_signs(out.vectors);
    return out;
}

struct LanczosOptions {
    /// Problems at or below this size are decomposed densely.
    Index dense_threshold = 2000;
    /// Ritz residual tolerance relative to the leading Ritz value.
    double tolerance = 1e-10;
    Index max_iterations = 0;  // 0 -> min(n, 10 * rank + 200)
    std::uint64_t seed = 0x5eedULL;
};

using MatVec = std::function<Vector(const Vector&)>;

/// Leading `rank` eigenpairs of a symmetric PSD operator known only through
/// its action. Lanczos with full reorthogonalization above the dense threshold.
inline EigenPairs truncated_sym_eig(const MatVec& apply, Index n, Index rank,
                                    const LanczosOptions& opts = {}) {
    if (rank <= 0) throw std::invalid_argument("truncated_sym_eig: rank must be positive");
    if (rank > n) throw std::invalid_argument("truncated_sym_eig: rank exceeds dimension");

    if (n <= opts.dense_threshold) {
        Matrix S(n, n);
        Vector e = Vector::Zero(n);
        for (Index j = 0; j < n; ++j) {
            e(j) = 1.0;
            S.col(j) = apply(e);
            e(j) = 0.0;
        }
        EigenPairs full = sym_eig(symmetrized(S));
        return {full.values.head(rank), full.vectors.leftCols(rank)};
    }

    const Index cap = opts.max_iterations > 0 ? std::min(opts.max_iterations, n)
                                              : std::min<Index>(n, 10 * rank + 200);
    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    Matrix Q(n, cap);
    Vector alpha(cap), beta(cap);

    auto random_orthogonal = [&](Index filled) {
        for (int attempt = 0; attempt < 8; ++attempt) {
            Vector v(n);
            for (Index i = 0; i < n; ++i) v(i) = normal(rng);
            for (int pass = 0; pass < 2; ++pass)
                if (filled > 0) v -= Q.leftCols(filled) * (Q.leftCols(filled).transpose() * v);
            const double nv = v.norm();
            if (nv > 1e-8) return Vector(v / nv);
        }
        throw NonConvergenceError("truncated_sym_eig: could not extend Krylov basis");
    };

    Q.col(0) = random_orthogonal(0);
    Index m = 0;
    EigenPairs result;
    const Index check_every = 10;

    for (Index j = 0; j < cap; ++j) {
        Vector w = apply(Q.col(j));
        alpha(j) = Q.col(j).dot(w);
        for (int pass = 0; pass < 2; ++pass)
            w -= Q.leftCols(j + 1) * (Q.leftCols(j + 1).transpose() * w);
        const double b = w.norm();
        m = j + 1;
        beta(j) = b;

        const bool last = (m == cap);
        const bool check = last || (m >= rank && ((m - rank) % check_every == 0));
        if (check) {
            Matrix T = Matrix::Zero(m, m);
            for (Index i = 0; i < m; ++i) {
                T(i, i) = alpha(i);
                if (i + 1 < m) T(i, i + 1) = T(i + 1, i) = beta(i);
            }
            Eigen::SelfAdjointEigenSolver<Matrix> es(T);
            if (es.info() != Eigen::Success)
                throw NonConvergenceError("truncated_sym_eig: tridiagonal eigensolver failed");
            const Vector theta = es.eigenvalues().reverse();
            const Matrix S = es.eigenvectors().rowwise().reverse();
            const double lead = std::max(std::abs(theta(0)), 1e-300);
            bool converged = true;
            for (Index i = 0; i < rank; ++i) {
                if (std::abs(b * S(m - 1, i)) > opts.tolerance * lead) {
                    converged = false;
                    break;
                }
            }
            if (converged || m == n) {
                result.values = theta.head(rank);
                result.vectors = Q.leftCols(m) * S.leftCols(rank);
                break;
            }
            if (last)
                throw NonConvergenceError("truncated_sym_eig: Lanczos did not converge within " +
                                          std::to_string(cap) + " iterations");
        }
        if (j + 1 < cap) {
            if (b > 1e-12 * std::max(1.0, std::abs(alpha(j)))) {
                Q.col(j + 1) = w / b;
            } else {
                // Invariant subspace found; continue from a fresh direction.
                beta(j) = 0.0;
                Q.col(j + 1) = random_orthogonal(j + 1);
            }
        }
    }

    // Orthonormalize against round-off and canonicalize signs.
    Eigen::HouseholderQR<Matrix> qr(result.vectors);
    Matrix Vq = qr.householderQ() * Matrix::Identity(n, rank);
    for (Index j = 0; j < rank; ++j)
        if (Vq.col(j).dot(result.vectors.col(j)) < 0.0) Vq.col(j) *= -1.0;
    result.vectors = Vq;
    detail::canonicalize_signs(result.vectors);
    return result;
}

inline EigenPairs truncated_sym_eig(const Matrix& S, Index rank, const LanczosOptions& opts = {}) {
    if (S.rows() != S.cols()) throw std::invalid_argument("truncated_sym_eig: matrix must be square");
    if (rank <= 0) throw std::invalid_argument("truncated_sym_eig: rank must be positive");
    if (rank > S.rows()) throw std::invalid_argument("truncated_sym_eig: rank exceeds dimension");
    if (S.rows() <= opts.dense_threshold) {
        EigenPairs full = sym_eig(S);
        return {full.values.head(rank), full.vectors.leftCols(rank)};
    }
    const Matrix Ssym = symmetrized(S);
    return truncated_sym_eig([&](const Vector& x) -> Vector { return Ssym * x; }, S.rows(), rank,
                             opts);
}

struct CholeskyPolicy {
    double initial_jitter = 1e-12;
    double growth = 10.0;
    int max_retries = 5;
};

/// Lower-triangular R with R Rᵀ = S, adding escalating diagonal jitter when
/// S is only semidefinite up to round-off.
inline Matrix cholesky(const Matrix& S, const CholeskyPolicy& policy = {}, double* jitter_used = nullptr) {
    if (S.rows() != S.cols()) throw std::invalid_argument("cholesky: matrix must be square");
    const Matrix Ssym = symmetrized(S);
    const Index n = Ssym.rows();
    double tau = 0.0;
    for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
        Eigen::LLT<Matrix> llt(Ssym + tau * Matrix::Identity(n, n));
        if (llt.info() == Eigen::Success) {
            Matrix R = llt.matrixL();
            if (R.diagonal().minCoeff() > 0.0 && R.allFinite()) {
                if (jitter_used) *jitter_used = tau;
                return R;
            }
        }
        tau = attempt == 0 ? policy.initial_jitter : tau * policy.growth;
    }
    throw IndefiniteMatrixError("cholesky: matrix not positive definite after maximum jitter");
}

/// Square root through the eigendecomposition with negative eigenvalues clamped to zero.
inline Matrix psd_root(const Matrix& S) {
    EigenPairs ep = sym_eig(symmetrized(S));
    Vector root = ep.values.cwiseMax(0.0).cwiseSqrt();
    return ep.vectors * root.asDiagonal();
}

/// Cholesky with jitter, falling back to the clamped eigen-root.
inline Matrix psd_factor(const Matrix& S, bool* used_fallback = nullptr) {
    try {
        Matrix R = cholesky(S);
        if (used_fallback) *used_fallback = false;
        return R;
    } catch (const IndefiniteMatrixError&) {
        if (used_fallback) *used_fallback = true;
        return psd_root(S);
    }
}

/// Block-diagonal sparse matrix assembled from the given square blocks.
inline SparseMatrix block_diagonal(const std::vector<SparseMatrix>& blocks) {
    Index n = 0;
    std::size_t nnz = 0;
    for (const auto& b : blocks) {
        n += b.rows();
        nnz += static_cast<std::size_t>(b.nonZeros());
    }
    std::vector<Triplet> t;
    t.reserve(nnz);
    Index offset = 0;
    for (const auto& b : blocks) {
        for (Index j = 0; j < b.outerSize(); ++j)
            for (SparseMatrix::InnerIterator it(b, j); it; ++it)
                t.emplace_back(static_cast<int>(it.row() + offset), static_cast<int>(it.col() + offset),
                               it.value());
        offset += b.rows();
    }
    SparseMatrix out(n, n);
    out.setFromTriplets(t.begin(), t.end());
    return out;
}

}  // namespace statfem
