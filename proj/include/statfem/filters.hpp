#pragma once

#include "statfem/diagnostics.hpp"
#include "statfem/gp_forcing.hpp"
#include "statfem/integrators.hpp"
#include "statfem/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace statfem {

/// N(mean, factor factorᵀ) at time index `step`.
struct GaussianState {
    Vector mean;
    Matrix factor;
    int step = 0;

    Matrix covariance() const { return factor * factor.transpose(); }
};

/// y = H w + eta, eta ~ N(0, sigma^2 I). H is n_y x n_u.
struct ObservationModel {
    SparseMatrix H;
    double sigma = 1.0;

    Index size() const { return H.rows(); }

    void validate(Index state_dim) const {
        if (!(sigma > 0.0)) throw std::invalid_argument("ObservationModel: sigma must be positive");
        if (H.rows() > 0 && H.cols() != state_dim) throw std::invalid_argument("ObservationModel: H column count mismatch");
        for (Index r = 0; r < H.rows(); ++r)
            if (H.row(r).norm() == 0.0) throw std::invalid_argument("ObservationModel: H has an empty row");
    }
};

/// Dense forcing-block scaling in the prediction step.
///  - SqrtDt: sqrt(dt) Phi^{-1} G^{1/2}, so the one-step noise covariance is dt Phi^{-1} G Phi^{-T}.
///  - PaperLiteralDt: dt Phi^{-1} G^{1/2}.
enum class NoiseScaling { SqrtDt, PaperLiteralDt };

struct FilterConfig {
    Index rank = 32;
    Index forcing_rank = 32;
    PropagatorVariant propagator = PropagatorVariant::CnTangent;
    NoiseScaling noise = NoiseScaling::SqrtDt;
    bool log_retained = true;
    double divergence_threshold = 1e4;

    void validate(Index state_dim) const {
        if (rank < 1 || forcing_rank < 1) throw std::invalid_argument("FilterConfig: ranks must be positive");
        if (rank > state_dim) throw std::invalid_argument("FilterConfig: rank exceeds state dimension");
    }
};

inline double noise_scale(NoiseScaling scaling, double dt) {
    return scaling == NoiseScaling::SqrtDt ? std::sqrt(dt) : dt;
}

// ---------------------------------------------------------------------------
// Static update

struct DenseGaussian {
    Vector mean;
    Matrix cov;
};

/// Conditions N(m, C) on y = H u + eta by the direct dense formulas.
inline DenseGaussian static_posterior(const Vector& prior_mean, const Matrix& prior_cov, const ObservationModel& obs,
                                      const Vector& y) {
    const Index n = prior_mean.size();
    if (prior_cov.rows() != n || prior_cov.cols() != n) throw std::invalid_argument("static_posterior: covariance shape");
    if (obs.H.cols() != n || y.size() != obs.H.rows()) throw std::invalid_argument("static_posterior: observation shape");
    if (!(obs.sigma > 0.0)) throw std::invalid_argument("static_posterior: sigma must be positive");
    const Matrix C = symmetrized(prior_cov);
    const EigenPairs ep = sym_eig(C);
    if (n > 0 && ep.values(n - 1) < -1e-10 * std::max(1.0, std::abs(ep.values(0))))
        throw IndefiniteMatrixError("static_posterior: prior covariance is not positive semidefinite");

    const Matrix HC = obs.H * C;                                   // n_y x n
    Matrix S = HC * obs.H.transpose();
    S.diagonal().array() += obs.sigma * obs.sigma;
    const Eigen::LLT<Matrix> llt(symmetrized(S));
    if (llt.info() != Eigen::Success) throw IndefiniteMatrixError("static_posterior: innovation covariance not SPD");
    const Matrix gain_t = llt.solve(HC);                          // S^{-1} H C
    DenseGaussian post;
    post.mean = prior_mean + gain_t.transpose() * (y - obs.H * prior_mean);
    post.cov = symmetrized(Matrix(C - HC.transpose() * gain_t));
    return post;
}

// ---------------------------------------------------------------------------
// Woodbury solve

/// (HL (HL)ᵀ + sigma^2 I)^{-1} rhs through the k x k inner system
/// sigma^2 I + (HL)ᵀ HL. With fewer observations than columns the n_y x n_y
/// system is smaller and stays definite as sigma -> 0, so that one is used.
inline Matrix woodbury_apply(const Matrix& HL, double sigma, const Matrix& rhs) {
    if (!(sigma > 0.0)) throw std::invalid_argument("woodbury_apply: sigma must be positive");
    if (rhs.rows() != HL.rows()) throw std::invalid_argument("woodbury_apply: rhs row mismatch");
    const double s2 = sigma * sigma;
    if (HL.cols() == 0) return rhs / s2;
    if (HL.rows() <= HL.cols()) {
        Matrix S = HL * HL.transpose();
        S.diagonal().array() += s2;
        const Eigen::LLT<Matrix> llt(symmetrized(S));
        if (llt.info() != Eigen::Success) throw IndefiniteMatrixError("woodbury_apply: innovation covariance not SPD");
        return llt.solve(rhs);
    }
    Matrix inner = HL.transpose() * HL;
    inner.diagonal().array() += s2;
    const Eigen::LLT<Matrix> llt(symmetrized(inner));
    if (llt.info() != Eigen::Success) throw IndefiniteMatrixError("woodbury_apply: inner matrix not SPD");
    return (rhs - HL * llt.solve(Matrix(HL.transpose() * rhs))) / s2;
}

inline Vector woodbury_apply(const Matrix& HL, double sigma, const Vector& rhs) {
    return woodbury_apply(HL, sigma, Matrix(rhs)).col(0);
}

// ---------------------------------------------------------------------------
// Static Poisson prior

/// Prior of the FEM coefficients of -Laplace(u) = f, u = 0 on the boundary,
/// with f ~ GP(m, k): mean A^{-1} b and covariance A^{-1} G A^{-T}, where
/// b = <m, phi> and G = M K M. Boundary rows carry zero mean and variance.
inline DenseGaussian poisson_prior(const Mesh& mesh, const std::function<double(const Point&)>& forcing_mean,
                                   const KernelHyper& hyper) {
    SparseMatrix A = assemble_stiffness(mesh);
    Vector b = assemble_load(mesh, forcing_mean);
    const std::vector<Index> bnd = boundary_nodes(mesh);
    apply_dirichlet(A, b, bnd);
    const Factorization F(A);
    const SparseMatrix M = assemble_mass(mesh);
    Matrix G = M * (kernel_matrix(mesh, hyper) * M.transpose());
    for (Index i : bnd) {
        G.row(i).setZero();
        G.col(i).setZero();
    }
    const Matrix AiG = F.solve(G);
    DenseGaussian out;
    out.mean = F.solve(b);
    out.cov = symmetrized(F.solve(Matrix(AiG.transpose())));
    return out;
}

// ---------------------------------------------------------------------------
// Low-rank filter steps

/// Prediction: mean from the deterministic step, factor split into the
/// propagated previous factor and the unit-amplitude forcing block so that
/// the widened factor is [propagated, rho * forcing_unit].
struct Prediction {
    Vector mean;
    Matrix propagated;
    Matrix forcing_unit;
    double rho = 1.0;

    Matrix widened() const { return widened(rho); }
    Matrix widened(double amplitude) const {
        Matrix W(mean.size(), propagated.cols() + forcing_unit.cols());
        W << propagated, amplitude * forcing_unit;
        return W;
    }
};

inline Prediction lr_predict(const GaussianState& state, const Stepper& stepper, const LowRankRoot& forcing,
                             const FilterConfig& cfg) {
    const Index n = stepper.ops().dofs();
    if (state.mean.size() != n || state.factor.rows() != n) throw std::invalid_argument("lr_predict: state dimension");
    if (forcing.rows() != n) throw std::invalid_argument("lr_predict: forcing dimension");
    Prediction p;
    p.rho = forcing.rho;
    p.mean = stepper.advance(state.mean);
    const TangentPropagator tp = stepper.tangent(state.mean, p.mean, cfg.propagator);
    const Index k = state.factor.cols(), kf = forcing.cols();
    // One block solve against the shared factorization covers every column.
    Matrix rhs(n, k + kf);
    rhs << tp.psi * state.factor, noise_scale(cfg.noise, stepper.config().dt) * forcing.unit_factor;
    const Matrix cols = tp.solve(rhs);
    p.propagated = cols.leftCols(k);
    p.forcing_unit = cols.rightCols(kf);
    return p;
}

/// Inline overload for callers holding a ready widened factor.
inline Matrix lr_predict_widened(const GaussianState& state, const Stepper& stepper, const LowRankRoot& forcing,
                                 const FilterConfig& cfg, Vector* mean_out) {
    Prediction p = lr_predict(state, stepper, forcing, cfg);
    if (mean_out) *mean_out = p.mean;
    return p.widened();
}

struct Truncation {
    Matrix factor;      // n x min(k, k + k')
    Vector eigenvalues; // all eigenvalues of the widened Gram, nonincreasing, clamped at 0
    double retained_fraction = 1.0;

    double first_discarded() const {
        const Index k = factor.cols();
        return k < eigenvalues.size() ? eigenvalues(k) : 0.0;
    }
    Vector retained() const { return eigenvalues.head(factor.cols()); }
};

/// Rank-k truncation through the eigendecomposition of the widened Gram.
inline Truncation lr_truncate(const Matrix& widened, Index k) {
    if (k < 1) throw std::invalid_argument("lr_truncate: k must be positive");
    const Matrix gram = symmetrized(Matrix(widened.transpose() * widened));
    const EigenPairs ep = sym_eig(gram);
    const Index keep = std::min<Index>(k, widened.cols());
    Truncation t;
    t.eigenvalues = ep.values.cwiseMax(0.0);
    t.factor = widened * ep.vectors.leftCols(keep);
    const double total = t.eigenvalues.sum();
    t.retained_fraction = total > 0.0 ? t.eigenvalues.head(keep).sum() / total : 1.0;
    return t;
}

/// Kalman update of N(m, L Lᵀ) using the Woodbury form of the innovation inverse.
inline GaussianState lr_update(const Vector& pred_mean, const Matrix& factor, const ObservationModel& obs,
                               const Vector& y) {
    if (pred_mean.size() != factor.rows() || obs.H.cols() != pred_mean.size() || y.size() != obs.H.rows())
        throw std::invalid_argument("lr_update: dimension mismatch");
    GaussianState out;
    if (obs.H.rows() == 0) {
        out.mean = pred_mean;
        out.factor = factor;
        return out;
    }
    const Matrix HL = obs.H * factor;
    const Vector innovation = y - obs.H * pred_mean;
    out.mean = pred_mean + factor * (HL.transpose() * woodbury_apply(HL, obs.sigma, innovation));
    // I - (HL)ᵀ S^{-1} HL, written as sigma^2 (sigma^2 I + (HL)ᵀ HL)^{-1} to avoid cancellation.
    const Index k = factor.cols();
    if (HL.rows() <= k) {
        // Few observations: the k x k inner system loses definiteness as sigma -> 0.
        const Matrix RRt = Matrix::Identity(k, k) - HL.transpose() * woodbury_apply(HL, obs.sigma, HL);
        out.factor = factor * psd_factor(symmetrized(RRt));
        return out;
    }
    const double s2 = obs.sigma * obs.sigma;
    Matrix inner = HL.transpose() * HL;
    inner.diagonal().array() += s2;
    const Eigen::LLT<Matrix> llt(symmetrized(inner));
    if (llt.info() != Eigen::Success) throw IndefiniteMatrixError("lr_update: inner matrix not SPD");
    const Matrix RRt = s2 * llt.solve(Matrix(Matrix::Identity(k, k)));
    out.factor = factor * psd_factor(symmetrized(RRt));
    return out;
}

// ---------------------------------------------------------------------------
// Full-rank reference filter

struct DenseState {
    Vector mean;
    Matrix cov;
    int step = 0;
};

inline constexpr Index full_exkf_max_dim = 5000;

inline DenseState full_exkf_predict(const DenseState& state, const Stepper& stepper, const Matrix& forcing_cov,
                                    const FilterConfig& cfg) {
    const Index n = stepper.ops().dofs();
    if (n > full_exkf_max_dim) throw std::invalid_argument("full_exkf: state dimension exceeds dense guard");
    if (state.cov.rows() != n || forcing_cov.rows() != n) throw std::invalid_argument("full_exkf: dimension mismatch");
    DenseState out;
    out.step = state.step + 1;
    out.mean = stepper.advance(state.mean);
    const TangentPropagator tp = stepper.tangent(state.mean, out.mean, cfg.propagator);
    const double s = noise_scale(cfg.noise, stepper.config().dt);
    const Matrix JC = tp.propagate(state.cov);                   // J C
    const Matrix JCJt = tp.propagate(Matrix(JC.transpose()));    // J (J C)ᵀ = J C Jᵀ
    const Matrix PG = tp.solve(forcing_cov);                     // Phi^{-1} G
    const Matrix Q = tp.solve(Matrix(PG.transpose()));           // Phi^{-1} G Phi^{-T}
    out.cov = symmetrized(Matrix(JCJt + (s * s) * Q));
    return out;
}

inline DenseState full_exkf_update(const DenseState& pred, const ObservationModel& obs, const Vector& y) {
    DenseGaussian post = static_posterior(pred.mean, pred.cov, obs, y);
    return {std::move(post.mean), std::move(post.cov), pred.step};
}

/// Dense tangent-linear prediction plus dense Kalman update (skipped when y is absent).
inline DenseState full_exkf_step(const DenseState& state, const Stepper& stepper, const Matrix& forcing_cov,
                                 const ObservationModel& obs, const Vector* y, const FilterConfig& cfg) {
    DenseState pred = full_exkf_predict(state, stepper, forcing_cov, cfg);
    if (!y || obs.size() == 0) return pred;
    return full_exkf_update(pred, obs, *y);
}

// ---------------------------------------------------------------------------
// Filtering loop

struct ObservationRecord {
    int step = 0;
    Vector values;
};

/// Observations keyed by timestep; steps without a record carry no datum.
struct DataStream {
    std::vector<ObservationRecord> records;
    std::string source = "synthetic";

    void validate(Index n_y) const {
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (i > 0 && records[i].step <= records[i - 1].step)
                throw std::invalid_argument("DataStream: step indices must be strictly increasing");
            if (records[i].values.size() != n_y) throw std::invalid_argument("DataStream: observation length mismatch");
        }
    }

    const ObservationRecord* find(int step) const {
        auto it = std::lower_bound(records.begin(), records.end(), step,
                                   [](const ObservationRecord& r, int s) { return r.step < s; });
        return (it != records.end() && it->step == step) ? &*it : nullptr;
    }
};

/// Filtering stopped because the mean left any plausible range.
struct DivergenceEvent {
    int step = 0;
    DivergenceReport report;
};

/// Numerical failure inside the loop, tagged with the step at which it happened.
class FilterFailure : public NumericalError {
public:
    FilterFailure(int step, const std::string& what)
        : NumericalError("step " + std::to_string(step) + ": " + what), step_(step) {}
    int step() const { return step_; }

private:
    int step_;
};

struct FilterResult {
    GaussianState final_state;
    std::vector<StepDiagnostics> diagnostics;
    std::optional<DivergenceEvent> divergence;
    int steps_completed = 0;
};

using StepObserver = std::function<void(const GaussianState&, const StepDiagnostics&)>;
using TruthLookup = std::function<std::optional<Vector>(int step)>;

struct RunOptions {
    StepObserver observer;
    TruthLookup truth;
    int components = 1;
};

namespace detail {

inline void fill_errors(StepDiagnostics& d, const Vector& mean, const RunOptions& opts) {
    if (!opts.truth) return;
    const std::optional<Vector> truth = opts.truth(d.step);
    if (!truth) return;
    const Index n = mean.size() / opts.components;
    for (int c = 0; c < opts.components; ++c) {
        const auto tc = truth->segment(c * n, n);
        d.relative_errors.push_back(tc.norm() > 0.0 ? relative_error(mean.segment(c * n, n), tc)
                                                    : std::numeric_limits<double>::quiet_NaN());
    }
}

inline void record_truncation(StepDiagnostics& d, const Truncation& t) {
    d.retained_fraction = t.retained_fraction;
    d.leading_eigenvalue = t.eigenvalues.size() > 0 ? t.eigenvalues(0) : 0.0;
    d.first_discarded = t.first_discarded();
    const Vector kept = t.retained();
    d.effective_rank = kept.sum() > 0.0 ? effective_rank(kept) : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace detail

/// Hook deciding the forcing amplitude and noise level per step; returns the
/// (rho, sigma) to use given the prediction and the step's datum.
using HyperSelector = std::function<std::pair<double, double>(int step, const Prediction&, const Vector& y)>;

/// LR-ExKF over n_steps. The state at step 0 is updated with a step-0 datum if present.
inline FilterResult run_filter(const GaussianState& initial, const Stepper& stepper, const LowRankRoot& forcing,
                               const ObservationModel& obs, const DataStream& data, int n_steps,
                               const FilterConfig& cfg, const RunOptions& opts = {},
                               const HyperSelector& hyper = {}) {
    const Index n = stepper.ops().dofs();
    cfg.validate(n);
    if (obs.size() > 0) obs.validate(n);
    data.validate(obs.size());
    const double dt = stepper.config().dt;

    FilterResult result;
    GaussianState state = initial;
    if (state.factor.cols() == 0) state.factor = Matrix::Zero(n, cfg.rank);

    if (const ObservationRecord* rec = data.find(state.step); rec && obs.size() > 0) {
        GaussianState post = lr_update(state.mean, state.factor, obs, rec->values);
        post.step = state.step;
        state = std::move(post);
    }

    const int first = state.step;
    for (int step = first + 1; step <= first + n_steps; ++step) {
        StepDiagnostics d;
        d.step = step;
        d.time = step * dt;
        try {
            Prediction pred = lr_predict(state, stepper, forcing, cfg);
            DivergenceReport dr = divergence_check(pred.mean, cfg.divergence_threshold);
            if (dr.diverged) {
                result.divergence = DivergenceEvent{step, std::move(dr)};
                break;
            }
            const ObservationRecord* rec = obs.size() > 0 ? data.find(step) : nullptr;
            ObservationModel step_obs = obs;
            if (rec && hyper) {
                const auto [rho, sigma] = hyper(step, pred, rec->values);
                pred.rho = rho;
                step_obs.sigma = sigma;
            }
            const Truncation trunc = lr_truncate(pred.widened(), cfg.rank);
            detail::record_truncation(d, trunc);
            GaussianState next;
            if (rec) {
                next = lr_update(pred.mean, trunc.factor, step_obs, rec->values);
                d.updated = true;
            } else {
                next.mean = std::move(pred.mean);
                next.factor = trunc.factor;
            }
            next.step = step;
            dr = divergence_check(next.mean, cfg.divergence_threshold);
            state = std::move(next);
            detail::fill_errors(d, state.mean, opts);
            result.diagnostics.push_back(d);
            if (dr.diverged) {
                result.divergence = DivergenceEvent{step, std::move(dr)};
                result.steps_completed = step - first;
                break;
            }
        } catch (const SingularReactionError& e) {
            DivergenceReport dr;
            dr.diverged = true;
            dr.reason = std::string("singular reaction: ") + e.what();
            result.divergence = DivergenceEvent{step, std::move(dr)};
            break;
        } catch (const FilterFailure&) {
            throw;
        } catch (const NumericalError& e) {
            throw FilterFailure(step, e.what());
        }
        result.steps_completed = step - first;
        if (opts.observer) opts.observer(state, result.diagnostics.back());
    }
    result.final_state = std::move(state);
    return result;
}

using DenseObserver = std::function<void(const DenseState&)>;

/// Full-rank ExKF over n_steps with a dense forcing covariance.
inline DenseState run_full_filter(const DenseState& initial, const Stepper& stepper, const Matrix& forcing_cov,
                                  const ObservationModel& obs, const DataStream& data, int n_steps,
                                  const FilterConfig& cfg, const DenseObserver& observer = {}) {
    DenseState state = initial;
    if (const ObservationRecord* rec = data.find(state.step); rec && obs.size() > 0)
        state = full_exkf_update(state, obs, rec->values);
    const int first = state.step;
    for (int step = first + 1; step <= first + n_steps; ++step) {
        const ObservationRecord* rec = obs.size() > 0 ? data.find(step) : nullptr;
        try {
            state = full_exkf_step(state, stepper, forcing_cov, obs, rec ? &rec->values : nullptr, cfg);
        } catch (const NumericalError& e) {
            throw FilterFailure(step, e.what());
        }
        if (observer) observer(state);
    }
    return state;
}

}  // namespace statfem
