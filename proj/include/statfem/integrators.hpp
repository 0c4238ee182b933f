#pragma once

#include "statfem/gp_forcing.hpp"
#include "statfem/linalg.hpp"
#include "statfem/mesh.hpp"
#include "statfem/models.hpp"

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace statfem {

enum class Scheme { CrankNicolson, ImexEuler };

/// How the tangent-linear covariance propagator is built for Crank-Nicolson.
///  - CnTangent: exact linearization of the midpoint system,
///    (M + dt/2 (kA - J)) dx' = (M - dt/2 (kA - J)) dx, J at the midpoint.
///  - PaperLiteral: (M + dt (kA + J_n))^{-1} (M + dt J_{n-1}) with J_n at the
///    current midpoint and J_{n-1} at the previous mean.
enum class PropagatorVariant { CnTangent, PaperLiteral };

struct StepperConfig {
    Scheme scheme = Scheme::CrankNicolson;
    double dt = 1e-2;
    double newton_tol = 1e-9;
    int newton_max_iter = 25;

    void validate() const {
        if (!(dt > 0.0)) throw std::invalid_argument("StepperConfig: dt must be positive");
        if (!(newton_tol > 0.0)) throw std::invalid_argument("StepperConfig: tolerance must be positive");
        if (newton_max_iter < 1) throw std::invalid_argument("StepperConfig: iteration cap must be positive");
    }
};

/// Semi-discrete operators for M w' + kA w = r~(w) over s components, with
/// the state stored component-major.
class SystemOperators {
public:
    SystemOperators(const Mesh& mesh, ModelSpec model)
        : model_(std::move(model)),
          nodes_(mesh.num_nodes()),
          mass_single_(assemble_mass(mesh)),
          stiffness_single_(assemble_stiffness(mesh)) {
        if (static_cast<int>(model_.diffusion.size()) != model_.components)
            throw std::invalid_argument("SystemOperators: one diffusion coefficient per component required");
        std::vector<SparseMatrix> mass_blocks(model_.components, mass_single_);
        std::vector<SparseMatrix> diff_blocks;
        for (int c = 0; c < model_.components; ++c) diff_blocks.push_back(model_.diffusion[c] * stiffness_single_);
        mass_ = block_diagonal(mass_blocks);
        diffusion_ = block_diagonal(diff_blocks);
        diffusion_.prune(0.0);
    }

    const ModelSpec& model() const { return model_; }
    int components() const { return model_.components; }
    Index nodes() const { return nodes_; }
    Index dofs() const { return nodes_ * model_.components; }

    const SparseMatrix& mass() const { return mass_; }
    /// Block-diagonal kappa-scaled stiffness.
    const SparseMatrix& diffusion() const { return diffusion_; }
    const SparseMatrix& mass_single() const { return mass_single_; }
    const SparseMatrix& stiffness_single() const { return stiffness_single_; }

    /// Nodal reaction values, component-major.
    Vector nodal_reaction(const Vector& w) const {
        check(w);
        const int s = model_.components;
        Vector r(dofs());
        std::vector<double> state(s), out(s);
        for (Index i = 0; i < nodes_; ++i) {
            for (int c = 0; c < s; ++c) state[c] = w(c * nodes_ + i);
            model_.reaction(state, out);
            for (int c = 0; c < s; ++c) r(c * nodes_ + i) = out[c];
        }
        return r;
    }

    /// Group-FEM reaction load r~(w) = M r(w_nodal).
    Vector reaction_load(const Vector& w) const {
        const Vector r = nodal_reaction(w);
        Vector out(dofs());
        for (int c = 0; c < model_.components; ++c)
            out.segment(c * nodes_, nodes_) = mass_single_ * r.segment(c * nodes_, nodes_);
        return out;
    }

    /// D r~(w): block (c, d) equals M diag(dr_c / dw_d).
    SparseMatrix reaction_jacobian(const Vector& w) const {
        check(w);
        const int s = model_.components;
        std::vector<double> jac(static_cast<std::size_t>(nodes_) * s * s);
        std::vector<double> state(s), local(s * s);
        for (Index i = 0; i < nodes_; ++i) {
            for (int c = 0; c < s; ++c) state[c] = w(c * nodes_ + i);
            model_.jacobian(state, local);
            for (int k = 0; k < s * s; ++k) jac[k * nodes_ + i] = local[k];
        }
        std::vector<Triplet> t;
        t.reserve(static_cast<std::size_t>(mass_single_.nonZeros()) * s * s);
        for (int c = 0; c < s; ++c) {
            for (int d = 0; d < s; ++d) {
                const double* col_scale = &jac[(c * s + d) * nodes_];
                for (Index j = 0; j < mass_single_.outerSize(); ++j)
                    for (SparseMatrix::InnerIterator it(mass_single_, j); it; ++it)
                        t.emplace_back(static_cast<int>(c * nodes_ + it.row()), static_cast<int>(d * nodes_ + j),
                                       it.value() * col_scale[j]);
            }
        }
        SparseMatrix J(dofs(), dofs());
        J.setFromTriplets(t.begin(), t.end());
        return J;
    }

private:
    void check(const Vector& w) const {
        if (w.size() != dofs()) throw std::invalid_argument("SystemOperators: state dimension mismatch");
    }

    ModelSpec model_;
    Index nodes_;
    SparseMatrix mass_single_, stiffness_single_;
    SparseMatrix mass_, diffusion_;
};

struct NewtonReport {
    int iterations = 0;
    int factorizations = 0;
    double residual = 0.0;
};

/// One Crank-Nicolson step of M(u' - u) + dt kA u_mid = dt r~(u_mid) + e.
/// Chord Newton from the warm start u' = u: the Jacobian is factorized at the
/// warm start and refreshed only when the residual contracts by less than 2x.
inline Vector step_cn(const Vector& u, const SystemOperators& ops, const StepperConfig& cfg,
                      const Vector* increment = nullptr, NewtonReport* report = nullptr) {
    cfg.validate();
    if (!u.allFinite()) throw NumericalError("step_cn: non-finite state");
    const double dt = cfg.dt;
    const Vector Mu = ops.mass() * u;
    Vector next = u;
    auto residual = [&](const Vector& x, const Vector& mid) {
        Vector F = ops.mass() * x - Mu + dt * (ops.diffusion() * mid) - dt * ops.reaction_load(mid);
        if (increment) F -= *increment;
        return F;
    };
    auto jacobian = [&](const Vector& mid) {
        return Factorization(SparseMatrix(ops.mass() + (0.5 * dt) * ops.diffusion() - (0.5 * dt) * ops.reaction_jacobian(mid)));
    };
    Vector mid = u;
    Vector F = residual(next, mid);
    double norm = F.norm();
    int it = 0, factorizations = 0;
    std::optional<Factorization> lu;
    bool refresh = true;
    while (norm > cfg.newton_tol) {
        if (it == cfg.newton_max_iter)
            throw NonConvergenceError("step_cn: Newton did not converge (residual " + std::to_string(norm) + ")");
        if (refresh) {
            lu.emplace(jacobian(mid));
            ++factorizations;
        }
        next -= lu->solve(F);
        if (!next.allFinite()) throw NumericalError("step_cn: Newton iterate became non-finite");
        mid = 0.5 * (next + u);
        F = residual(next, mid);
        const double previous = norm;
        norm = F.norm();
        refresh = norm > 0.5 * previous;
        ++it;
    }
    if (report) *report = {it, factorizations, norm};
    return next;
}

/// One IMEX Euler step: (M + dt kA) w' = M w + dt r~(w) + e.
inline Vector step_imex(const Vector& w, const SystemOperators& ops, const StepperConfig& cfg,
                        const Vector* increment = nullptr, const Factorization* lhs = nullptr) {
    cfg.validate();
    if (!w.allFinite()) throw NumericalError("step_imex: non-finite state");
    Vector rhs = ops.mass() * w + cfg.dt * ops.reaction_load(w);
    if (increment) rhs += *increment;
    if (lhs) return lhs->solve(rhs);
    const Factorization F(SparseMatrix(ops.mass() + cfg.dt * ops.diffusion()));
    return F.solve(rhs);
}

/// Tangent-linear map of one step, J = Phi^{-1} Psi, with Phi factorized once
/// and shared by every column solve.
struct TangentPropagator {
    Factorization phi;
    SparseMatrix psi;

    /// Phi^{-1} Psi X
    Matrix propagate(const Matrix& X) const { return phi.solve(Matrix(psi * X)); }
    /// Phi^{-1} B
    Matrix solve(const Matrix& B) const { return phi.solve(B); }
};

/// Deterministic time stepper. The IMEX left-hand side is constant and is
/// factorized once at construction.
class Stepper {
public:
    Stepper(const SystemOperators& ops, StepperConfig cfg) : ops_(&ops), cfg_(cfg) {
        cfg_.validate();
        if (cfg_.scheme == Scheme::ImexEuler)
            imex_lhs_.emplace(SparseMatrix(ops.mass() + cfg_.dt * ops.diffusion()));
    }

    const StepperConfig& config() const { return cfg_; }
    const SystemOperators& ops() const { return *ops_; }

    Vector advance(const Vector& w, const Vector* increment = nullptr, NewtonReport* report = nullptr) const {
        if (cfg_.scheme == Scheme::CrankNicolson) return step_cn(w, *ops_, cfg_, increment, report);
        if (report) *report = {};
        return step_imex(w, *ops_, cfg_, increment, &*imex_lhs_);
    }

    /// Linearization of the step that took `prev` to `next`.
    TangentPropagator tangent(const Vector& prev, const Vector& next, PropagatorVariant variant) const {
        const double dt = cfg_.dt;
        const SparseMatrix& M = ops_->mass();
        const SparseMatrix& kA = ops_->diffusion();
        if (cfg_.scheme == Scheme::ImexEuler) {
            SparseMatrix psi = M + dt * ops_->reaction_jacobian(prev);
            return {*imex_lhs_, std::move(psi)};
        }
        const Vector mid = 0.5 * (prev + next);
        const SparseMatrix Jmid = ops_->reaction_jacobian(mid);
        if (variant == PropagatorVariant::CnTangent) {
            SparseMatrix lin = kA - Jmid;
            SparseMatrix phi = M + (0.5 * dt) * lin;
            SparseMatrix psi = M - (0.5 * dt) * lin;
            return {Factorization(phi), std::move(psi)};
        }
        SparseMatrix phi = M + dt * (kA + Jmid);
        SparseMatrix psi = M + dt * ops_->reaction_jacobian(prev);
        return {Factorization(phi), std::move(psi)};
    }

private:
    const SystemOperators* ops_;
    StepperConfig cfg_;
    std::optional<Factorization> imex_lhs_;
};

/// Trajectory sampled at every `stride` steps (always including step 0 and the last step).
struct Trajectory {
    std::vector<int> steps;
    std::vector<Vector> states;
};

/// Euler-Maruyama sample of the stochastic prior: each step adds a load
/// increment e_n = sqrt(dt) G^{1/2} z_n, z_n ~ N(0, I), to the fully discrete system.
inline Trajectory sample_prior_path(const InitialCondition& ic, const SystemOperators& ops, const StepperConfig& cfg,
                                    const LowRankRoot& forcing, int n_steps, std::uint64_t seed, int stride = 1) {
    if (forcing.rows() != ops.dofs()) throw std::invalid_argument("sample_prior_path: forcing dimension mismatch");
    if (ic.values.size() != ops.dofs()) throw std::invalid_argument("sample_prior_path: initial condition dimension mismatch");
    if (stride < 1) stride = 1;
    const Stepper stepper(ops, cfg);
    const Matrix root = forcing.factor();
    const double scale = std::sqrt(cfg.dt);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Trajectory out;
    Vector w = ic.values;
    out.steps.push_back(0);
    out.states.push_back(w);
    Vector z(root.cols());
    for (int n = 1; n <= n_steps; ++n) {
        for (Index j = 0; j < z.size(); ++j) z(j) = normal(rng);
        const Vector e = scale * (root * z);
        w = stepper.advance(w, forcing.rho > 0.0 ? &e : nullptr);
        if (n % stride == 0 || n == n_steps) {
            out.steps.push_back(n);
            out.states.push_back(w);
        }
    }
    return out;
}

/// Deterministic path from an initial state.
inline Trajectory integrate(const Vector& w0, const Stepper& stepper, int n_steps, int stride = 1) {
    if (stride < 1) stride = 1;
    Trajectory out;
    Vector w = w0;
    out.steps.push_back(0);
    out.states.push_back(w);
    for (int n = 1; n <= n_steps; ++n) {
        w = stepper.advance(w);
        if (n % stride == 0 || n == n_steps) {
            out.steps.push_back(n);
            out.states.push_back(w);
        }
    }
    return out;
}

/// Attractor state of the oscillatory Oregonator: uniform random start in
/// [0, 0.15]^2 per node, then `steps` IMEX steps of size dt.
inline InitialCondition pilot_run_initial(const Mesh& mesh, int steps, std::uint64_t seed, double dt = 1e-2) {
    const ModelSpec model = oregonator_model(OregonatorRegime::Oscillatory);
    const SystemOperators ops(mesh, model);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 0.15);
    Vector w(ops.dofs());
    for (Index i = 0; i < w.size(); ++i) w(i) = unif(rng);
    const Stepper stepper(ops, {Scheme::ImexEuler, dt});
    for (int n = 0; n < steps; ++n) {
        w = stepper.advance(w);
        if (!w.allFinite()) throw NumericalError("pilot_run_initial: state became non-finite at step " + std::to_string(n + 1));
    }
    InitialCondition ic;
    ic.components = 2;
    ic.values = std::move(w);
    ic.provenance = IcProvenance::PilotRun;
    ic.metadata = {{"pilot_steps", static_cast<double>(steps)}, {"pilot_seed", static_cast<double>(seed)}, {"pilot_dt", dt}};
    return ic;
}

}  // namespace statfem
