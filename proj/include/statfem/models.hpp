#pragma once

#include "statfem/linalg.hpp"
#include "statfem/mesh.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace statfem {

/// Reaction evaluated where the closure is singular (Oregonator at u = -q).
class SingularReactionError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

enum class BoundaryCondition { Neumann, Dirichlet };

/// Nodal reaction r: R^s -> R^s and its Jacobian (row-major s x s).
using ReactionFn = std::function<void(std::span<const double> state, std::span<double> out)>;
using ReactionJacobianFn = std::function<void(std::span<const double> state, std::span<double> jac)>;

struct ModelSpec {
    std::string name;
    int components = 1;
    std::vector<double> diffusion;
    ReactionFn reaction;
    ReactionJacobianFn jacobian;
    std::map<std::string, double> parameters;
    BoundaryCondition boundary = BoundaryCondition::Neumann;
    /// Box of physically meaningful states, one (lo, hi) per component.
    std::vector<std::pair<double, double>> physical_range;
};

enum class IcProvenance { Exact, Blurred, SinusoidPerturbed, PilotRun };

inline const char* to_string(IcProvenance p) {
    switch (p) {
        case IcProvenance::Exact: return "exact";
        case IcProvenance::Blurred: return "blurred";
        case IcProvenance::SinusoidPerturbed: return "sinusoid-perturbed";
        case IcProvenance::PilotRun: return "pilot-run";
    }
    return "unknown";
}

/// Concatenated nodal values, all of component 0 first, then component 1, ...
struct InitialCondition {
    Vector values;
    int components = 1;
    IcProvenance provenance = IcProvenance::Exact;
    std::map<std::string, double> metadata;

    Index nodes() const { return values.size() / components; }
    auto component(int c) { return values.segment(c * nodes(), nodes()); }
    auto component(int c) const { return values.segment(c * nodes(), nodes()); }
};

inline ModelSpec poisson_model() {
    ModelSpec m;
    m.name = "poisson";
    m.components = 1;
    m.diffusion = {1.0};
    m.reaction = [](std::span<const double>, std::span<double> r) { r[0] = 0.0; };
    m.jacobian = [](std::span<const double>, std::span<double> J) { J[0] = 0.0; };
    m.boundary = BoundaryCondition::Dirichlet;
    m.physical_range = {{-1.0, 1.0}};
    return m;
}

/// Scalar heat equation with the given diffusivity and no reaction.
inline ModelSpec heat_model(double diffusivity, int components = 1) {
    ModelSpec m;
    m.name = "heat";
    m.components = components;
    m.diffusion.assign(components, diffusivity);
    m.reaction = [](std::span<const double> w, std::span<double> r) {
        for (std::size_t i = 0; i < w.size(); ++i) r[i] = 0.0;
    };
    m.jacobian = [](std::span<const double> w, std::span<double> J) {
        for (std::size_t i = 0; i < w.size() * w.size(); ++i) J[i] = 0.0;
    };
    m.physical_range.assign(components, {-1.0, 1.0});
    return m;
}

/// Two-population cell model on [0, 1300] um, hours.
inline ModelSpec cell_rd_model() {
    constexpr double D = 700.0, ku = 0.025, kv = 0.0725;
    ModelSpec m;
    m.name = "cell";
    m.components = 2;
    m.diffusion = {D, D};
    m.parameters = {{"D", D}, {"k_u", ku}, {"k_v", kv}};
    m.reaction = [](std::span<const double> w, std::span<double> r) {
        const double u = w[0], v = w[1], free = 1.0 - u - v;
        r[0] = -ku * u + 2.0 * kv * v * free;
        r[1] = ku * u - kv * v * free;
    };
    m.jacobian = [](std::span<const double> w, std::span<double> J) {
        const double u = w[0], v = w[1];
        J[0] = -ku - 2.0 * kv * v;
        J[1] = 2.0 * kv * (1.0 - u - 2.0 * v);
        J[2] = ku + kv * v;
        J[3] = -kv * (1.0 - u - 2.0 * v);
    };
    m.physical_range = {{0.0, 0.5}, {0.0, 0.5}};
    return m;
}

enum class OregonatorRegime { Spiral, Oscillatory };

inline ModelSpec oregonator_model(OregonatorRegime regime) {
    double f, q, eps, Du, Dv;
    if (regime == OregonatorRegime::Spiral) {
        f = 2.0, q = 0.002, eps = 0.02, Du = 1.0, Dv = 0.6;
    } else {
        f = 0.95, q = 0.002, eps = 0.75, Du = 0.001, Dv = 0.001;
    }
    ModelSpec m;
    m.name = regime == OregonatorRegime::Spiral ? "oregonator-spiral" : "oregonator-oscillatory";
    m.components = 2;
    m.diffusion = {Du, Dv};
    m.parameters = {{"f", f}, {"q", q}, {"epsilon", eps}, {"D_u", Du}, {"D_v", Dv}};
    auto guard = [q](double u) {
        if (!(std::abs(u + q) > 1e-12))
            throw SingularReactionError("oregonator: reaction singular at u = -q");
    };
    m.reaction = [f, q, eps, guard](std::span<const double> w, std::span<double> r) {
        const double u = w[0], v = w[1];
        guard(u);
        r[0] = (u * (1.0 - u) - f * v * (u - q) / (u + q)) / eps;
        r[1] = u - v;
    };
    m.jacobian = [f, q, eps, guard](std::span<const double> w, std::span<double> J) {
        const double u = w[0], v = w[1];
        guard(u);
        const double s = u + q;
        J[0] = (1.0 - 2.0 * u - f * v * 2.0 * q / (s * s)) / eps;
        J[1] = -f * (u - q) / (s * eps);
        J[2] = 1.0;
        J[3] = -1.0;
    };
    m.physical_range = {{0.0, 1.0}, {0.0, 0.5}};
    return m;
}

inline InitialCondition cell_rd_initial(const Mesh& mesh) {
    if (mesh.dim() != 1 || std::abs(mesh.domain.lower[0]) > 1e-12 || std::abs(mesh.domain.upper[0] - 1300.0) > 1e-9)
        throw std::invalid_argument("cell_rd_initial: requires a 1D mesh on [0, 1300]");
    const Index n = mesh.num_nodes();
    InitialCondition ic;
    ic.components = 2;
    ic.values = Vector::Zero(2 * n);
    for (Index i = 0; i < n; ++i) {
        const double x = mesh.nodes[i][0];
        if (x >= 400.0 && x <= 900.0) ic.values(i) = ic.values(n + i) = 0.055;
    }
    return ic;
}

/// Spiral seed: activator raised in a thin angular sector about the domain
/// centre and an azimuthal gradient in the inhibitor.
inline InitialCondition spiral_initial(const Mesh& mesh, const ModelSpec& model) {
    if (mesh.dim() != 2) throw std::invalid_argument("spiral_initial: requires a 2D mesh");
    const double f = model.parameters.at("f"), q = model.parameters.at("q");
    const double rest = q * (f + 1.0) / (f - 1.0);
    const double cx = 0.5 * (mesh.domain.lower[0] + mesh.domain.upper[0]);
    const double cy = 0.5 * (mesh.domain.lower[1] + mesh.domain.upper[1]);
    const Index n = mesh.num_nodes();
    InitialCondition ic;
    ic.components = 2;
    ic.values.resize(2 * n);
    for (Index i = 0; i < n; ++i) {
        double theta = std::atan2(mesh.nodes[i][1] - cy, mesh.nodes[i][0] - cx);
        if (theta < 0.0) theta += 2.0 * std::numbers::pi;
        ic.values(i) = (theta >= 0.0 && theta <= 0.5) ? 0.8 : rest;
        ic.values(n + i) = rest + theta / (8.0 * std::numbers::pi * f);
    }
    return ic;
}

/// Heat smoothing of every component (Neumann) for the given duration. Implicit Euler with a
/// lumped mass matrix keeps the blurred field inside the range of the input.
inline InitialCondition blur_initial(const InitialCondition& ic, double diffusivity, double duration, const Mesh& mesh,
                                     int steps = 20) {
    if (!(diffusivity > 0.0) || duration < 0.0) throw std::invalid_argument("blur_initial: invalid diffusivity or duration");
    InitialCondition out = ic;
    out.provenance = IcProvenance::Blurred;
    out.metadata["blur_diffusivity"] = diffusivity;
    out.metadata["blur_duration"] = duration;
    if (duration == 0.0) return out;
    const Vector lumped = assemble_mass(mesh) * Vector::Ones(mesh.num_nodes());
    const SparseMatrix A = assemble_stiffness(mesh);
    const double dt = duration / steps;
    SparseMatrix lhs = (dt * diffusivity) * A;
    for (Index i = 0; i < lumped.size(); ++i) lhs.coeffRef(i, i) += lumped(i);
    const Factorization F(lhs);
    for (int c = 0; c < ic.components; ++c) {
        Vector u = ic.component(c);
        for (int s = 0; s < steps; ++s) u = F.solve(Vector(lumped.cwiseProduct(u)));
        out.component(c) = u;
    }
    return out;
}

/// u0 += amp * (1 + sin(pi x / 50 + z1) sin(pi y / 50 + z2)); v unchanged.
inline InitialCondition sinusoid_perturb(const InitialCondition& ic, double amplitude, double phase1, double phase2,
                                         const Mesh& mesh) {
    if (mesh.dim() != 2 || std::abs(mesh.domain.length(0) - 50.0) > 1e-9 || std::abs(mesh.domain.length(1) - 50.0) > 1e-9 ||
        std::abs(mesh.domain.lower[0]) > 1e-12 || std::abs(mesh.domain.lower[1]) > 1e-12)
        throw std::invalid_argument("sinusoid_perturb: requires a 2D mesh on [0, 50]^2");
    InitialCondition out = ic;
    out.provenance = IcProvenance::SinusoidPerturbed;
    out.metadata["perturb_amplitude"] = amplitude;
    out.metadata["perturb_phase1"] = phase1;
    out.metadata["perturb_phase2"] = phase2;
    const double k = std::numbers::pi / 50.0;
    for (Index i = 0; i < mesh.num_nodes(); ++i) {
        const auto& p = mesh.nodes[i];
        out.values(i) += amplitude * (1.0 + std::sin(k * p[0] + phase1) * std::sin(k * p[1] + phase2));
    }
    return out;
}

/// Jacobian consistency check against central differences; returns max relative error.
inline double jacobian_fd_error(const ModelSpec& model, std::span<const double> state, double step = 1e-6) {
    const int s = model.components;
    std::vector<double> J(s * s), rp(s), rm(s), w(state.begin(), state.end());
    model.jacobian(state, J);
    double worst = 0.0;
    for (int j = 0; j < s; ++j) {
        const double h = step * std::max(1.0, std::abs(w[j]));
        const double orig = w[j];
        w[j] = orig + h;
        model.reaction(w, rp);
        w[j] = orig - h;
        model.reaction(w, rm);
        w[j] = orig;
        for (int i = 0; i < s; ++i) {
            const double fd = (rp[i] - rm[i]) / (2.0 * h);
            const double denom = std::max(std::abs(J[i * s + j]), std::max(std::abs(fd), 1e-8));
            worst = std::max(worst, std::abs(fd - J[i * s + j]) / denom);
        }
    }
    return worst;
}

}  // namespace statfem
