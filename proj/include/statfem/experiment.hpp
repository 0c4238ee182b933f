#pragma once

#include "statfem/diagnostics.hpp"
#include "statfem/filters.hpp"
#include "statfem/gp_forcing.hpp"
#include "statfem/hyperestimation.hpp"
#include "statfem/integrators.hpp"
#include "statfem/io.hpp"
#include "statfem/mesh.hpp"
#include "statfem/models.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace statfem {

inline constexpr const char* code_version = "0.1.0";

/// splitmix64 of (master, tag hash): independent streams from one master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag) {
    std::uint64_t h = 1469598103934665603ull;
    for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    std::uint64_t z = master + 0x9e3779b97f4a7c15ull * (h | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

struct ExperimentConfig {
    std::string name = "custom";
    std::string model = "cell";  // cell | oregonator-spiral | oregonator-oscillatory
    int cells = 200;

    double dt = 0.1;
    int steps = 600;
    Scheme scheme = Scheme::CrankNicolson;

    FilterConfig filter{};
    bool full_reference = false;

    double rho = 2e-3;
    double length = 100.0;
    std::vector<std::string> forced_components{"u", "v"};

    double sigma = 0.01;
    std::vector<std::string> obs_components{"u", "v"};
    Index obs_count = 0;  // 0: every node
    std::uint64_t obs_seed = 7;
    int obs_stride = 1;
    std::vector<double> obs_times;  // overrides the stride when non-empty
    bool obs_interpolate = false;
    std::string obs_file;  // external CSV (ingest_external_csv schema)

    bool truth_stochastic = false;
    double truth_rho = 2e-3;
    Index truth_rank = 32;
    double truth_sigma = 0.01;
    Scheme truth_scheme = Scheme::CrankNicolson;

    std::string ic_truth = "cell";    // cell | spiral | pilot
    std::string ic_filter = "exact";  // exact | blurred | sinusoid
    double blur_time = 0.1;
    double blur_diffusivity = 1.0;
    double perturb_amplitude = 0.02;
    int pilot_steps = 100000;
    double pilot_dt = 1e-2;
    std::string pilot_cache;

    bool estimation = false;
    HyperPrior prior{};

    std::vector<double> arm_dts;
    std::vector<std::string> arm_schemes;
    std::vector<double> arm_rhos;
    bool prior_arm = false;

    std::uint64_t seed = 1;
    std::string out_dir;
    int snapshot_every = 0;
    int series_every = 0;
    int error_every = 1;

    int components() const { return 2; }
    std::vector<std::string> component_names() const { return {"u", "v"}; }

    static ExperimentConfig from_config(const Config& c);
    Config to_config() const;
    void validate() const;
};

namespace detail {

inline const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys = {
        "run.name", "run.seed", "model.name", "mesh.cells", "time.dt", "time.steps", "time.scheme",
        "filter.k", "filter.kprime", "filter.propagator", "filter.noise", "filter.divergence_threshold",
        "filter.full_reference", "forcing.rho", "forcing.length", "forcing.components", "obs.sigma",
        "obs.components", "obs.count", "obs.seed", "obs.stride", "obs.times", "obs.rows", "obs.file",
        "truth.stochastic", "truth.rho", "truth.rank", "truth.sigma", "truth.scheme", "ic.truth", "ic.filter",
        "ic.blur_time", "ic.blur_diffusivity", "ic.perturb_amplitude", "ic.pilot_steps", "ic.pilot_dt",
        "ic.pilot_cache", "estimation.enabled", "estimation.rho_location", "estimation.rho_scale",
        "estimation.sigma_location", "estimation.sigma_scale", "arms.dt", "arms.schemes", "arms.rho",
        "arms.prior", "output.dir", "output.snapshot_every", "output.series_every", "output.error_every"};
    return keys;
}

inline Scheme parse_scheme(const std::string& s) {
    if (s == "cn" || s == "crank-nicolson") return Scheme::CrankNicolson;
    if (s == "imex") return Scheme::ImexEuler;
    throw ConfigError("unknown scheme '" + s + "' (cn | imex)");
}

inline const char* scheme_name(Scheme s) { return s == Scheme::CrankNicolson ? "cn" : "imex"; }

inline std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

inline std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + detail::format_double(v[i]);
    return out;
}

inline int component_index(const std::string& name) {
    if (name == "u") return 0;
    if (name == "v") return 1;
    throw ConfigError("unknown component '" + name + "' (u | v)");
}

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_config(const Config& c) {
    for (const auto& [k, v] : c.entries())
        if (!detail::known_keys().count(k) && k.rfind("meta.", 0) != 0) throw ConfigError("unknown config key '" + k + "'");
    ExperimentConfig e;
    e.name = c.get("run.name", e.name);
    e.seed = static_cast<std::uint64_t>(c.get_int("run.seed", static_cast<long long>(e.seed)));
    e.model = c.get("model.name", e.model);
    e.cells = static_cast<int>(c.get_int("mesh.cells", e.cells));
    e.dt = c.get_double("time.dt", e.dt);
    e.steps = static_cast<int>(c.get_int("time.steps", e.steps));
    e.scheme = detail::parse_scheme(c.get("time.scheme", detail::scheme_name(e.scheme)));
    e.filter.rank = c.get_int("filter.k", e.filter.rank);
    e.filter.forcing_rank = c.get_int("filter.kprime", e.filter.forcing_rank);
    const std::string prop = c.get("filter.propagator", "cn-tangent");
    if (prop == "cn-tangent")
        e.filter.propagator = PropagatorVariant::CnTangent;
    else if (prop == "paper-literal")
        e.filter.propagator = PropagatorVariant::PaperLiteral;
    else
        throw ConfigError("filter.propagator must be cn-tangent or paper-literal");
    const std::string noise = c.get("filter.noise", "sqrt-dt");
    if (noise == "sqrt-dt")
        e.filter.noise = NoiseScaling::SqrtDt;
    else if (noise == "paper-literal-dt")
        e.filter.noise = NoiseScaling::PaperLiteralDt;
    else
        throw ConfigError("filter.noise must be sqrt-dt or paper-literal-dt");
    e.filter.divergence_threshold = c.get_double("filter.divergence_threshold", e.filter.divergence_threshold);
    e.full_reference = c.get_bool("filter.full_reference", e.full_reference);
    e.rho = c.get_double("forcing.rho", e.rho);
    e.length = c.get_double("forcing.length", e.length);
    if (c.has("forcing.components")) e.forced_components = c.get_list("forcing.components");
    e.sigma = c.get_double("obs.sigma", e.sigma);
    if (c.has("obs.components")) e.obs_components = c.get_list("obs.components");
    e.obs_count = c.get_int("obs.count", e.obs_count);
    e.obs_seed = static_cast<std::uint64_t>(c.get_int("obs.seed", static_cast<long long>(e.obs_seed)));
    e.obs_stride = static_cast<int>(c.get_int("obs.stride", e.obs_stride));
    if (c.has("obs.times")) e.obs_times = c.get_double_list("obs.times");
    const std::string rows = c.get("obs.rows", "nearest");
    if (rows != "nearest" && rows != "interpolate") throw ConfigError("obs.rows must be nearest or interpolate");
    e.obs_interpolate = rows == "interpolate";
    e.obs_file = c.get("obs.file", "");
    e.truth_stochastic = c.get_bool("truth.stochastic", e.truth_stochastic);
    e.truth_rho = c.get_double("truth.rho", e.rho);
    e.truth_rank = c.get_int("truth.rank", e.filter.forcing_rank);
    e.truth_sigma = c.get_double("truth.sigma", e.sigma);
    e.truth_scheme = detail::parse_scheme(c.get("truth.scheme", detail::scheme_name(e.scheme)));
    e.ic_truth = c.get("ic.truth", e.ic_truth);
    e.ic_filter = c.get("ic.filter", e.ic_filter);
    e.blur_time = c.get_double("ic.blur_time", e.blur_time);
    e.blur_diffusivity = c.get_double("ic.blur_diffusivity", e.blur_diffusivity);
    e.perturb_amplitude = c.get_double("ic.perturb_amplitude", e.perturb_amplitude);
    e.pilot_steps = static_cast<int>(c.get_int("ic.pilot_steps", e.pilot_steps));
    e.pilot_dt = c.get_double("ic.pilot_dt", e.pilot_dt);
    e.pilot_cache = c.get("ic.pilot_cache", "");
    e.estimation = c.get_bool("estimation.enabled", e.estimation);
    e.prior.rho_location = c.get_double("estimation.rho_location", e.prior.rho_location);
    e.prior.rho_scale = c.get_double("estimation.rho_scale", e.prior.rho_scale);
    e.prior.sigma_location = c.get_double("estimation.sigma_location", e.prior.sigma_location);
    e.prior.sigma_scale = c.get_double("estimation.sigma_scale", e.prior.sigma_scale);
    if (c.has("arms.dt")) e.arm_dts = c.get_double_list("arms.dt");
    if (c.has("arms.schemes")) e.arm_schemes = c.get_list("arms.schemes");
    if (c.has("arms.rho")) e.arm_rhos = c.get_double_list("arms.rho");
    e.prior_arm = c.get_bool("arms.prior", e.prior_arm);
    e.out_dir = c.get("output.dir", "");
    e.snapshot_every = static_cast<int>(c.get_int("output.snapshot_every", e.snapshot_every));
    e.series_every = static_cast<int>(c.get_int("output.series_every", e.series_every));
    e.error_every = static_cast<int>(c.get_int("output.error_every", e.error_every));
    e.validate();
    return e;
}

inline Config ExperimentConfig::to_config() const {
    Config c;
    c.set("run.name", name);
    c.set("run.seed", static_cast<long long>(seed));
    c.set("model.name", model);
    c.set("mesh.cells", cells);
    c.set("time.dt", dt);
    c.set("time.steps", steps);
    c.set("time.scheme", detail::scheme_name(scheme));
    c.set("filter.k", static_cast<long long>(filter.rank));
    c.set("filter.kprime", static_cast<long long>(filter.forcing_rank));
    c.set("filter.propagator", filter.propagator == PropagatorVariant::CnTangent ? "cn-tangent" : "paper-literal");
    c.set("filter.noise", filter.noise == NoiseScaling::SqrtDt ? "sqrt-dt" : "paper-literal-dt");
    c.set("filter.divergence_threshold", filter.divergence_threshold);
    c.set("filter.full_reference", full_reference);
    c.set("forcing.rho", rho);
    c.set("forcing.length", length);
    c.set("forcing.components", detail::join(forced_components));
    c.set("obs.sigma", sigma);
    c.set("obs.components", detail::join(obs_components));
    c.set("obs.count", static_cast<long long>(obs_count));
    c.set("obs.seed", static_cast<long long>(obs_seed));
    c.set("obs.stride", obs_stride);
    c.set("obs.times", detail::join(obs_times));
    c.set("obs.rows", obs_interpolate ? "interpolate" : "nearest");
    c.set("obs.file", obs_file);
    c.set("truth.stochastic", truth_stochastic);
    c.set("truth.rho", truth_rho);
    c.set("truth.rank", static_cast<long long>(truth_rank));
    c.set("truth.sigma", truth_sigma);
    c.set("truth.scheme", detail::scheme_name(truth_scheme));
    c.set("ic.truth", ic_truth);
    c.set("ic.filter", ic_filter);
    c.set("ic.blur_time", blur_time);
    c.set("ic.blur_diffusivity", blur_diffusivity);
    c.set("ic.perturb_amplitude", perturb_amplitude);
    c.set("ic.pilot_steps", pilot_steps);
    c.set("ic.pilot_dt", pilot_dt);
    c.set("ic.pilot_cache", pilot_cache);
    c.set("estimation.enabled", estimation);
    c.set("estimation.rho_location", prior.rho_location);
    c.set("estimation.rho_scale", prior.rho_scale);
    c.set("estimation.sigma_location", prior.sigma_location);
    c.set("estimation.sigma_scale", prior.sigma_scale);
    c.set("arms.dt", detail::join(arm_dts));
    c.set("arms.schemes", detail::join(arm_schemes));
    c.set("arms.rho", detail::join(arm_rhos));
    c.set("arms.prior", prior_arm);
    c.set("output.dir", out_dir);
    c.set("output.snapshot_every", snapshot_every);
    c.set("output.series_every", series_every);
    c.set("output.error_every", error_every);
    return c;
}

inline void ExperimentConfig::validate() const {
    if (model != "cell" && model != "oregonator-spiral" && model != "oregonator-oscillatory")
        throw ConfigError("model.name must be cell, oregonator-spiral or oregonator-oscillatory");
    if (cells < 1) throw ConfigError("mesh.cells must be positive");
    if (!(dt > 0.0)) throw ConfigError("time.dt must be positive");
    if (steps < 0) throw ConfigError("time.steps must be nonnegative");
    if (filter.rank < 1 || filter.forcing_rank < 1) throw ConfigError("filter.k and filter.kprime must be positive");
    if (!(rho > 0.0) || !(length > 0.0)) throw ConfigError("forcing.rho and forcing.length must be positive");
    if (!(sigma > 0.0)) throw ConfigError("obs.sigma must be positive");
    if (truth_sigma < 0.0) throw ConfigError("truth.sigma must be nonnegative");
    if (obs_count < 0) throw ConfigError("obs.count must be nonnegative");
    if (obs_stride < 1) throw ConfigError("obs.stride must be positive");
    if (forced_components.empty()) throw ConfigError("forcing.components must name at least one component");
    for (const auto& s : forced_components) detail::component_index(s);
    for (const auto& s : obs_components) detail::component_index(s);
    if (ic_truth != "cell" && ic_truth != "spiral" && ic_truth != "pilot") throw ConfigError("ic.truth must be cell, spiral or pilot");
    if (ic_filter != "exact" && ic_filter != "blurred" && ic_filter != "sinusoid")
        throw ConfigError("ic.filter must be exact, blurred or sinusoid");
    if ((model == "cell") != (ic_truth == "cell")) throw ConfigError("ic.truth=cell pairs with model.name=cell only");
    if (error_every < 1) throw ConfigError("output.error_every must be positive");
    for (double d : arm_dts)
        if (!(d > 0.0)) throw ConfigError("arms.dt entries must be positive");
    for (const auto& s : arm_schemes) detail::parse_scheme(s);
    for (double r : arm_rhos)
        if (!(r > 0.0)) throw ConfigError("arms.rho entries must be positive");
    prior.validate();
}

// ---------------------------------------------------------------------------
// Presets

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"cell", "spiral", "oscillatory", "estimation", "divergence"};
    return names;
}

/// Named case-study configuration; `desk` shrinks 2D studies to a 64 x 64
/// mesh with a shortened horizon.
inline Config preset(const std::string& name, bool desk = false) {
    Config c;
    c.set("run.name", name);
    c.set("run.seed", 1);
    if (name == "cell") {
        c.set("model.name", "cell");
        c.set("mesh.cells", 200);
        c.set("time.dt", 0.1);
        c.set("time.steps", 600);
        c.set("time.scheme", "cn");
        c.set("filter.k", 32);
        c.set("filter.kprime", 32);
        c.set("filter.full_reference", true);
        c.set("forcing.rho", 2e-3);
        c.set("forcing.length", 100.0);
        c.set("forcing.components", "u,v");
        c.set("obs.sigma", 0.01);
        c.set("obs.components", "u,v");
        c.set("obs.count", 0);
        c.set("obs.times", "0,16,32,48");
        c.set("truth.stochastic", true);
        c.set("ic.truth", "cell");
        c.set("ic.filter", "exact");
        c.set("output.snapshot_every", 50);
        return c;
    }
    if (name == "spiral") {
        c.set("model.name", "oregonator-spiral");
        c.set("mesh.cells", desk ? 64 : 128);
        c.set("time.dt", 1e-3);
        c.set("time.steps", desk ? 2000 : 10000);
        c.set("time.scheme", "cn");
        c.set("filter.k", desk ? 64 : 250);
        c.set("filter.kprime", desk ? 32 : 150);
        c.set("forcing.rho", 1e-3);
        c.set("forcing.length", 5.0);
        c.set("forcing.components", "v");
        c.set("obs.sigma", 0.01);
        c.set("obs.components", "v");
        c.set("obs.count", desk ? 254 : 1041);  // about 3% of the state dimension
        c.set("obs.stride", 5);
        c.set("truth.stochastic", false);
        c.set("ic.truth", "spiral");
        c.set("ic.filter", "blurred");
        c.set("ic.blur_time", 0.1);
        c.set("ic.blur_diffusivity", 1.0);
        c.set("arms.prior", true);
        c.set("output.snapshot_every", desk ? 500 : 1000);
        c.set("output.error_every", 5);
        return c;
    }
    if (name == "oscillatory") {
        c.set("model.name", "oregonator-oscillatory");
        c.set("mesh.cells", desk ? 64 : 256);
        c.set("time.dt", 1e-2);
        c.set("time.steps", desk ? 200 : 1000);
        c.set("time.scheme", "cn");
        c.set("filter.k", desk ? 64 : 128);
        c.set("filter.kprime", desk ? 32 : 64);
        c.set("forcing.rho", 1e-3);
        c.set("forcing.length", 10.0);
        c.set("forcing.components", "u");
        c.set("arms.rho", "0.01,0.001,0.0002");
        c.set("arms.prior", true);
        c.set("obs.sigma", 0.01);
        c.set("obs.components", "u");
        c.set("obs.count", desk ? 128 : 512);
        c.set("obs.stride", 1);
        c.set("truth.stochastic", false);
        c.set("ic.truth", "pilot");
        c.set("ic.filter", "sinusoid");
        c.set("ic.perturb_amplitude", 0.02);
        c.set("ic.pilot_steps", desk ? 10000 : 100000);
        c.set("output.snapshot_every", desk ? 50 : 100);
        return c;
    }
    if (name == "estimation") {
        c.set("model.name", "oregonator-oscillatory");
        c.set("mesh.cells", desk ? 64 : 128);
        c.set("time.dt", 1e-2);
        c.set("time.steps", desk ? 200 : 1000);
        c.set("time.scheme", "imex");
        c.set("filter.k", desk ? 64 : 128);
        c.set("filter.kprime", desk ? 64 : 128);
        c.set("forcing.rho", 1e-3);
        c.set("forcing.length", 10.0);
        c.set("forcing.components", "u");
        c.set("arms.dt", "0.01,0.0001");
        c.set("obs.sigma", 0.01);
        c.set("obs.components", "u");
        c.set("obs.count", 512);
        c.set("obs.stride", 1);
        c.set("truth.stochastic", true);
        c.set("truth.rho", 1e-3);
        c.set("ic.truth", "pilot");
        c.set("ic.filter", "exact");
        c.set("ic.pilot_steps", desk ? 10000 : 100000);
        c.set("estimation.enabled", true);
        return c;
    }
    if (name == "divergence") {
        c.set("model.name", "oregonator-spiral");
        c.set("mesh.cells", desk ? 64 : 128);
        c.set("time.dt", 1e-3);
        c.set("time.steps", desk ? 200 : 1000);
        c.set("time.scheme", "cn");
        c.set("truth.scheme", "cn");
        c.set("arms.schemes", "imex,cn");
        c.set("filter.k", desk ? 64 : 512);
        c.set("filter.kprime", desk ? 32 : 128);
        c.set("forcing.rho", 1e-3);
        c.set("forcing.length", 10.0);
        c.set("forcing.components", "v");
        c.set("obs.sigma", 0.01);
        c.set("obs.components", "v");
        c.set("obs.count", 512);
        c.set("obs.stride", 1);
        c.set("truth.stochastic", false);
        c.set("ic.truth", "spiral");
        c.set("ic.filter", "exact");
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// Problem setup

struct Problem {
    Mesh mesh;
    std::unique_ptr<SystemOperators> ops;

    Index nodes() const { return mesh.num_nodes(); }
    Index dofs() const { return ops->dofs(); }
};

inline ModelSpec make_model(const std::string& name) {
    if (name == "cell") return cell_rd_model();
    if (name == "oregonator-spiral") return oregonator_model(OregonatorRegime::Spiral);
    if (name == "oregonator-oscillatory") return oregonator_model(OregonatorRegime::Oscillatory);
    throw ConfigError("unknown model '" + name + "'");
}

inline Problem make_problem(const ExperimentConfig& cfg) {
    Problem p;
    if (cfg.model == "cell")
        p.mesh = build_mesh(Domain::interval(0.0, 1300.0), cfg.cells);
    else
        p.mesh = build_mesh(Domain::rectangle(0.0, 50.0, 0.0, 50.0), cfg.cells);
    p.ops = std::make_unique<SystemOperators>(p.mesh, make_model(cfg.model));
    return p;
}

inline ForcingSpec forcing_spec(const ExperimentConfig& cfg, double rho, Index rank) {
    ForcingSpec s;
    s.hyper = {rho, cfg.length};
    s.forced.assign(cfg.components(), false);
    for (const auto& c : cfg.forced_components) s.forced[detail::component_index(c)] = true;
    s.rank = rank;
    return s;
}

/// Truth initial condition (pilot runs are cached on disk when requested).
inline InitialCondition truth_initial(const ExperimentConfig& cfg, const Problem& p) {
    if (cfg.ic_truth == "cell") return cell_rd_initial(p.mesh);
    if (cfg.ic_truth == "spiral") return spiral_initial(p.mesh, p.ops->model());
    if (!cfg.pilot_cache.empty() && std::filesystem::exists(cfg.pilot_cache)) {
        std::ifstream in(cfg.pilot_cache);
        InitialCondition ic;
        ic.values = read_field(in, &ic.components);
        if (ic.values.size() != p.dofs()) throw ConfigError("ic.pilot_cache does not match the mesh");
        ic.provenance = IcProvenance::PilotRun;
        return ic;
    }
    InitialCondition ic = pilot_run_initial(p.mesh, cfg.pilot_steps, derive_seed(cfg.seed, "pilot"), cfg.pilot_dt);
    if (!cfg.pilot_cache.empty()) {
        std::ofstream out(cfg.pilot_cache);
        write_field(out, p.mesh, ic.values, cfg.component_names());
    }
    return ic;
}

inline InitialCondition filter_initial(const ExperimentConfig& cfg, const Problem& p, const InitialCondition& truth) {
    if (cfg.ic_filter == "exact") return truth;
    if (cfg.ic_filter == "blurred") return blur_initial(truth, cfg.blur_diffusivity, cfg.blur_time, p.mesh);
    std::mt19937_64 rng(derive_seed(cfg.seed, "phase"));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double z1 = normal(rng), z2 = normal(rng);
    return sinusoid_perturb(truth, cfg.perturb_amplitude, z1, z2, p.mesh);
}

/// Seeded uniform sample of distinct nodes (all nodes when count is 0 or >= n), sorted.
inline std::vector<Index> sample_nodes(Index n, Index count, std::uint64_t seed) {
    std::vector<Index> idx(n);
    std::iota(idx.begin(), idx.end(), Index{0});
    if (count == 0 || count >= n) return idx;
    std::mt19937_64 rng(seed);
    for (Index i = 0; i < count; ++i) {
        std::uniform_int_distribution<Index> pick(i, n - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline std::vector<ObservationSite> observation_sites(const ExperimentConfig& cfg, const Problem& p) {
    std::vector<ObservationSite> sites;
    if (cfg.obs_interpolate) {
        std::mt19937_64 rng(cfg.obs_seed);
        const Domain& d = p.mesh.domain;
        const Index count = cfg.obs_count > 0 ? cfg.obs_count : p.nodes();
        std::vector<Point> pts(count);
        for (auto& pt : pts)
            for (int a = 0; a < d.dim; ++a) pt[a] = std::uniform_real_distribution<double>(d.lower[a], d.upper[a])(rng);
        for (const auto& name : cfg.obs_components)
            for (const auto& pt : pts) sites.push_back({detail::component_index(name), pt});
        return sites;
    }
    const std::vector<Index> nodes = sample_nodes(p.nodes(), cfg.obs_count, cfg.obs_seed);
    for (const auto& name : cfg.obs_components)
        for (Index node : nodes) sites.push_back({detail::component_index(name), p.mesh.nodes[node]});
    return sites;
}

/// Steps carrying data, either from explicit times or every obs_stride steps.
inline std::vector<int> observation_steps(const ExperimentConfig& cfg, double dt) {
    std::vector<int> out;
    if (!cfg.obs_times.empty()) {
        for (double t : cfg.obs_times) {
            const int s = static_cast<int>(std::llround(t / dt));
            if (s < 0 || s > cfg.steps) throw ConfigError("obs.times entry outside the horizon");
            out.push_back(s);
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }
    for (int s = cfg.obs_stride; s <= cfg.steps; s += cfg.obs_stride) out.push_back(s);
    return out;
}

struct TruthAndData {
    std::vector<ObservationSite> sites;
    SparseMatrix H;
    DataStream data;
    std::map<int, Vector> truth;  // every error_every steps and at step 0
};

/// Integrates the truth (with GP forcing when configured) and draws
/// y = H w + N(0, truth_sigma^2 I) at the observation steps.
inline TruthAndData generate_truth_and_data(const ExperimentConfig& cfg, const Problem& p, const InitialCondition& ic,
                                            double dt) {
    TruthAndData out;
    out.sites = observation_sites(cfg, p);
    out.H = observation_operator(p.mesh, cfg.components(), out.sites, cfg.obs_interpolate);
    out.data.source = "synthetic";
    const Stepper stepper(*p.ops, {cfg.truth_scheme, dt});
    std::optional<LowRankRoot> root;
    if (cfg.truth_stochastic) {
        const Index rank = std::min<Index>(cfg.truth_rank, p.nodes());
        root = lowrank_root(p.mesh, forcing_spec(cfg, cfg.truth_rho, rank), p.ops->mass_single());
    }
    std::mt19937_64 forcing_rng(derive_seed(cfg.seed, "truth-forcing"));
    std::mt19937_64 noise_rng(derive_seed(cfg.seed, "obs-noise"));
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::vector<int> obs_steps = observation_steps(cfg, dt);
    std::size_t next_obs = 0;

    Vector w = ic.values;
    auto observe = [&](int step) {
        while (next_obs < obs_steps.size() && obs_steps[next_obs] < step) ++next_obs;
        if (next_obs < obs_steps.size() && obs_steps[next_obs] == step) {
            ObservationRecord rec;
            rec.step = step;
            rec.values = out.H * w;
            if (cfg.truth_sigma > 0.0)
                for (Index j = 0; j < rec.values.size(); ++j) rec.values(j) += cfg.truth_sigma * normal(noise_rng);
            out.data.records.push_back(std::move(rec));
        }
        if (step % cfg.error_every == 0 || step == cfg.steps) out.truth[step] = w;
    };
    observe(0);
    const Matrix forcing_root = root ? root->factor() : Matrix();
    Vector z(root ? forcing_root.cols() : 0);
    for (int n = 1; n <= cfg.steps; ++n) {
        if (root) {
            for (Index j = 0; j < z.size(); ++j) z(j) = normal(forcing_rng);
            const Vector e = std::sqrt(dt) * (forcing_root * z);
            w = stepper.advance(w, &e);
        } else {
            w = stepper.advance(w);
        }
        if (!w.allFinite()) throw NumericalError("generate_truth_and_data: truth became non-finite at step " + std::to_string(n));
        observe(n);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Case-study driver

/// Relative error of a low-rank arm against the full ExKF at one step, per component.
struct ReferenceError {
    int step = 0;
    std::vector<double> mean;
    std::vector<double> variance;
};

struct ArmResult {
    std::string name;
    double dt = 0.0;
    Scheme scheme = Scheme::CrankNicolson;
    double rho = 0.0;
    FilterResult filter;
    std::vector<EstimationRecord> estimates;
    std::vector<StepDiagnostics> prior_errors;  // prior arm only: errors of the deterministic path
    double seconds = 0.0;
    bool is_prior = false;
    bool is_full = false;
    /// Per-step errors against the full ExKF, when run.
    std::vector<ReferenceError> reference_errors;
};

struct CaseResult {
    ExperimentConfig config;
    std::vector<ArmResult> arms;
    bool any_divergence() const {
        for (const auto& a : arms)
            if (a.filter.divergence) return true;
        return false;
    }
    const ArmResult& arm(const std::string& name) const {
        for (const auto& a : arms)
            if (a.name == name) return a;
        throw std::out_of_range("no arm named " + name);
    }
};

namespace detail {

inline void ensure_dir(const std::filesystem::path& p) { std::filesystem::create_directories(p); }

inline std::string arm_label(const ExperimentConfig& cfg, double dt, Scheme scheme, double rho, bool multi_dt,
                             bool multi_scheme, bool multi_rho) {
    std::string label;
    auto add = [&](const std::string& s) { label += (label.empty() ? "" : "_") + s; };
    if (multi_dt) add("dt=" + detail::format_double(dt));
    if (multi_scheme) add(scheme_name(scheme));
    if (multi_rho) add("rho=" + detail::format_double(rho));
    (void)cfg;
    return label.empty() ? "filter" : label;
}

}  // namespace detail

/// Runs every arm of a case study and, when output.dir is set, writes the
/// output bundle (resolved config, diagnostics, estimates, fields, data).
inline CaseResult run_case_study(const ExperimentConfig& cfg_in) {
    cfg_in.validate();
    CaseResult result;
    result.config = cfg_in;
    const ExperimentConfig& cfg = result.config;
    const Problem prob = make_problem(cfg);
    const std::vector<std::string> names = cfg.component_names();
    const bool write = !cfg.out_dir.empty();
    const std::filesystem::path root_dir = cfg.out_dir;
    if (write) {
        detail::ensure_dir(root_dir);
        Config meta = cfg.to_config();
        meta.set("meta.version", code_version);
        meta.set("meta.dofs", static_cast<long long>(prob.dofs()));
        std::ofstream(root_dir / "run.cfg") << meta.to_string();
        std::ofstream mesh_out(root_dir / "mesh.txt");
        write_mesh(mesh_out, prob.mesh);
    }

    const InitialCondition ic_truth = truth_initial(cfg, prob);
    const InitialCondition ic_filter = filter_initial(cfg, prob, ic_truth);

    const std::vector<double> dts = cfg.arm_dts.empty() ? std::vector<double>{cfg.dt} : cfg.arm_dts;
    std::vector<Scheme> schemes;
    for (const auto& s : cfg.arm_schemes) schemes.push_back(detail::parse_scheme(s));
    if (schemes.empty()) schemes.push_back(cfg.scheme);
    const std::vector<double> rhos = cfg.arm_rhos.empty() ? std::vector<double>{cfg.rho} : cfg.arm_rhos;

    // Forcing roots depend only on the amplitude (and the fixed length-scale).
    const Index kf = std::min<Index>(cfg.filter.forcing_rank, prob.nodes());
    const LowRankRoot unit_root = lowrank_root(prob.mesh, forcing_spec(cfg, 1.0, kf), prob.ops->mass_single());

    for (double dt : dts) {
        const TruthAndData td = [&] {
            if (cfg.obs_file.empty()) return generate_truth_and_data(cfg, prob, ic_truth, dt);
            TruthAndData t;
            std::ifstream in(cfg.obs_file);
            if (!in) throw ConfigError("cannot open obs.file " + cfg.obs_file);
            IngestResult ing = ingest_external_csv(in, prob.mesh, names, dt, cfg.steps);
            for (const auto& w : ing.warnings) std::cerr << "warning: " << w << '\n';
            t.sites = ing.sites;
            t.H = observation_operator(prob.mesh, cfg.components(), t.sites, cfg.obs_interpolate);
            t.data = std::move(ing.stream);
            return t;
        }();
        const ObservationModel obs{td.H, cfg.sigma};
        const TruthLookup truth = [&td](int step) -> std::optional<Vector> {
            const auto it = td.truth.find(step);
            if (it == td.truth.end()) return std::nullopt;
            return it->second;
        };
        const std::string dt_tag = dts.size() > 1 ? "dt=" + detail::format_double(dt) : "";
        if (write) {
            const std::filesystem::path d = dt_tag.empty() ? root_dir : root_dir / dt_tag;
            detail::ensure_dir(d);
            std::ofstream data_out(d / "data.csv");
            write_data_csv(data_out, td.data, dt);
            std::ofstream sites_out(d / "sites.csv");
            write_sites_csv(sites_out, td.sites);
            if (td.truth.count(cfg.steps)) {
                std::ofstream tf(d / "truth_final.csv");
                write_field(tf, prob.mesh, td.truth.at(cfg.steps), names);
            }
        }

        // Dense full-ExKF reference (one per dt and scheme, at the base amplitude).
        std::map<int, std::pair<Vector, Vector>> reference;
        if (cfg.full_reference && prob.dofs() <= full_exkf_max_dim) {
            ArmResult full;
            full.name = dt_tag.empty() ? "full" : dt_tag + "_full";
            full.is_full = true;
            full.dt = dt;
            full.scheme = schemes.front();
            full.rho = rhos.front();
            const auto t0 = std::chrono::steady_clock::now();
            const Stepper stepper(*prob.ops, {schemes.front(), dt});
            const Matrix G = dense_forcing_covariance(prob.mesh, forcing_spec(cfg, rhos.front(), kf), prob.ops->mass_single());
            DenseState s0{ic_filter.values, Matrix::Zero(prob.dofs(), prob.dofs()), 0};
            auto store = [&](const DenseState& s) { reference[s.step] = {s.mean, s.cov.diagonal()}; };
            DenseState first = s0;
            if (const ObservationRecord* rec = td.data.find(0)) first = full_exkf_update(s0, obs, rec->values);
            store(first);
            const FilterConfig fc = cfg.filter;
            DenseState s = first;
            for (int n = 1; n <= cfg.steps; ++n) {
                const ObservationRecord* rec = td.data.find(n);
                s = full_exkf_step(s, stepper, G, obs, rec ? &rec->values : nullptr, fc);
                store(s);
            }
            full.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.arms.push_back(std::move(full));
        }

        for (Scheme scheme : schemes) {
            const Stepper stepper(*prob.ops, {scheme, dt});
            for (double rho : rhos) {
                ArmResult arm;
                arm.dt = dt;
                arm.scheme = scheme;
                arm.rho = rho;
                arm.name = detail::arm_label(cfg, dt, scheme, rho, dts.size() > 1, schemes.size() > 1, rhos.size() > 1);
                LowRankRoot forcing = unit_root;
                forcing.rho = rho;
                forcing.kernel_eigenvalues = unit_root.kernel_eigenvalues * (rho * rho);
                const std::filesystem::path arm_dir = root_dir / arm.name;
                if (write) detail::ensure_dir(arm_dir);
                std::ofstream mean_series, var_series;
                if (write && cfg.series_every > 0) {
                    mean_series.open(arm_dir / "mean.txt");
                    var_series.open(arm_dir / "variance.txt");
                }
                RunOptions ro;
                ro.components = cfg.components();
                ro.truth = truth;
                ro.observer = [&](const GaussianState& s, const StepDiagnostics& d) {
                    if (!reference.empty() && reference.count(s.step)) {
                        const auto& [rm, rv] = reference.at(s.step);
                        const Vector var = variance_field(s.factor);
                        const Index n = prob.nodes();
                        ReferenceError re;
                        re.step = s.step;
                        for (int c = 0; c < cfg.components(); ++c) {
                            re.mean.push_back(relative_error(s.mean.segment(c * n, n), rm.segment(c * n, n)));
                            re.variance.push_back(relative_error(var.segment(c * n, n), rv.segment(c * n, n)));
                        }
                        arm.reference_errors.push_back(std::move(re));
                    }
                    if (!write) return;
                    if (cfg.series_every > 0 && s.step % cfg.series_every == 0) {
                        write_series_row(mean_series, s.step, d.time, s.mean);
                        write_series_row(var_series, s.step, d.time, variance_field(s.factor));
                    }
                    if (cfg.snapshot_every > 0 && (s.step % cfg.snapshot_every == 0 || s.step == cfg.steps)) {
                        std::ofstream fm(arm_dir / ("mean_" + std::to_string(s.step) + ".csv"));
                        write_field(fm, prob.mesh, s.mean, names);
                        std::ofstream fv(arm_dir / ("variance_" + std::to_string(s.step) + ".csv"));
                        write_field(fv, prob.mesh, variance_field(s.factor), names);
                    }
                };
                GaussianState init{ic_filter.values, Matrix::Zero(prob.dofs(), cfg.filter.rank), 0};
                if (write && cfg.series_every > 0) {
                    write_series_row(mean_series, 0, 0.0, init.mean);
                    write_series_row(var_series, 0, 0.0, Vector::Zero(prob.dofs()));
                }
                const auto t0 = std::chrono::steady_clock::now();
                try {
                    if (cfg.estimation) {
                        EstimationResult er = run_filter_with_estimation(init, stepper, forcing, obs, td.data, cfg.steps,
                                                                         cfg.filter, cfg.prior, {}, ro, true);
                        arm.filter = std::move(er.filter);
                        arm.estimates = std::move(er.estimates);
                    } else {
                        arm.filter = run_filter(init, stepper, forcing, obs, td.data, cfg.steps, cfg.filter, ro);
                    }
                } catch (const FilterFailure& e) {
                    DivergenceReport dr;
                    dr.diverged = true;
                    dr.reason = std::string("numerical failure: ") + e.what();
                    arm.filter.divergence = DivergenceEvent{e.step(), dr};
                }
                arm.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                if (write) {
                    std::ofstream dcsv(arm_dir / "diagnostics.csv");
                    write_diagnostics_csv(dcsv, arm.filter.diagnostics, cfg.components());
                    if (cfg.estimation) {
                        std::ofstream ecsv(arm_dir / "estimates.csv");
                        write_estimates_csv(ecsv, arm.estimates);
                    }
                    if (!arm.reference_errors.empty()) {
                        std::ofstream rcsv(arm_dir / "reference_errors.csv");
                        rcsv << "step,time";
                        for (const auto& nm : names) rcsv << ",mean_rel_error_" << nm;
                        for (const auto& nm : names) rcsv << ",variance_rel_error_" << nm;
                        rcsv << '\n' << std::setprecision(12);
                        for (const auto& r : arm.reference_errors) {
                            rcsv << r.step << ',' << r.step * dt;
                            for (double v : r.mean) rcsv << ',' << v;
                            for (double v : r.variance) rcsv << ',' << v;
                            rcsv << '\n';
                        }
                    }
                    if (arm.filter.divergence) {
                        std::ofstream div(arm_dir / "divergence.txt");
                        div << "step = " << arm.filter.divergence->step << "\nreason = " << arm.filter.divergence->report.reason
                            << '\n';
                    }
                }
                result.arms.push_back(std::move(arm));
            }
        }

        if (cfg.prior_arm) {
            ArmResult pa;
            pa.name = dt_tag.empty() ? "prior" : dt_tag + "_prior";
            pa.is_prior = true;
            pa.dt = dt;
            pa.scheme = schemes.front();
            const auto t0 = std::chrono::steady_clock::now();
            const Stepper stepper(*prob.ops, {schemes.front(), dt});
            Vector w = ic_filter.values;
            for (int n = 1; n <= cfg.steps; ++n) {
                w = stepper.advance(w);
                StepDiagnostics d;
                d.step = n;
                d.time = n * dt;
                RunOptions ro;
                ro.components = cfg.components();
                ro.truth = truth;
                detail::fill_errors(d, w, ro);
                if (!d.relative_errors.empty()) pa.prior_errors.push_back(std::move(d));
            }
            pa.filter.final_state.mean = w;
            pa.filter.final_state.step = cfg.steps;
            pa.filter.steps_completed = cfg.steps;
            pa.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (write) {
                const std::filesystem::path d = root_dir / pa.name;
                detail::ensure_dir(d);
                std::ofstream dcsv(d / "diagnostics.csv");
                write_diagnostics_csv(dcsv, pa.prior_errors, cfg.components());
            }
            result.arms.push_back(std::move(pa));
        }
    }
    return result;
}

/// Per-step relative error between two series sharing steps.
inline std::vector<std::array<double, 3>> compare_series(const Series& a, const Series& b) {
    if (a.steps != b.steps) throw std::invalid_argument("compare_series: runs do not share steps");
    std::vector<std::array<double, 3>> out;
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        if (a.values[i].size() != b.values[i].size()) throw std::invalid_argument("compare_series: state sizes differ");
        if (std::abs(a.times[i] - b.times[i]) > 1e-12 * std::max(1.0, std::abs(a.times[i])))
            throw std::invalid_argument("compare_series: runs do not share times");
        const double denom = b.values[i].norm();
        const double err = denom > 0.0 ? (a.values[i] - b.values[i]).norm() / denom : (a.values[i] - b.values[i]).norm();
        out.push_back({static_cast<double>(a.steps[i]), a.times[i], err});
    }
    return out;
}

/// Compares `mean.txt` or `variance.txt` of two run directories (B is the reference).
inline std::vector<std::array<double, 3>> compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b,
                                                       const std::string& metric) {
    if (metric != "mean" && metric != "variance") throw std::invalid_argument("compare_runs: metric must be mean or variance");
    const std::string file = metric + ".txt";
    std::ifstream ia(run_a / file), ib(run_b / file);
    if (!ia || !ib) throw std::runtime_error("compare_runs: missing " + file + " (set output.series_every)");
    return compare_series(read_series(ia), read_series(ib));
}

}  // namespace statfem
