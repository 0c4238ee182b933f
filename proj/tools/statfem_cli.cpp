#include "statfem/statfem.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace statfem;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
    std::string preset;
    std::string config_file;
    std::vector<std::string> sets;
    bool desk = false;
    long long seed = -1;
    std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--preset", o.preset, "Case-study preset (cell, spiral, oscillatory, estimation, divergence)");
    cmd->add_option("--config", o.config_file, "Config file (key = value); applied after the preset");
    cmd->add_option("--set", o.sets, "Override a key, key=value (repeatable)");
    cmd->add_flag("--desk", o.desk, "Use the desk-scale variant of the preset");
    cmd->add_option("--seed", o.seed, "Master seed");
    cmd->add_option("--out", o.out, "Output directory");
}

ExperimentConfig resolve(const CommonOptions& o, const std::string& default_preset = "") {
    Config c;
    const std::string name = o.preset.empty() ? default_preset : o.preset;
    if (!name.empty()) c = preset(name, o.desk);
    if (!o.config_file.empty()) c.merge(Config::parse_file(o.config_file));
    if (name.empty() && o.config_file.empty()) throw ConfigError("give --preset or --config");
    for (const auto& s : o.sets) c.apply_override(s);
    if (o.seed >= 0) c.set("run.seed", o.seed);
    if (!o.out.empty()) c.set("output.dir", o.out);
    ExperimentConfig e = ExperimentConfig::from_config(c);
    e.validate();
    return e;
}

void print_summary(const CaseResult& r) {
    for (const auto& a : r.arms) {
        std::cout << a.name << ": ";
        if (a.is_full) {
            std::cout << "full ExKF reference";
        } else if (a.filter.divergence) {
            std::cout << "DIVERGED at step " << a.filter.divergence->step << " (" << a.filter.divergence->report.reason << ")";
        } else {
            std::cout << a.filter.steps_completed << " steps";
        }
        const auto& diags = a.is_prior ? a.prior_errors : a.filter.diagnostics;
        if (!diags.empty() && !diags.back().relative_errors.empty()) {
            std::cout << ", final rel. error";
            for (double e : diags.back().relative_errors) std::cout << ' ' << e;
        }
        if (!a.is_prior && !a.is_full && !a.filter.diagnostics.empty())
            std::cout << ", final D_eff " << a.filter.diagnostics.back().effective_rank;
        if (!a.reference_errors.empty()) {
            double m = 0.0, v = 0.0;
            for (const auto& e : a.reference_errors) {
                m = std::max(m, e.mean.front());
                v = std::max(v, e.variance.front());
            }
            std::cout << ", max vs full (u) mean " << m << " variance " << v;
        }
        std::cout << " [" << a.seconds << " s]\n";
    }
}

int run_study(const ExperimentConfig& e) {
    const CaseResult r = run_case_study(e);
    print_summary(r);
    if (!e.out_dir.empty()) std::cout << "wrote " << e.out_dir << '\n';
    return r.any_divergence() ? 2 : 0;
}

int run_truth(const ExperimentConfig& e) {
    const Problem p = make_problem(e);
    const InitialCondition ic = truth_initial(e, p);
    const TruthAndData td = generate_truth_and_data(e, p, ic, e.dt);
    const fs::path dir = e.out_dir.empty() ? fs::path(".") : fs::path(e.out_dir);
    fs::create_directories(dir);
    Config meta = e.to_config();
    meta.set("meta.version", code_version);
    std::ofstream(dir / "run.cfg") << meta.to_string();
    std::ofstream mesh_out(dir / "mesh.txt");
    write_mesh(mesh_out, p.mesh);
    std::ofstream data_out(dir / "data.csv");
    write_data_csv(data_out, td.data, e.dt);
    std::ofstream sites_out(dir / "sites.csv");
    write_sites_csv(sites_out, td.sites);
    std::ofstream series(dir / "truth.txt");
    for (const auto& [step, w] : td.truth) write_series_row(series, step, step * e.dt, w);
    std::ofstream tf(dir / "truth_final.csv");
    write_field(tf, p.mesh, td.truth.rbegin()->second, e.component_names());
    std::cout << td.data.records.size() << " observation records of size " << td.H.rows() << ", wrote " << dir.string()
              << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"statFEM low-rank extended Kalman filter experiments"};
    app.require_subcommand(1);

    CommonOptions truth_o, filter_o, est_o, spec_o;
    CLI::App* truth = app.add_subcommand("truth", "Generate the synthetic truth and data stream");
    add_common(truth, truth_o);
    CLI::App* filter = app.add_subcommand("filter", "Run a case study (preset or config file)");
    add_common(filter, filter_o);
    CLI::App* estimate = app.add_subcommand("estimate", "Run with per-step MAP estimation of (rho, sigma)");
    add_common(estimate, est_o);
    CLI::App* spectrum = app.add_subcommand("spectrum", "Report leading eigenvalues of the forcing kernel");
    add_common(spectrum, spec_o);
    long long spec_count = 0;
    spectrum->add_option("--count", spec_count, "Number of eigenvalues (default: filter.kprime)");

    std::string run_a, run_b, metric = "mean", cmp_out;
    CLI::App* compare = app.add_subcommand("compare", "Per-step relative error of run A against run B");
    compare->add_option("run_a", run_a, "Arm directory of run A")->required();
    compare->add_option("run_b", run_b, "Arm directory of run B (reference)")->required();
    compare->add_option("--metric", metric, "mean or variance")->check(CLI::IsMember({"mean", "variance"}));
    compare->add_option("--out", cmp_out, "Write the CSV here instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*truth) return run_truth(resolve(truth_o));
        if (*filter) return run_study(resolve(filter_o));
        if (*estimate) {
            CommonOptions o = est_o;
            o.sets.insert(o.sets.begin(), "estimation.enabled=true");
            return run_study(resolve(o, "estimation"));
        }
        if (*spectrum) {
            const ExperimentConfig e = resolve(spec_o);
            const Problem p = make_problem(e);
            const Index count = spec_count > 0 ? static_cast<Index>(spec_count) : e.filter.forcing_rank;
            const Vector s = spectrum_report(p.mesh, forcing_spec(e, e.rho, std::min<Index>(count, p.nodes())));
            std::cout << "index,eigenvalue\n" << std::setprecision(12);
            for (Index i = 0; i < s.size(); ++i) std::cout << i << ',' << s(i) << '\n';
            return 0;
        }
        if (*compare) {
            const auto rows = compare_runs(run_a, run_b, metric);
            std::ofstream file;
            if (!cmp_out.empty()) file.open(cmp_out);
            std::ostream& os = cmp_out.empty() ? std::cout : file;
            os << "step,time,rel_error\n" << std::setprecision(12);
            for (const auto& r : rows) os << static_cast<int>(r[0]) << ',' << r[1] << ',' << r[2] << '\n';
            return 0;
        }
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 1;
    }
    return 1;
}
