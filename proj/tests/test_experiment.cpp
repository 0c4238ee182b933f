#include "statfem/experiment.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace statfem;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("statfem_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Reduced cell study that runs in well under a second.
ExperimentConfig small_cell() {
    Config c = preset("cell");
    c.set("mesh.cells", 20);
    c.set("time.steps", 30);
    c.set("obs.times", "0,1,2");
    c.set("filter.k", 6);
    c.set("filter.kprime", 6);
    c.set("output.snapshot_every", 10);
    c.set("output.series_every", 1);
    return ExperimentConfig::from_config(c);
}

}  // namespace

// ---------------------------------------------------------------------------
// config

TEST(Config, ParseCommentsAndWhitespace) {
    const Config c = Config::parse_string("# header\n  a.b = 3  # trailing\n\nname=x y\n");
    EXPECT_EQ(c.get_int("a.b"), 3);
    EXPECT_EQ(c.get("name"), "x y");
    EXPECT_FALSE(c.has("header"));
    EXPECT_THROW(Config::parse_string("novalue\n"), ConfigError);
    EXPECT_THROW(Config::parse_string(" = 3\n"), ConfigError);
}

TEST(Config, TypedGettersAndOverrides) {
    Config c;
    c.set("x", 0.1);
    c.set("flag", true);
    c.set("list", "1,2.5, 3");
    EXPECT_EQ(c.get_double("x"), 0.1);
    EXPECT_TRUE(c.get_bool("flag"));
    EXPECT_EQ(c.get_double_list("list"), (std::vector<double>{1.0, 2.5, 3.0}));
    c.apply_override("x=2e-3");
    EXPECT_EQ(c.get_double("x"), 2e-3);
    EXPECT_THROW(c.apply_override("bad"), ConfigError);
    c.set("y", "abc");
    EXPECT_THROW(c.get_double("y"), ConfigError);
    EXPECT_THROW(c.get_int("x"), ConfigError);
    EXPECT_THROW(c.get("missing"), ConfigError);
    EXPECT_EQ(c.get_double("missing", 4.0), 4.0);
}

TEST(Config, SerializeRoundTrip) {
    Config c;
    c.set("a", 1.0 / 3.0);
    c.set("b", "text");
    c.set("c.d", 7);
    const Config back = Config::parse_string(c.to_string());
    EXPECT_TRUE(back == c);
    EXPECT_EQ(back.get_double("a"), 1.0 / 3.0);
}

TEST(ExperimentConfig, UnknownKeysRejected) {
    Config c = preset("cell");
    c.set("filter.kk", 3);
    EXPECT_THROW(ExperimentConfig::from_config(c), ConfigError);
    Config m = preset("cell");
    m.set("meta.note", "free text");
    EXPECT_NO_THROW(ExperimentConfig::from_config(m));
}

TEST(ExperimentConfig, InvalidValuesRejected) {
    for (const char* kv : {"time.dt=0", "filter.k=0", "obs.sigma=-1", "time.scheme=rk4", "mesh.cells=0", "obs.components=w"}) {
        Config c = preset("cell");
        c.apply_override(kv);
        EXPECT_THROW(ExperimentConfig::from_config(c).validate(), ConfigError) << kv;
    }
}

TEST(ExperimentConfig, PresetsRoundTrip) {
    for (const auto& name : preset_names())
        for (bool desk : {false, true}) {
            const ExperimentConfig e = ExperimentConfig::from_config(preset(name, desk));
            EXPECT_NO_THROW(e.validate()) << name;
            const Config once = e.to_config();
            const Config twice = ExperimentConfig::from_config(Config::parse_string(once.to_string())).to_config();
            EXPECT_TRUE(once == twice) << name << (desk ? " desk" : "");
        }
    EXPECT_THROW(preset("nope"), ConfigError);
}

TEST(Presets, CellDefaults) {
    const ExperimentConfig e = ExperimentConfig::from_config(preset("cell"));
    EXPECT_EQ(e.cells, 200);
    EXPECT_EQ(e.dt, 0.1);
    EXPECT_EQ(e.filter.rank, 32);
    EXPECT_EQ(e.filter.forcing_rank, 32);
    EXPECT_EQ(e.sigma, 0.01);
    EXPECT_EQ(e.rho, 2e-3);
    EXPECT_EQ(e.length, 100.0);
    EXPECT_EQ(observation_steps(e, e.dt), (std::vector<int>{0, 160, 320, 480}));
}

TEST(Presets, StudyShapes) {
    const ExperimentConfig sp = ExperimentConfig::from_config(preset("spiral"));
    EXPECT_EQ(sp.cells, 128);
    EXPECT_EQ(sp.filter.rank, 250);
    EXPECT_EQ(sp.filter.forcing_rank, 150);
    EXPECT_EQ(sp.obs_count, 1041);
    const std::vector<int> steps = observation_steps(sp, sp.dt);
    ASSERT_GE(steps.size(), 2u);
    EXPECT_EQ(steps[1] - steps[0], 5);

    const ExperimentConfig os = ExperimentConfig::from_config(preset("oscillatory"));
    EXPECT_EQ(os.arm_rhos, (std::vector<double>{1e-2, 1e-3, 2e-4}));
    EXPECT_EQ(os.length, 10.0);
    EXPECT_TRUE(os.prior_arm);
    EXPECT_EQ(os.cells, 256);

    const ExperimentConfig dv = ExperimentConfig::from_config(preset("divergence"));
    EXPECT_EQ(dv.filter.rank, 512);
    EXPECT_EQ(dv.filter.forcing_rank, 128);
    EXPECT_EQ(dv.arm_schemes, (std::vector<std::string>{"imex", "cn"}));

    const ExperimentConfig es = ExperimentConfig::from_config(preset("estimation", true));
    EXPECT_EQ(es.cells, 64);
    EXPECT_EQ(es.steps, 200);
    EXPECT_EQ(es.filter.rank, 64);
    EXPECT_TRUE(es.estimation);
    EXPECT_EQ(es.arm_dts, (std::vector<double>{1e-2, 1e-4}));
}

TEST(Seeds, DerivedSeedsDifferByTag) {
    EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
    EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
}

TEST(Sites, SeededUniformSample) {
    const std::vector<Index> a = sample_nodes(1000, 30, 5);
    EXPECT_EQ(a, sample_nodes(1000, 30, 5));
    EXPECT_EQ(a.size(), 30u);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
    EXPECT_EQ(sample_nodes(10, 0, 1).size(), 10u);
}

// ---------------------------------------------------------------------------
// truth and data

TEST(TruthData, NoiselessDataEqualsObservedTruth) {
    ExperimentConfig e = small_cell();
    e.truth_sigma = 0.0;
    e.obs_times.clear();
    e.obs_stride = 5;
    const Problem p = make_problem(e);
    const TruthAndData td = generate_truth_and_data(e, p, truth_initial(e, p), e.dt);
    ASSERT_EQ(td.data.records.size(), 6u);
    for (const auto& r : td.data.records) EXPECT_LE((r.values - td.H * td.truth.at(r.step)).norm(), 0.0);
}

TEST(TruthData, SameSeedSameData) {
    const ExperimentConfig e = small_cell();
    const Problem p = make_problem(e);
    const InitialCondition ic = truth_initial(e, p);
    const TruthAndData a = generate_truth_and_data(e, p, ic, e.dt);
    const TruthAndData b = generate_truth_and_data(e, p, ic, e.dt);
    ASSERT_EQ(a.data.records.size(), b.data.records.size());
    for (std::size_t i = 0; i < a.data.records.size(); ++i)
        EXPECT_EQ((a.data.records[i].values - b.data.records[i].values).norm(), 0.0);
    ExperimentConfig other = e;
    other.seed = 99;
    const TruthAndData c = generate_truth_and_data(other, p, ic, e.dt);
    EXPECT_GT((a.data.records[0].values - c.data.records[0].values).norm(), 0.0);
}

TEST(TruthData, DataCsvRoundTrip) {
    const ExperimentConfig e = small_cell();
    const Problem p = make_problem(e);
    const TruthAndData td = generate_truth_and_data(e, p, truth_initial(e, p), e.dt);
    std::stringstream ss;
    write_data_csv(ss, td.data, e.dt);
    const DataStream back = read_data_csv(ss);
    ASSERT_EQ(back.records.size(), td.data.records.size());
    for (std::size_t i = 0; i < back.records.size(); ++i) {
        EXPECT_EQ(back.records[i].step, td.data.records[i].step);
        EXPECT_EQ((back.records[i].values - td.data.records[i].values).norm(), 0.0);
    }
}

TEST(Fields, WriteReadRoundTrip) {
    const Mesh m = build_mesh(Domain::rectangle(0, 2, 0, 1), 3);
    Vector v = Vector::LinSpaced(2 * m.num_nodes(), -1.0, 1.0);
    std::stringstream ss;
    write_field(ss, m, v, {"u", "v"});
    int comps = 0;
    const Vector back = read_field(ss, &comps);
    EXPECT_EQ(comps, 2);
    EXPECT_LE((back - v).cwiseAbs().maxCoeff(), 1e-14);
}

// ---------------------------------------------------------------------------
// external ingestion

TEST(Ingest, FourTimesAlignToSteps) {
    const Mesh m = build_mesh(Domain::interval(0.0, 1300.0), 200);
    std::stringstream ss;
    ss << "time";
    for (Index i = 0; i < 201; ++i) ss << ",u@" << m.nodes[i][0];
    ss << '\n';
    for (double t : {0.0, 16.0, 32.0, 48.0}) {
        ss << t;
        for (Index i = 0; i < 201; ++i) ss << ",0.01";
        ss << '\n';
    }
    const IngestResult r = ingest_external_csv(ss, m, {"u", "v"}, 0.1, 600);
    ASSERT_EQ(r.stream.records.size(), 4u);
    EXPECT_EQ(r.stream.records[0].step, 0);
    EXPECT_EQ(r.stream.records[1].step, 160);
    EXPECT_EQ(r.stream.records[2].step, 320);
    EXPECT_EQ(r.stream.records[3].step, 480);
    EXPECT_EQ(r.sites.size(), 201u);
    EXPECT_TRUE(r.warnings.empty());
    EXPECT_EQ(r.stream.source, "external");
}

TEST(Ingest, EmptyIsEmptyStream) {
    const Mesh m = build_mesh(Domain::interval(0.0, 1300.0), 10);
    std::stringstream ss;
    const IngestResult r = ingest_external_csv(ss, m, {"u", "v"}, 0.1, 600);
    EXPECT_TRUE(r.stream.records.empty());
}

TEST(Ingest, MisalignedTimeWarns) {
    const Mesh m = build_mesh(Domain::interval(0.0, 1300.0), 10);
    std::stringstream ss("time,v@650\n16.04,0.2\n");
    const IngestResult r = ingest_external_csv(ss, m, {"u", "v"}, 0.1, 600);
    ASSERT_EQ(r.stream.records.size(), 1u);
    EXPECT_EQ(r.stream.records[0].step, 160);
    EXPECT_EQ(r.warnings.size(), 1u);
    EXPECT_EQ(r.sites[0].component, 1);
}

TEST(Ingest, Errors) {
    const Mesh m = build_mesh(Domain::interval(0.0, 1300.0), 10);
    auto run = [&](const std::string& text, double tol = -1.0) {
        std::stringstream ss(text);
        return ingest_external_csv(ss, m, {"u", "v"}, 0.1, 600, tol);
    };
    EXPECT_THROW(run("t,u@1\n0,1\n"), std::runtime_error);
    EXPECT_THROW(run("time,w@1\n0,1\n"), std::runtime_error);
    EXPECT_THROW(run("time,u@1:2\n0,1\n"), std::runtime_error);
    EXPECT_THROW(run("time,u@2000\n0,1\n"), OutsideDomainError);
    EXPECT_THROW(run("time,u@1\n61,1\n"), std::runtime_error);
    EXPECT_THROW(run("time,u@1\n0,1,2\n"), std::runtime_error);
    EXPECT_THROW(run("time,u@1\n1.0,1\n1.01,2\n"), std::runtime_error);
    EXPECT_THROW(run("time,u@1\n16.04,1\n", 0.01), std::runtime_error);
}

// ---------------------------------------------------------------------------
// case-study driver

TEST(CaseStudy, SmallCellBundle) {
    ExperimentConfig e = small_cell();
    const fs::path dir = scratch("bundle");
    e.out_dir = dir.string();
    const CaseResult r = run_case_study(e);
    ASSERT_EQ(r.arms.size(), 2u);  // full reference plus one low-rank arm
    EXPECT_TRUE(r.arms[0].is_full);
    const ArmResult& lr = r.arm("filter");
    EXPECT_EQ(lr.filter.steps_completed, 30);
    ASSERT_EQ(lr.reference_errors.size(), 30u);
    for (const auto& row : lr.reference_errors) EXPECT_LT(row.mean[0], 5e-2);
    for (const char* f : {"run.cfg", "mesh.txt", "data.csv", "sites.csv", "truth_final.csv", "filter/diagnostics.csv",
                          "filter/reference_errors.csv", "filter/mean_10.csv", "filter/variance_30.csv", "filter/mean.txt"})
        EXPECT_TRUE(fs::exists(dir / f)) << f;

    std::ifstream snap(dir / "filter/mean_10.csv");
    int comps = 0;
    EXPECT_EQ(read_field(snap, &comps).size(), 2 * 21);
    EXPECT_EQ(comps, 2);

    std::string header;
    std::getline(std::ifstream(dir / "filter/diagnostics.csv") >> std::ws, header);
    EXPECT_EQ(header, "step,time,D_eff,retained,sigma_1,sigma_k1,updated,rel_error_0,rel_error_1");
}

TEST(CaseStudy, MetadataReproducesRun) {
    ExperimentConfig e = small_cell();
    const fs::path a = scratch("repro_a"), b = scratch("repro_b");
    e.out_dir = a.string();
    run_case_study(e);
    Config meta = Config::parse_file(a / "run.cfg");
    EXPECT_EQ(meta.get("meta.version"), code_version);
    meta.set("output.dir", b.string());
    run_case_study(ExperimentConfig::from_config(meta));
    for (const char* f : {"data.csv", "filter/diagnostics.csv", "filter/mean.txt", "filter/variance_30.csv"})
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

TEST(CaseStudy, CompareRunsSelfIsZero) {
    ExperimentConfig e = small_cell();
    const fs::path a = scratch("cmp");
    e.out_dir = a.string();
    run_case_study(e);
    for (const char* metric : {"mean", "variance"}) {
        const auto rows = compare_runs(a / "filter", a / "filter", metric);
        ASSERT_EQ(rows.size(), 31u);
        for (const auto& r : rows) EXPECT_EQ(r[2], 0.0);
    }
    EXPECT_THROW(compare_runs(a / "filter", a / "filter", "bogus"), std::invalid_argument);
    EXPECT_THROW(compare_runs(a / "filter", a / "nothing", "mean"), std::runtime_error);
}

TEST(CaseStudy, CompareSeriesMismatch) {
    Series x{{0, 1}, {0.0, 0.1}, {Vector::Ones(3), Vector::Ones(3)}};
    Series y{{0, 2}, {0.0, 0.2}, {Vector::Ones(3), Vector::Ones(3)}};
    EXPECT_THROW(compare_series(x, y), std::invalid_argument);
    Series z = x;
    z.values[1] = 2.0 * Vector::Ones(3);
    const auto rows = compare_series(z, x);
    EXPECT_NEAR(rows[1][2], 1.0, 1e-15);
}

TEST(CaseStudy, ExternalDataAndPriorArm) {
    ExperimentConfig e = small_cell();
    e.full_reference = false;
    e.prior_arm = true;
    const fs::path dir = scratch("external");
    fs::create_directories(dir);
    {
        std::ofstream csv(dir / "obs.csv");
        csv << "time,u@650,v@650\n0,0.05,0.05\n1.0,0.06,0.04\n";
    }
    e.obs_file = (dir / "obs.csv").string();
    const CaseResult r = run_case_study(e);
    const ArmResult& f = r.arm("filter");
    int updates = 0;
    for (const auto& d : f.filter.diagnostics) updates += d.updated;
    EXPECT_EQ(updates, 1);  // step 10; step 0 is absorbed before the loop
    EXPECT_TRUE(r.arm("prior").is_prior);
}
