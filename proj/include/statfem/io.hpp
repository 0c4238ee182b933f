#pragma once

#include "statfem/diagnostics.hpp"
#include "statfem/filters.hpp"
#include "statfem/hyperestimation.hpp"
#include "statfem/mesh.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace statfem {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double parse_double(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        throw ConfigError(what + ": not a number: '" + s + "'");
    }
    if (used != s.size()) throw ConfigError(what + ": trailing characters in '" + s + "'");
    return v;
}

inline long long parse_int(const std::string& s, const std::string& what) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(s, &used);
    } catch (const std::exception&) {
        throw ConfigError(what + ": not an integer: '" + s + "'");
    }
    if (used != s.size()) throw ConfigError(what + ": trailing characters in '" + s + "'");
    return v;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

/// Flat `section.key = value` configuration; `#` starts a comment.
class Config {
public:
    static Config parse(std::istream& in, const std::string& origin = "<config>") {
        Config c;
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const std::string t = detail::trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            const std::string key = detail::trim(t.substr(0, eq));
            if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            c.values_[key] = detail::trim(t.substr(eq + 1));
        }
        return c;
    }

    static Config parse_string(const std::string& text) {
        std::istringstream in(text);
        return parse(in);
    }

    static Config parse_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path.string());
        return parse(in, path.string());
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value) { values_[key] = detail::format_double(value); }
    void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }
    void set(const std::string& key, const char* value) { values_[key] = value; }

    /// Applies a `key=value` override.
    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos) throw ConfigError("override must be key=value: '" + assignment + "'");
        const std::string key = detail::trim(assignment.substr(0, eq));
        if (key.empty()) throw ConfigError("override has empty key");
        values_[key] = detail::trim(assignment.substr(eq + 1));
    }

    void merge(const Config& other) {
        for (const auto& [k, v] : other.values_) values_[k] = v;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& entries() const { return values_; }

    const std::string& get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }
    std::string get(const std::string& key, const std::string& fallback) const {
        return has(key) ? get(key) : fallback;
    }
    double get_double(const std::string& key) const { return detail::parse_double(get(key), key); }
    double get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }
    long long get_int(const std::string& key) const { return detail::parse_int(get(key), key); }
    long long get_int(const std::string& key, long long fallback) const { return has(key) ? get_int(key) : fallback; }
    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError(key + ": not a boolean: '" + v + "'");
    }
    bool get_bool(const std::string& key, bool fallback) const { return has(key) ? get_bool(key) : fallback; }

    /// Comma-separated list; empty value gives an empty list.
    std::vector<std::string> get_list(const std::string& key) const {
        const std::string& v = get(key);
        if (v.empty()) return {};
        return detail::split(v, ',');
    }
    std::vector<double> get_double_list(const std::string& key) const {
        std::vector<double> out;
        for (const auto& s : get_list(key)) out.push_back(detail::parse_double(s, key));
        return out;
    }

    void serialize(std::ostream& os) const {
        std::string section;
        for (const auto& [k, v] : values_) {
            const std::string sec = k.substr(0, k.find('.'));
            if (sec != section && !section.empty()) os << '\n';
            section = sec;
            os << k << " = " << v << '\n';
        }
    }

    std::string to_string() const {
        std::ostringstream os;
        serialize(os);
        return os.str();
    }

    bool operator==(const Config& o) const { return values_ == o.values_; }

private:
    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// CSV outputs

inline void write_diagnostics_csv(std::ostream& os, const std::vector<StepDiagnostics>& diags, int components = 0) {
    os << "step,time,D_eff,retained,sigma_1,sigma_k1,updated";
    for (int c = 0; c < components; ++c) os << ",rel_error_" << c;
    os << '\n' << std::setprecision(12);
    for (const auto& d : diags) {
        os << d.step << ',' << d.time << ',' << d.effective_rank << ',' << d.retained_fraction << ','
           << d.leading_eigenvalue << ',' << d.first_discarded << ',' << (d.updated ? 1 : 0);
        for (int c = 0; c < components; ++c)
            os << ',' << (c < static_cast<int>(d.relative_errors.size()) ? d.relative_errors[c]
                                                                         : std::numeric_limits<double>::quiet_NaN());
        os << '\n';
    }
}

inline void write_estimates_csv(std::ostream& os, const std::vector<EstimationRecord>& records) {
    os << "step,time,rho_hat,sigma_hat,objective,converged\n" << std::setprecision(12);
    for (const auto& r : records)
        os << r.step << ',' << r.time << ',' << r.estimate.rho << ',' << r.estimate.sigma << ','
           << r.estimate.objective << ',' << (r.estimate.converged ? 1 : 0) << '\n';
}

/// Columnar nodal field: `node,x[,y],<name_0>,...`.
inline void write_field(std::ostream& os, const Mesh& mesh, const Vector& values, const std::vector<std::string>& names) {
    const Index n = mesh.num_nodes();
    const int comps = static_cast<int>(names.size());
    if (values.size() != n * comps) throw std::invalid_argument("write_field: value count does not match mesh");
    os << "node,x";
    if (mesh.dim() == 2) os << ",y";
    for (const auto& s : names) os << ',' << s;
    os << '\n' << std::setprecision(15);
    for (Index i = 0; i < n; ++i) {
        os << i << ',' << mesh.nodes[i][0];
        if (mesh.dim() == 2) os << ',' << mesh.nodes[i][1];
        for (int c = 0; c < comps; ++c) os << ',' << values(c * n + i);
        os << '\n';
    }
}

/// Reads a field written by write_field back into the concatenated layout.
inline Vector read_field(std::istream& is, int* components_out = nullptr) {
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("read_field: empty input");
    const auto header = detail::split(line, ',');
    const int coord = (header.size() > 2 && header[2] == "y") ? 2 : 1;
    const int comps = static_cast<int>(header.size()) - 1 - coord;
    if (comps < 1) throw std::runtime_error("read_field: no component columns");
    std::vector<std::vector<double>> cols(comps);
    while (std::getline(is, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split(line, ',');
        if (static_cast<int>(f.size()) != 1 + coord + comps) throw std::runtime_error("read_field: ragged row");
        for (int c = 0; c < comps; ++c) cols[c].push_back(detail::parse_double(f[1 + coord + c], "field"));
    }
    const Index n = static_cast<Index>(cols[0].size());
    Vector out(n * comps);
    for (int c = 0; c < comps; ++c)
        for (Index i = 0; i < n; ++i) out(c * n + i) = cols[c][i];
    if (components_out) *components_out = comps;
    return out;
}

/// Per-step vectors as whitespace-separated rows `step time v_0 v_1 ...`.
inline void write_series_row(std::ostream& os, int step, double time, const Vector& v) {
    os << step << ' ' << std::setprecision(17) << time;
    for (Index i = 0; i < v.size(); ++i) os << ' ' << v(i);
    os << '\n';
}

struct Series {
    std::vector<int> steps;
    std::vector<double> times;
    std::vector<Vector> values;
};

inline Series read_series(std::istream& is) {
    Series s;
    std::string line;
    while (std::getline(is, line)) {
        std::istringstream ls(line);
        int step;
        double t;
        if (!(ls >> step >> t)) continue;
        std::vector<double> vals;
        double x;
        while (ls >> x) vals.push_back(x);
        s.steps.push_back(step);
        s.times.push_back(t);
        s.values.push_back(Eigen::Map<const Vector>(vals.data(), static_cast<Index>(vals.size())));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Data streams

inline void write_data_csv(std::ostream& os, const DataStream& data, double dt) {
    const Index ny = data.records.empty() ? 0 : data.records.front().values.size();
    os << "step,time";
    for (Index j = 0; j < ny; ++j) os << ",y" << j;
    os << '\n' << std::setprecision(17);
    for (const auto& r : data.records) {
        os << r.step << ',' << r.step * dt;
        for (Index j = 0; j < r.values.size(); ++j) os << ',' << r.values(j);
        os << '\n';
    }
}

inline DataStream read_data_csv(std::istream& is) {
    DataStream data;
    data.source = "file";
    std::string line;
    if (!std::getline(is, line)) return data;
    const auto header = detail::split(line, ',');
    if (header.size() < 2 || header[0] != "step" || header[1] != "time")
        throw std::runtime_error("read_data_csv: header must start with step,time");
    while (std::getline(is, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split(line, ',');
        if (f.size() != header.size()) throw std::runtime_error("read_data_csv: ragged row");
        ObservationRecord rec;
        rec.step = static_cast<int>(detail::parse_int(f[0], "step"));
        rec.values.resize(static_cast<Index>(f.size()) - 2);
        for (std::size_t j = 2; j < f.size(); ++j) rec.values(static_cast<Index>(j) - 2) = detail::parse_double(f[j], "y");
        data.records.push_back(std::move(rec));
    }
    data.validate(data.records.empty() ? 0 : data.records.front().values.size());
    return data;
}

/// One observation site: component index plus physical location.
struct ObservationSite {
    int component = 0;
    Point location{0.0, 0.0};
};

/// Observation operator rows for the given sites: nearest-node selection or
/// P1 interpolation, zero on the other components.
inline SparseMatrix observation_operator(const Mesh& mesh, int components, const std::vector<ObservationSite>& sites,
                                         bool interpolate) {
    const Index n = mesh.num_nodes();
    std::vector<Triplet> trips;
    std::vector<Point> pts;
    for (const auto& s : sites) pts.push_back(s.location);
    if (interpolate) {
        const SparseMatrix rows = interpolation_rows(mesh, pts);
        for (Index r = 0; r < rows.outerSize(); ++r)
            for (SparseMatrix::InnerIterator it(rows, r); it; ++it)
                trips.emplace_back(static_cast<int>(it.row()), static_cast<int>(sites[it.row()].component * n + it.col()), it.value());
    } else {
        for (std::size_t i = 0; i < sites.size(); ++i) {
            if (sites[i].component < 0 || sites[i].component >= components)
                throw std::invalid_argument("observation_operator: component out of range");
            const Index node = nearest_node(mesh, sites[i].location);
            trips.emplace_back(static_cast<int>(i), static_cast<int>(sites[i].component * n + node), 1.0);
        }
    }
    SparseMatrix H(static_cast<Index>(sites.size()), n * components);
    H.setFromTriplets(trips.begin(), trips.end());
    H.makeCompressed();
    return H;
}

inline void write_sites_csv(std::ostream& os, const std::vector<ObservationSite>& sites) {
    os << "index,component,x,y\n" << std::setprecision(15);
    for (std::size_t i = 0; i < sites.size(); ++i)
        os << i << ',' << sites[i].component << ',' << sites[i].location[0] << ',' << sites[i].location[1] << '\n';
}

struct IngestResult {
    DataStream stream;
    std::vector<ObservationSite> sites;
    std::vector<std::string> warnings;
};

/// External observations: header `time,<comp>@<x>[:<y>],...`, one row per
/// observation time. Times are rounded to the nearest step; a time more than
/// `tolerance` (default dt/2) from its step, outside [0, horizon], or
/// colliding with another row's step is an error.
inline IngestResult ingest_external_csv(std::istream& is, const Mesh& mesh, const std::vector<std::string>& component_names,
                                        double dt, int horizon_steps, double tolerance = -1.0) {
    if (!(dt > 0.0)) throw std::invalid_argument("ingest_external_csv: dt must be positive");
    if (tolerance < 0.0) tolerance = 0.5 * dt;
    IngestResult out;
    out.stream.source = "external";
    std::string line;
    while (std::getline(is, line) && detail::trim(line).empty()) {
    }
    if (detail::trim(line).empty()) return out;
    const auto header = detail::split(line, ',');
    if (header.empty() || header[0] != "time") throw std::runtime_error("ingest_external_csv: first column must be 'time'");
    for (std::size_t j = 1; j < header.size(); ++j) {
        const auto at = header[j].find('@');
        if (at == std::string::npos) throw std::runtime_error("ingest_external_csv: column '" + header[j] + "' lacks '@'");
        const std::string comp = header[j].substr(0, at);
        ObservationSite site;
        site.component = -1;
        for (std::size_t c = 0; c < component_names.size(); ++c)
            if (component_names[c] == comp) site.component = static_cast<int>(c);
        if (site.component < 0) throw std::runtime_error("ingest_external_csv: unknown component '" + comp + "'");
        const auto coords = detail::split(header[j].substr(at + 1), ':');
        if (static_cast<int>(coords.size()) != mesh.dim())
            throw std::runtime_error("ingest_external_csv: column '" + header[j] + "' has wrong coordinate count");
        for (std::size_t a = 0; a < coords.size(); ++a) site.location[a] = detail::parse_double(coords[a], "location");
        if (!mesh.domain.contains(site.location))
            throw OutsideDomainError("ingest_external_csv: location outside domain in column '" + header[j] + "'");
        out.sites.push_back(site);
    }
    const Index ny = static_cast<Index>(out.sites.size());
    while (std::getline(is, line)) {
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split(line, ',');
        if (f.size() != header.size()) throw std::runtime_error("ingest_external_csv: ragged row");
        const double t = detail::parse_double(f[0], "time");
        const int step = static_cast<int>(std::llround(t / dt));
        const double offset = std::abs(t - step * dt);
        if (step < 0 || step > horizon_steps) throw std::runtime_error("ingest_external_csv: time " + f[0] + " outside horizon");
        if (offset > tolerance) throw std::runtime_error("ingest_external_csv: time " + f[0] + " beyond alignment tolerance");
        if (offset > 1e-9 * std::max(1.0, std::abs(t)))
            out.warnings.push_back("time " + f[0] + " aligned to step " + std::to_string(step) + " (offset " +
                                   detail::format_double(offset) + ")");
        if (!out.stream.records.empty() && out.stream.records.back().step >= step)
            throw std::runtime_error("ingest_external_csv: rows must map to strictly increasing steps");
        ObservationRecord rec;
        rec.step = step;
        rec.values.resize(ny);
        for (Index j = 0; j < ny; ++j) rec.values(j) = detail::parse_double(f[j + 1], "observation");
        out.stream.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace statfem
