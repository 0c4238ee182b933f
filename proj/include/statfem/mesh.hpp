#pragma once

#include "statfem/linalg.hpp"

#include <array>
#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace statfem {

using Point = std::array<double, 2>;

class OutsideDomainError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Axis-aligned interval (dim 1) or rectangle (dim 2).
struct Domain {
    int dim = 1;
    Point lower{0.0, 0.0};
    Point upper{1.0, 0.0};

    static Domain interval(double a, double b) { return {1, {a, 0.0}, {b, 0.0}}; }
    static Domain rectangle(double x0, double x1, double y0, double y1) {
        return {2, {x0, y0}, {x1, y1}};
    }

    double length(int axis) const { return upper[axis] - lower[axis]; }

    double measure() const { return dim == 1 ? length(0) : length(0) * length(1); }

    bool contains(const Point& p, double tol = 1e-9) const {
        for (int a = 0; a < dim; ++a) {
            const double slack = tol * std::max(1.0, length(a));
            if (p[a] < lower[a] - slack || p[a] > upper[a] + slack) return false;
        }
        return true;
    }
};

/// Structured P1 mesh. Nodes are ordered lexicographically with x fastest,
/// i.e. node (i, j) has index j * (cells[0] + 1) + i. In 2D each quad is split
/// along its lower-left to upper-right diagonal.
struct Mesh {
    Domain domain;
    std::array<int, 2> cells{1, 1};
    std::vector<Point> nodes;
    std::vector<std::array<int, 3>> elements;  // 2 nodes used in 1D, 3 in 2D
    double h = 0.0;

    int dim() const { return domain.dim; }
    Index num_nodes() const { return static_cast<Index>(nodes.size()); }
    Index num_elements() const { return static_cast<Index>(elements.size()); }
    int nodes_per_element() const { return domain.dim + 1; }
    double spacing(int axis) const { return domain.length(axis) / cells[axis]; }
    int nodes_per_row() const { return cells[0] + 1; }
};

inline Mesh build_mesh(const Domain& domain, std::array<int, 2> cells_per_axis) {
    if (domain.dim != 1 && domain.dim != 2) throw std::invalid_argument("build_mesh: dimension must be 1 or 2");
    for (int a = 0; a < domain.dim; ++a) {
        if (!(domain.length(a) > 0.0)) throw std::invalid_argument("build_mesh: degenerate domain");
        if (cells_per_axis[a] < 1) throw std::invalid_argument("build_mesh: need at least one cell per axis");
    }
    Mesh mesh;
    mesh.domain = domain;
    if (domain.dim == 1) {
        const int n = cells_per_axis[0];
        mesh.cells = {n, 1};
        const double dx = domain.length(0) / n;
        mesh.nodes.resize(n + 1);
        for (int i = 0; i <= n; ++i)
            mesh.nodes[i] = {i == n ? domain.upper[0] : domain.lower[0] + i * dx, 0.0};
        mesh.elements.reserve(n);
        for (int i = 0; i < n; ++i) mesh.elements.push_back({i, i + 1, -1});
        mesh.h = dx;
        return mesh;
    }

    const int nx = cells_per_axis[0], ny = cells_per_axis[1];
    mesh.cells = {nx, ny};
    const double dx = domain.length(0) / nx, dy = domain.length(1) / ny;
    mesh.nodes.resize(static_cast<std::size_t>(nx + 1) * (ny + 1));
    for (int j = 0; j <= ny; ++j) {
        const double y = j == ny ? domain.upper[1] : domain.lower[1] + j * dy;
        for (int i = 0; i <= nx; ++i) {
            const double x = i == nx ? domain.upper[0] : domain.lower[0] + i * dx;
            mesh.nodes[static_cast<std::size_t>(j) * (nx + 1) + i] = {x, y};
        }
    }
    mesh.elements.reserve(2 * static_cast<std::size_t>(nx) * ny);
    for (int j = 0; j < ny; ++j) {
        for (int i = 0; i < nx; ++i) {
            const int a = j * (nx + 1) + i, b = a + 1, c = a + (nx + 1), d = c + 1;
            mesh.elements.push_back({a, b, d});
            mesh.elements.push_back({a, d, c});
        }
    }
    mesh.h = std::hypot(dx, dy);
    return mesh;
}

inline Mesh build_mesh(const Domain& domain, int cells) { return build_mesh(domain, {cells, cells}); }

namespace detail {

/// Area and P1 shape-function gradients of a triangle.
struct TriangleGeometry {
    double area;
    std::array<Point, 3> grad;
};

inline TriangleGeometry triangle_geometry(const Point& p0, const Point& p1, const Point& p2) {
    const double det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    TriangleGeometry g;
    g.area = 0.5 * std::abs(det);
    g.grad[0] = {(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det};
    g.grad[1] = {(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det};
    g.grad[2] = {(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det};
    return g;
}

inline SparseMatrix finalize_symmetric(Index n, std::vector<Triplet>& t) {
    SparseMatrix S(n, n);
    S.setFromTriplets(t.begin(), t.end());
    SparseMatrix St = S.transpose();
    SparseMatrix out = 0.5 * (S + St);
    out.prune(0.0);
    out.makeCompressed();
    return out;
}

}  // namespace detail

/// Consistent P1 mass matrix, exact element integrals.
inline SparseMatrix assemble_mass(const Mesh& mesh) {
    std::vector<Triplet> t;
    if (mesh.dim() == 1) {
        t.reserve(4 * mesh.elements.size());
        for (const auto& e : mesh.elements) {
            const double len = mesh.nodes[e[1]][0] - mesh.nodes[e[0]][0];
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) t.emplace_back(e[a], e[b], len / 6.0 * (a == b ? 2.0 : 1.0));
        }
    } else {
        t.reserve(9 * mesh.elements.size());
        for (const auto& e : mesh.elements) {
            const auto g = detail::triangle_geometry(mesh.nodes[e[0]], mesh.nodes[e[1]], mesh.nodes[e[2]]);
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) t.emplace_back(e[a], e[b], g.area / 12.0 * (a == b ? 2.0 : 1.0));
        }
    }
    return detail::finalize_symmetric(mesh.num_nodes(), t);
}

/// P1 stiffness matrix for unit coefficient.
inline SparseMatrix assemble_stiffness(const Mesh& mesh) {
    std::vector<Triplet> t;
    if (mesh.dim() == 1) {
        t.reserve(4 * mesh.elements.size());
        for (const auto& e : mesh.elements) {
            const double len = mesh.nodes[e[1]][0] - mesh.nodes[e[0]][0];
            for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) t.emplace_back(e[a], e[b], (a == b ? 1.0 : -1.0) / len);
        }
    } else {
        t.reserve(9 * mesh.elements.size());
        for (const auto& e : mesh.elements) {
            const auto g = detail::triangle_geometry(mesh.nodes[e[0]], mesh.nodes[e[1]], mesh.nodes[e[2]]);
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b)
                    t.emplace_back(e[a], e[b],
                                   g.area * (g.grad[a][0] * g.grad[b][0] + g.grad[a][1] * g.grad[b][1]));
        }
    }
    return detail::finalize_symmetric(mesh.num_nodes(), t);
}

/// Element containing a point together with barycentric weights of its nodes.
struct CellLocation {
    Index element = -1;
    std::array<double, 3> weights{0.0, 0.0, 0.0};
};

inline CellLocation locate(const Mesh& mesh, const Point& p) {
    if (!mesh.domain.contains(p)) {
        std::ostringstream msg;
        msg << "point (" << p[0];
        if (mesh.dim() == 2) msg << ", " << p[1];
        msg << ") lies outside the mesh domain";
        throw OutsideDomainError(msg.str());
    }
    auto cell_coord = [&](int axis) {
        const double s = (p[axis] - mesh.domain.lower[axis]) / mesh.spacing(axis);
        const int c = std::clamp(static_cast<int>(std::floor(s)), 0, mesh.cells[axis] - 1);
        const double local = std::clamp(s - c, 0.0, 1.0);
        return std::pair<int, double>{c, local};
    };
    CellLocation loc;
    const auto [i, xi] = cell_coord(0);
    if (mesh.dim() == 1) {
        loc.element = i;
        loc.weights = {1.0 - xi, xi, 0.0};
        return loc;
    }
    const auto [j, eta] = cell_coord(1);
    const Index quad = static_cast<Index>(j) * mesh.cells[0] + i;
    if (eta <= xi) {
        // nodes (a, b, d)
        loc.element = 2 * quad;
        loc.weights = {1.0 - xi, xi - eta, eta};
    } else {
        // nodes (a, d, c)
        loc.element = 2 * quad + 1;
        loc.weights = {1.0 - eta, xi, eta - xi};
    }
    return loc;
}

/// Evaluate a nodal field (length n_nodes) at a point.
inline double evaluate(const Mesh& mesh, std::span<const double> nodal, const Point& p) {
    const CellLocation loc = locate(mesh, p);
    const auto& e = mesh.elements[loc.element];
    double v = 0.0;
    for (int a = 0; a < mesh.nodes_per_element(); ++a) v += loc.weights[a] * nodal[e[a]];
    return v;
}

/// Rows of P1 interpolation weights, one row per point (n_points x n_nodes).
inline SparseMatrix interpolation_rows(const Mesh& mesh, std::span<const Point> points) {
    std::vector<Triplet> t;
    t.reserve(points.size() * 3);
    for (std::size_t r = 0; r < points.size(); ++r) {
        const CellLocation loc = locate(mesh, points[r]);
        const auto& e = mesh.elements[loc.element];
        for (int a = 0; a < mesh.nodes_per_element(); ++a)
            if (loc.weights[a] != 0.0) t.emplace_back(static_cast<int>(r), e[a], loc.weights[a]);
    }
    SparseMatrix H(static_cast<Index>(points.size()), mesh.num_nodes());
    H.setFromTriplets(t.begin(), t.end());
    H.makeCompressed();
    return H;
}

/// Index of the mesh node closest to the point.
inline Index nearest_node(const Mesh& mesh, const Point& p) {
    if (!mesh.domain.contains(p)) throw OutsideDomainError("nearest_node: point outside domain");
    auto axis_index = [&](int axis) {
        const double s = (p[axis] - mesh.domain.lower[axis]) / mesh.spacing(axis);
        return std::clamp(static_cast<int>(std::lround(s)), 0, mesh.cells[axis]);
    };
    const int i = axis_index(0);
    if (mesh.dim() == 1) return i;
    return static_cast<Index>(axis_index(1)) * mesh.nodes_per_row() + i;
}

/// Nodes on the domain boundary.
inline std::vector<Index> boundary_nodes(const Mesh& mesh) {
    std::vector<Index> out;
    if (mesh.dim() == 1) return {0, mesh.num_nodes() - 1};
    const int nx = mesh.cells[0], ny = mesh.cells[1];
    for (int j = 0; j <= ny; ++j)
        for (int i = 0; i <= nx; ++i)
            if (i == 0 || j == 0 || i == nx || j == ny) out.push_back(static_cast<Index>(j) * (nx + 1) + i);
    return out;
}

/// Homogeneous Dirichlet conditions by symmetric elimination: boundary rows
/// and columns are zeroed, a unit diagonal is placed and the rhs entry set to 0.
inline void apply_dirichlet(SparseMatrix& op, Vector& rhs, std::span<const Index> boundary) {
    if (boundary.empty()) return;
    std::vector<char> fixed(static_cast<std::size_t>(op.rows()), 0);
    for (Index b : boundary) {
        if (b < 0 || b >= op.rows()) throw std::out_of_range("apply_dirichlet: boundary index out of range");
        fixed[b] = 1;
    }
    for (Index j = 0; j < op.outerSize(); ++j)
        for (SparseMatrix::InnerIterator it(op, j); it; ++it)
            if (fixed[it.row()] || fixed[it.col()]) it.valueRef() = it.row() == it.col() ? 1.0 : 0.0;
    // Diagonal entries not present in the pattern.
    std::vector<Triplet> extra;
    for (Index b : boundary)
        if (op.coeff(b, b) != 1.0) extra.emplace_back(static_cast<int>(b), static_cast<int>(b), 1.0);
    if (!extra.empty()) {
        SparseMatrix D(op.rows(), op.cols());
        D.setFromTriplets(extra.begin(), extra.end());
        op += D;
    }
    op.prune(0.0);
    op.makeCompressed();
    for (Index b : boundary) rhs(b) = 0.0;
}

/// Load vector b_j = <f, phi_j> with f replaced by its P1 interpolant, i.e. M f(x_nodes).
inline Vector assemble_load(const Mesh& mesh, const std::function<double(const Point&)>& f) {
    Vector fn(mesh.num_nodes());
    for (Index i = 0; i < mesh.num_nodes(); ++i) fn(i) = f(mesh.nodes[i]);
    return assemble_mass(mesh) * fn;
}

/// FEM solution of -a Laplace(u) = f with u = 0 on the whole boundary.
inline Vector solve_poisson(const Mesh& mesh, const std::function<double(const Point&)>& f, double a = 1.0) {
    SparseMatrix A = a * assemble_stiffness(mesh);
    Vector b = assemble_load(mesh, f);
    const std::vector<Index> bnd = boundary_nodes(mesh);
    apply_dirichlet(A, b, bnd);
    return Factorization(A).solve(b);
}

/// Columnar text: a node table followed by a cell table.
inline void write_mesh(std::ostream& os, const Mesh& mesh) {
    os.precision(17);
    os << "# nodes " << mesh.num_nodes() << " dim " << mesh.dim() << "\n";
    os << "node_id x" << (mesh.dim() == 2 ? " y" : "") << "\n";
    for (Index i = 0; i < mesh.num_nodes(); ++i) {
        os << i << ' ' << mesh.nodes[i][0];
        if (mesh.dim() == 2) os << ' ' << mesh.nodes[i][1];
        os << '\n';
    }
    os << "# cells " << mesh.num_elements() << "\n";
    os << "cell_id" << (mesh.dim() == 1 ? " n0 n1" : " n0 n1 n2") << "\n";
    for (Index c = 0; c < mesh.num_elements(); ++c) {
        os << c;
        for (int a = 0; a < mesh.nodes_per_element(); ++a) os << ' ' << mesh.elements[c][a];
        os << '\n';
    }
}

}  // namespace statfem
