#pragma once

// Computational domains and the cell-averaged density container.
//
// Two geometries are supported: the square [0,L]^2 with n x n uniform cells,
// and the disk of radius R centred at the origin, represented by n uniform
// radial shells. Square fields are stored row-major with x fastest:
// values[j*n + i] is cell (i, j) centred at ((i+1/2)h, (j+1/2)h).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "collapse_lab/error.hpp"

namespace collapse_lab {

inline constexpr double pi = std::numbers::pi;
inline constexpr double eight_pi = 8.0 * std::numbers::pi;

struct Point {
    double x = 0.0;
    double y = 0.0;

    friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
    friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
    friend Point operator*(double s, Point a) { return {s * a.x, s * a.y}; }
    friend Point operator*(Point a, double s) { return {s * a.x, s * a.y}; }
    friend bool operator==(Point, Point) = default;
};

inline double norm(Point p) { return std::hypot(p.x, p.y); }

enum class DomainKind { square, radial_disk };

inline const char* to_string(DomainKind k) {
    return k == DomainKind::square ? "square" : "radial-disk";
}

/// Neumaier-compensated sum; keeps mass bookkeeping reproducible to a few ulps.
class CompensatedSum {
public:
    void add(double x) {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

class GridSpec {
public:
    GridSpec() = default;

    static GridSpec square(int n, double side = 1.0) { return GridSpec(DomainKind::square, n, side); }
    static GridSpec radial_disk(int n, double radius) { return GridSpec(DomainKind::radial_disk, n, radius); }

    DomainKind kind() const { return kind_; }
    bool is_square() const { return kind_ == DomainKind::square; }
    bool is_radial() const { return kind_ == DomainKind::radial_disk; }
    int n() const { return n_; }
    /// Side length (square) or disk radius.
    double length() const { return length_; }
    double h() const { return length_ / n_; }

    std::size_t cell_count() const {
        return is_square() ? static_cast<std::size_t>(n_) * n_ : static_cast<std::size_t>(n_);
    }

    std::size_t index(int i, int j) const { return static_cast<std::size_t>(j) * n_ + i; }

    /// Centre of square cell i along an axis, or centre radius of shell i.
    double center_coord(int i) const { return (i + 0.5) * h(); }
    Point cell_center(int i, int j) const { return {center_coord(i), center_coord(j)}; }

    /// Area of cell `idx`; for shells this is the midpoint rule 2*pi*r_i*dr,
    /// which coincides with the exact annulus area.
    double cell_area(std::size_t idx) const {
        if (is_square()) return h() * h();
        return 2.0 * pi * center_coord(static_cast<int>(idx)) * h();
    }

    double domain_area() const {
        return is_square() ? length_ * length_ : pi * length_ * length_;
    }

    /// Centre of the domain: (L/2, L/2) for the square, the origin for the disk.
    Point domain_center() const {
        return is_square() ? Point{0.5 * length_, 0.5 * length_} : Point{0.0, 0.0};
    }

    bool contains(Point p) const {
        if (is_square()) return p.x >= 0.0 && p.x <= length_ && p.y >= 0.0 && p.y <= length_;
        return norm(p) <= length_;
    }

    /// Distance from an interior point to the boundary (negative outside).
    double distance_to_boundary(Point p) const {
        if (is_square()) return std::min({p.x, p.y, length_ - p.x, length_ - p.y});
        return length_ - norm(p);
    }

    friend bool operator==(const GridSpec&, const GridSpec&) = default;

private:
    GridSpec(DomainKind kind, int n, double length) : kind_(kind), n_(n), length_(length) {
        if (n < 8) throw InvalidArgument("grid needs at least 8 cells per axis, got " + std::to_string(n));
        if (!(length > 0.0) || !std::isfinite(length))
            throw InvalidArgument("grid length must be positive and finite");
    }

    DomainKind kind_ = DomainKind::square;
    int n_ = 8;
    double length_ = 1.0;
};

/// Cell-averaged nonnegative density on a GridSpec.
struct Field {
    GridSpec grid;
    std::vector<double> values;

    Field() = default;
    explicit Field(const GridSpec& g, double fill = 0.0) : grid(g), values(g.cell_count(), fill) {}
    Field(const GridSpec& g, std::vector<double> v) : grid(g), values(std::move(v)) {
        if (values.size() != grid.cell_count())
            throw InvalidArgument("field size does not match grid");
    }

    double& at(int i, int j) { return values[grid.index(i, j)]; }
    double at(int i, int j) const { return values[grid.index(i, j)]; }

    double max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }
    double min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
};

inline double total_mass(const GridSpec& grid, std::span<const double> values) {
    CompensatedSum s;
    if (grid.is_square()) {
        for (double v : values) s.add(v);
        return s.value() * grid.h() * grid.h();
    }
    for (std::size_t i = 0; i < values.size(); ++i) s.add(values[i] * grid.cell_area(i));
    return s.value();
}

inline double total_mass(const Field& f) { return total_mass(f.grid, f.values); }

// ---------------------------------------------------------------------------
// Initial data

struct ConstantProfile {
    double mass = 1.0;
};

struct GaussianProfile {
    Point center{0.5, 0.5};
    double width = 0.05;
    double mass = 1.0;
    /// Extra mass spread uniformly over the cells at distance >= background_radius
    /// from the centre (the whole domain when the radius is 0).
    double background_mass = 0.0;
    double background_radius = 0.0;
};

struct TwoBumpProfile {
    Point center1{0.3, 0.5};
    Point center2{0.7, 0.5};
    double width = 0.05;
    double mass1 = 1.0;
    double mass2 = 1.0;
};

using InitialProfile = std::variant<ConstantProfile, GaussianProfile, TwoBumpProfile>;

namespace detail {

inline std::vector<double> gaussian_values(const GridSpec& grid, Point c, double width) {
    std::vector<double> v(grid.cell_count());
    const double inv = 1.0 / (2.0 * width * width);
    if (grid.is_square()) {
        for (int j = 0; j < grid.n(); ++j)
            for (int i = 0; i < grid.n(); ++i) {
                const Point d = grid.cell_center(i, j) - c;
                v[grid.index(i, j)] = std::exp(-(d.x * d.x + d.y * d.y) * inv);
            }
    } else {
        for (int i = 0; i < grid.n(); ++i) {
            const double r = grid.center_coord(i);
            v[i] = std::exp(-r * r * inv);
        }
    }
    return v;
}

inline void rescale_to_mass(const GridSpec& grid, std::vector<double>& v, double mass) {
    const double m = total_mass(grid, v);
    if (!(m > 0.0) || !std::isfinite(m))
        throw InvalidArgument("initial profile has no resolvable mass on this grid");
    const double s = mass / m;
    for (double& x : v) x *= s;
}

inline void check_bump(const GridSpec& grid, Point c, double width, double mass) {
    if (!(mass > 0.0)) throw InvalidArgument("profile mass must be positive");
    if (!(width > 0.0)) throw InvalidArgument("bump width must be positive");
    if (!grid.contains(c) || grid.distance_to_boundary(c) <= 0.0) {
        std::ostringstream os;
        os << "bump centre (" << c.x << ", " << c.y << ") lies outside the " << to_string(grid.kind())
           << " domain";
        throw InvalidArgument(os.str());
    }
    if (grid.is_radial() && !(c == Point{0.0, 0.0}))
        throw InvalidArgument("radial-disk profiles must be centred at the origin");
}

}  // namespace detail

/// Builds a nonnegative initial field whose total mass equals the requested
/// mass (per bump, for two-bump data) to round-off.
inline Field make_initial(const GridSpec& grid, const InitialProfile& profile) {
    return std::visit(
        [&](const auto& p) -> Field {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, ConstantProfile>) {
                if (!(p.mass > 0.0)) throw InvalidArgument("profile mass must be positive");
                std::vector<double> v(grid.cell_count(), 1.0);
                detail::rescale_to_mass(grid, v, p.mass);
                return Field(grid, std::move(v));
            } else if constexpr (std::is_same_v<P, GaussianProfile>) {
                detail::check_bump(grid, p.center, p.width, p.mass);
                if (!(p.background_mass >= 0.0)) throw InvalidArgument("background mass must be nonnegative");
                auto v = detail::gaussian_values(grid, p.center, p.width);
                detail::rescale_to_mass(grid, v, p.mass);
                if (!(p.background_radius >= 0.0)) throw InvalidArgument("background radius must be nonnegative");
                if (p.background_mass > 0.0) {
                    std::vector<double> bg(grid.cell_count(), 0.0);
                    for (int j = 0; j < (grid.is_square() ? grid.n() : 1); ++j)
                        for (int i = 0; i < grid.n(); ++i) {
                            const Point c = grid.is_square() ? grid.cell_center(i, j) : Point{grid.center_coord(i), 0.0};
                            if (norm(c - (grid.is_square() ? p.center : Point{})) >= p.background_radius)
                                bg[grid.index(i, j)] = 1.0;
                        }
                    detail::rescale_to_mass(grid, bg, p.background_mass);
                    for (std::size_t k = 0; k < v.size(); ++k) v[k] += bg[k];
                }
                return Field(grid, std::move(v));
            } else {
                if (grid.is_radial()) throw InvalidArgument("two-bump data is not radially symmetric");
                detail::check_bump(grid, p.center1, p.width, p.mass1);
                detail::check_bump(grid, p.center2, p.width, p.mass2);
                auto a = detail::gaussian_values(grid, p.center1, p.width);
                auto b = detail::gaussian_values(grid, p.center2, p.width);
                detail::rescale_to_mass(grid, a, p.mass1);
                detail::rescale_to_mass(grid, b, p.mass2);
                for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
                detail::rescale_to_mass(grid, a, p.mass1 + p.mass2);
                return Field(grid, std::move(a));
            }
        },
        profile);
}

// ---------------------------------------------------------------------------
// Local quadrature and sampling

/// Fraction of square cell (i, j) inside the disk B(c, r), from 4x4 subcell
/// midpoint sampling. Cells entirely inside or outside are classified exactly.
inline double cell_coverage(const GridSpec& grid, int i, int j, Point c, double r) {
    const double h = grid.h();
    const double x0 = i * h, y0 = j * h;
    const double dx_near = std::max({x0 - c.x, 0.0, c.x - (x0 + h)});
    const double dy_near = std::max({y0 - c.y, 0.0, c.y - (y0 + h)});
    if (dx_near * dx_near + dy_near * dy_near >= r * r) return 0.0;
    const double dx_far = std::max(std::abs(x0 - c.x), std::abs(x0 + h - c.x));
    const double dy_far = std::max(std::abs(y0 - c.y), std::abs(y0 + h - c.y));
    if (dx_far * dx_far + dy_far * dy_far <= r * r) return 1.0;
    int inside = 0;
    for (int b = 0; b < 4; ++b)
        for (int a = 0; a < 4; ++a) {
            const double px = x0 + (a + 0.5) * h / 4.0 - c.x;
            const double py = y0 + (b + 0.5) * h / 4.0 - c.y;
            if (px * px + py * py <= r * r) ++inside;
        }
    return inside / 16.0;
}

/// Fraction of shell i (radial grid) inside the centred disk of radius r.
inline double shell_coverage(const GridSpec& grid, int i, double r) {
    const double h = grid.h();
    const double r_in = i * h, r_out = (i + 1) * h;
    if (r <= r_in) return 0.0;
    if (r >= r_out) return 1.0;
    return (r * r - r_in * r_in) / (r_out * r_out - r_in * r_in);
}

/// Mass of f inside B(center, radius) intersected with the domain.
/// Radial fields only admit balls centred at the origin; their shells are
/// clipped exactly rather than sampled.
inline double local_ball_mass(const Field& f, Point center, double radius) {
    if (!(radius > 0.0)) throw InvalidArgument("ball radius must be positive");
    const GridSpec& g = f.grid;
    CompensatedSum s;
    if (g.is_radial()) {
        if (!(center == Point{0.0, 0.0}))
            throw InvalidArgument("radial fields only support balls centred at the origin");
        for (int i = 0; i < g.n(); ++i) {
            const double w = shell_coverage(g, i, radius);
            if (w == 0.0) break;
            s.add(w * f.values[i] * g.cell_area(i));
        }
        return s.value();
    }
    const double h = g.h();
    const int i0 = std::max(0, static_cast<int>(std::floor((center.x - radius) / h)));
    const int i1 = std::min(g.n() - 1, static_cast<int>(std::floor((center.x + radius) / h)));
    const int j0 = std::max(0, static_cast<int>(std::floor((center.y - radius) / h)));
    const int j1 = std::min(g.n() - 1, static_cast<int>(std::floor((center.y + radius) / h)));
    for (int j = j0; j <= j1; ++j)
        for (int i = i0; i <= i1; ++i) {
            const double w = cell_coverage(g, i, j, center, radius);
            if (w > 0.0) s.add(w * f.at(i, j));
        }
    return s.value() * h * h;
}

/// Bilinear (square) or linear-in-r (disk) interpolation of cell averages.
/// Within half a cell of the boundary the nearest interior value is held.
inline double sample(const Field& f, Point p) {
    const GridSpec& g = f.grid;
    if (!g.contains(p)) {
        std::ostringstream os;
        os << "sample point (" << p.x << ", " << p.y << ") lies outside the domain";
        throw InvalidArgument(os.str());
    }
    const double h = g.h();
    auto bracket = [&](double coord, int& lo, double& w) {
        const double s = coord / h - 0.5;
        if (s <= 0.0) {
            lo = 0;
            w = 0.0;
        } else if (s >= g.n() - 1) {
            lo = g.n() - 2;
            w = 1.0;
        } else {
            lo = static_cast<int>(std::floor(s));
            w = s - lo;
        }
    };
    if (g.is_radial()) {
        int lo;
        double w;
        bracket(norm(p), lo, w);
        return (1.0 - w) * f.values[lo] + w * f.values[lo + 1];
    }
    int ix, iy;
    double wx, wy;
    bracket(p.x, ix, wx);
    bracket(p.y, iy, wy);
    return (1.0 - wx) * (1.0 - wy) * f.at(ix, iy) + wx * (1.0 - wy) * f.at(ix + 1, iy) +
           (1.0 - wx) * wy * f.at(ix, iy + 1) + wx * wy * f.at(ix + 1, iy + 1);
}

// ---------------------------------------------------------------------------
// Snapshot CSV

/// Writes "i,j,x,y,u" (square) or "i,r,u" (disk) rows in round-trip precision.
inline void write_csv(std::ostream& os, const Field& f) {
    const GridSpec& g = f.grid;
    os << std::setprecision(17);
    if (g.is_square()) {
        os << "i,j,x,y,u\n";
        for (int j = 0; j < g.n(); ++j)
            for (int i = 0; i < g.n(); ++i) {
                const Point c = g.cell_center(i, j);
                os << i << ',' << j << ',' << c.x << ',' << c.y << ',' << f.at(i, j) << '\n';
            }
    } else {
        os << "i,r,u\n";
        for (int i = 0; i < g.n(); ++i) os << i << ',' << g.center_coord(i) << ',' << f.values[i] << '\n';
    }
}

/// Reads a snapshot written by write_csv back onto `grid`.
inline Field read_csv(std::istream& is, const GridSpec& grid) {
    std::string line;
    if (!std::getline(is, line)) throw InvalidArgument("empty snapshot");
    const bool square_header = line.rfind("i,j,x,y,u", 0) == 0;
    if (square_header != grid.is_square()) throw InvalidArgument("snapshot header does not match grid kind");
    Field f(grid);
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        if (grid.is_square()) {
            if (cols.size() != 5) throw InvalidArgument("malformed snapshot row: " + line);
            const int i = std::stoi(cols[0]), j = std::stoi(cols[1]);
            if (i < 0 || j < 0 || i >= grid.n() || j >= grid.n()) throw InvalidArgument("snapshot index out of range");
            f.at(i, j) = std::stod(cols[4]);
        } else {
            if (cols.size() != 3) throw InvalidArgument("malformed snapshot row: " + line);
            const int i = std::stoi(cols[0]);
            if (i < 0 || i >= grid.n()) throw InvalidArgument("snapshot index out of range");
            f.values[i] = std::stod(cols[2]);
        }
        ++rows;
    }
    if (rows != grid.cell_count()) throw InvalidArgument("snapshot has " + std::to_string(rows) + " rows, expected " +
                                                         std::to_string(grid.cell_count()));
    return f;
}

}  // namespace collapse_lab
