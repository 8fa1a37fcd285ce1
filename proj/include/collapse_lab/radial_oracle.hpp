#pragma once

// Radially symmetric dirichlet problem on the disk of radius R in cumulative
// mass form. With M(r,t) the mass inside B(0,r) and v_r = -M/(2 pi r),
// integrating the density equation over B(0,r) gives
//
//     M_t = M_rr - M_r / r + M M_r / (2 pi r),   M(0,t) = 0,  M(R,t) = lambda.
//
// M lives on the nodes r_k = k dr (k = 0..n); shell k+1/2 between r_k and
// r_{k+1} carries the cell-average density (M_{k+1} - M_k) / (2 pi r_{k+1/2} dr),
// so the first density point sits at dr/2. Diffusion r (M_r / r)_r and the
// linearised drift are both implicit.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"
#include "collapse_lab/stepper.hpp"

namespace collapse_lab {

struct MassProfile {
    GridSpec grid;           ///< radial-disk grid; node k+1 is at radius (k+1) dr
    std::vector<double> M;   ///< cumulative mass at r = dr, 2 dr, ..., R (M(0) = 0 implicit)
    double t = 0.0;
    long step_index = 0;

    double dr() const { return grid.h(); }
    int shells() const { return grid.n(); }
    double lambda() const { return M.back(); }
    double node_radius(int k) const { return (k + 1) * dr(); }
    /// M at node index k = 0..n, with M_0 = 0.
    double node_mass(int k) const { return k == 0 ? 0.0 : M[k - 1]; }

    std::vector<double> radii() const {
        std::vector<double> r(M.size());
        for (std::size_t k = 0; k < r.size(); ++k) r[k] = node_radius(static_cast<int>(k));
        return r;
    }
};

/// Cumulative mass profile of a radial field.
inline MassProfile profile_from_field(const Field& f, double t = 0.0) {
    if (!f.grid.is_radial()) throw InvalidArgument("mass profile needs a radial-disk field");
    MassProfile p{f.grid, std::vector<double>(f.grid.n()), t, 0};
    CompensatedSum acc;
    for (int i = 0; i < f.grid.n(); ++i) {
        acc.add(f.values[i] * f.grid.cell_area(i));
        p.M[i] = acc.value();
    }
    return p;
}

/// Shell-average density u_{k+1/2} = dM / (shell area).
inline Field oracle_density(const MassProfile& p) {
    Field f(p.grid);
    for (int i = 0; i < p.shells(); ++i)
        f.values[i] = std::max(0.0, (p.node_mass(i + 1) - p.node_mass(i)) / p.grid.cell_area(i));
    return f;
}

inline double oracle_sup(const MassProfile& p) {
    double s = 0.0;
    for (int i = 0; i < p.shells(); ++i)
        s = std::max(s, (p.node_mass(i + 1) - p.node_mass(i)) / p.grid.cell_area(i));
    return s;
}

/// M at an arbitrary radius, exact for piecewise-constant shell densities.
inline double mass_within(const MassProfile& p, double r) {
    if (r <= 0.0) return 0.0;
    if (r >= p.grid.length()) return p.lambda();
    const double dr = p.dr();
    const int k = std::min(static_cast<int>(r / dr), p.shells() - 1);
    const double r_in = k * dr, r_out = (k + 1) * dr;
    const double w = (r * r - r_in * r_in) / (r_out * r_out - r_in * r_in);
    return p.node_mass(k) + w * (p.node_mass(k + 1) - p.node_mass(k));
}

struct OracleConfig {
    /// Step rule dt = dt_factor / sup u, so each step moves the peak density by a bounded fraction.
    double dt_factor = 0.05;
    double dt_max = std::numeric_limits<double>::infinity();
};

inline double oracle_stable_dt(const MassProfile& p, const OracleConfig& cfg = {}) {
    if (!(cfg.dt_factor > 0.0) || !std::isfinite(cfg.dt_factor)) throw InvalidArgument("dt_factor must be positive");
    if (!(cfg.dt_max > 0.0)) throw InvalidArgument("dt_max must be positive");
    const double sup = oracle_sup(p);
    return sup > 0.0 ? std::min(cfg.dt_max, cfg.dt_factor / sup) : cfg.dt_max;
}

/// One linearly implicit Euler step; M(R) stays pinned at lambda exactly.
///
/// The drift M u = M M_r / (2 pi r) is linearised around the old M (coefficient
/// M_k^old / (2 pi r)) and treated implicitly together with diffusion. Node k
/// uses the centred difference while M_k <= 4 pi k, which keeps the matrix an
/// M-matrix, and the inward upwind difference otherwise. Row sums equal one, so
/// the step is order preserving for every dt.
inline MassProfile oracle_step(const MassProfile& p, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("time step must be positive and finite");
    const int n = p.shells();
    const double dr = p.dr();
    const double lambda = p.lambda();

    // Unknowns M_1..M_{n-1}; tridiagonal system a M_{k-1} + b M_k + c M_{k+1} = d.
    const int m = n - 1;
    std::vector<double> a(m), b(m), c(m), d(m);
    for (int k = 1; k < n; ++k) {
        const double w_out = dt * k / (dr * dr * (k + 0.5));
        const double w_in = dt * k / (dr * dr * (k - 0.5));
        const double mk = p.node_mass(k);
        const double q_out = dt * mk / (2.0 * pi * (k + 0.5) * dr * dr);
        const int row = k - 1;
        if (mk <= 4.0 * pi * k) {
            const double q_in = dt * mk / (2.0 * pi * (k - 0.5) * dr * dr);
            a[row] = -w_in + 0.5 * q_in;
            b[row] = 1.0 + w_in + w_out + 0.5 * (q_out - q_in);
            c[row] = -w_out - 0.5 * q_out;
        } else {
            a[row] = -w_in;
            b[row] = 1.0 + w_in + w_out + q_out;
            c[row] = -w_out - q_out;
        }
        d[row] = mk;
    }
    d[m - 1] -= c[m - 1] * lambda;  // pinned outer boundary
    c[m - 1] = 0.0;
    a[0] = 0.0;  // M_0 = 0

    for (int row = 1; row < m; ++row) {
        const double f = a[row] / b[row - 1];
        b[row] -= f * c[row - 1];
        d[row] -= f * d[row - 1];
    }
    MassProfile out{p.grid, std::vector<double>(n), p.t + dt, p.step_index + 1};
    out.M[n - 1] = lambda;
    out.M[m - 1] = d[m - 1] / b[m - 1];
    for (int row = m - 2; row >= 0; --row) out.M[row] = (d[row] - c[row] * out.M[row + 1]) / b[row];

    double prev = 0.0;
    for (int k = 0; k < n; ++k) {
        if (out.M[k] - prev < -1e-12 * lambda)
            throw MonotonicityError("cumulative mass lost monotonicity at r = " + std::to_string((k + 1) * dr) +
                                    " (t = " + std::to_string(out.t) + ")");
        prev = out.M[k];
    }
    return out;
}

/// Profile dump with rows "r,M,u": node radius, cumulative mass and the
/// density of the shell just inside that node.
inline void write_profile_csv(std::ostream& os, const MassProfile& p) {
    os << "r,M,u\n" << std::setprecision(17);
    for (int k = 0; k < p.shells(); ++k)
        os << p.node_radius(k) << ',' << p.M[k] << ','
           << (p.node_mass(k + 1) - p.node_mass(k)) / p.grid.cell_area(k) << '\n';
}

/// Radial counterpart of run_until, using the same stop rule semantics.
template <class Observer>
std::pair<MassProfile, StopReason> run_oracle_until(MassProfile p, const OracleConfig& cfg, const StopRule& stop,
                                                    Observer&& observer) {
    while (true) {
        if (auto why = check_stop(p.t, p.step_index, oracle_sup(p), stop)) return {std::move(p), *why};
        double dt = oracle_stable_dt(p, cfg);
        const bool last = p.t + dt >= stop.t_end;
        if (last) dt = stop.t_end - p.t;
        p = oracle_step(p, dt);
        if (last) p.t = stop.t_end;
        observer(p);
    }
}

inline std::pair<MassProfile, StopReason> run_oracle_until(MassProfile p, const OracleConfig& cfg,
                                                           const StopRule& stop) {
    return run_oracle_until(std::move(p), cfg, stop, [](const MassProfile&) {});
}

}  // namespace collapse_lab
