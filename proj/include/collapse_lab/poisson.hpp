#pragma once

// Elliptic part: -Lap v = u with either v = 0 on the boundary (dirichlet) or
// homogeneous Neumann data with the mean of u removed and mean-zero v
// (neumann). The square uses the cell-centred 5-point Laplacian with ghost
// reflection (odd for dirichlet, even for neumann); both operators are
// symmetric and are solved by preconditioned conjugate gradients.
//
// The preconditioner is the exact inverse of the same discrete operator,
// applied through a 2D sine (DST-II) or cosine (DCT-II) transform, so a warm
// started solve normally finishes in one or two iterations.

#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"

namespace collapse_lab {

/// Which elliptic problem produces the potential. `passive` pins v = 0 and
/// turns the Smoluchowski part into the heat equation (test hook).
enum class Model { dirichlet, neumann, passive };

inline const char* to_string(Model m) {
    switch (m) {
        case Model::dirichlet: return "dirichlet";
        case Model::neumann: return "neumann";
        case Model::passive: return "passive";
    }
    return "?";
}

struct Potential {
    GridSpec grid;
    std::vector<double> values;
    Model bc = Model::dirichlet;
    double residual_norm = 0.0;  ///< relative residual of the final iterate
    int iterations = 0;
};

struct PoissonOptions {
    double tol = 1e-10;
    /// 0 means the default cap of 10 n^2.
    int max_iterations = 0;
    bool precondition = true;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}

inline void remove_mean(std::span<double> x) {
    CompensatedSum s;
    for (double v : x) s.add(v);
    const double m = s.value() / static_cast<double>(x.size());
    for (double& v : x) v -= m;
}

/// Exact inverse of the 5-point operator on the n x n square for one boundary
/// kind, via FFTW real-to-real transforms on owned, aligned buffers.
class FastPoissonInverse {
public:
    FastPoissonInverse(int n, double h, Model bc) : n_(n), bc_(bc) {
        const std::size_t len = static_cast<std::size_t>(n) * n;
        buf_ = static_cast<double*>(fftw_malloc(sizeof(double) * len));
        const fftw_r2r_kind fwd = bc == Model::dirichlet ? FFTW_RODFT10 : FFTW_REDFT10;
        const fftw_r2r_kind inv = bc == Model::dirichlet ? FFTW_RODFT01 : FFTW_REDFT01;
        {
            std::lock_guard lock(planner_mutex());
            forward_ = fftw_plan_r2r_2d(n, n, buf_, buf_, fwd, fwd, FFTW_ESTIMATE);
            backward_ = fftw_plan_r2r_2d(n, n, buf_, buf_, inv, inv, FFTW_ESTIMATE);
        }
        eig_.resize(n);
        for (int k = 0; k < n; ++k) {
            const int mode = bc == Model::dirichlet ? k + 1 : k;
            eig_[k] = (2.0 - 2.0 * std::cos(pi * mode / n)) / (h * h);
        }
        norm_ = 1.0 / (4.0 * n * n);
    }

    FastPoissonInverse(const FastPoissonInverse&) = delete;
    FastPoissonInverse& operator=(const FastPoissonInverse&) = delete;

    ~FastPoissonInverse() {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(forward_);
        fftw_destroy_plan(backward_);
        fftw_free(buf_);
    }

    void apply(std::span<const double> r, std::span<double> z) {
        std::copy(r.begin(), r.end(), buf_);
        fftw_execute(forward_);
        for (int l = 0; l < n_; ++l)
            for (int k = 0; k < n_; ++k) {
                const double lam = eig_[k] + eig_[l];
                double& c = buf_[static_cast<std::size_t>(l) * n_ + k];
                c = lam > 0.0 ? c * norm_ / lam : 0.0;
            }
        fftw_execute(backward_);
        std::copy(buf_, buf_ + r.size(), z.begin());
    }

private:
    static std::mutex& planner_mutex() {
        static std::mutex m;
        return m;
    }

    int n_;
    Model bc_;
    double* buf_ = nullptr;
    fftw_plan forward_ = nullptr;
    fftw_plan backward_ = nullptr;
    std::vector<double> eig_;
    double norm_;
};

inline FastPoissonInverse& fast_inverse(const GridSpec& grid, Model bc) {
    thread_local std::map<std::pair<int, int>, std::pair<double, std::unique_ptr<FastPoissonInverse>>> cache;
    auto& slot = cache[{grid.n(), static_cast<int>(bc)}];
    if (!slot.second || slot.first != grid.h()) {
        slot.second = std::make_unique<FastPoissonInverse>(grid.n(), grid.h(), bc);
        slot.first = grid.h();
    }
    return *slot.second;
}

}  // namespace detail

/// out = -Lap_h x on the square with ghost reflection for `bc`.
inline void apply_neg_laplacian(const GridSpec& grid, Model bc, std::span<const double> x, std::span<double> out) {
    const int n = grid.n();
    const double inv_h2 = 1.0 / (grid.h() * grid.h());
    const double ghost_sign = bc == Model::dirichlet ? -1.0 : 1.0;
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const std::size_t c = grid.index(i, j);
            const double xc = x[c];
            const double w = i > 0 ? x[c - 1] : ghost_sign * xc;
            const double e = i < n - 1 ? x[c + 1] : ghost_sign * xc;
            const double s = j > 0 ? x[c - n] : ghost_sign * xc;
            const double nn = j < n - 1 ? x[c + n] : ghost_sign * xc;
            out[c] = (4.0 * xc - w - e - s - nn) * inv_h2;
        }
}

namespace detail {

inline Potential pcg_solve(const GridSpec& grid, Model bc, std::vector<double> rhs, const PoissonOptions& opt,
                           const std::vector<double>* guess) {
    if (!grid.is_square()) throw InvalidArgument("2D Poisson solve requires a square grid");
    if (!(opt.tol > 0.0)) throw InvalidArgument("solver tolerance must be positive");
    const std::size_t len = grid.cell_count();
    const bool neumann = bc == Model::neumann;
    if (neumann) remove_mean(rhs);

    Potential pot{grid, std::vector<double>(len, 0.0), bc, 0.0, 0};
    const double norm_b = std::sqrt(dot(rhs, rhs));
    if (norm_b == 0.0) return pot;
    if (guess && guess->size() == len) pot.values = *guess;
    if (neumann) remove_mean(pot.values);

    std::vector<double>& x = pot.values;
    std::vector<double> r(len), z(len), p(len), ap(len);
    apply_neg_laplacian(grid, bc, x, ap);
    for (std::size_t k = 0; k < len; ++k) r[k] = rhs[k] - ap[k];
    if (neumann) remove_mean(r);

    const int max_it = opt.max_iterations > 0 ? opt.max_iterations : 10 * grid.n() * grid.n();
    double res = std::sqrt(dot(r, r)) / norm_b;
    auto precondition = [&] {
        if (opt.precondition)
            fast_inverse(grid, bc).apply(r, z);
        else
            z = r;
        if (neumann) remove_mean(z);
    };
    if (res > opt.tol) {
        precondition();
        p = z;
        double rz = dot(r, z);
        int it = 0;
        while (res > opt.tol) {
            if (it >= max_it) throw SolverError("Poisson solve did not converge", res, it);
            ++it;
            apply_neg_laplacian(grid, bc, p, ap);
            const double pap = dot(p, ap);
            if (!(pap > 0.0)) throw SolverError("Poisson operator lost positivity", res, it);
            const double alpha = rz / pap;
            for (std::size_t k = 0; k < len; ++k) {
                x[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if (neumann) {
                remove_mean(x);
                remove_mean(r);
            }
            res = std::sqrt(dot(r, r)) / norm_b;
            if (res <= opt.tol) break;
            precondition();
            const double rz_new = dot(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            for (std::size_t k = 0; k < len; ++k) p[k] = z[k] + beta * p[k];
        }
        pot.iterations = it;
    }
    // Report the true residual, not the recursively updated one.
    apply_neg_laplacian(grid, bc, x, ap);
    for (std::size_t k = 0; k < len; ++k) r[k] = rhs[k] - ap[k];
    pot.residual_norm = std::sqrt(dot(r, r)) / norm_b;
    return pot;
}

}  // namespace detail

/// -Lap v = u, v = 0 on the boundary of the square.
inline Potential solve_dirichlet(const Field& u, const PoissonOptions& opt = {},
                                 const std::vector<double>* guess = nullptr) {
    return detail::pcg_solve(u.grid, Model::dirichlet, u.values, opt, guess);
}

inline Potential solve_dirichlet(const Field& u, double tol) {
    PoissonOptions opt;
    opt.tol = tol;
    return solve_dirichlet(u, opt);
}

/// -Lap v = u - mean(u), zero normal derivative, mean(v) = 0.
inline Potential solve_neumann(const Field& u, const PoissonOptions& opt = {},
                               const std::vector<double>* guess = nullptr) {
    return detail::pcg_solve(u.grid, Model::neumann, u.values, opt, guess);
}

inline Potential solve_neumann(const Field& u, double tol) {
    PoissonOptions opt;
    opt.tol = tol;
    return solve_neumann(u, opt);
}

/// Radially symmetric Dirichlet solve on the disk from the cumulative mass:
/// v_r = -M(r)/(2 pi r) at shell faces, integrated inwards from v(R) = 0.
inline Potential solve_radial_dirichlet(const Field& u) {
    const GridSpec& g = u.grid;
    if (!g.is_radial()) throw InvalidArgument("radial solve requires a radial-disk grid");
    const int n = g.n();
    const double dr = g.h();
    std::vector<double> face_mass(n + 1, 0.0);
    CompensatedSum acc;
    for (int i = 0; i < n; ++i) {
        acc.add(u.values[i] * g.cell_area(i));
        face_mass[i + 1] = acc.value();
    }
    Potential pot{g, std::vector<double>(n, 0.0), Model::dirichlet, 0.0, 0};
    auto& v = pot.values;
    v[n - 1] = 0.5 * dr * face_mass[n] / (2.0 * pi * g.length());
    for (int i = n - 2; i >= 0; --i) v[i] = v[i + 1] + dr * face_mass[i + 1] / (2.0 * pi * (i + 1) * dr);

    // Discrete residual of -(1/r)(r v_r)_r = u using the same face fluxes.
    double worst = 0.0, scale = 0.0;
    for (int i = 0; i < n; ++i) {
        const double r_in = i * dr, r_out = (i + 1) * dr;
        const double flux_out = i < n - 1 ? r_out * (v[i + 1] - v[i]) / dr : r_out * (0.0 - v[i]) / (0.5 * dr);
        const double flux_in = i > 0 ? r_in * (v[i] - v[i - 1]) / dr : 0.0;
        const double lap = -(flux_out - flux_in) / (g.center_coord(i) * dr);
        worst = std::max(worst, std::abs(lap - u.values[i]));
        scale = std::max(scale, std::abs(u.values[i]));
    }
    pot.residual_norm = scale > 0.0 ? worst / scale : worst;
    return pot;
}

/// Dispatches to the solver for `model` on the field's geometry.
inline Potential solve_potential(const Field& u, Model model, const PoissonOptions& opt = {},
                                 const std::vector<double>* guess = nullptr) {
    switch (model) {
        case Model::passive:
            return Potential{u.grid, std::vector<double>(u.grid.cell_count(), 0.0), Model::passive, 0.0, 0};
        case Model::neumann:
            if (u.grid.is_radial()) throw InvalidArgument("the radial solver supports the dirichlet model only");
            return solve_neumann(u, opt, guess);
        case Model::dirichlet:
            if (u.grid.is_radial()) return solve_radial_dirichlet(u);
            return solve_dirichlet(u, opt, guess);
    }
    throw InvalidArgument("unknown model");
}

/// Half the Green quadratic form, sum(u v area) / 2. Only the dirichlet
/// potential gives the classical free-energy term; a neumann potential gives
/// the analogous quantity for the mean-corrected model. `model` must match the
/// potential's variant.
inline double green_energy(const Field& u, const Potential& v, Model model) {
    if (v.bc != model)
        throw InvalidArgument(std::string("potential variant ") + to_string(v.bc) + " does not match active model " +
                              to_string(model));
    if (!(u.grid == v.grid)) throw InvalidArgument("density and potential live on different grids");
    CompensatedSum s;
    for (std::size_t k = 0; k < u.values.size(); ++k) s.add(u.values[k] * v.values[k] * u.grid.cell_area(k));
    return 0.5 * s.value();
}

/// Bilinear form sum(u1 v2 area) / 2 for symmetry checks.
inline double green_pairing(const Field& u1, const Potential& v2) {
    CompensatedSum s;
    for (std::size_t k = 0; k < u1.values.size(); ++k) s.add(u1.values[k] * v2.values[k] * u1.grid.cell_area(k));
    return 0.5 * s.value();
}

}  // namespace collapse_lab
