#pragma once

// Observables of a run: free energy and its dissipation, blowup-time
// extrapolation, collapse-ball detection inside the parabolic window
// B(x0, b R(t)) with R(t) = (T - t)^{1/2}, and circular averages.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"
#include "collapse_lab/poisson.hpp"
#include "collapse_lab/stepper.hpp"

namespace collapse_lab {

// ---------------------------------------------------------------------------
// Free energy

struct EnergyRecord {
    double t = 0.0;
    double F = 0.0;     ///< entropy minus half the Green form
    double D = 0.0;     ///< dissipation sum u |grad(log u - v)|^2 area
    double mass = 0.0;
    /// Set when the potential is not the dirichlet one, so F is the analogue
    /// for that model rather than the classical functional.
    bool variant_energy = false;
};

namespace detail {

/// Centred derivative of w along one axis with mirrored ghosts at the ends,
/// matching the zero normal flux of the continuous problem.
inline double centred_diff(double w_lo, double w_mid, double w_hi, bool has_lo, bool has_hi, double h) {
    const double lo = has_lo ? w_lo : w_mid;
    const double hi = has_hi ? w_hi : w_mid;
    return (hi - lo) / (2.0 * h);
}

}  // namespace detail

/// F and D for a density and its potential; works on both geometries.
inline EnergyRecord free_energy(const Field& u, const Potential& v, Model model, double t = 0.0) {
    const GridSpec& g = u.grid;
    if (!(g == v.grid)) throw InvalidArgument("density and potential live on different grids");
    EnergyRecord rec;
    rec.t = t;
    rec.mass = total_mass(u);
    rec.variant_energy = model != Model::dirichlet;

    CompensatedSum entropy;
    for (std::size_t k = 0; k < u.values.size(); ++k) {
        const double x = u.values[k];
        if (x > 0.0) entropy.add(x * (std::log(x) - 1.0) * g.cell_area(k));
    }
    rec.F = entropy.value() - green_energy(u, v, model);

    const double umax = u.max();
    if (!(umax > 0.0)) return rec;
    const double floor = 1e-12 * umax;
    std::vector<double> w(u.values.size());
    for (std::size_t k = 0; k < w.size(); ++k) w[k] = std::log(std::max(u.values[k], floor)) - v.values[k];

    const int n = g.n();
    const double h = g.h();
    CompensatedSum diss;
    if (g.is_square()) {
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const std::size_t c = g.index(i, j);
                if (u.values[c] <= floor) continue;
                const double gx = detail::centred_diff(i > 0 ? w[c - 1] : 0.0, w[c], i + 1 < n ? w[c + 1] : 0.0,
                                                       i > 0, i + 1 < n, h);
                const double gy = detail::centred_diff(j > 0 ? w[c - n] : 0.0, w[c], j + 1 < n ? w[c + n] : 0.0,
                                                       j > 0, j + 1 < n, h);
                diss.add(u.values[c] * (gx * gx + gy * gy) * g.cell_area(c));
            }
    } else {
        for (int i = 0; i < n; ++i) {
            if (u.values[i] <= floor) continue;
            const double gr = detail::centred_diff(i > 0 ? w[i - 1] : 0.0, w[i], i + 1 < n ? w[i + 1] : 0.0, i > 0,
                                                   i + 1 < n, h);
            diss.add(u.values[i] * gr * gr * g.cell_area(i));
        }
    }
    rec.D = diss.value();
    return rec;
}

inline EnergyRecord free_energy(const SimState& s) { return free_energy(s.field, s.potential, s.model, s.t); }

struct TrendVerdict {
    std::vector<std::size_t> violations;  ///< indices k where F[k] rose above F[k-1]
    double max_defect = 0.0;              ///< max |dF/dt + D| over consecutive pairs
    bool clean() const { return violations.empty(); }
};

/// Monotonicity of F and the discrete dissipation identity along a series.
/// The identity uses the trapezoid average of D over each interval.
inline TrendVerdict energy_trend_check(std::span<const EnergyRecord> records, double rel_tol = 1e-8) {
    if (records.size() < 2) throw InvalidArgument("energy trend needs at least two records");
    TrendVerdict v;
    for (std::size_t k = 1; k < records.size(); ++k) {
        const EnergyRecord& a = records[k - 1];
        const EnergyRecord& b = records[k];
        if (b.F - a.F > rel_tol * std::abs(a.F)) v.violations.push_back(k);
        const double dt = b.t - a.t;
        if (dt > 0.0) v.max_defect = std::max(v.max_defect, std::abs((b.F - a.F) / dt + 0.5 * (a.D + b.D)));
    }
    return v;
}

// ---------------------------------------------------------------------------
// Blowup time

struct SupSample {
    double t = 0.0;
    double sup = 0.0;
};

struct BlowupEstimate {
    double T_hat = 0.0;
    double t1 = 0.0, t2 = 0.0;  ///< fit window
    double fit_residual = 0.0;  ///< RMS misfit of 1/sup relative to its window mean
    double slope = 0.0;         ///< d(1/sup)/dt, negative for a blowup trend

    /// Parabolic length scale (T_hat - t)^{1/2}.
    double R(double t) const {
        if (!(t < T_hat)) throw InvalidArgument("time lies at or beyond the estimated blowup time");
        return std::sqrt(T_hat - t);
    }
    double tau(double t) const { return T_hat - t; }
};

/// Least-squares fit of 1/sup = alpha + beta t over one decade of growth.
/// decade_shift = 0 uses the last decade; k uses the decade k decades earlier.
inline BlowupEstimate estimate_blowup_time(std::span<const SupSample> series, int decade_shift = 0) {
    if (series.size() < 5) throw InvalidArgument("blowup estimate needs at least 5 samples");
    if (decade_shift < 0) throw InvalidArgument("decade shift must be nonnegative");
    const double s_end = series.back().sup;
    const double s_min =
        std::min_element(series.begin(), series.end(), [](auto& a, auto& b) { return a.sup < b.sup; })->sup;
    if (!(s_end > 0.0) || !(s_end >= 10.0 * s_min * (1.0 - 1e-9)) || !(series.back().sup >= series.front().sup))
        throw NoBlowupTrend("no blowup trend: sup-norm grew by less than 10x");

    // Tail start for a given growth level: first index after the last sample below it.
    auto tail_start = [&](double level) {
        std::size_t k = series.size();
        while (k > 0 && series[k - 1].sup >= level) --k;
        return k;
    };
    const double hi = s_end / std::pow(10.0, decade_shift);
    const double lo = hi / 10.0 * (1.0 - 1e-9);
    const std::size_t first = tail_start(lo);
    std::size_t last = series.size() - 1;
    if (decade_shift > 0) {
        const std::size_t upper = tail_start(hi);
        if (upper == 0) throw NoBlowupTrend("series does not reach back the requested number of decades");
        last = upper - 1;
    }
    if (last < first || last - first + 1 < 5)
        throw NoBlowupTrend("fewer than 5 samples in the fit window");

    double st = 0.0, sy = 0.0;
    const double m = static_cast<double>(last - first + 1);
    for (std::size_t k = first; k <= last; ++k) {
        st += series[k].t;
        sy += 1.0 / series[k].sup;
    }
    const double t_mean = st / m, y_mean = sy / m;
    double stt = 0.0, sty = 0.0;
    for (std::size_t k = first; k <= last; ++k) {
        const double dt = series[k].t - t_mean;
        stt += dt * dt;
        sty += dt * (1.0 / series[k].sup - y_mean);
    }
    if (!(stt > 0.0)) throw NoBlowupTrend("fit window has no time extent");
    const double beta = sty / stt;
    const double alpha = y_mean - beta * t_mean;
    if (!(beta < 0.0)) throw NoBlowupTrend("no blowup trend: 1/sup is not decreasing");

    BlowupEstimate est;
    est.T_hat = -alpha / beta;
    est.slope = beta;
    est.t1 = series[first].t;
    est.t2 = series[last].t;
    double ss = 0.0;
    for (std::size_t k = first; k <= last; ++k) {
        const double r = 1.0 / series[k].sup - (alpha + beta * series[k].t);
        ss += r * r;
    }
    est.fit_residual = std::sqrt(ss / m) / y_mean;
    if (!(est.T_hat > est.t2) || !std::isfinite(est.fit_residual))
        throw NoBlowupTrend("extrapolated blowup time does not lie beyond the fit window");
    return est;
}

// ---------------------------------------------------------------------------
// Collapse detection

struct CollapseBall {
    Point center;
    double radius = 0.0;
    double mass = 0.0;
    bool quantized = false;
};

struct DetectorOptions {
    double radius_cap_factor = 3.0;    ///< balls stop at this multiple of R(t)
    double step_fraction = 1.0;       ///< radius increment as a fraction of R(t)
    double increment_fraction = 0.01;  ///< stop once a step adds less than this fraction of 8 pi
    double median_factor = 10.0;       ///< candidate peaks exceed this multiple of the window median
};

struct CollapseReport {
    double t = 0.0;
    Point x0;
    double b = 0.0;
    double R = 0.0;
    double epsilon = 0.5;
    double window_mass = 0.0;
    double residual_mass = 0.0;
    std::vector<CollapseBall> balls;
    std::vector<std::string> merges;

    double window_radius() const { return b * R; }
    std::size_t quantized_count() const {
        return static_cast<std::size_t>(std::count_if(balls.begin(), balls.end(), [](auto& c) { return c.quantized; }));
    }
};

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double m = v[mid];
    if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + mid));
    return m;
}

struct Peak {
    Point at;
    double value;
    std::size_t index;
};

inline std::vector<Peak> window_peaks(const Field& f, Point x0, double W, double threshold) {
    const GridSpec& g = f.grid;
    std::vector<Peak> peaks;
    if (g.is_radial()) {
        const auto& u = f.values;
        if (u[0] > threshold && u[0] >= u[1]) peaks.push_back({Point{0.0, 0.0}, u[0], 0});
        return peaks;
    }
    const int n = g.n();
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const Point c = g.cell_center(i, j);
            if (norm(c - x0) > W) continue;
            const std::size_t idx = g.index(i, j);
            const double x = f.values[idx];
            if (!(x > threshold)) continue;
            bool peak = true;
            for (int dj = -1; dj <= 1 && peak; ++dj)
                for (int di = -1; di <= 1 && peak; ++di) {
                    if (di == 0 && dj == 0) continue;
                    const int a = i + di, b = j + dj;
                    if (a < 0 || b < 0 || a >= n || b >= n) continue;
                    const std::size_t nb = g.index(a, b);
                    // Plateaus keep only their lowest-index cell.
                    if (f.values[nb] > x || (f.values[nb] == x && nb < idx)) peak = false;
                }
            if (peak) peaks.push_back({c, x, idx});
        }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
        return a.value != b.value ? a.value > b.value : a.index < b.index;
    });
    return peaks;
}

}  // namespace detail

/// Grows a ball around `center` in steps of step_fraction R until a step adds
/// less than increment_fraction 8 pi (that step is kept) or the radius
/// reaches min(radius_cap_factor R, distance to the window edge).
inline CollapseBall grow_ball(const Field& f, Point center, Point x0, double R, double W,
                              const DetectorOptions& opt) {
    const double cap = std::min(opt.radius_cap_factor * R, W - norm(center - x0));
    CollapseBall ball{center, 0.0, 0.0, false};
    if (!(cap > 0.0)) return ball;
    const double step = opt.step_fraction * R;
    double r = std::min(step, cap);
    double m = local_ball_mass(f, center, r);
    while (r < cap) {
        const double r_next = std::min(r + step, cap);
        const double m_next = local_ball_mass(f, center, r_next);
        const double inc = m_next - m;
        r = r_next;
        m = m_next;
        if (inc < opt.increment_fraction * eight_pi) break;
    }
    ball.radius = r;
    ball.mass = m;
    return ball;
}

/// Disjoint collapse balls inside the window B(x0, b R(t)) and the residual
/// window mass outside them.
inline CollapseReport detect_collapses(const Field& f, double t, const BlowupEstimate& est, Point x0, double b,
                                       double epsilon = 0.5, const DetectorOptions& opt = {}) {
    if (!(b > 0.0)) throw InvalidArgument("window factor b must be positive");
    if (!(epsilon > 0.0)) throw InvalidArgument("quantization tolerance must be positive");
    if (!(opt.step_fraction > 0.0) || !(opt.radius_cap_factor > 0.0))
        throw InvalidArgument("detector step and cap must be positive");
    const GridSpec& g = f.grid;
    if (g.is_radial() && !(x0 == Point{0.0, 0.0}))
        throw InvalidArgument("radial fields only support a window centred at the origin");
    const double R = est.R(t);
    const double W = b * R;
    if (g.distance_to_boundary(x0) < -W) throw InvalidArgument("collapse window does not meet the domain");

    CollapseReport rep;
    rep.t = t;
    rep.x0 = x0;
    rep.b = b;
    rep.R = R;
    rep.epsilon = epsilon;
    rep.window_mass = local_ball_mass(f, x0, W);

    std::vector<double> inside;
    if (g.is_radial()) {
        for (int i = 0; i < g.n() && g.center_coord(i) <= W; ++i) inside.push_back(f.values[i]);
    } else {
        for (int j = 0; j < g.n(); ++j)
            for (int i = 0; i < g.n(); ++i)
                if (norm(g.cell_center(i, j) - x0) <= W) inside.push_back(f.at(i, j));
    }
    const double threshold = opt.median_factor * detail::median(std::move(inside));

    auto overlaps = [](const CollapseBall& a, const CollapseBall& c) {
        return norm(a.center - c.center) < a.radius + c.radius;
    };
    std::vector<CollapseBall> balls;
    for (const auto& peak : detail::window_peaks(f, x0, W, threshold)) {
        bool covered = false;
        for (const auto& c : balls)
            if (norm(peak.at - c.center) < c.radius) covered = true;
        if (covered) continue;
        CollapseBall ball = grow_ball(f, peak.at, x0, R, W, opt);
        if (!(ball.radius > 0.0)) continue;
        // Merge with every overlapping ball at the mass-weighted centre and regrow.
        for (bool again = true; again;) {
            again = false;
            for (std::size_t k = 0; k < balls.size(); ++k) {
                if (!overlaps(ball, balls[k])) continue;
                const CollapseBall other = balls[k];
                const double wsum = ball.mass + other.mass;
                const Point c = wsum > 0.0 ? (ball.center * ball.mass + other.center * other.mass) * (1.0 / wsum)
                                           : (ball.center + other.center) * 0.5;
                std::ostringstream log;
                log << "merged balls at (" << ball.center.x << ", " << ball.center.y << ") and (" << other.center.x
                    << ", " << other.center.y << ") into (" << c.x << ", " << c.y << ")";
                rep.merges.push_back(log.str());
                balls.erase(balls.begin() + static_cast<std::ptrdiff_t>(k));
                ball = grow_ball(f, c, x0, R, W, opt);
                again = true;
                break;
            }
        }
        if (ball.radius > 0.0) balls.push_back(ball);
    }
    CompensatedSum in_balls;
    for (auto& c : balls) {
        c.quantized = std::abs(c.mass - eight_pi) < epsilon;
        in_balls.add(c.mass);
    }
    rep.balls = std::move(balls);
    rep.residual_mass = rep.window_mass - in_balls.value();
    return rep;
}

/// CSV export "t,index,x,y,radius,mass,quantized" with one row per ball.
inline void write_collapse_csv(std::ostream& os, const CollapseReport& rep, bool header = true) {
    if (header) os << "t,index,x,y,radius,mass,quantized,residual\n";
    os << std::setprecision(17);
    for (std::size_t k = 0; k < rep.balls.size(); ++k) {
        const auto& c = rep.balls[k];
        os << rep.t << ',' << k << ',' << c.center.x << ',' << c.center.y << ',' << c.radius << ',' << c.mass << ','
           << (c.quantized ? 1 : 0) << ',' << rep.residual_mass << '\n';
    }
}

// ---------------------------------------------------------------------------
// Circular averages

inline constexpr int circle_samples = 64;

/// Mean of f over the circle |x - center| = r from 64 equispaced samples.
inline double radial_average(const Field& f, Point center, double r) {
    if (r < 0.0) throw InvalidArgument("radius must be nonnegative");
    if (f.grid.distance_to_boundary(center) < r) {
        std::ostringstream os;
        os << "circle of radius " << r << " around (" << center.x << ", " << center.y << ") leaves the domain";
        throw InvalidArgument(os.str());
    }
    if (r == 0.0) return sample(f, center);
    double s = 0.0;
    for (int k = 0; k < circle_samples; ++k) {
        const double th = 2.0 * pi * k / circle_samples;
        s += sample(f, {center.x + r * std::cos(th), center.y + r * std::sin(th)});
    }
    return s / circle_samples;
}

/// Trapezoid integral of rho * radial_average(rho) over [0, r]; equals the
/// ball mass divided by 2 pi.
inline double shell_mass(const Field& f, Point center, double r) {
    if (r < 0.0) throw InvalidArgument("radius must be nonnegative");
    if (r == 0.0) return 0.0;
    const int m = std::max(32, 2 * static_cast<int>(std::ceil(r / f.grid.h())));
    const double d = r / m;
    double s = 0.0;
    for (int k = 1; k <= m; ++k) {
        const double rho = k * d;
        s += (k == m ? 0.5 : 1.0) * rho * radial_average(f, center, rho);
    }
    return s * d;
}

struct WindowMass {
    double b = 0.0;
    double radius = 0.0;
    double mass = 0.0;
};

/// Local masses in B(x0, b R(t)) for each b.
inline std::vector<WindowMass> mass_window_sweep(const Field& f, double t, const BlowupEstimate& est, Point x0,
                                                 std::span<const double> b_list) {
    const double R = est.R(t);
    std::vector<WindowMass> out;
    out.reserve(b_list.size());
    for (double b : b_list) {
        if (!(b > 0.0)) throw InvalidArgument("window factor b must be positive");
        out.push_back({b, b * R, local_ball_mass(f, x0, b * R)});
    }
    return out;
}

}  // namespace collapse_lab
