#pragma once

// Backward self-similar frames pulled back from physical snapshots:
//
//     z(y, s) = tau u(x0 + sqrt(tau) y, t),   tau = T_hat - t,   s = -log tau.
//
// Square snapshots are sampled bilinearly on an n_y x n_y grid covering
// [-y_max, y_max]^2, with the disk |y| <= y_max weighted by subcell coverage.
// Radial snapshots use n_y shells on [0, y_max] holding the exact shell mass
// of the pulled-back ball, so frame_mass matches the physical ball mass.

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "collapse_lab/diagnostics.hpp"
#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"

namespace collapse_lab {

struct RescaledFrame {
    DomainKind kind = DomainKind::square;
    double t = 0.0;
    double tau = 0.0;
    double s = 0.0;
    Point x0;
    double y_max = 0.0;
    int n_y = 0;
    std::vector<double> z;       ///< n_y^2 values (row-major) or n_y shells
    std::vector<double> weight;  ///< fraction of each y-cell inside |y| <= y_max
    double frame_mass = 0.0;
    double second_moment = 0.0;

    double dy() const { return kind == DomainKind::square ? 2.0 * y_max / n_y : y_max / n_y; }
    /// Centre of y-cell (i, j) for square frames.
    Point y_center(int i, int j) const { return {-y_max + (i + 0.5) * dy(), -y_max + (j + 0.5) * dy()}; }
    /// Inner and outer radius of shell k for radial frames.
    double y_inner(int k) const { return k * dy(); }
    double y_outer(int k) const { return (k + 1) * dy(); }
    /// Area of y-cell k (full cell, before coverage weighting).
    double cell_area(std::size_t k) const {
        if (kind == DomainKind::square) return dy() * dy();
        const double a = y_inner(static_cast<int>(k)), b = y_outer(static_cast<int>(k));
        return pi * (b * b - a * a);
    }
};

namespace detail {

inline double subcell_disk_coverage(double x0, double y0, double d, double radius) {
    const double dx_near = std::max({x0, 0.0, -(x0 + d)});
    const double dy_near = std::max({y0, 0.0, -(y0 + d)});
    if (dx_near * dx_near + dy_near * dy_near >= radius * radius) return 0.0;
    const double dx_far = std::max(std::abs(x0), std::abs(x0 + d));
    const double dy_far = std::max(std::abs(y0), std::abs(y0 + d));
    if (dx_far * dx_far + dy_far * dy_far <= radius * radius) return 1.0;
    int inside = 0;
    for (int b = 0; b < 4; ++b)
        for (int a = 0; a < 4; ++a) {
            const double px = x0 + (a + 0.5) * d / 4.0, py = y0 + (b + 0.5) * d / 4.0;
            if (px * px + py * py <= radius * radius) ++inside;
        }
    return inside / 16.0;
}

inline void frame_moments(RescaledFrame& fr) {
    CompensatedSum mass, moment;
    const int n = fr.n_y;
    if (fr.kind == DomainKind::square) {
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) {
                const std::size_t k = static_cast<std::size_t>(j) * n + i;
                const Point y = fr.y_center(i, j);
                const double m = fr.z[k] * fr.weight[k] * fr.cell_area(k);
                mass.add(m);
                moment.add(m * (y.x * y.x + y.y * y.y));
            }
    } else {
        for (int k = 0; k < n; ++k) {
            const double a = fr.y_inner(k), b = fr.y_outer(k);
            const double m = fr.z[k] * fr.cell_area(k);
            mass.add(m);
            // Mean of |y|^2 over the annulus for a uniform shell density.
            moment.add(m * 0.5 * (a * a + b * b));
        }
    }
    fr.frame_mass = mass.value();
    fr.second_moment = moment.value();
}

}  // namespace detail

/// Pulls a snapshot at time t back to self-similar variables around x0.
inline RescaledFrame make_frame(const Field& f, double t, const BlowupEstimate& est, Point x0, double y_max,
                                int n_y) {
    if (!(t < est.T_hat)) throw InvalidArgument("frame time must precede the estimated blowup time");
    if (!(y_max > 0.0)) throw InvalidArgument("y_max must be positive");
    if (n_y < 2) throw InvalidArgument("frame needs at least 2 cells per axis");
    const GridSpec& g = f.grid;
    if (g.is_radial() && !(x0 == Point{0.0, 0.0}))
        throw InvalidArgument("radial snapshots only admit frames centred at the origin");

    RescaledFrame fr;
    fr.kind = g.kind();
    fr.t = t;
    fr.tau = est.T_hat - t;
    fr.s = -std::log(fr.tau);
    fr.x0 = x0;
    fr.y_max = y_max;
    fr.n_y = n_y;
    const double scale = std::sqrt(fr.tau);
    const double reach = y_max * scale;
    if (g.distance_to_boundary(x0) < reach * (1.0 - 1e-12)) {
        std::ostringstream os;
        os << "pullback window of radius " << reach << " around (" << x0.x << ", " << x0.y
           << ") leaves the domain at t = " << t;
        throw InvalidArgument(os.str());
    }

    if (fr.kind == DomainKind::square) {
        fr.z.assign(static_cast<std::size_t>(n_y) * n_y, 0.0);
        fr.weight.assign(fr.z.size(), 0.0);
        const double d = fr.dy();
        for (int j = 0; j < n_y; ++j)
            for (int i = 0; i < n_y; ++i) {
                const std::size_t k = static_cast<std::size_t>(j) * n_y + i;
                const double w = detail::subcell_disk_coverage(-y_max + i * d, -y_max + j * d, d, y_max);
                fr.weight[k] = w;
                if (w == 0.0) continue;
                const Point y = fr.y_center(i, j);
                Point x = x0 + y * scale;
                // Cell centres of boundary-straddling y-cells may sit just outside the domain.
                x.x = std::clamp(x.x, 0.0, g.length());
                x.y = std::clamp(x.y, 0.0, g.length());
                fr.z[k] = fr.tau * sample(f, x);
            }
    } else {
        fr.z.assign(n_y, 0.0);
        fr.weight.assign(n_y, 1.0);
        double inner = 0.0;
        for (int k = 0; k < n_y; ++k) {
            const double outer = local_ball_mass(f, x0, fr.y_outer(k) * scale);
            fr.z[k] = (outer - inner) / fr.cell_area(k);
            inner = outer;
        }
    }
    detail::frame_moments(fr);
    return fr;
}

/// Writes "yx,yy,z" rows; radial shells are listed at their mid radius on the yx axis.
inline void write_frame_csv(std::ostream& os, const RescaledFrame& fr) {
    os << "yx,yy,z\n" << std::setprecision(17);
    if (fr.kind == DomainKind::square) {
        for (int j = 0; j < fr.n_y; ++j)
            for (int i = 0; i < fr.n_y; ++i) {
                const Point y = fr.y_center(i, j);
                os << y.x << ',' << y.y << ',' << fr.z[static_cast<std::size_t>(j) * fr.n_y + i] << '\n';
            }
    } else {
        for (int k = 0; k < fr.n_y; ++k) os << 0.5 * (fr.y_inner(k) + fr.y_outer(k)) << ",0," << fr.z[k] << '\n';
    }
}

// ---------------------------------------------------------------------------
// Envelope series

struct EnvelopePoint {
    double s = 0.0;
    double frame_mass = 0.0;
    double second_moment = 0.0;
    bool flagged = false;  ///< second moment above 3x the series median
};

struct EnvelopeSeries {
    std::vector<EnvelopePoint> points;
    double median_second_moment = 0.0;
    bool any_flagged() const {
        return std::any_of(points.begin(), points.end(), [](auto& p) { return p.flagged; });
    }
};

inline EnvelopeSeries envelope_series(std::span<const RescaledFrame> frames, double flag_factor = 3.0) {
    EnvelopeSeries out;
    if (frames.empty()) return out;
    for (std::size_t k = 1; k < frames.size(); ++k) {
        if (!(frames[k].x0 == frames[0].x0) || frames[k].y_max != frames[0].y_max)
            throw InvalidArgument("envelope frames must share x0 and y_max");
        if (!(frames[k].s > frames[k - 1].s)) throw InvalidArgument("envelope frames must have increasing s");
    }
    std::vector<double> moments;
    for (const auto& fr : frames) {
        out.points.push_back({fr.s, fr.frame_mass, fr.second_moment, false});
        moments.push_back(fr.second_moment);
    }
    out.median_second_moment = detail::median(moments);
    for (auto& p : out.points) p.flagged = p.second_moment > flag_factor * out.median_second_moment;
    return out;
}

// ---------------------------------------------------------------------------
// Scaling back

/// a(y') = e^s z(e^{s/2} y') at s' = -e^{-s}. The y'-grid is the frame's
/// y-grid shrunk by e^{-s/2}, so no resampling is involved.
struct ScaledBackFrame {
    DomainKind kind = DomainKind::square;
    double s_prime = 0.0;
    double source_s = 0.0;
    Point x0;
    double y_max = 0.0;  ///< in y' units
    int n_y = 0;
    std::vector<double> a;
    std::vector<double> weight;
    double mass = 0.0;
};

inline ScaledBackFrame scale_back(const RescaledFrame& fr) {
    ScaledBackFrame out;
    out.kind = fr.kind;
    out.source_s = fr.s;
    out.s_prime = -std::exp(-fr.s);
    out.x0 = fr.x0;
    const double shrink = std::exp(-0.5 * fr.s);
    out.y_max = fr.y_max * shrink;
    out.n_y = fr.n_y;
    out.weight = fr.weight;
    const double grow = std::exp(fr.s);
    out.a.resize(fr.z.size());
    for (std::size_t k = 0; k < fr.z.size(); ++k) out.a[k] = grow * fr.z[k];
    CompensatedSum m;
    for (std::size_t k = 0; k < out.a.size(); ++k) m.add(out.a[k] * out.weight[k] * fr.cell_area(k) * shrink * shrink);
    out.mass = m.value();
    return out;
}

/// Inverse of scale_back.
inline RescaledFrame scale_forward(const ScaledBackFrame& back, double t = 0.0) {
    if (!(back.s_prime < 0.0)) throw InvalidArgument("s' must be negative");
    RescaledFrame fr;
    fr.kind = back.kind;
    fr.s = -std::log(-back.s_prime);
    fr.tau = std::exp(-fr.s);
    fr.t = t;
    fr.x0 = back.x0;
    fr.y_max = back.y_max * std::exp(0.5 * fr.s);
    fr.n_y = back.n_y;
    fr.weight = back.weight;
    fr.z.resize(back.a.size());
    const double shrink = std::exp(-fr.s);
    for (std::size_t k = 0; k < fr.z.size(); ++k) fr.z[k] = shrink * back.a[k];
    detail::frame_moments(fr);
    return fr;
}

// ---------------------------------------------------------------------------
// Sensitivity of the envelope to the blowup-time estimate

struct Snapshot {
    double t = 0.0;
    Field field;
};

struct EnvelopeSensitivity {
    EnvelopeSeries nominal, early, late;  ///< T_hat, T_hat (1 - d), T_hat (1 + d)
    double plateau_nominal = 0.0;
    double max_plateau_shift = 0.0;  ///< relative shift of the plateau level
    bool reported = false;           ///< shift below the tolerance
};

namespace detail {

inline double plateau_level(const EnvelopeSeries& s) {
    if (s.points.empty()) return 0.0;
    const std::size_t from = s.points.size() / 2;
    double acc = 0.0;
    for (std::size_t k = from; k < s.points.size(); ++k) acc += s.points[k].frame_mass;
    return acc / static_cast<double>(s.points.size() - from);
}

}  // namespace detail

/// Builds the envelope series for T_hat and T_hat (1 +- rel_perturbation).
/// Snapshots at or past a perturbed blowup time, or whose pullback window
/// leaves the domain, are skipped. The plateau is the mean frame mass over the
/// second half of each series.
inline EnvelopeSensitivity envelope_sensitivity(std::span<const Snapshot> snaps, const BlowupEstimate& est, Point x0,
                                                double y_max, int n_y, double rel_perturbation = 1e-3,
                                                double tolerance = 0.01) {
    auto build = [&](double T) {
        BlowupEstimate e = est;
        e.T_hat = T;
        std::vector<RescaledFrame> frames;
        for (const auto& sn : snaps) {
            if (!(sn.t < T)) continue;
            const double reach = y_max * std::sqrt(T - sn.t);
            if (sn.field.grid.distance_to_boundary(x0) < reach) continue;
            frames.push_back(make_frame(sn.field, sn.t, e, x0, y_max, n_y));
        }
        return envelope_series(frames);
    };
    EnvelopeSensitivity out;
    out.nominal = build(est.T_hat);
    out.early = build(est.T_hat * (1.0 - rel_perturbation));
    out.late = build(est.T_hat * (1.0 + rel_perturbation));
    out.plateau_nominal = detail::plateau_level(out.nominal);
    if (out.plateau_nominal > 0.0) {
        for (const auto* s : {&out.early, &out.late})
            out.max_plateau_shift = std::max(
                out.max_plateau_shift, std::abs(detail::plateau_level(*s) - out.plateau_nominal) / out.plateau_nominal);
        out.reported = out.max_plateau_shift < tolerance;
    }
    return out;
}

}  // namespace collapse_lab
