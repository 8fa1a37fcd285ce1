#pragma once

// Explicit conservative finite-volume update of u_t = Lap u - div(u grad v)
// on the square with zero total flux through every boundary face.
//
// Interior face flux (positive in +x / +y):
//     J = (u_L - u_R)/h + u_up (v_R - v_L)/h
// with u_up the face density for the drift velocity (v_R - v_L)/h. In the
// default hybrid mode u_up is the central average while the face Peclet
// number |v_R - v_L| stays at most 2, and the upwind cell value beyond that.
// Both choices keep every off-diagonal coefficient of the update
// nonnegative, so positivity holds under the same step bound.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>

#include "collapse_lab/error.hpp"
#include "collapse_lab/grid.hpp"
#include "collapse_lab/poisson.hpp"

namespace collapse_lab {

enum class PositivityMode { clip_and_rebalance, reject };

enum class FaceDensity { hybrid, upwind };

struct StepperConfig {
    /// Fraction of the stability bound actually used. Values <= 1/3 keep the
    /// explicit update a convex combination, hence positive.
    double dt_safety = 0.3;
    PositivityMode positivity_mode = PositivityMode::clip_and_rebalance;
    FaceDensity face_density = FaceDensity::hybrid;
    PoissonOptions poisson{};
};

struct SimState {
    Field field;
    Potential potential;
    double t = 0.0;
    long step_index = 0;
    double dt_last = 0.0;
    Model model = Model::dirichlet;
    long clip_events = 0;
};

inline SimState make_state(Field field, Model model, const PoissonOptions& opt = {}) {
    if (!field.grid.is_square()) throw InvalidArgument("the 2D stepper needs a square grid");
    if (field.min() < 0.0) throw InvalidArgument("initial density has negative cells");
    SimState s;
    s.potential = solve_potential(field, model, opt);
    s.field = std::move(field);
    s.model = model;
    return s;
}

/// Largest |v_R - v_L| / h over interior faces.
inline double max_face_drift(const Potential& v) {
    const GridSpec& g = v.grid;
    const int n = g.n();
    double worst = 0.0;
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const std::size_t c = g.index(i, j);
            if (i + 1 < n) worst = std::max(worst, std::abs(v.values[c + 1] - v.values[c]));
            if (j + 1 < n) worst = std::max(worst, std::abs(v.values[c + n] - v.values[c]));
        }
    return worst / g.h();
}

/// dt = dt_safety * min(h^2/4, h / (2 max|drift|)).
inline double stable_dt(const SimState& s, const StepperConfig& cfg) {
    if (!(cfg.dt_safety > 0.0 && cfg.dt_safety <= 1.0)) throw InvalidArgument("dt_safety must lie in (0, 1]");
    const double h = s.field.grid.h();
    double dt = 0.25 * h * h;
    const double drift = max_face_drift(s.potential);
    if (drift > 0.0) dt = std::min(dt, h / (2.0 * drift));
    return cfg.dt_safety * dt;
}

namespace detail {

/// Clips negative cells and removes the clipped mass proportionally from the
/// positive cells. Returns the clipped mass.
inline double clip_and_rebalance(std::vector<double>& u) {
    double clipped = 0.0, positive = 0.0;
    for (double& x : u) {
        if (x < 0.0) {
            clipped += -x;
            x = 0.0;
        } else {
            positive += x;
        }
    }
    if (clipped > 0.0 && positive > 0.0) {
        const double keep = 1.0 - clipped / positive;
        for (double& x : u) x *= keep;
    }
    return clipped;
}

}  // namespace detail

/// Advances by an explicit dt and re-solves the potential.
inline SimState step(const SimState& s, const StepperConfig& cfg, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidArgument("time step must be positive and finite");
    const GridSpec& g = s.field.grid;
    const int n = g.n();
    const double h = g.h();
    const double k = dt / h;
    const auto& u = s.field.values;
    const auto& v = s.potential.values;

    SimState out;
    out.model = s.model;
    out.clip_events = s.clip_events;
    out.field = s.field;
    auto& un = out.field.values;

    auto face = [&](std::size_t l, std::size_t r) {
        const double dv = v[r] - v[l];
        const bool central = cfg.face_density == FaceDensity::hybrid && std::abs(dv) <= 2.0;
        const double up = central ? 0.5 * (u[l] + u[r]) : dv > 0.0 ? u[l] : u[r];
        const double flux = (u[l] - u[r]) / h + up * dv / h;
        const double moved = k * flux;
        un[l] -= moved;
        un[r] += moved;
    };
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const std::size_t c = g.index(i, j);
            if (i + 1 < n) face(c, c + 1);
            if (j + 1 < n) face(c, c + n);
        }

    const double umax = *std::max_element(un.begin(), un.end());
    const double umin = *std::min_element(un.begin(), un.end());
    if (umin < 0.0) {
        if (umin < -1e-13 * umax) {
            if (cfg.positivity_mode == PositivityMode::reject)
                throw PositivityError("density went negative (" + std::to_string(umin) + ") at t = " +
                                      std::to_string(s.t + dt));
            ++out.clip_events;
        }
        detail::clip_and_rebalance(un);
    }

    out.potential = solve_potential(out.field, s.model, cfg.poisson, &s.potential.values);
    out.t = s.t + dt;
    out.step_index = s.step_index + 1;
    out.dt_last = dt;
    return out;
}

inline SimState step(const SimState& s, const StepperConfig& cfg) { return step(s, cfg, stable_dt(s, cfg)); }

struct StopRule {
    double t_end = std::numeric_limits<double>::infinity();
    long max_steps = std::numeric_limits<long>::max();
    double density_cap = std::numeric_limits<double>::infinity();
};

enum class StopReason { reached_t_end, max_steps, density_cap_hit };

inline const char* to_string(StopReason r) {
    switch (r) {
        case StopReason::reached_t_end: return "reached_t_end";
        case StopReason::max_steps: return "max_steps";
        case StopReason::density_cap_hit: return "density_cap_hit";
    }
    return "?";
}

/// Checks the stop rule against a state; shared by the 2D and radial drivers.
inline std::optional<StopReason> check_stop(double t, long step_index, double sup, const StopRule& stop) {
    if (t >= stop.t_end) return StopReason::reached_t_end;
    if (step_index >= stop.max_steps) return StopReason::max_steps;
    if (sup >= stop.density_cap) return StopReason::density_cap_hit;
    return std::nullopt;
}

/// Steps until the first stop rule fires. `observer` sees every new state.
template <class Observer>
std::pair<SimState, StopReason> run_until(SimState s, const StepperConfig& cfg, const StopRule& stop,
                                          Observer&& observer) {
    while (true) {
        if (auto why = check_stop(s.t, s.step_index, s.field.max(), stop)) return {std::move(s), *why};
        double dt = stable_dt(s, cfg);
        const bool last = s.t + dt >= stop.t_end;
        if (last) dt = stop.t_end - s.t;
        s = step(s, cfg, dt);
        if (last) s.t = stop.t_end;
        observer(s);
    }
}

inline std::pair<SimState, StopReason> run_until(SimState s, const StepperConfig& cfg, const StopRule& stop) {
    return run_until(std::move(s), cfg, stop, [](const SimState&) {});
}

}  // namespace collapse_lab
