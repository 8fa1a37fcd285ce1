#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "collapse_lab/radial_oracle.hpp"

using namespace collapse_lab;

namespace {

MassProfile quadratic_profile(int n, double R, double lambda) {
    const GridSpec g = GridSpec::radial_disk(n, R);
    MassProfile p{g, std::vector<double>(n), 0.0, 0};
    for (int k = 0; k < n; ++k) {
        const double r = (k + 1) * g.h();
        p.M[k] = lambda * r * r / (R * R);
    }
    p.M.back() = lambda;
    return p;
}

}  // namespace

TEST(MassProfile, ConstantDensityIsQuadratic) {
    const double lambda = 3.0, R = 0.5;
    const GridSpec g = GridSpec::radial_disk(64, R);
    const MassProfile p = profile_from_field(Field(g, lambda / (pi * R * R)));
    for (int k = 0; k < g.n(); ++k) {
        const double r = p.node_radius(k);
        EXPECT_NEAR(p.M[k], lambda * r * r / (R * R), 1e-13);
    }
    EXPECT_EQ(p.node_mass(0), 0.0);
    EXPECT_NEAR(p.lambda(), lambda, 1e-13);
}

TEST(OracleDensity, QuadraticProfileGivesConstantDensity) {
    const double lambda = 7.0, R = 0.8;
    const MassProfile p = quadratic_profile(100, R, lambda);
    const Field u = oracle_density(p);
    for (double x : u.values) EXPECT_NEAR(x, lambda / (pi * R * R), 1e-11);
    EXPECT_NEAR(oracle_sup(p), lambda / (pi * R * R), 1e-11);
}

TEST(OracleDensity, PointMassLeavesOnlyTheFirstShell) {
    const GridSpec g = GridSpec::radial_disk(50, 1.0);
    MassProfile p{g, std::vector<double>(50, 5.0), 0.0, 0};
    const Field u = oracle_density(p);
    EXPECT_GT(u.values[0], 0.0);
    for (int i = 1; i < 50; ++i) EXPECT_EQ(u.values[i], 0.0);
}

TEST(OracleDensity, RoundTripThroughCumulativeMass) {
    const GridSpec g = GridSpec::radial_disk(400, 0.5);
    Field f(g);
    for (int i = 0; i < g.n(); ++i) {
        const double r = g.center_coord(i);
        f.values[i] = 50.0 * std::exp(-r * r / 0.005) + 1.0;
    }
    const Field back = oracle_density(profile_from_field(f));
    for (int i = 0; i < g.n(); ++i) EXPECT_NEAR(back.values[i], f.values[i], 1e-9 * f.max());
}

TEST(MassWithin, InterpolatesExactlyForConstantDensity) {
    const MassProfile p = quadratic_profile(16, 1.0, 2.0);
    for (double r : {0.0, 0.01, 0.33, 0.5, 0.97, 1.0, 2.0}) EXPECT_NEAR(mass_within(p, r), 2.0 * std::min(r * r, 1.0), 1e-13);
}

TEST(OracleStep, PinsTotalMassAndStaysMonotone) {
    const GridSpec g = GridSpec::radial_disk(512, 0.5);
    MassProfile p = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.03, 10.0 * pi}));
    const double lambda = p.lambda();
    for (int k = 0; k < 500; ++k) {
        p = oracle_step(p, oracle_stable_dt(p));
        EXPECT_EQ(p.lambda(), lambda);
    }
    double prev = 0.0;
    for (double m : p.M) {
        EXPECT_GE(m, prev - 1e-12 * lambda);
        prev = m;
    }
    EXPECT_EQ(p.step_index, 500);
}

TEST(OracleStep, ConstantDensityDecaysTowardsNothingWithoutDrift) {
    // With lambda tiny the drift is negligible and the heat flow must keep
    // the mass inside the disk, drifting toward the boundary-pinned state.
    MassProfile p = quadratic_profile(200, 1.0, 1e-9);
    for (int k = 0; k < 50; ++k) p = oracle_step(p, 1e-4);
    for (int k = 0; k < 200; ++k) {
        const double r = p.node_radius(k);
        EXPECT_NEAR(p.M[k], 1e-9 * r * r, 1e-14);
    }
}

TEST(OracleStep, PreservesOrderBetweenProfiles) {
    const GridSpec g = GridSpec::radial_disk(400, 0.5);
    const double lambda = 9.0 * pi;
    MassProfile lo = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.08, lambda}));
    MassProfile hi = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.04, lambda}));
    for (std::size_t k = 0; k < lo.M.size(); ++k) ASSERT_LE(lo.M[k], hi.M[k] + 1e-12);
    for (int s = 0; s < 400; ++s) {
        const double dt = std::min(oracle_stable_dt(lo), oracle_stable_dt(hi));
        lo = oracle_step(lo, dt);
        hi = oracle_step(hi, dt);
        for (std::size_t k = 0; k < lo.M.size(); ++k) ASSERT_LE(lo.M[k], hi.M[k] + 1e-10 * lambda) << "step " << s;
    }
}

TEST(OracleStep, OrderPreservedEvenForHugeSteps) {
    const GridSpec g = GridSpec::radial_disk(200, 0.5);
    MassProfile lo = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.1, 20.0}));
    MassProfile hi = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.05, 20.0}));
    lo = oracle_step(lo, 10.0);
    hi = oracle_step(hi, 10.0);
    for (std::size_t k = 0; k < lo.M.size(); ++k) EXPECT_LE(lo.M[k], hi.M[k] + 1e-10);
}

TEST(OracleStep, SubcriticalMassReachesASteadyState) {
    const GridSpec g = GridSpec::radial_disk(256, 0.5);
    MassProfile p = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.1, 4.0 * pi}));
    OracleConfig cfg;
    cfg.dt_factor = 1.0;
    cfg.dt_max = 0.05;
    for (int k = 0; k < 600; ++k) p = oracle_step(p, oracle_stable_dt(p, cfg));
    const double dt = 0.05;
    const MassProfile next = oracle_step(p, dt);
    double rate = 0.0;
    for (std::size_t k = 0; k < p.M.size(); ++k) rate = std::max(rate, std::abs(next.M[k] - p.M[k]) / dt);
    EXPECT_LT(rate, 1e-8);
}

TEST(OracleStep, RejectsBadStepSizes) {
    const MassProfile p = quadratic_profile(16, 1.0, 1.0);
    EXPECT_THROW(oracle_step(p, 0.0), InvalidArgument);
    EXPECT_THROW(oracle_step(p, std::numeric_limits<double>::infinity()), InvalidArgument);
    OracleConfig bad;
    bad.dt_factor = -1.0;
    EXPECT_THROW(oracle_stable_dt(p, bad), InvalidArgument);
}

TEST(OracleStep, SpatialRefinementConverges) {
    // Same physical time at three resolutions; the coarse-to-fine differences
    // must shrink.
    auto run = [](int n) {
        MassProfile p = profile_from_field(make_initial(GridSpec::radial_disk(n, 0.5), GaussianProfile{{0, 0}, 0.05, 6.0 * pi}));
        OracleConfig cfg;
        cfg.dt_factor = 1e-3;
        StopRule stop;
        stop.t_end = 2e-3;
        return run_oracle_until(p, cfg, stop).first;
    };
    const MassProfile a = run(128), b = run(256), c = run(512);
    double d1 = 0.0, d2 = 0.0;
    for (double r = 0.01; r < 0.5; r += 0.01) {
        d1 = std::max(d1, std::abs(mass_within(a, r) - mass_within(c, r)));
        d2 = std::max(d2, std::abs(mass_within(b, r) - mass_within(c, r)));
    }
    EXPECT_LT(d2, 0.6 * d1);
    EXPECT_LT(d2, 1e-2);
}

TEST(RunOracle, StopsOnCapAndEndTime) {
    const GridSpec g = GridSpec::radial_disk(1024, 0.5);
    const MassProfile p0 = profile_from_field(make_initial(g, GaussianProfile{{0, 0}, 0.03, 10.0 * pi}));
    StopRule cap;
    cap.density_cap = 10.0 * oracle_sup(p0);
    const auto [hot, why] = run_oracle_until(p0, OracleConfig{}, cap);
    EXPECT_EQ(why, StopReason::density_cap_hit);
    EXPECT_GE(oracle_sup(hot), cap.density_cap);

    StopRule end;
    end.t_end = 1e-4;
    const auto [done, reason] = run_oracle_until(p0, OracleConfig{}, end);
    EXPECT_EQ(reason, StopReason::reached_t_end);
    EXPECT_EQ(done.t, 1e-4);
}

TEST(ProfileCsv, HeaderAndRows) {
    std::ostringstream os;
    write_profile_csv(os, quadratic_profile(8, 1.0, 1.0));
    const std::string s = os.str();
    EXPECT_EQ(s.substr(0, s.find('\n')), "r,M,u");
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 9);
}
