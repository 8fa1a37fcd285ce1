#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "collapse_lab/poisson.hpp"

using namespace collapse_lab;

namespace {

Field sampled(const GridSpec& g, auto fn) {
    Field f(g);
    for (int j = 0; j < g.n(); ++j)
        for (int i = 0; i < g.n(); ++i) {
            const Point c = g.cell_center(i, j);
            f.at(i, j) = fn(c.x, c.y);
        }
    return f;
}

Field random_field(const GridSpec& g, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(0.0, 10.0);
    Field f(g);
    for (auto& x : f.values) x = d(rng);
    return f;
}

double max_error(const Potential& v, const GridSpec& g, auto exact) {
    double e = 0.0;
    for (int j = 0; j < g.n(); ++j)
        for (int i = 0; i < g.n(); ++i) {
            const Point c = g.cell_center(i, j);
            e = std::max(e, std::abs(v.values[g.index(i, j)] - exact(c.x, c.y)));
        }
    return e;
}

// Dense 5-point matrix assembled from the stencil definition: a boundary face
// contributes 2/h^2 to the diagonal for dirichlet (odd ghost) and nothing for
// neumann (even ghost).
Eigen::MatrixXd dense_operator(const GridSpec& g, bool dirichlet) {
    const int n = g.n();
    const double w = 1.0 / (g.h() * g.h());
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n * n, n * n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const int row = j * n + i;
            const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[1] < 0 || q[0] >= n || q[1] >= n) {
                    if (dirichlet) A(row, row) += 2.0 * w;
                    continue;
                }
                A(row, row) += w;
                A(row, q[1] * n + q[0]) -= w;
            }
        }
    return A;
}

}  // namespace

TEST(SolveDirichlet, ZeroDensityGivesZeroPotential) {
    const GridSpec g = GridSpec::square(16);
    const Potential v = solve_dirichlet(Field(g, 0.0));
    for (double x : v.values) EXPECT_EQ(x, 0.0);
}

TEST(SolveDirichlet, MatchesDenseDirectSolve) {
    const GridSpec g = GridSpec::square(16);
    const Field u = random_field(g, 11);
    const Eigen::MatrixXd A = dense_operator(g, true);
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(u.values.data(), u.values.size());
    const Eigen::VectorXd x = A.ldlt().solve(b);
    const Potential v = solve_dirichlet(u);
    for (std::size_t k = 0; k < u.values.size(); ++k) EXPECT_NEAR(v.values[k], x[k], 1e-8);
    EXPECT_LE(v.residual_norm, 1e-10);
}

TEST(SolveDirichlet, UnpreconditionedAgreesWithPreconditioned) {
    const GridSpec g = GridSpec::square(24);
    const Field u = random_field(g, 5);
    PoissonOptions plain;
    plain.precondition = false;
    const Potential a = solve_dirichlet(u), b = solve_dirichlet(u, plain);
    EXPECT_GT(b.iterations, a.iterations);
    for (std::size_t k = 0; k < u.values.size(); ++k) EXPECT_NEAR(a.values[k], b.values[k], 1e-8);
}

TEST(SolveDirichlet, ManufacturedSolutionConvergesSecondOrder) {
    auto rhs = [](double x, double y) { return 2.0 * pi * pi * std::sin(pi * x) * std::sin(pi * y); };
    auto exact = [](double x, double y) { return std::sin(pi * x) * std::sin(pi * y); };
    double prev = 0.0;
    for (int n : {32, 64, 128}) {
        const GridSpec g = GridSpec::square(n);
        const double e = max_error(solve_dirichlet(sampled(g, rhs)), g, exact);
        if (prev > 0.0) {
            EXPECT_NEAR(prev / e, 4.0, 0.6) << "n=" << n;
        }
        prev = e;
    }
}

TEST(SolveDirichlet, MaximumPrinciple) {
    const GridSpec g = GridSpec::square(32);
    const Potential v = solve_dirichlet(random_field(g, 2));
    for (double x : v.values) EXPECT_GE(x, 0.0);
}

TEST(SolveNeumann, ConstantDensityGivesZeroPotential) {
    const GridSpec g = GridSpec::square(16);
    const Potential v = solve_neumann(Field(g, 3.7));
    for (double x : v.values) EXPECT_NEAR(x, 0.0, 1e-13);
}

TEST(SolveNeumann, ManufacturedSolutionConvergesSecondOrder) {
    auto rhs = [](double x, double) { return std::cos(pi * x); };
    auto exact = [](double x, double) { return std::cos(pi * x) / (pi * pi); };
    double prev = 0.0;
    for (int n : {32, 64, 128}) {
        const GridSpec g = GridSpec::square(n);
        const Potential v = solve_neumann(sampled(g, rhs));
        const double e = max_error(v, g, exact);
        if (prev > 0.0) {
            EXPECT_NEAR(prev / e, 4.0, 0.6) << "n=" << n;
        }
        prev = e;
    }
}

TEST(SolveNeumann, RandomDensityResidualAndMean) {
    const GridSpec g = GridSpec::square(40);
    const Field u = random_field(g, 9);
    const Potential v = solve_neumann(u);
    EXPECT_LE(v.residual_norm, 1e-10);
    CompensatedSum s;
    for (std::size_t k = 0; k < v.values.size(); ++k) s.add(v.values[k] * g.cell_area(k));
    EXPECT_LE(std::abs(s.value()), 1e-10);

    // Independent residual against the dense operator and the mean-corrected rhs.
    const GridSpec small = GridSpec::square(12);
    const Field w = random_field(small, 10);
    const Potential vw = solve_neumann(w);
    const Eigen::MatrixXd A = dense_operator(small, false);
    Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(w.values.data(), w.values.size());
    b.array() -= b.mean();
    const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(vw.values.data(), vw.values.size());
    EXPECT_LE((A * x - b).norm() / b.norm(), 1e-9);
}

TEST(Solvers, AreLinear) {
    const GridSpec g = GridSpec::square(32);
    const Field a = random_field(g, 1), b = random_field(g, 2);
    Field mix(g);
    for (std::size_t k = 0; k < mix.values.size(); ++k) mix.values[k] = 2.0 * a.values[k] - 0.5 * b.values[k];
    for (Model m : {Model::dirichlet, Model::neumann}) {
        const Potential va = solve_potential(a, m), vb = solve_potential(b, m), vm = solve_potential(mix, m);
        double scale = 0.0;
        for (double x : vm.values) scale = std::max(scale, std::abs(x));
        for (std::size_t k = 0; k < mix.values.size(); ++k)
            EXPECT_NEAR(vm.values[k], 2.0 * va.values[k] - 0.5 * vb.values[k], 1e-10 * scale);
    }
}

TEST(RadialDirichlet, ZeroDensity) {
    const Potential v = solve_radial_dirichlet(Field(GridSpec::radial_disk(64, 1.0), 0.0));
    for (double x : v.values) EXPECT_EQ(x, 0.0);
}

TEST(RadialDirichlet, ConstantDensityClosedForm) {
    const double c = 2.5, R = 0.8;
    double prev = 0.0;
    for (int n : {64, 128, 256}) {
        const GridSpec g = GridSpec::radial_disk(n, R);
        const Potential v = solve_radial_dirichlet(Field(g, c));
        double e = 0.0;
        for (int i = 0; i < n; ++i) {
            const double r = g.center_coord(i);
            e = std::max(e, std::abs(v.values[i] - c * (R * R - r * r) / 4.0));
        }
        EXPECT_LT(e, 1e-2 * c * R * R);
        if (prev > 0.0) {
            EXPECT_GT(prev / e, 3.0);
        }
        prev = e;
    }
}

TEST(RadialDirichlet, DiscreteResidualOfTheRadialOperator) {
    const GridSpec g = GridSpec::radial_disk(200, 0.5);
    Field u(g);
    for (int i = 0; i < g.n(); ++i) {
        const double r = g.center_coord(i);
        u.values[i] = std::exp(-r * r / 0.01) + 0.3;
    }
    const Potential v = solve_radial_dirichlet(u);
    EXPECT_LE(v.residual_norm, 1e-10);
    // Recompute -(1/r)(r v_r)_r with central differences away from both ends.
    const double dr = g.h();
    for (int i = 1; i < g.n() - 1; ++i) {
        const double r = g.center_coord(i);
        const double lap = ((r + 0.5 * dr) * (v.values[i + 1] - v.values[i]) -
                            (r - 0.5 * dr) * (v.values[i] - v.values[i - 1])) /
                           (r * dr * dr);
        EXPECT_NEAR(-lap, u.values[i], 1e-8 * 1.3);
    }
}

TEST(GreenEnergy, ZeroAndManufacturedValue) {
    const GridSpec g0 = GridSpec::square(16);
    const Field zero(g0, 0.0);
    EXPECT_EQ(green_energy(zero, solve_dirichlet(zero), Model::dirichlet), 0.0);

    auto rhs = [](double x, double y) { return 2.0 * pi * pi * std::sin(pi * x) * std::sin(pi * y); };
    double prev = 0.0;
    for (int n : {32, 64}) {
        const GridSpec g = GridSpec::square(n);
        const Field u = sampled(g, rhs);
        const double e = std::abs(green_energy(u, solve_dirichlet(u), Model::dirichlet) - pi * pi / 4.0);
        EXPECT_LT(e, 10.0 * g.h() * g.h());
        if (prev > 0.0) {
            EXPECT_NEAR(prev / e, 4.0, 0.6);
        }
        prev = e;
    }
}

TEST(GreenEnergy, PositiveAndSymmetric) {
    const GridSpec g = GridSpec::square(24);
    const Field a = random_field(g, 3), b = random_field(g, 4);
    for (Model m : {Model::dirichlet, Model::neumann}) {
        const Potential va = solve_potential(a, m), vb = solve_potential(b, m);
        EXPECT_GT(green_energy(a, va, m), 0.0);
        const double ab = green_pairing(a, vb), ba = green_pairing(b, va);
        EXPECT_NEAR(ab, ba, 1e-10 * std::abs(ab));
    }
}

TEST(GreenEnergy, RejectsMismatchedVariant) {
    const GridSpec g = GridSpec::square(16);
    const Field u(g, 1.0);
    EXPECT_THROW(green_energy(u, solve_neumann(u), Model::dirichlet), InvalidArgument);
}

TEST(SolvePotential, RadialNeumannIsUnsupported) {
    EXPECT_THROW(solve_potential(Field(GridSpec::radial_disk(16, 1.0), 1.0), Model::neumann), InvalidArgument);
}
