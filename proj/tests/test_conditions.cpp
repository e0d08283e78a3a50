#include "needlecheck/conditions.hpp"

#include "needlecheck/problems.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace needlecheck;

namespace {

struct Fixture {
    ProblemBundle bundle;
    PathEnsemble paths;
    std::vector<AdjointSolution> adjoints;
    ConditionContext ctx;

    Fixture(ProblemBundle b, int steps, int path_count, std::uint64_t seed, bool regression = false)
        : bundle(std::move(b)) {
        paths = PathEnsemble::gaussian(TimeGrid(steps, bundle.problem.horizon), path_count, seed);
        simulate_state(bundle.problem, bundle.base_policy, paths);
        adjoints = regression
                       ? solve_adjoints_regression(bundle.problem, paths, bundle.base_policy, 4)
                       : solve_adjoints_deterministic(bundle.problem, paths, bundle.base_policy, 4);
        ctx = ConditionContext{&bundle.problem, &paths, &bundle.base_policy, &adjoints, {}, 32};
    }
};

}  // namespace

TEST_CASE("first-order condition holds with equality on the sin/cos benchmark") {
    Fixture fx(make_example1(), 32, 8, 3);
    ConditionReport rep = first_order_check(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE(rep.overall == Verdict::satisfied);
    for (const auto& row : rep.rows) REQUIRE(std::abs(row.script_h) < 1e-10);
}

TEST_CASE("first-order condition is trivially satisfied on the base singleton") {
    Fixture fx(make_example2(), 16, 8, 4);
    std::vector<Vec> probes{Vec::Ones(1)};  // just ubar
    ConditionReport rep = first_order_check(fx.ctx, probes);
    REQUIRE(rep.overall == Verdict::satisfied);
    for (const auto& row : rep.rows) REQUIRE(row.script_h == 0.0);
}

TEST_CASE("first-order violation is detected for a suboptimal LQ control") {
    // Base control 1 is suboptimal: probing v = 0 gives
    // script H = p1 g (v - c) - r (v^2 - c^2)/2, whose mean is positive.
    Fixture fx(make_lq({{"base_level", 1.0}}), 32, 20000, 5, /*regression=*/true);
    fx.ctx.sample_paths = 4000;
    ConditionReport rep = first_order_check(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE(rep.overall == Verdict::violated);

    // Closed-form cross-check at an interior node for v = 0. With base level
    // c, p1(t) = -P(t) xbar(t) - m(t) where P is the Lyapunov weight and m
    // collects the control inhomogeneity, so E script H = g c (P E xbar + m)
    // + r c^2 / 2.
    const double a = 1.0, r = 1.0, c = 1.0, g = 1.0;
    const double t = 0.5, T = 1.0;
    auto P = [&](double s) {
        const double e = std::exp(2.0 * a * (T - s));
        return e + (e - 1.0) / (2.0 * a);
    };
    // m(t) = int_t^T e^{a(s-t)} g c P(s) ds by midpoint quadrature.
    double m_quad = 0.0;
    const int quad_n = 2000;
    for (int j = 0; j < quad_n; ++j) {
        const double s = t + (T - t) * (j + 0.5) / quad_n;
        m_quad += std::exp(a * (s - t)) * g * c * P(s) * (T - t) / quad_n;
    }
    const double ex = (std::exp(a * t) - 1.0) / a;  // E xbar(t) with gain 1
    const double expected = g * c * (P(t) * ex + m_quad) + 0.5 * r * c * c;
    for (const auto& row : rep.rows) {
        if (row.point.node == 16 && row.point.v[0] == 0.0) {
            REQUIRE(std::abs(row.script_h - expected) <
                    3.0 * row.std_error + 0.05 * std::abs(expected));
            REQUIRE(row.verdict == Verdict::violated);
        }
    }
}

TEST_CASE("both benchmarks are singular on their control sets") {
    Fixture fx1(make_example1(), 32, 8, 6);
    SingularityVerdict s1 = singular_check(fx1.ctx, fx1.bundle.problem.control_set.probes());
    REQUIRE(s1.singular);
    REQUIRE(s1.max_abs_script_h < 1e-10);

    Fixture fx2(make_example2(), 32, 8, 7);
    SingularityVerdict s2 = singular_check(fx2.ctx, fx2.bundle.problem.control_set.probes());
    REQUIRE(s2.singular);
}

TEST_CASE("a non-stationary LQ control is not singular") {
    Fixture fx(make_lq({{"base_level", 1.0}}), 32, 20000, 8, /*regression=*/true);
    SingularityVerdict s = singular_check(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE_FALSE(s.singular);
}

TEST_CASE("classical singularity: satisfied on the sin/cos benchmark") {
    // H_u = p1 b(0) + q1 - ubar = 0 and H_uu + sigma_u p2 sigma_u = -1 + 1 = 0.
    Fixture fx(make_example1(), 32, 8, 9);
    ClassicalSingularityVerdict v = classical_singular_check(fx.ctx);
    REQUIRE(v.singular);
    REQUIRE(v.max_hu_norm < 1e-10);
    REQUIRE(v.max_huu_norm < 1e-10);
}

TEST_CASE("classical singularity fails for strictly convex control cost") {
    // LQ with zero gains: H_uu = -r and p2 = 0, so the pair cannot vanish.
    Fixture fx(make_lq({{"a", 0.0}, {"g", 0.0}, {"sigma0", 0.0}, {"q", 0.0}, {"s", 0.0}, {"r", 2.0}}),
               16, 8, 10);
    ClassicalSingularityVerdict v = classical_singular_check(fx.ctx);
    REQUIRE_FALSE(v.singular);
    REQUIRE(v.max_hu_norm < 1e-10);  // H_u = -r ubar = 0 at ubar = 0
    REQUIRE(v.max_huu_norm == Catch::Approx(2.0));
}

TEST_CASE("classical singularity needs control derivatives") {
    Fixture fx(make_linbsde(), 16, 64, 11, /*regression=*/true);
    REQUIRE_THROWS_AS(classical_singular_check(fx.ctx), CapabilityError);
}

TEST_CASE("pointwise second-order test flags the sin/cos benchmark as non-optimal") {
    Fixture fx(make_example1(), 32, 8, 12);
    ConditionReport rep = second_order_pointwise_test(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE(rep.overall == Verdict::violated);
    for (const auto& row : rep.rows) {
        if (row.point.v[0] == 1.0) {
            // b(0)^2 + b_x(0) = 2 at every node.
            REQUIRE(row.total == Catch::Approx(2.0).margin(1e-8));
            REQUIRE(row.verdict == Verdict::violated);
        }
        if (row.point.v[0] == 0.0) REQUIRE(std::abs(row.total) < 1e-10);
    }
}

TEST_CASE("pointwise second-order test accepts the quartic benchmark") {
    Fixture fx(make_example2(), 32, 8, 13);
    ConditionReport rep = second_order_pointwise_test(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE(rep.overall == Verdict::satisfied);
    for (const auto& row : rep.rows) {
        if (row.point.v[0] == -1.0 && row.point.node == 32) {
            // At t = 1: S = 0, grad S = 0, delta sigma = 2, T = -2, so the
            // assembled value is -4.
            REQUIRE(row.total == Catch::Approx(-4.0).margin(1e-6));
        }
        if (row.point.v[0] == 1.0) REQUIRE(std::abs(row.total) < 1e-10);
    }
}

TEST_CASE("zero-S second-order test matches the quartic benchmark conclusion") {
    Fixture fx(make_example2(), 32, 8, 14);
    ConditionReport rep = second_order_zero_s_test(fx.ctx, fx.bundle.problem.control_set.probes());
    REQUIRE(rep.overall == Verdict::satisfied);
    for (const auto& row : rep.rows) {
        const double v = row.point.v[0];
        const double t = row.point.time;
        // Tolerance covers the O(dt^2) solver bias at this coarse grid.
        const double expected = -0.5 * std::exp(6.0 - 6.0 * t) * std::pow(v - 1.0, 4);
        REQUIRE(row.total == Catch::Approx(expected).epsilon(2e-2).margin(1e-10));
    }
}

TEST_CASE("flipping the terminal-cost sign flips the zero-S verdict") {
    // With h = -(x-1)^4/24 the fourth adjoint becomes +exp(6-6t) and the
    // quadratic form turns positive for v != ubar.
    auto bundle = make_example2();
    ControlProblem flipped = bundle.problem;
    flipped.terminal_cost.value = [](const Vec& x) {
        const double d = x[0] - 1.0;
        return -d * d * d * d / 24.0;
    };
    auto base_derivs = bundle.problem.terminal_cost.deriv;
    for (int k = 0; k < 4; ++k)
        flipped.terminal_cost.deriv[static_cast<std::size_t>(k)] =
            [k, base_derivs](const Vec& x, MultilinearForm& f) {
                base_derivs[static_cast<std::size_t>(k)](x, f);
                f *= -1.0;
            };

    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(32, 1.0), 8, 15);
    simulate_state(flipped, bundle.base_policy, paths);
    auto adjoints = solve_adjoints_deterministic(flipped, paths, bundle.base_policy, 4);
    ConditionContext ctx{&flipped, &paths, &bundle.base_policy, &adjoints, {}, 8};
    ConditionReport rep = second_order_zero_s_test(ctx, flipped.control_set.probes());
    REQUIRE(rep.overall == Verdict::violated);
}

TEST_CASE("verdict classification is monotone in the error multiple") {
    ConditionTolerances strict{1e-8, 1.0};
    ConditionTolerances loose{1e-8, 3.0};
    // A point violated under the loose band stays violated when the band
    // shrinks; satisfied points stay satisfied.
    for (double value : {-1.0, -0.01, 0.0, 0.01, 1.0}) {
        for (double se : {0.0, 0.001, 0.1}) {
            Verdict vl = classify_nonpositive(value, se, loose);
            Verdict vs = classify_nonpositive(value, se, strict);
            if (vl == Verdict::violated) REQUIRE(vs == Verdict::violated);
            if (vl == Verdict::satisfied) REQUIRE(vs == Verdict::satisfied);
        }
    }
}
