#include "needlecheck/problems.hpp"
#include "needlecheck/simulate.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace needlecheck;

TEST_CASE("registry lists problems and rejects unknown ids and parameters") {
    REQUIRE(registered_problems().size() == 4);
    REQUIRE_THROWS_AS(make_problem("nope"), UsageError);
    REQUIRE_THROWS_AS(make_problem("example2", {{"bogus", 1.0}}), UsageError);
    for (const auto& id : registered_problems()) {
        auto bundle = make_problem(id);
        ValidationReport rep = validate_problem(bundle.problem, 10.0);
        INFO(id);
        for (const auto& m : rep.messages) INFO(m);
        REQUIRE(rep.ok());
    }
}

TEST_CASE("cost of the optimal pair in the quartic benchmark is exactly zero") {
    auto bundle = make_example2();
    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(50, 1.0), 400, 8);
    simulate_state(bundle.problem, bundle.base_policy, paths);
    CostEstimate c = evaluate_cost(bundle.problem, bundle.base_policy, paths);
    REQUIRE(c.estimate == 0.0);
    REQUIRE(c.std_error == 0.0);
}

TEST_CASE("zero running and terminal cost give exactly zero") {
    auto bundle = make_lq({{"q", 0.0}, {"r", 0.0}, {"s", 0.0}});
    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(20, 1.0), 100, 4);
    simulate_state(bundle.problem, bundle.base_policy, paths);
    CostEstimate c = evaluate_cost(bundle.problem, bundle.base_policy, paths);
    REQUIRE(c.estimate == 0.0);
    REQUIRE(c.std_error == 0.0);
}

TEST_CASE("zero control in the sin/cos drift benchmark has zero cost") {
    // With u = 0 the state never leaves 0, and both cost terms vanish there.
    auto bundle = make_example1();
    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(40, 1.0), 300, 5);
    simulate_state(bundle.problem, bundle.base_policy, paths);
    for (int p = 0; p < paths.path_count; ++p) REQUIRE(paths.state_ptr(p, 40)[0] == 0.0);
    CostEstimate c = evaluate_cost(bundle.problem, bundle.base_policy, paths);
    REQUIRE(c.estimate == 0.0);
}

TEST_CASE("paired cost difference of identical policies is exactly zero") {
    auto bundle = make_lq();
    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(16, 1.0), 200, 12);
    CostEstimate d = cost_difference_crn(bundle.problem, bundle.base_policy, bundle.base_policy, paths);
    REQUIRE(d.estimate == 0.0);
    REQUIRE(d.std_error == 0.0);
}

TEST_CASE("a spike makes the non-optimal singular control strictly cheaper") {
    // The second-order test value b(0)^2 + b_x(0) = 2 is positive, so a spike
    // v = 1 on [0, eps) lowers the cost by about eps^2 at leading order.
    auto bundle = make_example1();
    Vec v(1);
    v[0] = 1.0;
    const double eps = 1.0 / 16.0;
    ControlPolicy varied = bundle.base_policy.with_spike(0.0, eps, v);
    PathEnsemble paths = PathEnsemble::gaussian(TimeGrid(64, 1.0), 100000, 2025);
    CostEstimate d = cost_difference_crn(bundle.problem, bundle.base_policy, varied, paths);
    REQUIRE(d.estimate < -3.0 * d.std_error);
    // Leading order: delta J ~ -(b(0)^2 + b_x(0)) eps^2 / 2 = -eps^2.
    REQUIRE(d.estimate == Catch::Approx(-eps * eps).epsilon(0.35));
}

TEST_CASE("no probed spike improves the LQ optimum") {
    // With x0 = 0 and additive noise, u = 0 is optimal among deterministic
    // controls; the exact mean cost increase of a spike follows the discrete
    // mean recursion x_{i+1} = x_i (1 + a dt) + g u_i dt.
    ParamMap params{{"a", 1.0}, {"g", 1.0}, {"sigma0", 1.0}, {"q", 1.0}, {"r", 1.0}, {"s", 1.0}};
    auto bundle = make_lq(params);
    TimeGrid grid(32, 1.0);
    PathEnsemble paths = PathEnsemble::gaussian(grid, 40000, 321);

    for (double tau : {0.0, 0.5}) {
        for (double vv : {-1.0, 1.0}) {
            Vec v(1);
            v[0] = vv;
            const double eps = 0.25;
            ControlPolicy varied = bundle.base_policy.with_spike(tau, eps, v);
            CostEstimate d = cost_difference_crn(bundle.problem, bundle.base_policy, varied, paths);

            // Discrete dynamic-programming-free oracle: propagate the mean path.
            const double dt = grid.dt();
            double x = 0.0, oracle = 0.0;
            for (int i = 0; i < grid.steps; ++i) {
                const double t = grid.node(i);
                const double u = (t >= tau && t < tau + eps) ? vv : 0.0;
                oracle += 0.5 * (x * x + u * u) * dt;
                x = x * (1.0 + dt) + u * dt;
            }
            oracle += 0.5 * x * x;

            INFO("tau=" << tau << " v=" << vv);
            REQUIRE(d.estimate > 3.0 * d.std_error);
            REQUIRE(std::abs(d.estimate - oracle) < 3.0 * d.std_error);
        }
    }
}

TEST_CASE("soft Lipschitz check flags super-linear growth") {
    auto bundle = make_lq({{"a", 50.0}});
    ValidationReport rep = validate_problem(bundle.problem, 10.0);
    REQUIRE(rep.shapes_ok);
    REQUIRE_FALSE(rep.lipschitz_ok);
}
