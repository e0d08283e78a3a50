#include "needlecheck/order_fit.hpp"

#include "needlecheck/problems.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace needlecheck;

TEST_CASE("slope fitting on the quartic benchmark at reduced path count") {
    // Scaled-down version of the full study (the acceptance suite runs the
    // pinned sizes): slopes of y1, y2, r1 at beta = 2 should land near
    // 1, 2, 2 already at M = 20000.
    auto bundle = make_example2();
    SpikeLadder ladder;
    ladder.tau = 0.25;
    ladder.value = Vec::Constant(1, -1.0);
    ladder.eps = dyadic_ladder(1.0, 4, 8);

    OrderFitConfig cfg;
    cfg.beta = 2.0;
    cfg.max_order = 2;
    cfg.grid_steps = 256;
    cfg.path_count = 20000;
    cfg.seed = 9001;
    cfg.slope_tol_y1 = 0.2;
    cfg.slope_tol_high = 0.3;

    OrderFitReport rep = fit_orders(bundle.problem, bundle.base_policy, ladder, cfg);
    REQUIRE(rep.row("y1").verdict == "pass");
    REQUIRE(rep.row("y1").fit.slope == Catch::Approx(1.0).margin(0.2));
    REQUIRE(rep.row("y2").fit.slope == Catch::Approx(2.0).margin(0.3));
    REQUIRE(rep.row("r1").fit.slope == Catch::Approx(2.0).margin(0.3));
    REQUIRE(rep.row("delta_x").fit.slope == Catch::Approx(1.0).margin(0.2));
}

TEST_CASE("higher orders resolve on the sin/cos drift problem") {
    // Along u = 0 the base coefficients vanish, so y3 ~ eps^{3/2} and
    // y4 ~ eps^2 are driven purely by the spike couplings.
    auto bundle = make_example1();
    SpikeLadder ladder;
    ladder.tau = 0.25;
    ladder.value = Vec::Constant(1, 1.0);
    ladder.eps = dyadic_ladder(1.0, 3, 7);

    OrderFitConfig cfg;
    cfg.beta = 2.0;
    cfg.max_order = 4;
    cfg.grid_steps = 1024;  // keep >= 8 cells inside the smallest spike
    cfg.path_count = 20000;
    cfg.seed = 71;
    cfg.slope_tol_high = 0.45;

    OrderFitReport rep = fit_orders(bundle.problem, bundle.base_policy, ladder, cfg);
    REQUIRE(rep.row("y3").fit.slope == Catch::Approx(3.0).margin(0.45));
    REQUIRE(rep.row("y4").fit.slope == Catch::Approx(4.0).margin(0.45));
}

TEST_CASE("noise-free diffusion yields an identically-zero verdict") {
    // sigma == 0 kills the y1 forcing entirely; the report must say so
    // instead of fitting a slope through round-off.
    auto bundle = make_lq({{"sigma0", 0.0}});
    SpikeLadder ladder;
    ladder.tau = 0.25;
    ladder.value = Vec::Constant(1, 1.0);
    ladder.eps = dyadic_ladder(1.0, 2, 5);

    OrderFitConfig cfg;
    cfg.max_order = 1;
    cfg.grid_steps = 64;
    cfg.path_count = 200;
    cfg.seed = 5;

    OrderFitReport rep = fit_orders(bundle.problem, bundle.base_policy, ladder, cfg);
    REQUIRE(rep.row("y1").verdict == "identically zero");
    // delta_x is driven by the drift spike, so it is nonzero with slope beta.
    REQUIRE(rep.row("delta_x").moment.front() > 0.0);
}

TEST_CASE("ladder validation") {
    auto bundle = make_example2();
    SpikeLadder ladder;
    ladder.tau = 0.25;
    ladder.value = Vec::Constant(1, 0.0);
    ladder.eps = {0.25, 0.125, 0.0625};  // only three rungs
    OrderFitConfig cfg;
    cfg.path_count = 10;
    REQUIRE_THROWS_AS(fit_orders(bundle.problem, bundle.base_policy, ladder, cfg), UsageError);

    ladder.eps = {0.25, 0.25, 0.125, 0.0625};  // not strictly decreasing
    REQUIRE_THROWS_AS(fit_orders(bundle.problem, bundle.base_policy, ladder, cfg), UsageError);
}
