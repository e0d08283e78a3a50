#include "needlecheck/adjoint.hpp"

#include "needlecheck/problems.hpp"
#include "needlecheck/variational.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace needlecheck;

namespace {

PathEnsemble simulated(const ProblemBundle& bundle, int steps, int paths, std::uint64_t seed) {
    PathEnsemble e = PathEnsemble::gaussian(TimeGrid(steps, bundle.problem.horizon), paths, seed);
    simulate_state(bundle.problem, bundle.base_policy, e);
    return e;
}

}  // namespace

TEST_CASE("named drift terms reduce to the scalar formulas in dimension one") {
    MultilinearForm p2(2, 1), q2(2, 1), p3(3, 1), q3(3, 1);
    p2[0] = 0.7;
    q2[0] = -0.3;
    p3[0] = 1.3;
    q3[0] = 0.5;
    MultilinearMap bx(1, 1), sx(1, 1), bxx(2, 1), sxx(2, 1), bxxx(3, 1), sxxx(3, 1);
    bx[0] = 2.0;
    sx[0] = -1.5;
    bxx[0] = 0.25;
    sxx[0] = 4.0;
    bxxx[0] = -2.0;
    sxxx[0] = 0.5;

    using namespace adjoint_terms;
    // sum over slots multiplies scalars by the arity / pair counts.
    REQUIRE(p_compose_drift_jacobian(p3, bx)[0] == Catch::Approx(3 * 1.3 * 2.0));
    REQUIRE(p_compose_diffusion_pair(p3, sx)[0] == Catch::Approx(3 * 1.3 * 1.5 * 1.5));
    REQUIRE(q_compose_diffusion_jacobian(q3, sx)[0] == Catch::Approx(3 * 0.5 * -1.5));
    REQUIRE(third_hessian_coupling(p2, q2, bxx, sxx)[0] ==
            Catch::Approx(1.5 * 2 * (0.7 * 0.25 + -0.3 * 4.0)));
    REQUIRE(third_mixed_coupling(p2, sx, sxx)[0] == Catch::Approx(1.5 * 2 * (0.7 * -1.5 * 4.0)));
    REQUIRE(fourth_hessian_coupling(p3, q3, bxx, sxx)[0] ==
            Catch::Approx(2.0 * 3 * (1.3 * 0.25 + 0.5 * 4.0)));
    REQUIRE(fourth_p3_mixed_coupling(p3, sx, sxx)[0] == Catch::Approx(2.0 * 6 * (1.3 * -1.5 * 4.0)));
    REQUIRE(fourth_p2_third_drift(p2, bxxx)[0] == Catch::Approx(2.0 * 2 * (0.7 * -2.0)));
    REQUIRE(fourth_p2_mixed_third(p2, sx, sxxx)[0] == Catch::Approx(2.0 * 2 * (0.7 * -1.5 * 0.5)));
    REQUIRE(fourth_p2_hessian_pair(p2, sxx)[0] == Catch::Approx(3.0 * 0.7 * 16.0));
    REQUIRE(fourth_q2_third_diffusion(q2, sxxx)[0] == Catch::Approx(2.0 * 2 * (-0.3 * 0.5)));
}

TEST_CASE("drift operator of the quartic benchmark matches the displayed equations") {
    // Along (xbar, ubar) = (1, 1): b_x = 0, sigma_x = 1 and all higher
    // derivatives vanish, so dp4 = -[6 p4 + 4 q4] dt + q4 dW and
    // dp2 = -[p2 + 2 q2] dt + q2 dW.
    auto bundle = make_example2();
    NodeCoeffs c;
    CoeffRequest req;
    req.deriv_order = 4;
    c.fill(bundle.problem, 0.5, Vec::Ones(1), Vec::Ones(1), nullptr, req);

    AdjointDriftOperator op4;
    op4.build(4, c);
    REQUIRE(op4.A(0, 0) == Catch::Approx(6.0));
    REQUIRE(op4.B(0, 0) == Catch::Approx(4.0));

    AdjointDriftOperator op2;
    op2.build(2, c);
    REQUIRE(op2.A(0, 0) == Catch::Approx(1.0));
    REQUIRE(op2.B(0, 0) == Catch::Approx(2.0));

    AdjointDriftOperator op3;
    op3.build(3, c);
    REQUIRE(op3.A(0, 0) == Catch::Approx(3.0));
    REQUIRE(op3.B(0, 0) == Catch::Approx(3.0));
}

TEST_CASE("closed-form adjoints of the sin/cos benchmark are reproduced exactly") {
    auto bundle = make_example1();
    PathEnsemble paths = simulated(bundle, 200, 32, 7);
    auto sols = solve_adjoints_deterministic(bundle.problem, paths, bundle.base_policy, 4);

    const double expected_p[4] = {0.0, 1.0, 0.0, 0.0};
    for (int k = 1; k <= 4; ++k) {
        const AdjointSolution& s = sols[static_cast<std::size_t>(k - 1)];
        for (int i = 0; i <= paths.grid.steps; ++i) {
            for (std::size_t c = 0; c < s.coeff_count; ++c) {
                REQUIRE(std::abs(s.p_ptr(0, i)[c] - expected_p[k - 1]) < 1e-10);
                REQUIRE(std::abs(s.q_ptr(0, i)[c]) < 1e-10);
            }
        }
    }
}

TEST_CASE("fourth adjoint of the quartic benchmark follows -exp(6 - 6t)") {
    auto bundle = make_example2();
    PathEnsemble paths = simulated(bundle, 1000, 16, 3);
    auto sols = solve_adjoints_deterministic(bundle.problem, paths, bundle.base_policy, 4);

    // Lower orders vanish identically.
    for (int k = 1; k <= 3; ++k)
        for (int i = 0; i <= 1000; ++i)
            REQUIRE(std::abs(sols[static_cast<std::size_t>(k - 1)].p_ptr(0, i)[0]) < 1e-12);

    const AdjointSolution& p4 = sols[3];
    double worst = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double t = paths.grid.node(i);
        const double exact = -std::exp(6.0 - 6.0 * t);
        worst = std::max(worst, std::abs(p4.p_ptr(0, i)[0] - exact) / std::abs(exact));
    }
    REQUIRE(worst < 1e-4);
    REQUIRE(p4.p_ptr(0, 0)[0] == Catch::Approx(-403.42879).epsilon(1e-4));
    // Terminal condition holds exactly by construction.
    REQUIRE(p4.p_ptr(0, 1000)[0] == -1.0);
}

TEST_CASE("zero-drift first adjoint stays at minus the terminal gradient") {
    // linbsde with a = c = 0: dp1 = 0 dt + q1 dW, p1(T) = -1, so p1 == -1.
    auto bundle = make_linbsde({{"a", 0.0}, {"c", 0.0}});
    PathEnsemble paths = simulated(bundle, 64, 16, 5);
    AdjointSolution p1 = solve_adjoint_deterministic(bundle.problem, paths, bundle.base_policy, 1);
    for (int i = 0; i <= 64; ++i) REQUIRE(p1.p_ptr(0, i)[0] == Catch::Approx(-1.0).margin(1e-12));
}

TEST_CASE("deterministic solver refuses stochastic base trajectories") {
    auto bundle = make_lq();
    PathEnsemble paths = simulated(bundle, 32, 64, 11);
    REQUIRE_THROWS_AS(solve_adjoints_deterministic(bundle.problem, paths, bundle.base_policy, 1),
                      StochasticCoefficientsError);
}

TEST_CASE("regression solver reproduces the quartic closed form within 5 percent") {
    auto bundle = make_example2();
    PathEnsemble paths = simulated(bundle, 50, 40000, 12345);
    auto sols = solve_adjoints_regression(bundle.problem, paths, bundle.base_policy, 4);
    const AdjointSolution& p4 = sols[3];

    double worst = 0.0;
    for (int i = 0; i <= 50; ++i) {
        const double exact = -std::exp(6.0 - 6.0 * paths.grid.node(i));
        // All paths carry the same fitted value here (degenerate design).
        worst = std::max(worst, std::abs(p4.p_ptr(0, i)[0] - exact) / std::abs(exact));
    }
    REQUIRE(worst < 0.05);

    // q estimates must be statistically indistinguishable from zero.
    const double dt = paths.grid.dt();
    for (int i = 0; i < 50; ++i) {
        const double scale = std::abs(p4.p_ptr(0, i + 1)[0]) / std::sqrt(dt * paths.path_count);
        REQUIRE(std::abs(p4.q_ptr(0, i)[0]) < 5.0 * scale);
    }
}

TEST_CASE("regression solver matches the linear closed form with a random state") {
    // dx = (0.8 x) dt + (0.5 x + 0.3) dW from x0 = 1: the state is genuinely
    // random, yet p1(t) = -exp(0.8 (1 - t)) and q1 = 0.
    auto bundle = make_linbsde();
    PathEnsemble paths = simulated(bundle, 50, 20000, 99);
    AdjointSolution p1 = solve_adjoint_regression(bundle.problem, paths, bundle.base_policy, 1);

    for (int i = 0; i <= 50; ++i) {
        const double exact = -std::exp(0.8 * (1.0 - paths.grid.node(i)));
        double mean = 0.0;
        for (int p = 0; p < paths.path_count; ++p) mean += p1.p_ptr(p, i)[0];
        mean /= paths.path_count;
        REQUIRE(std::abs(mean - exact) / std::abs(exact) < 0.05);
    }
    // The design matrix is far from degenerate here.
    REQUIRE(p1.condition_numbers[10] < 1e6);
}

TEST_CASE("regression solver tracks a state-dependent first adjoint") {
    // LQ with base control 0: p1(t) = -P(t) xbar(t) and q1(t) = -P(t) sigma0
    // with P(t) = s e^{2a(T-t)} + q (e^{2a(T-t)} - 1) / (2a).
    const double a = 0.5, sigma0 = 1.0, qcost = 1.0, scost = 1.0;
    auto bundle = make_lq({{"a", a}, {"sigma0", sigma0}, {"q", qcost}, {"s", scost}});
    PathEnsemble paths = simulated(bundle, 50, 20000, 31);
    AdjointSolution p1 = solve_adjoint_regression(bundle.problem, paths, bundle.base_policy, 1);

    auto cap = [&](double t) {
        const double e = std::exp(2.0 * a * (1.0 - t));
        return scost * e + qcost * (e - 1.0) / (2.0 * a);
    };

    double num = 0.0, den = 0.0, qerr = 0.0;
    int qcount = 0;
    for (int i = 5; i < 50; i += 5) {
        const double t = paths.grid.node(i);
        for (int p = 0; p < paths.path_count; ++p) {
            const double exact = -cap(t) * paths.state_ptr(p, i)[0];
            const double got = p1.p_ptr(p, i)[0];
            num += (got - exact) * (got - exact);
            den += exact * exact;
        }
        double qmean = 0.0;
        for (int p = 0; p < paths.path_count; ++p) qmean += p1.q_ptr(p, i)[0];
        qmean /= paths.path_count;
        qerr += std::abs(qmean - (-cap(t) * sigma0)) / (cap(t) * sigma0);
        ++qcount;
    }
    REQUIRE(std::sqrt(num / den) < 0.05);
    REQUIRE(qerr / qcount < 0.10);
}

TEST_CASE("regression solver needs enough paths for the basis") {
    auto bundle = make_lq();
    PathEnsemble paths = simulated(bundle, 8, 4, 3);
    REQUIRE_THROWS_AS(solve_adjoints_regression(bundle.problem, paths, bundle.base_policy, 1),
                      UsageError);
}

TEST_CASE("fundamental solution: identity, exponential and moment checks") {
    // b_x = sigma_x = 0 along the zero control: Phi == I exactly.
    {
        auto bundle = make_example1();
        PathEnsemble paths = simulated(bundle, 32, 8, 1);
        FundamentalSolution fs = fundamental_solution(bundle.problem, paths, bundle.base_policy);
        for (int p = 0; p < 8; ++p)
            for (int i = 0; i <= 32; ++i) REQUIRE(fs.phi_at(p, i)(0, 0) == 1.0);
    }
    // Constant b_x = a, sigma_x = 0: Phi(t) = (1 + a dt)^i -> e^{a t}.
    {
        auto bundle = make_lq({{"a", 1.0}});
        PathEnsemble paths = simulated(bundle, 1000, 4, 2);
        FundamentalSolution fs = fundamental_solution(bundle.problem, paths, bundle.base_policy);
        for (int i = 0; i <= 1000; i += 200) {
            const double t = paths.grid.node(i);
            REQUIRE(fs.phi_at(0, i)(0, 0) == Catch::Approx(std::exp(t)).epsilon(0.01));
        }
    }
    // b_x = 0, sigma_x = 1 (quartic benchmark base): E[Phi(T)^2] = e^T.
    {
        auto bundle = make_example2();
        const int M = 20000;
        PathEnsemble paths = simulated(bundle, 64, M, 17);
        FundamentalSolution fs = fundamental_solution(bundle.problem, paths, bundle.base_policy);
        double s = 0.0, s2 = 0.0;
        for (int p = 0; p < M; ++p) {
            const double v = fs.phi_at(p, 64)(0, 0);
            s += v * v;
            s2 += v * v * v * v;
        }
        const double mean = s / M;
        const double se = std::sqrt(std::max(0.0, s2 / M - mean * mean) / M);
        REQUIRE(std::abs(mean - std::exp(1.0)) < 3.0 * se + 0.1);
    }
}

TEST_CASE("singular fundamental solutions are reported") {
    // a = -N/T zeroes Phi after one Euler step.
    auto bundle = make_lq({{"a", -16.0}});
    PathEnsemble paths = simulated(bundle, 16, 4, 9);
    REQUIRE_THROWS_AS(fundamental_solution(bundle.problem, paths, bundle.base_policy),
                      SingularFundamentalSolution);
}

TEST_CASE("explicit representation of y1 agrees with the integrated equation") {
    auto bundle = make_example2();
    Spike spike{0.25, 0.125, Vec::Constant(1, -1.0)};

    // Pathwise sup gap between the two routes scales like sqrt(dt) (the
    // representation resolves the spike-cell covariation differently), so the
    // mean gap shrinks by about half per four-fold refinement.
    auto mean_gap = [&](int steps) {
        PathEnsemble paths = simulated(bundle, steps, 256, 2024);
        FundamentalSolution fs = fundamental_solution(bundle.problem, paths, bundle.base_policy);
        auto rep = y1_from_fundamental(bundle.problem, paths, bundle.base_policy, spike, fs);
        VariationalSolutions sol =
            solve_variational(bundle.problem, bundle.base_policy, spike, paths, 1);
        double acc = 0.0;
        for (int p = 0; p < paths.path_count; ++p) {
            double sup = 0.0;
            for (int i = 0; i <= steps; ++i)
                sup = std::max(sup, std::abs(rep[static_cast<std::size_t>(p) * (steps + 1) + i] -
                                             sol.y_at(1, p, i)[0]));
            acc += sup;
        }
        return acc / paths.path_count;
    };

    const double gap_coarse = mean_gap(128);
    const double gap_fine = mean_gap(1024);
    REQUIRE(gap_fine < 0.7 * gap_coarse);
    REQUIRE(gap_fine < 0.08);
}
