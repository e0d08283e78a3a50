#include "needlecheck/tensor_process.hpp"

#include "support/test_support.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace needlecheck;
using nctest::random_form;
using nctest::random_vec;

namespace {

// P(t) = P0 + A t + B W(t) and x(t) = x0 + f t + g W(t) on a given ensemble;
// the exact integrands of the Ito formula are then the constants A, B, f, g.
struct LinearInstance {
    TensorProcess P, A, B;
    VectorProcess f, g;
};

LinearInstance build_linear_instance(std::mt19937_64& eng, int d, int n, PathEnsemble& paths) {
    MultilinearForm P0 = random_form(eng, d, n);
    MultilinearForm Ac = random_form(eng, d, n);
    MultilinearForm Bc = random_form(eng, d, n);
    Vec x0 = random_vec(eng, n);
    Vec fc = random_vec(eng, n);
    Vec gc = random_vec(eng, n);

    LinearInstance inst;
    inst.A = TensorProcess::constant(paths.grid, Ac);
    inst.B = TensorProcess::constant(paths.grid, Bc);
    inst.f = VectorProcess::constant(paths.grid, fc);
    inst.g = VectorProcess::constant(paths.grid, gc);
    inst.P = TensorProcess::empty(paths.grid, d, n, paths.path_count);

    paths.state_dim = n;
    paths.states.assign(static_cast<std::size_t>(paths.path_count) * paths.grid.node_count() * n, 0.0);
    for (int p = 0; p < paths.path_count; ++p) {
        double w = 0.0;
        for (int i = 0; i <= paths.grid.steps; ++i) {
            const double t = paths.grid.node(i);
            MultilinearForm& Pi = inst.P.at(p, i);
            Pi = P0;
            Pi.add_scaled(Ac, t);
            Pi.add_scaled(Bc, w);
            double* s = paths.state_ptr(p, i);
            for (int k = 0; k < n; ++k) s[k] = x0[k] + fc[k] * t + gc[k] * w;
            if (i < paths.grid.steps) w += paths.dw(p, i);
        }
    }
    return inst;
}

}  // namespace

TEST_CASE("constant 1-form on a deterministic path closes exactly") {
    // d = 1, P constant, x without noise: the identity degenerates to the
    // fundamental theorem of calculus for a linear integrand, so the discrete
    // residual is zero to round-off.
    TimeGrid grid(64, 1.0);
    PathEnsemble paths = PathEnsemble::gaussian(grid, 16, 5);
    Vec p0(2), x0(2), fc(2);
    p0 << 1.0, -2.0;
    x0 << 0.5, 0.25;
    fc << 2.0, 1.0;
    TensorProcess P = TensorProcess::constant(grid, MultilinearForm::from_vector(p0));
    TensorProcess A = TensorProcess::constant(grid, MultilinearForm(1, 2));
    TensorProcess B = TensorProcess::constant(grid, MultilinearForm(1, 2));
    VectorProcess f = VectorProcess::constant(grid, fc);
    VectorProcess g = VectorProcess::constant(grid, Vec::Zero(2));

    paths.state_dim = 2;
    paths.states.assign(static_cast<std::size_t>(paths.path_count) * grid.node_count() * 2, 0.0);
    for (int p = 0; p < paths.path_count; ++p)
        for (int i = 0; i <= grid.steps; ++i)
            for (int k = 0; k < 2; ++k) paths.state_ptr(p, i)[k] = x0[k] + fc[k] * grid.node(i);

    ItoResidualStats r = multilinear_ito_residual(P, A, B, paths, f, g);
    REQUIRE(r.mean_abs < 1e-12);
}

TEST_CASE("Ito isometry case: E[x(T)^2] - x0^2 = T with vanishing residual") {
    // d = 2, P the identity bilinear form, f = 0, g = 1 in dimension 1. The
    // exact second moment is x0^2 + T; the discrete residual is sum dW^2 - T,
    // which shrinks at rate sqrt(dt).
    Vec x0 = Vec::Ones(1), fc = Vec::Zero(1), gc = Vec::Ones(1);
    double prev = -1.0;
    for (int N : {64, 256, 1024}) {
        TimeGrid grid(N, 1.0);
        PathEnsemble paths = PathEnsemble::gaussian(grid, 400, 99);
        TensorProcess P = TensorProcess::constant(grid, MultilinearForm::identity_bilinear(1));
        TensorProcess A = TensorProcess::constant(grid, MultilinearForm(2, 1));
        TensorProcess B = TensorProcess::constant(grid, MultilinearForm(2, 1));
        VectorProcess f = VectorProcess::constant(grid, fc);
        VectorProcess g = VectorProcess::constant(grid, gc);

        paths.state_dim = 1;
        paths.states.assign(static_cast<std::size_t>(paths.path_count) * grid.node_count(), 0.0);
        double mean_sq = 0.0;
        for (int p = 0; p < paths.path_count; ++p) {
            double w = 0.0;
            for (int i = 0; i <= grid.steps; ++i) {
                paths.state_ptr(p, i)[0] = x0[0] + w;
                if (i < grid.steps) w += paths.dw(p, i);
            }
            mean_sq += paths.state_ptr(p, grid.steps)[0] * paths.state_ptr(p, grid.steps)[0];
        }
        mean_sq /= paths.path_count;
        REQUIRE(mean_sq - x0[0] * x0[0] == Catch::Approx(1.0).margin(0.2));

        ItoResidualStats r = multilinear_ito_residual(P, A, B, paths, f, g);
        if (prev >= 0.0) REQUIRE(r.mean_abs < prev);
        prev = r.mean_abs;
    }
    REQUIRE(prev < 0.05);
}

TEST_CASE("random instances self-converge at strong order one half") {
    std::mt19937_64 eng(314159);
    for (auto [d, n] : {std::pair{2, 2}, std::pair{3, 2}}) {
        PathEnsemble fine = PathEnsemble::gaussian(TimeGrid(1024, 1.0), 160, 7000 + d);
        std::vector<double> ns, resid;
        std::mt19937_64 level_eng = eng;  // identical constants at every level
        for (PathEnsemble level = fine;; level = level.coarsened()) {
            std::mt19937_64 fresh = level_eng;
            LinearInstance inst = build_linear_instance(fresh, d, n, level);
            ItoResidualStats r = multilinear_ito_residual(inst.P, inst.A, inst.B, level, inst.f, inst.g);
            ns.push_back(level.grid.steps);
            resid.push_back(r.mean_abs);
            if (level.grid.steps <= 64) break;
        }
        SlopeFit fit = fit_loglog_slope(ns, resid);
        INFO("d=" << d << " n=" << n << " slope=" << fit.slope);
        REQUIRE(fit.slope < -0.4);
        REQUIRE(fit.slope > -0.9);
    }
}

TEST_CASE("arity and grid mismatches are rejected") {
    TimeGrid grid(8, 1.0);
    PathEnsemble paths = PathEnsemble::gaussian(grid, 4, 2);
    paths.state_dim = 1;
    paths.states.assign(static_cast<std::size_t>(4) * grid.node_count(), 0.0);
    TensorProcess P = TensorProcess::constant(grid, MultilinearForm(2, 1));
    TensorProcess A = TensorProcess::constant(grid, MultilinearForm(1, 1));  // wrong arity
    TensorProcess B = TensorProcess::constant(grid, MultilinearForm(2, 1));
    VectorProcess f = VectorProcess::constant(grid, Vec::Zero(1));
    VectorProcess g = VectorProcess::constant(grid, Vec::Zero(1));
    REQUIRE_THROWS_AS(multilinear_ito_residual(P, A, B, paths, f, g), std::invalid_argument);
}
