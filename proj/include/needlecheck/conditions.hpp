#pragma once

#include "needlecheck/functionals.hpp"
#include "needlecheck/stats.hpp"

#include <optional>
#include <string>
#include <vector>

namespace needlecheck {

enum class Verdict { satisfied, violated, inconclusive };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::satisfied: return "satisfied";
        case Verdict::violated: return "violated";
        default: return "inconclusive";
    }
}

struct ConditionTolerances {
    double zero_tol = 1e-8;      // closed-form slack around zero
    double error_multiple = 3.0; // Monte Carlo error-bar multiple
};

/// Classifies a "value <= 0" requirement. A test point is violated only when
/// the estimate exceeds the zero slack by the configured multiple of its
/// error bar; a nonpositive estimate is satisfied; anything in between is
/// inconclusive. Shrinking the multiple can move inconclusive points to
/// violated but never violated points to satisfied.
inline Verdict classify_nonpositive(double value, double std_error, const ConditionTolerances& tol) {
    if (value > tol.zero_tol + tol.error_multiple * std_error) return Verdict::violated;
    if (value <= tol.zero_tol) return Verdict::satisfied;
    return Verdict::inconclusive;
}

/// One probe of a condition at (time node, control point v).
struct TestPoint {
    int node = 0;
    double time = 0.0;
    Vec v;
};

struct ConditionRow {
    TestPoint point;
    double script_h = 0.0;           // first-order functional value (mean)
    double term_s = 0.0;             // <S, delta b>
    double term_grad = 0.0;          // <grad S, delta sigma> (0 unless available)
    double term_t = 0.0;             // 1/2 <T delta sigma, delta sigma>
    double total = 0.0;
    double std_error = 0.0;
    Verdict verdict = Verdict::satisfied;
    std::string note;
};

struct ConditionReport {
    std::string test_name;
    std::vector<ConditionRow> rows;
    Verdict overall = Verdict::satisfied;
    std::string note;

    void finalize() {
        overall = Verdict::satisfied;
        for (const auto& r : rows) {
            if (r.verdict == Verdict::violated) {
                overall = Verdict::violated;
                return;
            }
            if (r.verdict == Verdict::inconclusive) overall = Verdict::inconclusive;
        }
    }
};

namespace detail {

/// Mean and standard error of a per-path functional across an ensemble,
/// evaluated lazily: fn(path) -> double.
template <class Fn>
MeanEstimate path_mean(int path_count, Fn&& fn) {
    std::vector<double> vals(static_cast<std::size_t>(path_count));
    for (int p = 0; p < path_count; ++p) vals[static_cast<std::size_t>(p)] = fn(p);
    return mean_with_error(vals);
}

}  // namespace detail

/// Shared evaluation context: base ensemble, policy and adjoint solutions on
/// one grid. Adjoints may be deterministic (single series) or per path.
struct ConditionContext {
    const ControlProblem* pb;
    const PathEnsemble* paths;       // base states simulated
    const ControlPolicy* base;
    const std::vector<AdjointSolution>* adjoints;
    ConditionTolerances tol;
    int sample_paths = 64;  // paths probed per test point for stochastic cases

    bool deterministic() const {
        if (!states_are_deterministic(*paths)) return false;
        for (const auto& s : *adjoints)
            if (s.per_path) return false;
        return true;
    }
};

/// Peng-type first-order condition: script H(t, xbar(t), v) <= 0 for every
/// grid node and probe v. Values are averaged over sampled paths with error
/// bars; deterministic problems evaluate a single representative path.
inline ConditionReport first_order_check(const ConditionContext& ctx, const std::vector<Vec>& probes) {
    ConditionReport rep;
    rep.test_name = "first-order (script H <= 0)";
    const bool det = ctx.deterministic();
    const int samples = det ? 1 : std::min(ctx.sample_paths, ctx.paths->path_count);
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    Vec x(n);

    for (const Vec& v : probes) {
        for (int i = 0; i <= grid.steps; ++i) {
            const double t = grid.node(i);
            const Vec u_bar = (*ctx.base)(t);
            MeanEstimate m = detail::path_mean(samples, [&](int p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                return script_h(*ctx.pb, t, x, u_bar, v, av);
            });
            ConditionRow row;
            row.point = {i, t, v};
            row.script_h = m.mean;
            row.total = m.mean;
            row.std_error = m.std_error;
            row.verdict = classify_nonpositive(m.mean, m.std_error, ctx.tol);
            rep.rows.push_back(std::move(row));
        }
    }
    rep.finalize();
    return rep;
}

struct SingularityVerdict {
    bool singular = false;
    double max_abs_script_h = 0.0;
    double threshold = 0.0;
};

/// Singularity in the Pontryagin sense: script H vanishes identically on the
/// probe set. The threshold is the closed-form slack plus the error-bar
/// multiple of the worst Monte Carlo error encountered.
inline SingularityVerdict singular_check(const ConditionContext& ctx, const std::vector<Vec>& probes) {
    SingularityVerdict out;
    const bool det = ctx.deterministic();
    const int samples = det ? 1 : std::min(ctx.sample_paths, ctx.paths->path_count);
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    Vec x(n);
    double worst_se = 0.0;
    for (const Vec& v : probes) {
        for (int i = 0; i <= grid.steps; ++i) {
            const double t = grid.node(i);
            const Vec u_bar = (*ctx.base)(t);
            MeanEstimate m = detail::path_mean(samples, [&](int p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                return script_h(*ctx.pb, t, x, u_bar, v, av);
            });
            out.max_abs_script_h = std::max(out.max_abs_script_h, std::abs(m.mean));
            worst_se = std::max(worst_se, m.std_error);
        }
    }
    out.threshold = ctx.tol.zero_tol + ctx.tol.error_multiple * worst_se;
    out.singular = out.max_abs_script_h <= out.threshold;
    return out;
}

struct ClassicalSingularityVerdict {
    bool singular = false;
    double max_hu_norm = 0.0;
    double max_huu_norm = 0.0;
};

/// Singularity in the classical sense: H_u = 0 and H_uu + sigma_u^T p2
/// sigma_u = 0 along the base pair. Requires the problem's u-derivatives.
inline ClassicalSingularityVerdict classical_singular_check(const ConditionContext& ctx) {
    if (!ctx.pb->control_derivs || !ctx.pb->control_derivs->complete())
        throw CapabilityError("classical singularity check needs control derivatives");
    if (ctx.adjoints->size() < 2)
        throw UsageError("classical singularity check needs adjoint orders 1 and 2");
    const auto& cd = *ctx.pb->control_derivs;
    const bool det = ctx.deterministic();
    const int samples = det ? 1 : std::min(ctx.sample_paths, ctx.paths->path_count);
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    const int m = ctx.pb->control_dim;
    Vec x(n);

    ClassicalSingularityVerdict out;
    for (int i = 0; i <= grid.steps; ++i) {
        const double t = grid.node(i);
        const Vec u_bar = (*ctx.base)(t);
        for (int p = 0; p < samples; ++p) {
            for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
            AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
            const Mat bu = cd.drift_du(t, x, u_bar);
            const Mat su = cd.diffusion_du(t, x, u_bar);
            const Vec fu = cd.running_cost_du(t, x, u_bar);
            const Vec hu = bu.transpose() * av.p1 + su.transpose() * av.q1 - fu;

            Mat huu = -cd.running_cost_duu(t, x, u_bar);
            const auto buu = cd.drift_duu(t, x, u_bar);
            const auto suu = cd.diffusion_duu(t, x, u_bar);
            for (int c = 0; c < n; ++c) huu += av.p1[c] * buu[static_cast<std::size_t>(c)] +
                                              av.q1[c] * suu[static_cast<std::size_t>(c)];
            Mat total = huu + su.transpose() * av.p2.as_matrix() * su;
            (void)m;
            out.max_hu_norm = std::max(out.max_hu_norm, hu.norm());
            out.max_huu_norm = std::max(out.max_huu_norm, total.norm());
        }
    }
    out.singular = out.max_hu_norm <= ctx.tol.zero_tol && out.max_huu_norm <= ctx.tol.zero_tol;
    return out;
}

/// How the Malliavin derivative of script S is supplied to the pointwise
/// second-order test.
enum class GradSPolicy { user_closed_form, auto_zero, unavailable };

struct GradSResolution {
    GradSPolicy policy = GradSPolicy::unavailable;
    std::string note;
};

/// Decides the grad-S route: a user closed form wins; otherwise script S is
/// probed across paths and, if its spread stays below tolerance, the
/// derivative is taken to vanish (deterministic integrands have vanishing
/// Malliavin derivative); otherwise the pointwise test is inconclusive.
inline GradSResolution resolve_grad_s(const ConditionContext& ctx, const std::vector<Vec>& probes) {
    if (ctx.pb->grad_s) return {GradSPolicy::user_closed_form, "user-supplied closed form"};
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    const int samples = std::min(ctx.sample_paths, ctx.paths->path_count);
    Vec x(n);
    double spread = 0.0;
    for (const Vec& v : probes) {
        for (int i = 0; i <= grid.steps; i += std::max(1, grid.steps / 16)) {
            const double t = grid.node(i);
            const Vec u_bar = (*ctx.base)(t);
            Vec ref;
            for (int p = 0; p < samples; ++p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                Vec s = script_s(*ctx.pb, t, x, u_bar, v, av);
                if (p == 0)
                    ref = s;
                else
                    spread = std::max(spread, (s - ref).lpNorm<Eigen::Infinity>());
            }
        }
    }
    if (spread <= ctx.tol.zero_tol)
        return {GradSPolicy::auto_zero, "script S deterministic across paths; gradient taken as zero"};
    return {GradSPolicy::unavailable,
            "script S varies across paths and no closed-form gradient was supplied"};
}

/// Pointwise second-order necessary condition:
/// <S, delta b> + <grad S, delta sigma> + 1/2 <T delta sigma, delta sigma> <= 0
/// at every (node, v), averaged over sampled paths.
inline ConditionReport second_order_pointwise_test(const ConditionContext& ctx,
                                                   const std::vector<Vec>& probes) {
    ConditionReport rep;
    rep.test_name = "second-order pointwise";
    GradSResolution grad = resolve_grad_s(ctx, probes);
    rep.note = grad.note;
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    const bool det = ctx.deterministic();
    const int samples = det ? 1 : std::min(ctx.sample_paths, ctx.paths->path_count);
    Vec x(n);

    for (const Vec& v : probes) {
        for (int i = 0; i <= grid.steps; ++i) {
            const double t = grid.node(i);
            const Vec u_bar = (*ctx.base)(t);
            ConditionRow row;
            row.point = {i, t, v};
            if (grad.policy == GradSPolicy::unavailable) {
                row.verdict = Verdict::inconclusive;
                row.note = "grad S unavailable";
                rep.rows.push_back(std::move(row));
                continue;
            }
            double sum1 = 0.0, sum2 = 0.0, sum3 = 0.0;
            MeanEstimate m = detail::path_mean(samples, [&](int p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                NodeCoeffs c = functional_coeffs(*ctx.pb, t, x, u_bar, v);
                const Vec s = script_s(c, av);
                const MultilinearForm tt = script_t(c, av);
                const double t1 = s.dot(c.delta_b);
                double t2 = 0.0;
                if (grad.policy == GradSPolicy::user_closed_form)
                    t2 = ctx.pb->grad_s(t, x, v).dot(c.delta_sigma);
                const double t3 = 0.5 * tt(c.delta_sigma, c.delta_sigma);
                sum1 += t1;
                sum2 += t2;
                sum3 += t3;
                return t1 + t2 + t3;
            });
            row.term_s = sum1 / samples;
            row.term_grad = sum2 / samples;
            row.term_t = sum3 / samples;
            row.total = m.mean;
            row.std_error = m.std_error;
            row.verdict = classify_nonpositive(m.mean, m.std_error, ctx.tol);
            rep.rows.push_back(std::move(row));
        }
    }
    rep.finalize();
    return rep;
}

/// Second-order condition in the vanishing-script-S regime:
/// <T delta sigma, delta sigma> <= 0. Requires a singular base control with
/// max |S| below tolerance on the probe set.
inline ConditionReport second_order_zero_s_test(const ConditionContext& ctx,
                                                const std::vector<Vec>& probes) {
    ConditionReport rep;
    rep.test_name = "second-order with vanishing script S";
    const TimeGrid& grid = ctx.paths->grid;
    const int n = ctx.pb->state_dim;
    const bool det = ctx.deterministic();
    const int samples = det ? 1 : std::min(ctx.sample_paths, ctx.paths->path_count);
    Vec x(n);

    // Precondition: singular and script S below tolerance everywhere.
    SingularityVerdict sing = singular_check(ctx, probes);
    if (!sing.singular) {
        rep.note = "base control is not singular on the probe set";
        rep.overall = Verdict::inconclusive;
        return rep;
    }
    double max_s = 0.0;
    for (const Vec& v : probes)
        for (int i = 0; i <= grid.steps; i += std::max(1, grid.steps / 32))
            for (int p = 0; p < samples; ++p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                max_s = std::max(max_s, script_s(*ctx.pb, grid.node(i), x, (*ctx.base)(grid.node(i)), v, av)
                                            .lpNorm<Eigen::Infinity>());
            }
    if (max_s > ctx.tol.zero_tol) {
        rep.note = "script S does not vanish on the probe set (max " + std::to_string(max_s) + ")";
        rep.overall = Verdict::inconclusive;
        return rep;
    }

    for (const Vec& v : probes) {
        for (int i = 0; i <= grid.steps; ++i) {
            const double t = grid.node(i);
            const Vec u_bar = (*ctx.base)(t);
            MeanEstimate m = detail::path_mean(samples, [&](int p) {
                for (int c = 0; c < n; ++c) x[c] = ctx.paths->state_ptr(p, i)[c];
                AdjointValues av = adjoint_values_at(*ctx.adjoints, p, i);
                NodeCoeffs c = functional_coeffs(*ctx.pb, t, x, u_bar, v);
                const MultilinearForm tt = script_t(c, av);
                return tt(c.delta_sigma, c.delta_sigma);
            });
            ConditionRow row;
            row.point = {i, t, v};
            row.term_t = m.mean;
            row.total = m.mean;
            row.std_error = m.std_error;
            row.verdict = classify_nonpositive(m.mean, m.std_error, ctx.tol);
            rep.rows.push_back(std::move(row));
        }
    }
    rep.finalize();
    return rep;
}

}  // namespace needlecheck
