#pragma once

#include "needlecheck/control_policy.hpp"
#include "needlecheck/control_problem.hpp"
#include "needlecheck/parallel.hpp"
#include "needlecheck/path_ensemble.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace needlecheck {

struct SimulationDiverged : std::runtime_error {
    int path;
    int step;
    SimulationDiverged(int p, int s)
        : std::runtime_error("simulation diverged (non-finite state) at path " + std::to_string(p) +
                             ", step " + std::to_string(s)),
          path(p), step(s) {}
};

namespace detail {

/// Euler-Maruyama over one block of paths, writing flat (N+1) x n states.
/// Returns the number of paths frozen by the divergence guard.
inline int simulate_block(const ControlProblem& pb, const std::vector<Vec>& controls,
                          const PathEnsemble& paths, int begin, int end, double* out,
                          int global_path_offset) {
    const int n = pb.state_dim;
    const int N = paths.grid.steps;
    const double dt = paths.grid.dt();
    Vec x = pb.x0, b(n), s(n);
    int aborted = 0;
    for (int p = begin; p < end; ++p) {
        double* row = out + static_cast<std::size_t>(p - global_path_offset) *
                                paths.grid.node_count() * n;
        x = pb.x0;
        for (int i = 0; i < n; ++i) row[i] = x[i];
        bool frozen = false;
        for (int i = 0; i < N; ++i) {
            double* next = row + static_cast<std::size_t>(i + 1) * n;
            if (frozen) {
                for (int k = 0; k < n; ++k) next[k] = x[k];
                continue;
            }
            const double t = paths.grid.node(i);
            pb.drift.value(t, x, controls[static_cast<std::size_t>(i)], b);
            pb.diffusion.value(t, x, controls[static_cast<std::size_t>(i)], s);
            const double dwi = paths.dw(p, i);
            for (int k = 0; k < n; ++k) x[k] += b[k] * dt + s[k] * dwi;
            for (int k = 0; k < n; ++k) {
                if (!std::isfinite(x[k])) throw SimulationDiverged(p, i);
            }
            if (x.lpNorm<Eigen::Infinity>() > pb.divergence_guard) {
                frozen = true;
                ++aborted;
            }
            for (int k = 0; k < n; ++k) next[k] = x[k];
        }
    }
    return aborted;
}

}  // namespace detail

/// Euler-Maruyama trajectories for every path of the ensemble, stored in
/// paths.states. Deterministic given (problem, policy, seed, N, M).
inline void simulate_state(const ControlProblem& pb, const ControlPolicy& policy, PathEnsemble& paths) {
    if (paths.increments.empty()) throw UsageError("simulate_state: increments not populated");
    const auto controls = policy.values_on(paths.grid);
    paths.state_dim = pb.state_dim;
    paths.states.assign(static_cast<std::size_t>(paths.path_count) * paths.grid.node_count() *
                            pb.state_dim,
                        0.0);
    std::vector<int> aborted(static_cast<std::size_t>(block_count(paths.path_count)), 0);
    parallel_for_blocks(paths.path_count, [&](int blk, int begin, int end) {
        aborted[static_cast<std::size_t>(blk)] =
            detail::simulate_block(pb, controls, paths, begin, end,
                                   paths.states.data() +
                                       static_cast<std::size_t>(begin) * paths.grid.node_count() *
                                           pb.state_dim,
                                   begin);
    });
    paths.aborted_paths = 0;
    for (int a : aborted) paths.aborted_paths += a;
}

/// Trajectories for an alternative policy on the same increments, without
/// touching the ensemble's own state buffer (common-random-numbers work).
inline std::vector<double> simulate_states_aux(const ControlProblem& pb, const ControlPolicy& policy,
                                               const PathEnsemble& paths, int* aborted_out = nullptr) {
    if (paths.increments.empty()) throw UsageError("simulate aux: increments not populated");
    const auto controls = policy.values_on(paths.grid);
    std::vector<double> out(static_cast<std::size_t>(paths.path_count) * paths.grid.node_count() *
                                pb.state_dim,
                            0.0);
    std::vector<int> aborted(static_cast<std::size_t>(block_count(paths.path_count)), 0);
    parallel_for_blocks(paths.path_count, [&](int blk, int begin, int end) {
        aborted[static_cast<std::size_t>(blk)] =
            detail::simulate_block(pb, controls, paths, begin, end,
                                   out.data() + static_cast<std::size_t>(begin) *
                                                    paths.grid.node_count() * pb.state_dim,
                                   begin);
    });
    if (aborted_out) {
        *aborted_out = 0;
        for (int a : aborted) *aborted_out += a;
    }
    return out;
}

struct CostEstimate {
    double estimate = 0.0;
    double std_error = 0.0;
};

namespace detail {

inline double path_cost(const ControlProblem& pb, const std::vector<Vec>& controls,
                        const TimeGrid& grid, const double* row) {
    const int n = pb.state_dim;
    const double dt = grid.dt();
    double acc = 0.0;
    Vec x(n);
    for (int i = 0; i < grid.steps; ++i) {
        for (int k = 0; k < n; ++k) x[k] = row[static_cast<std::size_t>(i) * n + k];
        acc += pb.running_cost(grid.node(i), x, controls[static_cast<std::size_t>(i)]) * dt;
    }
    for (int k = 0; k < n; ++k) x[k] = row[static_cast<std::size_t>(grid.steps) * n + k];
    return acc + pb.terminal_cost(x);
}

inline CostEstimate mean_and_se(const std::vector<double>& sum, const std::vector<double>& sumsq,
                                int m) {
    double s = 0.0, s2 = 0.0;
    for (double v : sum) s += v;
    for (double v : sumsq) s2 += v;
    CostEstimate r;
    r.estimate = s / m;
    const double var = std::max(0.0, s2 / m - r.estimate * r.estimate);
    r.std_error = m > 1 ? std::sqrt(var / (m - 1)) : 0.0;
    return r;
}

}  // namespace detail

/// Monte Carlo estimate of J(policy) = E[ sum f dt + h(x_N) ] with its
/// standard error. States must already be simulated for this policy.
inline CostEstimate evaluate_cost(const ControlProblem& pb, const ControlPolicy& policy,
                                  const PathEnsemble& paths) {
    if (!paths.has_states()) throw UsageError("evaluate_cost: states not simulated");
    if (paths.state_dim != pb.state_dim) throw UsageError("evaluate_cost: state dimension mismatch");
    const auto controls = policy.values_on(paths.grid);
    const int blocks = block_count(paths.path_count);
    std::vector<double> sum(static_cast<std::size_t>(blocks), 0.0),
        sumsq(static_cast<std::size_t>(blocks), 0.0);
    parallel_for_blocks(paths.path_count, [&](int blk, int begin, int end) {
        double s = 0.0, s2 = 0.0;
        for (int p = begin; p < end; ++p) {
            const double c = detail::path_cost(pb, controls, paths.grid, paths.state_ptr(p, 0));
            s += c;
            s2 += c * c;
        }
        sum[static_cast<std::size_t>(blk)] = s;
        sumsq[static_cast<std::size_t>(blk)] = s2;
    });
    return detail::mean_and_se(sum, sumsq, paths.path_count);
}

/// Pathwise-paired estimate of J(u_eps) - J(u_bar) under common random
/// numbers: both policies are simulated on the very same increments and the
/// difference is averaged path by path.
inline CostEstimate cost_difference_crn(const ControlProblem& pb, const ControlPolicy& base,
                                        const ControlPolicy& varied, const PathEnsemble& paths) {
    if (paths.increments.empty()) throw UsageError("cost_difference_crn: increments not populated");
    const auto cb = base.values_on(paths.grid);
    const auto cv = varied.values_on(paths.grid);
    const auto base_states = simulate_states_aux(pb, base, paths);
    const auto varied_states = simulate_states_aux(pb, varied, paths);
    const int blocks = block_count(paths.path_count);
    std::vector<double> sum(static_cast<std::size_t>(blocks), 0.0),
        sumsq(static_cast<std::size_t>(blocks), 0.0);
    const std::size_t stride = static_cast<std::size_t>(paths.grid.node_count()) * pb.state_dim;
    parallel_for_blocks(paths.path_count, [&](int blk, int begin, int end) {
        double s = 0.0, s2 = 0.0;
        for (int p = begin; p < end; ++p) {
            const double d =
                detail::path_cost(pb, cv, paths.grid, varied_states.data() + p * stride) -
                detail::path_cost(pb, cb, paths.grid, base_states.data() + p * stride);
            s += d;
            s2 += d * d;
        }
        sum[static_cast<std::size_t>(blk)] = s;
        sumsq[static_cast<std::size_t>(blk)] = s2;
    });
    return detail::mean_and_se(sum, sumsq, paths.path_count);
}

}  // namespace needlecheck
