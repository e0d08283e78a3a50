#pragma once

#include "needlecheck/coefficients.hpp"
#include "needlecheck/control_policy.hpp"
#include "needlecheck/control_problem.hpp"
#include "needlecheck/path_ensemble.hpp"
#include "needlecheck/simulate.hpp"

#include <array>
#include <vector>

namespace needlecheck {

/// Euler integrator for the perturbed state x_eps and the variational
/// cascade y_1..y_k along one path. Coefficients along the base pair come
/// from a per-node table; the spike forcing acts on the cells of E_eps.
class VariationalPathSolver {
public:
    VariationalPathSolver(const ControlProblem& pb, const TimeGrid& grid, int max_order)
        : pb_(&pb), grid_(grid), max_order_(max_order), n_(pb.state_dim) {
        if (max_order < 1 || max_order > 4)
            throw UsageError("VariationalPathSolver: max_order must be in 1..4");
        for (int k = 1; k <= max_order; ++k)
            if (!pb.drift.has_order(k) || !pb.diffusion.has_order(k))
                throw CapabilityError("variational solver: derivative order " + std::to_string(k) +
                                      " unavailable");
        for (auto& y : y_) y = Vec::Zero(n_);
        for (auto& d : drift_) d = Vec::Zero(n_);
        for (auto& d : diff_) d = Vec::Zero(n_);
        xe_ = pb.x0;
        scratch_b_ = Vec::Zero(n_);
        scratch_s_ = Vec::Zero(n_);
        tmp_ = Vec::Zero(n_);
        tmp2_ = Vec::Zero(n_);
        sum12_ = Vec::Zero(n_);
        sum123_ = Vec::Zero(n_);
    }

    /// Reset to t = 0 for a new path.
    void start_path() {
        for (auto& y : y_) y.setZero();
        xe_ = pb_->x0;
    }

    /// Advance from node i to i+1. xbar_i points at the base state, dwi is the
    /// Brownian increment, chi marks a spike cell and u_eps is the perturbed
    /// control on cell i.
    void step(int i, const NodeCoeffs& c, const double* xbar_i, double dwi, bool chi,
              const Vec& u_eps) {
        const double dt = grid_.dt();
        const double t = grid_.node(i);
        (void)xbar_i;

        // Perturbed state (full nonlinear dynamics).
        pb_->drift.value(t, xe_, u_eps, scratch_b_);
        pb_->diffusion.value(t, xe_, u_eps, scratch_s_);
        xe_ += scratch_b_ * dt + scratch_s_ * dwi;

        // First order.
        drift_[0] = c.b_x.apply(y_[0]);
        diff_[0] = c.sigma_x.apply(y_[0]);
        if (chi) diff_[0] += c.delta_sigma;

        if (max_order_ >= 2) {
            eval2(c.b_xx, y_[0], y_[0], tmp_);
            drift_[1] = c.b_x.apply(y_[1]) + 0.5 * tmp_;
            if (chi) drift_[1] += c.delta_b;
            eval2(c.sigma_xx, y_[0], y_[0], tmp_);
            diff_[1] = c.sigma_x.apply(y_[1]) + 0.5 * tmp_;
            if (chi) diff_[1] += c.delta_sigma_x.apply(y_[0]);
        }

        if (max_order_ >= 3) {
            sum12_ = y_[0] + y_[1];
            eval2(c.b_xx, sum12_, y_[1], tmp_);
            eval2(c.b_xx, y_[1], y_[0], tmp2_);
            drift_[2] = c.b_x.apply(y_[2]) + 0.5 * (tmp_ + tmp2_);
            eval3(c.b_xxx, y_[0], y_[0], y_[0], tmp_);
            drift_[2] += tmp_ / 6.0;
            if (chi) drift_[2] += c.delta_b_x.apply(y_[0]);

            eval2(c.sigma_xx, sum12_, y_[1], tmp_);
            eval2(c.sigma_xx, y_[1], y_[0], tmp2_);
            diff_[2] = c.sigma_x.apply(y_[2]) + 0.5 * (tmp_ + tmp2_);
            eval3(c.sigma_xxx, y_[0], y_[0], y_[0], tmp_);
            diff_[2] += tmp_ / 6.0;
            if (chi) {
                diff_[2] += c.delta_sigma_x.apply(y_[1]);
                eval2(c.delta_sigma_xx, y_[0], y_[0], tmp_);
                diff_[2] += 0.5 * tmp_;
            }
        }

        if (max_order_ >= 4) {
            sum123_ = y_[0] + y_[1] + y_[2];
            eval2(c.b_xx, sum123_, y_[2], tmp_);
            eval2(c.b_xx, y_[2], sum12_, tmp2_);
            drift_[3] = c.b_x.apply(y_[3]) + 0.5 * (tmp_ + tmp2_);
            mixed_third(c.b_xxx, tmp_);
            drift_[3] += tmp_ / 6.0;
            eval4(c.b_xxxx, y_[0], tmp_);
            drift_[3] += tmp_ / 24.0;
            if (chi) {
                drift_[3] += c.delta_b_x.apply(y_[1]);
                eval2(c.delta_b_xx, y_[0], y_[0], tmp_);
                drift_[3] += 0.5 * tmp_;
            }

            eval2(c.sigma_xx, sum123_, y_[2], tmp_);
            eval2(c.sigma_xx, y_[2], sum12_, tmp2_);
            diff_[3] = c.sigma_x.apply(y_[3]) + 0.5 * (tmp_ + tmp2_);
            mixed_third(c.sigma_xxx, tmp_);
            diff_[3] += tmp_ / 6.0;
            eval4(c.sigma_xxxx, y_[0], tmp_);
            diff_[3] += tmp_ / 24.0;
            if (chi) {
                diff_[3] += c.delta_sigma_x.apply(y_[2]);
                eval2(c.delta_sigma_xx, sum12_, y_[1], tmp_);
                eval2(c.delta_sigma_xx, y_[1], y_[0], tmp2_);
                diff_[3] += 0.5 * (tmp_ + tmp2_);
                eval3(c.delta_sigma_xxx, y_[0], y_[0], y_[0], tmp_);
                diff_[3] += tmp_ / 6.0;
            }
        }

        for (int k = 0; k < max_order_; ++k) y_[static_cast<std::size_t>(k)] += drift_[static_cast<std::size_t>(k)] * dt + diff_[static_cast<std::size_t>(k)] * dwi;
    }

    int max_order() const { return max_order_; }
    const Vec& y(int order) const { return y_[static_cast<std::size_t>(order - 1)]; }
    const Vec& perturbed_state() const { return xe_; }

    Vec gamma() const { return y_[0] + y_[1]; }
    Vec eta() const { return y_[0] + y_[1] + y_[2]; }
    Vec xi() const { return y_[0] + y_[1] + y_[2] + y_[3]; }

private:
    void eval2(const MultilinearMap& m, const Vec& a, const Vec& b, Vec& out) const {
        const Vec* args[2] = {&a, &b};
        m.eval_into(out, args, 2);
    }
    void eval3(const MultilinearMap& m, const Vec& a, const Vec& b, const Vec& c, Vec& out) const {
        const Vec* args[3] = {&a, &b, &c};
        m.eval_into(out, args, 3);
    }
    void eval4(const MultilinearMap& m, const Vec& a, Vec& out) const {
        const Vec* args[4] = {&a, &a, &a, &a};
        m.eval_into(out, args, 4);
    }
    // The seven mixed third-derivative terms of the fourth variational
    // equation: every (y1, y2) word of length three except (y1, y1, y1).
    void mixed_third(const MultilinearMap& m, Vec& out) {
        out.setZero();
        const Vec* w[2] = {&y_[0], &y_[1]};
        Vec term(n_);
        for (int mask = 1; mask < 8; ++mask) {
            const Vec* args[3] = {w[(mask >> 2) & 1], w[(mask >> 1) & 1], w[mask & 1]};
            m.eval_into(term, args, 3);
            out += term;
        }
    }

    const ControlProblem* pb_;
    TimeGrid grid_;
    int max_order_;
    int n_;
    std::array<Vec, 4> y_;
    std::array<Vec, 4> drift_, diff_;
    Vec xe_, scratch_b_, scratch_s_, tmp_, tmp2_, sum12_, sum123_;
};

/// Materialized variational solutions on an ensemble: per-path, per-node
/// y_1..y_k and delta x = x_eps - xbar, plus the derived combinations.
struct VariationalSolutions {
    TimeGrid grid;
    int path_count = 0;
    int state_dim = 0;
    int max_order = 0;
    std::array<std::vector<double>, 4> y;  // each M * (N+1) * n
    std::vector<double> delta_x;           // M * (N+1) * n

    std::size_t offset(int path, int node) const {
        return (static_cast<std::size_t>(path) * grid.node_count() + node) * state_dim;
    }
    Vec y_at(int order, int path, int node) const {
        Vec v(state_dim);
        const double* s = y[static_cast<std::size_t>(order - 1)].data() + offset(path, node);
        for (int k = 0; k < state_dim; ++k) v[k] = s[k];
        return v;
    }
    Vec delta_x_at(int path, int node) const {
        Vec v(state_dim);
        const double* s = delta_x.data() + offset(path, node);
        for (int k = 0; k < state_dim; ++k) v[k] = s[k];
        return v;
    }
    Vec gamma_at(int path, int node) const { return y_at(1, path, node) + y_at(2, path, node); }
    Vec eta_at(int path, int node) const { return gamma_at(path, node) + y_at(3, path, node); }
    Vec xi_at(int path, int node) const { return eta_at(path, node) + y_at(4, path, node); }
    /// r_k = delta x - (y_1 + ... + y_k).
    Vec residual_at(int order, int path, int node) const {
        Vec r = delta_x_at(path, node);
        for (int k = 1; k <= order; ++k) r -= y_at(k, path, node);
        return r;
    }
};

inline void require_variational_capability(const ControlProblem& pb, int max_order) {
    if (max_order < 1 || max_order > 4) throw UsageError("max_order must be in 1..4");
    for (int k = 1; k <= max_order; ++k)
        if (!pb.drift.has_order(k) || !pb.diffusion.has_order(k))
            throw CapabilityError("variational solver: derivative order " + std::to_string(k) +
                                  " unavailable");
}

/// Solves the variational cascade on every path of the ensemble. The base
/// states must be simulated; the spike rides on top of the base policy.
inline VariationalSolutions solve_variational(const ControlProblem& pb, const ControlPolicy& base,
                                              const Spike& spike, const PathEnsemble& paths,
                                              int max_order = 4) {
    if (!paths.has_states()) throw UsageError("solve_variational: base states missing");
    require_variational_capability(pb, max_order);
    const auto [cell_begin, cell_end] = spike.cell_range(paths.grid);
    ControlPolicy varied = base;
    if (!spike.empty()) varied.spike = spike;

    CoeffRequest req;
    req.deriv_order = max_order;
    req.delta_order = max_order - 1;
    const Vec* probe = spike.empty() ? nullptr : &spike.value;
    CoefficientProvider provider(pb, paths, base, probe, req);

    VariationalSolutions out;
    out.grid = paths.grid;
    out.path_count = paths.path_count;
    out.state_dim = pb.state_dim;
    out.max_order = max_order;
    const std::size_t total =
        static_cast<std::size_t>(paths.path_count) * paths.grid.node_count() * pb.state_dim;
    for (int k = 0; k < max_order; ++k) out.y[static_cast<std::size_t>(k)].assign(total, 0.0);
    out.delta_x.assign(total, 0.0);

    const auto controls_eps = varied.values_on(paths.grid);
    const int n = pb.state_dim;
    const int N = paths.grid.steps;

    parallel_for_blocks(paths.path_count, [&](int, int begin, int end) {
        VariationalPathSolver solver(pb, paths.grid, max_order);
        std::vector<NodeCoeffs> scratch;
        for (int p = begin; p < end; ++p) {
            const auto& table = provider.table_for(p, scratch);
            solver.start_path();
            for (int i = 0; i < N; ++i) {
                const bool chi = i >= cell_begin && i < cell_end;
                solver.step(i, table[static_cast<std::size_t>(i)], paths.state_ptr(p, i),
                            paths.dw(p, i), chi, controls_eps[static_cast<std::size_t>(i)]);
                const std::size_t off = out.offset(p, i + 1);
                for (int k = 0; k < max_order; ++k)
                    for (int c = 0; c < n; ++c)
                        out.y[static_cast<std::size_t>(k)][off + c] = solver.y(k + 1)[c];
                for (int c = 0; c < n; ++c)
                    out.delta_x[off + c] = solver.perturbed_state()[c] - paths.state_ptr(p, i + 1)[c];
            }
        }
    });
    return out;
}

}  // namespace needlecheck
