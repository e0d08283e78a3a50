#pragma once

#include "needlecheck/control_policy.hpp"
#include "needlecheck/control_problem.hpp"
#include "needlecheck/path_ensemble.hpp"

#include <vector>

namespace needlecheck {

/// What a coefficient table must contain. deriv_order covers the x-derivative
/// maps along the base pair; delta_order covers derivatives of the probe
/// increments (delta phi = phi(., x, v) - phi(., x, u_bar)).
struct CoeffRequest {
    int deriv_order = 1;  // 0..4
    int delta_order = 0;  // -1 (no deltas) .. 3
    bool values = true;   // b, sigma, f values at base and probe
};

/// Coefficient tensors at one grid node, evaluated along the base trajectory.
struct NodeCoeffs {
    // Along (t, xbar, ubar):
    Vec b, sigma;
    double f = 0.0;
    MultilinearMap b_x, sigma_x, b_xx, sigma_xx, b_xxx, sigma_xxx, b_xxxx, sigma_xxxx;
    Vec f_x;
    MultilinearForm f_xx, f_xxx, f_xxxx;

    // Probe values at (t, xbar, v) and increments against the base pair:
    Vec b_probe, sigma_probe;
    double f_probe = 0.0;
    Vec delta_b, delta_sigma;
    MultilinearMap delta_b_x, delta_sigma_x, delta_b_xx, delta_sigma_xx, delta_sigma_xxx;
    Vec delta_f_x;
    MultilinearForm delta_f_xx;

    void fill(const ControlProblem& pb, double t, const Vec& x, const Vec& u_base, const Vec* probe,
              const CoeffRequest& req) {
        const int n = pb.state_dim;
        if (req.values) {
            b.resize(n);
            sigma.resize(n);
            pb.drift.value(t, x, u_base, b);
            pb.diffusion.value(t, x, u_base, sigma);
            f = pb.running_cost(t, x, u_base);
        }
        auto fill_map = [&](MultilinearMap& m, const VectorField& field, int order, const Vec& u) {
            m.ensure_shape(order, n);
            field.deriv[static_cast<std::size_t>(order - 1)](t, x, u, m);
        };
        auto fill_form = [&](MultilinearForm& ff, int order, const Vec& u) {
            ff.ensure_shape(order, n);
            pb.running_cost.deriv[static_cast<std::size_t>(order - 1)](t, x, u, ff);
        };
        if (req.deriv_order >= 1) {
            fill_map(b_x, pb.drift, 1, u_base);
            fill_map(sigma_x, pb.diffusion, 1, u_base);
            MultilinearForm tmp(1, n);
            pb.running_cost.deriv[0](t, x, u_base, tmp);
            f_x = tmp.as_vector();
        }
        if (req.deriv_order >= 2) {
            fill_map(b_xx, pb.drift, 2, u_base);
            fill_map(sigma_xx, pb.diffusion, 2, u_base);
            fill_form(f_xx, 2, u_base);
        }
        if (req.deriv_order >= 3) {
            fill_map(b_xxx, pb.drift, 3, u_base);
            fill_map(sigma_xxx, pb.diffusion, 3, u_base);
            fill_form(f_xxx, 3, u_base);
        }
        if (req.deriv_order >= 4) {
            fill_map(b_xxxx, pb.drift, 4, u_base);
            fill_map(sigma_xxxx, pb.diffusion, 4, u_base);
            fill_form(f_xxxx, 4, u_base);
        }

        if (!probe || req.delta_order < 0) return;
        const Vec& v = *probe;
        b_probe.resize(n);
        sigma_probe.resize(n);
        pb.drift.value(t, x, v, b_probe);
        pb.diffusion.value(t, x, v, sigma_probe);
        f_probe = pb.running_cost(t, x, v);
        delta_b = b_probe - b;
        delta_sigma = sigma_probe - sigma;
        MultilinearMap scratch;
        auto fill_delta_map = [&](MultilinearMap& m, const VectorField& field, int order,
                                  const MultilinearMap& base_val) {
            m.ensure_shape(order, n);
            field.deriv[static_cast<std::size_t>(order - 1)](t, x, v, m);
            m -= base_val;
        };
        if (req.delta_order >= 1) {
            fill_delta_map(delta_b_x, pb.drift, 1, b_x);
            fill_delta_map(delta_sigma_x, pb.diffusion, 1, sigma_x);
            MultilinearForm tmp(1, n);
            pb.running_cost.deriv[0](t, x, v, tmp);
            delta_f_x = tmp.as_vector() - f_x;
        }
        if (req.delta_order >= 2) {
            fill_delta_map(delta_b_xx, pb.drift, 2, b_xx);
            fill_delta_map(delta_sigma_xx, pb.diffusion, 2, sigma_xx);
            delta_f_xx.ensure_shape(2, n);
            pb.running_cost.deriv[1](t, x, v, delta_f_xx);
            delta_f_xx -= f_xx;
        }
        if (req.delta_order >= 3) {
            fill_delta_map(delta_sigma_xxx, pb.diffusion, 3, sigma_xxx);
        }
    }
};

/// True when the simulated states agree across paths to within tol, i.e. the
/// base trajectory is a single deterministic path.
inline bool states_are_deterministic(const PathEnsemble& paths, double tol = 1e-12) {
    if (!paths.has_states()) throw UsageError("states_are_deterministic: states not simulated");
    const int probe_paths = std::min(paths.path_count, 16);
    const int n = paths.state_dim;
    for (int p = 1; p < probe_paths; ++p)
        for (int i = 0; i <= paths.grid.steps; ++i)
            for (int k = 0; k < n; ++k)
                if (std::abs(paths.state_ptr(p, i)[k] - paths.state_ptr(0, i)[k]) > tol) return false;
    // Also compare against the last path in case early paths coincide by luck.
    if (paths.path_count > probe_paths) {
        const int p = paths.path_count - 1;
        for (int i = 0; i <= paths.grid.steps; ++i)
            for (int k = 0; k < n; ++k)
                if (std::abs(paths.state_ptr(p, i)[k] - paths.state_ptr(0, i)[k]) > tol) return false;
    }
    return true;
}

/// Per-node coefficient tables along the base pair of an ensemble. When the
/// base trajectory is deterministic the table is built once and shared by all
/// paths; otherwise each path's table is filled into caller-owned scratch.
class CoefficientProvider {
public:
    CoefficientProvider(const ControlProblem& pb, const PathEnsemble& base_paths,
                        const ControlPolicy& base_policy, const Vec* probe, CoeffRequest req)
        : pb_(&pb), paths_(&base_paths), req_(req) {
        if (!base_paths.has_states()) throw UsageError("CoefficientProvider: base states missing");
        const int nodes = base_paths.grid.node_count();
        controls_.reserve(static_cast<std::size_t>(nodes));
        for (int i = 0; i < nodes; ++i) controls_.push_back(base_policy(base_paths.grid.node(i)));
        if (probe) probe_ = *probe;
        has_probe_ = probe != nullptr;
        shared_ = states_are_deterministic(base_paths);
        if (shared_) {
            shared_table_.resize(static_cast<std::size_t>(nodes));
            fill_path_into(0, shared_table_);
        }
    }

    bool shared() const { return shared_; }
    const TimeGrid& grid() const { return paths_->grid; }

    /// Table for one path. `scratch` is reused across calls; with a shared
    /// table the same reference is returned for every path.
    const std::vector<NodeCoeffs>& table_for(int path, std::vector<NodeCoeffs>& scratch) const {
        if (shared_) return shared_table_;
        scratch.resize(static_cast<std::size_t>(paths_->grid.node_count()));
        fill_path_into(path, scratch);
        return scratch;
    }

private:
    void fill_path_into(int path, std::vector<NodeCoeffs>& table) const {
        const int n = paths_->state_dim;
        Vec x(n);
        for (int i = 0; i <= paths_->grid.steps; ++i) {
            const double* s = paths_->state_ptr(path, i);
            for (int k = 0; k < n; ++k) x[k] = s[k];
            table[static_cast<std::size_t>(i)].fill(*pb_, paths_->grid.node(i), x,
                                                    controls_[static_cast<std::size_t>(i)],
                                                    has_probe_ ? &probe_ : nullptr, req_);
        }
    }

    const ControlProblem* pb_;
    const PathEnsemble* paths_;
    CoeffRequest req_;
    std::vector<Vec> controls_;
    Vec probe_;
    bool has_probe_ = false;
    bool shared_ = false;
    std::vector<NodeCoeffs> shared_table_;
};

}  // namespace needlecheck
