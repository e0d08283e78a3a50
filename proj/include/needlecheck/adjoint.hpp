#pragma once

#include "needlecheck/coefficients.hpp"
#include "needlecheck/control_policy.hpp"
#include "needlecheck/control_problem.hpp"
#include "needlecheck/path_ensemble.hpp"
#include "needlecheck/simulate.hpp"

#include <Eigen/Dense>

#include <limits>
#include <string>
#include <vector>

namespace needlecheck {

// ---------------------------------------------------------------------------
// Drift terms of the four adjoint equations. Each named function is one term
// of the displayed drifts, so unit tests can pin them down individually. All
// terms enter the backward equation as dp = -[...]dt + q dW.
// ---------------------------------------------------------------------------
namespace adjoint_terms {

/// sum_j p o_j b_x (every slot precomposed with the drift Jacobian).
inline MultilinearForm p_compose_drift_jacobian(const MultilinearForm& p, const MultilinearMap& b_x) {
    MultilinearForm acc(p.arity(), p.dim());
    for (int j = 1; j <= p.arity(); ++j) acc += compose_at(p, b_x, j);
    return acc;
}

/// sum_{j<l} p o_{j,l}(sigma_x, sigma_x).
inline MultilinearForm p_compose_diffusion_pair(const MultilinearForm& p, const MultilinearMap& sigma_x) {
    MultilinearForm acc(p.arity(), p.dim());
    for (int j = 1; j <= p.arity(); ++j)
        for (int l = j + 1; l <= p.arity(); ++l) acc += compose_two_at(p, sigma_x, sigma_x, j, l);
    return acc;
}

/// sum_j q o_j sigma_x.
inline MultilinearForm q_compose_diffusion_jacobian(const MultilinearForm& q, const MultilinearMap& sigma_x) {
    MultilinearForm acc(q.arity(), q.dim());
    for (int j = 1; j <= q.arity(); ++j) acc += compose_at(q, sigma_x, j);
    return acc;
}

/// (3/2) sum_{j<=2} (p2 o_j b_xx + q2 o_j sigma_xx) of the third drift.
inline MultilinearForm third_hessian_coupling(const MultilinearForm& p2, const MultilinearForm& q2,
                                              const MultilinearMap& b_xx, const MultilinearMap& sigma_xx) {
    MultilinearForm acc(3, p2.dim());
    for (int j = 1; j <= 2; ++j) {
        acc += compose_at(p2, b_xx, j);
        acc += compose_at(q2, sigma_xx, j);
    }
    return acc * 1.5;
}

/// (3/2) (p2 o_{1,2}(sigma_x, sigma_xx) + p2 o_{1,2}(sigma_xx, sigma_x)).
inline MultilinearForm third_mixed_coupling(const MultilinearForm& p2, const MultilinearMap& sigma_x,
                                            const MultilinearMap& sigma_xx) {
    MultilinearForm acc = compose_two_at(p2, sigma_x, sigma_xx, 1, 2);
    acc += compose_two_at(p2, sigma_xx, sigma_x, 1, 2);
    return acc * 1.5;
}

/// 2 sum_{j<=3} (p3 o_j b_xx + q3 o_j sigma_xx) of the fourth drift.
inline MultilinearForm fourth_hessian_coupling(const MultilinearForm& p3, const MultilinearForm& q3,
                                               const MultilinearMap& b_xx, const MultilinearMap& sigma_xx) {
    MultilinearForm acc(4, p3.dim());
    for (int j = 1; j <= 3; ++j) {
        acc += compose_at(p3, b_xx, j);
        acc += compose_at(q3, sigma_xx, j);
    }
    return acc * 2.0;
}

/// 2 sum_{j<=3} sum_{l != j} p3 o_{j,l}(sigma_x, sigma_xx).
inline MultilinearForm fourth_p3_mixed_coupling(const MultilinearForm& p3, const MultilinearMap& sigma_x,
                                                const MultilinearMap& sigma_xx) {
    MultilinearForm acc(4, p3.dim());
    for (int j = 1; j <= 3; ++j)
        for (int l = 1; l <= 3; ++l) {
            if (l == j) continue;
            acc += compose_two_at(p3, sigma_x, sigma_xx, j, l);
        }
    return acc * 2.0;
}

/// 2 sum_{j<=2} p2 o_j b_xxx.
inline MultilinearForm fourth_p2_third_drift(const MultilinearForm& p2, const MultilinearMap& b_xxx) {
    MultilinearForm acc(4, p2.dim());
    for (int j = 1; j <= 2; ++j) acc += compose_at(p2, b_xxx, j);
    return acc * 2.0;
}

/// 2 (p2 o_{1,2}(sigma_x, sigma_xxx) + p2 o_{1,2}(sigma_xxx, sigma_x)).
inline MultilinearForm fourth_p2_mixed_third(const MultilinearForm& p2, const MultilinearMap& sigma_x,
                                             const MultilinearMap& sigma_xxx) {
    MultilinearForm acc = compose_two_at(p2, sigma_x, sigma_xxx, 1, 2);
    acc += compose_two_at(p2, sigma_xxx, sigma_x, 1, 2);
    return acc * 2.0;
}

/// 3 p2 o_{1,2}(sigma_xx, sigma_xx).
inline MultilinearForm fourth_p2_hessian_pair(const MultilinearForm& p2, const MultilinearMap& sigma_xx) {
    return compose_two_at(p2, sigma_xx, sigma_xx, 1, 2) * 3.0;
}

/// 2 sum_{j<=2} q2 o_j sigma_xxx.
inline MultilinearForm fourth_q2_third_diffusion(const MultilinearForm& q2, const MultilinearMap& sigma_xxx) {
    MultilinearForm acc(4, q2.dim());
    for (int j = 1; j <= 2; ++j) acc += compose_at(q2, sigma_xxx, j);
    return acc * 2.0;
}

}  // namespace adjoint_terms

/// k-th x-derivative tensor of the Hamiltonian along the base pair, built
/// from the coefficient derivatives contracted with (p1, q1):
/// H^{(k)} = <p1, b^{(k)}> + <q1, sigma^{(k)}> - f^{(k)}, k = 2, 3, 4.
inline MultilinearForm hamiltonian_x_tensor(const NodeCoeffs& c, int order, const Vec& p1, const Vec& q1) {
    switch (order) {
        case 2: {
            MultilinearForm h = c.b_xx.dot_output(p1);
            h += c.sigma_xx.dot_output(q1);
            h -= c.f_xx;
            return h;
        }
        case 3: {
            MultilinearForm h = c.b_xxx.dot_output(p1);
            h += c.sigma_xxx.dot_output(q1);
            h -= c.f_xxx;
            return h;
        }
        case 4: {
            MultilinearForm h = c.b_xxxx.dot_output(p1);
            h += c.sigma_xxxx.dot_output(q1);
            h -= c.f_xxxx;
            return h;
        }
        default:
            throw UsageError("hamiltonian_x_tensor: order must be 2, 3 or 4");
    }
}

/// The k-th adjoint drift at one node as a linear operator on flattened
/// tensors: G = A p_k + B q_k + C1p p1 + C1q q1 [+ C2 p2/q2 + C3 p3/q3] + c0.
/// Built once per node by probing the named drift terms with basis forms;
/// the backward sweeps are then allocation-free matrix arithmetic.
struct AdjointDriftOperator {
    int order = 1;
    int dim = 1;
    Mat A, B;            // n^k x n^k
    Mat C1p, C1q;        // n^k x n
    Mat C2p, C2q;        // n^k x n^2 (order >= 3)
    Mat C3p, C3q;        // n^k x n^3 (order == 4)
    Vec c0;              // n^k

    void build(int ord, const NodeCoeffs& c) {
        using namespace adjoint_terms;
        order = ord;
        dim = c.b_x.dim();
        const int n = dim;
        const auto nk = static_cast<Eigen::Index>(detail::int_pow(n, ord));

        auto flat = [](const MultilinearForm& f) {
            Vec v(static_cast<Eigen::Index>(f.size()));
            for (std::size_t k = 0; k < f.size(); ++k) v[static_cast<Eigen::Index>(k)] = f[k];
            return v;
        };

        A.resize(nk, nk);
        B.resize(nk, nk);
        MultilinearForm basis(ord, n);
        for (Eigen::Index col = 0; col < nk; ++col) {
            basis.set_zero();
            basis[static_cast<std::size_t>(col)] = 1.0;
            MultilinearForm img = p_compose_drift_jacobian(basis, c.b_x);
            img += p_compose_diffusion_pair(basis, c.sigma_x);
            A.col(col) = flat(img);
            B.col(col) = flat(q_compose_diffusion_jacobian(basis, c.sigma_x));
        }

        if (ord >= 2) {
            C1p.resize(nk, n);
            C1q.resize(nk, n);
            const MultilinearMap& bk = ord == 2 ? c.b_xx : ord == 3 ? c.b_xxx : c.b_xxxx;
            const MultilinearMap& sk = ord == 2 ? c.sigma_xx : ord == 3 ? c.sigma_xxx : c.sigma_xxxx;
            for (int j = 0; j < n; ++j) {
                Vec e = Vec::Zero(n);
                e[j] = 1.0;
                C1p.col(j) = flat(bk.dot_output(e));
                C1q.col(j) = flat(sk.dot_output(e));
            }
            const MultilinearForm& fk = ord == 2 ? c.f_xx : ord == 3 ? c.f_xxx : c.f_xxxx;
            c0 = -flat(fk);
        } else {
            C1p = Mat::Zero(nk, n);
            C1q = Mat::Zero(nk, n);
            c0 = Vec(nk);
            for (int j = 0; j < n; ++j) c0[j] = -c.f_x[j];
        }

        if (ord == 3) {
            const auto n2 = static_cast<Eigen::Index>(n * n);
            C2p.resize(nk, n2);
            C2q.resize(nk, n2);
            MultilinearForm b2(2, n), zero2(2, n);
            for (Eigen::Index col = 0; col < n2; ++col) {
                b2.set_zero();
                b2[static_cast<std::size_t>(col)] = 1.0;
                MultilinearForm img = third_hessian_coupling(b2, zero2, c.b_xx, c.sigma_xx);
                img += third_mixed_coupling(b2, c.sigma_x, c.sigma_xx);
                C2p.col(col) = flat(img);
                C2q.col(col) = flat(third_hessian_coupling(zero2, b2, c.b_xx, c.sigma_xx));
            }
        }
        if (ord == 4) {
            const auto n2 = static_cast<Eigen::Index>(n * n);
            const auto n3 = static_cast<Eigen::Index>(n * n * n);
            C2p.resize(nk, n2);
            C2q.resize(nk, n2);
            C3p.resize(nk, n3);
            C3q.resize(nk, n3);
            MultilinearForm b2(2, n), zero2(2, n), b3(3, n), zero3(3, n);
            for (Eigen::Index col = 0; col < n2; ++col) {
                b2.set_zero();
                b2[static_cast<std::size_t>(col)] = 1.0;
                MultilinearForm img = fourth_p2_third_drift(b2, c.b_xxx);
                img += fourth_p2_mixed_third(b2, c.sigma_x, c.sigma_xxx);
                img += fourth_p2_hessian_pair(b2, c.sigma_xx);
                C2p.col(col) = flat(img);
                C2q.col(col) = flat(fourth_q2_third_diffusion(b2, c.sigma_xxx));
            }
            for (Eigen::Index col = 0; col < n3; ++col) {
                b3.set_zero();
                b3[static_cast<std::size_t>(col)] = 1.0;
                MultilinearForm img = fourth_hessian_coupling(b3, zero3, c.b_xx, c.sigma_xx);
                img += fourth_p3_mixed_coupling(b3, c.sigma_x, c.sigma_xx);
                C3p.col(col) = flat(img);
                C3q.col(col) = flat(fourth_hessian_coupling(zero3, b3, c.b_xx, c.sigma_xx));
            }
        }
    }

    /// Affine part given lower-order flats (p1, q1 always; p2/q2, p3/q3 when
    /// the order needs them).
    Vec affine(const Vec& p1, const Vec& q1, const Vec* p2 = nullptr, const Vec* q2 = nullptr,
               const Vec* p3 = nullptr, const Vec* q3 = nullptr) const {
        Vec g = c0;
        if (order >= 2) g += C1p * p1 + C1q * q1;
        if (order >= 3 && p2) g += C2p * (*p2) + C2q * (*q2);
        if (order == 4 && p3) g += C3p * (*p3) + C3q * (*q3);
        return g;
    }
};

/// Adjoint processes of one order on a grid. p and q are flat coefficient
/// arrays of size [paths x] nodes x dim^order; a single series is stored when
/// the coefficients along the base pair are deterministic (then q == 0).
struct AdjointSolution {
    int order = 1;
    int state_dim = 1;
    TimeGrid grid;
    bool per_path = false;
    int path_count = 1;
    std::size_t coeff_count = 1;
    std::vector<double> p, q;

    // Regression diagnostics, per node (empty for the deterministic solver).
    std::vector<double> condition_numbers;
    std::vector<double> q_fit_rms;

    std::size_t offset(int path, int node) const {
        const std::size_t base = per_path ? static_cast<std::size_t>(path) * grid.node_count() + node
                                          : static_cast<std::size_t>(node);
        return base * coeff_count;
    }
    const double* p_ptr(int path, int node) const { return p.data() + offset(path, node); }
    const double* q_ptr(int path, int node) const { return q.data() + offset(path, node); }
    double* p_ptr(int path, int node) { return p.data() + offset(path, node); }
    double* q_ptr(int path, int node) { return q.data() + offset(path, node); }

    Eigen::Map<const Vec> p_flat(int path, int node) const {
        return Eigen::Map<const Vec>(p_ptr(path, node), static_cast<Eigen::Index>(coeff_count));
    }
    Eigen::Map<const Vec> q_flat(int path, int node) const {
        return Eigen::Map<const Vec>(q_ptr(path, node), static_cast<Eigen::Index>(coeff_count));
    }

    void p_form(int path, int node, MultilinearForm& out) const {
        out.ensure_shape(order, state_dim);
        const double* s = p_ptr(path, node);
        for (std::size_t k = 0; k < coeff_count; ++k) out[k] = s[k];
    }
    void q_form(int path, int node, MultilinearForm& out) const {
        out.ensure_shape(order, state_dim);
        const double* s = q_ptr(path, node);
        for (std::size_t k = 0; k < coeff_count; ++k) out[k] = s[k];
    }
    MultilinearForm p_form(int path, int node) const {
        MultilinearForm f(order, state_dim);
        p_form(path, node, f);
        return f;
    }
    MultilinearForm q_form(int path, int node) const {
        MultilinearForm f(order, state_dim);
        q_form(path, node, f);
        return f;
    }

    static AdjointSolution zeroed(int order, int state_dim, const TimeGrid& grid, bool per_path,
                                  int path_count) {
        AdjointSolution s;
        s.order = order;
        s.state_dim = state_dim;
        s.grid = grid;
        s.per_path = per_path;
        s.path_count = per_path ? path_count : 1;
        s.coeff_count = static_cast<std::size_t>(detail::int_pow(state_dim, order));
        const std::size_t total =
            (per_path ? static_cast<std::size_t>(path_count) : std::size_t{1}) *
            static_cast<std::size_t>(grid.node_count()) * s.coeff_count;
        s.p.assign(total, 0.0);
        s.q.assign(total, 0.0);
        return s;
    }
};

struct StochasticCoefficientsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Cross-path variance check on everything the backward equations of orders
/// 1..max_order consume: the coefficient derivative tensors along the base
/// pair and the terminal cost derivatives. Deterministic states pass
/// trivially; random states still pass when the tensors are constant (linear
/// dynamics with constant Jacobians and a linear or quadratic-free terminal).
inline bool adjoint_coefficients_deterministic(const ControlProblem& pb, const PathEnsemble& paths,
                                               const ControlPolicy& base, int max_order,
                                               double tol = 1e-10) {
    if (states_are_deterministic(paths)) return true;
    CoeffRequest req;
    req.deriv_order = max_order;
    req.delta_order = -1;
    req.values = false;

    const int probes = std::min(paths.path_count, 6);
    const int n = pb.state_dim;
    NodeCoeffs ref, cur;
    Vec x(n);
    auto fill_for = [&](NodeCoeffs& c, int p, int i) {
        for (int k = 0; k < n; ++k) x[k] = paths.state_ptr(p, i)[k];
        c.fill(pb, paths.grid.node(i), x, base(paths.grid.node(i)), nullptr, req);
    };
    auto map_gap = [](const MultilinearMap& a, const MultilinearMap& b) { return (a - b).norm(); };

    for (int i = 0; i <= paths.grid.steps; ++i) {
        fill_for(ref, 0, i);
        for (int p = 1; p < probes; ++p) {
            fill_for(cur, p, i);
            double gap = map_gap(ref.b_x, cur.b_x) + map_gap(ref.sigma_x, cur.sigma_x) +
                         (ref.f_x - cur.f_x).norm();
            if (max_order >= 2)
                gap += map_gap(ref.b_xx, cur.b_xx) + map_gap(ref.sigma_xx, cur.sigma_xx) +
                       (ref.f_xx - cur.f_xx).norm();
            if (max_order >= 3)
                gap += map_gap(ref.b_xxx, cur.b_xxx) + map_gap(ref.sigma_xxx, cur.sigma_xxx) +
                       (ref.f_xxx - cur.f_xxx).norm();
            if (max_order >= 4)
                gap += map_gap(ref.b_xxxx, cur.b_xxxx) + map_gap(ref.sigma_xxxx, cur.sigma_xxxx) +
                       (ref.f_xxxx - cur.f_xxxx).norm();
            if (gap > tol) return false;
        }
    }
    Vec xT(n), xTp(n);
    for (int c = 0; c < n; ++c) xT[c] = paths.state_ptr(0, paths.grid.steps)[c];
    for (int p = 1; p < probes; ++p) {
        for (int c = 0; c < n; ++c) xTp[c] = paths.state_ptr(p, paths.grid.steps)[c];
        for (int order = 1; order <= max_order; ++order)
            if ((pb.terminal_cost.dx(order, xT) - pb.terminal_cost.dx(order, xTp)).norm() > tol)
                return false;
    }
    return true;
}

/// Backward tensor-ODE solve of the adjoint equations of orders 1..max_order
/// along a deterministic base pair: q_k vanishes and p_k obeys
/// dp/dt = -G(t, p). Steps are trapezoidal, which is exact for the zero
/// drifts of the closed-form examples and second order otherwise.
inline std::vector<AdjointSolution> solve_adjoints_deterministic(const ControlProblem& pb,
                                                                 const PathEnsemble& base_paths,
                                                                 const ControlPolicy& base,
                                                                 int max_order) {
    if (!base_paths.has_states()) throw UsageError("adjoint solver: base states missing");
    if (max_order < 1 || max_order > 4) throw UsageError("adjoint solver: order must be 1..4");
    if (!adjoint_coefficients_deterministic(pb, base_paths, base, max_order))
        throw StochasticCoefficientsError(
            "coefficients along the base pair are stochastic; use the regression solver");

    CoeffRequest req;
    req.deriv_order = max_order;
    req.delta_order = -1;
    CoefficientProvider provider(pb, base_paths, base, nullptr, req);
    std::vector<NodeCoeffs> scratch;
    const auto& table = provider.table_for(0, scratch);

    const TimeGrid& grid = base_paths.grid;
    const int n = pb.state_dim;
    const int N = grid.steps;
    const double dt = grid.dt();

    Vec xT(n);
    for (int c = 0; c < n; ++c) xT[c] = base_paths.state_ptr(0, N)[c];

    std::vector<AdjointSolution> out;
    const Vec zq = Vec::Zero(n);  // q1 == 0 throughout
    for (int order = 1; order <= max_order; ++order) {
        AdjointSolution sol = AdjointSolution::zeroed(order, n, grid, false, 1);
        const auto nk = static_cast<Eigen::Index>(sol.coeff_count);

        MultilinearForm terminal = pb.terminal_cost.dx(order, xT);
        for (std::size_t k = 0; k < sol.coeff_count; ++k) sol.p_ptr(0, N)[k] = -terminal[k];

        auto affine_at = [&](const AdjointDriftOperator& op, int node) {
            const Vec p1 = order >= 2 ? Vec(out[0].p_flat(0, node)) : Vec::Zero(n);
            if (order >= 4) {
                const Vec p2 = out[1].p_flat(0, node), q2 = out[1].q_flat(0, node);
                const Vec p3 = out[2].p_flat(0, node), q3 = out[2].q_flat(0, node);
                return op.affine(p1, zq, &p2, &q2, &p3, &q3);
            }
            if (order == 3) {
                const Vec p2 = out[1].p_flat(0, node), q2 = out[1].q_flat(0, node);
                return op.affine(p1, zq, &p2, &q2);
            }
            return op.affine(p1, zq);
        };

        AdjointDriftOperator op_i, op_next;
        op_next.build(order, table[static_cast<std::size_t>(N)]);
        Vec p_next = sol.p_flat(0, N);
        Vec c_next = affine_at(op_next, N);
        const Mat eye = Mat::Identity(nk, nk);

        for (int i = N - 1; i >= 0; --i) {
            op_i.build(order, table[static_cast<std::size_t>(i)]);
            const Vec c_i = affine_at(op_i, i);
            const Vec rhs = p_next + 0.5 * dt * (op_next.A * p_next + c_next + c_i);
            const Vec p_i = (eye - 0.5 * dt * op_i.A).partialPivLu().solve(rhs);
            double* dst = sol.p_ptr(0, i);
            for (Eigen::Index k = 0; k < nk; ++k) dst[k] = p_i[k];
            p_next = p_i;
            std::swap(op_next, op_i);
            c_next = c_i;
        }
        out.push_back(std::move(sol));
    }
    return out;
}

inline AdjointSolution solve_adjoint_deterministic(const ControlProblem& pb, const PathEnsemble& base_paths,
                                                   const ControlPolicy& base, int order) {
    auto all = solve_adjoints_deterministic(pb, base_paths, base, order);
    return std::move(all[static_cast<std::size_t>(order - 1)]);
}

struct RegressionOptions {
    int basis_degree = 2;  // polynomial degree of the state basis
    double rcond = 1e-10;  // singular values below rcond * s_max are dropped
};

namespace detail {

inline int basis_size(int n, int degree) {
    int f = 1;
    if (degree >= 1) f += n;
    if (degree >= 2) f += n * (n + 1) / 2;
    return f;
}

inline void fill_basis_row(double* row, const double* x, int n, int degree) {
    int c = 0;
    row[c++] = 1.0;
    if (degree >= 1)
        for (int a = 0; a < n; ++a) row[c++] = x[a];
    if (degree >= 2)
        for (int a = 0; a < n; ++a)
            for (int b = a; b < n; ++b) row[c++] = x[a] * x[b];
}

}  // namespace detail

/// Least-squares Monte Carlo backward induction for the adjoint pairs of
/// orders 1..max_order: on each backward step, q_k(t_i) is the regression of
/// p_k(t_{i+1}) dW_i / dt on state monomials at t_i, and p_k(t_i) the
/// regression of p_k(t_{i+1}) plus the trapezoidal drift. All orders advance
/// together so lower-order values are available to the couplings. Solutions
/// carry fitted values per path plus condition numbers and q-fit residuals.
inline std::vector<AdjointSolution> solve_adjoints_regression(const ControlProblem& pb,
                                                              const PathEnsemble& base_paths,
                                                              const ControlPolicy& base, int max_order,
                                                              const RegressionOptions& opt = {}) {
    if (!base_paths.has_states()) throw UsageError("adjoint solver: base states missing");
    if (max_order < 1 || max_order > 4) throw UsageError("adjoint solver: order must be 1..4");

    const TimeGrid& grid = base_paths.grid;
    const int n = pb.state_dim;
    const int N = grid.steps;
    const int M = base_paths.path_count;
    const double dt = grid.dt();
    const int F = detail::basis_size(n, opt.basis_degree);
    if (M < 2 * F) throw UsageError("regression solver: insufficient paths for the basis");

    std::vector<Vec> controls;
    for (int i = 0; i <= N; ++i) controls.push_back(base(grid.node(i)));

    const bool shared_coeffs = states_are_deterministic(base_paths);
    CoeffRequest req;
    req.deriv_order = max_order;
    req.delta_order = -1;

    // Coefficient tables and drift operators per node. When the base pair is
    // stochastic they are rebuilt per (path, node) in the sweep below.
    std::vector<std::vector<AdjointDriftOperator>> shared_ops(
        static_cast<std::size_t>(max_order));
    if (shared_coeffs) {
        NodeCoeffs c;
        Vec x(n);
        for (int order = 1; order <= max_order; ++order)
            shared_ops[static_cast<std::size_t>(order - 1)].resize(static_cast<std::size_t>(N + 1));
        for (int i = 0; i <= N; ++i) {
            for (int cidx = 0; cidx < n; ++cidx) x[cidx] = base_paths.state_ptr(0, i)[cidx];
            c.fill(pb, grid.node(i), x, controls[static_cast<std::size_t>(i)], nullptr, req);
            for (int order = 1; order <= max_order; ++order)
                shared_ops[static_cast<std::size_t>(order - 1)][static_cast<std::size_t>(i)].build(order, c);
        }
    }

    std::vector<AdjointSolution> out;
    for (int order = 1; order <= max_order; ++order) {
        AdjointSolution sol = AdjointSolution::zeroed(order, n, grid, true, M);
        sol.condition_numbers.assign(static_cast<std::size_t>(N), 0.0);
        sol.q_fit_rms.assign(static_cast<std::size_t>(N), 0.0);
        Vec x(n);
        for (int p = 0; p < M; ++p) {
            for (int c = 0; c < n; ++c) x[c] = base_paths.state_ptr(p, N)[c];
            MultilinearForm terminal = pb.terminal_cost.dx(order, x);
            double* dst = sol.p_ptr(p, N);
            for (std::size_t k = 0; k < sol.coeff_count; ++k) dst[k] = -terminal[k];
        }
        out.push_back(std::move(sol));
    }

    Mat X(M, F);
    std::vector<double> brow(static_cast<std::size_t>(F));
    NodeCoeffs scratch_coeffs;
    std::vector<AdjointDriftOperator> scratch_ops(static_cast<std::size_t>(max_order));
    Vec xv(n);

    // Stochastic-coefficient case: rebuild the operators for one (path, node).
    auto ops_for = [&](int path, int node) -> const std::vector<AdjointDriftOperator>& {
        for (int c = 0; c < n; ++c) xv[c] = base_paths.state_ptr(path, node)[c];
        scratch_coeffs.fill(pb, grid.node(node), xv, controls[static_cast<std::size_t>(node)], nullptr,
                            req);
        for (int order = 1; order <= max_order; ++order)
            scratch_ops[static_cast<std::size_t>(order - 1)].build(order, scratch_coeffs);
        return scratch_ops;
    };

    for (int i = N - 1; i >= 0; --i) {
        for (int p = 0; p < M; ++p) {
            detail::fill_basis_row(brow.data(), base_paths.state_ptr(p, i), n, opt.basis_degree);
            for (int c = 0; c < F; ++c) X(p, c) = brow[static_cast<std::size_t>(c)];
        }
        Eigen::BDCSVD<Mat> svd(X, Eigen::ComputeThinU | Eigen::ComputeThinV);
        svd.setThreshold(opt.rcond);
        const double smax = svd.singularValues()(0);
        const double smin = svd.singularValues()(svd.singularValues().size() - 1);
        const double cond = smin > 0.0 ? smax / smin : std::numeric_limits<double>::infinity();

        for (int order = 1; order <= max_order; ++order) {
            AdjointSolution& sol = out[static_cast<std::size_t>(order - 1)];
            sol.condition_numbers[static_cast<std::size_t>(i)] = cond;
            const auto nk = static_cast<Eigen::Index>(sol.coeff_count);
            Mat targets(M, nk);

            // q regression.
            for (int p = 0; p < M; ++p) {
                const double w = base_paths.dw(p, i) / dt;
                const double* pn = sol.p_ptr(p, i + 1);
                for (Eigen::Index k = 0; k < nk; ++k) targets(p, k) = pn[k] * w;
            }
            Mat q_fit = X * Mat(svd.solve(targets));
            sol.q_fit_rms[static_cast<std::size_t>(i)] =
                std::sqrt((targets - q_fit).squaredNorm() / (static_cast<double>(M) * nk));
            for (int p = 0; p < M; ++p) {
                double* dst = sol.q_ptr(p, i);
                for (Eigen::Index k = 0; k < nk; ++k) dst[k] = q_fit(p, k);
            }

            // p targets: p_{i+1} + dt/2 G(t_{i+1}).
            for (int p = 0; p < M; ++p) {
                const AdjointDriftOperator& op =
                    shared_coeffs ? shared_ops[static_cast<std::size_t>(order - 1)][static_cast<std::size_t>(i + 1)]
                                  : ops_for(p, i + 1)[static_cast<std::size_t>(order - 1)];
                const Vec p1 = out[0].p_flat(p, i + 1), q1 = out[0].q_flat(p, i + 1);
                Vec g;
                if (order >= 4) {
                    const Vec p2 = out[1].p_flat(p, i + 1), q2 = out[1].q_flat(p, i + 1);
                    const Vec p3 = out[2].p_flat(p, i + 1), q3 = out[2].q_flat(p, i + 1);
                    g = op.affine(p1, q1, &p2, &q2, &p3, &q3);
                } else if (order == 3) {
                    const Vec p2 = out[1].p_flat(p, i + 1), q2 = out[1].q_flat(p, i + 1);
                    g = op.affine(p1, q1, &p2, &q2);
                } else {
                    g = op.affine(p1, q1);
                }
                g += op.A * sol.p_flat(p, i + 1);
                // q at t_{i+1}: previous fit, or the t_i fit on the last interval.
                g += op.B * sol.q_flat(p, i + 1 <= N - 1 ? i + 1 : i);
                targets.row(p) = (sol.p_flat(p, i + 1) + 0.5 * dt * g).transpose();
            }
            Mat p_proj = X * Mat(svd.solve(targets));

            // Implicit half step at t_i per path.
            const Mat eye = Mat::Identity(nk, nk);
            for (int p = 0; p < M; ++p) {
                const AdjointDriftOperator& op =
                    shared_coeffs ? shared_ops[static_cast<std::size_t>(order - 1)][static_cast<std::size_t>(i)]
                                  : ops_for(p, i)[static_cast<std::size_t>(order - 1)];
                const Vec p1 = out[0].p_flat(p, i), q1 = out[0].q_flat(p, i);
                Vec g;
                if (order >= 4) {
                    const Vec p2 = out[1].p_flat(p, i), q2 = out[1].q_flat(p, i);
                    const Vec p3 = out[2].p_flat(p, i), q3 = out[2].q_flat(p, i);
                    g = op.affine(p1, q1, &p2, &q2, &p3, &q3);
                } else if (order == 3) {
                    const Vec p2 = out[1].p_flat(p, i), q2 = out[1].q_flat(p, i);
                    g = op.affine(p1, q1, &p2, &q2);
                } else {
                    g = op.affine(p1, q1);
                }
                g += op.B * out[static_cast<std::size_t>(order - 1)].q_flat(p, i);
                const Vec rhs = p_proj.row(p).transpose() + 0.5 * dt * g;
                const Vec p_i = (eye - 0.5 * dt * op.A).partialPivLu().solve(rhs);
                double* dst = out[static_cast<std::size_t>(order - 1)].p_ptr(p, i);
                for (Eigen::Index k = 0; k < nk; ++k) dst[k] = p_i[k];
            }
        }
    }
    return out;
}

inline AdjointSolution solve_adjoint_regression(const ControlProblem& pb, const PathEnsemble& base_paths,
                                                const ControlPolicy& base, int order,
                                                const RegressionOptions& opt = {}) {
    auto all = solve_adjoints_regression(pb, base_paths, base, order, opt);
    return std::move(all[static_cast<std::size_t>(order - 1)]);
}

// ---------------------------------------------------------------------------
// Fundamental solution of the linearized state equation.
// ---------------------------------------------------------------------------

/// Per-path matrices Phi(t) with Phi(0) = I, integrated forward by Euler,
/// and their inverses computed by direct inversion node by node.
struct FundamentalSolution {
    TimeGrid grid;
    int state_dim = 1;
    int path_count = 0;
    std::vector<double> phi;      // M * (N+1) * n * n, column-major blocks
    std::vector<double> phi_inv;  // same layout

    std::size_t offset(int path, int node) const {
        return (static_cast<std::size_t>(path) * grid.node_count() + node) *
               static_cast<std::size_t>(state_dim) * state_dim;
    }
    Eigen::Map<const Mat> phi_at(int path, int node) const {
        return Eigen::Map<const Mat>(phi.data() + offset(path, node), state_dim, state_dim);
    }
    Eigen::Map<const Mat> phi_inv_at(int path, int node) const {
        return Eigen::Map<const Mat>(phi_inv.data() + offset(path, node), state_dim, state_dim);
    }
};

struct SingularFundamentalSolution : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline FundamentalSolution fundamental_solution(const ControlProblem& pb, const PathEnsemble& base_paths,
                                                const ControlPolicy& base,
                                                double invertibility_tol = 1e-12) {
    if (!base_paths.has_states()) throw UsageError("fundamental_solution: base states missing");
    const TimeGrid& grid = base_paths.grid;
    const int n = pb.state_dim;
    const int N = grid.steps;
    const double dt = grid.dt();

    std::vector<Vec> controls;
    for (int i = 0; i <= N; ++i) controls.push_back(base(grid.node(i)));

    FundamentalSolution out;
    out.grid = grid;
    out.state_dim = n;
    out.path_count = base_paths.path_count;
    out.phi.assign(static_cast<std::size_t>(base_paths.path_count) * grid.node_count() * n * n, 0.0);
    out.phi_inv = out.phi;

    parallel_for_blocks(base_paths.path_count, [&](int, int begin, int end) {
        Vec x(n);
        MultilinearMap bx(1, n), sx(1, n);
        Mat Phi(n, n);
        for (int p = begin; p < end; ++p) {
            Phi = Mat::Identity(n, n);
            for (int i = 0; i <= N; ++i) {
                Eigen::Map<Mat>(out.phi.data() + out.offset(p, i), n, n) = Phi;
                Eigen::FullPivLU<Mat> lu(Phi);
                if (!lu.isInvertible() || std::abs(lu.determinant()) < invertibility_tol)
                    throw SingularFundamentalSolution("fundamental solution singular at path " +
                                                      std::to_string(p) + ", node " + std::to_string(i));
                Eigen::Map<Mat>(out.phi_inv.data() + out.offset(p, i), n, n) = lu.inverse();
                if (i == N) break;
                for (int c = 0; c < n; ++c) x[c] = base_paths.state_ptr(p, i)[c];
                pb.drift.deriv[0](grid.node(i), x, controls[static_cast<std::size_t>(i)], bx);
                pb.diffusion.deriv[0](grid.node(i), x, controls[static_cast<std::size_t>(i)], sx);
                Phi += (bx.as_matrix() * Phi) * dt + (sx.as_matrix() * Phi) * base_paths.dw(p, i);
            }
        }
    });
    return out;
}

/// Explicit representation of the first variational solution through the
/// fundamental solution: y1(t) = -Phi(t) int Phi^-1 sigma_x delta_sigma chi ds
/// + Phi(t) int Phi^-1 delta_sigma chi dW, discretized with left endpoints.
inline std::vector<double> y1_from_fundamental(const ControlProblem& pb, const PathEnsemble& base_paths,
                                               const ControlPolicy& base, const Spike& spike,
                                               const FundamentalSolution& fs) {
    const TimeGrid& grid = base_paths.grid;
    const int n = pb.state_dim;
    const int N = grid.steps;
    const double dt = grid.dt();
    const auto [c0, c1] = spike.cell_range(grid);

    CoeffRequest req;
    req.deriv_order = 1;
    req.delta_order = 0;
    CoefficientProvider provider(pb, base_paths, base, &spike.value, req);

    std::vector<double> out(static_cast<std::size_t>(base_paths.path_count) * grid.node_count() * n, 0.0);
    parallel_for_blocks(base_paths.path_count, [&](int, int begin, int end) {
        std::vector<NodeCoeffs> scratch;
        Vec acc_ds(n), acc_dw(n), y(n);
        for (int p = begin; p < end; ++p) {
            const auto& table = provider.table_for(p, scratch);
            acc_ds.setZero();
            acc_dw.setZero();
            for (int i = 0; i <= N; ++i) {
                y = fs.phi_at(p, i) * (acc_dw - acc_ds);
                double* dst = out.data() + (static_cast<std::size_t>(p) * grid.node_count() + i) * n;
                for (int c = 0; c < n; ++c) dst[c] = y[c];
                if (i == N) break;
                if (i >= c0 && i < c1) {
                    const NodeCoeffs& nc = table[static_cast<std::size_t>(i)];
                    acc_ds += (fs.phi_inv_at(p, i) * (nc.sigma_x.as_matrix() * nc.delta_sigma)) * dt;
                    acc_dw += (fs.phi_inv_at(p, i) * nc.delta_sigma) * base_paths.dw(p, i);
                }
            }
        }
    });
    return out;
}

}  // namespace needlecheck
