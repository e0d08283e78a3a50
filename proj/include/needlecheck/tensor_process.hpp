#pragma once

#include "needlecheck/multilinear.hpp"
#include "needlecheck/path_ensemble.hpp"
#include "needlecheck/stats.hpp"

#include <stdexcept>
#include <vector>

namespace needlecheck {

/// Multilinear-form-valued process sampled on a grid, optionally per path.
struct TensorProcess {
    TimeGrid grid;
    int arity = 0;
    int dim = 1;
    bool per_path = false;
    int path_count = 1;
    std::vector<MultilinearForm> values;  // [node] or [path * nodes + node]

    static TensorProcess constant(const TimeGrid& grid, const MultilinearForm& f) {
        TensorProcess p;
        p.grid = grid;
        p.arity = f.arity();
        p.dim = f.dim();
        p.values.assign(static_cast<std::size_t>(grid.node_count()), f);
        return p;
    }

    static TensorProcess empty(const TimeGrid& grid, int arity, int dim, int paths) {
        TensorProcess p;
        p.grid = grid;
        p.arity = arity;
        p.dim = dim;
        p.per_path = paths > 1;
        p.path_count = paths;
        p.values.assign(static_cast<std::size_t>(grid.node_count()) * paths,
                        MultilinearForm(arity, dim));
        return p;
    }

    const MultilinearForm& at(int path, int node) const {
        return per_path ? values[static_cast<std::size_t>(path) * grid.node_count() + node]
                        : values[static_cast<std::size_t>(node)];
    }
    MultilinearForm& at(int path, int node) {
        return per_path ? values[static_cast<std::size_t>(path) * grid.node_count() + node]
                        : values[static_cast<std::size_t>(node)];
    }
};

/// Vector-valued process sampled on a grid, optionally per path.
struct VectorProcess {
    TimeGrid grid;
    int dim = 1;
    bool per_path = false;
    int path_count = 1;
    std::vector<Vec> values;

    static VectorProcess constant(const TimeGrid& grid, const Vec& v) {
        VectorProcess p;
        p.grid = grid;
        p.dim = static_cast<int>(v.size());
        p.values.assign(static_cast<std::size_t>(grid.node_count()), v);
        return p;
    }

    static VectorProcess empty(const TimeGrid& grid, int dim, int paths) {
        VectorProcess p;
        p.grid = grid;
        p.dim = dim;
        p.per_path = paths > 1;
        p.path_count = paths;
        p.values.assign(static_cast<std::size_t>(grid.node_count()) * paths, Vec::Zero(dim));
        return p;
    }

    const Vec& at(int path, int node) const {
        return per_path ? values[static_cast<std::size_t>(path) * grid.node_count() + node]
                        : values[static_cast<std::size_t>(node)];
    }
    Vec& at(int path, int node) {
        return per_path ? values[static_cast<std::size_t>(path) * grid.node_count() + node]
                        : values[static_cast<std::size_t>(node)];
    }
};

struct ItoResidualStats {
    double mean_abs = 0.0;
    double std_error = 0.0;
    int paths = 0;
};

/// Discrete residual of the multilinear Ito formula: both sides of
///   P(T)(x,...,x) - P(0)(x0,...,x0)
///     = int [ sum_i P(x,..,f@i,..,x) + A(x,..,x) + sum_i B(x,..,g@i,..,x)
///             + sum_{i<j} P(x,..,g@i,..,g@j,..,x) ] dt
///       + int [ B(x,..,x) + sum_i P(x,..,g@i,..,x) ] dW
/// are evaluated with left-endpoint sums and the mean absolute gap is
/// returned. A and B are the drift and diffusion of P; f and g those of x.
inline ItoResidualStats multilinear_ito_residual(const TensorProcess& P, const TensorProcess& A,
                                                 const TensorProcess& B, const PathEnsemble& paths,
                                                 const VectorProcess& f, const VectorProcess& g) {
    const int d = P.arity;
    const int n = P.dim;
    if (A.arity != d || B.arity != d || A.dim != n || B.dim != n)
        throw std::invalid_argument("ito residual: tensor arity/dim mismatch");
    if (!paths.has_states() || paths.state_dim != n)
        throw std::invalid_argument("ito residual: states missing or dim mismatch");
    if (f.dim != n || g.dim != n) throw std::invalid_argument("ito residual: integrand dim mismatch");
    if (P.grid != paths.grid || A.grid != paths.grid || B.grid != paths.grid)
        throw std::invalid_argument("ito residual: grid mismatch");

    const int N = paths.grid.steps;
    const double dt = paths.grid.dt();
    std::vector<double> residuals(static_cast<std::size_t>(paths.path_count));

    std::vector<const Vec*> args(static_cast<std::size_t>(d));
    Vec x(n), xT(n), x0v(n);
    for (int p = 0; p < paths.path_count; ++p) {
        for (int k = 0; k < n; ++k) x0v[k] = paths.state_ptr(p, 0)[k];
        for (int k = 0; k < n; ++k) xT[k] = paths.state_ptr(p, N)[k];
        std::vector<const Vec*> lhs_args(static_cast<std::size_t>(d), &xT);
        std::vector<const Vec*> lhs0(static_cast<std::size_t>(d), &x0v);
        const double lhs = P.at(p, N).eval(lhs_args.data(), d) - P.at(p, 0).eval(lhs0.data(), d);

        double rhs = 0.0;
        for (int i = 0; i < N; ++i) {
            for (int k = 0; k < n; ++k) x[k] = paths.state_ptr(p, i)[k];
            const Vec& fi = f.at(p, i);
            const Vec& gi = g.at(p, i);
            const MultilinearForm& Pi = P.at(p, i);
            const MultilinearForm& Ai = A.at(p, i);
            const MultilinearForm& Bi = B.at(p, i);

            for (int s = 0; s < d; ++s) args[static_cast<std::size_t>(s)] = &x;
            double drift = Ai.eval(args.data(), d);
            for (int s = 0; s < d; ++s) {
                args[static_cast<std::size_t>(s)] = &fi;
                drift += Pi.eval(args.data(), d);
                args[static_cast<std::size_t>(s)] = &gi;
                drift += Bi.eval(args.data(), d);
                args[static_cast<std::size_t>(s)] = &x;
            }
            for (int s = 0; s < d; ++s) {
                for (int r = s + 1; r < d; ++r) {
                    args[static_cast<std::size_t>(s)] = &gi;
                    args[static_cast<std::size_t>(r)] = &gi;
                    drift += Pi.eval(args.data(), d);
                    args[static_cast<std::size_t>(s)] = &x;
                    args[static_cast<std::size_t>(r)] = &x;
                }
            }

            double diff = Bi.eval(args.data(), d);
            for (int s = 0; s < d; ++s) {
                args[static_cast<std::size_t>(s)] = &gi;
                diff += Pi.eval(args.data(), d);
                args[static_cast<std::size_t>(s)] = &x;
            }

            rhs += drift * dt + diff * paths.dw(p, i);
        }
        residuals[static_cast<std::size_t>(p)] = std::abs(lhs - rhs);
    }

    MeanEstimate m = mean_with_error(residuals);
    return ItoResidualStats{m.mean, m.std_error, paths.path_count};
}

}  // namespace needlecheck
