#pragma once

#include "needlecheck/multilinear.hpp"

#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace needlecheck {

struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

struct CapabilityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// R^n-valued coefficient (t, x, u) with x-derivatives up to order 4.
/// deriv[k-1] fills a (k)-linear map; callers pass a map already sized
/// (arity k, dim n).
struct VectorField {
    std::function<void(double, const Vec&, const Vec&, Vec&)> value;
    std::array<std::function<void(double, const Vec&, const Vec&, MultilinearMap&)>, 4> deriv;

    Vec operator()(double t, const Vec& x, const Vec& u) const {
        Vec out(x.size());
        value(t, x, u, out);
        return out;
    }
    MultilinearMap dx(int order, double t, const Vec& x, const Vec& u) const {
        MultilinearMap m(order, static_cast<int>(x.size()));
        deriv[static_cast<std::size_t>(order - 1)](t, x, u, m);
        return m;
    }
    bool has_order(int order) const {
        return order >= 1 && order <= 4 && static_cast<bool>(deriv[static_cast<std::size_t>(order - 1)]);
    }
};

/// Scalar coefficient (t, x, u) with x-derivatives up to order 4 (forms).
struct ScalarField {
    std::function<double(double, const Vec&, const Vec&)> value;
    std::array<std::function<void(double, const Vec&, const Vec&, MultilinearForm&)>, 4> deriv;

    double operator()(double t, const Vec& x, const Vec& u) const { return value(t, x, u); }
    MultilinearForm dx(int order, double t, const Vec& x, const Vec& u) const {
        MultilinearForm f(order, static_cast<int>(x.size()));
        deriv[static_cast<std::size_t>(order - 1)](t, x, u, f);
        return f;
    }
};

/// Terminal cost h(x) with derivatives up to order 4.
struct TerminalCost {
    std::function<double(const Vec&)> value;
    std::array<std::function<void(const Vec&, MultilinearForm&)>, 4> deriv;

    double operator()(const Vec& x) const { return value(x); }
    MultilinearForm dx(int order, const Vec& x) const {
        MultilinearForm f(order, static_cast<int>(x.size()));
        deriv[static_cast<std::size_t>(order - 1)](x, f);
        return f;
    }
};

/// Either a finite list of control points, or a membership predicate plus a
/// finite probe set V. Tests and reports only ever touch the probe list.
struct ControlSet {
    std::vector<Vec> points;                    // finite control set (may be empty)
    std::function<bool(const Vec&)> contains_fn;  // optional predicate
    std::vector<Vec> probe_set;                 // V; defaults to points when empty

    const std::vector<Vec>& probes() const { return probe_set.empty() ? points : probe_set; }

    bool contains(const Vec& u, double tol = 1e-12) const {
        if (contains_fn) return contains_fn(u);
        for (const auto& p : points)
            if ((p - u).lpNorm<Eigen::Infinity>() <= tol) return true;
        return false;
    }
};

/// Optional u-derivatives, needed only by the classical-singularity check.
struct ControlDerivatives {
    // b_u, sigma_u: n x m; entry (i, a) = d coeff_i / d u_a.
    std::function<Mat(double, const Vec&, const Vec&)> drift_du;
    std::function<Mat(double, const Vec&, const Vec&)> diffusion_du;
    // b_uu, sigma_uu: component i is an m x m Hessian in u.
    std::function<std::vector<Mat>(double, const Vec&, const Vec&)> drift_duu;
    std::function<std::vector<Mat>(double, const Vec&, const Vec&)> diffusion_duu;
    std::function<Vec(double, const Vec&, const Vec&)> running_cost_du;
    std::function<Mat(double, const Vec&, const Vec&)> running_cost_duu;

    bool complete() const {
        return drift_du && diffusion_du && drift_duu && diffusion_duu && running_cost_du &&
               running_cost_duu;
    }
};

struct ControlProblem {
    std::string name;
    int state_dim = 1;
    int control_dim = 1;
    double horizon = 1.0;
    Vec x0;

    VectorField drift;      // b
    VectorField diffusion;  // sigma (single Wiener driver)
    ScalarField running_cost;  // f
    TerminalCost terminal_cost;  // h
    ControlSet control_set;

    std::optional<ControlDerivatives> control_derivs;

    /// Closed-form Malliavin derivative of S(t, xbar(t), v), when the user can
    /// supply one. Signature: (t, x, v) -> vector in R^n.
    std::function<Vec(double, const Vec&, const Vec&)> grad_s;

    double divergence_guard = 1e6;  // |x|_inf beyond which a path is frozen
};

struct ValidationReport {
    bool shapes_ok = true;
    bool lipschitz_ok = true;
    double max_lipschitz_quotient = 0.0;
    std::vector<std::string> messages;

    bool ok() const { return shapes_ok && lipschitz_ok; }
};

/// Soft sanity checks: derivative callables produce the declared shapes on
/// random probes, and the sampled Lipschitz quotient of b, sigma stays below
/// the given bound.
inline ValidationReport validate_problem(const ControlProblem& pb, double lipschitz_bound,
                                         std::uint64_t seed = 1234, int probe_count = 32) {
    ValidationReport rep;
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif_t(0.0, pb.horizon);

    const auto& probes = pb.control_set.probes();
    if (probes.empty()) {
        rep.shapes_ok = false;
        rep.messages.push_back("control set has no probe points");
        return rep;
    }

    auto random_x = [&] {
        Vec x(pb.state_dim);
        for (int i = 0; i < pb.state_dim; ++i) x[i] = normal(eng);
        return x;
    };

    for (int k = 0; k < probe_count; ++k) {
        const double t = unif_t(eng);
        const Vec x = random_x();
        const Vec& u = probes[static_cast<std::size_t>(eng() % probes.size())];

        try {
            Vec b = pb.drift(t, x, u);
            Vec s = pb.diffusion(t, x, u);
            if (b.size() != pb.state_dim || s.size() != pb.state_dim) {
                rep.shapes_ok = false;
                rep.messages.push_back("drift/diffusion value has wrong dimension");
            }
            for (int order = 1; order <= 4; ++order) {
                MultilinearMap mb = pb.drift.dx(order, t, x, u);
                MultilinearMap ms = pb.diffusion.dx(order, t, x, u);
                MultilinearForm ff = pb.running_cost.dx(order, t, x, u);
                MultilinearForm fh = pb.terminal_cost.dx(order, x);
                if (mb.arity() != order || ms.arity() != order || ff.arity() != order ||
                    fh.arity() != order || mb.dim() != pb.state_dim) {
                    rep.shapes_ok = false;
                    rep.messages.push_back("derivative of order " + std::to_string(order) +
                                           " has wrong shape");
                }
            }
        } catch (const std::exception& e) {
            rep.shapes_ok = false;
            rep.messages.push_back(std::string("derivative callable failed: ") + e.what());
            return rep;
        }

        // Lipschitz probe in x.
        const Vec x2 = x + 0.5 * random_x();
        const double dx = (x2 - x).norm();
        if (dx > 1e-12) {
            const double qb = (pb.drift(t, x2, u) - pb.drift(t, x, u)).norm() / dx;
            const double qs = (pb.diffusion(t, x2, u) - pb.diffusion(t, x, u)).norm() / dx;
            rep.max_lipschitz_quotient = std::max({rep.max_lipschitz_quotient, qb, qs});
        }
    }
    if (rep.max_lipschitz_quotient > lipschitz_bound) {
        rep.lipschitz_ok = false;
        rep.messages.push_back("sampled Lipschitz quotient " +
                               std::to_string(rep.max_lipschitz_quotient) + " exceeds bound " +
                               std::to_string(lipschitz_bound));
    }
    return rep;
}

}  // namespace needlecheck
