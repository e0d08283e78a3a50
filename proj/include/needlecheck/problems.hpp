#pragma once

#include "needlecheck/control_policy.hpp"
#include "needlecheck/control_problem.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace needlecheck {

/// A registered problem together with its candidate base control.
struct ProblemBundle {
    ControlProblem problem;
    ControlPolicy base_policy;
    std::string description;
};

using ParamMap = std::map<std::string, double>;

namespace detail {

inline double take_param(ParamMap& params, const std::string& key, double fallback) {
    auto it = params.find(key);
    if (it == params.end()) return fallback;
    const double v = it->second;
    params.erase(it);
    return v;
}

inline void reject_leftovers(const ParamMap& params, const std::string& id) {
    if (params.empty()) return;
    std::string msg = "unknown parameter(s) for problem '" + id + "':";
    for (const auto& [k, _] : params) msg += " " + k;
    throw UsageError(msg);
}

inline std::vector<Vec> scalar_points(std::initializer_list<double> vals) {
    std::vector<Vec> pts;
    for (double v : vals) {
        Vec u(1);
        u[0] = v;
        pts.push_back(u);
    }
    return pts;
}

inline void zero_map(double, const Vec&, const Vec&, MultilinearMap& m) {
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = 0.0;
}
inline void zero_form(double, const Vec&, const Vec&, MultilinearForm& f) { f.set_zero(); }
inline void zero_tform(const Vec&, MultilinearForm& f) { f.set_zero(); }

}  // namespace detail

/// dx = b(x) u dt + u dW on [0,1], x(0) = 0, U = {-1, 0, 1},
/// J = 1/2 E int u^2 dt - 1/2 E x(1)^2, with b(x) = level cos x + slope sin x
/// so that b(0) = level and b_x(0) = slope. The base control is u = 0, which
/// is singular but fails the second-order test when level^2 + slope > 0.
inline ProblemBundle make_example1(ParamMap params = {}) {
    const double level = detail::take_param(params, "level", 1.0);
    const double slope = detail::take_param(params, "slope", 1.0);
    detail::reject_leftovers(params, "example1");

    auto bfun = [level, slope](double x) { return level * std::cos(x) + slope * std::sin(x); };
    // Derivatives of b cycle with period 4.
    auto bder = [level, slope](int order, double x) {
        switch (order % 4) {
            case 1: return -level * std::sin(x) + slope * std::cos(x);
            case 2: return -level * std::cos(x) - slope * std::sin(x);
            case 3: return level * std::sin(x) - slope * std::cos(x);
            default: return level * std::cos(x) + slope * std::sin(x);
        }
    };

    ControlProblem pb;
    pb.name = "example1";
    pb.state_dim = 1;
    pb.control_dim = 1;
    pb.horizon = 1.0;
    pb.x0 = Vec::Zero(1);

    pb.drift.value = [bfun](double, const Vec& x, const Vec& u, Vec& out) {
        out[0] = bfun(x[0]) * u[0];
    };
    for (int k = 1; k <= 4; ++k)
        pb.drift.deriv[static_cast<std::size_t>(k - 1)] =
            [bder, k](double, const Vec& x, const Vec& u, MultilinearMap& m) {
                m[0] = bder(k, x[0]) * u[0];
            };

    pb.diffusion.value = [](double, const Vec&, const Vec& u, Vec& out) { out[0] = u[0]; };
    for (int k = 1; k <= 4; ++k) pb.diffusion.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.running_cost.value = [](double, const Vec&, const Vec& u) { return 0.5 * u[0] * u[0]; };
    for (int k = 1; k <= 4; ++k)
        pb.running_cost.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_form;

    pb.terminal_cost.value = [](const Vec& x) { return -0.5 * x[0] * x[0]; };
    pb.terminal_cost.deriv[0] = [](const Vec& x, MultilinearForm& f) { f[0] = -x[0]; };
    pb.terminal_cost.deriv[1] = [](const Vec&, MultilinearForm& f) { f[0] = -1.0; };
    pb.terminal_cost.deriv[2] = detail::zero_tform;
    pb.terminal_cost.deriv[3] = detail::zero_tform;

    pb.control_set.points = detail::scalar_points({-1.0, 0.0, 1.0});

    ControlDerivatives cd;
    cd.drift_du = [bfun](double, const Vec& x, const Vec&) {
        Mat m(1, 1);
        m(0, 0) = bfun(x[0]);
        return m;
    };
    cd.diffusion_du = [](double, const Vec&, const Vec&) { return Mat::Ones(1, 1); };
    cd.drift_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.diffusion_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.running_cost_du = [](double, const Vec&, const Vec& u) { return Vec{u}; };
    cd.running_cost_duu = [](double, const Vec&, const Vec&) { return Mat::Ones(1, 1); };
    pb.control_derivs = cd;

    ProblemBundle bundle;
    bundle.problem = std::move(pb);
    bundle.base_policy = ControlPolicy::constant(0.0);
    bundle.description = "dx = b(x) u dt + u dW, J = 1/2 E[int u^2] - 1/2 E[x(1)^2]; "
                         "singular base control u = 0 that is not optimal";
    return bundle;
}

/// dx = (u - 1) dt + (x - u) dW on [0,1], x(0) = 1, U = {-1, 0, 1},
/// J = 1/24 E |x(1) - 1|^4. The base control u = 1 keeps x identically 1 and
/// is a singular optimal control.
inline ProblemBundle make_example2(ParamMap params = {}) {
    detail::reject_leftovers(params, "example2");

    ControlProblem pb;
    pb.name = "example2";
    pb.state_dim = 1;
    pb.control_dim = 1;
    pb.horizon = 1.0;
    pb.x0 = Vec::Ones(1);

    pb.drift.value = [](double, const Vec&, const Vec& u, Vec& out) { out[0] = u[0] - 1.0; };
    for (int k = 1; k <= 4; ++k) pb.drift.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.diffusion.value = [](double, const Vec& x, const Vec& u, Vec& out) { out[0] = x[0] - u[0]; };
    pb.diffusion.deriv[0] = [](double, const Vec&, const Vec&, MultilinearMap& m) { m[0] = 1.0; };
    for (int k = 2; k <= 4; ++k) pb.diffusion.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.running_cost.value = [](double, const Vec&, const Vec&) { return 0.0; };
    for (int k = 1; k <= 4; ++k)
        pb.running_cost.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_form;

    pb.terminal_cost.value = [](const Vec& x) {
        const double d = x[0] - 1.0;
        return d * d * d * d / 24.0;
    };
    pb.terminal_cost.deriv[0] = [](const Vec& x, MultilinearForm& f) {
        const double d = x[0] - 1.0;
        f[0] = d * d * d / 6.0;
    };
    pb.terminal_cost.deriv[1] = [](const Vec& x, MultilinearForm& f) {
        const double d = x[0] - 1.0;
        f[0] = 0.5 * d * d;
    };
    pb.terminal_cost.deriv[2] = [](const Vec& x, MultilinearForm& f) { f[0] = x[0] - 1.0; };
    pb.terminal_cost.deriv[3] = [](const Vec&, MultilinearForm& f) { f[0] = 1.0; };

    pb.control_set.points = detail::scalar_points({-1.0, 0.0, 1.0});

    ControlDerivatives cd;
    cd.drift_du = [](double, const Vec&, const Vec&) { return Mat::Ones(1, 1); };
    cd.diffusion_du = [](double, const Vec&, const Vec&) { return -Mat::Ones(1, 1); };
    cd.drift_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.diffusion_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.running_cost_du = [](double, const Vec&, const Vec&) { return Vec::Zero(1); };
    cd.running_cost_duu = [](double, const Vec&, const Vec&) { return Mat::Zero(1, 1); };
    pb.control_derivs = cd;

    ProblemBundle bundle;
    bundle.problem = std::move(pb);
    bundle.base_policy = ControlPolicy::constant(1.0);
    bundle.description = "dx = (u - 1) dt + (x - u) dW, J = 1/24 E|x(1) - 1|^4; "
                         "singular optimal base control u = 1";
    return bundle;
}

/// 1-D linear-quadratic toy: dx = (a x + g u) dt + sigma0 dW,
/// f = 1/2 (q x^2 + r u^2), h = 1/2 s x^2. With x(0) = 0 the zero control is
/// optimal among deterministic controls, so spike probes give nonnegative
/// cost differences; base_level shifts the base control to a deliberately
/// suboptimal constant.
inline ProblemBundle make_lq(ParamMap params = {}) {
    const double a = detail::take_param(params, "a", 1.0);
    const double g = detail::take_param(params, "g", 1.0);
    const double sigma0 = detail::take_param(params, "sigma0", 1.0);
    const double q = detail::take_param(params, "q", 1.0);
    const double r = detail::take_param(params, "r", 1.0);
    const double s = detail::take_param(params, "s", 1.0);
    const double x0 = detail::take_param(params, "x0", 0.0);
    const double base_level = detail::take_param(params, "base_level", 0.0);
    const double horizon = detail::take_param(params, "horizon", 1.0);
    detail::reject_leftovers(params, "lq");

    ControlProblem pb;
    pb.name = "lq";
    pb.state_dim = 1;
    pb.control_dim = 1;
    pb.horizon = horizon;
    pb.x0 = Vec::Constant(1, x0);

    pb.drift.value = [a, g](double, const Vec& x, const Vec& u, Vec& out) {
        out[0] = a * x[0] + g * u[0];
    };
    pb.drift.deriv[0] = [a](double, const Vec&, const Vec&, MultilinearMap& m) { m[0] = a; };
    for (int k = 2; k <= 4; ++k) pb.drift.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.diffusion.value = [sigma0](double, const Vec&, const Vec&, Vec& out) { out[0] = sigma0; };
    for (int k = 1; k <= 4; ++k) pb.diffusion.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.running_cost.value = [q, r](double, const Vec& x, const Vec& u) {
        return 0.5 * (q * x[0] * x[0] + r * u[0] * u[0]);
    };
    pb.running_cost.deriv[0] = [q](double, const Vec& x, const Vec&, MultilinearForm& f) {
        f[0] = q * x[0];
    };
    pb.running_cost.deriv[1] = [q](double, const Vec&, const Vec&, MultilinearForm& f) { f[0] = q; };
    pb.running_cost.deriv[2] = detail::zero_form;
    pb.running_cost.deriv[3] = detail::zero_form;

    pb.terminal_cost.value = [s](const Vec& x) { return 0.5 * s * x[0] * x[0]; };
    pb.terminal_cost.deriv[0] = [s](const Vec& x, MultilinearForm& f) { f[0] = s * x[0]; };
    pb.terminal_cost.deriv[1] = [s](const Vec&, MultilinearForm& f) { f[0] = s; };
    pb.terminal_cost.deriv[2] = detail::zero_tform;
    pb.terminal_cost.deriv[3] = detail::zero_tform;

    pb.control_set.points = detail::scalar_points({-1.0, 0.0, 1.0});
    pb.control_set.contains_fn = [](const Vec&) { return true; };
    pb.control_set.probe_set = detail::scalar_points({-1.0, 0.0, 1.0});

    ControlDerivatives cd;
    cd.drift_du = [g](double, const Vec&, const Vec&) { return Mat::Constant(1, 1, g); };
    cd.diffusion_du = [](double, const Vec&, const Vec&) { return Mat::Zero(1, 1); };
    cd.drift_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.diffusion_duu = [](double, const Vec&, const Vec&) { return std::vector<Mat>{Mat::Zero(1, 1)}; };
    cd.running_cost_du = [r](double, const Vec&, const Vec& u) { return Vec{Vec::Constant(1, r * u[0])}; };
    cd.running_cost_duu = [r](double, const Vec&, const Vec&) { return Mat::Constant(1, 1, r); };
    pb.control_derivs = cd;

    ProblemBundle bundle;
    bundle.problem = std::move(pb);
    bundle.base_policy = ControlPolicy::constant(base_level);
    bundle.description = "1-D LQ toy with additive noise; zero control optimal among "
                         "deterministic policies when x0 = 0";
    return bundle;
}

/// Linear scalar test bed for the adjoint solvers: dx = (a x + u) dt +
/// (c x + sigma0) dW, f = 0, h(x) = x. Along u = 0 the first adjoint is
/// p1(t) = -exp(a (T - t)), q1 = 0, while the state itself is random.
inline ProblemBundle make_linbsde(ParamMap params = {}) {
    const double a = detail::take_param(params, "a", 0.8);
    const double c = detail::take_param(params, "c", 0.5);
    const double sigma0 = detail::take_param(params, "sigma0", 0.3);
    const double x0 = detail::take_param(params, "x0", 1.0);
    const double horizon = detail::take_param(params, "horizon", 1.0);
    detail::reject_leftovers(params, "linbsde");

    ControlProblem pb;
    pb.name = "linbsde";
    pb.state_dim = 1;
    pb.control_dim = 1;
    pb.horizon = horizon;
    pb.x0 = Vec::Constant(1, x0);

    pb.drift.value = [a](double, const Vec& x, const Vec& u, Vec& out) { out[0] = a * x[0] + u[0]; };
    pb.drift.deriv[0] = [a](double, const Vec&, const Vec&, MultilinearMap& m) { m[0] = a; };
    for (int k = 2; k <= 4; ++k) pb.drift.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.diffusion.value = [c, sigma0](double, const Vec& x, const Vec&, Vec& out) {
        out[0] = c * x[0] + sigma0;
    };
    pb.diffusion.deriv[0] = [c](double, const Vec&, const Vec&, MultilinearMap& m) { m[0] = c; };
    for (int k = 2; k <= 4; ++k) pb.diffusion.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_map;

    pb.running_cost.value = [](double, const Vec&, const Vec&) { return 0.0; };
    for (int k = 1; k <= 4; ++k)
        pb.running_cost.deriv[static_cast<std::size_t>(k - 1)] = detail::zero_form;

    pb.terminal_cost.value = [](const Vec& x) { return x[0]; };
    pb.terminal_cost.deriv[0] = [](const Vec&, MultilinearForm& f) { f[0] = 1.0; };
    pb.terminal_cost.deriv[1] = detail::zero_tform;
    pb.terminal_cost.deriv[2] = detail::zero_tform;
    pb.terminal_cost.deriv[3] = detail::zero_tform;

    pb.control_set.points = detail::scalar_points({-1.0, 0.0, 1.0});

    ProblemBundle bundle;
    bundle.problem = std::move(pb);
    bundle.base_policy = ControlPolicy::constant(0.0);
    bundle.description = "linear scalar dynamics with h(x) = x; closed-form first adjoint "
                         "p1(t) = -exp(a (T - t)) for the regression solver to reproduce";
    return bundle;
}

inline std::vector<std::string> registered_problems() {
    return {"example1", "example2", "lq", "linbsde"};
}

inline ProblemBundle make_problem(const std::string& id, ParamMap params = {}) {
    if (id == "example1") return make_example1(std::move(params));
    if (id == "example2") return make_example2(std::move(params));
    if (id == "lq") return make_lq(std::move(params));
    if (id == "linbsde") return make_linbsde(std::move(params));
    throw UsageError("unknown problem id '" + id + "'");
}

inline std::string problem_description(const std::string& id) { return make_problem(id).description; }

}  // namespace needlecheck
