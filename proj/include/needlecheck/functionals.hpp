#pragma once

#include "needlecheck/adjoint.hpp"
#include "needlecheck/coefficients.hpp"

#include <vector>

namespace needlecheck {

/// Adjoint process values at one (path, node), the inputs of the test
/// functionals. Orders beyond max_order stay zero forms.
struct AdjointValues {
    int max_order = 0;
    Vec p1, q1;
    MultilinearForm p2, q2, p3, q3, p4, q4;

    static AdjointValues zero(int n, int max_order) {
        AdjointValues av;
        av.max_order = max_order;
        av.p1 = Vec::Zero(n);
        av.q1 = Vec::Zero(n);
        av.p2 = MultilinearForm(2, n);
        av.q2 = MultilinearForm(2, n);
        av.p3 = MultilinearForm(3, n);
        av.q3 = MultilinearForm(3, n);
        av.p4 = MultilinearForm(4, n);
        av.q4 = MultilinearForm(4, n);
        return av;
    }
};

inline AdjointValues adjoint_values_at(const std::vector<AdjointSolution>& sols, int path, int node) {
    if (sols.empty()) throw UsageError("adjoint_values_at: no adjoint solutions");
    AdjointValues av = AdjointValues::zero(sols[0].state_dim, static_cast<int>(sols.size()));
    const auto pick = [&](const AdjointSolution& s) { return s.per_path ? path : 0; };
    av.p1 = Vec(sols[0].p_flat(pick(sols[0]), node));
    av.q1 = Vec(sols[0].q_flat(pick(sols[0]), node));
    if (sols.size() >= 2) {
        sols[1].p_form(pick(sols[1]), node, av.p2);
        sols[1].q_form(pick(sols[1]), node, av.q2);
    }
    if (sols.size() >= 3) {
        sols[2].p_form(pick(sols[2]), node, av.p3);
        sols[2].q_form(pick(sols[2]), node, av.q3);
    }
    if (sols.size() >= 4) {
        sols[3].p_form(pick(sols[3]), node, av.p4);
        sols[3].q_form(pick(sols[3]), node, av.q4);
    }
    return av;
}

/// Hamiltonian H(t, x, u, y1, z1) = <y1, b> + <z1, sigma> - f.
inline double hamiltonian(const ControlProblem& pb, double t, const Vec& x, const Vec& u,
                          const Vec& y1, const Vec& z1) {
    return y1.dot(pb.drift(t, x, u)) + z1.dot(pb.diffusion(t, x, u)) - pb.running_cost(t, x, u);
}

/// Coefficient table for functional evaluation at (t, x) with base control
/// u_bar and probe v: base derivatives to order 2 plus probe increments to
/// order 2 (everything script S and script T consume).
inline NodeCoeffs functional_coeffs(const ControlProblem& pb, double t, const Vec& x, const Vec& u_bar,
                                    const Vec& v) {
    CoeffRequest req;
    req.deriv_order = 2;
    req.delta_order = 2;
    NodeCoeffs c;
    c.fill(pb, t, x, u_bar, &v, req);
    return c;
}

// ---------------------------------------------------------------------------
// The zeroth-, first- and second-order test functionals. Every display term
// has its own function; the assemblers just add them up.
// ---------------------------------------------------------------------------
namespace functional_terms {

/// H(v) - H(ubar) evaluated from the precomputed increments.
inline double hamiltonian_increment(const NodeCoeffs& c, const Vec& p1, const Vec& q1) {
    return p1.dot(c.delta_b) + q1.dot(c.delta_sigma) - (c.f_probe - c.f);
}

/// (1/2) <p2 delta_sigma, delta_sigma>.
inline double h_quadratic(const NodeCoeffs& c, const MultilinearForm& p2) {
    return 0.5 * p2(c.delta_sigma, c.delta_sigma);
}

/// Gradient part of script H: delta_b_x^T p1 + delta_sigma_x^T q1 - delta_f_x.
inline Vec s_grad_linear(const NodeCoeffs& c, const Vec& p1, const Vec& q1) {
    return c.delta_b_x.as_matrix().transpose() * p1 + c.delta_sigma_x.as_matrix().transpose() * q1 -
           c.delta_f_x;
}

/// Gradient of the quadratic script-H term:
/// (1/2)([p2 o_1 delta_sigma_x] .2 dsig + [p2 o_2 delta_sigma_x] .1 dsig).
inline Vec s_grad_quadratic(const NodeCoeffs& c, const MultilinearForm& p2) {
    Vec out = contract_at(compose_at(p2, c.delta_sigma_x, 1), c.delta_sigma, 2).as_vector();
    out += contract_at(compose_at(p2, c.delta_sigma_x, 2), c.delta_sigma, 1).as_vector();
    return 0.5 * out;
}

/// Script-S increment of the second-order pairing:
/// (1/2) sum_k [p2 .k delta_b + q2 .k delta_sigma].
inline Vec s_second_pairing(const NodeCoeffs& c, const MultilinearForm& p2, const MultilinearForm& q2) {
    Vec out = Vec::Zero(p2.dim());
    for (int k = 1; k <= 2; ++k) {
        out += contract_at(p2, c.delta_b, k).as_vector();
        out += contract_at(q2, c.delta_sigma, k).as_vector();
    }
    return 0.5 * out;
}

/// (1/2)([p2 o_1 sigma_x] .2 dsig + [p2 o_2 sigma_x] .1 dsig).
inline Vec s_p2_sigma_cross(const NodeCoeffs& c, const MultilinearForm& p2) {
    Vec out = contract_at(compose_at(p2, c.sigma_x, 1), c.delta_sigma, 2).as_vector();
    out += contract_at(compose_at(p2, c.sigma_x, 2), c.delta_sigma, 1).as_vector();
    return 0.5 * out;
}

/// (1/6) sum_{k<l<=3} p3 .kl (dsig, dsig).
inline Vec s_p3_quadratic(const NodeCoeffs& c, const MultilinearForm& p3) {
    Vec out = Vec::Zero(p3.dim());
    for (int k = 1; k <= 2; ++k)
        for (int l = k + 1; l <= 3; ++l)
            out += contract_two_at(p3, c.delta_sigma, c.delta_sigma, k, l).as_vector();
    return out / 6.0;
}

// --- script T pieces -------------------------------------------------------

/// x-derivative of the gradient part: delta second derivatives against p1, q1.
inline MultilinearForm t_grad_s_hessian(const NodeCoeffs& c, const Vec& p1, const Vec& q1) {
    MultilinearForm out = c.delta_b_xx.dot_output(p1);
    out += c.delta_sigma_xx.dot_output(q1);
    out -= c.delta_f_xx;
    return out;
}

/// (1/2) sum_k [p2 o_k delta_b_x + q2 o_k delta_sigma_x]. Appears twice in
/// script T: once inside the x-derivative of script S and once as the
/// increment of the x-derivative of the second-order pairing.
inline MultilinearForm t_second_pairing_x(const NodeCoeffs& c, const MultilinearForm& p2,
                                          const MultilinearForm& q2) {
    MultilinearForm out(2, p2.dim());
    for (int k = 1; k <= 2; ++k) {
        out += compose_at(p2, c.delta_b_x, k);
        out += compose_at(q2, c.delta_sigma_x, k);
    }
    return out * 0.5;
}

/// x-derivative of the p2/sigma_x cross terms:
/// (1/2)([p2 o_1 sigma_xx] .3 dsig + p2 o_{1,2}(sigma_x, dsig_x)
///       + [p2 o_2 sigma_xx] .1 dsig + p2 o_{1,2}(dsig_x, sigma_x)).
inline MultilinearForm t_p2_sigma_cross_x(const NodeCoeffs& c, const MultilinearForm& p2) {
    MultilinearForm out = contract_at(compose_at(p2, c.sigma_xx, 1), c.delta_sigma, 3);
    out += compose_two_at(p2, c.sigma_x, c.delta_sigma_x, 1, 2);
    out += contract_at(compose_at(p2, c.sigma_xx, 2), c.delta_sigma, 1);
    out += compose_two_at(p2, c.delta_sigma_x, c.sigma_x, 1, 2);
    return out * 0.5;
}

/// x-derivative of the quadratic script-H gradient:
/// (1/2)([p2 o_1 dsig_xx] .3 dsig + [p2 o_2 dsig_xx] .1 dsig)
/// + p2 o_{1,2}(dsig_x, dsig_x).
inline MultilinearForm t_grad_quadratic_x(const NodeCoeffs& c, const MultilinearForm& p2) {
    MultilinearForm out = contract_at(compose_at(p2, c.delta_sigma_xx, 1), c.delta_sigma, 3);
    out += contract_at(compose_at(p2, c.delta_sigma_xx, 2), c.delta_sigma, 1);
    out *= 0.5;
    out += compose_two_at(p2, c.delta_sigma_x, c.delta_sigma_x, 1, 2);
    return out;
}

/// (1/6) sum_{k != l} [p3 o_k dsig_x] .l dsig. Also appears twice (inside the
/// x-derivative of script S and as a display term of its own).
inline MultilinearForm t_p3_delta_cross(const NodeCoeffs& c, const MultilinearForm& p3) {
    MultilinearForm out(2, p3.dim());
    for (int k = 1; k <= 3; ++k)
        for (int l = 1; l <= 3; ++l) {
            if (l == k) continue;
            out += contract_at(compose_at(p3, c.delta_sigma_x, k), c.delta_sigma, l);
        }
    return out * (1.0 / 6.0);
}

/// (1/3) sum_k [p3 .k delta_b + q3 .k delta_sigma] (the third-order pairing
/// increment).
inline MultilinearForm t_third_pairing(const NodeCoeffs& c, const MultilinearForm& p3,
                                       const MultilinearForm& q3) {
    MultilinearForm out(2, p3.dim());
    for (int k = 1; k <= 3; ++k) {
        out += contract_at(p3, c.delta_b, k);
        out += contract_at(q3, c.delta_sigma, k);
    }
    return out * (1.0 / 3.0);
}

/// (1/2) sum_{k != l <= 2} p2 o_{k,l}(sigma_x, dsig_x).
inline MultilinearForm t_p2_sigma_cross(const NodeCoeffs& c, const MultilinearForm& p2) {
    MultilinearForm out = compose_two_at(p2, c.sigma_x, c.delta_sigma_x, 1, 2);
    out += compose_two_at(p2, c.sigma_x, c.delta_sigma_x, 2, 1);
    return out * 0.5;
}

/// (1/3) sum_{k != l} [p3 o_k sigma_x] .l dsig.
inline MultilinearForm t_p3_sigma_cross(const NodeCoeffs& c, const MultilinearForm& p3) {
    MultilinearForm out(2, p3.dim());
    for (int k = 1; k <= 3; ++k)
        for (int l = 1; l <= 3; ++l) {
            if (l == k) continue;
            out += contract_at(compose_at(p3, c.sigma_x, k), c.delta_sigma, l);
        }
    return out * (1.0 / 3.0);
}

/// (1/12) sum_{k<l<=4} p4 .kl (dsig, dsig).
inline MultilinearForm t_p4_quadratic(const NodeCoeffs& c, const MultilinearForm& p4) {
    MultilinearForm out(2, p4.dim());
    for (int k = 1; k <= 3; ++k)
        for (int l = k + 1; l <= 4; ++l)
            out += contract_two_at(p4, c.delta_sigma, c.delta_sigma, k, l);
    return out * (1.0 / 12.0);
}

}  // namespace functional_terms

/// Script H(t, x, v): the first-order needle-variation functional.
inline double script_h(const NodeCoeffs& c, const AdjointValues& av) {
    return functional_terms::hamiltonian_increment(c, av.p1, av.q1) +
           functional_terms::h_quadratic(c, av.p2);
}

/// Script S(t, x, v) in R^n: gradient-level functional of the variational
/// expansion.
inline Vec script_s(const NodeCoeffs& c, const AdjointValues& av) {
    using namespace functional_terms;
    Vec out = s_grad_linear(c, av.p1, av.q1);
    out += s_grad_quadratic(c, av.p2);
    out += s_second_pairing(c, av.p2, av.q2);
    out += s_p2_sigma_cross(c, av.p2);
    out += s_p3_quadratic(c, av.p3);
    return out;
}

/// Full x-derivative of script S (a bilinear form).
inline MultilinearForm script_s_x(const NodeCoeffs& c, const AdjointValues& av) {
    using namespace functional_terms;
    MultilinearForm out = t_grad_s_hessian(c, av.p1, av.q1);
    out += t_second_pairing_x(c, av.p2, av.q2);
    out += t_p2_sigma_cross_x(c, av.p2);
    out += t_grad_quadratic_x(c, av.p2);
    out += t_p3_delta_cross(c, av.p3);
    return out;
}

/// Script T(t, x, v): the bilinear functional weighting y1 in the expansion.
inline MultilinearForm script_t(const NodeCoeffs& c, const AdjointValues& av) {
    using namespace functional_terms;
    MultilinearForm out = script_s_x(c, av);
    out += t_second_pairing_x(c, av.p2, av.q2);  // increment of the pairing's x-derivative
    out += t_third_pairing(c, av.p3, av.q3);
    out += t_p2_sigma_cross(c, av.p2);
    out += t_p3_delta_cross(c, av.p3);
    out += t_p3_sigma_cross(c, av.p3);
    out += t_p4_quadratic(c, av.p4);
    return out;
}

/// Convenience wrappers evaluating at an arbitrary point.
inline double script_h(const ControlProblem& pb, double t, const Vec& x, const Vec& u_bar, const Vec& v,
                       const AdjointValues& av) {
    CoeffRequest req;
    req.deriv_order = 1;
    req.delta_order = 0;
    NodeCoeffs c;
    c.fill(pb, t, x, u_bar, &v, req);
    return script_h(c, av);
}
inline Vec script_s(const ControlProblem& pb, double t, const Vec& x, const Vec& u_bar, const Vec& v,
                    const AdjointValues& av) {
    CoeffRequest req;
    req.deriv_order = 1;
    req.delta_order = 1;
    NodeCoeffs c;
    c.fill(pb, t, x, u_bar, &v, req);
    return script_s(c, av);
}
inline MultilinearForm script_t(const ControlProblem& pb, double t, const Vec& x, const Vec& u_bar,
                                const Vec& v, const AdjointValues& av) {
    NodeCoeffs c = functional_coeffs(pb, t, x, u_bar, v);
    return script_t(c, av);
}

}  // namespace needlecheck
