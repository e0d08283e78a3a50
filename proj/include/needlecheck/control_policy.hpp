#pragma once

#include "needlecheck/control_problem.hpp"
#include "needlecheck/time_grid.hpp"

#include <functional>
#include <optional>

namespace needlecheck {

/// Needle variation: replace the base control by v on [tau, tau + eps).
struct Spike {
    double tau = 0.0;
    double eps = 0.0;
    Vec value;

    bool empty() const { return eps <= 0.0; }

    /// Cell range [first, last) of grid cells covered by the spike, or throws
    /// if an endpoint is not a grid node.
    std::pair<int, int> cell_range(const TimeGrid& grid) const {
        if (empty()) return {0, 0};
        const int a = grid.aligned_index(tau);
        const int b = grid.aligned_index(tau + eps);
        if (a < 0 || b < 0) throw UsageError("spike not grid-aligned");
        return {a, b};
    }
};

/// Deterministic piecewise-constant control of time, plus an optional spike.
struct ControlPolicy {
    std::function<Vec(double)> base;
    std::optional<Spike> spike;

    static ControlPolicy constant(const Vec& u) {
        ControlPolicy p;
        p.base = [u](double) { return u; };
        return p;
    }
    static ControlPolicy constant(double u) {
        Vec v(1);
        v[0] = u;
        return constant(v);
    }

    ControlPolicy with_spike(double tau, double eps, const Vec& v) const {
        ControlPolicy p = *this;
        p.spike = Spike{tau, eps, v};
        return p;
    }

    Vec operator()(double t) const {
        if (spike && !spike->empty() && t >= spike->tau && t < spike->tau + spike->eps)
            return spike->value;
        return base(t);
    }

    /// Control at the left endpoint of every grid cell. The spike endpoints
    /// must be grid nodes, so each cell is entirely inside or outside E_eps.
    std::vector<Vec> values_on(const TimeGrid& grid) const {
        if (spike) spike->cell_range(grid);  // alignment check
        std::vector<Vec> out;
        out.reserve(static_cast<std::size_t>(grid.steps));
        for (int i = 0; i < grid.steps; ++i) out.push_back((*this)(grid.node(i)));
        return out;
    }
};

}  // namespace needlecheck
