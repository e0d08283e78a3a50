#pragma once

#include <cmath>
#include <stdexcept>

namespace needlecheck {

/// Uniform grid t_i = i T / N on [0, T].
struct TimeGrid {
    int steps = 0;       // N
    double horizon = 0;  // T

    TimeGrid() = default;
    TimeGrid(int n, double t) : steps(n), horizon(t) {
        if (n <= 0) throw std::invalid_argument("TimeGrid: steps must be positive");
        if (!(t > 0)) throw std::invalid_argument("TimeGrid: horizon must be positive");
    }

    double dt() const { return horizon / steps; }
    double node(int i) const { return horizon * i / steps; }
    int node_count() const { return steps + 1; }

    bool operator==(const TimeGrid& o) const { return steps == o.steps && horizon == o.horizon; }
    bool operator!=(const TimeGrid& o) const { return !(*this == o); }

    /// Nearest node index of a time value, or -1 if t is not grid-aligned.
    int aligned_index(double t, double rel_tol = 1e-9) const {
        const double k = t / dt();
        const double r = std::round(k);
        if (std::abs(k - r) > rel_tol * steps || r < 0 || r > steps) return -1;
        return static_cast<int>(r);
    }
};

}  // namespace needlecheck
