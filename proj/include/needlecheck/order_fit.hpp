#pragma once

#include "needlecheck/stats.hpp"
#include "needlecheck/variational.hpp"

#include <map>
#include <string>
#include <vector>

namespace needlecheck {

/// Spike family over a decreasing epsilon ladder with fixed tau and value.
struct SpikeLadder {
    double tau = 0.0;
    Vec value;
    std::vector<double> eps;

    Spike spike_at(std::size_t rung) const { return Spike{tau, eps[rung], value}; }
};

inline std::vector<double> dyadic_ladder(double horizon, int from_pow, int to_pow) {
    std::vector<double> eps;
    for (int k = from_pow; k <= to_pow; ++k) eps.push_back(horizon * std::pow(2.0, -k));
    return eps;
}

struct OrderFitRow {
    std::string quantity;
    double expected_slope = 0.0;
    SlopeFit fit;
    std::vector<double> eps;
    std::vector<double> moment;
    std::vector<double> moment_se;
    double tolerance = 0.2;
    std::string verdict;  // pass | fail | identically zero | inconclusive
};

struct OrderFitReport {
    double beta = 2.0;
    int max_order = 4;
    int path_count = 0;
    int grid_steps = 0;
    std::vector<OrderFitRow> rows;

    const OrderFitRow& row(const std::string& quantity) const {
        for (const auto& r : rows)
            if (r.quantity == quantity) return r;
        throw UsageError("no such quantity in order fit report: " + quantity);
    }
    bool all_pass() const {
        for (const auto& r : rows)
            if (r.verdict == "fail") return false;
        return true;
    }
};

struct OrderFitConfig {
    double beta = 2.0;
    int max_order = 4;
    int grid_steps = 512;
    int path_count = 100000;
    std::uint64_t seed = 1;
    double slope_tol_y1 = 0.15;   // first-order quantities resolve sharply
    double slope_tol_high = 0.2;  // higher-order quantities carry more noise
    double zero_tol = 1e-26;      // moment below this counts as identically zero
};

/// Moment estimates E sup_t |.|^beta for y_1..y_k, r_1..r_k and delta x over
/// an epsilon ladder, with fitted log-log slopes against the expected
/// exponents (y_k: k beta/2, r_k: (k+1) beta/2, delta x: beta/2). The same
/// Brownian paths drive every rung.
inline OrderFitReport fit_orders(const ControlProblem& pb, const ControlPolicy& base,
                                 const SpikeLadder& ladder, const OrderFitConfig& cfg) {
    if (ladder.eps.size() < 4) throw UsageError("fit_orders: need at least 4 epsilon rungs");
    for (std::size_t j = 1; j < ladder.eps.size(); ++j)
        if (!(ladder.eps[j] < ladder.eps[j - 1]))
            throw UsageError("fit_orders: epsilon ladder must decrease strictly");
    require_variational_capability(pb, cfg.max_order);
    const int k = cfg.max_order;
    const std::size_t rungs = ladder.eps.size();
    const std::size_t quantities = static_cast<std::size_t>(2 * k + 1);
    TimeGrid grid(cfg.grid_steps, pb.horizon);

    // Validate alignment and precompute per-rung controls up front.
    std::vector<std::pair<int, int>> cells;
    std::vector<std::vector<Vec>> rung_controls;
    for (std::size_t j = 0; j < rungs; ++j) {
        cells.push_back(ladder.spike_at(j).cell_range(grid));
        ControlPolicy varied = base;
        varied.spike = ladder.spike_at(j);
        rung_controls.push_back(varied.values_on(grid));
    }

    // sums[rung][quantity], per block then reduced in block order.
    const int blocks = block_count(cfg.path_count);
    std::vector<std::vector<double>> sum(static_cast<std::size_t>(blocks),
                                         std::vector<double>(rungs * quantities, 0.0));
    std::vector<std::vector<double>> sumsq = sum;

    parallel_for_blocks(cfg.path_count, [&](int blk, int begin, int end) {
        const int m = end - begin;
        PathEnsemble block = PathEnsemble::gaussian(grid, m, cfg.seed, begin);
        simulate_state(pb, base, block);
        CoeffRequest req;
        req.deriv_order = k;
        req.delta_order = k - 1;
        CoefficientProvider provider(pb, block, base, &ladder.value, req);

        VariationalPathSolver solver(pb, grid, k);
        std::vector<NodeCoeffs> scratch;
        Vec partial(pb.state_dim), dx(pb.state_dim);
        std::vector<double> sup(quantities);
        auto& bsum = sum[static_cast<std::size_t>(blk)];
        auto& bsq = sumsq[static_cast<std::size_t>(blk)];

        for (int p = 0; p < m; ++p) {
            const auto& table = provider.table_for(p, scratch);
            for (std::size_t j = 0; j < rungs; ++j) {
                const auto& controls = rung_controls[j];
                solver.start_path();
                std::fill(sup.begin(), sup.end(), 0.0);
                for (int i = 0; i < grid.steps; ++i) {
                    const bool chi = i >= cells[j].first && i < cells[j].second;
                    solver.step(i, table[static_cast<std::size_t>(i)], block.state_ptr(p, i),
                                block.dw(p, i), chi, controls[static_cast<std::size_t>(i)]);
                    for (int c = 0; c < pb.state_dim; ++c)
                        dx[c] = solver.perturbed_state()[c] - block.state_ptr(p, i + 1)[c];
                    partial.setZero();
                    for (int q = 1; q <= k; ++q) {
                        sup[static_cast<std::size_t>(q - 1)] =
                            std::max(sup[static_cast<std::size_t>(q - 1)], solver.y(q).norm());
                        partial += solver.y(q);
                        sup[static_cast<std::size_t>(k + q - 1)] =
                            std::max(sup[static_cast<std::size_t>(k + q - 1)], (dx - partial).norm());
                    }
                    sup[static_cast<std::size_t>(2 * k)] =
                        std::max(sup[static_cast<std::size_t>(2 * k)], dx.norm());
                }
                for (std::size_t q = 0; q < quantities; ++q) {
                    const double v = std::pow(sup[q], cfg.beta);
                    bsum[j * quantities + q] += v;
                    bsq[j * quantities + q] += v * v;
                }
            }
        }
    });

    OrderFitReport rep;
    rep.beta = cfg.beta;
    rep.max_order = k;
    rep.path_count = cfg.path_count;
    rep.grid_steps = cfg.grid_steps;

    auto quantity_name = [&](std::size_t q) {
        if (q < static_cast<std::size_t>(k)) return "y" + std::to_string(q + 1);
        if (q < static_cast<std::size_t>(2 * k)) return "r" + std::to_string(q - k + 1);
        return std::string("delta_x");
    };
    auto expected_slope = [&](std::size_t q) {
        if (q < static_cast<std::size_t>(k)) return (q + 1) * cfg.beta / 2.0;
        if (q < static_cast<std::size_t>(2 * k)) return (q - k + 2) * cfg.beta / 2.0;
        return cfg.beta / 2.0;
    };

    for (std::size_t q = 0; q < quantities; ++q) {
        OrderFitRow row;
        row.quantity = quantity_name(q);
        row.expected_slope = expected_slope(q);
        row.tolerance = (row.quantity == "y1" || row.quantity == "delta_x") ? cfg.slope_tol_y1
                                                                            : cfg.slope_tol_high;
        for (std::size_t j = 0; j < rungs; ++j) {
            double s = 0.0, s2 = 0.0;
            for (int b = 0; b < blocks; ++b) {
                s += sum[static_cast<std::size_t>(b)][j * quantities + q];
                s2 += sumsq[static_cast<std::size_t>(b)][j * quantities + q];
            }
            const double mean = s / cfg.path_count;
            const double var = std::max(0.0, s2 / cfg.path_count - mean * mean);
            row.eps.push_back(ladder.eps[j]);
            row.moment.push_back(mean);
            row.moment_se.push_back(cfg.path_count > 1
                                        ? std::sqrt(var / (cfg.path_count - 1))
                                        : 0.0);
        }
        if (row.moment.front() < cfg.zero_tol) {
            row.verdict = "identically zero";
        } else {
            row.fit = fit_loglog_slope(row.eps, row.moment, &row.moment_se);
            if (row.fit.slope_std_error > row.tolerance) {
                row.verdict = "inconclusive (Monte Carlo error exceeds slope resolution)";
            } else {
                row.verdict = std::abs(row.fit.slope - row.expected_slope) <= row.tolerance
                                  ? "pass"
                                  : "fail";
            }
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

}  // namespace needlecheck
