#pragma once

#include "needlecheck/parallel.hpp"
#include "needlecheck/time_grid.hpp"

#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace needlecheck {

/// Brownian increments (and, once simulated, state trajectories) for M paths
/// on a uniform grid. Increments are generated per path from a seed sequence
/// of (master seed, global path index), so a path's noise depends neither on
/// M nor on how work is split across threads.
struct PathEnsemble {
    TimeGrid grid;
    int path_count = 0;
    std::uint64_t seed = 0;
    int first_path_index = 0;        // global index of path 0 (used by streaming drivers)
    std::vector<double> increments;  // M * N
    int state_dim = 0;               // 0 until simulated
    std::vector<double> states;      // M * (N+1) * state_dim once filled
    int aborted_paths = 0;           // paths frozen by the divergence guard

    double dw(int path, int step) const {
        return increments[static_cast<std::size_t>(path) * grid.steps + step];
    }

    bool has_states() const { return state_dim > 0 && !states.empty(); }

    double* state_ptr(int path, int node) {
        return states.data() +
               (static_cast<std::size_t>(path) * grid.node_count() + node) * state_dim;
    }
    const double* state_ptr(int path, int node) const {
        return states.data() +
               (static_cast<std::size_t>(path) * grid.node_count() + node) * state_dim;
    }

    static std::mt19937_64 path_engine(std::uint64_t seed, std::int64_t global_path) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(global_path),
                          static_cast<std::uint32_t>(global_path >> 32)};
        return std::mt19937_64(seq);
    }

    /// Gaussian increments with variance dt, reproducible from (seed, path index).
    static PathEnsemble gaussian(const TimeGrid& grid, int path_count, std::uint64_t seed,
                                 int first_path_index = 0) {
        if (path_count <= 0) throw std::invalid_argument("PathEnsemble: path_count must be positive");
        PathEnsemble e;
        e.grid = grid;
        e.path_count = path_count;
        e.seed = seed;
        e.first_path_index = first_path_index;
        e.increments.resize(static_cast<std::size_t>(path_count) * grid.steps);
        const double sd = std::sqrt(grid.dt());
        parallel_for_blocks(path_count, [&](int, int begin, int end) {
            for (int p = begin; p < end; ++p) {
                auto eng = path_engine(seed, static_cast<std::int64_t>(first_path_index) + p);
                std::normal_distribution<double> normal(0.0, sd);
                double* row = e.increments.data() + static_cast<std::size_t>(p) * grid.steps;
                for (int i = 0; i < grid.steps; ++i) row[i] = normal(eng);
            }
        });
        return e;
    }

    /// Same Brownian paths on a grid with half the steps: adjacent increments
    /// are summed pairwise. Used for strong-order and self-convergence studies.
    PathEnsemble coarsened() const {
        if (grid.steps % 2 != 0) throw std::invalid_argument("coarsened: step count must be even");
        PathEnsemble e;
        e.grid = TimeGrid(grid.steps / 2, grid.horizon);
        e.path_count = path_count;
        e.seed = seed;
        e.first_path_index = first_path_index;
        e.increments.resize(static_cast<std::size_t>(path_count) * e.grid.steps);
        for (int p = 0; p < path_count; ++p) {
            const double* src = increments.data() + static_cast<std::size_t>(p) * grid.steps;
            double* dst = e.increments.data() + static_cast<std::size_t>(p) * e.grid.steps;
            for (int i = 0; i < e.grid.steps; ++i) dst[i] = src[2 * i] + src[2 * i + 1];
        }
        return e;
    }

    void write_increments_csv(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot open " + path);
        out << "path,step,dw\n";
        out.precision(17);
        for (int p = 0; p < path_count; ++p)
            for (int i = 0; i < grid.steps; ++i) out << p << ',' << i << ',' << dw(p, i) << '\n';
    }

    /// Raw dump: int64 path_count, int64 steps, float64 horizon, then M*N doubles.
    void write_increments_binary(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open " + path);
        const std::int64_t m = path_count, n = grid.steps;
        const double t = grid.horizon;
        out.write(reinterpret_cast<const char*>(&m), sizeof m);
        out.write(reinterpret_cast<const char*>(&n), sizeof n);
        out.write(reinterpret_cast<const char*>(&t), sizeof t);
        out.write(reinterpret_cast<const char*>(increments.data()),
                  static_cast<std::streamsize>(increments.size() * sizeof(double)));
    }
};

}  // namespace needlecheck
