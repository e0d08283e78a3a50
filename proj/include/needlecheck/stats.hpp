#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace needlecheck {

struct MeanEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t count = 0;
};

inline MeanEstimate mean_with_error(const std::vector<double>& xs) {
    MeanEstimate r;
    r.count = xs.size();
    if (xs.empty()) return r;
    double s = 0.0;
    for (double x : xs) s += x;
    r.mean = s / static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double v = 0.0;
        for (double x : xs) v += (x - r.mean) * (x - r.mean);
        r.std_error = std::sqrt(v / (static_cast<double>(xs.size()) - 1.0) /
                                static_cast<double>(xs.size()));
    }
    return r;
}

struct SlopeFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_std_error = 0.0;
};

/// Ordinary least squares of y on x. With ys_se given, the slope standard
/// error is propagated from the per-point errors instead of the fit residual.
inline SlopeFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys,
                         const std::vector<double>* ys_se = nullptr) {
    if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("fit_line: need >= 2 points");
    const std::size_t m = xs.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= static_cast<double>(m);
    my /= static_cast<double>(m);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx == 0.0) throw std::invalid_argument("fit_line: degenerate abscissae");
    SlopeFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (ys_se) {
        double var = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double w = (xs[i] - mx) / sxx;
            var += w * w * (*ys_se)[i] * (*ys_se)[i];
        }
        f.slope_std_error = std::sqrt(var);
    } else if (m > 2) {
        double rss = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const double r = ys[i] - (f.intercept + f.slope * xs[i]);
            rss += r * r;
        }
        f.slope_std_error = std::sqrt(rss / (static_cast<double>(m) - 2.0) / sxx);
    }
    return f;
}

/// Slope of log(y) against log(x). Per-point standard errors of y propagate
/// as se/y into log space.
inline SlopeFit fit_loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys,
                                 const std::vector<double>* ys_se = nullptr) {
    std::vector<double> lx, ly, lse;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!(xs[i] > 0.0) || !(ys[i] > 0.0))
            throw std::invalid_argument("fit_loglog_slope: nonpositive data");
        lx.push_back(std::log(xs[i]));
        ly.push_back(std::log(ys[i]));
        if (ys_se) lse.push_back((*ys_se)[i] / ys[i]);
    }
    return fit_line(lx, ly, ys_se ? &lse : nullptr);
}

}  // namespace needlecheck
