#pragma once

#include <Eigen/Dense>

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace needlecheck {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

namespace detail {

inline std::int64_t int_pow(int base, int exp) {
    std::int64_t r = 1;
    for (int k = 0; k < exp; ++k) r *= base;
    return r;
}

// Walks all multi-indices (j_1,...,j_d) with 0 <= j_k < dim in row-major order.
// fn receives a pointer to the d current indices.
template <class Fn>
void for_each_index(int arity, int dim, Fn&& fn) {
    std::array<int, 8> idx{};
    assert(arity <= 8);
    if (arity == 0) {
        fn(idx.data());
        return;
    }
    while (true) {
        fn(idx.data());
        int k = arity - 1;
        while (k >= 0 && ++idx[k] == dim) {
            idx[k] = 0;
            --k;
        }
        if (k < 0) break;
    }
}

}  // namespace detail

/// Dense d-linear form on R^n with scalar values. Coefficients are stored
/// row-major as c[j_1,...,j_d] = form(e_{j_1},...,e_{j_d}). Arity 0 is a
/// plain scalar, which keeps contraction closed under repeated application.
class MultilinearForm {
public:
    MultilinearForm() = default;
    MultilinearForm(int arity, int dim)
        : arity_(arity), dim_(dim), coef_(static_cast<std::size_t>(detail::int_pow(dim, arity)), 0.0) {
        if (arity < 0 || arity > 6) throw std::invalid_argument("MultilinearForm: arity out of range");
        if (dim < 1) throw std::invalid_argument("MultilinearForm: dim must be positive");
    }

    static MultilinearForm scalar(double value) {
        MultilinearForm f(0, 1);
        f.coef_[0] = value;
        return f;
    }

    /// The bilinear form (x, y) -> <x, y>.
    static MultilinearForm identity_bilinear(int dim) {
        MultilinearForm f(2, dim);
        for (int i = 0; i < dim; ++i) f.coef_[static_cast<std::size_t>(i * dim + i)] = 1.0;
        return f;
    }

    static MultilinearForm from_vector(const Vec& v) {
        MultilinearForm f(1, static_cast<int>(v.size()));
        for (int i = 0; i < v.size(); ++i) f.coef_[static_cast<std::size_t>(i)] = v[i];
        return f;
    }

    static MultilinearForm from_matrix(const Mat& m) {
        if (m.rows() != m.cols()) throw std::invalid_argument("from_matrix: square matrix expected");
        MultilinearForm f(2, static_cast<int>(m.rows()));
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j) f.coef_[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
        return f;
    }

    int arity() const { return arity_; }
    int dim() const { return dim_; }
    std::size_t size() const { return coef_.size(); }

    double* data() { return coef_.data(); }
    const double* data() const { return coef_.data(); }
    std::vector<double>& coefficients() { return coef_; }
    const std::vector<double>& coefficients() const { return coef_; }

    double& operator[](std::size_t flat) { return coef_[flat]; }
    double operator[](std::size_t flat) const { return coef_[flat]; }

    std::size_t flat_index(const int* idx) const {
        std::size_t r = 0;
        for (int k = 0; k < arity_; ++k) {
            assert(idx[k] >= 0 && idx[k] < dim_);
            r = r * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(idx[k]);
        }
        return r;
    }

    double& coef(std::initializer_list<int> idx) {
        assert(static_cast<int>(idx.size()) == arity_);
        return coef_[flat_index(idx.begin())];
    }
    double coef(std::initializer_list<int> idx) const {
        assert(static_cast<int>(idx.size()) == arity_);
        return coef_[flat_index(idx.begin())];
    }

    double value() const {
        assert(arity_ == 0);
        return coef_[0];
    }

    /// Reshape only if needed; refilling an already-shaped form is allocation-free.
    void ensure_shape(int arity, int dim) {
        if (arity_ != arity || dim_ != dim) *this = MultilinearForm(arity, dim);
    }

    /// Evaluate on arity many vectors given as an array of pointers.
    double eval(const Vec* const* args, int count) const {
        assert(count == arity_);
        (void)count;
        if (arity_ == 0) return coef_[0];
        double total = 0.0;
        detail::for_each_index(arity_, dim_, [&](const int* idx) {
            double w = coef_[flat_index(idx)];
            if (w == 0.0) return;
            for (int k = 0; k < arity_; ++k) w *= (*args[k])[idx[k]];
            total += w;
        });
        return total;
    }

    template <class... Args>
    double operator()(const Args&... xs) const {
        std::array<const Vec*, sizeof...(Args)> ptrs{(&xs)...};
        return eval(ptrs.data(), static_cast<int>(sizeof...(Args)));
    }

    /// Root-sum-square of the coefficients.
    double norm() const {
        double s = 0.0;
        for (double c : coef_) s += c * c;
        return std::sqrt(s);
    }

    MultilinearForm& operator+=(const MultilinearForm& o) {
        check_same_shape(o);
        for (std::size_t k = 0; k < coef_.size(); ++k) coef_[k] += o.coef_[k];
        return *this;
    }
    MultilinearForm& operator-=(const MultilinearForm& o) {
        check_same_shape(o);
        for (std::size_t k = 0; k < coef_.size(); ++k) coef_[k] -= o.coef_[k];
        return *this;
    }
    MultilinearForm& operator*=(double a) {
        for (double& c : coef_) c *= a;
        return *this;
    }
    MultilinearForm& add_scaled(const MultilinearForm& o, double a) {
        check_same_shape(o);
        for (std::size_t k = 0; k < coef_.size(); ++k) coef_[k] += a * o.coef_[k];
        return *this;
    }
    void set_zero() { std::fill(coef_.begin(), coef_.end(), 0.0); }

    friend MultilinearForm operator+(MultilinearForm a, const MultilinearForm& b) { return a += b; }
    friend MultilinearForm operator-(MultilinearForm a, const MultilinearForm& b) { return a -= b; }
    friend MultilinearForm operator*(MultilinearForm a, double s) { return a *= s; }
    friend MultilinearForm operator*(double s, MultilinearForm a) { return a *= s; }

    Vec as_vector() const {
        assert(arity_ == 1);
        Vec v(dim_);
        for (int i = 0; i < dim_; ++i) v[i] = coef_[static_cast<std::size_t>(i)];
        return v;
    }

    Mat as_matrix() const {
        assert(arity_ == 2);
        Mat m(dim_, dim_);
        for (int i = 0; i < dim_; ++i)
            for (int j = 0; j < dim_; ++j) m(i, j) = coef_[static_cast<std::size_t>(i * dim_ + j)];
        return m;
    }

private:
    void check_same_shape(const MultilinearForm& o) const {
        if (arity_ != o.arity_ || dim_ != o.dim_)
            throw std::invalid_argument("MultilinearForm: shape mismatch");
    }

    int arity_ = 0;
    int dim_ = 1;
    std::vector<double> coef_{0.0};
};

/// Dense R^n-valued h-linear map on R^n. Coefficients stored as
/// g[i; j_1,...,j_h] = <map(e_{j_1},...,e_{j_h}), e_i>, output index first.
/// These hold the x-derivative tensors of drift and diffusion (h = 1 is a
/// plain matrix, h = 2 a Hessian stack, and so on).
class MultilinearMap {
public:
    MultilinearMap() = default;
    MultilinearMap(int arity, int dim)
        : arity_(arity), dim_(dim),
          coef_(static_cast<std::size_t>(dim) * static_cast<std::size_t>(detail::int_pow(dim, arity)), 0.0) {
        if (arity < 1 || arity > 5) throw std::invalid_argument("MultilinearMap: arity out of range");
        if (dim < 1) throw std::invalid_argument("MultilinearMap: dim must be positive");
    }

    static MultilinearMap identity(int dim) {
        MultilinearMap m(1, dim);
        for (int i = 0; i < dim; ++i) m.coef_[static_cast<std::size_t>(i * dim + i)] = 1.0;
        return m;
    }

    static MultilinearMap from_matrix(const Mat& a) {
        if (a.rows() != a.cols()) throw std::invalid_argument("from_matrix: square matrix expected");
        MultilinearMap m(1, static_cast<int>(a.rows()));
        for (int i = 0; i < a.rows(); ++i)
            for (int j = 0; j < a.cols(); ++j) m.coef_[static_cast<std::size_t>(i * a.cols() + j)] = a(i, j);
        return m;
    }

    int arity() const { return arity_; }
    int dim() const { return dim_; }
    std::size_t size() const { return coef_.size(); }
    double* data() { return coef_.data(); }
    const double* data() const { return coef_.data(); }

    void resize(int arity, int dim) { *this = MultilinearMap(arity, dim); }

    /// Reshape only if needed; refilling an already-shaped map is allocation-free.
    void ensure_shape(int arity, int dim) {
        if (arity_ != arity || dim_ != dim) *this = MultilinearMap(arity, dim);
    }

    std::size_t flat_index(int out, const int* idx) const {
        std::size_t r = static_cast<std::size_t>(out);
        for (int k = 0; k < arity_; ++k) {
            assert(idx[k] >= 0 && idx[k] < dim_);
            r = r * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(idx[k]);
        }
        return r;
    }

    double& coef(int out, std::initializer_list<int> idx) {
        assert(static_cast<int>(idx.size()) == arity_);
        return coef_[flat_index(out, idx.begin())];
    }
    double coef(int out, std::initializer_list<int> idx) const {
        assert(static_cast<int>(idx.size()) == arity_);
        return coef_[flat_index(out, idx.begin())];
    }

    double& operator[](std::size_t flat) { return coef_[flat]; }
    double operator[](std::size_t flat) const { return coef_[flat]; }

    void eval_into(Vec& out, const Vec* const* args, int count) const {
        assert(count == arity_);
        (void)count;
        out.setZero(dim_);
        const std::size_t block = static_cast<std::size_t>(detail::int_pow(dim_, arity_));
        detail::for_each_index(arity_, dim_, [&](const int* idx) {
            double w = 1.0;
            for (int k = 0; k < arity_; ++k) w *= (*args[k])[idx[k]];
            if (w == 0.0) return;
            std::size_t base = 0;
            for (int k = 0; k < arity_; ++k)
                base = base * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(idx[k]);
            for (int i = 0; i < dim_; ++i) out[i] += coef_[static_cast<std::size_t>(i) * block + base] * w;
        });
    }

    template <class... Args>
    Vec operator()(const Args&... xs) const {
        std::array<const Vec*, sizeof...(Args)> ptrs{(&xs)...};
        Vec out;
        eval_into(out, ptrs.data(), static_cast<int>(sizeof...(Args)));
        return out;
    }

    Vec apply(const Vec& x) const {
        assert(arity_ == 1);
        Vec out(dim_);
        for (int i = 0; i < dim_; ++i) {
            double s = 0.0;
            for (int j = 0; j < dim_; ++j) s += coef_[static_cast<std::size_t>(i * dim_ + j)] * x[j];
            out[i] = s;
        }
        return out;
    }

    Mat as_matrix() const {
        assert(arity_ == 1);
        Mat m(dim_, dim_);
        for (int i = 0; i < dim_; ++i)
            for (int j = 0; j < dim_; ++j) m(i, j) = coef_[static_cast<std::size_t>(i * dim_ + j)];
        return m;
    }

    /// <w, map(.,...,.)>: collapses the output index against w, leaving an
    /// h-linear scalar form. This is how the Hamiltonian Hessians
    /// H_xx, H_xxx, H_xxxx are built from p1, q1 and the coefficient tensors.
    MultilinearForm dot_output(const Vec& w) const {
        MultilinearForm f(arity_, dim_);
        const std::size_t block = static_cast<std::size_t>(detail::int_pow(dim_, arity_));
        for (std::size_t j = 0; j < block; ++j) {
            double s = 0.0;
            for (int i = 0; i < dim_; ++i) s += w[i] * coef_[static_cast<std::size_t>(i) * block + j];
            f[j] = s;
        }
        return f;
    }

    MultilinearForm component(int i) const {
        MultilinearForm f(arity_, dim_);
        const std::size_t block = static_cast<std::size_t>(detail::int_pow(dim_, arity_));
        for (std::size_t j = 0; j < block; ++j) f[j] = coef_[static_cast<std::size_t>(i) * block + j];
        return f;
    }

    double norm() const {
        double s = 0.0;
        for (double c : coef_) s += c * c;
        return std::sqrt(s);
    }

    MultilinearMap& operator-=(const MultilinearMap& o) {
        if (arity_ != o.arity_ || dim_ != o.dim_) throw std::invalid_argument("MultilinearMap: shape mismatch");
        for (std::size_t k = 0; k < coef_.size(); ++k) coef_[k] -= o.coef_[k];
        return *this;
    }
    friend MultilinearMap operator-(MultilinearMap a, const MultilinearMap& b) { return a -= b; }

private:
    int arity_ = 1;
    int dim_ = 1;
    std::vector<double> coef_{0.0};
};

// ---------------------------------------------------------------------------
// Contraction and composition. Slots are 1-based to read like the displays
// they implement.
// ---------------------------------------------------------------------------

/// Fix slot i of a d-linear form to the vector y; remaining slots keep order.
inline MultilinearForm contract_at(const MultilinearForm& form, const Vec& y, int slot) {
    const int d = form.arity();
    const int n = form.dim();
    if (slot < 1 || slot > d) throw std::out_of_range("contract_at: slot out of range");
    if (y.size() != n) throw std::invalid_argument("contract_at: dim mismatch");
    MultilinearForm out(d - 1, n);
    std::array<int, 8> full{};
    detail::for_each_index(d - 1, n, [&](const int* idx) {
        for (int k = 0, p = 0; k < d; ++k) {
            if (k == slot - 1) continue;
            full[static_cast<std::size_t>(k)] = idx[p++];
        }
        double s = 0.0;
        for (int a = 0; a < n; ++a) {
            full[static_cast<std::size_t>(slot - 1)] = a;
            s += form[form.flat_index(full.data())] * y[a];
        }
        out[out.flat_index(idx)] = s;
    });
    return out;
}

/// Fix slots i and j (i != j) to y and z respectively.
inline MultilinearForm contract_two_at(const MultilinearForm& form, const Vec& y, const Vec& z, int i, int j) {
    const int d = form.arity();
    const int n = form.dim();
    if (i < 1 || i > d || j < 1 || j > d || i == j)
        throw std::out_of_range("contract_two_at: slots out of range");
    if (y.size() != n || z.size() != n) throw std::invalid_argument("contract_two_at: dim mismatch");
    MultilinearForm out(d - 2, n);
    std::array<int, 8> full{};
    detail::for_each_index(d - 2, n, [&](const int* idx) {
        for (int k = 0, p = 0; k < d; ++k) {
            if (k == i - 1 || k == j - 1) continue;
            full[static_cast<std::size_t>(k)] = idx[p++];
        }
        double s = 0.0;
        for (int a = 0; a < n; ++a) {
            full[static_cast<std::size_t>(i - 1)] = a;
            for (int b = 0; b < n; ++b) {
                full[static_cast<std::size_t>(j - 1)] = b;
                s += form[form.flat_index(full.data())] * y[a] * z[b];
            }
        }
        out[out.flat_index(idx)] = s;
    });
    return out;
}

/// Precompose slot i of a d-linear form with an h-linear map; the result has
/// arity d + h - 1. For h = 1 this is the usual slot-wise composition with a
/// matrix; the adjoint drifts also need h = 2, 3 (Hessian and third-derivative
/// couplings).
inline MultilinearForm compose_at(const MultilinearForm& form, const MultilinearMap& gamma, int slot) {
    const int d = form.arity();
    const int n = form.dim();
    const int h = gamma.arity();
    if (slot < 1 || slot > d) throw std::out_of_range("compose_at: slot out of range");
    if (gamma.dim() != n) throw std::invalid_argument("compose_at: dim mismatch");
    MultilinearForm out(d + h - 1, n);
    std::array<int, 8> lam{};
    detail::for_each_index(d + h - 1, n, [&](const int* idx) {
        // Result slots [slot-1, slot-1+h) feed gamma; the rest feed the form.
        for (int k = 0; k < slot - 1; ++k) lam[static_cast<std::size_t>(k)] = idx[k];
        for (int k = slot; k < d; ++k) lam[static_cast<std::size_t>(k)] = idx[k + h - 1];
        double s = 0.0;
        for (int a = 0; a < n; ++a) {
            lam[static_cast<std::size_t>(slot - 1)] = a;
            std::size_t gidx = static_cast<std::size_t>(a);
            for (int k = 0; k < h; ++k)
                gidx = gidx * static_cast<std::size_t>(n) + static_cast<std::size_t>(idx[slot - 1 + k]);
            s += form[form.flat_index(lam.data())] * gamma[gidx];
        }
        out[out.flat_index(idx)] = s;
    });
    return out;
}

/// Precompose slots i and j (i != j) with maps gamma (h-linear) and theta
/// (l-linear); the result has arity d + h + l - 2. Result slots are laid out
/// in the form's slot order, each composed slot expanding to the width of its
/// map.
inline MultilinearForm compose_two_at(const MultilinearForm& form, const MultilinearMap& gamma,
                                      const MultilinearMap& theta, int i, int j) {
    const int d = form.arity();
    const int n = form.dim();
    const int h = gamma.arity();
    const int l = theta.arity();
    if (i < 1 || i > d || j < 1 || j > d || i == j)
        throw std::out_of_range("compose_two_at: slots out of range");
    if (gamma.dim() != n || theta.dim() != n) throw std::invalid_argument("compose_two_at: dim mismatch");
    // Offset of each form slot in the result index space.
    std::array<int, 8> offset{};
    int pos = 0;
    for (int k = 0; k < d; ++k) {
        offset[static_cast<std::size_t>(k)] = pos;
        pos += (k == i - 1) ? h : (k == j - 1) ? l : 1;
    }
    MultilinearForm out(d + h + l - 2, n);
    std::array<int, 8> lam{};
    detail::for_each_index(d + h + l - 2, n, [&](const int* idx) {
        for (int k = 0; k < d; ++k) {
            if (k == i - 1 || k == j - 1) continue;
            lam[static_cast<std::size_t>(k)] = idx[offset[static_cast<std::size_t>(k)]];
        }
        double s = 0.0;
        for (int a = 0; a < n; ++a) {
            lam[static_cast<std::size_t>(i - 1)] = a;
            std::size_t gidx = static_cast<std::size_t>(a);
            for (int k = 0; k < h; ++k)
                gidx = gidx * static_cast<std::size_t>(n) +
                       static_cast<std::size_t>(idx[offset[static_cast<std::size_t>(i - 1)] + k]);
            const double gw = gamma[gidx];
            if (gw == 0.0) continue;
            for (int b = 0; b < n; ++b) {
                lam[static_cast<std::size_t>(j - 1)] = b;
                std::size_t tidx = static_cast<std::size_t>(b);
                for (int k = 0; k < l; ++k)
                    tidx = tidx * static_cast<std::size_t>(n) +
                           static_cast<std::size_t>(idx[offset[static_cast<std::size_t>(j - 1)] + k]);
                s += form[form.flat_index(lam.data())] * gw * theta[tidx];
            }
        }
        out[out.flat_index(idx)] = s;
    });
    return out;
}

}  // namespace needlecheck
