#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <vector>

#include "uedkl/common.hpp"

namespace uedkl {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 matrices.
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ContractError("Mat: negative shape");
    }

    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        int r = static_cast<int>(rows.size());
        int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        Mat m(r, c);
        int i = 0;
        for (const auto& row : rows) {
            if (static_cast<int>(row.size()) != c) throw ContractError("Mat: ragged rows");
            int j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    Mat& operator+=(const Mat& o) {
        check_shape(o, "operator+=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Mat& operator-=(const Mat& o) {
        check_shape(o, "operator-=");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Mat& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    void check_shape(const Mat& o, const char* what) const {
        if (!same_shape(o)) throw ContractError(std::string(what) + ": shape mismatch");
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline Mat operator+(Mat a, const Mat& b) { return a += b; }
inline Mat operator-(Mat a, const Mat& b) { return a -= b; }
inline Mat operator*(Mat a, double s) { return a *= s; }
inline Mat operator*(double s, Mat a) { return a *= s; }

inline Mat hadamard(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ContractError("hadamard: shape mismatch");
    Mat out = a;
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

// C = A * B, ikj loop order so the inner loop streams over contiguous rows.
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw ContractError("matmul: inner dimension mismatch");
    Mat c(a.rows(), b.cols());
    const int n = a.rows(), k = a.cols(), m = b.cols();
    for (int i = 0; i < n; ++i) {
        const double* arow = a.data() + static_cast<size_t>(i) * k;
        double* crow = c.data() + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.data() + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Mat transpose(const Mat& a) {
    Mat t(a.cols(), a.rows());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// Squared Euclidean distances between rows of A and rows of B, clamped at 0.
inline Mat pairwise_sqdist(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) throw ContractError("pairwise_sqdist: dimension mismatch");
    const int n = a.rows(), m = b.rows(), d = a.cols();
    std::vector<double> na(n), nb(m);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += a(i, j) * a(i, j);
        na[i] = s;
    }
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += b(i, j) * b(i, j);
        nb[i] = s;
    }
    Mat cross = matmul(a, transpose(b));
    Mat out(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out(i, j) = std::max(0.0, na[i] + nb[j] - 2.0 * cross(i, j));
    return out;
}

// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
// Throws NumericalError on a nonpositive pivot.
inline Mat cholesky(const Mat& a) {
    if (a.rows() != a.cols()) throw ContractError("cholesky: matrix not square");
    const int n = a.rows();
    Mat l(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s))
                    throw NumericalError("cholesky: nonpositive pivot at index " + std::to_string(i));
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

// Solves (L L^T) X = B given the Cholesky factor L.
inline Mat chol_solve(const Mat& l, const Mat& b) {
    if (l.rows() != b.rows()) throw ContractError("chol_solve: shape mismatch");
    const int n = l.rows(), m = b.cols();
    Mat x = b;
    // forward substitution L y = b
    for (int c = 0; c < m; ++c) {
        for (int i = 0; i < n; ++i) {
            double s = x(i, c);
            for (int k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        // back substitution L^T x = y
        for (int i = n - 1; i >= 0; --i) {
            double s = x(i, c);
            for (int k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

inline double chol_logdet(const Mat& l) {
    double s = 0.0;
    for (int i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

inline Mat solve_spd(const Mat& a, const Mat& b) { return chol_solve(cholesky(a), b); }

// Row-wise softmax with max subtraction; plain (non-differentiable) path.
inline Mat softmax_rows(const Mat& a) {
    Mat out(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (int j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double z = 0.0;
        for (int j = 0; j < a.cols(); ++j) {
            out(i, j) = std::exp(a(i, j) - mx);
            z += out(i, j);
        }
        for (int j = 0; j < a.cols(); ++j) out(i, j) /= z;
    }
    return out;
}

inline double sum(const Mat& a) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

inline double max_abs(const Mat& a) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s = std::max(s, std::fabs(a[i]));
    return s;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) throw ContractError("max_abs_diff: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s = std::max(s, std::fabs(a[i] - b[i]));
    return s;
}

}  // namespace uedkl
