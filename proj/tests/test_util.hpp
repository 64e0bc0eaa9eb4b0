#pragma once

// Shared helpers for the test suite: finite-difference gradient checking
// against the tape, and a small symmetric eigensolver for covariance checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "uedkl/autodiff.hpp"
#include "uedkl/mat.hpp"

namespace testutil {

using uedkl::Mat;
using uedkl::Tape;
using uedkl::Var;

// A differentiable scalar function of several matrix inputs, expressed as a
// tape program. The harness below runs it twice: once with inputs as tape
// inputs (analytic gradients), then repeatedly with perturbed values
// (finite differences).
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    int worst_input = -1;
    int worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

inline double rel_err(double num, double ana) {
    const double denom = std::max({std::fabs(num), std::fabs(ana), 1e-6});
    return std::fabs(num - ana) / denom;
}

// Central-difference check of every coordinate of every input tensor.
inline GradCheckResult check_gradients(const TapeFn& fn, const std::vector<Mat>& inputs,
                                       double h = 1e-5) {
    // Analytic pass.
    std::vector<Mat> grads;
    {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(inputs.size());
        for (const Mat& m : inputs) vars.push_back(tape.input(m));
        Var root = fn(tape, vars);
        tape.backward(root);
        for (Var v : vars) grads.push_back(tape.grad_of(v));
    }

    auto eval = [&](const std::vector<Mat>& vals) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(vals.size());
        for (const Mat& m : vals) vars.push_back(tape.input(m));
        return fn(tape, vars).val()(0, 0);
    };

    GradCheckResult res;
    std::vector<Mat> work = inputs;
    for (size_t t = 0; t < inputs.size(); ++t) {
        for (size_t c = 0; c < inputs[t].size(); ++c) {
            const double orig = work[t][c];
            work[t][c] = orig + h;
            const double fp = eval(work);
            work[t][c] = orig - h;
            const double fm = eval(work);
            work[t][c] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = grads[t][c];
            const double e = rel_err(fd, an);
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_input = static_cast<int>(t);
                res.worst_coord = static_cast<int>(c);
                res.analytic = an;
                res.numeric = fd;
            }
        }
    }
    return res;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations; ascending.
inline std::vector<double> symmetric_eigenvalues(const Mat& a_in, int max_sweeps = 100) {
    Mat a = a_in;
    const int n = a.rows();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-28) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::fabs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double sgn = theta >= 0.0 ? 1.0 : -1.0;
                const double tt = sgn / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(tt * tt + 1.0);
                const double s = tt * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) ev[static_cast<size_t>(i)] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

}  // namespace testutil
