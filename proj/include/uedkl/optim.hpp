#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "uedkl/mat.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

// A named handle to a parameter tensor owned by some model struct.
struct ParamRef {
    std::string name;
    Mat* mat = nullptr;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are allocated on the first step
// and keyed by parameter order, which must stay stable across steps.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    int64_t steps_taken() const { return t_; }

    void step(const std::vector<ParamRef>& params, const std::vector<Mat>& grads) {
        if (params.size() != grads.size()) throw ContractError("adam_step: param/grad count mismatch");
        if (m_.empty()) {
            for (const ParamRef& p : params) {
                m_.emplace_back(p.mat->rows(), p.mat->cols());
                v_.emplace_back(p.mat->rows(), p.mat->cols());
            }
        }
        if (m_.size() != params.size()) throw ContractError("adam_step: parameter set changed size");
        // Validate everything before mutating any state so a bad gradient
        // rejects the whole step.
        for (size_t i = 0; i < params.size(); ++i) {
            if (!params[i].mat->same_shape(grads[i]))
                throw ContractError("adam_step: gradient shape mismatch for " + params[i].name);
            if (!grads[i].all_finite())
                throw NumericalError("adam_step: non-finite gradient in " + params[i].name +
                                     " at step " + std::to_string(t_ + 1));
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Mat& p = *params[i].mat;
            const Mat& g = grads[i];
            Mat& m = m_[i];
            Mat& v = v_[i];
            for (size_t k = 0; k < p.size(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<Mat> m_, v_;
};

struct FdCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_coord = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    size_t coords_checked = 0;
};

inline double fd_rel_err(double numeric, double analytic) {
    const double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-6});
    return std::fabs(numeric - analytic) / denom;
}

// Central-difference gradient check. loss_fn must read the live parameter
// tensors and be deterministic (freeze any random streams so both sides of
// each perturbation see identical noise). Coordinates are subsampled per
// tensor to bound runtime; the subset is deterministic in `seed`.
inline FdCheckResult finite_diff_check(const std::vector<ParamRef>& params,
                                       const std::function<double()>& loss_fn,
                                       const std::vector<Mat>& analytic_grads, double step = 1e-5,
                                       size_t max_coords_per_tensor = 200, uint64_t seed = 1234) {
    if (params.size() != analytic_grads.size())
        throw ContractError("finite_diff_check: param/grad count mismatch");
    FdCheckResult res;
    Rng rng(seed);
    for (size_t t = 0; t < params.size(); ++t) {
        Mat& p = *params[t].mat;
        if (!p.same_shape(analytic_grads[t]))
            throw ContractError("finite_diff_check: gradient shape mismatch for " + params[t].name);
        std::vector<size_t> coords(p.size());
        std::iota(coords.begin(), coords.end(), size_t{0});
        if (coords.size() > max_coords_per_tensor) {
            rng.shuffle(coords);
            coords.resize(max_coords_per_tensor);
        }
        for (size_t c : coords) {
            const double orig = p[c];
            p[c] = orig + step;
            const double fp = loss_fn();
            p[c] = orig - step;
            const double fm = loss_fn();
            p[c] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = analytic_grads[t][c];
            const double err = fd_rel_err(fd, an);
            ++res.coords_checked;
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_param = params[t].name;
                res.worst_coord = static_cast<int>(c);
                res.analytic = an;
                res.numeric = fd;
            }
        }
    }
    return res;
}

}  // namespace uedkl
