#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uedkl/autodiff.hpp"
#include "uedkl/mat.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

// Sparse variational GP layer: J latent units share one RBF kernel and one
// set of M inducing locations; each unit carries an independent Gaussian
// variational posterior with diagonal covariance over the inducing values.
struct GPConfig {
    int num_units = 16;    // J
    int num_inducing = 32; // M
    int input_dim = 64;    // D, must match the encoder width
    double jitter = 1e-6;

    void validate() const {
        if (num_units < 1) throw ConfigError("gp: num_units must be positive");
        if (num_inducing < 1) throw ConfigError("gp: num_inducing must be positive");
        if (input_dim < 1) throw ConfigError("gp: input_dim must be positive");
        if (!(jitter > 0.0)) throw ConfigError("gp: jitter must be positive");
    }
};

struct GPLayerParams {
    GPConfig cfg;
    Mat z;          // M x D inducing locations
    Mat o;          // J x M variational means, row j is o_j
    Mat log_s;      // J x M log of diagonal variational variances
    Mat log_gamma;  // 1 x 1 log RBF bandwidth

    static GPLayerParams init(const GPConfig& cfg, Rng& rng) {
        cfg.validate();
        GPLayerParams p;
        p.cfg = cfg;
        // Encoder outputs are layer-normalized, so unit-normal inducing
        // locations start in-distribution; gamma = 2D makes typical pairs
        // score about exp(-1).
        p.z = rng.normal_mat(cfg.num_inducing, cfg.input_dim);
        p.o = rng.normal_mat(cfg.num_units, cfg.num_inducing, 0.1);
        p.log_s = Mat(cfg.num_units, cfg.num_inducing, std::log(0.1));
        p.log_gamma = Mat(1, 1, std::log(2.0 * cfg.input_dim));
        return p;
    }

    double gamma() const { return std::exp(log_gamma(0, 0)); }
};

template <typename Params, typename F>
void visit_gp_params(Params& p, F&& f) {
    f("z", p.z);
    f("o", p.o);
    f("log_s", p.log_s);
    f("log_gamma", p.log_gamma);
}

struct GPVars {
    Var z, o, log_s, log_gamma;
};

inline GPVars gp_vars_from_list(const std::vector<Var>& vs) {
    if (vs.size() != 4) throw ContractError("gp_vars_from_list: expected 4 tensors");
    return {vs[0], vs[1], vs[2], vs[3]};
}

inline GPVars make_gp_vars(Tape& tape, const GPLayerParams& p, bool trainable,
                           std::vector<Var>* registry = nullptr) {
    std::vector<Var> flat;
    visit_gp_params(p, [&](const std::string&, const Mat& m) {
        flat.push_back(trainable ? tape.input(m) : tape.constant(m));
    });
    if (registry) registry->insert(registry->end(), flat.begin(), flat.end());
    return gp_vars_from_list(flat);
}

// k(a, b) = exp(-||a - b||^2 / gamma), plain matrices.
inline Mat rbf_kernel(const Mat& a, const Mat& b, double gamma) {
    if (!(gamma > 0.0)) throw ContractError("rbf_kernel: gamma must be positive");
    Mat d = pairwise_sqdist(a, b);
    Mat out(d.rows(), d.cols());
    for (size_t i = 0; i < d.size(); ++i) out[i] = std::exp(-d[i] / gamma);
    return out;
}

// Same kernel as a tape subgraph. Squared distances are assembled from row
// norms and a cross product so the whole thing stays differentiable in a, b
// and log_gamma.
inline Var rbf_kernel_var(Var a, Var b, Var log_gamma) {
    Var na = row_sum(square(a));                   // A x 1
    Var nb = transpose(row_sum(square(b)));        // 1 x B
    Var cross = scale(matmul(a, transpose(b)), -2.0);
    Var sqd = add_col_broadcast(add_row_broadcast(cross, nb), na);
    Var neg_inv_gamma = neg(recip(vexp(log_gamma)));
    return vexp(mul_scalar(sqd, neg_inv_gamma));
}

// Probes Cholesky on K_ZZ + eps I with eps, 10 eps, 100 eps and returns the
// first value that factorizes. Runs on plain matrices: the probe must not
// leave nodes on any tape.
inline double choose_jitter(const Mat& kzz, double base_eps) {
    if (!(base_eps > 0.0)) throw ContractError("choose_jitter: base_eps must be positive");
    double eps = base_eps;
    for (int attempt = 0; attempt < 3; ++attempt) {
        Mat k = kzz;
        for (int i = 0; i < k.rows(); ++i) k(i, i) += eps;
        try {
            cholesky(k);
            return eps;
        } catch (const NumericalError&) {
            eps *= 10.0;
        }
    }
    throw NumericalError("gp: kernel matrix not positive definite even with jitter escalated to " +
                         std::to_string(base_eps * 100.0));
}

inline double choose_jitter(const GPLayerParams& p) {
    return choose_jitter(rbf_kernel(p.z, p.z, p.gamma()), p.cfg.jitter);
}

struct GPPredictVars {
    Var mu;  // B x J posterior means
    Var v;   // B x J posterior variances, floored at eps
};

// Variational predictive at feature rows x (B x D):
//   A   = K_xZ (K_ZZ + eps I)^-1
//   mu  = A O^T
//   v_j = 1 - rowsum(A . K_xZ) + (A . A) s_j,  clamped below at eps
// (k(x, x) = 1 for this kernel, hence the leading 1).
inline GPPredictVars gp_predictive(Tape& tape, const GPVars& gv, Var x, double eps) {
    if (!(eps > 0.0)) throw ContractError("gp_predictive: eps must be positive");
    Var kxz = rbf_kernel_var(x, gv.z, gv.log_gamma);
    Var kzz = rbf_kernel_var(gv.z, gv.z, gv.log_gamma);
    const int m = gv.z.rows();
    Mat eps_eye = Mat::identity(m);
    eps_eye *= eps;
    Var kzz_eps = add(kzz, tape.constant(std::move(eps_eye)));
    Var a = transpose(solve_spd(kzz_eps, transpose(kxz)));   // B x M
    Var mu = matmul(a, transpose(gv.o));                     // B x J
    Var c = add_const(neg(row_sum(mul(a, kxz))), 1.0);       // B x 1
    Var s = vexp(gv.log_s);                                  // J x M
    Var v = clamp_min(add_col_broadcast(matmul(mul(a, a), transpose(s)), c), eps);
    return {mu, v};
}

// KL(q || p) summed over the J units, for q_j = N(o_j, diag s_j) and
// p = N(0, K_ZZ + eps I):
//   sum_j 0.5 [ tr(K^-1 diag s_j) + o_j K^-1 o_j - M + logdet K - sum_m log s_jm ]
inline Var gp_kl(Tape& tape, const GPVars& gv, double eps) {
    if (!(eps > 0.0)) throw ContractError("gp_kl: eps must be positive");
    const int m = gv.z.rows();
    const int j = gv.o.rows();
    Var kzz = rbf_kernel_var(gv.z, gv.z, gv.log_gamma);
    Mat eps_eye = Mat::identity(m);
    eps_eye *= eps;
    Var k = add(kzz, tape.constant(std::move(eps_eye)));

    Var ot = transpose(gv.o);                                  // M x J
    Var quad = sum_all(mul(ot, solve_spd(k, ot)));             // sum_j o_j K^-1 o_j
    Var kinv_diag = diag_part(solve_spd(k, tape.constant(Mat::identity(m))));
    Var s = vexp(gv.log_s);
    Var tr_term = sum_all(mul(col_sum(s), kinv_diag));         // sum_j tr(K^-1 diag s_j)
    Var logdet = scale(logdet_spd(k), static_cast<double>(j));
    Var total = sub(add(add(quad, tr_term), logdet), sum_all(gv.log_s));
    return add_const(scale(total, 0.5), -0.5 * static_cast<double>(j) * static_cast<double>(m));
}

struct GPPrediction {
    Mat mu;  // B x J
    Mat v;   // B x J
};

// Inference-path predictive on plain matrices (no tape, no gradients).
inline GPPrediction gp_predict(const GPLayerParams& p, const Mat& x, double eps) {
    if (!(eps > 0.0)) throw ContractError("gp_predict: eps must be positive");
    if (x.cols() != p.cfg.input_dim) throw ContractError("gp_predict: feature width mismatch");
    const double gamma = p.gamma();
    Mat kxz = rbf_kernel(x, p.z, gamma);
    Mat kzz = rbf_kernel(p.z, p.z, gamma);
    for (int i = 0; i < kzz.rows(); ++i) kzz(i, i) += eps;
    Mat l = cholesky(kzz);
    Mat a = transpose(chol_solve(l, transpose(kxz)));  // B x M
    Mat mu = matmul(a, transpose(p.o));

    const int b = x.rows(), j = p.cfg.num_units, m = p.cfg.num_inducing;
    Mat v(b, j);
    for (int i = 0; i < b; ++i) {
        double c = 1.0;
        for (int k = 0; k < m; ++k) c -= a(i, k) * kxz(i, k);
        for (int u = 0; u < j; ++u) {
            double acc = c;
            for (int k = 0; k < m; ++k) acc += a(i, k) * a(i, k) * std::exp(p.log_s(u, k));
            v(i, u) = std::max(acc, eps);
        }
    }
    return {std::move(mu), std::move(v)};
}

}  // namespace uedkl
