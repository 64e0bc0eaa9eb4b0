#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uedkl/autodiff.hpp"
#include "uedkl/base_learner.hpp"
#include "uedkl/mat.hpp"
#include "uedkl/optim.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

struct EnsembleConfig {
    int num_learners = 6;  // H
    int num_classes = 0;   // C
    int dim = 32;          // attention dimension d
    double delta = 0.001;  // uncertainty-penalty coefficient
    double zeta = 1e-4;    // L2-norm coefficient

    void validate() const {
        if (num_learners < 1) throw ConfigError("ensemble: num_learners must be positive");
        if (num_classes < 2) throw ConfigError("ensemble: num_classes must be at least 2");
        if (dim < 1) throw ConfigError("ensemble: dim must be positive");
        if (delta < 0.0 || zeta < 0.0)
            throw ConfigError("ensemble: delta and zeta must be nonnegative");
    }
};

// Attention combiner parameters. Keys come from flattened base covariances,
// queries from per-class prediction columns.
struct EnsembleParams {
    EnsembleConfig cfg;
    Mat w_k;  // d x C^2
    Mat b_k;  // 1 x d
    Mat w_q;  // d x H
    Mat b_q;  // 1 x d

    static EnsembleParams init(const EnsembleConfig& cfg, Rng& rng) {
        cfg.validate();
        EnsembleParams p;
        p.cfg = cfg;
        const int c2 = cfg.num_classes * cfg.num_classes;
        p.w_k = rng.normal_mat(cfg.dim, c2, 1.0 / std::sqrt(static_cast<double>(c2)));
        p.b_k = Mat(1, cfg.dim, 0.0);
        p.w_q = rng.normal_mat(cfg.dim, cfg.num_learners,
                               1.0 / std::sqrt(static_cast<double>(cfg.num_learners)));
        p.b_q = Mat(1, cfg.dim, 0.0);
        return p;
    }
};

template <typename Params, typename F>
void visit_ensemble_params(Params& p, F&& f) {
    f("w_k", p.w_k);
    f("b_k", p.b_k);
    f("w_q", p.w_q);
    f("b_q", p.b_q);
}

inline std::vector<ParamRef> collect_ensemble_params(EnsembleParams& p) {
    std::vector<ParamRef> out;
    visit_ensemble_params(p, [&](const std::string& n, Mat& m) { out.push_back({n, &m}); });
    return out;
}

struct EnsembleVars {
    Var w_k, b_k, w_q, b_q;
};

inline EnsembleVars make_ensemble_vars(Tape& tape, const EnsembleParams& p, bool trainable,
                                       std::vector<Var>* registry = nullptr) {
    std::vector<Var> flat;
    visit_ensemble_params(p, [&](const std::string&, const Mat& m) {
        flat.push_back(trainable ? tape.input(m) : tape.constant(m));
    });
    if (registry) registry->insert(registry->end(), flat.begin(), flat.end());
    return {flat[0], flat[1], flat[2], flat[3]};
}

// Stage-1 outputs for one record, reduced to the tensors stage 2 consumes:
// the H x C prediction matrix, row-major-flattened covariances (H x C^2),
// and per-class cross-learner covariances from index-paired samples.
struct PreparedEnsembleItem {
    Mat u;                      // H x C
    Mat flat_e;                 // H x C^2
    std::vector<Mat> cov_c;     // C matrices, each H x H
    int label = -1;
};

inline PreparedEnsembleItem prepare_ensemble_item(const std::vector<BasePrediction>& preds,
                                                  int num_classes, int label = -1) {
    const int h = static_cast<int>(preds.size());
    if (h < 1) throw ContractError("ensemble: need at least one base prediction");
    const int c = num_classes;
    const int t = preds[0].samples.rows();
    for (const BasePrediction& p : preds) {
        if (p.probs.cols() != c || p.cov.rows() != c || p.cov.cols() != c)
            throw ContractError("ensemble: class-count mismatch in base predictions");
        if (p.samples.rows() != t)
            throw ContractError("ensemble: sample counts differ across learners");
        if (p.samples.cols() != c) throw ContractError("ensemble: sample width mismatch");
        for (int i = 0; i < c; ++i)
            for (int jj = 0; jj < c; ++jj)
                if (p.cov(i, jj) != p.cov(jj, i))
                    throw ContractError("ensemble: base covariance not symmetric");
    }

    PreparedEnsembleItem item;
    item.label = label;
    item.u = Mat(h, c);
    item.flat_e = Mat(h, c * c);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < c; ++j) item.u(i, j) = preds[static_cast<size_t>(i)].probs(0, j);
        for (int a = 0; a < c; ++a)
            for (int b = 0; b < c; ++b)
                item.flat_e(i, a * c + b) = preds[static_cast<size_t>(i)].cov(a, b);
    }
    // cov_c[cl](g, h2): index-paired sample covariance of class-cl
    // probabilities between learners, 1/T convention. The diagonal repeats
    // the per-learner variance computation bit for bit.
    item.cov_c.assign(static_cast<size_t>(c), Mat(h, h));
    for (int cl = 0; cl < c; ++cl) {
        Mat& cov = item.cov_c[static_cast<size_t>(cl)];
        for (int g = 0; g < h; ++g) {
            const BasePrediction& pg = preds[static_cast<size_t>(g)];
            for (int h2 = 0; h2 < h; ++h2) {
                const BasePrediction& ph = preds[static_cast<size_t>(h2)];
                double acc = 0.0;
                for (int tt = 0; tt < t; ++tt)
                    acc += (pg.samples(tt, cl) - pg.probs(0, cl)) *
                           (ph.samples(tt, cl) - ph.probs(0, cl));
                cov(g, h2) = acc / t;
            }
        }
    }
    return item;
}

// alpha: H x C, column c = softmax over learners of (K q^c) / sqrt(d) with
// K_h = W_k flat(Sigma_h) + b_k and q^c = W_q u^c + b_q.
inline Mat attention_weights(const PreparedEnsembleItem& item, const EnsembleParams& p) {
    const int h = item.u.rows(), c = item.u.cols(), d = p.cfg.dim;
    if (h != p.cfg.num_learners) throw ContractError("ensemble: learner count mismatch");
    if (c != p.cfg.num_classes) throw ContractError("ensemble: class count mismatch");

    Mat keys = matmul(item.flat_e, transpose(p.w_k));  // H x d
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < d; ++j) keys(i, j) += p.b_k(0, j);

    Mat alpha(h, c);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> q(static_cast<size_t>(d)), scores(static_cast<size_t>(h));
    for (int cl = 0; cl < c; ++cl) {
        for (int j = 0; j < d; ++j) {
            double acc = p.b_q(0, j);
            for (int g = 0; g < h; ++g) acc += p.w_q(j, g) * item.u(g, cl);
            q[static_cast<size_t>(j)] = acc;
        }
        for (int g = 0; g < h; ++g) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) acc += keys(g, j) * q[static_cast<size_t>(j)];
            scores[static_cast<size_t>(g)] = acc * inv_sqrt_d;
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        for (int g = 0; g < h; ++g) {
            alpha(g, cl) = std::exp(scores[static_cast<size_t>(g)] - mx);
            z += alpha(g, cl);
        }
        for (int g = 0; g < h; ++g) alpha(g, cl) /= z;
    }
    return alpha;
}

inline Mat attention_weights(const std::vector<BasePrediction>& preds, const EnsembleParams& p) {
    return attention_weights(prepare_ensemble_item(preds, p.cfg.num_classes), p);
}

// yhat_c = sum_h alpha_hc u_hc.
inline Mat combine(const Mat& u, const Mat& alpha) {
    if (!u.same_shape(alpha)) throw ContractError("combine: shape mismatch");
    Mat out(1, u.cols());
    for (int c = 0; c < u.cols(); ++c) {
        double acc = 0.0;
        for (int h = 0; h < u.rows(); ++h) acc += alpha(h, c) * u(h, c);
        out(0, c) = acc;
    }
    return out;
}

// sigma(yhat_c) = alpha_c^T Cov_c alpha_c, floored at 0. Expanding the
// quadratic form gives sum_h alpha^2 sigma_h + 2 sum_{g<h} alpha alpha cov.
inline Mat ensemble_sigma(const Mat& alpha, const std::vector<Mat>& cov_c) {
    const int h = alpha.rows(), c = alpha.cols();
    if (static_cast<int>(cov_c.size()) != c) throw ContractError("ensemble_sigma: class mismatch");
    Mat out(1, c);
    for (int cl = 0; cl < c; ++cl) {
        const Mat& cov = cov_c[static_cast<size_t>(cl)];
        if (cov.rows() != h || cov.cols() != h)
            throw ContractError("ensemble_sigma: covariance shape mismatch");
        double acc = 0.0;
        for (int g = 0; g < h; ++g) {
            double row = 0.0;
            for (int h2 = 0; h2 < h; ++h2) row += cov(g, h2) * alpha(h2, cl);
            acc += alpha(g, cl) * row;
        }
        out(0, cl) = std::max(acc, 0.0);
    }
    return out;
}

struct EnsemblePrediction {
    Mat combined;  // 1 x C weighted prediction yhat
    Mat alpha;     // H x C attention weights
    Mat sigma;     // 1 x C per-class ensemble variance
    double u = 0.0;  // total uncertainty, sum of sigma left to right
    int pred = 0;    // argmax_c yhat_c (first index wins ties)
};

inline EnsemblePrediction ensemble_predict(const std::vector<BasePrediction>& preds,
                                           const EnsembleParams& p) {
    PreparedEnsembleItem item = prepare_ensemble_item(preds, p.cfg.num_classes);
    EnsemblePrediction out;
    out.alpha = attention_weights(item, p);
    out.combined = combine(item.u, out.alpha);
    out.sigma = ensemble_sigma(out.alpha, item.cov_c);
    out.u = 0.0;
    for (int c = 0; c < out.sigma.cols(); ++c) out.u += out.sigma(0, c);
    out.pred = 0;
    for (int c = 1; c < out.combined.cols(); ++c)
        if (out.combined(0, c) > out.combined(0, out.pred)) out.pred = c;
    return out;
}

struct EnsembleItemVars {
    Var yhat;   // 1 x C
    Var sigma;  // 1 x C, floored at 0
};

// Tape version of the combiner for one prepared item; stage-1 tensors enter
// as constants, only the four ensemble parameters receive gradients.
inline EnsembleItemVars ensemble_item_graph(Tape& tape, const EnsembleVars& ev,
                                            const PreparedEnsembleItem& item) {
    const int c = item.u.cols();
    const int d = ev.w_k.rows();
    Var u = tape.constant(item.u);
    Var keys = add_row_broadcast(matmul(tape.constant(item.flat_e), transpose(ev.w_k)), ev.b_k);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<Var> yc, sc;
    yc.reserve(static_cast<size_t>(c));
    sc.reserve(static_cast<size_t>(c));
    for (int cl = 0; cl < c; ++cl) {
        Var uc = slice_cols(u, cl, cl + 1);                          // H x 1
        Var q = add(matmul(ev.w_q, uc), transpose(ev.b_q));          // d x 1
        Var alpha = row_softmax(transpose(scale(matmul(keys, q), inv_sqrt_d)));  // 1 x H
        yc.push_back(matmul(alpha, uc));
        Var cov = tape.constant(item.cov_c[static_cast<size_t>(cl)]);
        sc.push_back(clamp_min(matmul(matmul(alpha, cov), transpose(alpha)), 0.0));
    }
    return {concat_cols(yc), concat_cols(sc)};
}

// L2 = mean cross-entropy of softmax(yhat) + delta * mean total sigma
//      + zeta * ||(W_k, b_k, W_q, b_q)||_2.
inline Var ensemble_loss(Tape& tape, const EnsembleVars& ev,
                         const std::vector<PreparedEnsembleItem>& batch, double delta,
                         double zeta) {
    if (batch.empty()) throw ContractError("ensemble_loss: empty batch");
    const int b = static_cast<int>(batch.size());

    Var ce_acc, sigma_acc;
    for (int i = 0; i < b; ++i) {
        const PreparedEnsembleItem& item = batch[static_cast<size_t>(i)];
        const int c = item.u.cols();
        if (item.label < 0 || item.label >= c)
            throw ContractError("ensemble_loss: label out of range");
        EnsembleItemVars g = ensemble_item_graph(tape, ev, item);
        Mat onehot(1, c);
        onehot(0, item.label) = 1.0;
        Var picked = sum_all(mul(row_log_softmax(g.yhat), tape.constant(std::move(onehot))));
        Var ssum = sum_all(g.sigma);
        ce_acc = i == 0 ? picked : add(ce_acc, picked);
        sigma_acc = i == 0 ? ssum : add(sigma_acc, ssum);
    }

    Var loss = add(scale(ce_acc, -1.0 / b), scale(sigma_acc, delta / b));
    if (zeta != 0.0) {
        Var sq = add(add(sum_all(square(ev.w_k)), sum_all(square(ev.b_k))),
                     add(sum_all(square(ev.w_q)), sum_all(square(ev.b_q))));
        loss = add(loss, scale(vsqrt(sq), zeta));
    }
    if (!std::isfinite(loss.val()(0, 0)))
        throw DivergenceError("ensemble_loss: non-finite loss (batch size " + std::to_string(b) + ")");
    return loss;
}

struct TrainEnsembleOptions {
    int epochs = 50;
    int batch_size = 64;
    double lr = 1e-3;
};

struct TrainEnsembleResult {
    std::vector<EpochStats> history;
    int best_epoch = -1;
    bool diverged = false;
};

namespace ensemble_detail {

inline double split_loss(const EnsembleParams& p, const std::vector<PreparedEnsembleItem>& split,
                         int batch_size) {
    double total = 0.0;
    int batches = 0;
    for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(split.size(), start + static_cast<size_t>(batch_size));
        std::vector<PreparedEnsembleItem> batch(split.begin() + static_cast<long>(start),
                                                split.begin() + static_cast<long>(end));
        Tape tape;
        EnsembleVars ev = make_ensemble_vars(tape, p, false);
        total += ensemble_loss(tape, ev, batch, p.cfg.delta, p.cfg.zeta).val()(0, 0);
        ++batches;
    }
    return total / batches;
}

}  // namespace ensemble_detail

// Stage-2 optimization over frozen stage-1 outputs: per-epoch shuffling,
// Adam updates, early selection on the validation loss (training loss when
// no validation split is supplied), divergence restores the best snapshot.
inline TrainEnsembleResult train_ensemble(EnsembleParams& p,
                                          const std::vector<PreparedEnsembleItem>& train,
                                          const std::vector<PreparedEnsembleItem>& val,
                                          const TrainEnsembleOptions& opt, uint64_t seed) {
    if (train.empty()) throw ContractError("train_ensemble: empty training split");
    if (opt.epochs < 1 || opt.batch_size < 1)
        throw ConfigError("train_ensemble: epochs and batch_size must be positive");

    std::vector<ParamRef> params = collect_ensemble_params(p);
    AdamConfig acfg;
    acfg.lr = opt.lr;
    Adam adam(acfg);

    TrainEnsembleResult result;
    std::vector<Mat> best;
    double best_score = std::numeric_limits<double>::infinity();

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(seed, 1000 + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        int batches = 0;
        try {
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
                const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
                std::vector<PreparedEnsembleItem> batch;
                batch.reserve(end - start);
                for (size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);

                Tape tape;
                std::vector<Var> registry;
                EnsembleVars ev = make_ensemble_vars(tape, p, true, &registry);
                Var loss = ensemble_loss(tape, ev, batch, p.cfg.delta, p.cfg.zeta);
                tape.backward(loss);
                std::vector<Mat> grads;
                grads.reserve(registry.size());
                for (Var v : registry) grads.push_back(tape.grad_of(v));
                adam.step(params, grads);
                epoch_loss += loss.val()(0, 0);
                ++batches;
            }
        } catch (const DivergenceError&) {
            if (result.best_epoch < 0) throw;
            for (size_t i = 0; i < params.size(); ++i) *params[i].mat = best[i];
            result.diverged = true;
            return result;
        }

        EpochStats stats;
        stats.train_loss = epoch_loss / batches;
        stats.val_loss = ensemble_detail::split_loss(p, val.empty() ? train : val, opt.batch_size);
        result.history.push_back(stats);

        if (!std::isfinite(stats.val_loss)) {
            if (result.best_epoch < 0)
                throw DivergenceError("train_ensemble: non-finite validation loss");
            for (size_t i = 0; i < params.size(); ++i) *params[i].mat = best[i];
            result.diverged = true;
            return result;
        }
        if (stats.val_loss < best_score) {
            best_score = stats.val_loss;
            best.clear();
            for (const ParamRef& pr : params) best.push_back(*pr.mat);
            result.best_epoch = epoch;
        }
    }
    for (size_t i = 0; i < params.size(); ++i) *params[i].mat = best[i];
    return result;
}

}  // namespace uedkl
