#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "uedkl/autodiff.hpp"
#include "uedkl/encoder.hpp"
#include "uedkl/mat.hpp"
#include "uedkl/optim.hpp"
#include "uedkl/rng.hpp"
#include "uedkl/svgp.hpp"

namespace uedkl {

// One tokenized training/evaluation record: vocabulary indices (already
// trimmed, no padding) and the integer class label.
struct EncodedExample {
    std::vector<int> tokens;
    int label = 0;
};

// One deep-kernel classifier: transformer encoder -> SVGP layer -> Monte
// Carlo softmax head with weights W_s (num_classes x num_units, no bias).
struct BaseLearnerModel {
    EncoderParams encoder;
    GPLayerParams gp;
    Mat w_s;
    int num_classes = 0;
    int learner_id = 0;
    uint64_t seed = 0;

    static BaseLearnerModel init(const EncoderConfig& enc_cfg, const GPConfig& gp_cfg,
                                 int num_classes, int learner_id, uint64_t seed) {
        if (num_classes < 2) throw ConfigError("base learner: num_classes must be at least 2");
        if (gp_cfg.input_dim != enc_cfg.dim)
            throw ConfigError("base learner: gp input_dim must equal encoder dim");
        Rng rng(seed);
        BaseLearnerModel m;
        m.encoder = EncoderParams::init(enc_cfg, rng);
        m.gp = GPLayerParams::init(gp_cfg, rng);
        m.w_s = rng.normal_mat(num_classes, gp_cfg.num_units,
                               1.0 / std::sqrt(static_cast<double>(gp_cfg.num_units)));
        m.num_classes = num_classes;
        m.learner_id = learner_id;
        m.seed = seed;
        return m;
    }
};

template <typename Model, typename F>
void visit_base_params(Model& m, F&& f) {
    visit_encoder_params(m.encoder, [&](const std::string& n, auto& mat) { f("encoder." + n, mat); });
    visit_gp_params(m.gp, [&](const std::string& n, auto& mat) { f("gp." + n, mat); });
    f("w_s", m.w_s);
}

inline std::vector<ParamRef> collect_base_params(BaseLearnerModel& m) {
    std::vector<ParamRef> out;
    visit_base_params(m, [&](const std::string& n, Mat& mat) { out.push_back({n, &mat}); });
    return out;
}

struct BaseVars {
    EncoderVars enc;
    GPVars gp;
    Var w_s;
};

inline BaseVars make_base_vars(Tape& tape, const BaseLearnerModel& m, bool trainable,
                               std::vector<Var>* registry = nullptr) {
    std::vector<Var> flat;
    visit_base_params(m, [&](const std::string&, const Mat& mat) {
        flat.push_back(trainable ? tape.input(mat) : tape.constant(mat));
    });
    if (registry) registry->insert(registry->end(), flat.begin(), flat.end());

    const size_t enc_count = 1 + 16 * m.encoder.layers.size() + 5;
    BaseVars bv;
    bv.enc = encoder_vars_from_list({flat.begin(), flat.begin() + enc_count},
                                    static_cast<int>(m.encoder.layers.size()));
    bv.gp = gp_vars_from_list({flat.begin() + enc_count, flat.begin() + enc_count + 4});
    bv.w_s = flat.back();
    return bv;
}

// Replaces the inducing locations with the representations of
// num_inducing randomly chosen examples under the current encoder, so the
// GP grid starts where the payloads actually live.
inline void init_inducing_from_data(BaseLearnerModel& m, const std::vector<EncodedExample>& data,
                                    Rng& rng) {
    if (data.empty()) throw ContractError("init_inducing_from_data: empty dataset");
    for (int i = 0; i < m.gp.cfg.num_inducing; ++i) {
        const size_t pick = static_cast<size_t>(rng.uniform_int(data.size()));
        PayloadRepresentation rep = encode_payload(m.encoder, data[pick].tokens);
        for (int j = 0; j < m.gp.cfg.input_dim; ++j) m.gp.z(i, j) = rep.e_x(0, j);
    }
}

// Reparameterized draws from the GP posterior for one item:
// row t is mu + sqrt(v) . zeta_t with zeta drawn t-ascending, unit-ascending.
inline Mat sample_units(const Mat& mu, const Mat& v, int t_samples, Rng& rng) {
    if (t_samples < 1) throw ContractError("sample_units: need at least one sample");
    if (mu.rows() != 1 || !mu.same_shape(v)) throw ContractError("sample_units: shape mismatch");
    const int j = mu.cols();
    Mat out(t_samples, j);
    for (int t = 0; t < t_samples; ++t)
        for (int u = 0; u < j; ++u) {
            if (v(0, u) < 0.0) throw ContractError("sample_units: negative variance");
            out(t, u) = mu(0, u) + std::sqrt(v(0, u)) * rng.normal();
        }
    return out;
}

struct BasePrediction {
    Mat probs;    // 1 x C, mean over the T sample rows
    Mat cov;      // C x C, population (1/T) covariance of the samples
    Mat samples;  // T x C, retained for ensemble cross-covariances
};

// Mean and 1/T-normalized covariance of sample probability rows. The (i, j)
// and (j, i) accumulators multiply the same pair of doubles, so the result
// is symmetric bitwise and its diagonal equals the per-class variance
// formula exactly.
inline BasePrediction summarize_samples(Mat samples) {
    if (samples.rows() < 1) throw ContractError("summarize_samples: no samples");
    const int t_samples = samples.rows(), c = samples.cols();
    Mat probs(1, c);
    for (int t = 0; t < t_samples; ++t)
        for (int j = 0; j < c; ++j) probs(0, j) += samples(t, j);
    for (int j = 0; j < c; ++j) probs(0, j) /= t_samples;

    Mat cov(c, c);
    std::vector<double> d(static_cast<size_t>(c));
    for (int t = 0; t < t_samples; ++t) {
        for (int j = 0; j < c; ++j) d[static_cast<size_t>(j)] = samples(t, j) - probs(0, j);
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < c; ++j)
                cov(i, j) += d[static_cast<size_t>(i)] * d[static_cast<size_t>(j)];
    }
    for (size_t i = 0; i < cov.size(); ++i) cov[i] /= t_samples;
    return {std::move(probs), std::move(cov), std::move(samples)};
}

// Full Monte-Carlo prediction for one payload (inference path, no tape).
inline BasePrediction forward_predict(const BaseLearnerModel& m, const std::vector<int>& tokens,
                                      int t_samples, Rng& rng, double eps) {
    if (t_samples < 2) throw ContractError("forward_predict: need at least two samples");
    PayloadRepresentation rep = encode_payload(m.encoder, tokens);
    GPPrediction gp = gp_predict(m.gp, rep.e_x, eps);
    Mat f = sample_units(gp.mu, gp.v, t_samples, rng);
    return summarize_samples(softmax_rows(matmul(f, transpose(m.w_s))));
}

inline BasePrediction forward_predict(const BaseLearnerModel& m, const std::vector<int>& tokens,
                                      int t_samples, Rng& rng) {
    return forward_predict(m, tokens, t_samples, rng, choose_jitter(m.gp));
}

// Negated minibatch ELBO:
//   L1 = KL - (N_total / (|batch| T)) sum_t sum_i log softmax(W_s f_i^(t))[label_i]
// Noise is drawn from `rng` as one B x J block per sample index, t-ascending
// and row-major within the block; callers that need reproducible losses
// reseed the generator before each call.
inline Var elbo_loss(Tape& tape, const BaseVars& bv, const BaseLearnerModel& m,
                     const std::vector<EncodedExample>& batch, int64_t n_total, int t_samples,
                     double eps, Rng& rng) {
    if (batch.empty()) throw ContractError("elbo_loss: empty batch");
    if (t_samples < 1) throw ContractError("elbo_loss: need at least one sample");
    if (n_total < static_cast<int64_t>(batch.size()))
        throw ContractError("elbo_loss: n_total smaller than batch");

    const int b = static_cast<int>(batch.size());
    const int c = m.num_classes;
    const int j = m.gp.cfg.num_units;

    std::vector<Var> pooled;
    pooled.reserve(batch.size());
    Mat onehot(b, c);
    for (int i = 0; i < b; ++i) {
        const EncodedExample& ex = batch[static_cast<size_t>(i)];
        if (ex.label < 0 || ex.label >= c) throw ContractError("elbo_loss: label out of range");
        onehot(i, ex.label) = 1.0;
        Var tokens = encoder_forward(tape, bv.enc, m.encoder, ex.tokens);
        pooled.push_back(attention_pool(tokens, bv.enc.pool_w, bv.enc.pool_b, bv.enc.pool_v).pooled);
    }
    Var x = b == 1 ? pooled[0] : concat_rows(pooled);
    GPPredictVars pv = gp_predictive(tape, bv.gp, x, eps);
    Var sd = vsqrt(pv.v);
    Var oh = tape.constant(std::move(onehot));

    Var acc;
    for (int t = 0; t < t_samples; ++t) {
        Mat zeta(b, j);
        for (size_t i = 0; i < zeta.size(); ++i) zeta[i] = rng.normal();
        Var f = add(pv.mu, mul(sd, tape.constant(std::move(zeta))));
        Var picked = sum_all(mul(row_log_softmax(matmul(f, transpose(bv.w_s))), oh));
        acc = t == 0 ? picked : add(acc, picked);
    }
    const double data_scale =
        static_cast<double>(n_total) / (static_cast<double>(b) * static_cast<double>(t_samples));
    Var loss = sub(gp_kl(tape, bv.gp, eps), scale(acc, data_scale));
    if (!std::isfinite(loss.val()(0, 0)))
        throw DivergenceError("elbo_loss: non-finite loss (batch size " + std::to_string(b) + ")");
    return loss;
}

struct TrainBaseOptions {
    int epochs = 50;
    int batch_size = 64;
    double lr = 1e-3;
    int t_train = 16;
};

struct EpochStats {
    double train_loss = 0.0;  // mean per-batch L1 over the epoch
    double val_loss = 0.0;
};

struct TrainBaseResult {
    std::vector<EpochStats> history;
    int best_epoch = -1;
    bool diverged = false;
};

namespace base_detail {

inline double eval_split_loss(const BaseLearnerModel& m, const std::vector<EncodedExample>& split,
                              int batch_size, int t_samples, uint64_t noise_seed) {
    Rng rng(noise_seed);
    double total = 0.0;
    int batches = 0;
    for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(split.size(), start + static_cast<size_t>(batch_size));
        std::vector<EncodedExample> batch(split.begin() + static_cast<long>(start),
                                          split.begin() + static_cast<long>(end));
        const double eps = choose_jitter(m.gp);
        Tape t;
        BaseVars bv = make_base_vars(t, m, false);
        total += elbo_loss(t, bv, m, batch, static_cast<int64_t>(split.size()),
                           t_samples, eps, rng)
                     .val()(0, 0);
        ++batches;
    }
    return total / batches;
}

}  // namespace base_detail

// Stochastic training with per-epoch shuffling, Adam updates, and early
// selection: the returned model is the epoch snapshot with the lowest
// validation loss. A non-finite loss stops training and restores that best
// snapshot (or rethrows if no epoch ever completed).
inline TrainBaseResult train_base(BaseLearnerModel& m, const std::vector<EncodedExample>& train,
                                  const std::vector<EncodedExample>& val,
                                  const TrainBaseOptions& opt) {
    if (train.empty()) throw ContractError("train_base: empty training split");
    if (opt.epochs < 1 || opt.batch_size < 1 || opt.t_train < 1)
        throw ConfigError("train_base: epochs, batch_size and t_train must be positive");

    std::vector<ParamRef> params = collect_base_params(m);
    AdamConfig acfg;
    acfg.lr = opt.lr;
    Adam adam(acfg);

    TrainBaseResult result;
    std::vector<Mat> best;
    double best_score = std::numeric_limits<double>::infinity();

    auto snapshot = [&]() {
        std::vector<Mat> s;
        s.reserve(params.size());
        for (const ParamRef& p : params) s.push_back(*p.mat);
        return s;
    };
    auto restore = [&](const std::vector<Mat>& s) {
        for (size_t i = 0; i < params.size(); ++i) *params[i].mat = s[i];
    };

    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(m.seed, 1000 + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        Rng noise_rng(mix_seed(m.seed, 3000 + static_cast<uint64_t>(epoch)));

        double epoch_loss = 0.0;
        int batches = 0;
        try {
            for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
                const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
                std::vector<EncodedExample> batch;
                batch.reserve(end - start);
                for (size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);

                const double eps = choose_jitter(m.gp);
                Tape tape;
                std::vector<Var> registry;
                BaseVars bv = make_base_vars(tape, m, true, &registry);
                Var loss = elbo_loss(tape, bv, m, batch, static_cast<int64_t>(train.size()),
                                     opt.t_train, eps, noise_rng);
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
            restore(best);
            result.diverged = true;
            return result;
        }

        EpochStats stats;
        stats.train_loss = epoch_loss / batches;
        const std::vector<EncodedExample>& score_split = val.empty() ? train : val;
        stats.val_loss = base_detail::eval_split_loss(
            m, score_split, opt.batch_size, opt.t_train,
            mix_seed(m.seed, 2000 + static_cast<uint64_t>(epoch)));
        result.history.push_back(stats);

        if (!std::isfinite(stats.val_loss)) {
            if (result.best_epoch < 0) throw DivergenceError("train_base: non-finite validation loss");
            restore(best);
            result.diverged = true;
            return result;
        }
        if (stats.val_loss < best_score) {
            best_score = stats.val_loss;
            best = snapshot();
            result.best_epoch = epoch;
        }
    }
    restore(best);
    return result;
}

}  // namespace uedkl
