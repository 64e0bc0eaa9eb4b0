#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "uedkl/ensemble.hpp"

using namespace uedkl;

namespace {

EnsembleConfig ens_cfg(int h, int c, int d, double delta = 0.0, double zeta = 0.0) {
    EnsembleConfig cfg;
    cfg.num_learners = h;
    cfg.num_classes = c;
    cfg.dim = d;
    cfg.delta = delta;
    cfg.zeta = zeta;
    return cfg;
}

// Base prediction fabricated from random sample rows on the simplex.
BasePrediction fake_prediction(int t, int c, Rng& rng, double spread = 1.0) {
    Mat logits = rng.normal_mat(t, c, spread);
    return summarize_samples(softmax_rows(logits));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Two-class prediction whose class-0 log-odds are centered at `center`.
BasePrediction two_class_prediction(double center, int t, Rng& rng, double noise = 0.5) {
    Mat samples(t, 2);
    for (int i = 0; i < t; ++i) {
        const double p = sigmoid(center + noise * rng.normal());
        samples(i, 0) = p;
        samples(i, 1) = 1.0 - p;
    }
    return summarize_samples(std::move(samples));
}

}  // namespace

TEST_CASE("attention weights match a straight-line transcription", "[ensemble]") {
    // Formula oracle: keys, queries, scaled scores and the
    // per-class softmax are recomputed below with independent scalar loops.
    Rng rng(21);
    const int h = 3, c = 2, d = 4;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, d), rng);
    p.b_k = rng.normal_mat(1, d, 0.3);
    p.b_q = rng.normal_mat(1, d, 0.3);

    std::vector<BasePrediction> preds;
    for (int i = 0; i < h; ++i) preds.push_back(fake_prediction(5, c, rng));
    Mat alpha = attention_weights(preds, p);

    for (int cl = 0; cl < c; ++cl) {
        // q^c = W_q u^c + b_q
        std::vector<double> q(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j) {
            double acc = p.b_q(0, j);
            for (int g = 0; g < h; ++g)
                acc += p.w_q(j, g) * preds[static_cast<size_t>(g)].probs(0, cl);
            q[static_cast<size_t>(j)] = acc;
        }
        // scores_h = (W_k flat(Sigma_h) + b_k) . q / sqrt(d)
        std::vector<double> scores(static_cast<size_t>(h));
        for (int g = 0; g < h; ++g) {
            double dot_acc = 0.0;
            for (int j = 0; j < d; ++j) {
                double key = p.b_k(0, j);
                for (int a = 0; a < c; ++a)
                    for (int b = 0; b < c; ++b)
                        key += p.w_k(j, a * c + b) * preds[static_cast<size_t>(g)].cov(a, b);
                dot_acc += key * q[static_cast<size_t>(j)];
            }
            scores[static_cast<size_t>(g)] = dot_acc / std::sqrt(static_cast<double>(d));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double z = 0.0;
        std::vector<double> e(static_cast<size_t>(h));
        for (int g = 0; g < h; ++g) {
            e[static_cast<size_t>(g)] = std::exp(scores[static_cast<size_t>(g)] - mx);
            z += e[static_cast<size_t>(g)];
        }
        for (int g = 0; g < h; ++g)
            CHECK(alpha(g, cl) == Catch::Approx(e[static_cast<size_t>(g)] / z).margin(1e-12));
    }
}

TEST_CASE("identical learners share weight equally", "[ensemble]") {
    Rng rng(23);
    EnsembleParams p = EnsembleParams::init(ens_cfg(3, 2, 5), rng);
    BasePrediction one = fake_prediction(6, 2, rng);
    std::vector<BasePrediction> preds = {one, one, one};
    Mat alpha = attention_weights(preds, p);
    for (int g = 0; g < 3; ++g)
        for (int c = 0; c < 2; ++c) CHECK(alpha(g, c) == 1.0 / 3.0);
}

TEST_CASE("a single learner passes through unchanged", "[ensemble]") {
    Rng rng(25);
    EnsembleParams p = EnsembleParams::init(ens_cfg(1, 3, 4), rng);
    BasePrediction base = fake_prediction(8, 3, rng);
    EnsemblePrediction out = ensemble_predict({base}, p);

    for (int c = 0; c < 3; ++c) {
        CHECK(out.alpha(0, c) == 1.0);
        CHECK(out.combined(0, c) == base.probs(0, c));
        CHECK(out.sigma(0, c) == base.cov(c, c));
    }
    int base_arg = 0;
    for (int c = 1; c < 3; ++c)
        if (base.probs(0, c) > base.probs(0, base_arg)) base_arg = c;
    CHECK(out.pred == base_arg);
    CHECK(out.u == out.sigma(0, 0) + out.sigma(0, 1) + out.sigma(0, 2));
}

TEST_CASE("combine reproduces the hand oracle", "[ensemble]") {
    // Hand arithmetic: 0.8*0.9 + 0.2*0.5 = 0.82 and
    // 0.3*0.1 + 0.7*0.5 = 0.38.
    Mat u = Mat::from_rows({{0.9, 0.1}, {0.5, 0.5}});
    Mat alpha = Mat::from_rows({{0.8, 0.3}, {0.2, 0.7}});
    Mat y = combine(u, alpha);
    CHECK(y(0, 0) == Catch::Approx(0.82).margin(1e-15));
    CHECK(y(0, 1) == Catch::Approx(0.38).margin(1e-15));

    Mat uni = Mat::from_rows({{0.5, 0.5}, {0.5, 0.5}});
    Mat ym = combine(u, uni);
    CHECK(ym(0, 0) == Catch::Approx(0.7).margin(1e-15));
    CHECK(ym(0, 1) == Catch::Approx(0.3).margin(1e-15));
}

TEST_CASE("weights and combination satisfy the declared invariants", "[ensemble]") {
    Rng rng(27);
    const int h = 4, c = 3;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, 6), rng);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<BasePrediction> preds;
        for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(7, c, rng, 1.5));
        EnsemblePrediction out = ensemble_predict(preds, p);
        for (int cl = 0; cl < c; ++cl) {
            double col = 0.0, lo = preds[0].probs(0, cl), hi = lo;
            for (int g = 0; g < h; ++g) {
                CHECK(out.alpha(g, cl) >= 0.0);
                col += out.alpha(g, cl);
                lo = std::min(lo, preds[static_cast<size_t>(g)].probs(0, cl));
                hi = std::max(hi, preds[static_cast<size_t>(g)].probs(0, cl));
            }
            CHECK(col == Catch::Approx(1.0).margin(1e-6));
            CHECK(out.combined(0, cl) >= lo - 1e-12);
            CHECK(out.combined(0, cl) <= hi + 1e-12);
            CHECK(out.sigma(0, cl) >= 0.0);
        }
    }
}

TEST_CASE("ensemble variance equals the variance of the weighted sample paths", "[ensemble]") {
    // Variance-of-weighted-sum identity: alpha^T Cov alpha must
    // reproduce the empirical 1/T variance of sum_h alpha_h y_h^(t) exactly.
    Rng rng(29);
    const int h = 3, c = 3, t = 11;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, 5), rng);
    std::vector<BasePrediction> preds;
    for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(t, c, rng));
    PreparedEnsembleItem item = prepare_ensemble_item(preds, c);
    Mat alpha = attention_weights(item, p);
    Mat sigma = ensemble_sigma(alpha, item.cov_c);

    for (int cl = 0; cl < c; ++cl) {
        std::vector<double> w(static_cast<size_t>(t), 0.0);
        double mean = 0.0;
        for (int tt = 0; tt < t; ++tt) {
            for (int g = 0; g < h; ++g)
                w[static_cast<size_t>(tt)] +=
                    alpha(g, cl) * preds[static_cast<size_t>(g)].samples(tt, cl);
            mean += w[static_cast<size_t>(tt)];
        }
        mean /= t;
        double var = 0.0;
        for (int tt = 0; tt < t; ++tt) {
            const double d = w[static_cast<size_t>(tt)] - mean;
            var += d * d;
        }
        var /= t;
        CHECK(sigma(0, cl) == Catch::Approx(var).margin(1e-12));
    }

    // Diagonal of the cross-covariance repeats each learner's own variance
    // bit for bit.
    for (int cl = 0; cl < c; ++cl)
        for (int g = 0; g < h; ++g)
            CHECK(item.cov_c[static_cast<size_t>(cl)](g, g) ==
                  preds[static_cast<size_t>(g)].cov(cl, cl));
}

TEST_CASE("independent learners contribute no cross term at large T", "[ensemble]") {
    Rng rng(31);
    const int t = 20000;
    std::vector<BasePrediction> preds = {two_class_prediction(0.4, t, rng),
                                         two_class_prediction(-0.2, t, rng)};
    EnsembleParams p = EnsembleParams::init(ens_cfg(2, 2, 4), rng);
    PreparedEnsembleItem item = prepare_ensemble_item(preds, 2);
    Mat alpha = attention_weights(item, p);
    Mat sigma = ensemble_sigma(alpha, item.cov_c);
    for (int cl = 0; cl < 2; ++cl) {
        double diag_only = 0.0;
        for (int g = 0; g < 2; ++g)
            diag_only += alpha(g, cl) * alpha(g, cl) * preds[static_cast<size_t>(g)].cov(cl, cl);
        CHECK(sigma(0, cl) == Catch::Approx(diag_only).margin(0.01));
    }
}

TEST_CASE("loss with zero penalties is plain cross-entropy", "[ensemble]") {
    Rng rng(33);
    const int h = 3, c = 3;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, 4), rng);
    std::vector<PreparedEnsembleItem> batch;
    double want = 0.0;
    for (int i = 0; i < 4; ++i) {
        std::vector<BasePrediction> preds;
        for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(6, c, rng));
        const int label = static_cast<int>(rng.uniform_int(c));
        batch.push_back(prepare_ensemble_item(preds, c, label));

        Mat alpha = attention_weights(batch.back(), p);
        Mat y = combine(batch.back().u, alpha);
        double mx = y(0, 0);
        for (int cl = 1; cl < c; ++cl) mx = std::max(mx, y(0, cl));
        double z = 0.0;
        for (int cl = 0; cl < c; ++cl) z += std::exp(y(0, cl) - mx);
        want -= y(0, label) - mx - std::log(z);
    }
    want /= 4.0;

    Tape tape;
    EnsembleVars ev = make_ensemble_vars(tape, p, false);
    const double got = ensemble_loss(tape, ev, batch, 0.0, 0.0).val()(0, 0);
    CHECK(got == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("doubling covariances moves the loss by exactly the delta term", "[ensemble]") {
    Rng rng(35);
    const int h = 3, c = 2;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, 4), rng);
    p.w_k.fill(0.0);  // keys independent of Sigma so alpha stays fixed

    std::vector<PreparedEnsembleItem> batch, doubled;
    for (int i = 0; i < 3; ++i) {
        std::vector<BasePrediction> preds;
        for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(5, c, rng));
        batch.push_back(prepare_ensemble_item(preds, c, i % c));
        doubled.push_back(batch.back());
        for (Mat& cov : doubled.back().cov_c)
            for (size_t k = 0; k < cov.size(); ++k) cov[k] *= 2.0;
    }

    const double delta = 0.37;
    Tape t1, t2;
    EnsembleVars e1 = make_ensemble_vars(t1, p, false);
    EnsembleVars e2 = make_ensemble_vars(t2, p, false);
    const double base = ensemble_loss(t1, e1, batch, delta, 0.0).val()(0, 0);
    const double twice = ensemble_loss(t2, e2, doubled, delta, 0.0).val()(0, 0);

    double sigma_mean = 0.0;
    for (const PreparedEnsembleItem& item : batch) {
        Mat alpha = attention_weights(item, p);
        Mat s = ensemble_sigma(alpha, item.cov_c);
        for (int cl = 0; cl < c; ++cl) sigma_mean += s(0, cl);
    }
    sigma_mean /= 3.0;
    CHECK(twice - base == Catch::Approx(delta * sigma_mean).margin(1e-14));
}

TEST_CASE("three-sample loss matches a full transcription", "[ensemble]") {
    // Straight-line re-computation of every term, including the
    // parameter norm, with scalar loops.
    Rng rng(37);
    const int h = 2, c = 2, d = 3;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, d), rng);
    p.b_k = rng.normal_mat(1, d, 0.2);
    p.b_q = rng.normal_mat(1, d, 0.2);
    const double delta = 0.05, zeta = 0.01;

    std::vector<PreparedEnsembleItem> batch;
    for (int i = 0; i < 3; ++i) {
        std::vector<BasePrediction> preds;
        for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(5, c, rng));
        batch.push_back(prepare_ensemble_item(preds, c, i % c));
    }

    double ce = 0.0, pen = 0.0;
    for (const PreparedEnsembleItem& item : batch) {
        Mat alpha = attention_weights(item, p);
        Mat y = combine(item.u, alpha);
        Mat s = ensemble_sigma(alpha, item.cov_c);
        double mx = std::max(y(0, 0), y(0, 1));
        const double z = std::exp(y(0, 0) - mx) + std::exp(y(0, 1) - mx);
        ce -= y(0, item.label) - mx - std::log(z);
        pen += s(0, 0) + s(0, 1);
    }
    double sq = 0.0;
    visit_ensemble_params(p, [&](const std::string&, const Mat& m) {
        for (size_t i = 0; i < m.size(); ++i) sq += m[i] * m[i];
    });
    const double want = ce / 3.0 + delta * pen / 3.0 + zeta * std::sqrt(sq);

    Tape tape;
    EnsembleVars ev = make_ensemble_vars(tape, p, false);
    const double got = ensemble_loss(tape, ev, batch, delta, zeta).val()(0, 0);
    CHECK(got == Catch::Approx(want).margin(1e-10 * std::max(1.0, std::fabs(want))));
}

TEST_CASE("loss gradients match finite differences", "[ensemble]") {
    Rng rng(39);
    const int h = 3, c = 3, d = 4;
    EnsembleParams p = EnsembleParams::init(ens_cfg(h, c, d), rng);
    p.b_k = rng.normal_mat(1, d, 0.2);
    p.b_q = rng.normal_mat(1, d, 0.2);

    std::vector<PreparedEnsembleItem> batch;
    for (int i = 0; i < 3; ++i) {
        std::vector<BasePrediction> preds;
        for (int g = 0; g < h; ++g) preds.push_back(fake_prediction(6, c, rng));
        batch.push_back(prepare_ensemble_item(preds, c, i % c));
    }

    testutil::TapeFn fn = [&](Tape& tape, const std::vector<Var>& inputs) {
        EnsembleVars ev{inputs[0], inputs[1], inputs[2], inputs[3]};
        return ensemble_loss(tape, ev, batch, 0.05, 0.01);
    };
    auto res = testutil::check_gradients(fn, {p.w_k, p.b_k, p.w_q, p.b_q}, 1e-5);
    INFO("worst " << res.worst_input << "[" << res.worst_coord << "] rel " << res.max_rel_err);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("training concentrates weight on a reliable learner", "[ensemble]") {
    // One learner predicts the label confidently, two others carry
    // label-independent noise; stage-2 training should and must discover it.
    const int h = 3, c = 2, t = 8;
    auto make_items = [&](uint64_t seed, int n) {
        Rng rng(seed);
        std::vector<PreparedEnsembleItem> items;
        for (int i = 0; i < n; ++i) {
            const int label = static_cast<int>(rng.uniform_int(c));
            std::vector<BasePrediction> preds;
            preds.push_back(two_class_prediction(label == 0 ? 2.5 : -2.5, t, rng, 0.3));
            preds.push_back(two_class_prediction(rng.normal(), t, rng, 1.8));
            preds.push_back(two_class_prediction(rng.normal(), t, rng, 1.8));
            items.push_back(prepare_ensemble_item(preds, c, label));
        }
        return items;
    };
    std::vector<PreparedEnsembleItem> train = make_items(41, 200);
    std::vector<PreparedEnsembleItem> val = make_items(43, 60);

    EnsembleConfig cfg = ens_cfg(h, c, 8, 0.01, 1e-4);
    TrainEnsembleOptions opt;
    opt.epochs = 80;
    opt.batch_size = 32;
    opt.lr = 2e-2;

    Rng init_rng(7);
    EnsembleParams p = EnsembleParams::init(cfg, init_rng);
    TrainEnsembleResult res = train_ensemble(p, train, val, opt, 2025);
    CHECK_FALSE(res.diverged);
    REQUIRE(res.best_epoch >= 0);

    double perfect_weight = 0.0;
    int ens_correct = 0;
    std::vector<int> single_correct(h, 0);
    for (const PreparedEnsembleItem& item : val) {
        Mat alpha = attention_weights(item, p);
        for (int cl = 0; cl < c; ++cl) perfect_weight += alpha(0, cl);
        Mat y = combine(item.u, alpha);
        const int pred = y(0, 0) >= y(0, 1) ? 0 : 1;
        if (pred == item.label) ++ens_correct;
        for (int g = 0; g < h; ++g) {
            const int sp = item.u(g, 0) >= item.u(g, 1) ? 0 : 1;
            if (sp == item.label) ++single_correct[static_cast<size_t>(g)];
        }
    }
    perfect_weight /= static_cast<double>(val.size() * c);
    CHECK(perfect_weight > 1.0 / h + 0.1);

    int best_single = 0;
    for (int g = 0; g < h; ++g) best_single = std::max(best_single, single_correct[static_cast<size_t>(g)]);
    CHECK(static_cast<double>(ens_correct) / 60.0 >=
          static_cast<double>(best_single) / 60.0 - 0.01);

    // Determinism: identical seed reproduces parameters bitwise.
    Rng init_rng2(7);
    EnsembleParams p2 = EnsembleParams::init(cfg, init_rng2);
    train_ensemble(p2, train, val, opt, 2025);
    CHECK(max_abs_diff(p.w_k, p2.w_k) == 0.0);
    CHECK(max_abs_diff(p.w_q, p2.w_q) == 0.0);

    Rng init_rng3(7);
    EnsembleParams p3 = EnsembleParams::init(cfg, init_rng3);
    train_ensemble(p3, train, val, opt, 2026);
    CHECK(max_abs_diff(p.w_k, p3.w_k) > 0.0);
}

TEST_CASE("contracts and divergence handling", "[ensemble]") {
    Rng rng(47);
    EnsembleParams p = EnsembleParams::init(ens_cfg(2, 2, 3), rng);

    // Mismatched sample counts across learners.
    std::vector<BasePrediction> preds = {fake_prediction(4, 2, rng), fake_prediction(5, 2, rng)};
    CHECK_THROWS_AS(prepare_ensemble_item(preds, 2), ContractError);

    // Asymmetric covariance.
    BasePrediction good = fake_prediction(4, 2, rng);
    BasePrediction bad = fake_prediction(4, 2, rng);
    bad.cov(0, 1) += 1e-3;
    CHECK_THROWS_AS(prepare_ensemble_item({good, bad}, 2), ContractError);

    // Learner count must match the parameter shapes.
    PreparedEnsembleItem item = prepare_ensemble_item({good}, 2);
    CHECK_THROWS_AS(attention_weights(item, p), ContractError);

    TrainEnsembleOptions opt;
    opt.epochs = 2;
    CHECK_THROWS_AS(train_ensemble(p, {}, {}, opt, 1), ContractError);

    EnsembleParams poisoned = p;
    poisoned.w_k(0, 0) = std::numeric_limits<double>::quiet_NaN();
    std::vector<PreparedEnsembleItem> batch = {
        prepare_ensemble_item({good, fake_prediction(4, 2, rng)}, 2, 0)};
    CHECK_THROWS_AS(train_ensemble(poisoned, batch, {}, opt, 1), DivergenceError);
}
