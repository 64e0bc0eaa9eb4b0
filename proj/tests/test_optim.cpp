#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "uedkl/optim.hpp"
#include "uedkl/rng.hpp"

using namespace uedkl;

TEST_CASE("zero gradients leave parameters unchanged", "[optim]") {
    Mat p(2, 3, 1.5);
    Adam opt;
    for (int i = 0; i < 5; ++i) opt.step({{"p", &p}}, {Mat(2, 3, 0.0)});
    CHECK(max_abs_diff(p, Mat(2, 3, 1.5)) == 0.0);
}

TEST_CASE("first step matches the bias-corrected closed form", "[optim]") {
    const double lr = 1e-3, eps = 1e-8, beta1 = 0.9, beta2 = 0.999;
    for (double g : {0.1, 1.0, 3.0, -0.5}) {
        Mat p(1, 1, 0.0);
        Adam opt(AdamConfig{lr, beta1, beta2, eps});
        Mat grad(1, 1, g);
        opt.step({{"p", &p}}, {grad});
        const double delta = -p(0, 0);

        // Standard first step: mhat = g, vhat = g^2.
        const double expected = lr * g / (std::fabs(g) + eps);
        CHECK(delta == Catch::Approx(expected).margin(1e-15));

        // Equivalent closed-form magnitude, evaluated directly.
        const double mag = lr * std::fabs(g) /
                           (std::fabs(g) + eps * std::sqrt(1.0 - beta2) / (1.0 - beta1));
        CHECK(std::fabs(std::fabs(delta) - mag) / mag < 1e-6);
    }
}

TEST_CASE("constant gradient drives step size to the learning rate", "[optim]") {
    const double lr = 1e-3;
    Mat p(1, 1, 0.0);
    Adam opt(AdamConfig{lr, 0.9, 0.999, 1e-8});
    Mat grad(1, 1, 0.37);
    double prev = p(0, 0);
    double last_step = 0.0;
    for (int i = 0; i < 1000; ++i) {
        opt.step({{"p", &p}}, {grad});
        last_step = std::fabs(p(0, 0) - prev);
        prev = p(0, 0);
    }
    CHECK(std::fabs(last_step - lr) / lr < 0.01);
}

TEST_CASE("limiting step size is invariant to gradient scale", "[optim]") {
    auto run = [](double g) {
        Mat p(1, 1, 0.0);
        Adam opt(AdamConfig{1e-3, 0.9, 0.999, 1e-8});
        double prev = 0.0, last = 0.0;
        for (int i = 0; i < 1000; ++i) {
            opt.step({{"p", &p}}, {Mat(1, 1, g)});
            last = std::fabs(p(0, 0) - prev);
            prev = p(0, 0);
        }
        return last;
    };
    const double a = run(0.2), b = run(20.0);
    CHECK(std::fabs(a - b) / a < 0.01);
}

TEST_CASE("adam is deterministic", "[optim]") {
    Rng rng(31);
    auto run = [&]() {
        Rng local(31);
        Mat p = local.normal_mat(3, 3);
        Adam opt;
        for (int i = 0; i < 20; ++i) {
            Mat g = local.normal_mat(3, 3);
            opt.step({{"p", &p}}, {g});
        }
        return p;
    };
    Mat a = run(), b = run();
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("non-finite gradients reject the whole step", "[optim]") {
    Mat p(2, 2, 1.0);
    Mat good(2, 2, 0.5);
    Mat bad(2, 2, 0.5);
    bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
    Adam opt;
    opt.step({{"p", &p}}, {good});
    const Mat before = p;
    const int64_t t_before = opt.steps_taken();
    CHECK_THROWS_AS(opt.step({{"p", &p}}, {bad}), NumericalError);
    CHECK(max_abs_diff(p, before) == 0.0);
    CHECK(opt.steps_taken() == t_before);
}

TEST_CASE("shape mismatches are contract violations", "[optim]") {
    Mat p(2, 2, 1.0);
    Adam opt;
    CHECK_THROWS_AS(opt.step({{"p", &p}}, {Mat(3, 2, 0.0)}), ContractError);
}

TEST_CASE("finite differences recover a quadratic gradient", "[optim]") {
    Rng rng(77);
    Mat theta = rng.normal_mat(4, 5);
    auto loss = [&]() {
        double s = 0.0;
        for (size_t i = 0; i < theta.size(); ++i) s += theta[i] * theta[i];
        return s;
    };
    Mat analytic = theta * 2.0;
    FdCheckResult res = finite_diff_check({{"theta", &theta}}, loss, {analytic});
    CHECK(res.coords_checked == theta.size());
    CHECK(res.max_rel_err < 1e-8);
}

TEST_CASE("finite_diff_check subsamples large tensors deterministically", "[optim]") {
    Rng rng(78);
    Mat theta = rng.normal_mat(30, 30);  // 900 coords > the 200 cap
    auto loss = [&]() {
        double s = 0.0;
        for (size_t i = 0; i < theta.size(); ++i) s += 0.5 * theta[i] * theta[i];
        return s;
    };
    Mat analytic = theta;
    FdCheckResult r1 = finite_diff_check({{"theta", &theta}}, loss, {analytic}, 1e-5, 200, 9);
    FdCheckResult r2 = finite_diff_check({{"theta", &theta}}, loss, {analytic}, 1e-5, 200, 9);
    CHECK(r1.coords_checked == 200);
    // The summed loss is O(450), so central-difference cancellation noise is
    // around 1e-8 absolute; allow for it.
    CHECK(r1.max_rel_err < 1e-6);
    CHECK(r1.worst_coord == r2.worst_coord);
    CHECK(r1.max_rel_err == r2.max_rel_err);
}

TEST_CASE("finite_diff_check flags a wrong gradient", "[optim]") {
    Mat theta(2, 2, 1.0);
    auto loss = [&]() {
        double s = 0.0;
        for (size_t i = 0; i < theta.size(); ++i) s += theta[i] * theta[i];
        return s;
    };
    Mat wrong = theta * 3.0;  // should be 2.0 * theta
    FdCheckResult res = finite_diff_check({{"theta", &theta}}, loss, {wrong});
    CHECK(res.max_rel_err > 0.3);
}
