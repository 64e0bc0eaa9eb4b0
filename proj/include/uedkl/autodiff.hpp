#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "uedkl/mat.hpp"

namespace uedkl {

// Reverse-mode automatic differentiation over Mat values.
//
// A Tape records a computation graph eagerly: every op computes its value
// immediately and pushes a node holding that value plus a backward closure.
// backward(root) seeds the (1x1) root with gradient 1 and replays the
// closures in reverse creation order. Gradient buffers are allocated lazily,
// so subgraphs that never receive a gradient cost nothing on the way back.

class Tape;

struct Var {
    Tape* tape = nullptr;
    int idx = -1;

    bool valid() const { return tape != nullptr && idx >= 0; }
    int rows() const;
    int cols() const;
    const Mat& val() const;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that wants a gradient (a trainable parameter).
    Var input(Mat v) { return push(std::move(v), true); }
    // Leaf that never receives a gradient (data, frozen noise, masks).
    Var constant(Mat v) { return push(std::move(v), false); }
    Var scalar_const(double v) {
        Mat m(1, 1);
        m(0, 0) = v;
        return constant(std::move(m));
    }

    Var push(Mat value, bool needs_grad) {
        nodes_.push_back(Node{std::move(value), Mat(), needs_grad, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }
    void set_back(Var v, std::function<void(Tape&)> fn) {
        nodes_[static_cast<size_t>(v.idx)].back = std::move(fn);
    }

    const Mat& val(int i) const { return nodes_[static_cast<size_t>(i)].value; }
    bool needs_grad(int i) const { return nodes_[static_cast<size_t>(i)].needs_grad; }
    size_t size() const { return nodes_.size(); }

    bool has_grad(int i) const { return !nodes_[static_cast<size_t>(i)].grad.empty(); }
    const Mat& grad(int i) const { return nodes_[static_cast<size_t>(i)].grad; }

    // Gradient of a Var after backward(); zero matrix if nothing flowed in.
    Mat grad_of(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.idx)];
        if (n.grad.empty()) return Mat(n.value.rows(), n.value.cols());
        return n.grad;
    }

    void backward(Var root) {
        if (root.tape != this) throw ContractError("backward: root from another tape");
        const Node& r = nodes_[static_cast<size_t>(root.idx)];
        if (r.value.rows() != 1 || r.value.cols() != 1)
            throw ContractError("backward: root must be a scalar (1x1)");
        if (!r.needs_grad) throw ContractError("backward: root does not depend on any input");
        Mat seed(1, 1);
        seed(0, 0) = 1.0;
        accumulate(root.idx, seed);
        for (int i = root.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && !n.grad.empty()) n.back(*this);
        }
    }

    // Adds g into node i's gradient buffer (no-op for no-grad nodes).
    void accumulate(int i, const Mat& g) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad) return;
        if (n.grad.empty())
            n.grad = g;
        else
            n.grad += g;
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        bool needs_grad = false;
        std::function<void(Tape&)> back;
    };
    std::vector<Node> nodes_;
};

inline int Var::rows() const { return tape->val(idx).rows(); }
inline int Var::cols() const { return tape->val(idx).cols(); }
inline const Mat& Var::val() const { return tape->val(idx); }

namespace ad_detail {

inline Tape& tape_of(Var a) {
    if (!a.valid()) throw ContractError("op on an invalid Var");
    return *a.tape;
}

inline void same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ContractError("op mixes Vars from different tapes");
}

// Elementwise unary op: y = f(x); backward dx += g * dfdx(x, y).
template <typename F, typename DF>
Var unary_op(Var a, F f, DF dfdx) {
    Tape& t = tape_of(a);
    const Mat& x = a.val();
    Mat y(x.rows(), x.cols());
    for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi, dfdx](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            const Mat& yv = tp.val(oi);
            Mat gx(xv.rows(), xv.cols());
            for (size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * dfdx(xv[i], yv[i]);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

}  // namespace ad_detail

// ----- arithmetic -----

inline Var add(Var a, Var b) {
    ad_detail::same_tape(a, b);
    Tape& t = ad_detail::tape_of(a);
    Mat y = a.val() + b.val();
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, bi = b.idx, oi = out.idx;
        t.set_back(out, [ai, bi, oi](Tape& tp) {
            tp.accumulate(ai, tp.grad(oi));
            tp.accumulate(bi, tp.grad(oi));
        });
    }
    return out;
}

inline Var sub(Var a, Var b) {
    ad_detail::same_tape(a, b);
    Tape& t = ad_detail::tape_of(a);
    Mat y = a.val() - b.val();
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, bi = b.idx, oi = out.idx;
        t.set_back(out, [ai, bi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            tp.accumulate(ai, g);
            Mat ng_ = g;
            ng_ *= -1.0;
            tp.accumulate(bi, ng_);
        });
    }
    return out;
}

// Hadamard (elementwise) product.
inline Var mul(Var a, Var b) {
    ad_detail::same_tape(a, b);
    Tape& t = ad_detail::tape_of(a);
    Mat y = hadamard(a.val(), b.val());
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, bi = b.idx, oi = out.idx;
        t.set_back(out, [ai, bi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            if (tp.needs_grad(ai)) tp.accumulate(ai, hadamard(g, tp.val(bi)));
            if (tp.needs_grad(bi)) tp.accumulate(bi, hadamard(g, tp.val(ai)));
        });
    }
    return out;
}

inline Var matmul(Var a, Var b) {
    ad_detail::same_tape(a, b);
    Tape& t = ad_detail::tape_of(a);
    Mat y = matmul(a.val(), b.val());
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, bi = b.idx, oi = out.idx;
        t.set_back(out, [ai, bi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            if (tp.needs_grad(ai)) tp.accumulate(ai, matmul(g, transpose(tp.val(bi))));
            if (tp.needs_grad(bi)) tp.accumulate(bi, matmul(transpose(tp.val(ai)), g));
        });
    }
    return out;
}

inline Var transpose(Var a) {
    Tape& t = ad_detail::tape_of(a);
    Var out = t.push(transpose(a.val()), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) { tp.accumulate(ai, transpose(tp.grad(oi))); });
    }
    return out;
}

inline Var scale(Var a, double c) {
    Tape& t = ad_detail::tape_of(a);
    Var out = t.push(a.val() * c, t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi, c](Tape& tp) { tp.accumulate(ai, tp.grad(oi) * c); });
    }
    return out;
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var add_const(Var a, double c) {
    Tape& t = ad_detail::tape_of(a);
    Mat y = a.val();
    for (size_t i = 0; i < y.size(); ++i) y[i] += c;
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) { tp.accumulate(ai, tp.grad(oi)); });
    }
    return out;
}

// y = s * a where s is a 1x1 Var (gradient flows into both).
inline Var mul_scalar(Var a, Var s) {
    ad_detail::same_tape(a, s);
    Tape& t = ad_detail::tape_of(a);
    if (s.rows() != 1 || s.cols() != 1) throw ContractError("mul_scalar: s must be 1x1");
    Mat y = a.val() * s.val()(0, 0);
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(s.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, si = s.idx, oi = out.idx;
        t.set_back(out, [ai, si, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            if (tp.needs_grad(ai)) tp.accumulate(ai, g * tp.val(si)(0, 0));
            if (tp.needs_grad(si)) {
                Mat gs(1, 1);
                const Mat& av = tp.val(ai);
                double acc = 0.0;
                for (size_t i = 0; i < av.size(); ++i) acc += g[i] * av[i];
                gs(0, 0) = acc;
                tp.accumulate(si, gs);
            }
        });
    }
    return out;
}

// ----- elementwise nonlinearities -----

inline Var vexp(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Var vlog(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Var vtanh(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
inline Var vsqrt(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}
inline Var square(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Var recip(Var a) {
    return ad_detail::unary_op(
        a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

// Exact (erf-based) GELU; smooth everywhere, which keeps central finite
// differences honest.
inline Var gelu(Var a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return ad_detail::unary_op(
        a,
        [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [=](double x, double) {
            return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

// y = max(x, c); gradient passes only where x > c.
inline Var clamp_min(Var a, double c) {
    return ad_detail::unary_op(
        a, [c](double x) { return x > c ? x : c; },
        [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// ----- reductions and broadcasts -----

inline Var row_sum(Var a) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    Mat y(x.rows(), 1);
    for (int i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < x.cols(); ++j) s += x(i, j);
        y(i, 0) = s;
    }
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols());
            for (int i = 0; i < xv.rows(); ++i)
                for (int j = 0; j < xv.cols(); ++j) gx(i, j) = g(i, 0);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

inline Var col_sum(Var a) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    Mat y(1, x.cols());
    for (int j = 0; j < x.cols(); ++j) {
        double s = 0.0;
        for (int i = 0; i < x.rows(); ++i) s += x(i, j);
        y(0, j) = s;
    }
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols());
            for (int i = 0; i < xv.rows(); ++i)
                for (int j = 0; j < xv.cols(); ++j) gx(i, j) = g(0, j);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

inline Var sum_all(Var a) {
    Tape& t = ad_detail::tape_of(a);
    Mat y(1, 1);
    y(0, 0) = sum(a.val());
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) {
            const double g = tp.grad(oi)(0, 0);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols(), g);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

// y(i,j) = a(i,j) + v(i,0)
inline Var add_col_broadcast(Var a, Var v) {
    ad_detail::same_tape(a, v);
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    const Mat& b = v.val();
    if (b.cols() != 1 || b.rows() != x.rows()) throw ContractError("add_col_broadcast: v must be Nx1");
    Mat y = x;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) y(i, j) += b(i, 0);
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(v.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, vi = v.idx, oi = out.idx;
        t.set_back(out, [ai, vi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            if (tp.needs_grad(ai)) tp.accumulate(ai, g);
            if (tp.needs_grad(vi)) {
                Mat gv(g.rows(), 1);
                for (int i = 0; i < g.rows(); ++i) {
                    double s = 0.0;
                    for (int j = 0; j < g.cols(); ++j) s += g(i, j);
                    gv(i, 0) = s;
                }
                tp.accumulate(vi, gv);
            }
        });
    }
    return out;
}

// y(i,j) = a(i,j) + v(0,j)
inline Var add_row_broadcast(Var a, Var v) {
    ad_detail::same_tape(a, v);
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    const Mat& b = v.val();
    if (b.rows() != 1 || b.cols() != x.cols()) throw ContractError("add_row_broadcast: v must be 1xM");
    Mat y = x;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) y(i, j) += b(0, j);
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(v.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, vi = v.idx, oi = out.idx;
        t.set_back(out, [ai, vi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            if (tp.needs_grad(ai)) tp.accumulate(ai, g);
            if (tp.needs_grad(vi)) {
                Mat gv(1, g.cols());
                for (int j = 0; j < g.cols(); ++j) {
                    double s = 0.0;
                    for (int i = 0; i < g.rows(); ++i) s += g(i, j);
                    gv(0, j) = s;
                }
                tp.accumulate(vi, gv);
            }
        });
    }
    return out;
}

// y(i,j) = a(i,j) * v(i,0)
inline Var mul_col_broadcast(Var a, Var v) {
    ad_detail::same_tape(a, v);
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    const Mat& b = v.val();
    if (b.cols() != 1 || b.rows() != x.rows()) throw ContractError("mul_col_broadcast: v must be Nx1");
    Mat y = x;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) y(i, j) *= b(i, 0);
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(v.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, vi = v.idx, oi = out.idx;
        t.set_back(out, [ai, vi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            const Mat& bv = tp.val(vi);
            if (tp.needs_grad(ai)) {
                Mat gx = g;
                for (int i = 0; i < gx.rows(); ++i)
                    for (int j = 0; j < gx.cols(); ++j) gx(i, j) *= bv(i, 0);
                tp.accumulate(ai, gx);
            }
            if (tp.needs_grad(vi)) {
                Mat gv(bv.rows(), 1);
                for (int i = 0; i < g.rows(); ++i) {
                    double s = 0.0;
                    for (int j = 0; j < g.cols(); ++j) s += g(i, j) * xv(i, j);
                    gv(i, 0) = s;
                }
                tp.accumulate(vi, gv);
            }
        });
    }
    return out;
}

// y(i,j) = a(i,j) * v(0,j)
inline Var mul_row_broadcast(Var a, Var v) {
    ad_detail::same_tape(a, v);
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    const Mat& b = v.val();
    if (b.rows() != 1 || b.cols() != x.cols()) throw ContractError("mul_row_broadcast: v must be 1xM");
    Mat y = x;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) y(i, j) *= b(0, j);
    const bool ng = t.needs_grad(a.idx) || t.needs_grad(v.idx);
    Var out = t.push(std::move(y), ng);
    if (ng) {
        const int ai = a.idx, vi = v.idx, oi = out.idx;
        t.set_back(out, [ai, vi, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            const Mat& bv = tp.val(vi);
            if (tp.needs_grad(ai)) {
                Mat gx = g;
                for (int i = 0; i < gx.rows(); ++i)
                    for (int j = 0; j < gx.cols(); ++j) gx(i, j) *= bv(0, j);
                tp.accumulate(ai, gx);
            }
            if (tp.needs_grad(vi)) {
                Mat gv(1, bv.cols());
                for (int j = 0; j < g.cols(); ++j) {
                    double s = 0.0;
                    for (int i = 0; i < g.rows(); ++i) s += g(i, j) * xv(i, j);
                    gv(0, j) = s;
                }
                tp.accumulate(vi, gv);
            }
        });
    }
    return out;
}

// ----- softmax family -----
// mask: empty = all entries valid; otherwise same shape, 1.0 = valid,
// 0.0 = masked out (output exactly 0 there, no gradient).

namespace ad_detail {

inline void softmax_forward(const Mat& x, const Mat& mask, Mat& y) {
    y = Mat(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        double mx = -1e300;
        bool any = false;
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) continue;
            any = true;
            mx = std::max(mx, x(i, j));
        }
        if (!any) throw ContractError("row_softmax: fully masked row " + std::to_string(i));
        double z = 0.0;
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) continue;
            z += std::exp(x(i, j) - mx);
        }
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) {
                y(i, j) = 0.0;
            } else {
                y(i, j) = std::exp(x(i, j) - mx) / z;
            }
        }
    }
}

}  // namespace ad_detail

inline Var row_softmax(Var a, const Mat& mask = Mat()) {
    Tape& t = ad_detail::tape_of(a);
    if (!mask.empty() && !mask.same_shape(a.val()))
        throw ContractError("row_softmax: mask shape mismatch");
    Mat y;
    ad_detail::softmax_forward(a.val(), mask, y);
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        const Mat m = mask;
        t.set_back(out, [ai, oi, m](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& yv = tp.val(oi);
            Mat gx(yv.rows(), yv.cols());
            for (int i = 0; i < yv.rows(); ++i) {
                double dot = 0.0;
                for (int j = 0; j < yv.cols(); ++j) {
                    if (!m.empty() && m(i, j) == 0.0) continue;
                    dot += g(i, j) * yv(i, j);
                }
                for (int j = 0; j < yv.cols(); ++j) {
                    if (!m.empty() && m(i, j) == 0.0) continue;
                    gx(i, j) = yv(i, j) * (g(i, j) - dot);
                }
            }
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

inline Var row_log_softmax(Var a, const Mat& mask = Mat()) {
    Tape& t = ad_detail::tape_of(a);
    if (!mask.empty() && !mask.same_shape(a.val()))
        throw ContractError("row_log_softmax: mask shape mismatch");
    const Mat& x = a.val();
    Mat y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
        double mx = -1e300;
        bool any = false;
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) continue;
            any = true;
            mx = std::max(mx, x(i, j));
        }
        if (!any) throw ContractError("row_log_softmax: fully masked row " + std::to_string(i));
        double z = 0.0;
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) continue;
            z += std::exp(x(i, j) - mx);
        }
        const double logz = mx + std::log(z);
        for (int j = 0; j < x.cols(); ++j) {
            if (!mask.empty() && mask(i, j) == 0.0) {
                y(i, j) = 0.0;
            } else {
                y(i, j) = x(i, j) - logz;
            }
        }
    }
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        const Mat m = mask;
        t.set_back(out, [ai, oi, m](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& yv = tp.val(oi);
            Mat gx(yv.rows(), yv.cols());
            for (int i = 0; i < yv.rows(); ++i) {
                double gs = 0.0;
                for (int j = 0; j < yv.cols(); ++j) {
                    if (!m.empty() && m(i, j) == 0.0) continue;
                    gs += g(i, j);
                }
                for (int j = 0; j < yv.cols(); ++j) {
                    if (!m.empty() && m(i, j) == 0.0) continue;
                    gx(i, j) = g(i, j) - std::exp(yv(i, j)) * gs;
                }
            }
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

// ----- shape surgery -----

// y = a[:, c0:c1)
inline Var slice_cols(Var a, int c0, int c1) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    if (c0 < 0 || c1 > x.cols() || c0 >= c1) throw ContractError("slice_cols: bad range");
    Mat y(x.rows(), c1 - c0);
    for (int i = 0; i < x.rows(); ++i)
        for (int j = c0; j < c1; ++j) y(i, j - c0) = x(i, j);
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi, c0, c1](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols());
            for (int i = 0; i < g.rows(); ++i)
                for (int j = c0; j < c1; ++j) gx(i, j) = g(i, j - c0);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    Tape& t = ad_detail::tape_of(parts[0]);
    int total = 0;
    const int r = parts[0].rows();
    bool ng = false;
    for (Var p : parts) {
        ad_detail::same_tape(parts[0], p);
        if (p.rows() != r) throw ContractError("concat_cols: row mismatch");
        total += p.cols();
        ng = ng || t.needs_grad(p.idx);
    }
    Mat y(r, total);
    int off = 0;
    for (Var p : parts) {
        const Mat& v = p.val();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < v.cols(); ++j) y(i, off + j) = v(i, j);
        off += v.cols();
    }
    Var out = t.push(std::move(y), ng);
    if (ng) {
        std::vector<int> idxs;
        std::vector<int> widths;
        for (Var p : parts) {
            idxs.push_back(p.idx);
            widths.push_back(p.cols());
        }
        const int oi = out.idx;
        t.set_back(out, [idxs, widths, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            int off = 0;
            for (size_t k = 0; k < idxs.size(); ++k) {
                if (tp.needs_grad(idxs[k])) {
                    Mat gp(g.rows(), widths[k]);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < widths[k]; ++j) gp(i, j) = g(i, off + j);
                    tp.accumulate(idxs[k], gp);
                }
                off += widths[k];
            }
        });
    }
    return out;
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Tape& t = ad_detail::tape_of(parts[0]);
    int total = 0;
    const int c = parts[0].cols();
    bool ng = false;
    for (Var p : parts) {
        ad_detail::same_tape(parts[0], p);
        if (p.cols() != c) throw ContractError("concat_rows: column mismatch");
        total += p.rows();
        ng = ng || t.needs_grad(p.idx);
    }
    Mat y(total, c);
    int off = 0;
    for (Var p : parts) {
        const Mat& v = p.val();
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < c; ++j) y(off + i, j) = v(i, j);
        off += v.rows();
    }
    Var out = t.push(std::move(y), ng);
    if (ng) {
        std::vector<int> idxs;
        std::vector<int> heights;
        for (Var p : parts) {
            idxs.push_back(p.idx);
            heights.push_back(p.rows());
        }
        const int oi = out.idx;
        t.set_back(out, [idxs, heights, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            int off = 0;
            for (size_t k = 0; k < idxs.size(); ++k) {
                if (tp.needs_grad(idxs[k])) {
                    Mat gp(heights[k], g.cols());
                    for (int i = 0; i < heights[k]; ++i)
                        for (int j = 0; j < g.cols(); ++j) gp(i, j) = g(off + i, j);
                    tp.accumulate(idxs[k], gp);
                }
                off += heights[k];
            }
        });
    }
    return out;
}

// y row r = a row idx[r]; backward scatter-adds (rows may repeat).
inline Var gather_rows(Var a, const std::vector<int>& idx) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    Mat y(static_cast<int>(idx.size()), x.cols());
    for (size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= x.rows()) throw ContractError("gather_rows: index out of range");
        for (int j = 0; j < x.cols(); ++j) y(static_cast<int>(r), j) = x(idx[r], j);
    }
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        const std::vector<int> ix = idx;
        t.set_back(out, [ai, oi, ix](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols());
            for (size_t r = 0; r < ix.size(); ++r)
                for (int j = 0; j < g.cols(); ++j) gx(ix[r], j) += g(static_cast<int>(r), j);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

inline Var reshape(Var a, int r, int c) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    if (static_cast<size_t>(r) * c != x.size()) throw ContractError("reshape: size mismatch");
    Mat y(r, c);
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i];
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const Mat& xv = tp.val(ai);
            Mat gx(xv.rows(), xv.cols());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] = g[i];
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

// ----- symmetric positive definite linear algebra -----

namespace ad_detail {

// (K + K^T)/2. Bit-exact identity when K is already symmetric, and it makes
// the op a well-defined differentiable function of every matrix entry even
// though Cholesky only ever reads the lower triangle.
inline Mat symmetrize(const Mat& k) {
    if (k.rows() != k.cols()) throw ContractError("spd op: matrix not square");
    Mat s(k.rows(), k.cols());
    for (int i = 0; i < k.rows(); ++i)
        for (int j = 0; j < k.cols(); ++j) s(i, j) = 0.5 * (k(i, j) + k(j, i));
    return s;
}

}  // namespace ad_detail

// X = K^{-1} B for symmetric positive definite K (Cholesky inside). With
// S = (K + K^T)/2 the backward pass reuses the factor:
//   dB += S^{-1} G,  dS = -(S^{-1} G) X^T,  dK += (dS + dS^T)/2.
inline Var solve_spd(Var k, Var b) {
    ad_detail::same_tape(k, b);
    Tape& t = ad_detail::tape_of(k);
    Mat l = cholesky(ad_detail::symmetrize(k.val()));
    Mat x = chol_solve(l, b.val());
    const bool ng = t.needs_grad(k.idx) || t.needs_grad(b.idx);
    Var out = t.push(std::move(x), ng);
    if (ng) {
        const int ki = k.idx, bi = b.idx, oi = out.idx;
        const Mat lf = l;
        t.set_back(out, [ki, bi, oi, lf](Tape& tp) {
            const Mat& g = tp.grad(oi);
            Mat gb = chol_solve(lf, g);
            if (tp.needs_grad(ki)) {
                Mat gs = matmul(gb, transpose(tp.val(oi)));
                Mat gk(gs.rows(), gs.cols());
                for (int i = 0; i < gs.rows(); ++i)
                    for (int j = 0; j < gs.cols(); ++j) gk(i, j) = -0.5 * (gs(i, j) + gs(j, i));
                tp.accumulate(ki, gk);
            }
            if (tp.needs_grad(bi)) tp.accumulate(bi, gb);
        });
    }
    return out;
}

// log det K for symmetric positive definite K; backward dK += g * K^{-1}
// (already symmetric, so the symmetrization adjoint is the identity on it).
inline Var logdet_spd(Var k) {
    Tape& t = ad_detail::tape_of(k);
    Mat l = cholesky(ad_detail::symmetrize(k.val()));
    Mat y(1, 1);
    y(0, 0) = chol_logdet(l);
    Var out = t.push(std::move(y), t.needs_grad(k.idx));
    if (t.needs_grad(k.idx)) {
        const int ki = k.idx, oi = out.idx;
        const Mat lf = l;
        t.set_back(out, [ki, oi, lf](Tape& tp) {
            const double g = tp.grad(oi)(0, 0);
            Mat kinv = chol_solve(lf, Mat::identity(lf.rows()));
            Mat gk(kinv.rows(), kinv.cols());
            for (int i = 0; i < kinv.rows(); ++i)
                for (int j = 0; j < kinv.cols(); ++j) gk(i, j) = g * 0.5 * (kinv(i, j) + kinv(j, i));
            tp.accumulate(ki, gk);
        });
    }
    return out;
}

// Diagonal of a square matrix as a 1xM row.
inline Var diag_part(Var a) {
    Tape& t = ad_detail::tape_of(a);
    const Mat& x = a.val();
    if (x.rows() != x.cols()) throw ContractError("diag_part: matrix not square");
    Mat y(1, x.rows());
    for (int i = 0; i < x.rows(); ++i) y(0, i) = x(i, i);
    Var out = t.push(std::move(y), t.needs_grad(a.idx));
    if (t.needs_grad(a.idx)) {
        const int ai = a.idx, oi = out.idx;
        t.set_back(out, [ai, oi](Tape& tp) {
            const Mat& g = tp.grad(oi);
            const int n = g.cols();
            Mat gx(n, n);
            for (int i = 0; i < n; ++i) gx(i, i) = g(0, i);
            tp.accumulate(ai, gx);
        });
    }
    return out;
}

// ----- small conveniences -----

inline Var dot(Var a, Var b) { return sum_all(mul(a, b)); }

inline Var mean_all(Var a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.val().size()));
}

}  // namespace uedkl
