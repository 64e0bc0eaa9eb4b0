#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "uedkl/autodiff.hpp"
#include "uedkl/mat.hpp"
#include "uedkl/optim.hpp"
#include "uedkl/rng.hpp"

namespace uedkl {

struct EncoderConfig {
    int vocab_size = 0;
    int max_len = 256;
    int dim = 64;       // model width D
    int layers = 2;
    int heads = 4;
    int pool_dim = 64;  // attention-pooling width
    int ffn_mult = 4;
    double ln_eps = 1e-5;

    void validate() const {
        if (vocab_size < 2) throw ConfigError("encoder: vocab_size must be at least 2");
        if (max_len < 1) throw ConfigError("encoder: max_len must be positive");
        if (dim < 2 || dim % 2 != 0) throw ConfigError("encoder: dim must be even and >= 2");
        if (layers < 1) throw ConfigError("encoder: layers must be positive");
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("encoder: heads must divide dim");
        if (pool_dim < 1) throw ConfigError("encoder: pool_dim must be positive");
        if (ffn_mult < 1) throw ConfigError("encoder: ffn_mult must be positive");
    }
};

struct EncoderLayerParams {
    Mat ln1_g, ln1_b;                // 1 x D
    Mat wq, bq, wk, bk, wv, bv;      // D x D weights (applied as X W^T), 1 x D biases
    Mat wo, bo;
    Mat ln2_g, ln2_b;
    Mat ff1_w, ff1_b;                // (mult*D) x D, 1 x (mult*D)
    Mat ff2_w, ff2_b;                // D x (mult*D), 1 x D
};

// Fixed sinusoidal positional table: row p holds interleaved
// sin(p / 10000^(2i/D)), cos(p / 10000^(2i/D)).
inline Mat sinusoidal_positions(int max_len, int dim) {
    Mat pos(max_len, dim);
    for (int p = 0; p < max_len; ++p) {
        for (int i = 0; i < dim / 2; ++i) {
            const double rate = std::pow(10000.0, 2.0 * i / static_cast<double>(dim));
            pos(p, 2 * i) = std::sin(p / rate);
            pos(p, 2 * i + 1) = std::cos(p / rate);
        }
    }
    return pos;
}

struct EncoderParams {
    EncoderConfig cfg;
    Mat embedding;   // vocab x D, trainable
    Mat positional;  // max_len x D, fixed (not a parameter)
    std::vector<EncoderLayerParams> layers;
    Mat lnf_g, lnf_b;  // final pre-pooling layer norm
    Mat pool_w;        // D_a x D
    Mat pool_b;        // 1 x D_a
    Mat pool_v;        // D_a x 1

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
        cfg.validate();
        EncoderParams p;
        p.cfg = cfg;
        const int d = cfg.dim;
        p.embedding = rng.normal_mat(cfg.vocab_size, d, 0.1);
        p.positional = sinusoidal_positions(cfg.max_len, d);
        const double ws = 1.0 / std::sqrt(static_cast<double>(d));
        for (int l = 0; l < cfg.layers; ++l) {
            EncoderLayerParams lp;
            lp.ln1_g = Mat(1, d, 1.0);
            lp.ln1_b = Mat(1, d, 0.0);
            lp.wq = rng.normal_mat(d, d, ws);
            lp.bq = Mat(1, d, 0.0);
            lp.wk = rng.normal_mat(d, d, ws);
            lp.bk = Mat(1, d, 0.0);
            lp.wv = rng.normal_mat(d, d, ws);
            lp.bv = Mat(1, d, 0.0);
            lp.wo = rng.normal_mat(d, d, ws);
            lp.bo = Mat(1, d, 0.0);
            lp.ln2_g = Mat(1, d, 1.0);
            lp.ln2_b = Mat(1, d, 0.0);
            const int f = cfg.ffn_mult * d;
            lp.ff1_w = rng.normal_mat(f, d, ws);
            lp.ff1_b = Mat(1, f, 0.0);
            lp.ff2_w = rng.normal_mat(d, f, 1.0 / std::sqrt(static_cast<double>(f)));
            lp.ff2_b = Mat(1, d, 0.0);
            p.layers.push_back(std::move(lp));
        }
        p.lnf_g = Mat(1, d, 1.0);
        p.lnf_b = Mat(1, d, 0.0);
        p.pool_w = rng.normal_mat(cfg.pool_dim, d, ws);
        p.pool_b = Mat(1, cfg.pool_dim, 0.0);
        p.pool_v = rng.normal_mat(cfg.pool_dim, 1, 1.0 / std::sqrt(static_cast<double>(cfg.pool_dim)));
        return p;
    }
};

// Canonical parameter traversal. Everything that maps parameters to flat
// lists (optimizer registration, tape variables, checkpoints) goes through
// this one function so the orders can never disagree.
template <typename Params, typename F>
void visit_encoder_params(Params& p, F&& f) {
    f("embedding", p.embedding);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string pre = "layer" + std::to_string(i) + ".";
        f(pre + "ln1_g", l.ln1_g);
        f(pre + "ln1_b", l.ln1_b);
        f(pre + "wq", l.wq);
        f(pre + "bq", l.bq);
        f(pre + "wk", l.wk);
        f(pre + "bk", l.bk);
        f(pre + "wv", l.wv);
        f(pre + "bv", l.bv);
        f(pre + "wo", l.wo);
        f(pre + "bo", l.bo);
        f(pre + "ln2_g", l.ln2_g);
        f(pre + "ln2_b", l.ln2_b);
        f(pre + "ff1_w", l.ff1_w);
        f(pre + "ff1_b", l.ff1_b);
        f(pre + "ff2_w", l.ff2_w);
        f(pre + "ff2_b", l.ff2_b);
    }
    f("lnf_g", p.lnf_g);
    f("lnf_b", p.lnf_b);
    f("pool_w", p.pool_w);
    f("pool_b", p.pool_b);
    f("pool_v", p.pool_v);
}

struct EncoderLayerVars {
    Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct EncoderVars {
    Var embedding;
    std::vector<EncoderLayerVars> layers;
    Var lnf_g, lnf_b, pool_w, pool_b, pool_v;
};

// Rebuilds the typed Var struct from a flat list laid out in
// visit_encoder_params order.
inline EncoderVars encoder_vars_from_list(const std::vector<Var>& vs, int num_layers) {
    EncoderVars ev;
    size_t k = 0;
    auto next = [&]() {
        if (k >= vs.size()) throw ContractError("encoder_vars_from_list: list too short");
        return vs[k++];
    };
    ev.embedding = next();
    for (int l = 0; l < num_layers; ++l) {
        EncoderLayerVars lv;
        lv.ln1_g = next();
        lv.ln1_b = next();
        lv.wq = next();
        lv.bq = next();
        lv.wk = next();
        lv.bk = next();
        lv.wv = next();
        lv.bv = next();
        lv.wo = next();
        lv.bo = next();
        lv.ln2_g = next();
        lv.ln2_b = next();
        lv.ff1_w = next();
        lv.ff1_b = next();
        lv.ff2_w = next();
        lv.ff2_b = next();
        ev.layers.push_back(lv);
    }
    ev.lnf_g = next();
    ev.lnf_b = next();
    ev.pool_w = next();
    ev.pool_b = next();
    ev.pool_v = next();
    if (k != vs.size()) throw ContractError("encoder_vars_from_list: list too long");
    return ev;
}

// Pushes every encoder parameter onto the tape (as inputs when trainable,
// constants otherwise) and optionally records the flat Var list so gradients
// can be read back in visit order.
inline EncoderVars make_encoder_vars(Tape& tape, const EncoderParams& p, bool trainable,
                                     std::vector<Var>* registry = nullptr) {
    std::vector<Var> flat;
    visit_encoder_params(p, [&](const std::string&, const Mat& m) {
        flat.push_back(trainable ? tape.input(m) : tape.constant(m));
    });
    if (registry) registry->insert(registry->end(), flat.begin(), flat.end());
    return encoder_vars_from_list(flat, static_cast<int>(p.layers.size()));
}

// Row-wise layer normalization with learnable gain/bias (both 1 x D).
inline Var layer_norm(Var x, Var g, Var b, double eps) {
    const int d = x.cols();
    Var mean = scale(row_sum(x), 1.0 / d);
    Var centered = add_col_broadcast(x, neg(mean));
    Var var = scale(row_sum(square(centered)), 1.0 / d);
    Var inv = recip(vsqrt(add_const(var, eps)));
    Var normed = mul_col_broadcast(centered, inv);
    return add_row_broadcast(mul_row_broadcast(normed, g), b);
}

// Token mixing for one payload: embeddings + positions through `layers`
// pre-norm residual blocks. `indices` may be a trimmed sequence (no padding)
// or a padded one accompanied by `valid`; masked key positions receive
// exactly zero attention.
inline Var encoder_forward(Tape& tape, const EncoderVars& ev, const EncoderParams& p,
                           const std::vector<int>& indices,
                           const std::vector<uint8_t>* valid = nullptr) {
    const EncoderConfig& cfg = p.cfg;
    const int t_len = static_cast<int>(indices.size());
    if (t_len < 1) throw ContractError("encoder_forward: empty token sequence");
    if (t_len > cfg.max_len) throw ContractError("encoder_forward: sequence exceeds max_len");
    if (valid && static_cast<int>(valid->size()) != t_len)
        throw ContractError("encoder_forward: mask length mismatch");

    Mat pos(t_len, cfg.dim);
    for (int i = 0; i < t_len; ++i)
        for (int j = 0; j < cfg.dim; ++j) pos(i, j) = p.positional(i, j);

    Var x = add(gather_rows(ev.embedding, indices), tape.constant(std::move(pos)));

    Mat attn_mask;  // empty when no padding: all keys valid
    if (valid) {
        attn_mask = Mat(t_len, t_len);
        for (int i = 0; i < t_len; ++i)
            for (int j = 0; j < t_len; ++j) attn_mask(i, j) = (*valid)[static_cast<size_t>(j)] ? 1.0 : 0.0;
    }

    const int head_dim = cfg.dim / cfg.heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    for (const EncoderLayerVars& l : ev.layers) {
        Var h = layer_norm(x, l.ln1_g, l.ln1_b, cfg.ln_eps);
        Var q = add_row_broadcast(matmul(h, transpose(l.wq)), l.bq);
        Var k = add_row_broadcast(matmul(h, transpose(l.wk)), l.bk);
        Var v = add_row_broadcast(matmul(h, transpose(l.wv)), l.bv);
        std::vector<Var> heads;
        heads.reserve(static_cast<size_t>(cfg.heads));
        for (int hi = 0; hi < cfg.heads; ++hi) {
            const int c0 = hi * head_dim, c1 = (hi + 1) * head_dim;
            Var qh = slice_cols(q, c0, c1);
            Var kh = slice_cols(k, c0, c1);
            Var vh = slice_cols(v, c0, c1);
            Var scores = scale(matmul(qh, transpose(kh)), att_scale);
            Var probs = row_softmax(scores, attn_mask);
            heads.push_back(matmul(probs, vh));
        }
        Var ctx = cfg.heads == 1 ? heads[0] : concat_cols(heads);
        x = add(x, add_row_broadcast(matmul(ctx, transpose(l.wo)), l.bo));

        Var h2 = layer_norm(x, l.ln2_g, l.ln2_b, cfg.ln_eps);
        Var f1 = gelu(add_row_broadcast(matmul(h2, transpose(l.ff1_w)), l.ff1_b));
        Var f2 = add_row_broadcast(matmul(f1, transpose(l.ff2_w)), l.ff2_b);
        x = add(x, f2);
    }
    return layer_norm(x, ev.lnf_g, ev.lnf_b, cfg.ln_eps);
}

struct PoolVars {
    Var pooled;  // 1 x D
    Var attn;    // 1 x T, zero at masked positions
};

// Scores each token with tanh(W_r e_t + b_r) . w_r, softmaxes over the
// unmasked positions, and returns the weighted sum of token vectors.
inline PoolVars attention_pool(Var tokens, Var pool_w, Var pool_b, Var pool_v,
                               const std::vector<uint8_t>* valid = nullptr) {
    Var r = vtanh(add_row_broadcast(matmul(tokens, transpose(pool_w)), pool_b));
    Var s = transpose(matmul(r, pool_v));  // 1 x T
    Mat mask;
    if (valid) {
        mask = Mat(1, static_cast<int>(valid->size()));
        for (size_t j = 0; j < valid->size(); ++j) mask(0, static_cast<int>(j)) = (*valid)[j] ? 1.0 : 0.0;
    }
    Var a = row_softmax(s, mask);
    return {matmul(a, tokens), a};
}

struct PayloadRepresentation {
    Mat e_x;              // 1 x D
    Mat token_attention;  // 1 x T
};

// Inference-only wrapper: runs the encoder on a private tape with constant
// parameters and extracts plain matrices.
inline PayloadRepresentation encode_payload(const EncoderParams& p, const std::vector<int>& indices,
                                            const std::vector<uint8_t>* valid = nullptr) {
    Tape tape;
    EncoderVars ev = make_encoder_vars(tape, p, /*trainable=*/false);
    Var tokens = encoder_forward(tape, ev, p, indices, valid);
    PoolVars pooled = attention_pool(tokens, ev.pool_w, ev.pool_b, ev.pool_v, valid);
    return {pooled.pooled.val(), pooled.attn.val()};
}

// Drops padded positions, keeping index/mask pairs aligned.
inline std::vector<int> trim_padding(const std::vector<int>& indices,
                                     const std::vector<uint8_t>& mask) {
    if (indices.size() != mask.size()) throw ContractError("trim_padding: length mismatch");
    std::vector<int> out;
    for (size_t i = 0; i < indices.size(); ++i)
        if (mask[i]) out.push_back(indices[i]);
    return out;
}

}  // namespace uedkl
