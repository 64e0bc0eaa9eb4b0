#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uedkl/common.hpp"
#include "uedkl/payload_prep.hpp"

namespace uedkl {

// Full run configuration for the two-stage pipeline. Defaults reproduce the
// reference setting at reduced dimensions so a bare config trains a small but
// faithfully shaped model.
struct RunConfig {
    // Tokenizer.
    TokenMode token_mode = TokenMode::trigram;
    int max_len = 256;
    int vocab_size = 20000;

    // Encoder.
    int enc_layers = 2;
    int enc_heads = 4;
    int enc_dim = 64;
    int pool_dim = 64;

    // GP layer.
    int gp_units = 16;
    int gp_inducing = 32;
    double gp_jitter = 1e-6;
    int t_train = 16;
    int t_eval = 64;

    // Ensemble.
    int num_learners = 6;
    int ens_dim = 32;
    double ens_delta = 0.001;
    double ens_zeta = 1e-4;

    // Optimizer (per stage).
    double lr_base = 1e-3;
    double lr_ensemble = 1e-3;
    int batch_size = 64;
    int epochs_base = 50;
    int epochs_ensemble = 50;

    // Splits.
    double train_ratio = 0.8;
    double val_ratio = 0.1;
    double test_ratio = 0.1;
    std::vector<std::string> unseen_classes;

    uint64_t master_seed = 1;

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw ConfigError(std::string("config: ") + name + " must be at least 1");
        };
        positive(max_len, "max_len");
        if (vocab_size < 3)
            throw ConfigError("config: vocab_size must exceed the two reserved tokens");
        positive(enc_layers, "encoder.layers");
        positive(enc_heads, "encoder.heads");
        positive(enc_dim, "encoder.dim");
        positive(pool_dim, "encoder.pool_dim");
        positive(gp_units, "gp.units");
        positive(gp_inducing, "gp.inducing");
        positive(t_train, "gp.t_train");
        if (t_eval < 2) throw ConfigError("config: gp.t_eval must be at least 2");
        positive(num_learners, "ensemble.learners");
        positive(ens_dim, "ensemble.dim");
        positive(batch_size, "optim.batch_size");
        positive(epochs_base, "optim.epochs_base");
        positive(epochs_ensemble, "optim.epochs_ensemble");
        if (enc_dim % enc_heads != 0)
            throw ConfigError("config: encoder.heads must divide encoder.dim");
        if (gp_jitter <= 0.0) throw ConfigError("config: gp.jitter must be positive");
        if (ens_delta < 0.0 || ens_zeta < 0.0)
            throw ConfigError("config: ensemble penalties must be nonnegative");
        if (lr_base <= 0.0 || lr_ensemble <= 0.0)
            throw ConfigError("config: learning rates must be positive");
        if (train_ratio <= 0.0 || val_ratio < 0.0 || test_ratio < 0.0)
            throw ConfigError("config: split ratios must be nonnegative with positive train");
        const double sum = train_ratio + val_ratio + test_ratio;
        if (std::fabs(sum - 1.0) > 1e-9)
            throw ConfigError("config: split ratios must sum to 1, got " + std::to_string(sum));
    }
};

namespace config_detail {

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& out) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

inline void check_keys(const nlohmann::json& obj, const char* section,
                       std::initializer_list<const char*> allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) ok = ok || it.key() == k;
        if (!ok)
            throw ConfigError(std::string("config: unknown key '") + it.key() +
                              "' in section '" + section + "'");
    }
}

}  // namespace config_detail

// Parses a nested JSON document; unknown keys are rejected so typos fail
// loudly, missing keys keep their defaults.
inline RunConfig config_from_json(const nlohmann::json& root) {
    if (!root.is_object()) throw ConfigError("config: document root must be an object");
    static const std::vector<std::string> known_sections = {
        "tokenizer", "encoder", "gp", "ensemble", "optim", "split", "master_seed"};
    for (auto it = root.begin(); it != root.end(); ++it) {
        bool ok = false;
        for (const std::string& s : known_sections) ok = ok || it.key() == s;
        if (!ok) throw ConfigError("config: unknown top-level key '" + it.key() + "'");
    }
    auto section = [&](const char* name) -> nlohmann::json {
        auto it = root.find(name);
        if (it == root.end()) return nlohmann::json::object();
        if (!it->is_object())
            throw ConfigError(std::string("config: section '") + name + "' must be an object");
        return *it;
    };
    using config_detail::check_keys;
    using config_detail::read_field;
    RunConfig c;

    nlohmann::json tok = section("tokenizer");
    check_keys(tok, "tokenizer", {"mode", "max_len", "vocab_size"});
    std::string mode = to_string(c.token_mode);
    read_field(tok, "mode", mode);
    c.token_mode = token_mode_from_string(mode);
    read_field(tok, "max_len", c.max_len);
    read_field(tok, "vocab_size", c.vocab_size);

    nlohmann::json enc = section("encoder");
    check_keys(enc, "encoder", {"layers", "heads", "dim", "pool_dim"});
    read_field(enc, "layers", c.enc_layers);
    read_field(enc, "heads", c.enc_heads);
    read_field(enc, "dim", c.enc_dim);
    read_field(enc, "pool_dim", c.pool_dim);

    nlohmann::json gp = section("gp");
    check_keys(gp, "gp", {"units", "inducing", "jitter", "t_train", "t_eval"});
    read_field(gp, "units", c.gp_units);
    read_field(gp, "inducing", c.gp_inducing);
    read_field(gp, "jitter", c.gp_jitter);
    read_field(gp, "t_train", c.t_train);
    read_field(gp, "t_eval", c.t_eval);

    nlohmann::json ens = section("ensemble");
    check_keys(ens, "ensemble", {"learners", "dim", "delta", "zeta"});
    read_field(ens, "learners", c.num_learners);
    read_field(ens, "dim", c.ens_dim);
    read_field(ens, "delta", c.ens_delta);
    read_field(ens, "zeta", c.ens_zeta);

    nlohmann::json optim = section("optim");
    check_keys(optim, "optim",
               {"lr_base", "lr_ensemble", "batch_size", "epochs_base", "epochs_ensemble"});
    read_field(optim, "lr_base", c.lr_base);
    read_field(optim, "lr_ensemble", c.lr_ensemble);
    read_field(optim, "batch_size", c.batch_size);
    read_field(optim, "epochs_base", c.epochs_base);
    read_field(optim, "epochs_ensemble", c.epochs_ensemble);

    nlohmann::json split = section("split");
    check_keys(split, "split", {"train_ratio", "val_ratio", "test_ratio", "unseen_classes"});
    read_field(split, "train_ratio", c.train_ratio);
    read_field(split, "val_ratio", c.val_ratio);
    read_field(split, "test_ratio", c.test_ratio);
    read_field(split, "unseen_classes", c.unseen_classes);

    read_field(root, "master_seed", c.master_seed);
    c.validate();
    return c;
}

inline nlohmann::ordered_json config_to_json(const RunConfig& c) {
    nlohmann::ordered_json root;
    root["tokenizer"] = {{"mode", to_string(c.token_mode)},
                         {"max_len", c.max_len},
                         {"vocab_size", c.vocab_size}};
    root["encoder"] = {{"layers", c.enc_layers},
                       {"heads", c.enc_heads},
                       {"dim", c.enc_dim},
                       {"pool_dim", c.pool_dim}};
    root["gp"] = {{"units", c.gp_units},
                  {"inducing", c.gp_inducing},
                  {"jitter", c.gp_jitter},
                  {"t_train", c.t_train},
                  {"t_eval", c.t_eval}};
    root["ensemble"] = {{"learners", c.num_learners},
                        {"dim", c.ens_dim},
                        {"delta", c.ens_delta},
                        {"zeta", c.ens_zeta}};
    root["optim"] = {{"lr_base", c.lr_base},
                     {"lr_ensemble", c.lr_ensemble},
                     {"batch_size", c.batch_size},
                     {"epochs_base", c.epochs_base},
                     {"epochs_ensemble", c.epochs_ensemble}};
    root["split"] = {{"train_ratio", c.train_ratio},
                     {"val_ratio", c.val_ratio},
                     {"test_ratio", c.test_ratio},
                     {"unseen_classes", c.unseen_classes}};
    root["master_seed"] = c.master_seed;
    return root;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: parse failure in '" + path + "': " + e.what());
    }
    return config_from_json(root);
}

inline void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("config: cannot write '" + path + "'");
    out << config_to_json(c).dump(2) << "\n";
}

}  // namespace uedkl
