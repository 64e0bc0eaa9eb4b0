#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "uedkl/base_learner.hpp"
#include "uedkl/config.hpp"
#include "uedkl/ensemble.hpp"
#include "uedkl/payload_prep.hpp"

namespace uedkl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is defined for little-endian hosts");

// Layout: 7 magic bytes, a little-endian uint64 header length, the JSON
// header, zero padding to an 8-byte boundary, then the tensor body. Tensors
// are packed row-major as little-endian 32-bit floats in manifest order, each
// starting on an 8-byte boundary relative to the body. Parameters are
// quantized to 32-bit on save, so a load immediately after a save reproduces
// the file byte for byte forever after.
inline constexpr char kCheckpointMagic[7] = {'U', 'E', 'D', 'K', 'L', '1', '\0'};
inline constexpr int kCheckpointVersion = 1;

namespace ckpt_detail {

inline size_t align8(size_t n) { return (n + 7) & ~static_cast<size_t>(7); }

struct TensorEntry {
    std::string name;
    int rows = 0;
    int cols = 0;
    size_t offset = 0;  // bytes from body start
};

template <typename Visitable>
std::vector<TensorEntry> build_manifest(const Visitable& visit) {
    std::vector<TensorEntry> manifest;
    size_t offset = 0;
    visit([&](const std::string& name, const Mat& m) {
        manifest.push_back({name, m.rows(), m.cols(), offset});
        offset = align8(offset + m.size() * sizeof(float));
    });
    return manifest;
}

template <typename Visitable>
std::string pack_body(const Visitable& visit, const std::vector<TensorEntry>& manifest) {
    size_t total = 0;
    for (const TensorEntry& t : manifest)
        total = align8(t.offset + static_cast<size_t>(t.rows) * t.cols * sizeof(float));
    std::string body(total, '\0');
    size_t idx = 0;
    visit([&](const std::string&, const Mat& m) {
        char* dst = body.data() + manifest[idx].offset;
        for (size_t i = 0; i < m.size(); ++i) {
            const float f = static_cast<float>(m[i]);
            std::memcpy(dst + i * sizeof(float), &f, sizeof(float));
        }
        ++idx;
    });
    return body;
}

template <typename Visitable>
void unpack_body(Visitable&& visit, const std::vector<TensorEntry>& manifest,
                 const std::string& body, const std::string& path) {
    size_t idx = 0;
    visit([&](const std::string& name, Mat& m) {
        if (idx >= manifest.size())
            throw IoError("checkpoint '" + path + "': manifest is missing tensor '" + name + "'");
        const TensorEntry& t = manifest[idx];
        if (t.name != name || t.rows != m.rows() || t.cols != m.cols())
            throw IoError("checkpoint '" + path + "': tensor '" + t.name + "' (" +
                          std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                          ") does not match expected '" + name + "' (" +
                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")");
        const size_t bytes = m.size() * sizeof(float);
        if (t.offset + bytes > body.size())
            throw IoError("checkpoint '" + path + "': body truncated at tensor '" + name + "'");
        for (size_t i = 0; i < m.size(); ++i) {
            float f;
            std::memcpy(&f, body.data() + t.offset + i * sizeof(float), sizeof(float));
            m[i] = static_cast<double>(f);
        }
        ++idx;
    });
    if (idx != manifest.size())
        throw IoError("checkpoint '" + path + "': manifest has " +
                      std::to_string(manifest.size()) + " tensors, expected " +
                      std::to_string(idx));
}

inline nlohmann::ordered_json manifest_to_json(const std::vector<TensorEntry>& manifest) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const TensorEntry& t : manifest)
        arr.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
    return arr;
}

inline std::vector<TensorEntry> manifest_from_json(const nlohmann::json& arr,
                                                   const std::string& path) {
    if (!arr.is_array()) throw IoError("checkpoint '" + path + "': tensor manifest missing");
    std::vector<TensorEntry> manifest;
    for (const nlohmann::json& e : arr)
        manifest.push_back({e.at("name").get<std::string>(), e.at("rows").get<int>(),
                            e.at("cols").get<int>(), e.at("offset").get<size_t>()});
    return manifest;
}

// Write-temp-then-rename so a crashed run never leaves a half-written file.
inline void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("checkpoint: cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("checkpoint: write failure on '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("checkpoint: cannot rename '" + tmp + "' to '" + path + "'");
}

inline std::string assemble(const nlohmann::ordered_json& header, const std::string& body) {
    const std::string header_text = header.dump();
    std::string file(sizeof(kCheckpointMagic), '\0');
    std::memcpy(file.data(), kCheckpointMagic, sizeof(kCheckpointMagic));
    const uint64_t header_len = header_text.size();
    file.append(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    file.append(header_text);
    file.resize(align8(file.size()), '\0');
    file.append(body);
    return file;
}

struct ParsedCheckpoint {
    nlohmann::json header;
    std::string body;
};

inline ParsedCheckpoint parse(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < sizeof(kCheckpointMagic) + sizeof(uint64_t) ||
        std::memcmp(file.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw IoError("checkpoint '" + path + "': bad magic bytes");
    uint64_t header_len = 0;
    std::memcpy(&header_len, file.data() + sizeof(kCheckpointMagic), sizeof(header_len));
    const size_t header_start = sizeof(kCheckpointMagic) + sizeof(uint64_t);
    if (header_start + header_len > file.size())
        throw IoError("checkpoint '" + path + "': header length exceeds file size");
    ParsedCheckpoint out;
    try {
        out.header = nlohmann::json::parse(file.substr(header_start, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint '" + path + "': header is not valid JSON: " + e.what());
    }
    const int version = out.header.value("version", -1);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint '" + path + "': unsupported version " +
                      std::to_string(version));
    out.body = file.substr(align8(header_start + header_len));
    return out;
}

}  // namespace ckpt_detail

// ---------------------------------------------------------------------------
// Base learner checkpoints
// ---------------------------------------------------------------------------

inline void save_base_checkpoint(const std::string& path, const BaseLearnerModel& model,
                                 const RunConfig& cfg, const Vocabulary& vocab,
                                 const std::vector<std::string>& labels) {
    auto visit = [&](auto&& f) { visit_base_params(model, f); };
    const std::vector<ckpt_detail::TensorEntry> manifest = ckpt_detail::build_manifest(visit);

    nlohmann::ordered_json header;
    header["version"] = kCheckpointVersion;
    header["kind"] = "base";
    header["config"] = config_to_json(cfg);
    header["labels"] = labels;
    header["vocab"] = vocab.tokens();
    header["learner_id"] = model.learner_id;
    header["seed"] = model.seed;
    header["tensors"] = ckpt_detail::manifest_to_json(manifest);

    ckpt_detail::atomic_write(
        path, ckpt_detail::assemble(header, ckpt_detail::pack_body(visit, manifest)));
}

struct LoadedBase {
    BaseLearnerModel model;
    RunConfig config;
    Vocabulary vocab;
    std::vector<std::string> labels;
};

inline LoadedBase load_base_checkpoint(const std::string& path) {
    ckpt_detail::ParsedCheckpoint parsed = ckpt_detail::parse(path);
    const nlohmann::json& h = parsed.header;
    if (h.value("kind", "") != std::string("base"))
        throw IoError("checkpoint '" + path + "': expected a base-learner checkpoint");

    LoadedBase out;
    out.config = config_from_json(h.at("config"));
    out.labels = h.at("labels").get<std::vector<std::string>>();
    out.vocab = Vocabulary::from_tokens(h.at("vocab").get<std::vector<std::string>>(),
                                        out.config.token_mode);
    if (out.labels.size() < 2)
        throw IoError("checkpoint '" + path + "': needs at least two labels");

    EncoderConfig enc;
    enc.vocab_size = static_cast<int>(out.vocab.size());
    enc.max_len = out.config.max_len;
    enc.dim = out.config.enc_dim;
    enc.layers = out.config.enc_layers;
    enc.heads = out.config.enc_heads;
    enc.pool_dim = out.config.pool_dim;
    GPConfig gp;
    gp.num_units = out.config.gp_units;
    gp.num_inducing = out.config.gp_inducing;
    gp.input_dim = out.config.enc_dim;
    gp.jitter = out.config.gp_jitter;

    out.model = BaseLearnerModel::init(enc, gp, static_cast<int>(out.labels.size()),
                                       h.value("learner_id", 0), h.value("seed", uint64_t{0}));
    ckpt_detail::unpack_body([&](auto&& f) { visit_base_params(out.model, f); },
                             ckpt_detail::manifest_from_json(h.at("tensors"), path), parsed.body,
                             path);
    return out;
}

// ---------------------------------------------------------------------------
// Ensemble checkpoints
// ---------------------------------------------------------------------------

inline void save_ensemble_checkpoint(const std::string& path, const EnsembleParams& params,
                                     const RunConfig& cfg,
                                     const std::vector<std::string>& labels) {
    auto visit = [&](auto&& f) { visit_ensemble_params(params, f); };
    const std::vector<ckpt_detail::TensorEntry> manifest = ckpt_detail::build_manifest(visit);

    nlohmann::ordered_json header;
    header["version"] = kCheckpointVersion;
    header["kind"] = "ensemble";
    header["config"] = config_to_json(cfg);
    header["labels"] = labels;
    header["tensors"] = ckpt_detail::manifest_to_json(manifest);

    ckpt_detail::atomic_write(
        path, ckpt_detail::assemble(header, ckpt_detail::pack_body(visit, manifest)));
}

struct LoadedEnsemble {
    EnsembleParams params;
    RunConfig config;
    std::vector<std::string> labels;
};

inline LoadedEnsemble load_ensemble_checkpoint(const std::string& path) {
    ckpt_detail::ParsedCheckpoint parsed = ckpt_detail::parse(path);
    const nlohmann::json& h = parsed.header;
    if (h.value("kind", "") != std::string("ensemble"))
        throw IoError("checkpoint '" + path + "': expected an ensemble checkpoint");

    LoadedEnsemble out;
    out.config = config_from_json(h.at("config"));
    out.labels = h.at("labels").get<std::vector<std::string>>();

    EnsembleConfig ec;
    ec.num_learners = out.config.num_learners;
    ec.num_classes = static_cast<int>(out.labels.size());
    ec.dim = out.config.ens_dim;
    ec.delta = out.config.ens_delta;
    ec.zeta = out.config.ens_zeta;
    Rng scratch(0);
    out.params = EnsembleParams::init(ec, scratch);
    ckpt_detail::unpack_body([&](auto&& f) { visit_ensemble_params(out.params, f); },
                             ckpt_detail::manifest_from_json(h.at("tensors"), path), parsed.body,
                             path);
    return out;
}

}  // namespace uedkl
