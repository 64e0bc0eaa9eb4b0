#pragma once

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "uedkl/checkpoint.hpp"
#include "uedkl/config.hpp"
#include "uedkl/dataset.hpp"
#include "uedkl/metrics.hpp"
#include "uedkl/prediction_io.hpp"

namespace uedkl {

// File layout of a run directory. Every stage communicates with the next
// through these files only, which is what makes reruns byte-reproducible.
struct RunPaths {
    std::string root;

    std::string config() const { return root + "/config.json"; }
    std::string vocab() const { return root + "/vocab.json"; }
    std::string labels() const { return root + "/labels.json"; }
    std::string split(const std::string& name) const { return root + "/" + name + ".csv"; }
    std::string base_ckpt(int learner) const {
        return root + "/base_" + std::to_string(learner) + ".ckpt";
    }
    std::string ensemble_ckpt() const { return root + "/ensemble.ckpt"; }
};

// Seed streams hanging off the master seed. Values are arbitrary but frozen:
// changing them changes every artifact byte.
namespace seed_stream {
inline constexpr uint64_t kSplit = 1;
inline constexpr uint64_t kBaseLearner = 100;   // + learner_id
inline constexpr uint64_t kInducing = 500;
inline constexpr uint64_t kPredict = 200;       // + learner_id, then item index
inline constexpr uint64_t kEnsembleInit = 300;
inline constexpr uint64_t kEnsembleTrain = 301;
}  // namespace seed_stream

namespace pipeline_detail {

inline void write_text_atomic(const std::string& path, const std::string& text) {
    ckpt_detail::atomic_write(path, text);
}

inline std::string read_text(const std::string& path) {
    return dataset_detail::read_whole_file(path);
}

}  // namespace pipeline_detail

// ---------------------------------------------------------------------------
// prep
// ---------------------------------------------------------------------------

struct PrepSummary {
    size_t train = 0, val = 0, test = 0, unseen = 0;
    size_t vocab_size = 0;
    std::vector<std::string> labels;
};

inline PrepSummary prep_run(const RunConfig& cfg, const std::vector<DatasetRecord>& records,
                            const std::string& root) {
    cfg.validate();
    std::filesystem::create_directories(root);
    RunPaths paths{root};

    SplitResult splits =
        split_records(records, cfg.train_ratio, cfg.val_ratio, cfg.test_ratio,
                      mix_seed(cfg.master_seed, seed_stream::kSplit), cfg.unseen_classes);

    std::vector<TokenSequence> train_tokens;
    train_tokens.reserve(splits.train.size());
    for (const DatasetRecord& r : splits.train)
        train_tokens.push_back(tokenize(normalize(r.payload), cfg.token_mode));
    Vocabulary vocab =
        Vocabulary::build(train_tokens, static_cast<size_t>(cfg.vocab_size), cfg.token_mode);

    const std::vector<std::string> labels = label_table(splits.train);
    if (labels.size() < 2) throw ConfigError("prep: need at least two training classes");

    save_config(cfg, paths.config());
    nlohmann::ordered_json vocab_doc;
    vocab_doc["mode"] = to_string(cfg.token_mode);
    vocab_doc["tokens"] = vocab.tokens();
    pipeline_detail::write_text_atomic(paths.vocab(), vocab_doc.dump(2) + "\n");
    pipeline_detail::write_text_atomic(paths.labels(),
                                       nlohmann::ordered_json(labels).dump(2) + "\n");
    write_csv(paths.split("train"), splits.train);
    write_csv(paths.split("val"), splits.val);
    write_csv(paths.split("test"), splits.test);
    write_csv(paths.split("unseen"), splits.unseen);

    return {splits.train.size(), splits.val.size(),   splits.test.size(),
            splits.unseen.size(), vocab.size(), labels};
}

// ---------------------------------------------------------------------------
// run-directory loading
// ---------------------------------------------------------------------------

inline RunConfig load_run_config(const std::string& root) {
    return load_config(RunPaths{root}.config());
}

inline Vocabulary load_run_vocab(const std::string& root) {
    const std::string text = pipeline_detail::read_text(RunPaths{root}.vocab());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("vocab.json: parse failure: ") + e.what());
    }
    return Vocabulary::from_tokens(doc.at("tokens").get<std::vector<std::string>>(),
                                   token_mode_from_string(doc.at("mode").get<std::string>()));
}

inline std::vector<std::string> load_run_labels(const std::string& root) {
    const std::string text = pipeline_detail::read_text(RunPaths{root}.labels());
    try {
        return nlohmann::json::parse(text).get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("labels.json: parse failure: ") + e.what());
    }
}

inline std::vector<DatasetRecord> load_run_split(const std::string& root,
                                                 const std::string& name) {
    return ingest_csv(RunPaths{root}.split(name)).records;
}

inline int label_index(const std::vector<std::string>& labels, const std::string& label) {
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == label) return static_cast<int>(i);
    return -1;
}

// Normalize, tokenize, truncate to max_len, and look up indices. Padding is
// dropped entirely (the encoder's masked and trimmed paths agree bitwise, and
// trimming is cheaper). An empty tokenization becomes a single <unk> token.
inline std::vector<int> payload_to_indices(const std::string& payload, const Vocabulary& vocab,
                                           int max_len) {
    TokenSequence seq = tokenize(normalize(payload), vocab.mode());
    std::vector<int> out;
    const size_t n = std::min(seq.tokens.size(), static_cast<size_t>(max_len));
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) out.push_back(vocab.lookup(seq.tokens[i]));
    if (out.empty()) out.push_back(kUnkIndex);
    return out;
}

inline std::vector<EncodedExample> encode_records(const std::vector<DatasetRecord>& records,
                                                  const Vocabulary& vocab, int max_len,
                                                  const std::vector<std::string>& labels) {
    std::vector<EncodedExample> out;
    out.reserve(records.size());
    for (const DatasetRecord& r : records) {
        const int idx = label_index(labels, r.label);
        if (idx < 0)
            throw ContractError("encode_records: label '" + r.label +
                                "' is not in the training label table");
        out.push_back({payload_to_indices(r.payload, vocab, max_len), idx});
    }
    return out;
}

// ---------------------------------------------------------------------------
// train-base
// ---------------------------------------------------------------------------

inline EncoderConfig encoder_config_of(const RunConfig& cfg, size_t vocab_size) {
    EncoderConfig enc;
    enc.vocab_size = static_cast<int>(vocab_size);
    enc.max_len = cfg.max_len;
    enc.dim = cfg.enc_dim;
    enc.layers = cfg.enc_layers;
    enc.heads = cfg.enc_heads;
    enc.pool_dim = cfg.pool_dim;
    return enc;
}

inline GPConfig gp_config_of(const RunConfig& cfg) {
    GPConfig gp;
    gp.num_units = cfg.gp_units;
    gp.num_inducing = cfg.gp_inducing;
    gp.input_dim = cfg.enc_dim;
    gp.jitter = cfg.gp_jitter;
    return gp;
}

inline TrainBaseResult train_base_run(const std::string& root, int learner_id) {
    const RunConfig cfg = load_run_config(root);
    if (learner_id < 0 || learner_id >= cfg.num_learners)
        throw ConfigError("train-base: learner_id " + std::to_string(learner_id) +
                          " outside [0, " + std::to_string(cfg.num_learners) + ")");
    const Vocabulary vocab = load_run_vocab(root);
    const std::vector<std::string> labels = load_run_labels(root);

    const std::vector<EncodedExample> train =
        encode_records(load_run_split(root, "train"), vocab, cfg.max_len, labels);
    const std::vector<EncodedExample> val =
        encode_records(load_run_split(root, "val"), vocab, cfg.max_len, labels);

    BaseLearnerModel model = BaseLearnerModel::init(
        encoder_config_of(cfg, vocab.size()), gp_config_of(cfg),
        static_cast<int>(labels.size()), learner_id,
        mix_seed(cfg.master_seed, seed_stream::kBaseLearner + static_cast<uint64_t>(learner_id)));
    Rng inducing_rng(mix_seed(model.seed, seed_stream::kInducing));
    init_inducing_from_data(model, train, inducing_rng);

    TrainBaseOptions opt;
    opt.epochs = cfg.epochs_base;
    opt.batch_size = cfg.batch_size;
    opt.lr = cfg.lr_base;
    opt.t_train = cfg.t_train;
    TrainBaseResult result = train_base(model, train, val, opt);

    save_base_checkpoint(RunPaths{root}.base_ckpt(learner_id), model, cfg, vocab, labels);
    return result;
}

// Trains all H learners, optionally several in parallel (they are fully
// independent jobs, so scheduling cannot change any artifact).
inline std::vector<TrainBaseResult> train_base_all(const std::string& root, int jobs = 1) {
    const RunConfig cfg = load_run_config(root);
    const int h = cfg.num_learners;
    if (jobs < 1) throw ConfigError("train-base: jobs must be at least 1");
    std::vector<TrainBaseResult> results(static_cast<size_t>(h));
    if (jobs == 1) {
        for (int i = 0; i < h; ++i) results[static_cast<size_t>(i)] = train_base_run(root, i);
        return results;
    }
    std::vector<std::exception_ptr> errors(static_cast<size_t>(h));
    std::vector<std::thread> pool;
    const int workers = std::min(jobs, h);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (int i = w; i < h; i += workers) {
                try {
                    results[static_cast<size_t>(i)] = train_base_run(root, i);
                } catch (...) {
                    errors[static_cast<size_t>(i)] = std::current_exception();
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

// Uniform-weight combination used for stage-1 caches, before any ensemble
// parameters exist.
inline EnsemblePrediction uniform_ensemble_predict(const std::vector<BasePrediction>& preds,
                                                   int num_classes) {
    PreparedEnsembleItem item = prepare_ensemble_item(preds, num_classes);
    const int h = static_cast<int>(preds.size());
    EnsemblePrediction out;
    out.alpha = Mat(h, num_classes, 1.0 / static_cast<double>(h));
    out.combined = combine(item.u, out.alpha);
    out.sigma = ensemble_sigma(out.alpha, item.cov_c);
    out.u = 0.0;
    for (int c = 0; c < num_classes; ++c) out.u += out.sigma(0, c);
    out.pred = 0;
    for (int c = 1; c < num_classes; ++c)
        if (out.combined(0, c) > out.combined(0, out.pred)) out.pred = c;
    return out;
}

struct PredictOptions {
    std::string split = "test";
    std::string ensemble_path;     // empty: uniform combination
    bool include_learners = true;  // cache per-learner blocks for stage 2
};

inline std::vector<PredictionRecord> predict_run(const std::string& root,
                                                 const PredictOptions& opt) {
    const RunConfig cfg = load_run_config(root);
    RunPaths paths{root};

    std::vector<LoadedBase> bases;
    for (int h = 0; h < cfg.num_learners; ++h)
        bases.push_back(load_base_checkpoint(paths.base_ckpt(h)));
    for (const LoadedBase& b : bases) {
        if (!(b.vocab == bases[0].vocab) || b.labels != bases[0].labels)
            throw ConfigError("predict: base checkpoints disagree on vocabulary or labels");
    }
    const std::vector<std::string>& labels = bases[0].labels;
    const int num_classes = static_cast<int>(labels.size());

    LoadedEnsemble ens;
    const bool use_ensemble = !opt.ensemble_path.empty();
    if (use_ensemble) {
        ens = load_ensemble_checkpoint(opt.ensemble_path);
        if (ens.labels != labels)
            throw ConfigError("predict: ensemble checkpoint labels disagree with base learners");
    }

    const std::vector<DatasetRecord> records = load_run_split(root, opt.split);
    const bool unseen_split = opt.split == "unseen";

    std::vector<PredictionRecord> out;
    out.reserve(records.size());
    for (size_t i = 0; i < records.size(); ++i) {
        std::vector<BasePrediction> preds;
        preds.reserve(bases.size());
        for (size_t h = 0; h < bases.size(); ++h) {
            Rng noise(mix_seed(cfg.master_seed, seed_stream::kPredict + h, i));
            preds.push_back(forward_predict(
                bases[h].model, payload_to_indices(records[i].payload, bases[h].vocab, cfg.max_len),
                cfg.t_eval, noise));
        }
        EnsemblePrediction combined = use_ensemble
                                          ? ensemble_predict(preds, ens.params)
                                          : uniform_ensemble_predict(preds, num_classes);
        PredictionRecord rec;
        rec.id = static_cast<int64_t>(i);
        rec.label = records[i].label;
        rec.unseen = unseen_split;
        for (int c = 0; c < num_classes; ++c) {
            rec.probs.push_back(combined.combined(0, c));
            rec.vars.push_back(combined.sigma(0, c));
        }
        rec.u = combined.u;
        rec.pred = labels[static_cast<size_t>(combined.pred)];
        if (opt.include_learners) rec.learners = preds;
        out.push_back(std::move(rec));
    }
    return out;
}

inline void predict_to_file(const std::string& root, const PredictOptions& opt,
                            const std::string& out_path) {
    write_predictions(out_path, predict_run(root, opt));
}

// ---------------------------------------------------------------------------
// train-ensemble
// ---------------------------------------------------------------------------

inline TrainEnsembleResult train_ensemble_run(const std::string& root,
                                              const std::string& train_preds_path,
                                              const std::string& val_preds_path) {
    const RunConfig cfg = load_run_config(root);
    const std::vector<std::string> labels = load_run_labels(root);

    const std::vector<PreparedEnsembleItem> train =
        records_to_items(read_predictions(train_preds_path), labels);
    std::vector<PreparedEnsembleItem> val;
    if (!val_preds_path.empty())
        val = records_to_items(read_predictions(val_preds_path), labels);

    EnsembleConfig ec;
    ec.num_learners = cfg.num_learners;
    ec.num_classes = static_cast<int>(labels.size());
    ec.dim = cfg.ens_dim;
    ec.delta = cfg.ens_delta;
    ec.zeta = cfg.ens_zeta;
    ec.validate();
    Rng init_rng(mix_seed(cfg.master_seed, seed_stream::kEnsembleInit));
    EnsembleParams params = EnsembleParams::init(ec, init_rng);

    TrainEnsembleOptions opt;
    opt.epochs = cfg.epochs_ensemble;
    opt.batch_size = cfg.batch_size;
    opt.lr = cfg.lr_ensemble;
    TrainEnsembleResult result = train_ensemble(
        params, train, val, opt, mix_seed(cfg.master_seed, seed_stream::kEnsembleTrain));

    save_ensemble_checkpoint(RunPaths{root}.ensemble_ckpt(), params, cfg, labels);
    return result;
}

// ---------------------------------------------------------------------------
// evaluate / curve
// ---------------------------------------------------------------------------

// Index table for scoring: the training classes first, then any extra label
// strings (unseen classes) sorted, so every record can be indexed.
inline std::vector<std::string> eval_label_table(const std::vector<std::string>& seen,
                                                 const std::vector<PredictionRecord>& records) {
    std::vector<std::string> table = seen;
    std::set<std::string> extra;
    for (const PredictionRecord& r : records)
        if (label_index(table, r.label) < 0) extra.insert(r.label);
    table.insert(table.end(), extra.begin(), extra.end());
    return table;
}

struct EvalOutput {
    std::vector<std::string> labels;  // extended table used for indexing
    EvalReport report;
    UncertaintyGroups groups;
};

inline EvalOutput evaluate_records(const std::vector<PredictionRecord>& records,
                                   const std::vector<std::string>& seen_labels) {
    if (records.empty()) throw ContractError("evaluate: no prediction records");
    EvalOutput out;
    out.labels = eval_label_table(seen_labels, records);
    std::vector<int> y_true, y_pred;
    std::vector<double> u;
    std::vector<uint8_t> unseen;
    for (const PredictionRecord& r : records) {
        const int t = label_index(out.labels, r.label);
        const int p = label_index(out.labels, r.pred);
        if (p < 0)
            throw ContractError("evaluate: predicted label '" + r.pred +
                                "' is not a training class");
        y_true.push_back(t);
        y_pred.push_back(p);
        u.push_back(r.u);
        unseen.push_back(r.unseen ? 1 : 0);
    }
    out.report = compute_metrics(y_true, y_pred, static_cast<int>(out.labels.size()));
    out.groups = uncertainty_groups(y_true, y_pred, u, unseen);
    return out;
}

struct CurveOutput {
    std::vector<std::string> labels;
    HUFCurve curve;
    HUFCurve baseline;
};

inline CurveOutput curve_records(const std::vector<PredictionRecord>& records,
                                 const std::vector<std::string>& seen_labels,
                                 uint64_t baseline_seed) {
    if (records.empty()) throw ContractError("curve: no prediction records");
    CurveOutput out;
    out.labels = eval_label_table(seen_labels, records);
    std::vector<int> y_true, y_pred;
    std::vector<double> u;
    for (const PredictionRecord& r : records) {
        y_true.push_back(label_index(out.labels, r.label));
        const int p = label_index(out.labels, r.pred);
        if (p < 0)
            throw ContractError("curve: predicted label '" + r.pred +
                                "' is not a training class");
        y_pred.push_back(p);
        u.push_back(r.u);
    }
    const int c = static_cast<int>(out.labels.size());
    out.curve = huf_curve(y_true, y_pred, u, c);
    out.baseline = random_correction_baseline(y_true, y_pred, c, baseline_seed);
    return out;
}

// Two-column ASCII: ratio then weighted F score, one point per line.
inline std::string format_curve(const HUFCurve& curve) {
    std::ostringstream s;
    for (const HufPoint& p : curve.points) {
        s << std::fixed << std::setprecision(4) << p.ratio << " " << std::defaultfloat
          << std::setprecision(17) << p.f_weight << "\n";
    }
    return s.str();
}

inline void write_curve(const std::string& path, const HUFCurve& curve) {
    pipeline_detail::write_text_atomic(path, format_curve(curve));
}

}  // namespace uedkl
