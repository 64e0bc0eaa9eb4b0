// Command-line driver for the detection pipeline.
//
// Subcommands:
//   synth           generate the synthetic labeled corpus
//   prep            split a corpus and build the vocabulary for a run dir
//   train-base      stage 1: train the base learners (optionally in parallel)
//   predict         score a split, caching per-learner blocks for stage 2
//   train-ensemble  stage 2: train the attention combiner from cached files
//   evaluate        metrics plus uncertainty-group summaries
//   curve           high-uncertainty correction curve and its random baseline
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <exception>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "uedkl/uedkl.hpp"

namespace {

using namespace uedkl;

std::string fmt4(double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
}

void print_group(const char* name, const GroupStats& g) {
    std::cout << "  " << name << ": n=" << g.count;
    if (g.count > 0)
        std::cout << " mean=" << fmt4(g.mean) << " median=" << fmt4(g.median)
                  << " q1=" << fmt4(g.q1) << " q3=" << fmt4(g.q3);
    std::cout << "\n";
}

std::vector<PredictionRecord> read_many(const std::vector<std::string>& paths) {
    std::vector<PredictionRecord> all;
    for (const std::string& p : paths) {
        std::vector<PredictionRecord> part = read_predictions(p);
        all.insert(all.end(), part.begin(), part.end());
    }
    return all;
}

int run(int argc, char** argv) {
    CLI::App app{"uncertainty-aware ensemble web attack detector"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic labeled corpus");
    std::string synth_out = "corpus.csv";
    uint64_t synth_seed = 1;
    int synth_n = 100;
    synth->add_option("--out", synth_out, "output csv path");
    synth->add_option("--seed", synth_seed, "corpus seed");
    synth->add_option("--n", synth_n, "records per class");

    // prep
    auto* prep = app.add_subcommand("prep", "build vocabulary and splits in a run directory");
    std::string prep_data, prep_format, prep_dir = "run", prep_config;
    uint64_t prep_seed = 0;
    prep->add_option("--data", prep_data, "input corpus (csv or jsonl)")->required();
    prep->add_option("--format", prep_format, "force input format: csv or jsonl");
    prep->add_option("--out", prep_dir, "run directory to create");
    prep->add_option("--config", prep_config, "run configuration json");
    prep->add_option("--seed", prep_seed, "override the master seed");

    // train-base
    auto* tbase = app.add_subcommand("train-base", "train the stage-1 base learners");
    std::string tbase_dir = "run";
    int tbase_learner = -1;
    int tbase_jobs = 1;
    tbase->add_option("--dir", tbase_dir, "run directory");
    tbase->add_option("--learner", tbase_learner, "train only this learner id");
    tbase->add_option("--jobs", tbase_jobs, "parallel training jobs");

    // predict
    auto* predict = app.add_subcommand("predict", "score a split and write a prediction file");
    std::string pr_dir = "run", pr_split = "test", pr_out, pr_ensemble;
    bool pr_no_cache = false;
    predict->add_option("--dir", pr_dir, "run directory");
    predict->add_option("--split", pr_split, "split name: train, val, test, or unseen");
    predict->add_option("--out", pr_out, "output prediction file")->required();
    predict->add_option("--ensemble", pr_ensemble,
                        "ensemble checkpoint (omit for uniform weighting)");
    predict->add_flag("--no-cache", pr_no_cache, "omit per-learner blocks");

    // train-ensemble
    auto* tens = app.add_subcommand("train-ensemble", "train the stage-2 attention combiner");
    std::string tens_dir = "run", tens_train, tens_val;
    tens->add_option("--dir", tens_dir, "run directory");
    tens->add_option("--train", tens_train, "cached training predictions")->required();
    tens->add_option("--val", tens_val, "cached validation predictions");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "report metrics for prediction files");
    std::string ev_dir = "run";
    std::vector<std::string> ev_preds;
    evaluate->add_option("--dir", ev_dir, "run directory (supplies the label table)");
    evaluate->add_option("--preds", ev_preds, "prediction files to score together")
        ->required()
        ->expected(-1);

    // curve
    auto* curve = app.add_subcommand("curve", "write the uncertainty correction curve");
    std::string cu_dir = "run", cu_out = "curve.txt", cu_baseline;
    std::vector<std::string> cu_preds;
    uint64_t cu_seed = 9001;
    curve->add_option("--dir", cu_dir, "run directory (supplies the label table)");
    curve->add_option("--preds", cu_preds, "prediction files to score together")
        ->required()
        ->expected(-1);
    curve->add_option("--out", cu_out, "curve output path");
    curve->add_option("--baseline", cu_baseline, "random-correction baseline output path");
    curve->add_option("--seed", cu_seed, "baseline sampling seed");

    // The usual parse macro maps parse failures to CLI11's own exit codes;
    // this tool promises usage errors on exit code 2 specifically.
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (synth->parsed()) {
        std::vector<DatasetRecord> corpus = synth_generate(synth_seed, synth_n);
        write_csv(synth_out, corpus);
        std::cout << "wrote " << corpus.size() << " records to " << synth_out << "\n";
        return 0;
    }

    if (prep->parsed()) {
        RunConfig cfg = prep_config.empty() ? RunConfig{} : load_config(prep_config);
        if (prep->count("--seed") > 0) cfg.master_seed = prep_seed;
        IngestResult in = ingest(prep_data, prep_format);
        if (in.skipped > 0)
            std::cerr << "warning: skipped " << in.skipped << " malformed input lines\n";
        PrepSummary sum = prep_run(cfg, in.records, prep_dir);
        std::cout << "train " << sum.train << ", val " << sum.val << ", test " << sum.test
                  << ", unseen " << sum.unseen << "; vocabulary " << sum.vocab_size
                  << " tokens, " << sum.labels.size() << " classes\n";
        return 0;
    }

    if (tbase->parsed()) {
        if (tbase_learner >= 0) {
            TrainBaseResult r = train_base_run(tbase_dir, tbase_learner);
            std::cout << "learner " << tbase_learner << ": best epoch " << r.best_epoch
                      << ", final val loss "
                      << (r.history.empty() ? 0.0
                                            : r.history[static_cast<size_t>(r.best_epoch)].val_loss)
                      << "\n";
        } else {
            std::vector<TrainBaseResult> rs = train_base_all(tbase_dir, tbase_jobs);
            for (size_t i = 0; i < rs.size(); ++i)
                std::cout << "learner " << i << ": best epoch " << rs[i].best_epoch << "\n";
        }
        return 0;
    }

    if (predict->parsed()) {
        PredictOptions opt;
        opt.split = pr_split;
        opt.ensemble_path = pr_ensemble;
        opt.include_learners = !pr_no_cache;
        std::vector<PredictionRecord> records = predict_run(pr_dir, opt);
        write_predictions(pr_out, records);
        std::cout << "wrote " << records.size() << " predictions to " << pr_out << "\n";
        return 0;
    }

    if (tens->parsed()) {
        TrainEnsembleResult r = train_ensemble_run(tens_dir, tens_train, tens_val);
        std::cout << "ensemble: best epoch " << r.best_epoch << "\n";
        return 0;
    }

    if (evaluate->parsed()) {
        EvalOutput out = evaluate_records(read_many(ev_preds), load_run_labels(ev_dir));
        const EvalReport& r = out.report;
        int64_t items = 0;
        for (const auto& row : r.confusion)
            for (int64_t v : row) items += v;
        std::cout << "items: " << items << "\n";
        std::cout << "accuracy: " << fmt4(r.acc) << "\n";
        std::cout << "macro: precision " << fmt4(r.p_macro) << ", recall " << fmt4(r.r_macro)
                  << ", f1 " << fmt4(r.f_macro) << "\n";
        std::cout << "weighted: precision " << fmt4(r.p_weight) << ", recall "
                  << fmt4(r.r_weight) << ", f1 " << fmt4(r.f_weight) << "\n";
        for (size_t c = 0; c < out.labels.size(); ++c) {
            int64_t support = 0;
            for (int64_t v : r.confusion[c]) support += v;
            std::cout << "  class " << out.labels[c] << ": precision "
                      << fmt4(r.precision_per_class[c]) << ", recall "
                      << fmt4(r.recall_per_class[c]) << ", f1 " << fmt4(r.f1_per_class[c])
                      << ", support " << support << "\n";
        }
        std::cout << "uncertainty groups:\n";
        print_group("correct", out.groups.correct);
        print_group("incorrect", out.groups.incorrect);
        print_group("unseen", out.groups.unseen);
        return 0;
    }

    if (curve->parsed()) {
        CurveOutput out = curve_records(read_many(cu_preds), load_run_labels(cu_dir), cu_seed);
        write_curve(cu_out, out.curve);
        std::cout << "wrote " << out.curve.points.size() << " curve points to " << cu_out << "\n";
        if (!cu_baseline.empty()) {
            write_curve(cu_baseline, out.baseline);
            std::cout << "wrote baseline to " << cu_baseline << "\n";
        }
        return 0;
    }

    return 2;  // unreachable: require_subcommand enforces one match
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const uedkl::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
