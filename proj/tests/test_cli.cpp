#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uedkl/uedkl.hpp"

using namespace uedkl;
namespace fs = std::filesystem;

namespace {

struct CliDir {
    fs::path path;
    explicit CliDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("uedkl_cli_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~CliDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// Runs the installed binary, captures combined stdout+stderr, returns the
// exit code.
int run_cli(const std::string& args, const std::string& capture_path, std::string* output) {
    const std::string cmd =
        std::string(UEDKL_CLI_PATH) + " " + args + " > " + capture_path + " 2>&1";
    const int raw = std::system(cmd.c_str());
    REQUIRE(raw != -1);
    REQUIRE(WIFEXITED(raw));
    if (output) {
        std::ifstream in(capture_path, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        *output = ss.str();
    }
    return WEXITSTATUS(raw);
}

std::string slurp_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

size_t line_count(const std::string& text) {
    size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

}  // namespace

TEST_CASE("usage errors exit with code 2", "[cli]") {
    CliDir dir("usage");
    std::string out;
    CHECK(run_cli("", dir.file("o1"), &out) == 2);
    CHECK(run_cli("frobnicate", dir.file("o2"), &out) == 2);
    CHECK(run_cli("synth --definitely-not-a-flag", dir.file("o3"), &out) == 2);
    CHECK(run_cli("predict --dir x", dir.file("o4"), &out) == 2);  // missing --out
    CHECK(run_cli("--help", dir.file("o5"), &out) == 0);
    CHECK(out.find("synth") != std::string::npos);
    CHECK(out.find("train-base") != std::string::npos);
}

TEST_CASE("synth is deterministic from the command line", "[cli]") {
    CliDir dir("synth");
    std::string out;
    REQUIRE(run_cli("synth --out " + dir.file("a.csv") + " --seed 7 --n 20",
                    dir.file("o1"), &out) == 0);
    CHECK(out.find("100 records") != std::string::npos);
    REQUIRE(run_cli("synth --out " + dir.file("b.csv") + " --seed 7 --n 20",
                    dir.file("o2"), &out) == 0);
    CHECK(slurp_file(dir.file("a.csv")) == slurp_file(dir.file("b.csv")));
    CHECK(ingest_csv(dir.file("a.csv")).records.size() == 100);

    REQUIRE(run_cli("synth --out " + dir.file("c.csv") + " --seed 8 --n 20",
                    dir.file("o3"), &out) == 0);
    CHECK(slurp_file(dir.file("a.csv")) != slurp_file(dir.file("c.csv")));
}

TEST_CASE("prep failures use the documented exit codes", "[cli]") {
    CliDir dir("preperr");
    std::string out;
    CHECK(run_cli("prep --data " + dir.file("missing.csv") + " --out " + dir.file("run"),
                  dir.file("o1"), &out) == 1);
    CHECK(out.find("error") != std::string::npos);

    std::ofstream cfg(dir.file("bad.json"));
    cfg << "{\"not_a_section\": {}}";
    cfg.close();
    std::ofstream data(dir.file("d.csv"));
    data << "payload,label\n";
    for (int i = 0; i < 12; ++i) data << "x" << i << ",a\n";
    for (int i = 0; i < 12; ++i) data << "y" << i << ",b\n";
    data.close();
    CHECK(run_cli("prep --data " + dir.file("d.csv") + " --config " + dir.file("bad.json") +
                      " --out " + dir.file("run"),
                  dir.file("o2"), &out) == 2);
    CHECK(out.find("configuration error") != std::string::npos);
}

TEST_CASE("the full pipeline runs through the binary", "[cli]") {
    CliDir dir("smoke");
    const std::string run = dir.file("run");
    std::string out;

    RunConfig cfg;
    cfg.token_mode = TokenMode::words;
    cfg.max_len = 24;
    cfg.vocab_size = 200;
    cfg.enc_layers = 1;
    cfg.enc_heads = 2;
    cfg.enc_dim = 8;
    cfg.pool_dim = 6;
    cfg.gp_units = 3;
    cfg.gp_inducing = 4;
    cfg.t_train = 3;
    cfg.t_eval = 4;
    cfg.num_learners = 2;
    cfg.ens_dim = 6;
    cfg.batch_size = 16;
    cfg.epochs_base = 2;
    cfg.epochs_ensemble = 3;
    cfg.unseen_classes = {"code_injection"};
    cfg.master_seed = 99;
    save_config(cfg, dir.file("cfg.json"));

    REQUIRE(run_cli("synth --out " + dir.file("corpus.csv") + " --seed 99 --n 14",
                    dir.file("o1"), &out) == 0);
    REQUIRE(run_cli("prep --data " + dir.file("corpus.csv") + " --config " +
                        dir.file("cfg.json") + " --out " + run,
                    dir.file("o2"), &out) == 0);
    CHECK(out.find("4 classes") != std::string::npos);

    REQUIRE(run_cli("train-base --dir " + run + " --jobs 2", dir.file("o3"), &out) == 0);
    CHECK(out.find("learner 0") != std::string::npos);
    CHECK(out.find("learner 1") != std::string::npos);
    CHECK(fs::exists(run + "/base_0.ckpt"));
    CHECK(fs::exists(run + "/base_1.ckpt"));

    REQUIRE(run_cli("predict --dir " + run + " --split train --out " + dir.file("pt.jsonl"),
                    dir.file("o4"), &out) == 0);
    REQUIRE(run_cli("predict --dir " + run + " --split val --out " + dir.file("pv.jsonl"),
                    dir.file("o5"), &out) == 0);
    REQUIRE(run_cli("train-ensemble --dir " + run + " --train " + dir.file("pt.jsonl") +
                        " --val " + dir.file("pv.jsonl"),
                    dir.file("o6"), &out) == 0);
    CHECK(fs::exists(run + "/ensemble.ckpt"));

    REQUIRE(run_cli("predict --dir " + run + " --split test --ensemble " + run +
                        "/ensemble.ckpt --out " + dir.file("ptest.jsonl"),
                    dir.file("o7"), &out) == 0);
    REQUIRE(run_cli("predict --dir " + run + " --split unseen --ensemble " + run +
                        "/ensemble.ckpt --out " + dir.file("pu.jsonl"),
                    dir.file("o8"), &out) == 0);

    REQUIRE(run_cli("evaluate --dir " + run + " --preds " + dir.file("ptest.jsonl") + " " +
                        dir.file("pu.jsonl"),
                    dir.file("o9"), &out) == 0);
    CHECK(out.find("accuracy:") != std::string::npos);
    CHECK(out.find("unseen: n=14") != std::string::npos);

    REQUIRE(run_cli("curve --dir " + run + " --preds " + dir.file("ptest.jsonl") + " " +
                        dir.file("pu.jsonl") + " --out " + dir.file("curve.txt") +
                        " --baseline " + dir.file("base.txt"),
                    dir.file("o10"), &out) == 0);
    CHECK(line_count(slurp_file(dir.file("curve.txt"))) == 21);
    CHECK(line_count(slurp_file(dir.file("base.txt"))) == 21);

    // Without cached learner blocks stage 2 must refuse to train.
    REQUIRE(run_cli("predict --dir " + run + " --split train --no-cache --out " +
                        dir.file("bare.jsonl"),
                    dir.file("o11"), &out) == 0);
    CHECK(slurp_file(dir.file("bare.jsonl")).find("learners") == std::string::npos);
    CHECK(run_cli("train-ensemble --dir " + run + " --train " + dir.file("bare.jsonl"),
                  dir.file("o12"), &out) == 1);
}

TEST_CASE("evaluate reports exact ones for perfect predictions", "[cli]") {
    CliDir dir("perfect");
    const std::string run = dir.file("run");
    RunConfig cfg;
    cfg.token_mode = TokenMode::words;
    cfg.unseen_classes = {};
    cfg.master_seed = 3;
    prep_run(cfg, synth_generate(3, 12), run);

    const std::vector<std::string> labels = load_run_labels(run);
    std::vector<PredictionRecord> perfect;
    for (size_t i = 0; i < 12; ++i) {
        PredictionRecord r;
        r.id = static_cast<int64_t>(i);
        r.label = labels[i % labels.size()];
        r.pred = r.label;
        r.probs.assign(labels.size(), 1.0 / static_cast<double>(labels.size()));
        r.vars.assign(labels.size(), 0.001);
        for (double v : r.vars) r.u += v;
        perfect.push_back(std::move(r));
    }
    write_predictions(dir.file("perfect.jsonl"), perfect);

    std::string out;
    REQUIRE(run_cli("evaluate --dir " + run + " --preds " + dir.file("perfect.jsonl"),
                    dir.file("o1"), &out) == 0);
    CHECK(out.find("accuracy: 1.0000") != std::string::npos);
    CHECK(out.find("macro: precision 1.0000, recall 1.0000, f1 1.0000") != std::string::npos);
    CHECK(out.find("weighted: precision 1.0000, recall 1.0000, f1 1.0000") !=
          std::string::npos);
}
